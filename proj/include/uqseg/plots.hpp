#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "uqseg/calibration.hpp"
#include "uqseg/experiment.hpp"
#include "uqseg/image_io.hpp"

namespace uqseg {

/// Minimal RGB raster for axis-free charts.
class Canvas {
 public:
  Canvas(std::size_t width, std::size_t height, std::uint8_t gray = 255);
  void set(long x, long y, std::array<std::uint8_t, 3> rgb);
  void fill_rect(long x0, long y0, long x1, long y1, std::array<std::uint8_t, 3> rgb);
  void line(long x0, long y0, long x1, long y1, std::array<std::uint8_t, 3> rgb);
  const Image8& image() const { return img_; }

 private:
  Image8 img_;
};

/// Bars of per-bin accuracy against the diagonal; CSV written alongside.
void write_reliability_diagram(const std::filesystem::path& png, const ReliabilityBins& bins);

struct SeriesPoint {
  std::string label;
  double mean = 0.0;
  double sd = 0.0;
};
/// Points in the given order, joined by a line, with +-sd error bars.
void write_line_plot(const std::filesystem::path& png, const std::vector<SeriesPoint>& points);

/// One row of panels: input | prediction | ground truth | epistemic | aleatoric.
struct PanelSet {
  std::size_t h = 0;
  std::size_t w = 0;
  std::vector<double> input;
  std::vector<double> prediction;
  std::vector<double> ground_truth;
  std::vector<double> epistemic;
  std::vector<double> aleatoric;
};
inline const std::vector<std::string> kPanelOrder{"input", "prediction", "ground_truth", "epistemic", "aleatoric"};
/// Each panel is min-max scaled independently; rows stack vertically.
void write_image_grid(const std::filesystem::path& png, const std::vector<PanelSet>& rows);

struct PlotInputs {
  std::vector<SweepRow> rows;
  std::vector<std::pair<std::string, ReliabilityBins>> reliability;
  std::vector<PanelSet> panels;
};

/// Reliability diagrams, metric-vs-axis plots (seed mean +- sd over non-aggregate
/// rows with status ok) and the panel grid, each with its CSV. Returns written paths.
std::vector<std::filesystem::path> emit_plots(const PlotInputs& in, const std::filesystem::path& dir);

}  // namespace uqseg
