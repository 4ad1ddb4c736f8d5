#include "uqseg/plots.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <stdexcept>

namespace uqseg {

namespace {

using Rgb = std::array<std::uint8_t, 3>;
constexpr Rgb kBlack{0, 0, 0};
constexpr Rgb kGray{170, 170, 170};
constexpr Rgb kBlue{40, 90, 200};
constexpr Rgb kRed{200, 50, 40};

std::ofstream open_csv(const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write '" + path.string() + "'");
  return os;
}

}  // namespace

Canvas::Canvas(std::size_t width, std::size_t height, std::uint8_t gray)
    : img_{width, height, 3, std::vector<std::uint8_t>(width * height * 3, gray)} {}

void Canvas::set(long x, long y, Rgb rgb) {
  if (x < 0 || y < 0 || x >= static_cast<long>(img_.width) || y >= static_cast<long>(img_.height)) return;
  for (std::size_t c = 0; c < 3; ++c) img_.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x), c) = rgb[c];
}

void Canvas::fill_rect(long x0, long y0, long x1, long y1, Rgb rgb) {
  if (x0 > x1) std::swap(x0, x1);
  if (y0 > y1) std::swap(y0, y1);
  for (long y = y0; y <= y1; ++y) {
    for (long x = x0; x <= x1; ++x) set(x, y, rgb);
  }
}

void Canvas::line(long x0, long y0, long x1, long y1, Rgb rgb) {
  const long dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
  const long sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
  long err = dx + dy;
  while (true) {
    set(x0, y0, rgb);
    if (x0 == x1 && y0 == y1) break;
    const long e2 = 2 * err;
    if (e2 >= dy) {
      err += dy;
      x0 += sx;
    }
    if (e2 <= dx) {
      err += dx;
      y0 += sy;
    }
  }
}

void write_reliability_diagram(const std::filesystem::path& png, const ReliabilityBins& bins) {
  constexpr long size = 300, margin = 20, plot = size - 2 * margin;
  Canvas cv(size, size);
  cv.line(margin, size - margin, size - margin, size - margin, kBlack);
  cv.line(margin, margin, margin, size - margin, kBlack);
  const double bw = static_cast<double>(plot) / static_cast<double>(bins.n_bins);
  for (std::size_t m = 0; m < bins.n_bins; ++m) {
    if (bins.count[m] == 0) continue;
    const long x0 = margin + static_cast<long>(std::lround(bw * static_cast<double>(m))) + 1;
    const long x1 = margin + static_cast<long>(std::lround(bw * static_cast<double>(m + 1))) - 1;
    const long top = size - margin - static_cast<long>(std::lround(bins.accuracy(m) * plot));
    cv.fill_rect(x0, top, x1, size - margin - 1, kBlue);
    const long conf = size - margin - static_cast<long>(std::lround(bins.confidence(m) * plot));
    cv.line(x0, conf, x1, conf, kRed);
  }
  cv.line(margin, size - margin, size - margin, margin, kGray);
  write_png(png, cv.image());
  std::filesystem::path csv = png;
  write_reliability_csv(csv.replace_extension(".csv"), bins);
}

void write_line_plot(const std::filesystem::path& png, const std::vector<SeriesPoint>& points) {
  if (points.empty()) throw std::invalid_argument("write_line_plot: no points");
  constexpr long width = 400, height = 300, margin = 25;
  Canvas cv(width, height);
  cv.line(margin, height - margin, width - margin, height - margin, kBlack);
  cv.line(margin, margin, margin, height - margin, kBlack);
  double lo = points.front().mean, hi = lo;
  for (const SeriesPoint& p : points) {
    if (!std::isfinite(p.mean)) continue;
    const double sd = std::isfinite(p.sd) ? p.sd : 0.0;
    lo = std::min(lo, p.mean - sd);
    hi = std::max(hi, p.mean + sd);
  }
  if (!std::isfinite(lo) || !std::isfinite(hi)) lo = 0.0, hi = 1.0;
  if (hi - lo < 1e-12) {
    lo -= 0.5;
    hi += 0.5;
  }
  const double span = hi - lo;
  auto ypix = [&](double v) { return height - margin - static_cast<long>(std::lround((v - lo) / span * (height - 2 * margin))); };
  auto xpix = [&](std::size_t i) {
    if (points.size() == 1) return static_cast<long>(width / 2);
    return margin + 10 + static_cast<long>(i * static_cast<std::size_t>(width - 2 * margin - 20) / (points.size() - 1));
  };
  for (std::size_t i = 0; i < points.size(); ++i) {
    const SeriesPoint& p = points[i];
    if (!std::isfinite(p.mean)) continue;
    const long x = xpix(i), y = ypix(p.mean);
    const double sd = std::isfinite(p.sd) ? p.sd : 0.0;
    cv.line(x, ypix(p.mean - sd), x, ypix(p.mean + sd), kRed);
    cv.line(x - 3, ypix(p.mean - sd), x + 3, ypix(p.mean - sd), kRed);
    cv.line(x - 3, ypix(p.mean + sd), x + 3, ypix(p.mean + sd), kRed);
    cv.fill_rect(x - 2, y - 2, x + 2, y + 2, kBlue);
    if (i > 0 && std::isfinite(points[i - 1].mean)) cv.line(xpix(i - 1), ypix(points[i - 1].mean), x, y, kBlue);
  }
  write_png(png, cv.image());
  std::filesystem::path csv = png;
  std::ofstream os = open_csv(csv.replace_extension(".csv"));
  os << "label,mean,sd\n";
  for (const SeriesPoint& p : points) os << p.label << ',' << format_number(p.mean) << ',' << format_number(p.sd) << '\n';
}

void write_image_grid(const std::filesystem::path& png, const std::vector<PanelSet>& rows) {
  if (rows.empty()) throw std::invalid_argument("write_image_grid: no rows");
  const std::size_t h = rows.front().h, w = rows.front().w, gap = 2;
  const std::size_t cols = kPanelOrder.size();
  Canvas cv(cols * w + (cols + 1) * gap, rows.size() * h + (rows.size() + 1) * gap);
  std::filesystem::path csv_path = png;
  std::ofstream csv = open_csv(csv_path.replace_extension(".csv"));
  csv << "row,panel,y,x,value\n";
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const PanelSet& ps = rows[r];
    if (ps.h != h || ps.w != w) throw std::invalid_argument("write_image_grid: rows differ in size");
    const std::vector<const std::vector<double>*> panels{&ps.input, &ps.prediction, &ps.ground_truth, &ps.epistemic,
                                                         &ps.aleatoric};
    for (std::size_t c = 0; c < cols; ++c) {
      const std::vector<double>& v = *panels[c];
      if (v.size() != h * w) throw std::invalid_argument("write_image_grid: panel size mismatch");
      const auto [mn, mx] = std::minmax_element(v.begin(), v.end());
      const double lo = *mn, span = *mx - *mn;
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
          const double t = span > 0 ? (v[y * w + x] - lo) / span : 0.0;
          const auto g = static_cast<std::uint8_t>(std::lround(255.0 * t));
          cv.set(static_cast<long>(gap + c * (w + gap) + x), static_cast<long>(gap + r * (h + gap) + y), {g, g, g});
          csv << r << ',' << kPanelOrder[c] << ',' << y << ',' << x << ',' << format_number(v[y * w + x]) << '\n';
        }
      }
    }
  }
  write_png(png, cv.image());
}

std::vector<std::filesystem::path> emit_plots(const PlotInputs& in, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir)) throw std::runtime_error("cannot create plot directory '" + dir.string() + "'");
  std::vector<std::filesystem::path> written;
  for (const auto& [name, bins] : in.reliability) {
    const auto p = dir / ("reliability_" + name + ".png");
    write_reliability_diagram(p, bins);
    written.push_back(p);
  }
  std::vector<std::string> order;
  std::map<std::string, std::vector<MetricsRow>> groups;
  for (const SweepRow& r : in.rows) {
    if (r.status != "ok") continue;
    if (!groups.count(r.axis_value)) order.push_back(r.axis_value);
    groups[r.axis_value].push_back(r.metrics);
  }
  if (!order.empty()) {
    const std::vector<std::pair<std::string, double MetricsRow::*>> metrics{{"f1", &MetricsRow::f1},
                                                                           {"epistemic", &MetricsRow::epistemic},
                                                                           {"entropy", &MetricsRow::entropy},
                                                                           {"aleatoric", &MetricsRow::aleatoric},
                                                                           {"ece", &MetricsRow::ece}};
    for (const auto& [name, field] : metrics) {
      std::vector<SeriesPoint> pts;
      for (const std::string& v : order) {
        const auto& g = groups[v];
        double mean = 0.0;
        for (const MetricsRow& r : g) mean += r.*field;
        mean /= static_cast<double>(g.size());
        double var = 0.0;
        for (const MetricsRow& r : g) var += (r.*field - mean) * (r.*field - mean);
        pts.push_back({v, mean, std::sqrt(var / static_cast<double>(g.size()))});
      }
      const auto p = dir / ("metric_" + name + ".png");
      write_line_plot(p, pts);
      written.push_back(p);
    }
  }
  if (!in.panels.empty()) {
    const auto p = dir / "uncertainty_grid.png";
    write_image_grid(p, in.panels);
    written.push_back(p);
  }
  return written;
}

}  // namespace uqseg
