#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace uqseg {

/// NCHW extents. Vector-valued data (e.g. the two-moons MLP) uses h = w = 1.
struct Shape4 {
  std::size_t n = 0;
  std::size_t c = 0;
  std::size_t h = 0;
  std::size_t w = 0;

  std::size_t size() const { return n * c * h * w; }
  std::size_t spatial() const { return h * w; }
  bool operator==(const Shape4&) const = default;
  std::string str() const;
};

/// Dense row-major NCHW array of doubles.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape4 shape, double fill = 0.0);
  Tensor(Shape4 shape, std::vector<double> values);

  const Shape4& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::size_t index(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return ((n * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }
  double& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data_[index(n, c, h, w)];
  }
  double at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[index(n, c, h, w)];
  }

  /// Contiguous H*W plane for sample n, channel c.
  std::span<double> plane(std::size_t n, std::size_t c) {
    return {data_.data() + index(n, c, 0, 0), shape_.spatial()};
  }
  std::span<const double> plane(std::size_t n, std::size_t c) const {
    return {data_.data() + index(n, c, 0, 0), shape_.spatial()};
  }

  void fill(double v);
  Tensor& operator+=(const Tensor& other);
  Tensor& operator*=(double s);
  double sum() const;
  double squared_norm() const;
  bool all_finite() const;

  /// Samples [begin, end) along the batch axis.
  Tensor slice_batch(std::size_t begin, std::size_t end) const;
  /// Channels [begin, end) along the channel axis.
  Tensor slice_channels(std::size_t begin, std::size_t end) const;

 private:
  Shape4 shape_;
  std::vector<double> data_;
};

/// Concatenate along the channel axis (batch and spatial extents must agree).
Tensor concat_channels(const Tensor& a, const Tensor& b);

/// Integer class-index map of shape N x H x W.
class LabelMap {
 public:
  LabelMap() = default;
  LabelMap(std::size_t n, std::size_t h, std::size_t w, int fill = 0);
  LabelMap(std::size_t n, std::size_t h, std::size_t w, std::vector<int> values);

  std::size_t n() const { return n_; }
  std::size_t h() const { return h_; }
  std::size_t w() const { return w_; }
  std::size_t size() const { return data_.size(); }
  std::size_t spatial() const { return h_ * w_; }

  int& at(std::size_t n, std::size_t y, std::size_t x) { return data_[(n * h_ + y) * w_ + x]; }
  int at(std::size_t n, std::size_t y, std::size_t x) const { return data_[(n * h_ + y) * w_ + x]; }
  int& operator[](std::size_t i) { return data_[i]; }
  int operator[](std::size_t i) const { return data_[i]; }
  std::span<const int> values() const { return data_; }
  std::span<const int> image(std::size_t n) const { return {data_.data() + n * spatial(), spatial()}; }
  std::span<int> image(std::size_t n) { return {data_.data() + n * spatial(), spatial()}; }

  LabelMap slice_batch(std::size_t begin, std::size_t end) const;
  bool operator==(const LabelMap&) const = default;

 private:
  std::size_t n_ = 0, h_ = 0, w_ = 0;
  std::vector<int> data_;
};

/// Per-pixel softmax over the channel axis.
Tensor softmax_channels(const Tensor& logits);
/// Backpropagate a gradient w.r.t. softmax probabilities to the logits.
Tensor softmax_channels_backward(const Tensor& probs, const Tensor& grad_probs);
/// Per-pixel argmax over the channel axis.
LabelMap argmax_channels(const Tensor& t);

}  // namespace uqseg
