#include "uqseg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace uqseg {

std::string Shape4::str() const {
  return "[" + std::to_string(n) + "x" + std::to_string(c) + "x" + std::to_string(h) + "x" +
         std::to_string(w) + "]";
}

Tensor::Tensor(Shape4 shape, double fill) : shape_(shape), data_(shape.size(), fill) {}

Tensor::Tensor(Shape4 shape, std::vector<double> values) : shape_(shape), data_(std::move(values)) {
  if (data_.size() != shape_.size()) {
    throw std::invalid_argument("tensor: value count does not match shape " + shape_.str());
  }
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

Tensor& Tensor::operator+=(const Tensor& other) {
  if (!(other.shape_ == shape_)) {
    throw std::invalid_argument("tensor: shape mismatch " + shape_.str() + " vs " + other.shape_.str());
  }
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

Tensor& Tensor::operator*=(double s) {
  for (double& v : data_) v *= s;
  return *this;
}

double Tensor::sum() const {
  double s = 0.0;
  for (double v : data_) s += v;
  return s;
}

double Tensor::squared_norm() const {
  double s = 0.0;
  for (double v : data_) s += v * v;
  return s;
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Tensor Tensor::slice_batch(std::size_t begin, std::size_t end) const {
  if (begin > end || end > shape_.n) throw std::out_of_range("tensor: batch slice out of range");
  Shape4 s = shape_;
  s.n = end - begin;
  const std::size_t per = shape_.c * shape_.h * shape_.w;
  std::vector<double> v(data_.begin() + static_cast<std::ptrdiff_t>(begin * per),
                        data_.begin() + static_cast<std::ptrdiff_t>(end * per));
  return Tensor(s, std::move(v));
}

Tensor Tensor::slice_channels(std::size_t begin, std::size_t end) const {
  if (begin > end || end > shape_.c) throw std::out_of_range("tensor: channel slice out of range");
  Shape4 s = shape_;
  s.c = end - begin;
  Tensor out(s);
  const std::size_t hw = shape_.spatial();
  for (std::size_t n = 0; n < shape_.n; ++n) {
    for (std::size_t c = begin; c < end; ++c) {
      std::copy_n(data_.data() + index(n, c, 0, 0), hw, out.data() + out.index(n, c - begin, 0, 0));
    }
  }
  return out;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  const Shape4& sa = a.shape();
  const Shape4& sb = b.shape();
  if (sa.n != sb.n || sa.h != sb.h || sa.w != sb.w) {
    throw std::invalid_argument("concat_channels: incompatible shapes " + sa.str() + " and " + sb.str());
  }
  Tensor out({sa.n, sa.c + sb.c, sa.h, sa.w});
  const std::size_t hw = sa.spatial();
  for (std::size_t n = 0; n < sa.n; ++n) {
    std::copy_n(a.data() + a.index(n, 0, 0, 0), sa.c * hw, out.data() + out.index(n, 0, 0, 0));
    std::copy_n(b.data() + b.index(n, 0, 0, 0), sb.c * hw, out.data() + out.index(n, sa.c, 0, 0));
  }
  return out;
}

LabelMap::LabelMap(std::size_t n, std::size_t h, std::size_t w, int fill)
    : n_(n), h_(h), w_(w), data_(n * h * w, fill) {}

LabelMap::LabelMap(std::size_t n, std::size_t h, std::size_t w, std::vector<int> values)
    : n_(n), h_(h), w_(w), data_(std::move(values)) {
  if (data_.size() != n * h * w) throw std::invalid_argument("label map: value count does not match shape");
}

LabelMap LabelMap::slice_batch(std::size_t begin, std::size_t end) const {
  if (begin > end || end > n_) throw std::out_of_range("label map: batch slice out of range");
  const std::size_t per = spatial();
  std::vector<int> v(data_.begin() + static_cast<std::ptrdiff_t>(begin * per),
                     data_.begin() + static_cast<std::ptrdiff_t>(end * per));
  return LabelMap(end - begin, h_, w_, std::move(v));
}

Tensor softmax_channels(const Tensor& logits) {
  const Shape4& s = logits.shape();
  Tensor out(s);
  const std::size_t hw = s.spatial();
  for (std::size_t n = 0; n < s.n; ++n) {
    const double* in = logits.data() + logits.index(n, 0, 0, 0);
    double* o = out.data() + out.index(n, 0, 0, 0);
    for (std::size_t p = 0; p < hw; ++p) {
      double mx = in[p];
      for (std::size_t c = 1; c < s.c; ++c) mx = std::max(mx, in[c * hw + p]);
      double z = 0.0;
      for (std::size_t c = 0; c < s.c; ++c) {
        const double e = std::exp(in[c * hw + p] - mx);
        o[c * hw + p] = e;
        z += e;
      }
      for (std::size_t c = 0; c < s.c; ++c) o[c * hw + p] /= z;
    }
  }
  return out;
}

Tensor softmax_channels_backward(const Tensor& probs, const Tensor& grad_probs) {
  const Shape4& s = probs.shape();
  Tensor out(s);
  const std::size_t hw = s.spatial();
  for (std::size_t n = 0; n < s.n; ++n) {
    const double* p = probs.data() + probs.index(n, 0, 0, 0);
    const double* g = grad_probs.data() + grad_probs.index(n, 0, 0, 0);
    double* o = out.data() + out.index(n, 0, 0, 0);
    for (std::size_t i = 0; i < hw; ++i) {
      double dot = 0.0;
      for (std::size_t c = 0; c < s.c; ++c) dot += p[c * hw + i] * g[c * hw + i];
      for (std::size_t c = 0; c < s.c; ++c) o[c * hw + i] = p[c * hw + i] * (g[c * hw + i] - dot);
    }
  }
  return out;
}

LabelMap argmax_channels(const Tensor& t) {
  const Shape4& s = t.shape();
  LabelMap out(s.n, s.h, s.w);
  const std::size_t hw = s.spatial();
  for (std::size_t n = 0; n < s.n; ++n) {
    const double* v = t.data() + t.index(n, 0, 0, 0);
    for (std::size_t p = 0; p < hw; ++p) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < s.c; ++c) {
        if (v[c * hw + p] > v[best * hw + p]) best = c;
      }
      out[n * hw + p] = static_cast<int>(best);
    }
  }
  return out;
}

}  // namespace uqseg
