#include "uqseg/boundary.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace uqseg {

namespace {

constexpr double kProbFloor = 1e-12;
constexpr std::array<Offset, 4> kFourNeighbours{{{-1, 0}, {0, -1}, {0, 1}, {1, 0}}};

std::size_t clamp_coord(long v, std::size_t n) {
  return static_cast<std::size_t>(std::clamp<long>(v, 0, static_cast<long>(n) - 1));
}

// 1-D squared distance transform of f (lower envelope of parabolas rooted
// at the finite entries of f).
void edt_1d(const std::vector<double>& f, std::vector<double>& d, std::vector<int>& v, std::vector<double>& z) {
  const int n = static_cast<int>(f.size());
  constexpr double inf = std::numeric_limits<double>::infinity();
  auto meet = [&f](int q, int r) { return ((f[q] + q * q) - (f[r] + r * r)) / (2.0 * (q - r)); };
  int k = -1;
  for (int q = 0; q < n; ++q) {
    if (f[q] >= inf) continue;
    if (k < 0) {
      k = 0;
      v[0] = q;
      z[0] = -inf;
      z[1] = inf;
      continue;
    }
    double s = meet(q, v[k]);
    while (s <= z[k]) {
      --k;
      s = meet(q, v[k]);
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = inf;
  }
  if (k < 0) {
    std::fill(d.begin(), d.end(), inf);
    return;
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    while (z[k + 1] < q) ++k;
    const double diff = q - v[k];
    d[q] = diff * diff + f[v[k]];
  }
}

}  // namespace

std::vector<std::uint8_t> extract_boundary(std::span<const int> labels, std::size_t h, std::size_t w) {
  if (labels.size() != h * w) throw std::invalid_argument("extract_boundary: label count does not match h*w");
  std::vector<std::uint8_t> out(h * w, 0);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const int self = labels[y * w + x];
      for (const Offset& o : kFourNeighbours) {
        const std::size_t ny = clamp_coord(static_cast<long>(y) + o.dy, h);
        const std::size_t nx = clamp_coord(static_cast<long>(x) + o.dx, w);
        if (labels[ny * w + nx] != self) {
          out[y * w + x] = 1;
          break;
        }
      }
    }
  }
  return out;
}

DistanceField distance_transform(std::span<const std::uint8_t> marked, std::size_t h, std::size_t w) {
  if (marked.size() != h * w) throw std::invalid_argument("distance_transform: mask size does not match h*w");
  constexpr double inf = std::numeric_limits<double>::infinity();
  DistanceField out{h, w, std::vector<double>(h * w, inf), false};
  if (std::none_of(marked.begin(), marked.end(), [](std::uint8_t m) { return m != 0; })) {
    out.degenerate = true;
    return out;
  }
  std::vector<double>& sq = out.values;
  for (std::size_t i = 0; i < h * w; ++i) sq[i] = marked[i] ? 0.0 : inf;

  const std::size_t longest = std::max(h, w);
  std::vector<double> f, d;
  std::vector<int> v(longest);
  std::vector<double> z(longest + 1);
  // columns
  f.resize(h);
  d.resize(h);
  for (std::size_t x = 0; x < w; ++x) {
    for (std::size_t y = 0; y < h; ++y) f[y] = sq[y * w + x];
    edt_1d(f, d, v, z);
    for (std::size_t y = 0; y < h; ++y) sq[y * w + x] = d[y];
  }
  // rows
  f.resize(w);
  d.resize(w);
  for (std::size_t y = 0; y < h; ++y) {
    std::copy_n(sq.begin() + static_cast<std::ptrdiff_t>(y * w), w, f.begin());
    edt_1d(f, d, v, z);
    for (std::size_t x = 0; x < w; ++x) sq[y * w + x] = std::sqrt(d[x]);
  }
  return out;
}

BoundaryContext BoundaryContext::from_labels(std::span<const int> labels, std::size_t h, std::size_t w) {
  BoundaryContext ctx;
  ctx.h = h;
  ctx.w = w;
  ctx.gt_boundary = extract_boundary(labels, h, w);
  ctx.distance = distance_transform(ctx.gt_boundary, h, w);
  return ctx;
}

AblResult active_boundary_loss(const Tensor& probs, const BoundaryContext& ctx) {
  const Shape4& s = probs.shape();
  if (s.n != 1 || s.h != ctx.h || s.w != ctx.w || ctx.distance.values.size() != s.spatial()) {
    throw std::invalid_argument("active_boundary_loss: probability map " + s.str() +
                                " does not match boundary context");
  }
  AblResult r;
  r.grad = Tensor(s);
  r.degenerate = ctx.degenerate();
  if (r.degenerate) return r;

  const std::size_t H = s.h, W = s.w, C = s.c, hw = s.spatial();
  std::vector<double> logp(C * hw);
  for (std::size_t c = 0; c < C; ++c) {
    const auto pc = probs.plane(0, c);
    for (std::size_t i = 0; i < hw; ++i) logp[c * hw + i] = std::log(std::max(pc[i], kProbFloor));
  }
  auto kl = [&](std::size_t i, std::size_t j) {
    double acc = 0.0;
    for (std::size_t c = 0; c < C; ++c) acc += probs[c * hw + i] * (logp[c * hw + i] - logp[c * hw + j]);
    return acc;
  };
  auto neighbour = [&](std::size_t y, std::size_t x, const Offset& o) {
    return clamp_coord(static_cast<long>(y) + o.dy, H) * W + clamp_coord(static_cast<long>(x) + o.dx, W);
  };

  struct Active {
    std::size_t pixel;
    std::size_t y, x;
    std::size_t target;
    double weight;
  };
  std::vector<Active> active;
  const auto& dist = ctx.distance.values;
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      const std::size_t i = y * W + x;
      double max_kl = 0.0;
      for (const Offset& o : kFourNeighbours) max_kl = std::max(max_kl, kl(i, neighbour(y, x, o)));
      if (!(max_kl > ctx.kl_threshold)) continue;
      ++r.pdb_count;
      if (!(dist[i] > 0.0)) continue;
      std::size_t best = kNeighbourOffsets.size();
      double best_d = dist[i];
      for (std::size_t k = 0; k < kNeighbourOffsets.size(); ++k) {
        const double dj = dist[neighbour(y, x, kNeighbourOffsets[k])];
        if (dj < best_d) {
          best_d = dj;
          best = k;
        }
      }
      if (best == kNeighbourOffsets.size()) continue;
      active.push_back({i, y, x, best, std::min(dist[i], ctx.clamp_distance) / ctx.clamp_distance});
    }
  }
  r.active_count = active.size();
  if (active.empty()) return r;

  const double norm = 1.0 / static_cast<double>(active.size());
  const double off_mass = (1.0 - ctx.target_mass) / static_cast<double>(kNeighbourOffsets.size() - 1);
  std::array<double, 8> k_vals{}, q{}, tgt{};
  std::array<std::size_t, 8> nb{};
  for (const Active& a : active) {
    double mx = -INFINITY;
    for (std::size_t k = 0; k < 8; ++k) {
      nb[k] = neighbour(a.y, a.x, kNeighbourOffsets[k]);
      k_vals[k] = kl(a.pixel, nb[k]);
      mx = std::max(mx, k_vals[k]);
      tgt[k] = k == a.target ? ctx.target_mass : off_mass;
    }
    double z = 0.0;
    for (std::size_t k = 0; k < 8; ++k) z += std::exp(k_vals[k] - mx);
    double ce = 0.0;
    for (std::size_t k = 0; k < 8; ++k) {
      q[k] = std::exp(k_vals[k] - mx) / z;
      ce -= tgt[k] * (k_vals[k] - mx - std::log(z));
    }
    r.loss += norm * a.weight * ce;
    for (std::size_t k = 0; k < 8; ++k) {
      const double dk = norm * a.weight * (q[k] - tgt[k]);
      for (std::size_t c = 0; c < C; ++c) {
        r.grad[c * hw + a.pixel] += dk * (logp[c * hw + a.pixel] + 1.0 - logp[c * hw + nb[k]]);
      }
    }
  }
  return r;
}

AblResult active_boundary_loss(const Tensor& probs, std::span<const BoundaryContext> contexts) {
  const Shape4& s = probs.shape();
  if (contexts.size() != s.n) throw std::invalid_argument("active_boundary_loss: one context per image required");
  AblResult total;
  total.grad = Tensor(s);
  const double scale = 1.0 / static_cast<double>(s.n);
  for (std::size_t n = 0; n < s.n; ++n) {
    const AblResult r = active_boundary_loss(probs.slice_batch(n, n + 1), contexts[n]);
    total.loss += scale * r.loss;
    total.pdb_count += r.pdb_count;
    total.active_count += r.active_count;
    total.degenerate = total.degenerate || r.degenerate;
    const std::size_t per = s.c * s.spatial();
    for (std::size_t i = 0; i < per; ++i) total.grad[n * per + i] = scale * r.grad[i];
  }
  return total;
}

}  // namespace uqseg
