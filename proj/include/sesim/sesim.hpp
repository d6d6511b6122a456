#pragma once

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "sesim/extractor.hpp"
#include "sesim/tensor.hpp"

namespace sesim {

enum class SampleMode { patch_random, patch_grid, global, scattered_random };
enum class MapMetric { l1, cos };

struct Coord {
  int row = 0, col = 0;
  bool operator==(const Coord&) const = default;
};

// Query coordinates plus the patch geometry they were drawn for. In patch
// modes every query's p x p window lies fully inside the feature map; the
// window of query (r, c) spans rows [r - p/2, r - p/2 + p) and likewise for
// columns, enumerated row-major.
struct SampleSet {
  SampleMode mode = SampleMode::patch_random;
  int patch_side = 8;
  int rows = 0, cols = 0;  // tap-space shape the set was drawn for
  std::vector<Coord> queries;
  std::vector<Coord> partners;  // scattered mode only: queries.size() * n_p()
  std::uint64_t seed = 0;

  Index n_s() const { return static_cast<Index>(queries.size()); }
  Index n_p() const {
    return mode == SampleMode::global
               ? static_cast<Index>(rows) * cols
               : static_cast<Index>(patch_side) * patch_side;
  }

  bool same_geometry(const SampleSet& o) const {
    return mode == o.mode && patch_side == o.patch_side && rows == o.rows &&
           cols == o.cols && n_s() == o.n_s();
  }
};

// All structure-loss hyperparameters.
struct SesimConfig {
  std::vector<std::string> taps{"tapA", "tapB"};
  int n_s = 64;
  int patch_side = 8;
  SampleMode mode = SampleMode::patch_random;
  MapMetric metric = MapMetric::cos;
  bool normalize_features = false;
  double lambda = 10.0;           // content weight
  double tau = 0.07;              // contrastive temperature
  int negatives = 255;            // K
  double internal_neg_fraction = 0.5;
  std::uint64_t seed = 0;

  void validate() const {
    if (lambda <= 0) throw std::invalid_argument("SesimConfig: lambda must be > 0");
    if (tau <= 0) throw std::invalid_argument("SesimConfig: tau must be > 0");
    if (negatives < 1) throw std::invalid_argument("SesimConfig: K must be >= 1");
    if (patch_side < 1) throw std::invalid_argument("SesimConfig: patch side must be >= 1");
    if (n_s < 1) throw std::invalid_argument("SesimConfig: N_s must be >= 1");
    if (internal_neg_fraction < 0 || internal_neg_fraction > 1)
      throw std::invalid_argument("SesimConfig: internal_neg_fraction in [0,1]");
    if (taps.empty()) throw std::invalid_argument("SesimConfig: no taps");
  }

  int k_internal() const {
    return static_cast<int>(
        std::ceil(static_cast<double>(negatives) * internal_neg_fraction));
  }
  int k_external() const { return negatives - k_internal(); }
};

// Seed stream for per-tap sample sets: splitmix64(seed ^ fnv1a64(tap name)).
inline std::uint64_t tap_seed(std::uint64_t seed, const std::string& tap) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : tap) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return splitmix64(seed ^ h);
}

namespace detail {

struct InteriorBounds {
  int r_min, r_max, c_min, c_max;  // inclusive
  bool empty() const { return r_max < r_min || c_max < c_min; }
};

inline InteriorBounds interior_bounds(int rows, int cols, int p) {
  const int off = p / 2;
  return {off, rows - p + off, off, cols - p + off};
}

}  // namespace detail

// Draws query coordinates for a (rows x cols) feature map.
//   patch_random    N_s interior coordinates, uniform with replacement
//   patch_grid      g x g lattice with g = floor(sqrt(N_s));
//                   row_i = r_min + floor((i + 0.5) * valid_h / g)
//   global          every position, one row per position, patch = whole map
//   scattered_random  N_s unconstrained queries, each paired with p*p
//                   unconstrained partner positions
SampleSet sample_queries(int rows, int cols, const SesimConfig& cfg);

inline SampleSet sample_queries(int rows, int cols, const SesimConfig& cfg_in,
                                std::uint64_t seed_override) {
  SesimConfig cfg = cfg_in;
  cfg.seed = seed_override;
  return sample_queries(rows, cols, cfg);
}

inline SampleSet sample_queries(int rows, int cols, const SesimConfig& cfg) {
  cfg.validate();
  SampleSet set;
  set.mode = cfg.mode;
  set.patch_side = cfg.patch_side;
  set.rows = rows;
  set.cols = cols;
  set.seed = cfg.seed;

  Rng rng(splitmix64(cfg.seed ^ 0x73616d706c65ULL));
  switch (cfg.mode) {
    case SampleMode::patch_random: {
      const auto b = detail::interior_bounds(rows, cols, cfg.patch_side);
      if (b.empty())
        throw std::invalid_argument("sample_queries: feature map smaller than patch");
      set.queries.reserve(static_cast<std::size_t>(cfg.n_s));
      for (int i = 0; i < cfg.n_s; ++i)
        set.queries.push_back({static_cast<int>(rng.uniform_int(b.r_min, b.r_max)),
                               static_cast<int>(rng.uniform_int(b.c_min, b.c_max))});
      break;
    }
    case SampleMode::patch_grid: {
      const auto b = detail::interior_bounds(rows, cols, cfg.patch_side);
      if (b.empty())
        throw std::invalid_argument("sample_queries: feature map smaller than patch");
      const int g = std::max(1, static_cast<int>(std::sqrt(static_cast<double>(cfg.n_s))));
      const int vh = b.r_max - b.r_min + 1;
      const int vw = b.c_max - b.c_min + 1;
      for (int i = 0; i < g; ++i) {
        const int r = b.r_min + static_cast<int>((i + 0.5) * vh / g);
        for (int j = 0; j < g; ++j) {
          const int c = b.c_min + static_cast<int>((j + 0.5) * vw / g);
          set.queries.push_back({r, c});
        }
      }
      break;
    }
    case SampleMode::global: {
      set.queries.reserve(static_cast<std::size_t>(rows) * cols);
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) set.queries.push_back({r, c});
      break;
    }
    case SampleMode::scattered_random: {
      const Index np = static_cast<Index>(cfg.patch_side) * cfg.patch_side;
      for (int i = 0; i < cfg.n_s; ++i)
        set.queries.push_back({static_cast<int>(rng.uniform_int(0, rows - 1)),
                               static_cast<int>(rng.uniform_int(0, cols - 1))});
      set.partners.reserve(static_cast<std::size_t>(cfg.n_s * np));
      for (int i = 0; i < cfg.n_s; ++i)
        for (Index j = 0; j < np; ++j)
          set.partners.push_back({static_cast<int>(rng.uniform_int(0, rows - 1)),
                                  static_cast<int>(rng.uniform_int(0, cols - 1))});
      break;
    }
  }
  return set;
}

// The structure representation S (N_s x N_p): row i holds the correlations of
// query i against its patch points in row-major patch order.
template <class Scalar>
struct CorrMaps {
  MatrixX<Scalar> maps;
  SampleSet samples;
  std::string tap;
};

namespace detail {

// Flat spatial index of partner j of query i.
inline Index partner_index(const SampleSet& s, Index i, Index j) {
  switch (s.mode) {
    case SampleMode::global:
      return j;
    case SampleMode::scattered_random: {
      const Coord& c = s.partners[static_cast<std::size_t>(i * s.n_p() + j)];
      return static_cast<Index>(c.row) * s.cols + c.col;
    }
    default: {
      const Coord& q = s.queries[static_cast<std::size_t>(i)];
      const int off = s.patch_side / 2;
      const int pr = static_cast<int>(j) / s.patch_side;
      const int pc = static_cast<int>(j) % s.patch_side;
      return static_cast<Index>(q.row - off + pr) * s.cols + (q.col - off + pc);
    }
  }
}

inline void check_samples(const SampleSet& s, Index h, Index w) {
  if (s.rows != h || s.cols != w)
    throw std::invalid_argument("corr_maps: sample set drawn for a different shape");
  auto in_range = [&](const Coord& c) {
    return c.row >= 0 && c.row < s.rows && c.col >= 0 && c.col < s.cols;
  };
  for (const auto& q : s.queries)
    if (!in_range(q))
      throw std::invalid_argument("corr_maps: query coordinate out of range");
  if (s.mode != SampleMode::global && s.mode != SampleMode::scattered_random) {
    const auto b = interior_bounds(s.rows, s.cols, s.patch_side);
    for (const auto& q : s.queries)
      if (q.row < b.r_min || q.row > b.r_max || q.col < b.c_min || q.col > b.c_max)
        throw std::invalid_argument("corr_maps: patch exceeds the feature map");
  }
  for (const auto& p : s.partners)
    if (!in_range(p))
      throw std::invalid_argument("corr_maps: partner coordinate out of range");
}

}  // namespace detail

// S[i, j] = < f(query i), f(partner j) >, optionally on per-position
// L2-normalized feature vectors. Features must be (1, C, H, W).
template <class Scalar>
CorrMaps<Scalar> corr_maps(const Tensor<Scalar>& features, const SampleSet& samples,
                           bool normalize = false, std::string tap = "") {
  if (features.batch() != 1)
    throw std::invalid_argument("corr_maps: features must have batch 1");
  detail::check_samples(samples, features.height(), features.width());

  const auto F = features.channels_matrix(0);  // C x (H*W)
  VectorX<Scalar> inv_norm;
  if (normalize) {
    inv_norm = F.colwise().norm();
    for (Index i = 0; i < inv_norm.size(); ++i)
      inv_norm[i] = inv_norm[i] > Scalar(0) ? Scalar(1) / inv_norm[i] : Scalar(0);
  }

  CorrMaps<Scalar> out;
  out.samples = samples;
  out.tap = std::move(tap);
  out.maps.resize(samples.n_s(), samples.n_p());
  for (Index i = 0; i < samples.n_s(); ++i) {
    const Index qi = static_cast<Index>(samples.queries[static_cast<std::size_t>(i)].row) *
                         samples.cols +
                     samples.queries[static_cast<std::size_t>(i)].col;
    for (Index j = 0; j < samples.n_p(); ++j) {
      const Index pj = detail::partner_index(samples, i, j);
      Scalar v = F.col(qi).dot(F.col(pj));
      if (normalize) v *= inv_norm[qi] * inv_norm[pj];
      out.maps(i, j) = v;
    }
  }
  return out;
}

// Gradient of corr_maps with respect to the features. Positions appearing in
// several patches accumulate their contributions.
template <class Scalar>
Tensor<Scalar> corr_maps_backward(const Tensor<Scalar>& features,
                                  const SampleSet& samples,
                                  const MatrixX<Scalar>& grad_maps,
                                  bool normalize = false) {
  if (features.batch() != 1)
    throw std::invalid_argument("corr_maps_backward: features must have batch 1");
  detail::check_samples(samples, features.height(), features.width());
  if (grad_maps.rows() != samples.n_s() || grad_maps.cols() != samples.n_p())
    throw std::invalid_argument("corr_maps_backward: grad shape mismatch");

  const auto F = features.channels_matrix(0);
  VectorX<Scalar> inv_norm;
  if (normalize) {
    inv_norm = F.colwise().norm();
    for (Index i = 0; i < inv_norm.size(); ++i)
      inv_norm[i] = inv_norm[i] > Scalar(0) ? Scalar(1) / inv_norm[i] : Scalar(0);
  }

  Tensor<Scalar> grad = Tensor<Scalar>::zeros(1, features.channels(),
                                              features.height(), features.width());
  auto G = grad.channels_matrix(0);
  for (Index i = 0; i < samples.n_s(); ++i) {
    const Index qi = static_cast<Index>(samples.queries[static_cast<std::size_t>(i)].row) *
                         samples.cols +
                     samples.queries[static_cast<std::size_t>(i)].col;
    for (Index j = 0; j < samples.n_p(); ++j) {
      const Scalar g = grad_maps(i, j);
      if (g == Scalar(0)) continue;
      const Index pj = detail::partner_index(samples, i, j);
      if (!normalize) {
        G.col(qi) += g * F.col(pj);
        G.col(pj) += g * F.col(qi);
      } else {
        // d cos(u,w)/du = (w_hat - cos * u_hat) / |u|
        if (inv_norm[qi] == Scalar(0) || inv_norm[pj] == Scalar(0)) continue;
        const VectorX<Scalar> uq = F.col(qi) * inv_norm[qi];
        const VectorX<Scalar> up = F.col(pj) * inv_norm[pj];
        const Scalar cos_v = uq.dot(up);
        G.col(qi) += g * inv_norm[qi] * (up - cos_v * uq);
        G.col(pj) += g * inv_norm[pj] * (uq - cos_v * up);
      }
    }
  }
  return grad;
}

template <class Scalar>
struct FsesimResult {
  Scalar loss = Scalar(0);
  MatrixX<Scalar> grad_x, grad_y;
  VectorX<Scalar> row_values;  // per-query distances; loss is their mean
};

// Distance between two map stacks (the structure loss):
//   l1   mean over all N_s*N_p entries of |Sx - Sy|
//   cos  mean over rows of 1 - cos(Sx_row, Sy_row)
// Rows with zero norm: identical zero rows count as distance 0, a zero row
// against a nonzero row as 1; gradients at zero-norm rows are 0.
template <class Scalar>
FsesimResult<Scalar> fsesim_loss(const CorrMaps<Scalar>& sx,
                                 const CorrMaps<Scalar>& sy, MapMetric metric) {
  if (!sx.samples.same_geometry(sy.samples) || sx.maps.rows() != sy.maps.rows() ||
      sx.maps.cols() != sy.maps.cols())
    throw std::invalid_argument("fsesim_loss: sample geometry mismatch");

  const Index ns = sx.maps.rows();
  const Index np = sx.maps.cols();
  FsesimResult<Scalar> res;
  res.grad_x.setZero(ns, np);
  res.grad_y.setZero(ns, np);
  res.row_values.setZero(ns);

  if (metric == MapMetric::l1) {
    const Scalar scale = Scalar(1) / static_cast<Scalar>(ns * np);
    for (Index i = 0; i < ns; ++i) {
      Scalar row = Scalar(0);
      for (Index j = 0; j < np; ++j) {
        const Scalar d = sx.maps(i, j) - sy.maps(i, j);
        row += std::abs(d);
        const Scalar s = d > Scalar(0) ? Scalar(1) : (d < Scalar(0) ? Scalar(-1) : Scalar(0));
        res.grad_x(i, j) = s * scale;
        res.grad_y(i, j) = -s * scale;
      }
      res.row_values[i] = row / static_cast<Scalar>(np);
    }
    res.loss = res.row_values.sum() / static_cast<Scalar>(ns);
  } else {
    const Scalar inv_ns = Scalar(1) / static_cast<Scalar>(ns);
    for (Index i = 0; i < ns; ++i) {
      const auto x = sx.maps.row(i);
      const auto y = sy.maps.row(i);
      // identical rows are distance 0 with zero gradient, exactly
      if ((x.array() == y.array()).all()) {
        res.row_values[i] = Scalar(0);
        continue;
      }
      const Scalar nx = x.norm();
      const Scalar ny = y.norm();
      if (nx == Scalar(0) && ny == Scalar(0)) {
        res.row_values[i] = Scalar(0);
        continue;
      }
      if (nx == Scalar(0) || ny == Scalar(0)) {
        res.row_values[i] = Scalar(1);
        continue;
      }
      const Scalar cos_v = x.dot(y) / (nx * ny);
      res.row_values[i] = Scalar(1) - cos_v;
      // d(1 - cos)/dx = -(y/(|x||y|) - cos * x/|x|^2)
      res.grad_x.row(i) = -inv_ns * (y / (nx * ny) - cos_v * x / (nx * nx));
      res.grad_y.row(i) = -inv_ns * (x / (nx * ny) - cos_v * y / (ny * ny));
    }
    res.loss = res.row_values.sum() * inv_ns;
  }
  return res;
}

template <class Scalar>
struct MultiLayerResult {
  Scalar loss = Scalar(0);
  std::map<std::string, Tensor<Scalar>> grad_x, grad_y;  // per-tap feature grads
  std::map<std::string, SampleSet> samples;
  std::map<std::string, FsesimResult<Scalar>> per_tap;
};

// Equal-weight mean of per-tap structure losses. Each tap draws its own
// SampleSet from tap_seed(cfg.seed, tap).
template <class Scalar>
MultiLayerResult<Scalar> multi_layer_loss(const FeatureStack<Scalar>& stack_x,
                                          const FeatureStack<Scalar>& stack_y,
                                          const SesimConfig& cfg) {
  cfg.validate();
  MultiLayerResult<Scalar> res;
  const Scalar inv_t = Scalar(1) / static_cast<Scalar>(cfg.taps.size());
  for (const auto& tap : cfg.taps) {
    const auto& fx = stack_x.tap(tap).feat;
    const auto& fy = stack_y.tap(tap).feat;
    if (!fx.same_shape(fy))
      throw std::invalid_argument("multi_layer_loss: tap shape mismatch at '" + tap + "'");
    const SampleSet samples = sample_queries(
        static_cast<int>(fx.height()), static_cast<int>(fx.width()), cfg,
        tap_seed(cfg.seed, tap));
    auto sx = corr_maps(fx, samples, cfg.normalize_features, tap);
    auto sy = corr_maps(fy, samples, cfg.normalize_features, tap);
    auto f = fsesim_loss(sx, sy, cfg.metric);
    res.loss += f.loss * inv_t;
    res.grad_x[tap] = corr_maps_backward(fx, samples,
                                         MatrixX<Scalar>(f.grad_x * inv_t),
                                         cfg.normalize_features);
    res.grad_y[tap] = corr_maps_backward(fy, samples,
                                         MatrixX<Scalar>(f.grad_y * inv_t),
                                         cfg.normalize_features);
    res.samples[tap] = samples;
    res.per_tap[tap] = std::move(f);
  }
  return res;
}

}  // namespace sesim
