#pragma once

#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "sesim/adam.hpp"
#include "sesim/extractor.hpp"
#include "sesim/sesim.hpp"
#include "sesim/tensor.hpp"

namespace sesim {

// Per-query structure distances arranged on the query lattice, with the query
// coordinates mapped back to image space.
template <class Scalar>
struct ErrorGrid {
  MatrixX<Scalar> values;          // g x g, one entry per lattice query
  std::vector<Coord> queries;      // image-space coordinates, row-major
  MapMetric metric = MapMetric::cos;
  std::string tap;
};

template <class Scalar>
struct ErrorMapResult {
  ErrorGrid<Scalar> grid;
  Tensor<Scalar> heatmap;  // (1,1,H,W), min-max normalized and upsampled
};

namespace detail {

template <class Scalar>
Tensor<Scalar> minmax_upsample(const MatrixX<Scalar>& values, Index rows,
                               Index cols, Index out_h, Index out_w) {
  Tensor<Scalar> t(1, 1, rows, cols);
  const Scalar lo = values.minCoeff();
  const Scalar hi = values.maxCoeff();
  const Scalar range = hi - lo;
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c < cols; ++c)
      t(0, 0, r, c) = range > Scalar(0) ? (values(r, c) - lo) / range : Scalar(0);
  return bilinear_resize(t, out_h, out_w);
}

// Features at the given tap, optionally through the selection layers.
template <class Scalar>
Tensor<Scalar> tap_features(const Tensor<Scalar>& image,
                            const ExtractorWeights<Scalar>& weights,
                            const ArchSpec& arch,
                            const SelectionLayers<Scalar>* sel,
                            const std::string& tap) {
  const auto stack = extract(image, weights, arch);
  if (!sel) return stack.tap(tap).feat;
  return apply_selection(stack, *sel).tap(tap).feat;
}

}  // namespace detail

// Structure-error landscape between two equally sized images: lattice queries
// on the named tap (cfg.taps.front() by default), per-query row distance under
// cfg.metric, plus the upsampled heatmap. Pass selection layers for the
// learned variant; null runs the fixed loss.
template <class Scalar>
ErrorMapResult<Scalar> error_map(const Tensor<Scalar>& x, const Tensor<Scalar>& y,
                                 const SesimConfig& cfg,
                                 const ExtractorWeights<Scalar>& weights,
                                 const ArchSpec& arch,
                                 const SelectionLayers<Scalar>* sel = nullptr,
                                 std::optional<std::string> tap_name = {}) {
  cfg.validate();
  if (!x.same_shape(y))
    throw std::invalid_argument("error_map: images must have identical shape");
  const std::string tap = tap_name.value_or(cfg.taps.front());

  const auto fx = detail::tap_features(x, weights, arch, sel, tap);
  const auto fy = detail::tap_features(y, weights, arch, sel, tap);
  const int stride = arch.tap_stride(tap);

  SesimConfig gcfg = cfg;
  gcfg.mode = SampleMode::patch_grid;
  gcfg.seed = tap_seed(cfg.seed, tap);
  const SampleSet samples = sample_queries(static_cast<int>(fx.height()),
                                           static_cast<int>(fx.width()), gcfg);
  const auto sx = corr_maps(fx, samples, cfg.normalize_features, tap);
  const auto sy = corr_maps(fy, samples, cfg.normalize_features, tap);
  const auto f = fsesim_loss(sx, sy, cfg.metric);

  const Index g = static_cast<Index>(std::sqrt(static_cast<double>(samples.n_s())));
  ErrorMapResult<Scalar> res;
  res.grid.metric = cfg.metric;
  res.grid.tap = tap;
  res.grid.values.resize(g, g);
  for (Index i = 0; i < samples.n_s(); ++i) {
    res.grid.values(i / g, i % g) = f.row_values[i];
    const auto& q = samples.queries[static_cast<std::size_t>(i)];
    res.grid.queries.push_back({q.row * stride, q.col * stride});
  }
  res.heatmap = detail::minmax_upsample(res.grid.values, g, g, x.height(), x.width());
  return res;
}

// Self-similarity landscape of one query point: its map row against every
// position of the tap, min-max normalized and upsampled to image resolution.
// query is in image pixels; it must land inside the tap after downscaling.
template <class Scalar>
Tensor<Scalar> selfsim_heatmap(const Tensor<Scalar>& x, Coord query,
                               const SesimConfig& cfg,
                               const ExtractorWeights<Scalar>& weights,
                               const ArchSpec& arch,
                               const SelectionLayers<Scalar>* sel = nullptr,
                               std::optional<std::string> tap_name = {}) {
  cfg.validate();
  const std::string tap = tap_name.value_or(cfg.taps.front());
  const auto f = detail::tap_features(x, weights, arch, sel, tap);
  const int stride = arch.tap_stride(tap);

  const Coord q{query.row / stride, query.col / stride};
  if (query.row < 0 || query.col < 0 || q.row >= f.height() || q.col >= f.width())
    throw std::invalid_argument("selfsim_heatmap: query outside the valid interior");

  SampleSet set;
  set.mode = SampleMode::global;
  set.rows = static_cast<int>(f.height());
  set.cols = static_cast<int>(f.width());
  set.queries = {q};
  const auto maps = corr_maps(f, set, cfg.normalize_features, tap);

  MatrixX<Scalar> grid(f.height(), f.width());
  for (Index r = 0; r < f.height(); ++r)
    for (Index c = 0; c < f.width(); ++c)
      grid(r, c) = maps.maps(0, r * f.width() + c);
  return detail::minmax_upsample(grid, f.height(), f.width(), x.height(), x.width());
}

// Mean squared difference of centered channel-covariance matrices, averaged
// over taps: the appearance half of the stylization objective.
template <class Scalar>
struct GramResult {
  Scalar loss = Scalar(0);
  std::map<std::string, Tensor<Scalar>> grad;  // per tap, w.r.t. the first stack
};

template <class Scalar>
GramResult<Scalar> gram_style_loss(const FeatureStack<Scalar>& stack,
                                   const FeatureStack<Scalar>& target,
                                   const std::vector<std::string>& taps) {
  GramResult<Scalar> res;
  const Scalar inv_t = Scalar(1) / static_cast<Scalar>(taps.size());
  for (const auto& tap : taps) {
    const auto& f = stack.tap(tap).feat;
    const auto& t = target.tap(tap).feat;
    if (f.channels() != t.channels())
      throw std::invalid_argument("gram_style_loss: channel mismatch at tap '" + tap + "'");
    const Index C = f.channels();
    const Index M = f.height() * f.width();
    const Index Mt = t.height() * t.width();

    const auto F = f.channels_matrix(0);
    const auto T = t.channels_matrix(0);
    const VectorX<Scalar> mu_f = F.rowwise().mean();
    const VectorX<Scalar> mu_t = T.rowwise().mean();
    const MatrixX<Scalar> Fc = F.colwise() - mu_f;
    const MatrixX<Scalar> Tc = T.colwise() - mu_t;
    const MatrixX<Scalar> cov_f = Fc * Fc.transpose() / static_cast<Scalar>(M);
    const MatrixX<Scalar> cov_t = Tc * Tc.transpose() / static_cast<Scalar>(Mt);
    const MatrixX<Scalar> D = cov_f - cov_t;

    res.loss += inv_t * D.squaredNorm() / static_cast<Scalar>(C * C);

    // dL/dFc = 4/(C^2 M) * D * Fc; removing the column mean accounts for the
    // centering.
    MatrixX<Scalar> gfc = (Scalar(4) * inv_t / static_cast<Scalar>(C * C * M)) * (D * Fc);
    const VectorX<Scalar> gmean = gfc.rowwise().mean();
    gfc.colwise() -= gmean;

    Tensor<Scalar> g(1, C, f.height(), f.width());
    g.channels_matrix(0) = gfc;
    res.grad[tap] = std::move(g);
  }
  return res;
}

struct StylizeTraceRow {
  long step = 0;
  double total = 0, content = 0, style = 0;
};

template <class Scalar>
struct StylizeResult {
  Tensor<Scalar> image;       // after the final step
  Tensor<Scalar> best_image;  // lowest total loss seen
  std::vector<StylizeTraceRow> trace;
  double initial_loss = 0;
  double best_loss = 0;
};

// Direct pixel optimization of lambda * structure(content, out) +
// gram(out, style). Adam on the pixels, clamped to [0,1] each step; the
// content sample sets are fixed across steps (cfg.seed).
template <class Scalar>
StylizeResult<Scalar> stylize(const Tensor<Scalar>& content,
                              const Tensor<Scalar>& style,
                              const SesimConfig& cfg, long steps,
                              const ExtractorWeights<Scalar>& weights,
                              const ArchSpec& arch, AdamParams adam = {1e-2, 0.9, 0.999, 1e-8}) {
  cfg.validate();
  if (steps < 1) throw std::invalid_argument("stylize: steps must be >= 1");

  const auto stack_content = extract(content, weights, arch);
  const auto stack_style = extract(style, weights, arch);

  StylizeResult<Scalar> res;
  res.image = content;
  AdamState<Scalar> opt(adam);
  const Scalar lambda = static_cast<Scalar>(cfg.lambda);

  for (long step = 1; step <= steps; ++step) {
    auto stack_out = extract(res.image, weights, arch);
    auto ml = multi_layer_loss(stack_content, stack_out, cfg);
    auto gram = gram_style_loss(stack_out, stack_style, cfg.taps);

    const double content_term = static_cast<double>(ml.loss);
    const double style_term = static_cast<double>(gram.loss);
    const double total = static_cast<double>(lambda) * content_term + style_term;

    if (step == 1) {
      res.initial_loss = total;
      res.best_loss = total;
      res.best_image = res.image;
    } else if (total < res.best_loss) {
      res.best_loss = total;
      res.best_image = res.image;
    }
    res.trace.push_back({step, total, content_term, style_term});

    std::map<std::string, Tensor<Scalar>> grad_taps;
    for (const auto& tap : cfg.taps) {
      Tensor<Scalar> g = ml.grad_y.at(tap);
      g.array() *= lambda;
      g.array() += gram.grad.at(tap).array();
      grad_taps[tap] = std::move(g);
    }
    Tensor<Scalar> gpix = extract_backward(stack_out, grad_taps, weights, arch);

    opt.begin_step();
    opt.update("pixels", res.image, gpix);
    res.image.array() = res.image.array().max(Scalar(0)).min(Scalar(1));
  }
  return res;
}

// Mann-Whitney AUC: probability that a value drawn from `low` is smaller than
// one drawn from `high` (ties count half). 1.0 means perfect separation with
// `low` below `high`.
inline double auc_low_vs_high(const std::vector<double>& low,
                              const std::vector<double>& high) {
  if (low.empty() || high.empty())
    throw std::invalid_argument("auc: empty sample");
  double wins = 0;
  for (double a : low)
    for (double b : high) {
      if (a < b) wins += 1;
      else if (a == b) wins += 0.5;
    }
  return wins / (static_cast<double>(low.size()) * static_cast<double>(high.size()));
}

// Fixed structure distance between two images under cfg (multi-tap mean).
template <class Scalar>
double structure_distance(const Tensor<Scalar>& x, const Tensor<Scalar>& y,
                          const SesimConfig& cfg,
                          const ExtractorWeights<Scalar>& weights,
                          const ArchSpec& arch) {
  const auto sx = extract(x, weights, arch);
  const auto sy = extract(y, weights, arch);
  return static_cast<double>(multi_layer_loss(sx, sy, cfg).loss);
}

template <class Scalar>
double pixel_l1(const Tensor<Scalar>& x, const Tensor<Scalar>& y) {
  if (!x.same_shape(y)) throw std::invalid_argument("pixel_l1: shape mismatch");
  return static_cast<double>((x.array() - y.array()).abs().mean());
}

}  // namespace sesim
