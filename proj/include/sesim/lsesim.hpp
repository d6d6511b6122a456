#pragma once

#include <cmath>
#include <map>
#include <numeric>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "sesim/adam.hpp"
#include "sesim/extractor.hpp"
#include "sesim/sesim.hpp"
#include "sesim/tensor.hpp"

namespace sesim {

// Pixel-wise, structure-preserving photometric augmentation. Per-image
// parameters are drawn in a fixed order (3 gains, 3 biases, grayscale coin,
// gamma) so the stream does not depend on image size. Noise is keyed on
// absolute pixel coordinates via hash_normal, so augmenting a crop with the
// crop's origin equals cropping the augmented full image.
struct AugmentSpec {
  double gain_lo = 0.6, gain_hi = 1.4;
  double bias_lo = -0.2, bias_hi = 0.2;
  double grayscale_probability = 0.2;
  double gamma_lo = 0.7, gamma_hi = 1.4;
  double noise_sigma = 0.03;
  std::uint64_t seed = 0;

  static AugmentSpec identity() {
    AugmentSpec s;
    s.gain_lo = s.gain_hi = 1.0;
    s.bias_lo = s.bias_hi = 0.0;
    s.grayscale_probability = 0.0;
    s.gamma_lo = s.gamma_hi = 1.0;
    s.noise_sigma = 0.0;
    return s;
  }

  void validate() const {
    if (gain_lo > gain_hi || bias_lo > bias_hi || gamma_lo > gamma_hi)
      throw std::invalid_argument("AugmentSpec: empty parameter range");
    if (gain_lo <= 0 || gamma_lo <= 0)
      throw std::invalid_argument("AugmentSpec: gain and gamma must stay positive");
    if (grayscale_probability < 0 || grayscale_probability > 1)
      throw std::invalid_argument("AugmentSpec: grayscale probability in [0,1]");
    if (noise_sigma < 0 || noise_sigma > 0.05)
      throw std::invalid_argument("AugmentSpec: noise sigma in [0, 0.05]");
  }
};

template <class Scalar>
Tensor<Scalar> augment(const Tensor<Scalar>& image, const AugmentSpec& spec,
                       Coord origin = {0, 0}) {
  spec.validate();
  if (image.batch() != 1)
    throw std::invalid_argument("augment: image must have batch 1");
  if (image.channels() != 1 && image.channels() != 3)
    throw std::invalid_argument("augment: expects a 1- or 3-channel image");
  const Index C = image.channels(), H = image.height(), W = image.width();

  Rng rng(splitmix64(spec.seed ^ 0x6175676d656e74ULL));
  double gain[3], bias[3];
  for (double& g : gain) g = rng.uniform(spec.gain_lo, spec.gain_hi);
  for (double& b : bias) b = rng.uniform(spec.bias_lo, spec.bias_hi);
  const bool to_gray = rng.bernoulli(spec.grayscale_probability);
  const double gamma = rng.uniform(spec.gamma_lo, spec.gamma_hi);
  const std::uint64_t noise_key = splitmix64(spec.seed ^ 0x6e6f697365ULL);

  Tensor<Scalar> out(1, C, H, W);
  for (Index h = 0; h < H; ++h) {
    for (Index w = 0; w < W; ++w) {
      double px[3] = {0, 0, 0};
      for (Index c = 0; c < C && c < 3; ++c)
        px[c] = gain[c] * static_cast<double>(image(0, c, h, w)) + bias[c];
      if (to_gray && C == 3) {
        const double luma = (px[0] + px[1] + px[2]) / 3.0;
        px[0] = px[1] = px[2] = luma;
      }
      for (Index c = 0; c < C && c < 3; ++c) {
        double v = std::min(1.0, std::max(0.0, px[c]));
        if (gamma != 1.0) v = std::pow(v, gamma);
        if (spec.noise_sigma > 0)
          v += spec.noise_sigma *
               hash_normal(noise_key, static_cast<std::uint64_t>(c),
                           static_cast<std::uint64_t>(origin.row + h),
                           static_cast<std::uint64_t>(origin.col + w));
        out(0, c, h, w) = static_cast<Scalar>(std::min(1.0, std::max(0.0, v)));
      }
    }
  }
  return out;
}

// One contrastive batch for a single tap. Query v_i is row i of maps_x; its
// positive is row i of maps_aug (same coordinates in the augmented view).
// Internal negatives are other rows of maps_aug; external negatives are rows
// of maps_y, drawn at distinct locations of the second image and shared
// across queries.
template <class Scalar>
struct ContrastBatch {
  CorrMaps<Scalar> maps_x, maps_aug, maps_y;
  std::vector<Index> neg_internal;  // n_s * k_internal row indices into maps_aug
  std::vector<Index> neg_external;  // n_s * k_external row indices into maps_y
  int k_internal = 0, k_external = 0;
};

template <class Scalar>
ContrastBatch<Scalar> build_batch(const Tensor<Scalar>& feat_x,
                                  const Tensor<Scalar>& feat_aug,
                                  const Tensor<Scalar>& feat_y,
                                  const SesimConfig& cfg, std::uint64_t seed,
                                  const std::string& tap = "") {
  cfg.validate();
  if (!feat_x.same_shape(feat_aug))
    throw std::invalid_argument("build_batch: x and augmented x differ in shape");

  const int k_int = cfg.k_internal();
  const int k_ext = cfg.k_external();

  SesimConfig scfg = cfg;
  scfg.seed = splitmix64(seed ^ 0x7061697273ULL);
  const SampleSet set_x = sample_queries(static_cast<int>(feat_x.height()),
                                         static_cast<int>(feat_x.width()), scfg);

  // The coordinate pool may repeat positions (patch_random samples with
  // replacement); negatives must come from distinct positions that differ
  // from the positive's, so work with one representative row per position.
  std::vector<Index> unique_rows;
  std::vector<long> row_key(static_cast<std::size_t>(set_x.n_s()));
  {
    std::set<long> seen;
    for (Index r = 0; r < set_x.n_s(); ++r) {
      const auto& q = set_x.queries[static_cast<std::size_t>(r)];
      const long key = static_cast<long>(q.row) * set_x.cols + q.col;
      row_key[static_cast<std::size_t>(r)] = key;
      if (seen.insert(key).second) unique_rows.push_back(r);
    }
  }
  if (static_cast<long>(unique_rows.size()) - 1 < k_int)
    throw std::invalid_argument(
        "build_batch: image too small to furnish K negatives (internal pool)");

  ContrastBatch<Scalar> batch;
  batch.k_internal = k_int;
  batch.k_external = k_ext;
  batch.maps_x = corr_maps(feat_x, set_x, cfg.normalize_features, tap);
  batch.maps_aug = corr_maps(feat_aug, set_x, cfg.normalize_features, tap);

  Rng rng(splitmix64(seed ^ 0x6e65676174697665ULL));

  if (k_ext > 0) {
    const auto b = detail::interior_bounds(static_cast<int>(feat_y.height()),
                                           static_cast<int>(feat_y.width()),
                                           cfg.patch_side);
    if (b.empty())
      throw std::invalid_argument("build_batch: second image smaller than patch");
    const int vh = b.r_max - b.r_min + 1;
    const int vw = b.c_max - b.c_min + 1;
    if (static_cast<long>(vh) * vw < k_ext)
      throw std::invalid_argument(
          "build_batch: image too small to furnish K negatives (external)");
    // partial Fisher-Yates over the interior positions: k_ext distinct coords
    std::vector<int> pool(static_cast<std::size_t>(vh) * vw);
    std::iota(pool.begin(), pool.end(), 0);
    SampleSet set_y;
    set_y.mode = cfg.mode == SampleMode::global ? SampleMode::patch_random : cfg.mode;
    set_y.patch_side = cfg.patch_side;
    set_y.rows = static_cast<int>(feat_y.height());
    set_y.cols = static_cast<int>(feat_y.width());
    set_y.seed = seed;
    for (int k = 0; k < k_ext; ++k) {
      const auto swap_at =
          k + static_cast<int>(rng.uniform_int(0, static_cast<long>(pool.size()) - 1 - k));
      std::swap(pool[static_cast<std::size_t>(k)], pool[static_cast<std::size_t>(swap_at)]);
      const int flat = pool[static_cast<std::size_t>(k)];
      set_y.queries.push_back({b.r_min + flat / vw, b.c_min + flat % vw});
    }
    batch.maps_y = corr_maps(feat_y, set_y, cfg.normalize_features, tap);
  } else {
    batch.maps_y.samples.rows = static_cast<int>(feat_y.height());
    batch.maps_y.samples.cols = static_cast<int>(feat_y.width());
    batch.maps_y.maps.resize(0, set_x.n_p());
  }

  // per-query internal negatives: distinct positions of the augmented view
  // other than the positive's, drawn without replacement
  const Index ns = set_x.n_s();
  batch.neg_internal.reserve(static_cast<std::size_t>(ns) * k_int);
  std::vector<Index> others;
  others.reserve(unique_rows.size());
  for (Index i = 0; i < ns; ++i) {
    others.clear();
    for (Index r : unique_rows)
      if (row_key[static_cast<std::size_t>(r)] != row_key[static_cast<std::size_t>(i)])
        others.push_back(r);
    for (int k = 0; k < k_int; ++k) {
      const auto swap_at =
          k + static_cast<int>(rng.uniform_int(0, static_cast<long>(others.size()) - 1 - k));
      std::swap(others[static_cast<std::size_t>(k)], others[static_cast<std::size_t>(swap_at)]);
      batch.neg_internal.push_back(others[static_cast<std::size_t>(k)]);
    }
  }
  batch.neg_external.reserve(static_cast<std::size_t>(ns) * k_ext);
  for (Index i = 0; i < ns; ++i)
    for (Index k = 0; k < k_ext; ++k) batch.neg_external.push_back(k);
  return batch;
}

// Image-level convenience: extracts all three images through the frozen
// trunk, applies the selection layers, and builds one batch per configured
// tap.
template <class Scalar>
std::map<std::string, ContrastBatch<Scalar>> build_batches(
    const Tensor<Scalar>& x, const Tensor<Scalar>& x_aug, const Tensor<Scalar>& y,
    const ExtractorWeights<Scalar>& trunk, const ArchSpec& arch,
    const SelectionLayers<Scalar>& sel, const SesimConfig& cfg,
    std::uint64_t seed) {
  if (!x.same_shape(x_aug))
    throw std::invalid_argument("build_batches: x and augmented x differ in shape");
  const auto fx = apply_selection(extract(x, trunk, arch), sel);
  const auto fa = apply_selection(extract(x_aug, trunk, arch), sel);
  const auto fy = apply_selection(extract(y, trunk, arch), sel);
  std::map<std::string, ContrastBatch<Scalar>> out;
  for (const auto& tap : cfg.taps)
    out[tap] = build_batch(fx.tap(tap).feat, fa.tap(tap).feat, fy.tap(tap).feat,
                           cfg, tap_seed(seed, tap), tap);
  return out;
}

template <class Scalar>
struct InfonceResult {
  Scalar loss = Scalar(0);
  MatrixX<Scalar> grad_aug, grad_x, grad_y;
  VectorX<Scalar> anchor_loss;
  double retrieval_rate = 0;  // anchors ranking their positive above every negative
};

// Contrastive cross-entropy over K+1 candidates per query row of maps_x.
// Candidate 0 is the positive (same row of maps_aug), then the internal and
// external negatives. Similarity is the cosine of the flattened map rows;
// logits are sim / tau and the log-sum-exp is max-shifted. Zero-norm rows
// have similarity 0 and no gradient.
template <class Scalar>
InfonceResult<Scalar> infonce(const ContrastBatch<Scalar>& batch, double tau) {
  if (tau <= 0) throw std::invalid_argument("infonce: tau must be > 0");
  const MatrixX<Scalar>& Q = batch.maps_x.maps;
  const MatrixX<Scalar>& P = batch.maps_aug.maps;
  const MatrixX<Scalar>& Y = batch.maps_y.maps;
  const Index ns = Q.rows();
  const Index k_int = batch.k_internal, k_ext = batch.k_external;
  if (P.rows() != ns || P.cols() != Q.cols())
    throw std::invalid_argument("infonce: query/positive shape mismatch");
  if (static_cast<Index>(batch.neg_internal.size()) != ns * k_int ||
      static_cast<Index>(batch.neg_external.size()) != ns * k_ext)
    throw std::invalid_argument("infonce: negative index list size mismatch");
  if (k_ext > 0 && Y.cols() != Q.cols())
    throw std::invalid_argument("infonce: external map width mismatch");
  const VectorX<Scalar> norm_q = Q.rowwise().norm();
  const VectorX<Scalar> norm_p = P.rowwise().norm();
  const VectorX<Scalar> norm_y = Y.rowwise().norm();

  InfonceResult<Scalar> res;
  res.grad_x.setZero(Q.rows(), Q.cols());
  res.grad_aug.setZero(P.rows(), P.cols());
  res.grad_y.setZero(Y.rows(), Y.cols());
  res.anchor_loss.setZero(ns);

  const Index n_cand = 1 + k_int + k_ext;
  std::vector<Index> cand_row(static_cast<std::size_t>(n_cand));
  std::vector<Scalar> sim(static_cast<std::size_t>(n_cand));
  std::vector<Scalar> prob(static_cast<std::size_t>(n_cand));
  long hits = 0;
  const Scalar inv_tau = static_cast<Scalar>(1.0 / tau);
  const Scalar inv_ns = Scalar(1) / static_cast<Scalar>(ns);

  for (Index i = 0; i < ns; ++i) {
    const auto q = Q.row(i);
    const Scalar nq = norm_q[i];
    cand_row[0] = i;
    for (Index k = 0; k < k_int; ++k)
      cand_row[static_cast<std::size_t>(1 + k)] =
          batch.neg_internal[static_cast<std::size_t>(i * k_int + k)];
    for (Index k = 0; k < k_ext; ++k)
      cand_row[static_cast<std::size_t>(1 + k_int + k)] =
          batch.neg_external[static_cast<std::size_t>(i * k_ext + k)];

    // candidate k lives in maps_aug for k <= k_int, else in maps_y
    auto cand = [&](Index k) -> std::pair<const MatrixX<Scalar>*, Scalar> {
      if (k <= k_int) return {&P, norm_p[cand_row[static_cast<std::size_t>(k)]]};
      return {&Y, norm_y[cand_row[static_cast<std::size_t>(k)]]};
    };

    Scalar max_logit = std::numeric_limits<Scalar>::lowest();
    for (Index k = 0; k < n_cand; ++k) {
      const auto [mat, nc] = cand(k);
      const auto row = mat->row(cand_row[static_cast<std::size_t>(k)]);
      const Scalar s =
          (nq > Scalar(0) && nc > Scalar(0)) ? Scalar(q.dot(row) / (nq * nc)) : Scalar(0);
      sim[static_cast<std::size_t>(k)] = s;
      max_logit = std::max(max_logit, s * inv_tau);
    }
    Scalar denom = Scalar(0);
    for (Index k = 0; k < n_cand; ++k) {
      prob[static_cast<std::size_t>(k)] =
          std::exp(sim[static_cast<std::size_t>(k)] * inv_tau - max_logit);
      denom += prob[static_cast<std::size_t>(k)];
    }
    for (auto& p : prob) p /= denom;
    res.anchor_loss[i] = -(sim[0] * inv_tau - max_logit) + std::log(denom);

    Scalar best_neg = std::numeric_limits<Scalar>::lowest();
    for (Index k = 1; k < n_cand; ++k)
      best_neg = std::max(best_neg, sim[static_cast<std::size_t>(k)]);
    if (n_cand == 1 || sim[0] > best_neg) ++hits;

    for (Index k = 0; k < n_cand; ++k) {
      const Scalar coeff =
          (prob[static_cast<std::size_t>(k)] - (k == 0 ? Scalar(1) : Scalar(0))) * inv_tau *
          inv_ns;
      if (coeff == Scalar(0)) continue;
      const auto [mat, nc] = cand(k);
      if (nq == Scalar(0) || nc == Scalar(0)) continue;
      const Index r = cand_row[static_cast<std::size_t>(k)];
      const auto row = mat->row(r);
      const Scalar s = sim[static_cast<std::size_t>(k)];
      // d cos(q, w)/dq = (w/|w| - cos * q/|q|) / |q|
      res.grad_x.row(i) += coeff * ((row / nc - s * q / nq) / nq);
      auto& gmat = (mat == &P) ? res.grad_aug : res.grad_y;
      gmat.row(r) += coeff * ((q / nq - s * row / nc) / nc);
    }
  }
  res.loss = res.anchor_loss.sum() * inv_ns;
  res.retrieval_rate = static_cast<double>(hits) / static_cast<double>(ns);
  return res;
}

struct TrainLogRow {
  long step = 0;
  double loss = 0;
  double retrieval_rate = 0;
};

struct TrainConfig {
  long steps = 400;
  AdamParams adam{1e-3, 0.9, 0.999, 1e-8};
  SesimConfig sesim;
  AugmentSpec augment;
  std::uint64_t seed = 0;
  long log_every = 10;
};

template <class Scalar>
struct TrainResult {
  SelectionLayers<Scalar> selection;
  std::vector<TrainLogRow> log;
  double final_loss = 0;
  double final_retrieval = 0;
};

namespace detail {

// Trims a stack to its taps; selection layers only read those.
template <class Scalar>
FeatureStack<Scalar> taps_only(FeatureStack<Scalar> stack) {
  stack.layer_inputs.clear();
  stack.pool_argmax.clear();
  return stack;
}

}  // namespace detail

// One contrastive step against precomputed trunk taps: applies the selection
// layers to all three stacks, runs the loss on every tap, and returns the mean
// loss, mean retrieval, and accumulated selection gradients.
template <class Scalar>
std::tuple<Scalar, double, SelectionGrads<Scalar>> contrast_step(
    const FeatureStack<Scalar>& trunk_x, const FeatureStack<Scalar>& trunk_aug,
    const FeatureStack<Scalar>& trunk_y, const SelectionLayers<Scalar>& sel,
    const SesimConfig& cfg, std::uint64_t seed) {
  auto cache_x = apply_selection_cached(trunk_x, sel);
  auto cache_aug = apply_selection_cached(trunk_aug, sel);
  auto cache_y = apply_selection_cached(trunk_y, sel);

  Scalar loss = Scalar(0);
  double retrieval = 0;
  SelectionGrads<Scalar> grads;
  const Scalar inv_t = Scalar(1) / static_cast<Scalar>(cfg.taps.size());

  std::map<std::string, Tensor<Scalar>> gx, ga, gy;
  for (const auto& tap : cfg.taps) {
    const auto& fx = cache_x.taps.at(tap).out;
    const auto& fa = cache_aug.taps.at(tap).out;
    const auto& fy = cache_y.taps.at(tap).out;
    auto batch = build_batch(fx, fa, fy, cfg, tap_seed(seed, tap), tap);
    auto nce = infonce(batch, cfg.tau);
    loss += nce.loss * inv_t;
    retrieval += nce.retrieval_rate / static_cast<double>(cfg.taps.size());
    gx[tap] = corr_maps_backward(fx, batch.maps_x.samples,
                                 MatrixX<Scalar>(nce.grad_x * inv_t),
                                 cfg.normalize_features);
    ga[tap] = corr_maps_backward(fa, batch.maps_aug.samples,
                                 MatrixX<Scalar>(nce.grad_aug * inv_t),
                                 cfg.normalize_features);
    if (batch.k_external > 0)
      gy[tap] = corr_maps_backward(fy, batch.maps_y.samples,
                                   MatrixX<Scalar>(nce.grad_y * inv_t),
                                   cfg.normalize_features);
    else
      gy[tap] = Tensor<Scalar>::zeros(1, fy.channels(), fy.height(), fy.width());
  }
  grads.accumulate(selection_backward(cache_x, sel, gx).grads);
  grads.accumulate(selection_backward(cache_aug, sel, ga).grads);
  grads.accumulate(selection_backward(cache_y, sel, gy).grads);
  return {loss, retrieval, std::move(grads)};
}

// Trains the 1x1 selection layers against a frozen trunk. The trunk features
// of every corpus image are precomputed once; each step only re-extracts the
// augmented view. Deterministic for a fixed seed.
template <class Scalar>
TrainResult<Scalar> train_structure_net(const std::vector<Tensor<Scalar>>& corpus,
                                        const ExtractorWeights<Scalar>& trunk,
                                        const ArchSpec& arch, TrainConfig cfg) {
  if (corpus.size() < 2)
    throw std::invalid_argument("train_structure_net: corpus needs at least 2 images");
  cfg.sesim.validate();
  cfg.augment.validate();
  if (cfg.steps < 1 || cfg.steps > 2000)
    throw std::invalid_argument("train_structure_net: steps must be in [1, 2000]");

  std::map<std::string, int> tap_ch;
  for (const auto& tap : cfg.sesim.taps) tap_ch[tap] = arch.tap_channels(tap);

  TrainResult<Scalar> res;
  res.selection = SelectionLayers<Scalar>::seeded_random(tap_ch, splitmix64(cfg.seed ^ 0x73656cULL));
  AdamState<Scalar> opt(cfg.adam);

  std::vector<FeatureStack<Scalar>> trunk_feats;
  trunk_feats.reserve(corpus.size());
  for (const auto& img : corpus)
    trunk_feats.push_back(detail::taps_only(extract(img, trunk, arch)));

  Rng rng(splitmix64(cfg.seed ^ 0x747261696eULL));
  for (long step = 1; step <= cfg.steps; ++step) {
    const auto ix = rng.uniform_int(0, static_cast<long>(corpus.size()) - 1);
    auto iy = rng.uniform_int(0, static_cast<long>(corpus.size()) - 2);
    if (iy >= ix) ++iy;

    AugmentSpec aug = cfg.augment;
    aug.seed = rng.next_u64();
    const std::uint64_t batch_seed = rng.next_u64();

    const auto aug_img = augment(corpus[static_cast<std::size_t>(ix)], aug);
    const auto trunk_aug = detail::taps_only(extract(aug_img, trunk, arch));

    auto [loss, retrieval, grads] =
        contrast_step(trunk_feats[static_cast<std::size_t>(ix)], trunk_aug,
                      trunk_feats[static_cast<std::size_t>(iy)], res.selection,
                      cfg.sesim, batch_seed);

    opt.begin_step();
    for (auto& [tap, g] : grads.taps) {
      auto& s = res.selection.taps.at(tap);
      opt.update(tap + ".w1", s.w1, g.w1);
      opt.update(tap + ".b1", s.b1, g.b1);
      opt.update(tap + ".w2", s.w2, g.w2);
      opt.update(tap + ".b2", s.b2, g.b2);
    }

    res.final_loss = static_cast<double>(loss);
    res.final_retrieval = retrieval;
    if (step == 1 || step % cfg.log_every == 0 || step == cfg.steps)
      res.log.push_back({step, static_cast<double>(loss), retrieval});
  }
  return res;
}

}  // namespace sesim
