#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "sesim/extractor.hpp"
#include "sesim/lsesim.hpp"
#include "sesim/sesim.hpp"
#include "sesim/tensor.hpp"

namespace sesim {

// Test-only hook: when set to a check name, that check's analytic gradient is
// sign-flipped before comparison, so the suite must report a failure.
inline std::string gradcheck_corrupt_kernel{};

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0;
  double tolerance = 0;
  bool pass = false;
};

struct GradCheckReport {
  std::uint64_t seed = 0;
  std::vector<GradCheckEntry> checks;
  bool all_pass = true;
};

namespace detail {

// max |analytic - central difference| / (max |central difference| + tiny),
// over the chosen coordinates of one parameter buffer. The corruption hook
// flips the analytic sign for the named check.
template <class F>
double fd_rel_err(const std::string& name, F&& eval, double* data, Index n,
                  const double* analytic, const std::vector<Index>* coords = nullptr,
                  double eps = 1e-5) {
  const double flip = name == gradcheck_corrupt_kernel ? -1.0 : 1.0;
  std::vector<Index> all;
  if (!coords) {
    all.resize(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) all[static_cast<std::size_t>(i)] = i;
    coords = &all;
  }
  double max_diff = 0, max_num = 0;
  for (Index i : *coords) {
    const double saved = data[i];
    data[i] = saved + eps;
    const double up = eval();
    data[i] = saved - eps;
    const double down = eval();
    data[i] = saved;
    const double num = (up - down) / (2 * eps);
    max_num = std::max(max_num, std::abs(num));
    max_diff = std::max(max_diff, std::abs(flip * analytic[i] - num));
  }
  return max_diff / (max_num + 1e-12);
}

inline void record(GradCheckReport& report, const std::string& name, double err,
                   double tol) {
  report.checks.push_back({name, err, tol, err <= tol});
  if (err > tol) report.all_pass = false;
}

}  // namespace detail

// Finite-difference verification of every backward kernel at double precision
// (feature maps 16x16, C=8, patch side 4, N_s=8; tolerance 1e-5 relative).
// Deterministic per seed.
inline GradCheckReport gradcheck_suite(std::uint64_t seed) {
  constexpr double tol = 1e-5;
  GradCheckReport report;
  report.seed = seed;
  Rng rng(splitmix64(seed ^ 0x67726164ULL));

  // conv2d: weighted-sum functional, gradients for input, weights, bias
  {
    Tensord x = random_normal<double>(1, 3, 10, 10, rng);
    ConvSpec<double> spec{random_normal<double>(4, 3, 3, 3, rng),
                          VectorX<double>::Zero(4), 1, Padding::zero};
    for (Index i = 0; i < 4; ++i) spec.bias[i] = rng.normal() * 0.1;
    const Tensord r = random_normal<double>(1, 4, 10, 10, rng);
    auto eval = [&] { return (conv2d_forward(x, spec).array() * r.array()).sum(); };
    auto grads = conv2d_backward(x, spec, r);
    report.checks.reserve(24);
    detail::record(report, "conv2d.input",
                   detail::fd_rel_err("conv2d.input", eval, x.data(), x.size(),
                                      grads.input.data()),
                   tol);
    detail::record(report, "conv2d.weights",
                   detail::fd_rel_err("conv2d.weights", eval, spec.weights.data(),
                                      spec.weights.size(), grads.weights.data()),
                   tol);
    detail::record(report, "conv2d.bias",
                   detail::fd_rel_err("conv2d.bias", eval, spec.bias.data(),
                                      spec.bias.size(), grads.bias.data()),
                   tol);
  }

  // relu: checked only where the subgradient is unique (|x| pushed away from 0)
  {
    Tensord x(1, 8, 16, 16);
    for (Index i = 0; i < x.size(); ++i) {
      const double n = rng.normal();
      x.data()[i] = (n >= 0 ? 1.0 : -1.0) * (0.05 + std::abs(n));
    }
    const Tensord r = random_normal<double>(1, 8, 16, 16, rng);
    auto eval = [&] { return (relu_forward(x).array() * r.array()).sum(); };
    const Tensord g = relu_backward(x, r);
    detail::record(report, "relu.input",
                   detail::fd_rel_err("relu.input", eval, x.data(), x.size(), g.data()),
                   tol);
  }

  // maxpool: redrawn until every window's top-two gap clears the perturbation,
  // so the argmax stays strict under finite differences
  {
    Tensord x(1, 8, 16, 16);
    for (int attempt = 0; attempt < 64; ++attempt) {
      x = random_normal<double>(1, 8, 16, 16, rng);
      double min_gap = 1e9;
      for (Index c = 0; c < 8; ++c)
        for (Index i = 0; i < 16; i += 2)
          for (Index j = 0; j < 16; j += 2) {
            double top = -1e18, second = -1e18;
            for (Index di = 0; di < 2; ++di)
              for (Index dj = 0; dj < 2; ++dj) {
                const double v = x(0, c, i + di, j + dj);
                if (v > top) {
                  second = top;
                  top = v;
                } else if (v > second) {
                  second = v;
                }
              }
            min_gap = std::min(min_gap, top - second);
          }
      if (min_gap > 1e-3) break;
    }
    const Tensord r = random_normal<double>(1, 8, 8, 8, rng);
    auto eval = [&] {
      return (maxpool2_forward(x).output.array() * r.array()).sum();
    };
    const auto fwd = maxpool2_forward(x);
    const Tensord g = maxpool2_backward(fwd.argmax, r, x.shape());
    detail::record(report, "maxpool2.input",
                   detail::fd_rel_err("maxpool2.input", eval, x.data(), x.size(),
                                      g.data()),
                   tol);
  }

  // selection stage: gradients for both 1x1 convs, biases, and the input.
  // Inputs are redrawn until the hidden pre-relu values clear the kink margin.
  {
    std::map<std::string, int> ch{{"t", 8}};
    SelectionLayers<double> sel;
    FeatureStack<double> stack;
    for (int attempt = 0; attempt < 64; ++attempt) {
      sel = SelectionLayers<double>::seeded_random(
          ch, splitmix64(seed ^ (0x100u + static_cast<unsigned>(attempt))), 0.3);
      stack.taps["t"] = {random_normal<double>(1, 8, 16, 16, rng), 4};
      const auto mid = apply_selection_cached(stack, sel).taps.at("t").mid;
      if (mid.array().abs().minCoeff() > 5e-4) break;
    }
    const Tensord r = random_normal<double>(1, 8, 16, 16, rng);
    auto eval = [&] {
      auto cache = apply_selection_cached(stack, sel);
      return (cache.taps.at("t").out.array() * r.array()).sum();
    };
    auto cache = apply_selection_cached(stack, sel);
    auto back = selection_backward(cache, sel, {{"t", r}});
    auto& tg = back.grads.taps.at("t");
    auto& s = sel.taps.at("t");
    detail::record(report, "selection.w1",
                   detail::fd_rel_err("selection.w1", eval, s.w1.data(), s.w1.size(),
                                      tg.w1.data()),
                   tol);
    detail::record(report, "selection.b1",
                   detail::fd_rel_err("selection.b1", eval, s.b1.data(), s.b1.size(),
                                      tg.b1.data()),
                   tol);
    detail::record(report, "selection.w2",
                   detail::fd_rel_err("selection.w2", eval, s.w2.data(), s.w2.size(),
                                      tg.w2.data()),
                   tol);
    detail::record(report, "selection.b2",
                   detail::fd_rel_err("selection.b2", eval, s.b2.data(), s.b2.size(),
                                      tg.b2.data()),
                   tol);
    detail::record(report, "selection.input",
                   detail::fd_rel_err("selection.input", eval,
                                      stack.taps.at("t").feat.data(),
                                      stack.taps.at("t").feat.size(),
                                      back.grad_input.at("t").data()),
                   tol);
  }

  // corr_maps, raw and per-position-normalized
  {
    SesimConfig cfg;
    cfg.taps = {"t"};
    cfg.n_s = 8;
    cfg.patch_side = 4;
    cfg.seed = splitmix64(seed ^ 2);
    Tensord f = random_normal<double>(1, 8, 16, 16, rng);
    const SampleSet samples = sample_queries(16, 16, cfg);
    MatrixX<double> r(samples.n_s(), samples.n_p());
    for (Index i = 0; i < r.size(); ++i) r.data()[i] = rng.normal();
    for (const bool normalize : {false, true}) {
      const std::string name =
          normalize ? "corr_maps.features_normalized" : "corr_maps.features";
      auto eval = [&] {
        return (corr_maps(f, samples, normalize).maps.array() * r.array()).sum();
      };
      const Tensord g = corr_maps_backward(f, samples, r, normalize);
      detail::record(report, name,
                     detail::fd_rel_err(name, eval, f.data(), f.size(), g.data()), tol);
    }
  }

  // fsesim distances, gradients w.r.t. both map stacks
  {
    SesimConfig cfg;
    cfg.taps = {"t"};
    cfg.n_s = 8;
    cfg.patch_side = 4;
    cfg.seed = splitmix64(seed ^ 3);
    const SampleSet samples = sample_queries(16, 16, cfg);
    CorrMaps<double> sx, sy;
    sx.samples = sy.samples = samples;
    sx.maps.resize(samples.n_s(), samples.n_p());
    sy.maps.resize(samples.n_s(), samples.n_p());
    for (Index i = 0; i < sx.maps.size(); ++i) {
      sx.maps.data()[i] = rng.normal();
      // keep |Sx - Sy| away from the l1 kink so the difference quotient is valid
      const double d = rng.normal();
      sy.maps.data()[i] =
          sx.maps.data()[i] + (d >= 0 ? 1.0 : -1.0) * (0.05 + std::abs(d));
    }
    for (const MapMetric metric : {MapMetric::l1, MapMetric::cos}) {
      const std::string base = metric == MapMetric::l1 ? "fsesim_l1" : "fsesim_cos";
      auto eval = [&] { return fsesim_loss(sx, sy, metric).loss; };
      const auto res = fsesim_loss(sx, sy, metric);
      detail::record(report, base + ".sx",
                     detail::fd_rel_err(base + ".sx", eval, sx.maps.data(),
                                        sx.maps.size(), res.grad_x.data()),
                     tol);
      detail::record(report, base + ".sy",
                     detail::fd_rel_err(base + ".sy", eval, sy.maps.data(),
                                        sy.maps.size(), res.grad_y.data()),
                     tol);
    }
  }

  // infonce over a hand-assembled batch (K = 7: 4 internal + 3 external)
  {
    ContrastBatch<double> batch;
    batch.k_internal = 4;
    batch.k_external = 3;
    const Index ns = 8, np = 16;
    batch.maps_x.maps.resize(ns, np);
    batch.maps_aug.maps.resize(ns, np);
    batch.maps_y.maps.resize(3, np);
    for (Index i = 0; i < batch.maps_x.maps.size(); ++i)
      batch.maps_x.maps.data()[i] = rng.normal();
    for (Index i = 0; i < batch.maps_aug.maps.size(); ++i)
      batch.maps_aug.maps.data()[i] = rng.normal();
    for (Index i = 0; i < batch.maps_y.maps.size(); ++i)
      batch.maps_y.maps.data()[i] = rng.normal();
    for (Index i = 0; i < ns; ++i) {
      for (int k = 0; k < 4; ++k)
        batch.neg_internal.push_back(rng.uniform_int(0, ns - 1));
      for (Index k = 0; k < 3; ++k) batch.neg_external.push_back(k);
    }
    const double tau = 0.07;
    auto eval = [&] { return infonce(batch, tau).loss; };
    const auto res = infonce(batch, tau);
    detail::record(report, "infonce.query",
                   detail::fd_rel_err("infonce.query", eval, batch.maps_x.maps.data(),
                                      batch.maps_x.maps.size(), res.grad_x.data()),
                   tol);
    detail::record(report, "infonce.positive",
                   detail::fd_rel_err("infonce.positive", eval,
                                      batch.maps_aug.maps.data(),
                                      batch.maps_aug.maps.size(), res.grad_aug.data()),
                   tol);
    detail::record(report, "infonce.external",
                   detail::fd_rel_err("infonce.external", eval,
                                      batch.maps_y.maps.data(),
                                      batch.maps_y.maps.size(), res.grad_y.data()),
                   tol);
  }

  // end to end: structure loss through the full extractor down to the pixels,
  // finite differences on a sampled subset of pixel coordinates
  {
    const ArchSpec arch = default_arch(Padding::zero);
    const auto weights = init_random<double>(arch, splitmix64(seed ^ 4));
    SesimConfig cfg;
    cfg.taps = {"tapA", "tapB"};
    cfg.n_s = 8;
    cfg.patch_side = 4;
    cfg.metric = MapMetric::cos;
    cfg.seed = splitmix64(seed ^ 5);
    Tensord ref = random_uniform<double>(1, 3, 32, 32, rng);
    Tensord x = random_uniform<double>(1, 3, 32, 32, rng);
    const auto stack_ref = extract(ref, weights, arch);
    auto eval = [&] {
      const auto stack = extract(x, weights, arch);
      return multi_layer_loss(stack_ref, stack, cfg).loss;
    };
    const auto stack = extract(x, weights, arch);
    auto ml = multi_layer_loss(stack_ref, stack, cfg);
    const Tensord g = extract_backward(stack, ml.grad_y, weights, arch);
    std::vector<Index> coords;
    for (int i = 0; i < 64; ++i) coords.push_back(rng.uniform_int(0, x.size() - 1));
    detail::record(report, "end_to_end.pixels",
                   detail::fd_rel_err("end_to_end.pixels", eval, x.data(), x.size(),
                                      g.data(), &coords),
                   tol);
  }

  return report;
}

}  // namespace sesim
