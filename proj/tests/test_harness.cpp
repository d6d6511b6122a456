#include <cmath>
#include <vector>

#include "doctest.h"
#include "sesim/gradcheck.hpp"
#include "sesim/harness.hpp"
#include "sesim/synth.hpp"

using namespace sesim;

namespace {

// Centroid of a binary mask, in image pixels.
Coord mask_centroid(const Tensorf& mask) {
  double sr = 0, sc = 0, n = 0;
  for (Index r = 0; r < mask.height(); ++r)
    for (Index c = 0; c < mask.width(); ++c)
      if (mask(0, 0, r, c) > 0.5f) {
        sr += static_cast<double>(r);
        sc += static_cast<double>(c);
        n += 1;
      }
  return {static_cast<int>(sr / n), static_cast<int>(sc / n)};
}

double pearson(const Tensorf& a, const Tensorf& b) {
  const double ma = a.array().mean(), mb = b.array().mean();
  const double cov =
      ((a.array().cast<double>() - ma) * (b.array().cast<double>() - mb)).sum();
  const double va = (a.array().cast<double>() - ma).square().sum();
  const double vb = (b.array().cast<double>() - mb).square().sum();
  return cov / std::sqrt(va * vb);
}

SesimConfig small_cfg() {
  SesimConfig cfg;
  cfg.taps = {"tapA"};
  cfg.n_s = 9;
  cfg.patch_side = 4;
  cfg.seed = 3;
  return cfg;
}

}  // namespace

TEST_SUITE("harness") {

TEST_CASE("error_map of an image against itself is identically zero") {
  Rng rng(80);
  const Tensorf x = random_uniform<float>(1, 3, 48, 48, rng);
  const ArchSpec arch = default_arch();
  const auto weights = init_random<float>(arch, 81);
  const auto res = error_map(x, x, small_cfg(), weights, arch);
  CHECK((res.grid.values.array() == 0).all());
  CHECK((res.heatmap.array() == 0).all());
}

TEST_CASE("error grid geometry lands on the documented lattice") {
  Rng rng(82);
  const Tensorf x = random_uniform<float>(1, 3, 48, 48, rng);
  const Tensorf y = random_uniform<float>(1, 3, 48, 48, rng);
  const ArchSpec arch = default_arch();
  const auto weights = init_random<float>(arch, 83);
  const auto res = error_map(x, y, small_cfg(), weights, arch);
  // tapA of a 48x48 image is 12x12; g = 3; rows 2 + floor((i+0.5)*9/3) = 3,6,9
  CHECK(res.grid.values.rows() == 3);
  CHECK(res.grid.values.cols() == 3);
  REQUIRE(res.grid.queries.size() == 9);
  const int expect[3] = {12, 24, 36};  // tap coordinate * stride 4
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      CHECK(res.grid.queries[static_cast<std::size_t>(i * 3 + j)].row == expect[i]);
      CHECK(res.grid.queries[static_cast<std::size_t>(i * 3 + j)].col == expect[j]);
    }
  CHECK(res.heatmap.height() == 48);
  CHECK(res.heatmap.width() == 48);
  CHECK((res.grid.values.array() >= 0).all());
}

TEST_CASE("error grid values are the per-row map distances") {
  Rng rng(84);
  const Tensorf x = random_uniform<float>(1, 3, 48, 48, rng);
  const Tensorf y = random_uniform<float>(1, 3, 48, 48, rng);
  const ArchSpec arch = default_arch();
  const auto weights = init_random<float>(arch, 85);
  const SesimConfig cfg = small_cfg();
  const auto res = error_map(x, y, cfg, weights, arch);

  const auto fx = extract(x, weights, arch).tap("tapA").feat;
  const auto fy = extract(y, weights, arch).tap("tapA").feat;
  SesimConfig gcfg = cfg;
  gcfg.mode = SampleMode::patch_grid;
  gcfg.seed = tap_seed(cfg.seed, "tapA");
  const SampleSet set = sample_queries(static_cast<int>(fx.height()),
                                       static_cast<int>(fx.width()), gcfg);
  const auto f = fsesim_loss(corr_maps(fx, set), corr_maps(fy, set), cfg.metric);
  for (Index i = 0; i < set.n_s(); ++i)
    CHECK(std::abs(res.grid.values(i / 3, i % 3) - f.row_values[i]) <= 1e-12);
}

TEST_CASE("error_map rejects images of different sizes") {
  const ArchSpec arch = default_arch();
  const auto weights = init_random<float>(arch, 86);
  CHECK_THROWS_WITH_AS(error_map(Tensorf::zeros(1, 3, 48, 48),
                                 Tensorf::zeros(1, 3, 40, 48), small_cfg(), weights,
                                 arch),
                       doctest::Contains("identical shape"), std::invalid_argument);
}

TEST_CASE("aligned pairs score below shuffled pairs on the synthetic corpus") {
  SynthSpec spec;
  spec.count = 12;
  spec.height = spec.width = 48;
  spec.seed = 77;
  const auto corpus = synth_dataset<float>(spec);
  const ArchSpec arch = default_arch();
  const auto weights = init_random<float>(arch, 21);
  const SesimConfig cfg = small_cfg();
  double aligned = 0, shuffled = 0;
  for (int i = 0; i < spec.count; ++i) {
    aligned += error_map(corpus.a[i], corpus.b[i], cfg, weights, arch)
                   .grid.values.mean();
    shuffled += error_map(corpus.a[i], corpus.b[corpus.shuffled[i]], cfg, weights,
                          arch)
                    .grid.values.mean();
  }
  CHECK(aligned < shuffled);
}

TEST_CASE("self-similarity is maximal at the query when features are normalized") {
  Rng rng(87);
  const Tensorf x = random_uniform<float>(1, 3, 48, 48, rng);
  const ArchSpec arch = default_arch();
  const auto weights = init_random<float>(arch, 88);
  const auto f = extract(x, weights, arch).tap("tapA").feat;
  SampleSet set;
  set.mode = SampleMode::global;
  set.rows = static_cast<int>(f.height());
  set.cols = static_cast<int>(f.width());
  const Coord q{5, 6};
  set.queries = {q};
  const auto maps = corr_maps(f, set, /*normalize=*/true);
  const Index self = static_cast<Index>(q.row) * f.width() + q.col;
  CHECK(maps.maps.row(0).maxCoeff() - maps.maps(0, self) <= 1e-12);

  SesimConfig cfg = small_cfg();
  cfg.normalize_features = true;
  const Tensorf heat = selfsim_heatmap(x, Coord{q.row * 4, q.col * 4}, cfg, weights, arch);
  CHECK(heat.height() == 48);
  CHECK(heat.width() == 48);
  CHECK(heat.channels() == 1);
  CHECK(heat.array().minCoeff() >= 0.0f);
  CHECK(heat.array().maxCoeff() <= 1.0f);
}

TEST_CASE("selfsim rejects queries outside the image") {
  const ArchSpec arch = default_arch();
  const auto weights = init_random<float>(arch, 89);
  const Tensorf x = Tensorf::zeros(1, 3, 48, 48);
  CHECK_THROWS_AS(selfsim_heatmap(x, Coord{-1, 5}, small_cfg(), weights, arch),
                  std::invalid_argument);
  CHECK_THROWS_AS(selfsim_heatmap(x, Coord{500, 5}, small_cfg(), weights, arch),
                  std::invalid_argument);
}

TEST_CASE("a constant image yields a flat heatmap under borderless convs") {
  // valid convolutions keep a constant input constant at every tap; zero
  // padding would not (border windows see the pad)
  const ArchSpec arch = default_arch(Padding::none);
  const auto weights = init_random<float>(arch, 90);
  const Tensorf x = Tensorf::constant(1, 3, 54, 54, 0.4f);
  const Tensorf heat = selfsim_heatmap(x, Coord{24, 24}, small_cfg(), weights, arch);
  CHECK((heat.array() == 0).all());
}

TEST_CASE("texture-swapped pairs produce correlated self-similarity landscapes") {
  SynthSpec spec;
  spec.count = 4;
  spec.seed = 91;
  const auto corpus = synth_dataset<float>(spec);
  const ArchSpec arch = default_arch();
  const auto weights = init_random<float>(arch, 33);
  SesimConfig cfg;
  cfg.taps = {"tapA"};
  cfg.normalize_features = true;
  for (int i = 0; i < spec.count; ++i) {
    const Coord q = mask_centroid(corpus.masks[static_cast<std::size_t>(i)]);
    const Tensorf ha = selfsim_heatmap(corpus.a[static_cast<std::size_t>(i)], q, cfg,
                                       weights, arch);
    const Tensorf hb = selfsim_heatmap(corpus.b[static_cast<std::size_t>(i)], q, cfg,
                                       weights, arch);
    CHECK(pearson(ha, hb) > 0.8);
  }
}

TEST_CASE("a much larger structure weight drives the structure term lower") {
  SynthSpec spec;
  spec.count = 2;
  spec.height = spec.width = 48;
  spec.seed = 701;
  const auto corpus = synth_dataset<float>(spec);
  const ArchSpec arch = default_arch();
  const auto weights = init_random<float>(arch, 19);
  double content_term[2];
  int k = 0;
  for (const double lambda : {10.0, 1000.0}) {
    SesimConfig cfg;
    cfg.seed = 606;
    cfg.lambda = lambda;
    cfg.patch_side = 4;  // tapB of a 48x48 image is only 6x6
    const auto res = stylize(corpus.b[1], corpus.a[1], cfg, 80, weights, arch);
    content_term[k++] = res.trace.back().content;
    for (Index i = 0; i < res.image.size(); ++i) {
      CHECK(res.image.data()[i] >= 0.0f);
      CHECK(res.image.data()[i] <= 1.0f);
    }
  }
  CHECK(content_term[1] < content_term[0]);
}

TEST_CASE("adam: zero gradient is a fixed point") {
  Rng rng(92);
  Tensord x = random_normal<double>(1, 2, 3, 3, rng);
  const Tensord before = x;
  AdamState<double> opt;
  for (int step = 0; step < 5; ++step) {
    opt.begin_step();
    opt.update("x", x, Tensord::zeros(1, 2, 3, 3));
  }
  CHECK((x.array() == before.array()).all());
}

TEST_CASE("adam: first step moves against the gradient, bounded by lr") {
  Rng rng(93);
  Tensord x = random_normal<double>(1, 1, 1, 12, rng);
  const Tensord before = x;
  const Tensord g = random_normal<double>(1, 1, 1, 12, rng);
  AdamState<double> opt({0.05, 0.9, 0.999, 1e-8});
  opt.begin_step();
  opt.update("x", x, g);
  for (Index i = 0; i < x.size(); ++i) {
    const double delta = x.data()[i] - before.data()[i];
    CHECK(std::abs(delta) <= 0.05 * (1.0 + 1e-6));
    if (std::abs(g.data()[i]) > 1e-6) CHECK(delta * g.data()[i] < 0);
  }
}

TEST_CASE("adam drives a seeded quadratic below 1e-6 in 100 steps") {
  Rng rng(7);
  Tensord x = Tensord::zeros(1, 1, 1, 16);
  const Tensord target = random_uniform<double>(1, 1, 1, 16, rng, -0.3, 0.3);
  const Tensord curv = random_uniform<double>(1, 1, 1, 16, rng, 0.5, 2.0);
  AdamState<double> opt({0.02, 0.5, 0.999, 1e-8});
  double loss = 1.0;
  for (int step = 0; step < 100; ++step) {
    Tensord g(1, 1, 1, 16);
    g.array() = curv.array() * (x.array() - target.array());
    loss = 0.5 * (curv.array() * (x.array() - target.array()).square()).sum();
    opt.begin_step();
    opt.update("x", x, g);
  }
  CHECK(loss < 1e-6);
}

TEST_CASE("adam rejects shape changes under a reused parameter name") {
  Tensord a = Tensord::zeros(1, 1, 2, 2);
  AdamState<double> opt;
  opt.begin_step();
  opt.update("p", a, Tensord::zeros(1, 1, 2, 2));
  Tensord b = Tensord::zeros(1, 1, 3, 3);
  CHECK_THROWS_AS(opt.update("p", b, Tensord::zeros(1, 1, 3, 3)), std::invalid_argument);
}

TEST_CASE("synthetic corpus is deterministic with pixel-identical paired masks") {
  SynthSpec spec;
  spec.count = 6;
  spec.height = spec.width = 48;
  spec.seed = 94;
  const auto c1 = synth_dataset<float>(spec);
  const auto c2 = synth_dataset<float>(spec);
  REQUIRE(c1.a.size() == 6);
  for (std::size_t i = 0; i < 6; ++i) {
    CHECK((c1.a[i].array() == c2.a[i].array()).all());
    CHECK((c1.b[i].array() == c2.b[i].array()).all());
    CHECK((c1.masks[i].array() == c2.masks[i].array()).all());
    // masks are binary and shared between the two renders by construction
    CHECK(((c1.masks[i].array() == 0.0f) || (c1.masks[i].array() == 1.0f)).all());
    CHECK(c1.shuffled[i] != i);  // derangement
  }
}

TEST_CASE("the two texture domains keep separable spectra") {
  SynthSpec spec;
  spec.count = 16;
  spec.seed = 5;
  const auto corpus = synth_dataset<float>(spec);
  double lo = 0, hi = 0;
  for (int i = 0; i < spec.count; ++i) {
    lo += high_freq_fraction(corpus.a[static_cast<std::size_t>(i)]);
    hi += high_freq_fraction(corpus.b[static_cast<std::size_t>(i)]);
  }
  CHECK(hi / lo >= 2.0);
}

TEST_CASE("gradient suite passes, deterministically") {
  const auto r1 = gradcheck_suite(11);
  CHECK(r1.all_pass);
  const auto r2 = gradcheck_suite(11);
  REQUIRE(r1.checks.size() == r2.checks.size());
  for (std::size_t i = 0; i < r1.checks.size(); ++i) {
    CHECK(r1.checks[i].name == r2.checks[i].name);
    CHECK(r1.checks[i].max_rel_err == r2.checks[i].max_rel_err);
  }
}

TEST_CASE("gradient suite catches an injected sign flip") {
  for (const char* victim : {"conv2d.weights", "fsesim_cos.sx", "infonce.query"}) {
    gradcheck_corrupt_kernel = victim;
    const auto report = gradcheck_suite(11);
    gradcheck_corrupt_kernel.clear();
    CHECK_FALSE(report.all_pass);
    for (const auto& entry : report.checks)
      if (entry.name == victim) CHECK_FALSE(entry.pass);
  }
}

}  // TEST_SUITE
