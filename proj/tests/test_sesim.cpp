#include <cmath>
#include <vector>

#include "doctest.h"
#include "sesim/extractor.hpp"
#include "sesim/sesim.hpp"

using namespace sesim;

namespace {

// Independent scalar-loop evaluation of both map distances.
template <class Scalar>
Scalar naive_fsesim(const MatrixX<Scalar>& x, const MatrixX<Scalar>& y,
                    MapMetric metric) {
  if (metric == MapMetric::l1) {
    Scalar acc = 0;
    for (Index i = 0; i < x.rows(); ++i)
      for (Index j = 0; j < x.cols(); ++j) acc += std::abs(x(i, j) - y(i, j));
    return acc / static_cast<Scalar>(x.rows() * x.cols());
  }
  Scalar acc = 0;
  for (Index i = 0; i < x.rows(); ++i) {
    Scalar dot = 0, nx = 0, ny = 0;
    for (Index j = 0; j < x.cols(); ++j) {
      dot += x(i, j) * y(i, j);
      nx += x(i, j) * x(i, j);
      ny += y(i, j) * y(i, j);
    }
    acc += Scalar(1) - dot / (std::sqrt(nx) * std::sqrt(ny));
  }
  return acc / static_cast<Scalar>(x.rows());
}

// Feature tensor whose every position holds the same channel vector.
Tensord constant_field(const std::vector<double>& v, Index h, Index w) {
  Tensord t(1, static_cast<Index>(v.size()), h, w);
  for (Index c = 0; c < t.channels(); ++c)
    t.plane(0, c).setConstant(v[static_cast<std::size_t>(c)]);
  return t;
}

SesimConfig patch_cfg(int n_s, int p, std::uint64_t seed) {
  SesimConfig cfg;
  cfg.taps = {"t"};
  cfg.n_s = n_s;
  cfg.patch_side = p;
  cfg.seed = seed;
  return cfg;
}

}  // namespace

TEST_SUITE("sesim") {

TEST_CASE("grid sampling on an 8x8 tap places queries at the partition centers") {
  SesimConfig cfg = patch_cfg(4, 4, 0);
  cfg.mode = SampleMode::patch_grid;
  const SampleSet set = sample_queries(8, 8, cfg);
  REQUIRE(set.n_s() == 4);
  CHECK(set.queries[0] == Coord{3, 3});
  CHECK(set.queries[1] == Coord{3, 5});
  CHECK(set.queries[2] == Coord{5, 3});
  CHECK(set.queries[3] == Coord{5, 5});
}

TEST_CASE("patch_random stays inside the interior over 1000 draws") {
  const SesimConfig cfg = patch_cfg(1000, 4, 21);
  const SampleSet set = sample_queries(16, 16, cfg);
  for (const auto& q : set.queries) {
    CHECK(q.row >= 2);
    CHECK(q.row <= 14);
    CHECK(q.col >= 2);
    CHECK(q.col <= 14);
  }
  const SampleSet again = sample_queries(16, 16, cfg);
  CHECK(set.queries == again.queries);
  const SampleSet other = sample_queries(16, 16, cfg, 22);
  CHECK(set.queries != other.queries);
}

TEST_CASE("sampling rejects maps smaller than the patch") {
  const SesimConfig cfg = patch_cfg(4, 8, 0);
  CHECK_THROWS_AS(sample_queries(6, 6, cfg), std::invalid_argument);
}

TEST_CASE("one-hot features everywhere give an all-ones map") {
  Tensord f = Tensord::zeros(1, 3, 10, 10);
  f.plane(0, 1).setConstant(1.0);
  const SampleSet set = sample_queries(10, 10, patch_cfg(6, 4, 7));
  const auto maps = corr_maps(f, set);
  CHECK((maps.maps.array() == 1.0).all());
  CHECK(maps.maps.rows() == 6);
  CHECK(maps.maps.cols() == 16);
}

TEST_CASE("a query orthogonal to every partner yields a zero row") {
  // channel vectors: (1,0) everywhere except the query position's (0,1)
  Tensord f = Tensord::zeros(1, 2, 6, 6);
  f.plane(0, 0).setConstant(1.0);
  f(0, 0, 0, 0) = 0.0;
  f(0, 1, 0, 0) = 1.0;
  SampleSet set;
  set.mode = SampleMode::scattered_random;
  set.rows = set.cols = 6;
  set.patch_side = 2;
  set.queries = {{0, 0}};
  set.partners = {{1, 1}, {2, 3}, {5, 5}, {4, 0}};  // all hold (1,0)
  const auto maps = corr_maps(f, set);
  CHECK((maps.maps.array() == 0.0).all());
}

TEST_CASE("2x2 map with two channels matches hand-computed dot products") {
  // position vectors: (1,2), (3,4), (5,6), (7,8) in row-major order
  Tensord f(1, 2, 2, 2);
  const double vals[4][2] = {{1, 2}, {3, 4}, {5, 6}, {7, 8}};
  for (Index p = 0; p < 4; ++p) {
    f(0, 0, p / 2, p % 2) = vals[p][0];
    f(0, 1, p / 2, p % 2) = vals[p][1];
  }
  SampleSet set;
  set.mode = SampleMode::global;
  set.rows = set.cols = 2;
  set.queries = {{0, 0}, {0, 1}, {1, 0}, {1, 1}};
  const auto maps = corr_maps(f, set);
  MatrixX<double> expect(4, 4);
  expect << 5, 11, 17, 23,
           11, 25, 39, 53,
           17, 39, 61, 83,
           23, 53, 83, 113;
  CHECK((maps.maps.array() == expect.array()).all());
}

TEST_CASE("corr_maps rejects sample sets drawn for another shape") {
  Rng rng(3);
  const Tensord f = random_normal<double>(1, 2, 8, 8, rng);
  const SampleSet set = sample_queries(10, 10, patch_cfg(4, 4, 0));
  CHECK_THROWS_AS(corr_maps(f, set), std::invalid_argument);
}

TEST_CASE("corr_maps rejects patches that leave the feature map") {
  Rng rng(4);
  const Tensord f = random_normal<double>(1, 2, 8, 8, rng);
  SampleSet set;
  set.mode = SampleMode::patch_random;
  set.patch_side = 4;
  set.rows = set.cols = 8;
  set.queries = {{0, 0}};  // window would start at (-2, -2)
  CHECK_THROWS_AS(corr_maps(f, set), std::invalid_argument);
}

TEST_CASE("corr_maps_backward: zero map gradient gives zero feature gradient") {
  Rng rng(5);
  const Tensord f = random_normal<double>(1, 3, 10, 10, rng);
  const SampleSet set = sample_queries(10, 10, patch_cfg(5, 4, 2));
  const MatrixX<double> zg = MatrixX<double>::Zero(set.n_s(), set.n_p());
  CHECK((corr_maps_backward(f, set, zg).array() == 0).all());
}

TEST_CASE("corr_maps_backward applies the product rule entry by entry") {
  Rng rng(6);
  const Tensord f = random_normal<double>(1, 3, 4, 4, rng);
  SampleSet set;
  set.mode = SampleMode::global;
  set.rows = set.cols = 4;
  set.queries = {{0, 1}};
  MatrixX<double> g = MatrixX<double>::Zero(1, 16);
  const Index pj = 2 * 4 + 3;  // partner (2,3)
  g(0, pj) = 1.0;
  const Tensord grad = corr_maps_backward(f, set, g);
  const auto F = f.channels_matrix(0);
  const auto G = grad.channels_matrix(0);
  const Index qi = 0 * 4 + 1;
  CHECK((G.col(qi).array() == F.col(pj).array()).all());
  CHECK((G.col(pj).array() == F.col(qi).array()).all());
  for (Index j = 0; j < 16; ++j) {
    if (j == qi || j == pj) continue;
    CHECK((G.col(j).array() == 0).all());
  }
}

TEST_CASE("fsesim matches an independent scalar-loop evaluation") {
  Rng rng(8);
  const SampleSet set = sample_queries(12, 12, patch_cfg(7, 4, 9));
  CorrMaps<double> sx, sy;
  sx.samples = sy.samples = set;
  sx.maps.resize(set.n_s(), set.n_p());
  sy.maps.resize(set.n_s(), set.n_p());
  for (Index i = 0; i < sx.maps.size(); ++i) {
    sx.maps.data()[i] = rng.normal();
    sy.maps.data()[i] = rng.normal();
  }
  for (const MapMetric metric : {MapMetric::l1, MapMetric::cos}) {
    const double got = fsesim_loss(sx, sy, metric).loss;
    const double want = naive_fsesim(sx.maps, sy.maps, metric);
    CHECK(std::abs(got - want) <= 1e-12 * std::max(1.0, std::abs(want)));
  }
}

TEST_CASE("constant fields: l1 is the squared-norm gap, cosine is zero") {
  // per-position vectors a=(1,0), b=(2,0): |a|^2=1, |b|^2=4
  const Tensord fa = constant_field({1, 0}, 8, 8);
  const Tensord fb = constant_field({2, 0}, 8, 8);
  const SampleSet set = sample_queries(8, 8, patch_cfg(4, 4, 3));
  const auto sx = corr_maps(fa, set);
  const auto sy = corr_maps(fb, set);
  CHECK(fsesim_loss(sx, sy, MapMetric::l1).loss == 3.0);
  CHECK(fsesim_loss(sx, sy, MapMetric::cos).loss == 0.0);
}

TEST_CASE("identical map stacks have distance exactly zero") {
  Rng rng(10);
  const Tensord f = random_normal<double>(1, 4, 10, 10, rng);
  const SampleSet set = sample_queries(10, 10, patch_cfg(5, 4, 4));
  const auto sx = corr_maps(f, set);
  const auto sy = corr_maps(f, set);
  for (const MapMetric metric : {MapMetric::l1, MapMetric::cos}) {
    const auto res = fsesim_loss(sx, sy, metric);
    CHECK(res.loss == 0.0);
    CHECK((res.grad_x.array() == 0).all());
    CHECK((res.grad_y.array() == 0).all());
  }
}

TEST_CASE("fsesim is symmetric in its arguments") {
  Rng rng(11);
  const SampleSet set = sample_queries(12, 12, patch_cfg(6, 4, 5));
  CorrMaps<double> sx, sy;
  sx.samples = sy.samples = set;
  sx.maps.resize(set.n_s(), set.n_p());
  sy.maps.resize(set.n_s(), set.n_p());
  for (Index i = 0; i < sx.maps.size(); ++i) {
    sx.maps.data()[i] = rng.normal();
    sy.maps.data()[i] = rng.normal();
  }
  for (const MapMetric metric : {MapMetric::l1, MapMetric::cos})
    CHECK(std::abs(fsesim_loss(sx, sy, metric).loss -
                   fsesim_loss(sy, sx, metric).loss) <= 1e-12);
}

TEST_CASE("losses are non-negative and the cosine metric is capped at 2") {
  const SampleSet set = sample_queries(8, 8, patch_cfg(3, 4, 6));
  CorrMaps<double> sx, sy;
  sx.samples = sy.samples = set;
  Rng rng(12);
  sx.maps.resize(set.n_s(), set.n_p());
  for (Index i = 0; i < sx.maps.size(); ++i) sx.maps.data()[i] = rng.normal();
  sy.maps = -sx.maps;  // perfectly anti-correlated rows
  const auto cos_res = fsesim_loss(sx, sy, MapMetric::cos);
  CHECK(cos_res.loss >= 0.0);
  CHECK(cos_res.loss <= 2.0 + 1e-12);
  CHECK(cos_res.loss == doctest::Approx(2.0));
  CHECK(fsesim_loss(sx, sy, MapMetric::l1).loss >= 0.0);
}

TEST_CASE("scaling one feature field leaves cosine unchanged but moves l1") {
  Rng rng(13);
  const Tensord fx = random_normal<double>(1, 4, 12, 12, rng);
  const Tensord fy = random_normal<double>(1, 4, 12, 12, rng);
  Tensord fx_scaled = fx;
  fx_scaled.array() *= 3.7;
  const SampleSet set = sample_queries(12, 12, patch_cfg(6, 4, 7));
  const auto sy = corr_maps(fy, set);
  const auto sx = corr_maps(fx, set);
  const auto sx2 = corr_maps(fx_scaled, set);
  CHECK(std::abs(fsesim_loss(sx, sy, MapMetric::cos).loss -
                 fsesim_loss(sx2, sy, MapMetric::cos).loss) <= 1e-9);
  CHECK(std::abs(fsesim_loss(sx, sy, MapMetric::l1).loss -
                 fsesim_loss(sx2, sy, MapMetric::l1).loss) > 1e-6);
}

TEST_CASE("multi_layer_loss with one tap reduces to the plain loss") {
  const ArchSpec arch = default_arch();
  const auto weights = init_random<double>(arch, 6);
  Rng rng(14);
  const Tensord x = random_uniform<double>(1, 3, 32, 32, rng);
  const Tensord y = random_uniform<double>(1, 3, 32, 32, rng);
  const auto stack_x = extract(x, weights, arch);
  const auto stack_y = extract(y, weights, arch);
  SesimConfig cfg = patch_cfg(6, 4, 15);
  cfg.taps = {"tapA"};
  const auto ml = multi_layer_loss(stack_x, stack_y, cfg);

  const auto& fx = stack_x.tap("tapA").feat;
  const SampleSet set = sample_queries(static_cast<int>(fx.height()),
                                       static_cast<int>(fx.width()), cfg,
                                       tap_seed(cfg.seed, "tapA"));
  const auto sx = corr_maps(fx, set);
  const auto sy = corr_maps(stack_y.tap("tapA").feat, set);
  CHECK(ml.loss == fsesim_loss(sx, sy, cfg.metric).loss);
}

TEST_CASE("multi_layer_loss averages independently computed per-tap losses") {
  const ArchSpec arch = default_arch();
  const auto weights = init_random<double>(arch, 16);
  Rng rng(17);
  const Tensord x = random_uniform<double>(1, 3, 48, 48, rng);
  const Tensord y = random_uniform<double>(1, 3, 48, 48, rng);
  const auto stack_x = extract(x, weights, arch);
  const auto stack_y = extract(y, weights, arch);
  SesimConfig cfg = patch_cfg(6, 4, 18);
  cfg.taps = {"tapA", "tapB"};
  const auto ml = multi_layer_loss(stack_x, stack_y, cfg);

  double mean = 0;
  for (const auto& tap : cfg.taps) {
    const auto& fx = stack_x.tap(tap).feat;
    const SampleSet set = sample_queries(static_cast<int>(fx.height()),
                                         static_cast<int>(fx.width()), cfg,
                                         tap_seed(cfg.seed, tap));
    mean += 0.5 * fsesim_loss(corr_maps(fx, set),
                              corr_maps(stack_y.tap(tap).feat, set), cfg.metric)
                      .loss;
  }
  CHECK(std::abs(ml.loss - mean) <= 1e-12);
}

}  // TEST_SUITE
