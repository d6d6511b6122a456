#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <numeric>
#include <stdexcept>
#include <vector>

#include <unsupported/Eigen/FFT>

#include "sesim/tensor.hpp"

namespace sesim {

// Paired two-domain corpus: item i is one random arrangement of shapes
// rendered twice, as oriented color stripes (domain A) and as multi-octave
// value noise (domain B). The pair shares the shape mask pixel for pixel;
// everything else (orientation, frequency, palette, noise field) is drawn
// independently, so only geometry ties a pair together.
struct SynthSpec {
  int height = 96, width = 96;
  int count = 50;
  int shapes_min = 4, shapes_max = 6;
  double stripe_freq_lo = 5.0, stripe_freq_hi = 9.0;  // cycles per image
  int noise_octaves = 4;
  std::uint64_t seed = 0;

  void validate() const {
    if (height < 8 || width < 8)
      throw std::invalid_argument("SynthSpec: image side must be >= 8");
    if (count < 1) throw std::invalid_argument("SynthSpec: count must be >= 1");
    if (shapes_min < 1 || shapes_max < shapes_min)
      throw std::invalid_argument("SynthSpec: bad shape count range");
    if (stripe_freq_lo <= 0 || stripe_freq_hi < stripe_freq_lo)
      throw std::invalid_argument("SynthSpec: bad stripe frequency range");
    if (noise_octaves < 1 || noise_octaves > 8)
      throw std::invalid_argument("SynthSpec: noise octaves in [1,8]");
  }
};

template <class Scalar>
struct SynthCorpus {
  std::vector<Tensor<Scalar>> a, b;   // aligned pairs share an index
  std::vector<Tensor<Scalar>> masks;  // (1,1,H,W), 1 inside a shape
  std::vector<std::size_t> shuffled;  // derangement: b[shuffled[i]] vs a[i]
};

namespace detail {

struct Shape {
  bool ellipse = true;
  double cx = 0, cy = 0;      // center, pixels
  double rx = 1, ry = 1;      // ellipse radii
  double angle = 0;           // ellipse rotation
  std::vector<double> px, py; // polygon vertices
};

inline bool inside(const Shape& s, double x, double y) {
  if (s.ellipse) {
    const double dx = x - s.cx, dy = y - s.cy;
    const double c = std::cos(s.angle), sn = std::sin(s.angle);
    const double u = (c * dx + sn * dy) / s.rx;
    const double v = (-sn * dx + c * dy) / s.ry;
    return u * u + v * v <= 1.0;
  }
  // even-odd ray casting
  bool in = false;
  const std::size_t n = s.px.size();
  for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
    if ((s.py[i] > y) != (s.py[j] > y) &&
        x < (s.px[j] - s.px[i]) * (y - s.py[i]) / (s.py[j] - s.py[i]) + s.px[i])
      in = !in;
  }
  return in;
}

template <class Scalar>
Tensor<Scalar> render_mask(int h, int w, const SynthSpec& spec, Rng& rng) {
  const double side = std::min(h, w);
  const int n = static_cast<int>(rng.uniform_int(spec.shapes_min, spec.shapes_max));
  std::vector<Shape> shapes;
  for (int i = 0; i < n; ++i) {
    Shape s;
    s.ellipse = rng.bernoulli(0.5);
    s.cx = rng.uniform(0.1 * w, 0.9 * w);
    s.cy = rng.uniform(0.1 * h, 0.9 * h);
    if (s.ellipse) {
      s.rx = rng.uniform(0.08, 0.22) * side;
      s.ry = rng.uniform(0.08, 0.22) * side;
      s.angle = rng.uniform(0.0, 3.14159265358979323846);
    } else {
      const int verts = static_cast<int>(rng.uniform_int(3, 5));
      const double base = rng.uniform(0.0, 6.283185307179586);
      const double r0 = rng.uniform(0.10, 0.22) * side;
      for (int v = 0; v < verts; ++v) {
        const double ang = base + 6.283185307179586 * v / verts;
        const double r = r0 * rng.uniform(0.7, 1.3);
        s.px.push_back(s.cx + r * std::cos(ang));
        s.py.push_back(s.cy + r * std::sin(ang));
      }
    }
    shapes.push_back(std::move(s));
  }
  Tensor<Scalar> mask = Tensor<Scalar>::zeros(1, 1, h, w);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c)
      for (const auto& s : shapes)
        if (inside(s, c + 0.5, r + 0.5)) {
          mask(0, 0, r, c) = Scalar(1);
          break;
        }
  return mask;
}

// Feathered region weight: two passes of a 5-tap binomial blur over the
// binary mask. Softening the fg/bg transition keeps broadband edge energy out
// of both texture domains' spectra; the mask itself stays binary.
template <class Scalar>
MatrixX<double> feathered_alpha(const Tensor<Scalar>& mask) {
  const Index h = mask.height(), w = mask.width();
  MatrixX<double> a = mask.plane(0, 0).template cast<double>();
  const double k[5] = {1.0 / 16, 4.0 / 16, 6.0 / 16, 4.0 / 16, 1.0 / 16};
  for (int pass = 0; pass < 2; ++pass) {
    MatrixX<double> t(h, w);
    for (Index r = 0; r < h; ++r)
      for (Index c = 0; c < w; ++c) {
        double s = 0;
        for (int d = -2; d <= 2; ++d)
          s += k[d + 2] * a(r, std::clamp<Index>(c + d, 0, w - 1));
        t(r, c) = s;
      }
    for (Index r = 0; r < h; ++r)
      for (Index c = 0; c < w; ++c) {
        double s = 0;
        for (int d = -2; d <= 2; ++d)
          s += k[d + 2] * t(std::clamp<Index>(r + d, 0, h - 1), c);
        a(r, c) = s;
      }
  }
  return a;
}

struct StripeParams {
  double theta, freq, phase, theta_ramp, freq_ramp;
  double color0[3], color1[3];
};

inline StripeParams draw_stripes(Rng& rng, const SynthSpec& spec, bool foreground) {
  StripeParams p;
  p.theta = rng.uniform(0.0, 3.14159265358979323846);
  if (foreground) p.theta += 1.5707963267948966;  // roughly perpendicular regions
  p.freq = rng.uniform(spec.stripe_freq_lo, spec.stripe_freq_hi);
  p.phase = rng.uniform(0.0, 6.283185307179586);
  p.theta_ramp = rng.uniform(0.6, 1.2);   // radians across the image width
  p.freq_ramp = rng.uniform(0.3, 0.7);    // relative growth across the height
  const double lum = foreground ? 0.65 : 0.35;
  for (int c = 0; c < 3; ++c) {
    const double base = lum + rng.uniform(-0.15, 0.15);
    p.color0[c] = std::min(0.85, std::max(0.15, base - rng.uniform(0.1, 0.25)));
    p.color1[c] = std::min(1.0, std::max(0.0, base + rng.uniform(0.1, 0.25)));
  }
  return p;
}

// Oriented sinusoid whose orientation and frequency ramp across the image, so
// every location carries a distinct local texture signature.
inline double stripe_value(const StripeParams& p, double x, double y, int w, int h) {
  const double th = p.theta + p.theta_ramp * x / w;
  const double f = p.freq * (1.0 + p.freq_ramp * y / h);
  const double u = std::cos(th) * x / w + std::sin(th) * y / h;
  return 0.5 + 0.5 * std::sin(6.283185307179586 * f * u + p.phase);
}

// Multi-octave value noise: bilinear interpolation of seeded lattice normals,
// halving the cell size each octave.
inline double value_noise(std::uint64_t key, double x, double y, double cell,
                          int octaves) {
  double sum = 0, amp = 1, norm = 0;
  for (int o = 0; o < octaves; ++o) {
    const double gx = x / cell, gy = y / cell;
    const int x0 = static_cast<int>(std::floor(gx)), y0 = static_cast<int>(std::floor(gy));
    const double fx = gx - x0, fy = gy - y0;
    auto at = [&](int ix, int iy) {
      return hash_normal(key, static_cast<std::uint64_t>(o + 1),
                         static_cast<std::uint64_t>(ix + 1024),
                         static_cast<std::uint64_t>(iy + 1024));
    };
    const double top = at(x0, y0) + (at(x0 + 1, y0) - at(x0, y0)) * fx;
    const double bot = at(x0, y0 + 1) + (at(x0 + 1, y0 + 1) - at(x0, y0 + 1)) * fx;
    sum += amp * (top + (bot - top) * fy);
    norm += amp;
    amp *= 0.8;
    cell *= 0.5;
  }
  // squash to [0,1]
  return 0.5 + 0.5 * std::tanh(sum / norm);
}

struct NoiseParams {
  std::uint64_t key;
  double cell;
  double color0[3], color1[3];
};

inline NoiseParams draw_noise(Rng& rng, bool foreground) {
  NoiseParams p;
  p.key = rng.next_u64();
  p.cell = rng.uniform(4.0, 7.0);  // coarsest octave cell size in pixels
  const double lum = foreground ? 0.65 : 0.35;
  for (int c = 0; c < 3; ++c) {
    const double base = lum + rng.uniform(-0.15, 0.15);
    p.color0[c] = std::min(0.85, std::max(0.15, base - rng.uniform(0.1, 0.25)));
    p.color1[c] = std::min(1.0, std::max(0.0, base + rng.uniform(0.1, 0.25)));
  }
  return p;
}

}  // namespace detail

template <class Scalar>
SynthCorpus<Scalar> synth_dataset(const SynthSpec& spec) {
  spec.validate();
  SynthCorpus<Scalar> corpus;
  Rng rng(splitmix64(spec.seed ^ 0x73796e7468ULL));
  const int h = spec.height, w = spec.width;

  for (int item = 0; item < spec.count; ++item) {
    Tensor<Scalar> mask = detail::render_mask<Scalar>(h, w, spec, rng);

    const MatrixX<double> alpha = detail::feathered_alpha(mask);

    const auto fg_s = detail::draw_stripes(rng, spec, true);
    const auto bg_s = detail::draw_stripes(rng, spec, false);
    Tensor<Scalar> img_a(1, 3, h, w);
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c) {
        const double a = alpha(r, c);
        const double tf = detail::stripe_value(fg_s, c + 0.5, r + 0.5, w, h);
        const double tb = detail::stripe_value(bg_s, c + 0.5, r + 0.5, w, h);
        for (int ch = 0; ch < 3; ++ch) {
          const double vf = fg_s.color0[ch] + tf * (fg_s.color1[ch] - fg_s.color0[ch]);
          const double vb = bg_s.color0[ch] + tb * (bg_s.color1[ch] - bg_s.color0[ch]);
          img_a(0, ch, r, c) = static_cast<Scalar>(a * vf + (1.0 - a) * vb);
        }
      }

    const auto fg_n = detail::draw_noise(rng, true);
    const auto bg_n = detail::draw_noise(rng, false);
    Tensor<Scalar> img_b(1, 3, h, w);
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c) {
        const double a = alpha(r, c);
        const double tf =
            detail::value_noise(fg_n.key, c + 0.5, r + 0.5, fg_n.cell, spec.noise_octaves);
        const double tb =
            detail::value_noise(bg_n.key, c + 0.5, r + 0.5, bg_n.cell, spec.noise_octaves);
        for (int ch = 0; ch < 3; ++ch) {
          const double vf = fg_n.color0[ch] + tf * (fg_n.color1[ch] - fg_n.color0[ch]);
          const double vb = bg_n.color0[ch] + tb * (bg_n.color1[ch] - bg_n.color0[ch]);
          img_b(0, ch, r, c) = static_cast<Scalar>(a * vf + (1.0 - a) * vb);
        }
      }

    corpus.a.push_back(std::move(img_a));
    corpus.b.push_back(std::move(img_b));
    corpus.masks.push_back(std::move(mask));
  }

  // Sattolo's algorithm: one full cycle, so shuffled[i] != i whenever count > 1.
  corpus.shuffled.resize(static_cast<std::size_t>(spec.count));
  std::iota(corpus.shuffled.begin(), corpus.shuffled.end(), std::size_t{0});
  for (std::size_t i = corpus.shuffled.size() - 1; i > 0; --i) {
    const auto j = static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
    std::swap(corpus.shuffled[i], corpus.shuffled[j]);
  }
  return corpus;
}

// Fraction of non-DC spectral energy at radial frequency >= n/4, measured on
// the gray center crop of side n (largest power of two fitting the image).
// Separates the two texture domains: stripes concentrate energy at low
// frequencies, value noise keeps a heavy high-frequency tail.
template <class Scalar>
double high_freq_fraction(const Tensor<Scalar>& image) {
  int n = 1;
  while (n * 2 <= std::min(image.height(), image.width()) && n < 64) n *= 2;
  const Index r0 = (image.height() - n) / 2, c0 = (image.width() - n) / 2;

  std::vector<std::vector<std::complex<double>>> rows(
      static_cast<std::size_t>(n), std::vector<std::complex<double>>(static_cast<std::size_t>(n)));
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c) {
      double v = 0;
      for (Index ch = 0; ch < image.channels(); ++ch)
        v += static_cast<double>(image(0, ch, r0 + r, c0 + c));
      rows[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)] =
          v / static_cast<double>(image.channels());
    }

  Eigen::FFT<double> fft;
  std::vector<std::complex<double>> line(static_cast<std::size_t>(n));
  for (int r = 0; r < n; ++r) {
    fft.fwd(line, rows[static_cast<std::size_t>(r)]);
    rows[static_cast<std::size_t>(r)] = line;
  }
  std::vector<std::complex<double>> col(static_cast<std::size_t>(n));
  for (int c = 0; c < n; ++c) {
    for (int r = 0; r < n; ++r) col[static_cast<std::size_t>(r)] =
        rows[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)];
    fft.fwd(line, col);
    for (int r = 0; r < n; ++r) rows[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)] =
        line[static_cast<std::size_t>(r)];
  }

  double total = 0, high = 0;
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c) {
      if (r == 0 && c == 0) continue;  // DC
      const int fr = std::min(r, n - r), fc = std::min(c, n - c);
      const double e = std::norm(rows[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)]);
      total += e;
      if (std::sqrt(static_cast<double>(fr) * fr + static_cast<double>(fc) * fc) >= n / 4.0)
        high += e;
    }
  return total > 0 ? high / total : 0.0;
}

}  // namespace sesim
