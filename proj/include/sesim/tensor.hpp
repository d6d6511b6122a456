#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "sesim/rng.hpp"

namespace sesim {

using Index = Eigen::Index;

// Dense 4-D array (batch, channels, height, width), contiguous row-major in
// that axis order. The single carrier type for images, features, weights and
// gradients; templated on scalar so float is the storage precision and double
// backs the gradient-check tooling.
template <class Scalar>
class Tensor {
public:
  using Buffer = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  Tensor() : shape_{0, 0, 0, 0} {}

  Tensor(Index n, Index c, Index h, Index w) : shape_{n, c, h, w} {
    if (n < 0 || c < 0 || h < 0 || w < 0)
      throw std::invalid_argument("Tensor: negative extent");
    data_ = Buffer::Zero(n * c * h * w);
  }

  static Tensor zeros(Index n, Index c, Index h, Index w) {
    return Tensor(n, c, h, w);
  }

  static Tensor constant(Index n, Index c, Index h, Index w, Scalar value) {
    Tensor t(n, c, h, w);
    t.data_.setConstant(value);
    return t;
  }

  Index batch() const { return shape_[0]; }
  Index channels() const { return shape_[1]; }
  Index height() const { return shape_[2]; }
  Index width() const { return shape_[3]; }
  const std::array<Index, 4>& shape() const { return shape_; }
  Index size() const { return data_.size(); }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  Scalar operator()(Index n, Index c, Index h, Index w) const {
    return data_[flat(n, c, h, w)];
  }
  Scalar& operator()(Index n, Index c, Index h, Index w) {
    return data_[flat(n, c, h, w)];
  }

  Index flat(Index n, Index c, Index h, Index w) const {
    return ((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w;
  }

  Buffer& array() { return data_; }
  const Buffer& array() const { return data_; }
  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }

  // H x W view of one channel plane.
  auto plane(Index n, Index c) {
    return Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic,
                                    Eigen::RowMajor>>(
        data_.data() + flat(n, c, 0, 0), shape_[2], shape_[3]);
  }
  auto plane(Index n, Index c) const {
    return Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic,
                                          Eigen::Dynamic, Eigen::RowMajor>>(
        data_.data() + flat(n, c, 0, 0), shape_[2], shape_[3]);
  }

  // C x (H*W) view of one batch item; column j is the channel vector at
  // spatial position j = r*W + c.
  auto channels_matrix(Index n) {
    return Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic,
                                    Eigen::RowMajor>>(
        data_.data() + flat(n, 0, 0, 0), shape_[1], shape_[2] * shape_[3]);
  }
  auto channels_matrix(Index n) const {
    return Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic,
                                          Eigen::Dynamic, Eigen::RowMajor>>(
        data_.data() + flat(n, 0, 0, 0), shape_[1], shape_[2] * shape_[3]);
  }

  template <class Other>
  Tensor<Other> cast() const {
    Tensor<Other> out(shape_[0], shape_[1], shape_[2], shape_[3]);
    out.array() = data_.template cast<Other>();
    return out;
  }

private:
  std::array<Index, 4> shape_;
  Buffer data_;
};

using Tensorf = Tensor<float>;
using Tensord = Tensor<double>;

enum class Padding { zero, none };

inline const char* to_string(Padding p) {
  return p == Padding::zero ? "zero" : "none";
}

// Kernel weights (out_ch, in_ch, kh, kw) + per-output-channel bias.
// kh, kw must be odd, stride >= 1.
template <class Scalar>
struct ConvSpec {
  Tensor<Scalar> weights;
  Eigen::Vector<Scalar, Eigen::Dynamic> bias;
  int stride = 1;
  Padding padding = Padding::zero;

  Index out_channels() const { return weights.batch(); }
  Index in_channels() const { return weights.channels(); }
  Index kernel_h() const { return weights.height(); }
  Index kernel_w() const { return weights.width(); }

  void validate() const {
    if (kernel_h() % 2 == 0 || kernel_w() % 2 == 0)
      throw std::invalid_argument("ConvSpec: kernel extents must be odd");
    if (stride < 1) throw std::invalid_argument("ConvSpec: stride must be >= 1");
    if (bias.size() != out_channels())
      throw std::invalid_argument("ConvSpec: bias size != out channels");
  }

  Index pad() const { return padding == Padding::zero ? kernel_h() / 2 : 0; }

  // Output extents: floor((in + 2*pad - k) / stride) + 1.
  std::pair<Index, Index> out_extents(Index in_h, Index in_w) const {
    const Index ph = padding == Padding::zero ? kernel_h() / 2 : 0;
    const Index pw = padding == Padding::zero ? kernel_w() / 2 : 0;
    const Index oh = (in_h + 2 * ph - kernel_h()) / stride + 1;
    const Index ow = (in_w + 2 * pw - kernel_w()) / stride + 1;
    return {oh, ow};
  }
};

template <class Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <class Scalar>
using RowMajorMatrix =
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class Scalar>
using VectorX = Eigen::Vector<Scalar, Eigen::Dynamic>;

namespace detail {

// Gather the (in_ch*kh*kw) x (oh*ow) patch matrix for batch item n.
// Row index (ci*kh + ki)*kw + kj, column index r*ow + c; zero padding
// contributes zeros.
template <class Scalar>
void im2col(const Tensor<Scalar>& input, Index n, const ConvSpec<Scalar>& spec,
            Index oh, Index ow, RowMajorMatrix<Scalar>& cols) {
  const Index cin = input.channels();
  const Index ih = input.height();
  const Index iw = input.width();
  const Index kh = spec.kernel_h();
  const Index kw = spec.kernel_w();
  const Index pad = spec.pad();
  const Index stride = spec.stride;

  cols.setZero(cin * kh * kw, oh * ow);
  for (Index ci = 0; ci < cin; ++ci) {
    for (Index ki = 0; ki < kh; ++ki) {
      for (Index kj = 0; kj < kw; ++kj) {
        const Index row = (ci * kh + ki) * kw + kj;
        for (Index r = 0; r < oh; ++r) {
          const Index sr = r * stride - pad + ki;
          if (sr < 0 || sr >= ih) continue;
          const Scalar* src = input.data() + input.flat(n, ci, sr, 0);
          Scalar* dst = cols.data() + row * (oh * ow) + r * ow;
          for (Index c = 0; c < ow; ++c) {
            const Index sc = c * stride - pad + kj;
            if (sc < 0 || sc >= iw) continue;
            dst[c] = src[sc];
          }
        }
      }
    }
  }
}

// Scatter-add the patch-matrix gradient back onto the input gradient.
template <class Scalar>
void col2im_accumulate(const RowMajorMatrix<Scalar>& cols, Index n,
                       const ConvSpec<Scalar>& spec, Index oh, Index ow,
                       Tensor<Scalar>& grad_input) {
  const Index cin = grad_input.channels();
  const Index ih = grad_input.height();
  const Index iw = grad_input.width();
  const Index kh = spec.kernel_h();
  const Index kw = spec.kernel_w();
  const Index pad = spec.pad();
  const Index stride = spec.stride;

  for (Index ci = 0; ci < cin; ++ci) {
    for (Index ki = 0; ki < kh; ++ki) {
      for (Index kj = 0; kj < kw; ++kj) {
        const Index row = (ci * kh + ki) * kw + kj;
        for (Index r = 0; r < oh; ++r) {
          const Index sr = r * stride - pad + ki;
          if (sr < 0 || sr >= ih) continue;
          Scalar* dst = grad_input.data() + grad_input.flat(n, ci, sr, 0);
          const Scalar* src = cols.data() + row * (oh * ow) + r * ow;
          for (Index c = 0; c < ow; ++c) {
            const Index sc = c * stride - pad + kj;
            if (sc < 0 || sc >= iw) continue;
            dst[sc] += src[c];
          }
        }
      }
    }
  }
}

}  // namespace detail

// Cross-correlation (no kernel flip). Output extents per
// ConvSpec::out_extents. Implemented as im2col + GEMM.
template <class Scalar>
Tensor<Scalar> conv2d_forward(const Tensor<Scalar>& input,
                              const ConvSpec<Scalar>& spec) {
  spec.validate();
  if (input.channels() != spec.in_channels())
    throw std::invalid_argument(
        "conv2d_forward: input channels (" + std::to_string(input.channels()) +
        ") != spec in_channels (" + std::to_string(spec.in_channels()) + ")");
  const auto [oh, ow] = spec.out_extents(input.height(), input.width());
  if (oh <= 0 || ow <= 0)
    throw std::invalid_argument("conv2d_forward: zero-sized spatial output");

  const Index cout = spec.out_channels();
  Eigen::Map<const RowMajorMatrix<Scalar>> wmat(
      spec.weights.data(), cout,
      spec.in_channels() * spec.kernel_h() * spec.kernel_w());

  Tensor<Scalar> out(input.batch(), cout, oh, ow);
  RowMajorMatrix<Scalar> cols;
  for (Index n = 0; n < input.batch(); ++n) {
    detail::im2col(input, n, spec, oh, ow, cols);
    auto omat = out.channels_matrix(n);
    // lazyProduct: each output coefficient is one ordered dot product, so a
    // value depends only on its receptive field, never on its position in the
    // output (blocked GEMM kernels round differently per column, which would
    // break exact shift equivariance).
    omat.noalias() = wmat.lazyProduct(cols);
    omat.colwise() += spec.bias;
  }
  return out;
}

template <class Scalar>
struct ConvGrads {
  Tensor<Scalar> input;
  Tensor<Scalar> weights;
  Eigen::Vector<Scalar, Eigen::Dynamic> bias;
};

// Exact gradients of conv2d_forward with respect to input, weights and bias.
template <class Scalar>
ConvGrads<Scalar> conv2d_backward(const Tensor<Scalar>& input,
                                  const ConvSpec<Scalar>& spec,
                                  const Tensor<Scalar>& grad_out) {
  spec.validate();
  if (input.channels() != spec.in_channels())
    throw std::invalid_argument("conv2d_backward: input channel mismatch");
  const auto [oh, ow] = spec.out_extents(input.height(), input.width());
  if (grad_out.batch() != input.batch() ||
      grad_out.channels() != spec.out_channels() || grad_out.height() != oh ||
      grad_out.width() != ow)
    throw std::invalid_argument("conv2d_backward: grad_out shape mismatch");

  const Index cout = spec.out_channels();
  const Index wcols = spec.in_channels() * spec.kernel_h() * spec.kernel_w();
  Eigen::Map<const RowMajorMatrix<Scalar>> wmat(spec.weights.data(), cout,
                                                wcols);

  ConvGrads<Scalar> grads;
  grads.input = Tensor<Scalar>::zeros(input.batch(), input.channels(),
                                      input.height(), input.width());
  grads.weights = Tensor<Scalar>::zeros(cout, spec.in_channels(),
                                        spec.kernel_h(), spec.kernel_w());
  grads.bias = Eigen::Vector<Scalar, Eigen::Dynamic>::Zero(cout);

  Eigen::Map<RowMajorMatrix<Scalar>> gwmat(grads.weights.data(), cout, wcols);
  RowMajorMatrix<Scalar> cols, gcols;
  for (Index n = 0; n < input.batch(); ++n) {
    auto gmat = grad_out.channels_matrix(n);
    detail::im2col(input, n, spec, oh, ow, cols);
    gwmat.noalias() += gmat * cols.transpose();
    grads.bias += gmat.rowwise().sum();
    gcols.noalias() = wmat.transpose() * gmat;
    detail::col2im_accumulate(gcols, n, spec, oh, ow, grads.input);
  }
  return grads;
}

// Elementwise max(0, x).
template <class Scalar>
Tensor<Scalar> relu_forward(const Tensor<Scalar>& t) {
  Tensor<Scalar> out(t.batch(), t.channels(), t.height(), t.width());
  out.array() = t.array().max(Scalar(0));
  return out;
}

// Masks grad_out where the forward input was <= 0 (gradient at exactly 0 is 0).
template <class Scalar>
Tensor<Scalar> relu_backward(const Tensor<Scalar>& input,
                             const Tensor<Scalar>& grad_out) {
  if (!input.same_shape(grad_out))
    throw std::invalid_argument("relu_backward: shape mismatch");
  Tensor<Scalar> out(input.batch(), input.channels(), input.height(),
                     input.width());
  out.array() = (input.array() > Scalar(0))
                    .select(grad_out.array(),
                            Tensor<Scalar>::zeros(input.batch(), input.channels(),
                                                  input.height(), input.width())
                                .array());
  return out;
}

template <class Scalar>
struct MaxPool2Result {
  Tensor<Scalar> output;
  // Flat index into the input buffer of each window argmax; ties break to the
  // first index in row-major window order.
  std::vector<Index> argmax;
};

// 2x2 stride-2 max pooling; spatial extents must be even.
template <class Scalar>
MaxPool2Result<Scalar> maxpool2_forward(const Tensor<Scalar>& t) {
  if (t.height() % 2 != 0 || t.width() % 2 != 0)
    throw std::invalid_argument("maxpool2_forward: odd spatial extents");
  MaxPool2Result<Scalar> res;
  res.output = Tensor<Scalar>(t.batch(), t.channels(), t.height() / 2,
                              t.width() / 2);
  res.argmax.resize(static_cast<std::size_t>(res.output.size()));
  Index oi = 0;
  for (Index n = 0; n < t.batch(); ++n) {
    for (Index c = 0; c < t.channels(); ++c) {
      for (Index r = 0; r < t.height(); r += 2) {
        for (Index w = 0; w < t.width(); w += 2) {
          Index best = t.flat(n, c, r, w);
          Scalar bestv = t.data()[best];
          for (Index dr = 0; dr < 2; ++dr) {
            for (Index dw = 0; dw < 2; ++dw) {
              const Index idx = t.flat(n, c, r + dr, w + dw);
              const Scalar v = t.data()[idx];
              if (v > bestv) {
                bestv = v;
                best = idx;
              }
            }
          }
          res.output.data()[oi] = bestv;
          res.argmax[static_cast<std::size_t>(oi)] = best;
          ++oi;
        }
      }
    }
  }
  return res;
}

// Scatters grad_out to the recorded argmax positions.
template <class Scalar>
Tensor<Scalar> maxpool2_backward(const std::vector<Index>& argmax,
                                 const Tensor<Scalar>& grad_out,
                                 const std::array<Index, 4>& input_shape) {
  if (argmax.size() != static_cast<std::size_t>(grad_out.size()))
    throw std::invalid_argument("maxpool2_backward: argmax/grad size mismatch");
  Tensor<Scalar> grad_in(input_shape[0], input_shape[1], input_shape[2],
                         input_shape[3]);
  for (Index i = 0; i < grad_out.size(); ++i)
    grad_in.data()[argmax[static_cast<std::size_t>(i)]] += grad_out.data()[i];
  return grad_in;
}

// Bilinear interpolation, align-corners-false:
//   src = (dst + 0.5) * (in_extent / out_extent) - 0.5, clamped to [0, in-1];
//   out = (1-wr)(1-wc)*v00 + (1-wr)wc*v01 + wr(1-wc)*v10 + wr*wc*v11
// with r0 = floor(src_r), r1 = min(r0+1, in_h-1), wr = src_r - r0 (same for
// columns).
template <class Scalar>
Tensor<Scalar> bilinear_resize(const Tensor<Scalar>& t, Index out_h,
                               Index out_w) {
  if (out_h <= 0 || out_w <= 0)
    throw std::invalid_argument("bilinear_resize: non-positive target extents");
  if (out_h == t.height() && out_w == t.width()) return t;

  Tensor<Scalar> out(t.batch(), t.channels(), out_h, out_w);
  const double sh = static_cast<double>(t.height()) / static_cast<double>(out_h);
  const double sw = static_cast<double>(t.width()) / static_cast<double>(out_w);

  std::vector<Index> c0(out_w), c1(out_w);
  std::vector<double> wc(out_w);
  for (Index j = 0; j < out_w; ++j) {
    double src = (static_cast<double>(j) + 0.5) * sw - 0.5;
    if (src < 0) src = 0;
    if (src > static_cast<double>(t.width() - 1))
      src = static_cast<double>(t.width() - 1);
    c0[j] = static_cast<Index>(src);
    c1[j] = std::min<Index>(c0[j] + 1, t.width() - 1);
    wc[j] = src - static_cast<double>(c0[j]);
  }

  for (Index n = 0; n < t.batch(); ++n) {
    for (Index ch = 0; ch < t.channels(); ++ch) {
      for (Index i = 0; i < out_h; ++i) {
        double src = (static_cast<double>(i) + 0.5) * sh - 0.5;
        if (src < 0) src = 0;
        if (src > static_cast<double>(t.height() - 1))
          src = static_cast<double>(t.height() - 1);
        const Index r0 = static_cast<Index>(src);
        const Index r1 = std::min<Index>(r0 + 1, t.height() - 1);
        const double wr = src - static_cast<double>(r0);
        for (Index j = 0; j < out_w; ++j) {
          const double v00 = t(n, ch, r0, c0[j]);
          const double v01 = t(n, ch, r0, c1[j]);
          const double v10 = t(n, ch, r1, c0[j]);
          const double v11 = t(n, ch, r1, c1[j]);
          const double top = v00 + (v01 - v00) * wc[j];
          const double bot = v10 + (v11 - v10) * wc[j];
          out(n, ch, i, j) = static_cast<Scalar>(top + (bot - top) * wr);
        }
      }
    }
  }
  return out;
}

// Seeded tensor fill helpers.
template <class Scalar>
Tensor<Scalar> random_normal(Index n, Index c, Index h, Index w, Rng& rng,
                             double stddev = 1.0) {
  Tensor<Scalar> t(n, c, h, w);
  for (Index i = 0; i < t.size(); ++i)
    t.data()[i] = static_cast<Scalar>(rng.normal() * stddev);
  return t;
}

template <class Scalar>
Tensor<Scalar> random_uniform(Index n, Index c, Index h, Index w, Rng& rng,
                              double lo = 0.0, double hi = 1.0) {
  Tensor<Scalar> t(n, c, h, w);
  for (Index i = 0; i < t.size(); ++i)
    t.data()[i] = static_cast<Scalar>(rng.uniform(lo, hi));
  return t;
}

}  // namespace sesim
