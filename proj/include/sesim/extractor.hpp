#pragma once

#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "sesim/tensor.hpp"

namespace sesim {

enum class LayerKind { conv, relu, pool };

struct LayerDef {
  LayerKind kind;
  int conv = -1;     // index into ArchSpec::convs when kind == conv
  std::string tap;   // non-empty only on relu layers
};

struct ConvShape {
  int in_ch = 0, out_ch = 0, kernel = 3, stride = 1;
  Padding padding = Padding::zero;
};

// Ordered layer list with named tap points. Taps must sit on relu layers and
// be unique.
struct ArchSpec {
  std::vector<LayerDef> layers;
  std::vector<ConvShape> convs;

  void validate() const {
    std::set<std::string> seen;
    int conv_count = 0;
    for (const auto& l : layers) {
      if (l.kind == LayerKind::conv) {
        if (l.conv < 0 || l.conv >= static_cast<int>(convs.size()))
          throw std::invalid_argument("ArchSpec: conv index out of range");
        ++conv_count;
      }
      if (!l.tap.empty()) {
        if (l.kind != LayerKind::relu)
          throw std::invalid_argument("ArchSpec: tap '" + l.tap +
                                      "' not on a relu layer");
        if (!seen.insert(l.tap).second)
          throw std::invalid_argument("ArchSpec: duplicate tap '" + l.tap + "'");
      }
    }
    if (conv_count != static_cast<int>(convs.size()))
      throw std::invalid_argument("ArchSpec: unused conv definitions");
  }

  std::vector<std::string> tap_names() const {
    std::vector<std::string> names;
    for (const auto& l : layers)
      if (!l.tap.empty()) names.push_back(l.tap);
    return names;
  }

  int tap_layer(const std::string& name) const {
    for (std::size_t i = 0; i < layers.size(); ++i)
      if (layers[i].tap == name) return static_cast<int>(i);
    throw std::invalid_argument("ArchSpec: unknown tap '" + name + "'");
  }

  // Cumulative downsampling factor of the tap relative to the input image.
  int tap_stride(const std::string& name) const {
    const int upto = tap_layer(name);
    int s = 1;
    for (int i = 0; i <= upto; ++i) {
      if (layers[i].kind == LayerKind::pool) s *= 2;
      if (layers[i].kind == LayerKind::conv) s *= convs[layers[i].conv].stride;
    }
    return s;
  }

  int tap_channels(const std::string& name) const {
    const int upto = tap_layer(name);
    int ch = -1;
    for (int i = 0; i <= upto; ++i)
      if (layers[i].kind == LayerKind::conv) ch = convs[layers[i].conv].out_ch;
    if (ch < 0) throw std::invalid_argument("ArchSpec: tap before any conv");
    return ch;
  }

  int input_channels() const {
    for (const auto& l : layers)
      if (l.kind == LayerKind::conv) return convs[l.conv].in_ch;
    throw std::invalid_argument("ArchSpec: no conv layers");
  }
};

// Desk-scale analogue of the VGG16 relu3_1 / relu4_1 tap geometry: two taps,
// "tapA" at cumulative stride 4 (64 channels) and "tapB" at stride 8
// (128 channels).
inline ArchSpec default_arch(Padding padding = Padding::zero) {
  ArchSpec a;
  auto conv = [&](int in, int out) {
    a.convs.push_back({in, out, 3, 1, padding});
    a.layers.push_back({LayerKind::conv, static_cast<int>(a.convs.size()) - 1, ""});
  };
  auto relu = [&](const std::string& tap = "") {
    a.layers.push_back({LayerKind::relu, -1, tap});
  };
  auto pool = [&] { a.layers.push_back({LayerKind::pool, -1, ""}); };

  conv(3, 16);
  relu();
  pool();
  conv(16, 32);
  relu();
  pool();
  conv(32, 64);
  relu("tapA");
  pool();
  conv(64, 128);
  relu("tapB");
  a.validate();
  return a;
}

// Optional per-channel input normalization declared by a weight manifest.
struct Normalization {
  std::vector<double> mean, std;
};

enum class WeightProvenance { loaded, seeded_random };

template <class Scalar>
struct ExtractorWeights {
  std::vector<Tensor<Scalar>> weight;             // per conv layer
  std::vector<VectorX<Scalar>> bias;              // per conv layer
  WeightProvenance provenance = WeightProvenance::seeded_random;
  std::optional<Normalization> normalization;

  void check_arch(const ArchSpec& arch) const {
    if (weight.size() != arch.convs.size() || bias.size() != arch.convs.size())
      throw std::invalid_argument("ExtractorWeights: conv count mismatch");
    for (std::size_t i = 0; i < arch.convs.size(); ++i) {
      const auto& c = arch.convs[i];
      if (weight[i].batch() != c.out_ch || weight[i].channels() != c.in_ch ||
          weight[i].height() != c.kernel || weight[i].width() != c.kernel)
        throw std::invalid_argument("ExtractorWeights: shape mismatch at conv" +
                                    std::to_string(i));
      if (bias[i].size() != c.out_ch)
        throw std::invalid_argument("ExtractorWeights: bias mismatch at conv" +
                                    std::to_string(i));
    }
  }

  template <class Other>
  ExtractorWeights<Other> cast() const {
    ExtractorWeights<Other> out;
    out.provenance = provenance;
    out.normalization = normalization;
    for (const auto& w : weight) out.weight.push_back(w.template cast<Other>());
    for (const auto& b : bias) out.bias.push_back(b.template cast<Other>());
    return out;
  }

  ConvSpec<Scalar> conv_spec(const ArchSpec& arch, int conv_index) const {
    const auto& c = arch.convs[static_cast<std::size_t>(conv_index)];
    return ConvSpec<Scalar>{weight[static_cast<std::size_t>(conv_index)],
                            bias[static_cast<std::size_t>(conv_index)],
                            c.stride, c.padding};
  }
};

// He fan-in initialization: weight ~ N(0, 2 / (in_ch * k * k)), bias 0.
// Deterministic per (arch, seed).
template <class Scalar>
ExtractorWeights<Scalar> init_random(const ArchSpec& arch, std::uint64_t seed) {
  arch.validate();
  ExtractorWeights<Scalar> w;
  w.provenance = WeightProvenance::seeded_random;
  Rng rng(splitmix64(seed ^ 0x657874726163ULL));
  for (const auto& c : arch.convs) {
    const double stddev = std::sqrt(2.0 / (c.in_ch * c.kernel * c.kernel));
    w.weight.push_back(random_normal<Scalar>(c.out_ch, c.in_ch, c.kernel,
                                             c.kernel, rng, stddev));
    w.bias.push_back(VectorX<Scalar>::Zero(c.out_ch));
  }
  return w;
}

// Forward activations captured at the named taps plus the per-layer cache
// needed to run the backward pass. Tied to one extraction; treat as
// immutable once returned.
template <class Scalar>
struct FeatureStack {
  struct Tap {
    Tensor<Scalar> feat;
    int stride = 1;
  };
  std::map<std::string, Tap> taps;

  // layer_inputs[i] is the input tensor of layer i; one extra slot at the end
  // holds the final output.
  std::vector<Tensor<Scalar>> layer_inputs;
  std::vector<std::vector<Index>> pool_argmax;  // per layer; empty unless pool

  const Tap& tap(const std::string& name) const {
    auto it = taps.find(name);
    if (it == taps.end())
      throw std::invalid_argument("FeatureStack: unknown tap '" + name + "'");
    return it->second;
  }
};

// Forward pass through the stack, caching every activation. Image must be
// (1, in_ch, H, W); values are expected in [0, 1].
template <class Scalar>
FeatureStack<Scalar> extract(const Tensor<Scalar>& image,
                             const ExtractorWeights<Scalar>& weights,
                             const ArchSpec& arch) {
  arch.validate();
  weights.check_arch(arch);
  if (image.channels() != arch.input_channels())
    throw std::invalid_argument("extract: image has " +
                                std::to_string(image.channels()) +
                                " channels, arch expects " +
                                std::to_string(arch.input_channels()));

  FeatureStack<Scalar> stack;
  Tensor<Scalar> cur = image;
  if (weights.normalization) {
    const auto& nz = *weights.normalization;
    for (Index c = 0; c < cur.channels(); ++c)
      cur.plane(0, c).array() =
          (cur.plane(0, c).array() - Scalar(nz.mean[static_cast<std::size_t>(c)])) /
          Scalar(nz.std[static_cast<std::size_t>(c)]);
  }

  int stride = 1;
  for (std::size_t i = 0; i < arch.layers.size(); ++i) {
    const auto& l = arch.layers[i];
    stack.layer_inputs.push_back(cur);
    stack.pool_argmax.emplace_back();
    switch (l.kind) {
      case LayerKind::conv: {
        cur = conv2d_forward(cur, weights.conv_spec(arch, l.conv));
        stride *= arch.convs[static_cast<std::size_t>(l.conv)].stride;
        break;
      }
      case LayerKind::relu: {
        cur = relu_forward(cur);
        if (!l.tap.empty()) stack.taps[l.tap] = {cur, stride};
        break;
      }
      case LayerKind::pool: {
        auto res = maxpool2_forward(cur);
        cur = std::move(res.output);
        stack.pool_argmax.back() = std::move(res.argmax);
        stride *= 2;
        break;
      }
    }
  }
  stack.layer_inputs.push_back(cur);
  return stack;
}

// Backpropagates gradients supplied at a subset of taps down to the image.
// Contributions from several taps sum.
template <class Scalar>
Tensor<Scalar> extract_backward(
    const FeatureStack<Scalar>& stack,
    const std::map<std::string, Tensor<Scalar>>& grad_per_tap,
    const ExtractorWeights<Scalar>& weights, const ArchSpec& arch) {
  for (const auto& [name, g] : grad_per_tap) {
    const auto& tap = stack.tap(name);
    if (!g.same_shape(tap.feat))
      throw std::invalid_argument("extract_backward: gradient shape mismatch at tap '" +
                                  name + "'");
  }

  const auto& out = stack.layer_inputs.back();
  Tensor<Scalar> grad =
      Tensor<Scalar>::zeros(out.batch(), out.channels(), out.height(), out.width());

  for (int i = static_cast<int>(arch.layers.size()) - 1; i >= 0; --i) {
    const auto& l = arch.layers[static_cast<std::size_t>(i)];
    const auto& input = stack.layer_inputs[static_cast<std::size_t>(i)];
    if (l.kind == LayerKind::relu && !l.tap.empty()) {
      auto it = grad_per_tap.find(l.tap);
      if (it != grad_per_tap.end()) grad.array() += it->second.array();
    }
    switch (l.kind) {
      case LayerKind::conv:
        grad = conv2d_backward(input, weights.conv_spec(arch, l.conv), grad).input;
        break;
      case LayerKind::relu:
        grad = relu_backward(input, grad);
        break;
      case LayerKind::pool:
        grad = maxpool2_backward(stack.pool_argmax[static_cast<std::size_t>(i)],
                                 grad, input.shape());
        break;
    }
  }

  if (weights.normalization) {
    const auto& nz = *weights.normalization;
    for (Index c = 0; c < grad.channels(); ++c)
      grad.plane(0, c).array() /= Scalar(nz.std[static_cast<std::size_t>(c)]);
  }
  return grad;
}

// Learnable per-tap feature selection: 1x1 conv -> relu -> 1x1 conv appended
// to the frozen trunk.
template <class Scalar>
struct SelectionLayers {
  struct TapSel {
    Tensor<Scalar> w1;        // (hidden, in_ch, 1, 1)
    VectorX<Scalar> b1;
    Tensor<Scalar> w2;        // (out_ch, hidden, 1, 1)
    VectorX<Scalar> b2;
  };
  std::map<std::string, TapSel> taps;

  const TapSel& tap(const std::string& name) const {
    auto it = taps.find(name);
    if (it == taps.end())
      throw std::invalid_argument("SelectionLayers: unknown tap '" + name + "'");
    return it->second;
  }

  // Square identity weights, zero bias: selection becomes a no-op on
  // non-negative features.
  static SelectionLayers identity(const std::map<std::string, int>& tap_channels) {
    SelectionLayers sel;
    for (const auto& [name, ch] : tap_channels) {
      TapSel s;
      s.w1 = Tensor<Scalar>::zeros(ch, ch, 1, 1);
      s.w2 = Tensor<Scalar>::zeros(ch, ch, 1, 1);
      for (Index c = 0; c < ch; ++c) {
        s.w1(c, c, 0, 0) = Scalar(1);
        s.w2(c, c, 0, 0) = Scalar(1);
      }
      s.b1 = VectorX<Scalar>::Zero(ch);
      s.b2 = VectorX<Scalar>::Zero(ch);
      sel.taps[name] = std::move(s);
    }
    return sel;
  }

  // Small-random init (std 0.01); hidden width equals the tap channel count.
  static SelectionLayers seeded_random(const std::map<std::string, int>& tap_channels,
                                       std::uint64_t seed, double stddev = 0.01) {
    SelectionLayers sel;
    Rng rng(splitmix64(seed ^ 0x73656c656374ULL));
    for (const auto& [name, ch] : tap_channels) {
      TapSel s;
      s.w1 = random_normal<Scalar>(ch, ch, 1, 1, rng, stddev);
      s.b1 = VectorX<Scalar>::Zero(ch);
      s.w2 = random_normal<Scalar>(ch, ch, 1, 1, rng, stddev);
      s.b2 = VectorX<Scalar>::Zero(ch);
      sel.taps[name] = std::move(s);
    }
    return sel;
  }

  template <class Other>
  SelectionLayers<Other> cast() const {
    SelectionLayers<Other> out;
    for (const auto& [name, s] : taps) {
      typename SelectionLayers<Other>::TapSel o;
      o.w1 = s.w1.template cast<Other>();
      o.b1 = s.b1.template cast<Other>();
      o.w2 = s.w2.template cast<Other>();
      o.b2 = s.b2.template cast<Other>();
      out.taps[name] = std::move(o);
    }
    return out;
  }
};

// Per-tap intermediates kept for the selection backward pass.
template <class Scalar>
struct SelectionCache {
  struct Entry {
    Tensor<Scalar> input;  // tap features fed in
    Tensor<Scalar> mid;    // first 1x1 conv output, pre-relu
    Tensor<Scalar> out;
    int stride = 1;
  };
  std::map<std::string, Entry> taps;
};

template <class Scalar>
ConvSpec<Scalar> selection_conv(const Tensor<Scalar>& w, const VectorX<Scalar>& b) {
  return ConvSpec<Scalar>{w, b, 1, Padding::none};
}

template <class Scalar>
SelectionCache<Scalar> apply_selection_cached(const FeatureStack<Scalar>& stack,
                                              const SelectionLayers<Scalar>& sel) {
  SelectionCache<Scalar> cache;
  for (const auto& [name, s] : sel.taps) {
    const auto& tap = stack.tap(name);
    if (tap.feat.channels() != s.w1.channels())
      throw std::invalid_argument("apply_selection: channel mismatch at tap '" +
                                  name + "'");
    typename SelectionCache<Scalar>::Entry e;
    e.input = tap.feat;
    e.stride = tap.stride;
    e.mid = conv2d_forward(tap.feat, selection_conv(s.w1, s.b1));
    e.out = conv2d_forward(relu_forward(e.mid), selection_conv(s.w2, s.b2));
    cache.taps[name] = std::move(e);
  }
  return cache;
}

// Convenience wrapper producing a FeatureStack of selected features (no
// backward cache retained beyond the taps themselves).
template <class Scalar>
FeatureStack<Scalar> apply_selection(const FeatureStack<Scalar>& stack,
                                     const SelectionLayers<Scalar>& sel) {
  FeatureStack<Scalar> out;
  auto cache = apply_selection_cached(stack, sel);
  for (auto& [name, e] : cache.taps)
    out.taps[name] = {std::move(e.out), e.stride};
  return out;
}

template <class Scalar>
struct SelectionGrads {
  struct TapGrad {
    Tensor<Scalar> w1;
    VectorX<Scalar> b1;
    Tensor<Scalar> w2;
    VectorX<Scalar> b2;
  };
  std::map<std::string, TapGrad> taps;

  void accumulate(const SelectionGrads& o) {
    for (const auto& [name, g] : o.taps) {
      auto it = taps.find(name);
      if (it == taps.end()) {
        taps[name] = g;
      } else {
        it->second.w1.array() += g.w1.array();
        it->second.b1 += g.b1;
        it->second.w2.array() += g.w2.array();
        it->second.b2 += g.b2;
      }
    }
  }

  void scale(Scalar s) {
    for (auto& [name, g] : taps) {
      g.w1.array() *= s;
      g.b1 *= s;
      g.w2.array() *= s;
      g.b2 *= s;
    }
  }
};

template <class Scalar>
struct SelectionBackwardResult {
  std::map<std::string, Tensor<Scalar>> grad_input;  // per tap
  SelectionGrads<Scalar> grads;
};

// Gradients of the selection stage with respect to its weights and inputs.
template <class Scalar>
SelectionBackwardResult<Scalar> selection_backward(
    const SelectionCache<Scalar>& cache, const SelectionLayers<Scalar>& sel,
    const std::map<std::string, Tensor<Scalar>>& grad_out_per_tap) {
  SelectionBackwardResult<Scalar> res;
  for (const auto& [name, gout] : grad_out_per_tap) {
    auto it = cache.taps.find(name);
    if (it == cache.taps.end())
      throw std::invalid_argument("selection_backward: unknown tap '" + name + "'");
    const auto& e = it->second;
    const auto& s = sel.tap(name);
    if (!gout.same_shape(e.out))
      throw std::invalid_argument("selection_backward: gradient shape mismatch");

    const Tensor<Scalar> hidden = relu_forward(e.mid);
    auto g2 = conv2d_backward(hidden, selection_conv(s.w2, s.b2), gout);
    const Tensor<Scalar> gmid = relu_backward(e.mid, g2.input);
    auto g1 = conv2d_backward(e.input, selection_conv(s.w1, s.b1), gmid);

    res.grad_input[name] = std::move(g1.input);
    typename SelectionGrads<Scalar>::TapGrad tg;
    tg.w1 = std::move(g1.weights);
    tg.b1 = std::move(g1.bias);
    tg.w2 = std::move(g2.weights);
    tg.b2 = std::move(g2.bias);
    res.grads.taps[name] = std::move(tg);
  }
  return res;
}

}  // namespace sesim
