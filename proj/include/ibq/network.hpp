// Copyright 2026 The ibq Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Quantized feed-forward network engine.
//
// Forward passes fake-quantize the output of every dense and convolutional
// layer (after its activation function) to 2^k levels inside the range
// observed so far in the current epoch. Backward passes treat the quantizer
// as the identity inside that range (straight-through) and as zero outside
// it. Weights and biases always stay in full precision.
//
// Activations are kept batch-major: one row per sample. Spatial tensors are
// flattened channel-major, index = (c * H + h) * W + w.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <limits>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "ibq/data.hpp"
#include "ibq/quantize.hpp"
#include "ibq/rng.hpp"

namespace ibq {

enum class Activation { none, tanh, relu, softmax };
enum class LayerKind { dense, conv, maxpool, flatten };

inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::tanh: return "tanh";
    case Activation::relu: return "relu";
    case Activation::softmax: return "softmax";
    case Activation::none: break;
  }
  return "none";
}

inline Activation activation_from_string(const std::string& s) {
  if (s == "tanh") return Activation::tanh;
  if (s == "relu") return Activation::relu;
  if (s == "softmax") return Activation::softmax;
  if (s == "none") return Activation::none;
  throw std::invalid_argument("unknown activation '" + s + "'");
}

struct LayerSpec {
  LayerKind kind = LayerKind::dense;
  int width = 0;                   // dense
  int kernel_h = 0, kernel_w = 0;  // conv
  int channels = 0;                // conv
  int pool_h = 0, pool_w = 0;      // maxpool
  Activation activation = Activation::none;

  static LayerSpec dense(int width, Activation a) {
    LayerSpec l;
    l.kind = LayerKind::dense;
    l.width = width;
    l.activation = a;
    return l;
  }
  static LayerSpec conv(int kh, int kw, int channels, Activation a) {
    LayerSpec l;
    l.kind = LayerKind::conv;
    l.kernel_h = kh;
    l.kernel_w = kw;
    l.channels = channels;
    l.activation = a;
    return l;
  }
  static LayerSpec maxpool(int h, int w) {
    LayerSpec l;
    l.kind = LayerKind::maxpool;
    l.pool_h = h;
    l.pool_w = w;
    return l;
  }
  static LayerSpec flatten() {
    LayerSpec l;
    l.kind = LayerKind::flatten;
    return l;
  }

  bool has_params() const {
    return kind == LayerKind::dense || kind == LayerKind::conv;
  }

  bool operator==(const LayerSpec&) const = default;
};

/// Tensor shape (channels, height, width); flat vectors are (n, 1, 1).
struct Shape {
  int c = 1, h = 1, w = 1;
  int size() const { return c * h * w; }
  bool operator==(const Shape&) const = default;
};

class SpecError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct NetworkSpec {
  std::vector<int> input_shape;  // {n}, {h, w} or {c, h, w}
  std::vector<LayerSpec> layers;
  int quant_bits = 8;  // 0: quantization off
  std::uint64_t seed = 0;

  Shape input() const {
    switch (input_shape.size()) {
      case 1: return {input_shape[0], 1, 1};
      case 2: return {1, input_shape[0], input_shape[1]};
      case 3: return {input_shape[0], input_shape[1], input_shape[2]};
      default: throw SpecError("input shape must have 1 to 3 dimensions");
    }
  }

  /// Output shape of every layer; throws SpecError on an invalid spec.
  std::vector<Shape> output_shapes() const {
    if (quant_bits < 0 || quant_bits > kMaxQuantBits)
      throw SpecError("quant_bits must be 'off' or lie in [1, 32]");
    if (layers.empty()) throw SpecError("network has no layers");
    const auto& last = layers.back();
    if (last.kind != LayerKind::dense || last.activation != Activation::softmax)
      throw SpecError("final layer must be dense with softmax activation");
    Shape s = input();
    if (s.size() <= 0) throw SpecError("input shape must be positive");
    std::vector<Shape> out;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& l = layers[i];
      const bool is_last = i + 1 == layers.size();
      const std::string where = "layer " + std::to_string(i) + ": ";
      if (l.has_params() && !is_last && l.activation != Activation::tanh &&
          l.activation != Activation::relu)
        throw SpecError(where + "hidden activations must be tanh or relu");
      if (!l.has_params() && l.activation != Activation::none)
        throw SpecError(where + "pooling/flatten layers take no activation");
      switch (l.kind) {
        case LayerKind::dense:
          if (l.width <= 0) throw SpecError(where + "dense width must be > 0");
          s = {l.width, 1, 1};
          break;
        case LayerKind::conv:
          if (l.kernel_h <= 0 || l.kernel_w <= 0 || l.channels <= 0)
            throw SpecError(where + "conv kernel and channels must be > 0");
          if (l.kernel_h > s.h || l.kernel_w > s.w)
            throw SpecError(where + "conv kernel larger than its input");
          s = {l.channels, s.h - l.kernel_h + 1, s.w - l.kernel_w + 1};
          break;
        case LayerKind::maxpool:
          if (l.pool_h <= 0 || l.pool_w <= 0 || l.pool_h > s.h ||
              l.pool_w > s.w)
            throw SpecError(where + "invalid pooling window");
          s = {s.c, s.h / l.pool_h, s.w / l.pool_w};
          break;
        case LayerKind::flatten:
          s = {s.size(), 1, 1};
          break;
      }
      out.push_back(s);
    }
    return out;
  }

  void validate() const { (void)output_shapes(); }

  /// Layers whose states are recorded and analysed (all but flatten).
  std::vector<std::size_t> recorded_layers() const {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < layers.size(); ++i)
      if (layers[i].kind != LayerKind::flatten) idx.push_back(i);
    return idx;
  }

  int num_classes() const { return layers.back().width; }

  bool operator==(const NetworkSpec&) const = default;
};

// JSON form of a spec, shared by checkpoints and experiment configs:
//   {"input_shape": [12], "quant_bits": 8 | "off",
//    "layers": [{"type": "dense", "width": 10, "activation": "tanh"},
//               {"type": "conv", "kernel": [3, 3], "channels": 2,
//                "activation": "relu"},
//               {"type": "maxpool", "pool": [2, 2]}, {"type": "flatten"}]}
inline void to_json(nlohmann::json& j, const LayerSpec& l) {
  switch (l.kind) {
    case LayerKind::dense:
      j = {{"type", "dense"}, {"width", l.width},
           {"activation", to_string(l.activation)}};
      break;
    case LayerKind::conv:
      j = {{"type", "conv"},
           {"kernel", {l.kernel_h, l.kernel_w}},
           {"channels", l.channels},
           {"activation", to_string(l.activation)}};
      break;
    case LayerKind::maxpool:
      j = {{"type", "maxpool"}, {"pool", {l.pool_h, l.pool_w}}};
      break;
    case LayerKind::flatten:
      j = {{"type", "flatten"}};
      break;
  }
}

inline void from_json(const nlohmann::json& j, LayerSpec& l) {
  const auto type = j.at("type").get<std::string>();
  if (type == "dense") {
    l = LayerSpec::dense(j.at("width").get<int>(),
                         activation_from_string(j.at("activation")));
  } else if (type == "conv") {
    const auto k = j.at("kernel").get<std::vector<int>>();
    if (k.size() != 2) throw SpecError("conv kernel must be [h, w]");
    l = LayerSpec::conv(k[0], k[1], j.at("channels").get<int>(),
                        activation_from_string(j.at("activation")));
  } else if (type == "maxpool") {
    const auto p = j.at("pool").get<std::vector<int>>();
    if (p.size() != 2) throw SpecError("maxpool window must be [h, w]");
    l = LayerSpec::maxpool(p[0], p[1]);
  } else if (type == "flatten") {
    l = LayerSpec::flatten();
  } else {
    throw SpecError("unknown layer type '" + type + "'");
  }
}

inline void to_json(nlohmann::json& j, const NetworkSpec& s) {
  j = {{"input_shape", s.input_shape}, {"layers", s.layers}};
  if (s.quant_bits == 0)
    j["quant_bits"] = "off";
  else
    j["quant_bits"] = s.quant_bits;
  j["seed"] = s.seed;
}

inline void from_json(const nlohmann::json& j, NetworkSpec& s) {
  s.input_shape = j.at("input_shape").get<std::vector<int>>();
  s.layers = j.at("layers").get<std::vector<LayerSpec>>();
  const auto q = j.value("quant_bits", nlohmann::json(8));
  s.quant_bits = q.is_string() ? (q.get<std::string>() == "off"
                                      ? 0
                                      : throw SpecError("quant_bits: " +
                                                        q.get<std::string>()))
                               : q.get<int>();
  s.seed = j.value("seed", std::uint64_t{0});
}

// ---------------------------------------------------------------------------

struct LayerParams {
  Matrix weights;  // dense: (in x out); conv: (channels x in_c*kh*kw)
  Vector bias;
};

using Gradients = std::vector<LayerParams>;

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  std::vector<LayerParams> m, v;
  std::int64_t t = 0;
};

struct Network {
  NetworkSpec spec;
  std::vector<Shape> shapes;  // output shape per layer
  std::vector<LayerParams> params;
  AdamState adam;

  Shape input_of(std::size_t layer) const {
    return layer == 0 ? spec.input() : shapes[layer - 1];
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params)
      n += static_cast<std::size_t>(p.weights.size() + p.bias.size());
    return n;
  }
};

inline LayerParams zeros_like(const LayerParams& p) {
  return {Matrix::Zero(p.weights.rows(), p.weights.cols()),
          Vector::Zero(p.bias.size())};
}

/// Builds a network with truncated-normal weights (mean 0, standard deviation
/// 1/sqrt(d), redrawn outside two standard deviations), zero biases and fresh
/// Adam state. d is the layer's number of neurons for dense layers and its
/// number of output channels for convolutions.
inline Network init_network(const NetworkSpec& spec, std::uint64_t seed) {
  Network net;
  net.spec = spec;
  net.shapes = spec.output_shapes();
  Rng rng(mix_seed(seed, 0x1417));
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto& l = spec.layers[i];
    const Shape in = net.input_of(i);
    LayerParams p;
    if (l.kind == LayerKind::dense) {
      p.weights.resize(in.size(), l.width);
      p.bias = Vector::Zero(l.width);
    } else if (l.kind == LayerKind::conv) {
      p.weights.resize(l.channels, in.c * l.kernel_h * l.kernel_w);
      p.bias = Vector::Zero(l.channels);
    }
    if (l.has_params()) {
      const int d = l.kind == LayerKind::dense ? l.width : l.channels;
      const double stddev = 1.0 / std::sqrt(static_cast<double>(d));
      for (Eigen::Index r = 0; r < p.weights.rows(); ++r)
        for (Eigen::Index c = 0; c < p.weights.cols(); ++c)
          p.weights(r, c) = rng.truncated_normal(stddev);
    }
    net.params.push_back(std::move(p));
  }
  for (const auto& p : net.params) {
    net.adam.m.push_back(zeros_like(p));
    net.adam.v.push_back(zeros_like(p));
  }
  return net;
}

// ---------------------------------------------------------------------------
// Forward pass.

enum class PassMode { train, record };

struct LayerActivity {
  Matrix pre;   // pre-activation (dense/conv only)
  Matrix post;  // continuous activation
  Matrix out;   // dequantized activation consumed by the next layer
  std::vector<std::uint32_t> codes;  // row-major, empty when not quantized
  std::vector<int> argmax;           // maxpool routing, row-major
  double q_lo = 0.0, q_hi = 0.0;     // quantizer range used
  bool quantized = false;
};

struct ForwardPass {
  Matrix input;
  std::vector<LayerActivity> layers;

  /// Softmax output before quantization.
  const Matrix& probabilities() const { return layers.back().post; }
  const Matrix& logits() const { return layers.back().pre; }
};

namespace detail {

inline void apply_activation(Activation a, const Matrix& pre, Matrix& post) {
  switch (a) {
    case Activation::tanh:
      post = pre.array().tanh();
      break;
    case Activation::relu:
      post = pre.array().max(0.0);
      break;
    case Activation::softmax: {
      post.resize(pre.rows(), pre.cols());
      for (Eigen::Index r = 0; r < pre.rows(); ++r) {
        const double m = pre.row(r).maxCoeff();
        post.row(r) = (pre.row(r).array() - m).exp();
        post.row(r) /= post.row(r).sum();
      }
      break;
    }
    case Activation::none:
      post = pre;
      break;
  }
}

using RowMap = Eigen::Map<Eigen::ArrayXd>;
using ConstRowMap = Eigen::Map<const Eigen::ArrayXd>;

// Direct convolution (valid padding, stride 1). Activations are channel-major
// per sample: index (c * h + y) * w + x. Weights are (out channels x taps)
// with taps ordered (c, dy, dx).
//
// Each tap is applied as one long vector operation over a "wide" output
// plane that keeps the input's row stride; its kw - 1 trailing columns per
// row are scratch and never read back.
inline void conv_forward(const Matrix& in, Shape in_shape, const LayerSpec& l,
                         const LayerParams& p, Matrix& pre) {
  const int kh = l.kernel_h, kw = l.kernel_w, W = in_shape.w;
  const int oh = in_shape.h - kh + 1, ow = W - kw + 1;
  const int span = (oh - 1) * W + ow;
  pre.resize(in.rows(), static_cast<Eigen::Index>(l.channels) * oh * ow);
  Eigen::ArrayXd wide(span);
  for (Eigen::Index r = 0; r < in.rows(); ++r) {
    const double* x = in.row(r).data();
    double* z = pre.row(r).data();
    for (int o = 0; o < l.channels; ++o) {
      wide.setConstant(p.bias(o));
      for (int c = 0; c < in_shape.c; ++c)
        for (int dy = 0; dy < kh; ++dy)
          for (int dx = 0; dx < kw; ++dx)
            wide += p.weights(o, (c * kh + dy) * kw + dx) *
                    ConstRowMap(x + (c * in_shape.h + dy) * W + dx, span);
      double* zo = z + o * oh * ow;
      for (int y = 0; y < oh; ++y)
        std::copy_n(wide.data() + y * W, ow, zo + y * ow);
    }
  }
}

/// Accumulates weight and bias gradients for one sample and, when `dx` is
/// not null, adds the input gradient into it.
inline void conv_backward_sample(const double* x, const double* dz,
                                 Shape in_shape, const LayerSpec& l,
                                 const LayerParams& p, LayerParams& g,
                                 double* dx) {
  const int kh = l.kernel_h, kw = l.kernel_w, W = in_shape.w;
  const int oh = in_shape.h - kh + 1, ow = W - kw + 1;
  const int span = (oh - 1) * W + ow;
  Eigen::ArrayXd wide = Eigen::ArrayXd::Zero(span);
  for (int o = 0; o < l.channels; ++o) {
    const double* dzo = dz + o * oh * ow;
    for (int y = 0; y < oh; ++y) std::copy_n(dzo + y * ow, ow, wide.data() + y * W);
    g.bias(o) += ConstRowMap(dzo, oh * ow).sum();
    for (int c = 0; c < in_shape.c; ++c)
      for (int dy = 0; dy < kh; ++dy)
        for (int ddx = 0; ddx < kw; ++ddx) {
          const Eigen::Index tap = (c * kh + dy) * kw + ddx;
          const int off = (c * in_shape.h + dy) * W + ddx;
          g.weights(o, tap) += wide.matrix().dot(ConstRowMap(x + off, span).matrix());
          if (dx) RowMap(dx + off, span) += p.weights(o, tap) * wide;
        }
  }
}

inline void maxpool_forward(const LayerActivity* prev, const Matrix& in,
                            Shape in_shape, const LayerSpec& l,
                            LayerActivity& act) {
  const int oh = in_shape.h / l.pool_h, ow = in_shape.w / l.pool_w;
  const Eigen::Index n_out = static_cast<Eigen::Index>(in_shape.c) * oh * ow;
  act.out.resize(in.rows(), n_out);
  act.argmax.resize(static_cast<std::size_t>(in.rows() * n_out));
  for (Eigen::Index r = 0; r < in.rows(); ++r)
    for (int c = 0; c < in_shape.c; ++c)
      for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x) {
          int best = -1;
          double best_v = -std::numeric_limits<double>::infinity();
          for (int dy = 0; dy < l.pool_h; ++dy)
            for (int dx = 0; dx < l.pool_w; ++dx) {
              const int idx = (c * in_shape.h + y * l.pool_h + dy) * in_shape.w +
                              x * l.pool_w + dx;
              if (in(r, idx) > best_v) {
                best_v = in(r, idx);
                best = idx;
              }
            }
          const Eigen::Index o = (c * oh + y) * ow + x;
          act.out(r, o) = best_v;
          act.argmax[static_cast<std::size_t>(r * n_out + o)] = best;
        }
  act.post = act.out;
  if (prev && prev->quantized) {
    act.quantized = true;
    act.q_lo = prev->q_lo;
    act.q_hi = prev->q_hi;
    act.codes.resize(act.argmax.size());
    const auto n_in = static_cast<std::size_t>(in.cols());
    for (std::size_t i = 0; i < act.codes.size(); ++i) {
      const auto r = i / static_cast<std::size_t>(n_out);
      act.codes[i] =
          prev->codes[r * n_in + static_cast<std::size_t>(act.argmax[i])];
    }
  }
}

inline void quantize_layer(LayerActivity& act, int bits, const LayerRange& r) {
  act.quantized = true;
  act.q_lo = r.lo;
  act.q_hi = r.hi;
  const Quantizer q(bits, r.lo, r.hi);
  act.out.resize(act.post.rows(), act.post.cols());
  act.codes.resize(static_cast<std::size_t>(act.post.size()));
  const double* src = act.post.data();
  double* dst = act.out.data();
  for (std::size_t i = 0; i < act.codes.size(); ++i) {
    const auto c = q.code(src[i]);
    act.codes[i] = static_cast<std::uint32_t>(c);
    dst[i] = q.value(c);
  }
}

inline ForwardPass forward_impl(const Network& net, const Matrix& batch,
                                const QuantState& frozen,
                                QuantState* tracking) {
  const auto& spec = net.spec;
  if (batch.cols() != spec.input().size())
    throw std::invalid_argument(
        "forward: batch has " + std::to_string(batch.cols()) +
        " features, network expects " + std::to_string(spec.input().size()));
  const bool quantize = frozen.enabled();
  if (quantize && frozen.ranges.size() != spec.layers.size())
    throw std::invalid_argument("forward: quant state does not match network");
  ForwardPass fp;
  fp.input = batch;
  fp.layers.resize(spec.layers.size());
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto& l = spec.layers[i];
    const Matrix& in = i == 0 ? fp.input : fp.layers[i - 1].out;
    auto& act = fp.layers[i];
    switch (l.kind) {
      case LayerKind::dense:
        act.pre.noalias() = in * net.params[i].weights;
        act.pre.rowwise() += net.params[i].bias.transpose();
        break;
      case LayerKind::conv:
        conv_forward(in, net.input_of(i), l, net.params[i], act.pre);
        break;
      case LayerKind::maxpool:
        maxpool_forward(i > 0 ? &fp.layers[i - 1] : nullptr, in,
                        net.input_of(i), l, act);
        continue;
      case LayerKind::flatten:
        act.post = in;
        act.out = in;
        if (i > 0) {
          act.codes = fp.layers[i - 1].codes;
          act.quantized = fp.layers[i - 1].quantized;
          act.q_lo = fp.layers[i - 1].q_lo;
          act.q_hi = fp.layers[i - 1].q_hi;
        }
        continue;
    }
    apply_activation(l.activation, act.pre, act.post);
    if (!quantize) {
      act.out = act.post;
      continue;
    }
    if (tracking) {
      const double lo = l.activation == Activation::softmax
                            ? 0.0
                            : act.post.minCoeff();
      tracking->ranges[i].observe(lo, act.post.maxCoeff());
    }
    const auto& range = tracking ? tracking->ranges[i] : frozen.ranges[i];
    if (!range.seen)
      throw std::logic_error("forward: quantization range of layer " +
                             std::to_string(i) + " was never observed");
    quantize_layer(act, frozen.bits, range);
  }
  return fp;
}

}  // namespace detail

inline QuantState make_quant_state(const Network& net) {
  QuantState q;
  q.bits = net.spec.quant_bits;
  q.reset(net.spec.layers.size());
  return q;
}

/// Train mode widens `quant`'s ranges with this batch before quantizing;
/// record mode uses them as they are.
inline ForwardPass forward(const Network& net, const Matrix& batch,
                           QuantState& quant, PassMode mode) {
  return detail::forward_impl(net, batch, quant,
                              mode == PassMode::train ? &quant : nullptr);
}

/// Record-mode forward pass with frozen ranges.
inline ForwardPass forward(const Network& net, const Matrix& batch,
                           const QuantState& quant) {
  return detail::forward_impl(net, batch, quant, nullptr);
}

// ---------------------------------------------------------------------------
// Loss and gradients.

inline Matrix one_hot(std::span<const int> labels, int classes) {
  Matrix t = Matrix::Zero(static_cast<Eigen::Index>(labels.size()), classes);
  for (std::size_t i = 0; i < labels.size(); ++i)
    t(static_cast<Eigen::Index>(i), labels[i]) = 1.0;
  return t;
}

/// Mean cross-entropy (nats) of the softmax of `logits` against `targets`.
inline double cross_entropy(const Matrix& logits, const Matrix& targets) {
  double total = 0.0;
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double m = logits.row(r).maxCoeff();
    const double lse = m + std::log((logits.row(r).array() - m).exp().sum());
    total += (targets.row(r).array() * (lse - logits.row(r).array())).sum();
  }
  return total / static_cast<double>(logits.rows());
}

inline std::size_t count_correct(const Matrix& probs,
                                 std::span<const int> labels) {
  std::size_t correct = 0;
  for (Eigen::Index r = 0; r < probs.rows(); ++r) {
    Eigen::Index arg = 0;
    probs.row(r).maxCoeff(&arg);
    if (arg == labels[static_cast<std::size_t>(r)]) ++correct;
  }
  return correct;
}

/// Gradients of the mean cross-entropy against `targets` (rows are target
/// distributions). The quantizer passes gradients straight through inside
/// its range and blocks them outside.
inline Gradients backward(const Network& net, const ForwardPass& fp,
                          const Matrix& targets) {
  const auto& spec = net.spec;
  const auto n_layers = spec.layers.size();
  const auto batch = static_cast<double>(fp.input.rows());
  Gradients grads(n_layers);
  for (std::size_t i = 0; i < n_layers; ++i) grads[i] = zeros_like(net.params[i]);

  Matrix dout;  // gradient w.r.t. the current layer's output
  for (std::size_t ii = n_layers; ii-- > 0;) {
    const auto& l = spec.layers[ii];
    const auto& act = fp.layers[ii];
    const Matrix& in = ii == 0 ? fp.input : fp.layers[ii - 1].out;
    const Shape in_shape = net.input_of(ii);
    Matrix din;
    if (l.kind == LayerKind::flatten) {
      din = std::move(dout);
    } else if (l.kind == LayerKind::maxpool) {
      din = Matrix::Zero(in.rows(), in.cols());
      const auto n_out = static_cast<std::size_t>(act.out.cols());
      for (Eigen::Index r = 0; r < dout.rows(); ++r)
        for (std::size_t o = 0; o < n_out; ++o)
          din(r, act.argmax[static_cast<std::size_t>(r) * n_out + o]) +=
              dout(r, static_cast<Eigen::Index>(o));
    } else {
      Matrix dpre;
      if (l.activation == Activation::softmax) {
        dpre = (act.post - targets) / batch;
      } else {
        Matrix dpost = std::move(dout);
        if (act.quantized)
          dpost = (act.post.array() >= act.q_lo && act.post.array() <= act.q_hi)
                      .select(dpost, 0.0);
        if (l.activation == Activation::tanh)
          dpre = dpost.array() * (1.0 - act.post.array().square());
        else
          dpre = (act.pre.array() > 0.0).select(dpost, 0.0);
      }
      const auto& p = net.params[ii];
      if (l.kind == LayerKind::dense) {
        grads[ii].weights.noalias() = in.transpose() * dpre;
        grads[ii].bias = dpre.colwise().sum().transpose();
        if (ii > 0) din.noalias() = dpre * p.weights.transpose();
      } else {
        if (ii > 0) din = Matrix::Zero(in.rows(), in.cols());
        for (Eigen::Index r = 0; r < in.rows(); ++r)
          detail::conv_backward_sample(in.row(r).data(), dpre.row(r).data(),
                                       in_shape, l, p, grads[ii],
                                       ii > 0 ? din.row(r).data() : nullptr);
      }
    }
    dout = std::move(din);
  }
  return grads;
}

inline Gradients backward(const Network& net, const ForwardPass& fp,
                          std::span<const int> labels) {
  return backward(net, fp, one_hot(labels, net.spec.num_classes()));
}

/// One Adam update with bias correction.
inline void adam_step(Network& net, const Gradients& grads, double lr,
                      const AdamConfig& cfg = {}) {
  if (grads.size() != net.params.size())
    throw std::invalid_argument("adam_step: gradient count mismatch");
  auto& st = net.adam;
  st.t += 1;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.t));
  auto update = [&](auto& param, auto& m, auto& v, const auto& g) {
    if (g.size() != param.size())
      throw std::invalid_argument("adam_step: gradient shape mismatch");
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * g.cwiseProduct(g);
    param.array() -=
        lr * (m.array() / c1) / ((v.array() / c2).sqrt() + cfg.epsilon);
  };
  for (std::size_t i = 0; i < net.params.size(); ++i) {
    if (!net.spec.layers[i].has_params()) continue;
    update(net.params[i].weights, st.m[i].weights, st.v[i].weights,
           grads[i].weights);
    update(net.params[i].bias, st.m[i].bias, st.v[i].bias, grads[i].bias);
  }
}

// ---------------------------------------------------------------------------
// Training and evaluation.

struct EpochStats {
  double loss = 0.0;      // mean cross-entropy, nats
  double accuracy = 0.0;  // fraction of argmax hits
};

inline Matrix gather_rows(const Matrix& m, std::span<const std::size_t> rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i)
    out.row(static_cast<Eigen::Index>(i)) =
        m.row(static_cast<Eigen::Index>(rows[i]));
  return out;
}

/// One pass over `train` in seeded order: quantization ranges are reset,
/// then every mini-batch runs forward (train mode), backward and Adam.
inline EpochStats train_epoch(Network& net, const Dataset& train,
                              QuantState& quant, int batch_size, double lr,
                              std::uint64_t seed, std::int64_t epoch) {
  if (batch_size <= 0) throw std::invalid_argument("batch size must be > 0");
  quant.reset(net.spec.layers.size());
  const auto order =
      seeded_permutation(train.size(), mix_seed(seed, static_cast<std::uint64_t>(epoch)));
  double loss_sum = 0.0;
  std::size_t correct = 0;
  std::vector<int> labels;
  for (std::size_t start = 0; start < order.size();
       start += static_cast<std::size_t>(batch_size)) {
    const auto n = std::min(static_cast<std::size_t>(batch_size),
                            order.size() - start);
    const std::span<const std::size_t> idx(order.data() + start, n);
    const Matrix batch = gather_rows(train.inputs, idx);
    labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) labels[i] = train.labels[idx[i]];
    const auto fp = forward(net, batch, quant, PassMode::train);
    const Matrix targets = one_hot(labels, net.spec.num_classes());
    loss_sum += cross_entropy(fp.logits(), targets) * static_cast<double>(n);
    correct += count_correct(fp.probabilities(), labels);
    adam_step(net, backward(net, fp, targets), lr);
  }
  const auto total = static_cast<double>(std::max<std::size_t>(order.size(), 1));
  return {.loss = loss_sum / total,
          .accuracy = static_cast<double>(correct) / total};
}

/// Accuracy and mean loss under a record-mode pass.
inline EpochStats evaluate(const Network& net, const Dataset& data,
                           const QuantState& quant,
                           std::size_t chunk = 4096) {
  double loss_sum = 0.0;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < data.size(); start += chunk) {
    const auto n = std::min(chunk, data.size() - start);
    const auto rows = data.inputs.middleRows(static_cast<Eigen::Index>(start),
                                             static_cast<Eigen::Index>(n));
    const auto fp = forward(net, Matrix(rows), quant);
    const std::span<const int> labels(data.labels.data() + start, n);
    loss_sum += cross_entropy(fp.logits(), one_hot(labels, net.spec.num_classes())) *
                static_cast<double>(n);
    correct += count_correct(fp.probabilities(), labels);
  }
  const auto total = static_cast<double>(std::max<std::size_t>(data.size(), 1));
  return {.loss = loss_sum / total,
          .accuracy = static_cast<double>(correct) / total};
}

// ---------------------------------------------------------------------------
// State recording.

struct LayerStates {
  std::size_t layer = 0;  // index into NetworkSpec::layers
  LayerKind kind = LayerKind::dense;
  Activation activation = Activation::none;
  int width = 0;                      // d_T
  std::vector<std::uint32_t> codes;   // rows x width, row-major
  Matrix continuous;                  // rows x width when requested: the
                                      // values the next layer consumes
  double lo = 0.0, hi = 0.0;          // quantizer range
  bool quantized = false;

  std::span<const std::uint32_t> row(std::size_t r) const {
    return {codes.data() + r * static_cast<std::size_t>(width),
            static_cast<std::size_t>(width)};
  }
};

struct StateRecord {
  std::int64_t epoch = 0;
  int bits = 0;
  std::size_t rows = 0;
  std::vector<LayerStates> layers;  // recorded layers, input to output
};

/// Runs every sample of `data` through the network in record mode and keeps
/// the code matrix of each recorded layer (and its continuous activations
/// when `keep_continuous` is set, or always when quantization is off).
inline StateRecord record_states(const Network& net, const Dataset& data,
                                 const QuantState& quant, bool keep_continuous,
                                 std::int64_t epoch = 0,
                                 std::size_t chunk = 2048) {
  const auto recorded = net.spec.recorded_layers();
  StateRecord rec;
  rec.epoch = epoch;
  rec.bits = quant.enabled() ? quant.bits : 0;
  rec.rows = data.size();
  const bool keep = keep_continuous || !quant.enabled();
  for (auto li : recorded) {
    LayerStates ls;
    ls.layer = li;
    ls.kind = net.spec.layers[li].kind;
    ls.activation = net.spec.layers[li].activation;
    // Pooled values inherit the range semantics of the layer that made them.
    for (std::size_t j = li + 1; ls.activation == Activation::none && j-- > 0;)
      ls.activation = net.spec.layers[j].activation;
    ls.width = net.shapes[li].size();
    if (quant.enabled())
      ls.codes.reserve(data.size() * static_cast<std::size_t>(ls.width));
    if (keep)
      ls.continuous.resize(static_cast<Eigen::Index>(data.size()), ls.width);
    rec.layers.push_back(std::move(ls));
  }
  for (std::size_t start = 0; start < data.size(); start += chunk) {
    const auto n = std::min(chunk, data.size() - start);
    const auto fp = forward(
        net,
        Matrix(data.inputs.middleRows(static_cast<Eigen::Index>(start),
                                      static_cast<Eigen::Index>(n))),
        quant);
    for (std::size_t k = 0; k < recorded.size(); ++k) {
      const auto& act = fp.layers[recorded[k]];
      auto& ls = rec.layers[k];
      ls.quantized = act.quantized;
      ls.lo = act.q_lo;
      ls.hi = act.q_hi;
      if (act.quantized)
        ls.codes.insert(ls.codes.end(), act.codes.begin(), act.codes.end());
      if (keep)
        ls.continuous.middleRows(static_cast<Eigen::Index>(start),
                                 static_cast<Eigen::Index>(n)) = act.out;
    }
  }
  return rec;
}

/// Dequantized activation of code `c` in a recorded layer.
inline double dequantized(const LayerStates& ls, int bits, std::uint32_t c) {
  return Quantizer(bits, ls.lo, ls.hi).value(c);
}

/// Positions (within `record.layers`) of hidden relu layers whose
/// activations are zero for every sample.
inline std::vector<std::size_t> detect_dead_layer(const StateRecord& record) {
  std::vector<std::size_t> dead;
  for (std::size_t k = 0; k < record.layers.size(); ++k) {
    const auto& ls = record.layers[k];
    if (ls.activation != Activation::relu || !(ls.kind == LayerKind::dense ||
                                               ls.kind == LayerKind::conv))
      continue;
    bool all_zero = true;
    if (ls.quantized) {
      const Quantizer q(record.bits, ls.lo, ls.hi);
      for (auto c : ls.codes)
        if (q.value(c) != 0.0) {
          all_zero = false;
          break;
        }
    } else {
      all_zero = ls.continuous.size() == 0 || ls.continuous.isZero(0.0);
    }
    if (all_zero) dead.push_back(k);
  }
  return dead;
}

// ---------------------------------------------------------------------------
// Checkpoints: one JSON document holding the spec, parameters and Adam state.
// Numbers are written with 17 significant digits, so doubles round-trip
// exactly.

namespace detail {

inline nlohmann::json matrix_json(const Matrix& m) {
  return {{"rows", m.rows()},
          {"cols", m.cols()},
          {"data", std::vector<double>(m.data(), m.data() + m.size())}};
}

inline Matrix json_matrix(const nlohmann::json& j) {
  const auto data = j.at("data").get<std::vector<double>>();
  Matrix m(j.at("rows").get<Eigen::Index>(), j.at("cols").get<Eigen::Index>());
  if (static_cast<std::size_t>(m.size()) != data.size())
    throw std::runtime_error("checkpoint: matrix size mismatch");
  std::copy(data.begin(), data.end(), m.data());
  return m;
}

inline nlohmann::json params_json(const std::vector<LayerParams>& ps) {
  auto arr = nlohmann::json::array();
  for (const auto& p : ps)
    arr.push_back({{"weights", matrix_json(p.weights)},
                   {"bias", std::vector<double>(p.bias.data(),
                                                p.bias.data() + p.bias.size())}});
  return arr;
}

inline std::vector<LayerParams> json_params(const nlohmann::json& j) {
  std::vector<LayerParams> ps;
  for (const auto& e : j) {
    LayerParams p;
    p.weights = json_matrix(e.at("weights"));
    const auto b = e.at("bias").get<std::vector<double>>();
    p.bias = Eigen::Map<const Vector>(b.data(), static_cast<Eigen::Index>(b.size()));
    ps.push_back(std::move(p));
  }
  return ps;
}

}  // namespace detail

inline void save_checkpoint(std::ostream& out, const Network& net) {
  nlohmann::json j = {{"format", "ibq-checkpoint"},
                      {"version", 1},
                      {"spec", net.spec},
                      {"params", detail::params_json(net.params)},
                      {"adam",
                       {{"t", net.adam.t},
                        {"m", detail::params_json(net.adam.m)},
                        {"v", detail::params_json(net.adam.v)}}}};
  out << j.dump() << '\n';
}

inline Network load_checkpoint(std::istream& in) {
  const auto j = nlohmann::json::parse(in);
  if (j.value("format", "") != "ibq-checkpoint")
    throw std::runtime_error("not an ibq checkpoint");
  Network net;
  net.spec = j.at("spec").get<NetworkSpec>();
  net.shapes = net.spec.output_shapes();
  net.params = detail::json_params(j.at("params"));
  net.adam.t = j.at("adam").at("t").get<std::int64_t>();
  net.adam.m = detail::json_params(j.at("adam").at("m"));
  net.adam.v = detail::json_params(j.at("adam").at("v"));
  if (net.params.size() != net.spec.layers.size())
    throw std::runtime_error("checkpoint: layer count mismatch");
  return net;
}

}  // namespace ibq
