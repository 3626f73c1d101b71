#pragma once

// Layer graph of the channel-pruned classifier, its parameters, inference,
// and the cached training forward/backward pass.

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "castnet/kernels.hpp"
#include "castnet/tensor.hpp"

namespace castnet {

enum class LayerKind : std::uint8_t { conv = 1, batchnorm = 2, relu = 3, maxpool = 4, gap = 5, dense = 6, sigmoid = 7 };

inline std::string_view to_string(LayerKind k) {
  switch (k) {
    case LayerKind::conv: return "conv";
    case LayerKind::batchnorm: return "batchnorm";
    case LayerKind::relu: return "relu";
    case LayerKind::maxpool: return "maxpool";
    case LayerKind::gap: return "gap";
    case LayerKind::dense: return "dense";
    case LayerKind::sigmoid: return "sigmoid";
  }
  return "?";
}

inline constexpr double kBatchNormEpsilon = 1e-3;
inline constexpr double kBatchNormMomentum = 0.99;

struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  // conv
  std::size_t kernel = 0;
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t stride = 1;
  Padding padding = Padding::same;
  // batchnorm
  std::size_t channels = 0;
  // maxpool
  std::size_t window = 0;
  std::size_t pool_stride = 0;
  // dense
  std::size_t in_features = 0;
  std::size_t units = 0;

  static LayerSpec conv(std::size_t k, std::size_t cin, std::size_t cout, Padding pad = Padding::same,
                        std::size_t stride = 1) {
    LayerSpec s;
    s.kind = LayerKind::conv;
    s.kernel = k;
    s.in_channels = cin;
    s.out_channels = cout;
    s.padding = pad;
    s.stride = stride;
    return s;
  }
  static LayerSpec batchnorm(std::size_t c) {
    LayerSpec s;
    s.kind = LayerKind::batchnorm;
    s.channels = c;
    return s;
  }
  static LayerSpec relu() { return LayerSpec{}; }
  static LayerSpec maxpool(std::size_t window, std::size_t stride) {
    LayerSpec s;
    s.kind = LayerKind::maxpool;
    s.window = window;
    s.pool_stride = stride;
    return s;
  }
  static LayerSpec gap() {
    LayerSpec s;
    s.kind = LayerKind::gap;
    return s;
  }
  static LayerSpec dense(std::size_t in, std::size_t units) {
    LayerSpec s;
    s.kind = LayerKind::dense;
    s.in_features = in;
    s.units = units;
    return s;
  }
  static LayerSpec sigmoid() {
    LayerSpec s;
    s.kind = LayerKind::sigmoid;
    return s;
  }

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

struct ModelSpec {
  std::string name;
  Shape input_shape;  // (H, W, C)
  std::vector<LayerSpec> layers;

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

// Per-layer output shapes for a batch of size `batch`, validating that
// consecutive layers fit together. Element i is the output of layers[i].
inline std::vector<Shape> propagate_shapes(const ModelSpec& spec, std::size_t batch = 1) {
  if (spec.input_shape.size() != 3) {
    throw ShapeError("model input shape must be (H,W,C), got " + shape_str(spec.input_shape));
  }
  Shape cur{batch, spec.input_shape[0], spec.input_shape[1], spec.input_shape[2]};
  std::vector<Shape> out;
  out.reserve(spec.layers.size());
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    const std::string where = "layer " + std::to_string(i) + " (" + std::string(to_string(l.kind)) + "): ";
    switch (l.kind) {
      case LayerKind::conv: {
        if (cur.size() != 4 || cur[3] != l.in_channels) {
          throw ShapeError(where + "expects " + std::to_string(l.in_channels) + " channels, input is " + shape_str(cur));
        }
        ConvParams<float> probe{Tensor<float>({l.kernel, l.kernel, l.in_channels, l.out_channels}),
                                std::vector<float>(l.out_channels), l.stride, l.padding};
        const ConvGeometry g = conv_geometry(cur, probe);
        cur = {batch, g.out_h, g.out_w, l.out_channels};
        break;
      }
      case LayerKind::batchnorm:
        if (cur.back() != l.channels) {
          throw ShapeError(where + "expects " + std::to_string(l.channels) + " channels, input is " + shape_str(cur));
        }
        break;
      case LayerKind::relu:
      case LayerKind::sigmoid:
        break;
      case LayerKind::maxpool:
        if (cur.size() != 4 || cur[1] < l.window || cur[2] < l.window || l.window < 1 || l.pool_stride < 1) {
          throw ShapeError(where + "window " + std::to_string(l.window) + " does not fit input " + shape_str(cur));
        }
        cur = {batch, (cur[1] - l.window) / l.pool_stride + 1, (cur[2] - l.window) / l.pool_stride + 1, cur[3]};
        break;
      case LayerKind::gap:
        if (cur.size() != 4) throw ShapeError(where + "needs NHWC input, got " + shape_str(cur));
        cur = {batch, cur[3]};
        break;
      case LayerKind::dense:
        if (cur.size() != 2 || cur[1] != l.in_features) {
          throw ShapeError(where + "expects " + std::to_string(l.in_features) + " features, input is " + shape_str(cur));
        }
        cur = {batch, l.units};
        break;
    }
    out.push_back(cur);
  }
  return out;
}

// Conv(1->16)·BN·ReLU·Pool · Conv(16->16)·BN·ReLU·Pool · Conv(16->8)·ReLU·Pool
// · GAP · Dense(8->1) · Sigmoid. Accepts any input that survives three 2x2
// pools; build_castnet_tiny adds the H,W >= 32 floor.
inline ModelSpec castnet_tiny_layers(const Shape& input_shape) {
  if (input_shape.size() != 3 || input_shape[2] != 1) {
    throw ShapeError("castnet-tiny expects a single-channel (H,W,1) input, got " + shape_str(input_shape));
  }
  ModelSpec spec{"castnet-tiny", input_shape, {}};
  spec.layers = {
      LayerSpec::conv(3, 1, 16),   LayerSpec::batchnorm(16), LayerSpec::relu(), LayerSpec::maxpool(2, 2),
      LayerSpec::conv(3, 16, 16),  LayerSpec::batchnorm(16), LayerSpec::relu(), LayerSpec::maxpool(2, 2),
      LayerSpec::conv(3, 16, 8),   LayerSpec::relu(),        LayerSpec::maxpool(2, 2),
      LayerSpec::gap(),            LayerSpec::dense(8, 1),   LayerSpec::sigmoid(),
  };
  propagate_shapes(spec);
  return spec;
}

inline ModelSpec build_castnet_tiny(const Shape& input_shape) {
  if (input_shape.size() != 3 || input_shape[0] < 32 || input_shape[1] < 32) {
    throw ShapeError("castnet-tiny requires H, W >= 32, got " + shape_str(input_shape));
  }
  return castnet_tiny_layers(input_shape);
}

inline std::vector<std::size_t> conv_channel_sequence(const ModelSpec& spec) {
  std::vector<std::size_t> seq;
  for (const auto& l : spec.layers) {
    if (l.kind == LayerKind::conv) seq.push_back(l.out_channels);
  }
  return seq;
}

struct ParamCount {
  std::size_t trainable = 0;
  std::size_t non_trainable = 0;
  std::size_t total = 0;
};

inline ParamCount count_params(const LayerSpec& l) {
  ParamCount c;
  switch (l.kind) {
    case LayerKind::conv:
      c.trainable = l.kernel * l.kernel * l.in_channels * l.out_channels + l.out_channels;
      break;
    case LayerKind::batchnorm:
      c.trainable = 2 * l.channels;
      c.non_trainable = 2 * l.channels;
      break;
    case LayerKind::dense:
      c.trainable = l.in_features * l.units + l.units;
      break;
    default:
      break;
  }
  c.total = c.trainable + c.non_trainable;
  return c;
}

inline ParamCount count_params(const ModelSpec& spec) {
  ParamCount total;
  for (const auto& l : spec.layers) {
    const ParamCount c = count_params(l);
    total.trainable += c.trainable;
    total.non_trainable += c.non_trainable;
  }
  total.total = total.trainable + total.non_trainable;
  return total;
}

// Tensors of one layer in declaration order:
//   conv      kernels (k,k,Cin,Cout), bias (Cout)
//   batchnorm gamma, beta, moving_mean, moving_var (C each)
//   dense     weights (F,U), bias (U)
template <typename T>
struct LayerParams {
  std::vector<Tensor<T>> tensors;
  std::vector<bool> trainable;

  friend bool operator==(const LayerParams&, const LayerParams&) = default;
};

template <typename T>
struct ParamStore {
  std::vector<LayerParams<T>> layers;

  std::size_t count(bool trainable) const {
    std::size_t n = 0;
    for (const auto& l : layers) {
      for (std::size_t i = 0; i < l.tensors.size(); ++i) {
        if (l.trainable[i] == trainable) n += l.tensors[i].size();
      }
    }
    return n;
  }

  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& l : layers) {
      LayerParams<U> lp;
      lp.trainable = l.trainable;
      for (const auto& t : l.tensors) lp.tensors.push_back(t.template cast<U>());
      out.layers.push_back(std::move(lp));
    }
    return out;
  }

  friend bool operator==(const ParamStore&, const ParamStore&) = default;
};

// Zero-filled parameters matching `spec` (BN moving_var is 1).
template <typename T>
ParamStore<T> zero_params(const ModelSpec& spec) {
  ParamStore<T> ps;
  for (const auto& l : spec.layers) {
    LayerParams<T> lp;
    switch (l.kind) {
      case LayerKind::conv:
        lp.tensors = {Tensor<T>({l.kernel, l.kernel, l.in_channels, l.out_channels}), Tensor<T>({l.out_channels})};
        lp.trainable = {true, true};
        break;
      case LayerKind::batchnorm:
        lp.tensors = {Tensor<T>({l.channels}), Tensor<T>({l.channels}), Tensor<T>({l.channels}),
                      Tensor<T>({l.channels}, T{1})};
        lp.trainable = {true, true, false, false};
        break;
      case LayerKind::dense:
        lp.tensors = {Tensor<T>({l.in_features, l.units}), Tensor<T>({l.units})};
        lp.trainable = {true, true};
        break;
      default:
        break;
    }
    ps.layers.push_back(std::move(lp));
  }
  return ps;
}

// He-normal weights (stddev sqrt(2 / fan_in)), zero biases, BN gamma=1 beta=0.
template <typename T>
ParamStore<T> init_params(const ModelSpec& spec, std::uint64_t seed) {
  ParamStore<T> ps = zero_params<T>(spec);
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    auto& lp = ps.layers[i];
    if (l.kind == LayerKind::conv || l.kind == LayerKind::dense) {
      const double fan_in = l.kind == LayerKind::conv ? static_cast<double>(l.kernel * l.kernel * l.in_channels)
                                                      : static_cast<double>(l.in_features);
      std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
      for (auto& w : lp.tensors[0].data()) w = static_cast<T>(dist(rng));
    } else if (l.kind == LayerKind::batchnorm) {
      lp.tensors[0].fill(T{1});
    }
  }
  return ps;
}

namespace detail {

template <typename T>
ConvParams<T> conv_view(const LayerSpec& l, const LayerParams<T>& lp) {
  return ConvParams<T>{lp.tensors[0], lp.tensors[1].vec(), l.stride, l.padding};
}

template <typename T>
BatchNormParams<T> bn_view(const LayerParams<T>& lp) {
  return BatchNormParams<T>{lp.tensors[0].data(), lp.tensors[1].data(), lp.tensors[2].data(), lp.tensors[3].data(),
                            static_cast<T>(kBatchNormEpsilon)};
}

inline void check_batch(const ModelSpec& spec, const Shape& batch_shape) {
  if (batch_shape.size() != 4 || batch_shape[1] != spec.input_shape[0] || batch_shape[2] != spec.input_shape[1] ||
      batch_shape[3] != spec.input_shape[2]) {
    throw ShapeError("batch " + shape_str(batch_shape) + " does not match model input " + shape_str(spec.input_shape));
  }
}

inline void check_params(const ModelSpec& spec, std::size_t n_layers) {
  if (n_layers != spec.layers.size()) {
    throw ShapeError("parameter store has " + std::to_string(n_layers) + " layers, spec has " +
                     std::to_string(spec.layers.size()));
  }
}

}  // namespace detail

// Batchnorm normalizes with moving statistics (inference) or with the
// current batch (training).
enum class NormMode { inference, batch_stats };

template <typename T>
struct ForwardCache {
  std::vector<Tensor<T>> inputs;  // inputs[i] is the input to layer i
  Tensor<T> output;
  std::vector<std::optional<PoolIndex>> pools;
  std::vector<std::optional<BatchNormCache<T>>> norms;
  NormMode mode = NormMode::inference;
};

template <typename T>
Tensor<T> forward_cached(const ModelSpec& spec, const ParamStore<T>& params, const Tensor<T>& batch, NormMode mode,
                         ForwardCache<T>* cache) {
  detail::check_batch(spec, batch.shape());
  detail::check_params(spec, params.layers.size());
  const std::size_t n = spec.layers.size();
  if (cache) {
    cache->inputs.assign(n, Tensor<T>{});
    cache->pools.assign(n, std::nullopt);
    cache->norms.assign(n, std::nullopt);
    cache->mode = mode;
  }
  Tensor<T> x = batch;
  for (std::size_t i = 0; i < n; ++i) {
    const LayerSpec& l = spec.layers[i];
    const LayerParams<T>& lp = params.layers[i];
    Tensor<T> y;
    switch (l.kind) {
      case LayerKind::conv:
        y = conv2d_forward(x, detail::conv_view(l, lp));
        break;
      case LayerKind::batchnorm:
        if (mode == NormMode::inference) {
          y = batchnorm_inference(x, detail::bn_view(lp));
        } else {
          BatchNormCache<T> bc;
          y = batchnorm_training(x, detail::bn_view(lp), bc);
          if (cache) cache->norms[i] = std::move(bc);
        }
        break;
      case LayerKind::relu:
        y = activation_forward(x, Activation::relu);
        break;
      case LayerKind::sigmoid:
        y = activation_forward(x, Activation::sigmoid);
        break;
      case LayerKind::maxpool: {
        auto r = maxpool2d(x, l.window, l.pool_stride);
        y = std::move(r.output);
        if (cache) cache->pools[i] = std::move(r.index);
        break;
      }
      case LayerKind::gap:
        y = global_avg_pool(x);
        break;
      case LayerKind::dense:
        y = dense_forward(x, lp.tensors[0], lp.tensors[1].data());
        break;
    }
    if (cache) cache->inputs[i] = std::move(x);
    x = std::move(y);
  }
  if (cache) cache->output = x;
  return x;
}

// Budget for the widest per-chunk activation in inference.
inline constexpr std::size_t kInferenceChunkBytes = 512 * 1024;

// Inference: one probability per image, batchnorm on moving statistics.
// Images are independent here, so large batches run in chunks that keep the
// activations cache-resident; the result does not depend on the chunking.
template <typename T>
std::vector<T> forward(const ModelSpec& spec, const ParamStore<T>& params, const Tensor<T>& batch) {
  detail::check_batch(spec, batch.shape());
  std::size_t widest = 1;
  for (const auto& s : propagate_shapes(spec)) widest = std::max(widest, shape_numel(s));
  const std::size_t n = batch.dim(0);
  const std::size_t chunk = std::max<std::size_t>(1, kInferenceChunkBytes / (widest * sizeof(T)));
  std::vector<T> probs;
  probs.reserve(n);
  for (std::size_t b = 0; b < n; b += chunk) {
    const Tensor<T> out = chunk >= n ? forward_cached<T>(spec, params, batch, NormMode::inference, nullptr)
                                     : forward_cached<T>(spec, params, slice_batch(batch, b, std::min(n, b + chunk)),
                                                         NormMode::inference, nullptr);
    if (out.rank() != 2 || out.dim(1) != 1) {
      throw ShapeError("model output must be (N,1), got " + shape_str(out.shape()));
    }
    probs.insert(probs.end(), out.data().begin(), out.data().end());
  }
  return probs;
}

// Backpropagates from the gradient w.r.t. the logits feeding the terminal
// sigmoid (the fused BCE path). Returns gradients shaped like `params`;
// non-trainable slots stay zero.
template <typename T>
ParamStore<T> backward(const ModelSpec& spec, const ParamStore<T>& params, const ForwardCache<T>& cache,
                       const Tensor<T>& grad_logits) {
  detail::check_params(spec, params.layers.size());
  if (spec.layers.empty() || spec.layers.back().kind != LayerKind::sigmoid) {
    throw ShapeError("backward expects a model ending in a sigmoid layer");
  }
  if (cache.inputs.size() != spec.layers.size()) throw ShapeError("backward: cache does not match model");
  ParamStore<T> grads = zero_params<T>(spec);
  for (auto& l : grads.layers) {
    for (std::size_t i = 0; i < l.tensors.size(); ++i) {
      if (!l.trainable[i]) l.tensors[i].fill(T{0});
    }
  }
  Tensor<T> g = grad_logits;
  for (std::size_t idx = spec.layers.size() - 1; idx-- > 0;) {
    const LayerSpec& l = spec.layers[idx];
    const LayerParams<T>& lp = params.layers[idx];
    const Tensor<T>& x = cache.inputs[idx];
    switch (l.kind) {
      case LayerKind::conv: {
        auto cg = conv2d_backward(x, detail::conv_view(l, lp), g);
        grads.layers[idx].tensors[0] = std::move(cg.kernels);
        grads.layers[idx].tensors[1] = Tensor<T>({l.out_channels}, std::move(cg.bias));
        g = std::move(cg.input);
        break;
      }
      case LayerKind::batchnorm: {
        if (cache.mode == NormMode::batch_stats) {
          auto bg = batchnorm_backward(*cache.norms[idx], lp.tensors[0].data(), g);
          grads.layers[idx].tensors[0] = Tensor<T>({l.channels}, std::move(bg.gamma));
          grads.layers[idx].tensors[1] = Tensor<T>({l.channels}, std::move(bg.beta));
          g = std::move(bg.input);
        } else {
          // y = gamma * (x - mean) / sqrt(var + eps) + beta with frozen stats
          const std::size_t c = l.channels, rows = g.size() / c;
          std::vector<T> inv(c), dgamma(c, T{0}), dbeta(c, T{0});
          for (std::size_t ch = 0; ch < c; ++ch) {
            inv[ch] = T{1} / std::sqrt(lp.tensors[3][ch] + static_cast<T>(kBatchNormEpsilon));
          }
          Tensor<T> gi(g.shape());
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t ch = 0; ch < c; ++ch) {
              const std::size_t i = r * c + ch;
              dbeta[ch] += g[i];
              dgamma[ch] += g[i] * (x[i] - lp.tensors[2][ch]) * inv[ch];
              gi[i] = g[i] * lp.tensors[0][ch] * inv[ch];
            }
          }
          grads.layers[idx].tensors[0] = Tensor<T>({c}, std::move(dgamma));
          grads.layers[idx].tensors[1] = Tensor<T>({c}, std::move(dbeta));
          g = std::move(gi);
        }
        break;
      }
      case LayerKind::relu: {
        Tensor<T> gi(g.shape());
        for (std::size_t i = 0; i < gi.size(); ++i) gi[i] = x[i] > T{0} ? g[i] : T{0};
        g = std::move(gi);
        break;
      }
      case LayerKind::sigmoid: {
        const Tensor<T> s = activation_forward(x, Activation::sigmoid);
        g = activation_backward(x, s, g, Activation::sigmoid);
        break;
      }
      case LayerKind::maxpool:
        g = maxpool2d_backward(*cache.pools[idx], g);
        break;
      case LayerKind::gap:
        g = global_avg_pool_backward(x.shape(), g);
        break;
      case LayerKind::dense: {
        auto dg = dense_backward(x, lp.tensors[0], g);
        grads.layers[idx].tensors[0] = std::move(dg.weights);
        grads.layers[idx].tensors[1] = Tensor<T>({l.units}, std::move(dg.bias));
        g = std::move(dg.input);
        break;
      }
    }
  }
  return grads;
}

// Spec plus its float parameters: the unit that is trained, saved and timed.
struct Model {
  ModelSpec spec;
  ParamStore<float> params;
};

// Published size/parameter figures of the compared architectures.
struct ReferenceModelStats {
  std::string_view name;
  std::size_t total_params;
  std::size_t trainable;
  std::size_t non_trainable;
  double size_mb;
};

inline constexpr ReferenceModelStats kReferenceStats[] = {
    {"Custom", 5865, 5801, 64, 0.08},
    {"MobileNetV2", 2260546, 2226434, 34112, 9.52},
    {"NasNet", 4271830, 4235092, 36738, 18.35},
    {"Resnet50", 23591810, 23538690, 53120, 94.89},
};

inline std::span<const ReferenceModelStats> reference_stats() { return kReferenceStats; }

inline const ReferenceModelStats& reference_lookup(std::string_view name) {
  for (const auto& s : kReferenceStats) {
    if (s.name == name) return s;
  }
  throw ConfigError("unknown reference model '" + std::string(name) + "'");
}

}  // namespace castnet
