#pragma once

// Forward/backward compute kernels over NHWC tensors. All functions are pure;
// reductions run in a fixed sequential order so results never depend on
// scheduling.

#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <tuple>
#include <vector>

#include "castnet/tensor.hpp"

namespace castnet {

enum class Padding { valid, same };

enum class Activation { relu, sigmoid };

template <typename T>
struct ConvParams {
  Tensor<T> kernels;  // (kH, kW, Cin, Cout)
  std::vector<T> bias;  // Cout
  std::size_t stride = 1;
  Padding padding = Padding::valid;
};

template <typename T>
struct ConvGrads {
  Tensor<T> input;
  Tensor<T> kernels;
  std::vector<T> bias;
};

struct ConvGeometry {
  std::size_t n, h, w, cin;
  std::size_t kh, kw, cout;
  std::size_t stride;
  std::size_t out_h, out_w;
  std::size_t pad_top, pad_left;
};

namespace detail {

inline void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

// Output extent and leading pad along one spatial axis. Same padding splits
// the total pad floor/ceil with the extra cell on the bottom/right.
inline std::pair<std::size_t, std::size_t> conv_axis(std::size_t in, std::size_t k, std::size_t stride,
                                                     Padding padding) {
  if (padding == Padding::valid) {
    return {(in - k) / stride + 1, 0};
  }
  const std::size_t out = (in + stride - 1) / stride;
  const std::size_t needed = (out - 1) * stride + k;
  const std::size_t total = needed > in ? needed - in : 0;
  return {out, total / 2};
}

}  // namespace detail

template <typename T>
ConvGeometry conv_geometry(const Shape& in, const ConvParams<T>& p) {
  using detail::require;
  require(in.size() == 4, "conv2d: input must be NHWC, got " + shape_str(in));
  require(p.kernels.rank() == 4, "conv2d: kernels must be (kH,kW,Cin,Cout), got " + shape_str(p.kernels.shape()));
  if (p.stride < 1) throw ShapeError("conv2d: stride must be >= 1");
  ConvGeometry g{};
  g.n = in[0];
  g.h = in[1];
  g.w = in[2];
  g.cin = in[3];
  g.kh = p.kernels.dim(0);
  g.kw = p.kernels.dim(1);
  g.cout = p.kernels.dim(3);
  g.stride = p.stride;
  require(p.kernels.dim(2) == g.cin, "conv2d: input has " + std::to_string(g.cin) + " channels but kernels expect " +
                                         std::to_string(p.kernels.dim(2)));
  require(p.bias.size() == g.cout, "conv2d: bias length " + std::to_string(p.bias.size()) + " != Cout " +
                                       std::to_string(g.cout));
  if (p.padding == Padding::valid) {
    require(g.h >= g.kh && g.w >= g.kw, "conv2d: spatial dims " + shape_str(in) + " smaller than kernel under valid padding");
  } else {
    require(g.kh % 2 == 1 && g.kw % 2 == 1, "conv2d: same padding requires odd kernel dims");
  }
  std::tie(g.out_h, g.pad_top) = detail::conv_axis(g.h, g.kh, g.stride, p.padding);
  std::tie(g.out_w, g.pad_left) = detail::conv_axis(g.w, g.kw, g.stride, p.padding);
  return g;
}

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& input, const ConvParams<T>& p) {
  const ConvGeometry g = conv_geometry(input.shape(), p);
  Tensor<T> out({g.n, g.out_h, g.out_w, g.cout});
  const T* in = input.ptr();
  const T* ker = p.kernels.ptr();
  T* o = out.ptr();
  for (std::size_t n = 0; n < g.n; ++n) {
    for (std::size_t oh = 0; oh < g.out_h; ++oh) {
      for (std::size_t ow = 0; ow < g.out_w; ++ow) {
        T* dst = o + ((n * g.out_h + oh) * g.out_w + ow) * g.cout;
        for (std::size_t co = 0; co < g.cout; ++co) dst[co] = p.bias[co];
        for (std::size_t kh = 0; kh < g.kh; ++kh) {
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.stride + kh) - static_cast<std::ptrdiff_t>(g.pad_top);
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.h)) continue;
          for (std::size_t kw = 0; kw < g.kw; ++kw) {
            const std::ptrdiff_t iw =
                static_cast<std::ptrdiff_t>(ow * g.stride + kw) - static_cast<std::ptrdiff_t>(g.pad_left);
            if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(g.w)) continue;
            const T* x = in + ((n * g.h + static_cast<std::size_t>(ih)) * g.w + static_cast<std::size_t>(iw)) * g.cin;
            const T* k = ker + (kh * g.kw + kw) * g.cin * g.cout;
            for (std::size_t c = 0; c < g.cin; ++c) {
              const T xv = x[c];
              const T* kc = k + c * g.cout;
              for (std::size_t co = 0; co < g.cout; ++co) dst[co] += xv * kc[co];
            }
          }
        }
      }
    }
  }
  return out;
}

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& input, const ConvParams<T>& p, const Tensor<T>& grad_out) {
  const ConvGeometry g = conv_geometry(input.shape(), p);
  const Shape expected{g.n, g.out_h, g.out_w, g.cout};
  if (grad_out.shape() != expected) {
    throw ShapeError("conv2d_backward: grad_out " + shape_str(grad_out.shape()) + " != forward output " +
                     shape_str(expected));
  }
  ConvGrads<T> grads{Tensor<T>(input.shape()), Tensor<T>(p.kernels.shape()), std::vector<T>(g.cout, T{0})};
  const T* in = input.ptr();
  const T* ker = p.kernels.ptr();
  const T* go = grad_out.ptr();
  T* gi = grads.input.ptr();
  T* gk = grads.kernels.ptr();
  for (std::size_t n = 0; n < g.n; ++n) {
    for (std::size_t oh = 0; oh < g.out_h; ++oh) {
      for (std::size_t ow = 0; ow < g.out_w; ++ow) {
        const T* gy = go + ((n * g.out_h + oh) * g.out_w + ow) * g.cout;
        for (std::size_t co = 0; co < g.cout; ++co) grads.bias[co] += gy[co];
        for (std::size_t kh = 0; kh < g.kh; ++kh) {
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.stride + kh) - static_cast<std::ptrdiff_t>(g.pad_top);
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.h)) continue;
          for (std::size_t kw = 0; kw < g.kw; ++kw) {
            const std::ptrdiff_t iw =
                static_cast<std::ptrdiff_t>(ow * g.stride + kw) - static_cast<std::ptrdiff_t>(g.pad_left);
            if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(g.w)) continue;
            const std::size_t src = ((n * g.h + static_cast<std::size_t>(ih)) * g.w + static_cast<std::size_t>(iw)) * g.cin;
            const T* x = in + src;
            T* gx = gi + src;
            const std::size_t koff = (kh * g.kw + kw) * g.cin * g.cout;
            const T* k = ker + koff;
            T* dk = gk + koff;
            for (std::size_t c = 0; c < g.cin; ++c) {
              const T xv = x[c];
              const T* kc = k + c * g.cout;
              T* dkc = dk + c * g.cout;
              T acc{0};
              for (std::size_t co = 0; co < g.cout; ++co) {
                dkc[co] += xv * gy[co];
                acc += kc[co] * gy[co];
              }
              gx[c] += acc;
            }
          }
        }
      }
    }
  }
  return grads;
}

// Flat input index of each pooled element plus the shapes it was built for.
struct PoolIndex {
  Shape input_shape;
  Shape output_shape;
  std::vector<std::size_t> argmax;
};

template <typename T>
struct PoolResult {
  Tensor<T> output;
  PoolIndex index;
};

template <typename T>
PoolResult<T> maxpool2d(const Tensor<T>& input, std::size_t window, std::size_t stride) {
  using detail::require;
  require(input.rank() == 4, "maxpool2d: input must be NHWC, got " + shape_str(input.shape()));
  if (window < 1 || stride < 1) throw ShapeError("maxpool2d: window and stride must be >= 1");
  const std::size_t n = input.dim(0), h = input.dim(1), w = input.dim(2), c = input.dim(3);
  require(h >= window && w >= window,
          "maxpool2d: window " + std::to_string(window) + " larger than spatial extent " + shape_str(input.shape()));
  const std::size_t oh = (h - window) / stride + 1, ow = (w - window) / stride + 1;
  PoolResult<T> r{Tensor<T>({n, oh, ow, c}), PoolIndex{input.shape(), {n, oh, ow, c}, {}}};
  r.index.argmax.resize(r.output.size());
  const T* in = input.ptr();
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j) {
        for (std::size_t ch = 0; ch < c; ++ch) {
          std::size_t best = ((b * h + i * stride) * w + j * stride) * c + ch;
          for (std::size_t di = 0; di < window; ++di) {
            for (std::size_t dj = 0; dj < window; ++dj) {
              const std::size_t idx = ((b * h + i * stride + di) * w + j * stride + dj) * c + ch;
              if (in[idx] > in[best]) best = idx;  // strict: first occurrence wins ties
            }
          }
          const std::size_t o = ((b * oh + i) * ow + j) * c + ch;
          r.output[o] = in[best];
          r.index.argmax[o] = best;
        }
      }
    }
  }
  return r;
}

template <typename T>
Tensor<T> maxpool2d_backward(const PoolIndex& index, const Tensor<T>& grad_out) {
  if (grad_out.shape() != index.output_shape || index.argmax.size() != grad_out.size()) {
    throw ShapeError("maxpool2d_backward: grad_out " + shape_str(grad_out.shape()) + " does not match pooling index " +
                     shape_str(index.output_shape));
  }
  Tensor<T> gi(index.input_shape);
  for (std::size_t o = 0; o < grad_out.size(); ++o) gi[index.argmax[o]] += grad_out[o];
  return gi;
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& input) {
  detail::require(input.rank() == 4, "global_avg_pool: input must be NHWC, got " + shape_str(input.shape()));
  const std::size_t n = input.dim(0), hw = input.dim(1) * input.dim(2), c = input.dim(3);
  Tensor<T> out({n, c});
  const T scale = T{1} / static_cast<T>(hw);
  for (std::size_t b = 0; b < n; ++b) {
    const T* src = input.ptr() + b * hw * c;
    T* dst = out.ptr() + b * c;
    for (std::size_t p = 0; p < hw; ++p) {
      for (std::size_t ch = 0; ch < c; ++ch) dst[ch] += src[p * c + ch];
    }
    for (std::size_t ch = 0; ch < c; ++ch) dst[ch] *= scale;
  }
  return out;
}

template <typename T>
Tensor<T> global_avg_pool_backward(const Shape& input_shape, const Tensor<T>& grad_out) {
  detail::require(input_shape.size() == 4, "global_avg_pool_backward: input shape must be NHWC");
  const std::size_t n = input_shape[0], hw = input_shape[1] * input_shape[2], c = input_shape[3];
  if (grad_out.shape() != Shape{n, c}) {
    throw ShapeError("global_avg_pool_backward: grad_out " + shape_str(grad_out.shape()) + " expected " +
                     shape_str({n, c}));
  }
  Tensor<T> gi(input_shape);
  const T scale = T{1} / static_cast<T>(hw);
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t p = 0; p < hw; ++p) {
      for (std::size_t ch = 0; ch < c; ++ch) gi[(b * hw + p) * c + ch] = grad_out[b * c + ch] * scale;
    }
  }
  return gi;
}

template <typename T>
struct DenseGrads {
  Tensor<T> input;
  Tensor<T> weights;
  std::vector<T> bias;
};

namespace detail {
template <typename T>
void check_dense(const Tensor<T>& input, const Tensor<T>& weights, std::size_t bias_len) {
  require(input.rank() == 2 && weights.rank() == 2,
          "dense: expected (N,F) input and (F,U) weights, got " + shape_str(input.shape()) + " and " +
              shape_str(weights.shape()));
  require(input.dim(1) == weights.dim(0), "dense: input features " + std::to_string(input.dim(1)) +
                                              " != weight rows " + std::to_string(weights.dim(0)));
  require(bias_len == weights.dim(1), "dense: bias length " + std::to_string(bias_len) + " != units " +
                                          std::to_string(weights.dim(1)));
}
}  // namespace detail

template <typename T>
Tensor<T> dense_forward(const Tensor<T>& input, const Tensor<T>& weights, std::span<const T> bias) {
  detail::check_dense(input, weights, bias.size());
  const std::size_t n = input.dim(0), f = input.dim(1), u = weights.dim(1);
  Tensor<T> out({n, u});
  for (std::size_t b = 0; b < n; ++b) {
    T* o = out.ptr() + b * u;
    for (std::size_t j = 0; j < u; ++j) o[j] = bias[j];
    for (std::size_t i = 0; i < f; ++i) {
      const T x = input[b * f + i];
      const T* wr = weights.ptr() + i * u;
      for (std::size_t j = 0; j < u; ++j) o[j] += x * wr[j];
    }
  }
  return out;
}

template <typename T>
DenseGrads<T> dense_backward(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& grad_out) {
  detail::check_dense(input, weights, weights.dim(1));
  const std::size_t n = input.dim(0), f = input.dim(1), u = weights.dim(1);
  if (grad_out.shape() != Shape{n, u}) {
    throw ShapeError("dense_backward: grad_out " + shape_str(grad_out.shape()) + " expected " + shape_str({n, u}));
  }
  DenseGrads<T> g{Tensor<T>(input.shape()), Tensor<T>(weights.shape()), std::vector<T>(u, T{0})};
  for (std::size_t b = 0; b < n; ++b) {
    const T* gy = grad_out.ptr() + b * u;
    for (std::size_t j = 0; j < u; ++j) g.bias[j] += gy[j];
    for (std::size_t i = 0; i < f; ++i) {
      const T x = input[b * f + i];
      const T* wr = weights.ptr() + i * u;
      T* gw = g.weights.ptr() + i * u;
      T acc{0};
      for (std::size_t j = 0; j < u; ++j) {
        gw[j] += x * gy[j];
        acc += wr[j] * gy[j];
      }
      g.input[b * f + i] = acc;
    }
  }
  return g;
}

template <typename T>
T sigmoid(T x) {
  if (x >= T{0}) return T{1} / (T{1} + std::exp(-x));
  const T e = std::exp(x);
  return e / (T{1} + e);
}

template <typename T>
Tensor<T> activation_forward(const Tensor<T>& input, Activation kind) {
  Tensor<T> out = input;
  for (auto& v : out.data()) v = kind == Activation::relu ? std::max(T{0}, v) : sigmoid(v);
  return out;
}

// relu' is taken from the input (x > 0); sigmoid' = s(1 - s) from the output.
template <typename T>
Tensor<T> activation_backward(const Tensor<T>& input, const Tensor<T>& output, const Tensor<T>& grad_out,
                              Activation kind) {
  if (grad_out.shape() != input.shape() || output.shape() != input.shape()) {
    throw ShapeError("activation_backward: shape mismatch " + shape_str(grad_out.shape()) + " vs " +
                     shape_str(input.shape()));
  }
  Tensor<T> gi(input.shape());
  for (std::size_t i = 0; i < gi.size(); ++i) {
    if (kind == Activation::relu) {
      gi[i] = input[i] > T{0} ? grad_out[i] : T{0};
    } else {
      const T s = output[i];
      gi[i] = grad_out[i] * s * (T{1} - s);
    }
  }
  return gi;
}

// Batch normalization over the trailing channel axis.
template <typename T>
struct BatchNormParams {
  std::span<const T> gamma, beta, moving_mean, moving_var;
  T epsilon;
};

template <typename T>
struct BatchNormCache {
  Tensor<T> normalized;  // x_hat
  std::vector<T> inv_std;
  std::vector<T> batch_mean;
  std::vector<T> batch_var;
};

template <typename T>
struct BatchNormGrads {
  Tensor<T> input;
  std::vector<T> gamma, beta;
};

template <typename T>
Tensor<T> batchnorm_inference(const Tensor<T>& input, const BatchNormParams<T>& p) {
  const std::size_t c = input.shape().back();
  detail::require(p.gamma.size() == c && p.moving_var.size() == c,
                  "batchnorm: parameter length does not match channel count " + std::to_string(c));
  std::vector<T> scale(c), shift(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    scale[ch] = p.gamma[ch] / std::sqrt(p.moving_var[ch] + p.epsilon);
    shift[ch] = p.beta[ch] - p.moving_mean[ch] * scale[ch];
  }
  Tensor<T> out(input.shape());
  const std::size_t rows = input.size() / c;
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t ch = 0; ch < c; ++ch) out[r * c + ch] = input[r * c + ch] * scale[ch] + shift[ch];
  }
  return out;
}

// Normalizes with batch statistics (biased variance); the caller folds
// batch_mean/batch_var into the moving statistics.
template <typename T>
Tensor<T> batchnorm_training(const Tensor<T>& input, const BatchNormParams<T>& p, BatchNormCache<T>& cache) {
  const std::size_t c = input.shape().back();
  detail::require(p.gamma.size() == c, "batchnorm: parameter length does not match channel count " + std::to_string(c));
  const std::size_t rows = input.size() / c;
  cache.batch_mean.assign(c, T{0});
  cache.batch_var.assign(c, T{0});
  cache.inv_std.assign(c, T{0});
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t ch = 0; ch < c; ++ch) cache.batch_mean[ch] += input[r * c + ch];
  }
  for (auto& m : cache.batch_mean) m /= static_cast<T>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T d = input[r * c + ch] - cache.batch_mean[ch];
      cache.batch_var[ch] += d * d;
    }
  }
  for (std::size_t ch = 0; ch < c; ++ch) {
    cache.batch_var[ch] /= static_cast<T>(rows);
    cache.inv_std[ch] = T{1} / std::sqrt(cache.batch_var[ch] + p.epsilon);
  }
  cache.normalized = Tensor<T>(input.shape());
  Tensor<T> out(input.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t i = r * c + ch;
      const T xh = (input[i] - cache.batch_mean[ch]) * cache.inv_std[ch];
      cache.normalized[i] = xh;
      out[i] = p.gamma[ch] * xh + p.beta[ch];
    }
  }
  return out;
}

template <typename T>
BatchNormGrads<T> batchnorm_backward(const BatchNormCache<T>& cache, std::span<const T> gamma,
                                     const Tensor<T>& grad_out) {
  if (grad_out.shape() != cache.normalized.shape()) {
    throw ShapeError("batchnorm_backward: grad_out " + shape_str(grad_out.shape()) + " does not match cached " +
                     shape_str(cache.normalized.shape()));
  }
  const std::size_t c = gamma.size();
  const std::size_t rows = grad_out.size() / c;
  BatchNormGrads<T> g{Tensor<T>(grad_out.shape()), std::vector<T>(c, T{0}), std::vector<T>(c, T{0})};
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t i = r * c + ch;
      g.beta[ch] += grad_out[i];
      g.gamma[ch] += grad_out[i] * cache.normalized[i];
    }
  }
  // dx = inv_std/M * (M*dxh - sum(dxh) - xh*sum(dxh*xh)), dxh = dy*gamma
  const T m = static_cast<T>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t i = r * c + ch;
      const T dxh = grad_out[i] * gamma[ch];
      const T sum_dxh = g.beta[ch] * gamma[ch];
      const T sum_dxh_xh = g.gamma[ch] * gamma[ch];
      g.input[i] = cache.inv_std[ch] / m * (m * dxh - sum_dxh - cache.normalized[i] * sum_dxh_xh);
    }
  }
  return g;
}

}  // namespace castnet
