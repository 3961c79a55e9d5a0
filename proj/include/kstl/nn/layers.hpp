#pragma once

// Forward/backward kernels for the layer types used by the classifier.
// Every kernel is a pure function of its inputs plus an explicit cache
// object filled by the forward pass and consumed by the backward pass.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <type_traits>
#include <string>
#include <vector>

#include "kstl/core/errors.hpp"
#include "kstl/core/rng.hpp"
#include "kstl/core/tensor.hpp"

namespace kstl::nn {

enum class Mode { train, eval };

namespace detail {

inline void require_rank(const Shape& s, std::size_t rank, const char* what) {
  if (s.size() != rank)
    throw ConfigError(std::string(what) + " expects rank " + std::to_string(rank) + ", got " +
                      shape_string(s));
}

// Range of output positions o (in [0, out)) for which o*stride + k - pad lies in [0, in).
inline void valid_range(std::size_t in, std::size_t out, std::size_t stride, std::size_t k,
                        std::size_t pad, std::size_t& lo, std::size_t& hi) {
  const long long kp = static_cast<long long>(k) - static_cast<long long>(pad);
  const long long s = static_cast<long long>(stride);
  long long first = kp >= 0 ? 0 : (-kp + s - 1) / s;
  long long last = (static_cast<long long>(in) - 1 - kp);  // o*s <= last
  last = last < 0 ? -1 : last / s;
  lo = static_cast<std::size_t>(std::max<long long>(first, 0));
  hi = static_cast<std::size_t>(std::min<long long>(last + 1, static_cast<long long>(out)));
  if (hi < lo) hi = lo;
}

}  // namespace detail

// ---------------------------------------------------------------- conv2d

struct Conv2dGeometry {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

inline std::size_t conv_output_size(std::size_t in, std::size_t kernel, const Conv2dGeometry& g) {
  return (in + 2 * g.padding - kernel) / g.stride + 1;
}

/// input NCHW, weight OxCxKxK, bias O.
template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                         const Conv2dGeometry& g) {
  detail::require_rank(input.shape(), 4, "conv2d input");
  detail::require_rank(weight.shape(), 4, "conv2d weight");
  const std::size_t n_batch = input.dim(0), c_in = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t c_out = weight.dim(0), kh_n = weight.dim(2), kw_n = weight.dim(3);
  if (weight.dim(1) != c_in)
    throw ConfigError("conv2d channel mismatch: input has " + std::to_string(c_in) +
                      " channels, weight expects " + std::to_string(weight.dim(1)));
  if (bias.rank() != 1 || bias.dim(0) != c_out)
    throw ConfigError("conv2d bias shape " + shape_string(bias.shape()) + " does not match " +
                      std::to_string(c_out) + " output channels");
  if (g.stride == 0) throw ConfigError("conv2d stride must be positive");
  if (h + 2 * g.padding < kh_n || w + 2 * g.padding < kw_n)
    throw ConfigError("conv2d kernel " + std::to_string(kh_n) + "x" + std::to_string(kw_n) +
                      " does not fit padded input " + std::to_string(h + 2 * g.padding) + "x" +
                      std::to_string(w + 2 * g.padding));
  const std::size_t oh_n = conv_output_size(h, kh_n, g), ow_n = conv_output_size(w, kw_n, g);
  Tensor<T> out({n_batch, c_out, oh_n, ow_n});
  const T* x = input.data();
  const T* wt = weight.data();
  T* y = out.data();
  for (std::size_t n = 0; n < n_batch; ++n) {
    for (std::size_t o = 0; o < c_out; ++o) {
      T* yp = y + (n * c_out + o) * oh_n * ow_n;
      std::fill(yp, yp + oh_n * ow_n, bias[o]);
      for (std::size_t c = 0; c < c_in; ++c) {
        const T* xp = x + (n * c_in + c) * h * w;
        for (std::size_t kh = 0; kh < kh_n; ++kh) {
          std::size_t oh_lo, oh_hi;
          detail::valid_range(h, oh_n, g.stride, kh, g.padding, oh_lo, oh_hi);
          for (std::size_t kw = 0; kw < kw_n; ++kw) {
            const T wv = wt[((o * c_in + c) * kh_n + kh) * kw_n + kw];
            std::size_t ow_lo, ow_hi;
            detail::valid_range(w, ow_n, g.stride, kw, g.padding, ow_lo, ow_hi);
            for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
              const T* xr = xp + (oh * g.stride + kh - g.padding) * w + kw - g.padding;
              T* yr = yp + oh * ow_n;
              for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) yr[ow] += wv * xr[ow * g.stride];
            }
          }
        }
      }
    }
  }
  return out;
}

template <typename T>
struct Conv2dGrads {
  Tensor<T> input;
  Tensor<T> weight;
  Tensor<T> bias;
};

template <typename T>
Conv2dGrads<T> conv2d_backward(const Tensor<T>& grad_out, const Tensor<T>& input,
                               const Tensor<T>& weight, const Conv2dGeometry& g) {
  const std::size_t n_batch = input.dim(0), c_in = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t c_out = weight.dim(0), kh_n = weight.dim(2), kw_n = weight.dim(3);
  const std::size_t oh_n = conv_output_size(h, kh_n, g), ow_n = conv_output_size(w, kw_n, g);
  if (grad_out.shape() != Shape{n_batch, c_out, oh_n, ow_n})
    throw ConfigError("conv2d grad_out shape " + shape_string(grad_out.shape()) +
                      " inconsistent with forward output " +
                      shape_string({n_batch, c_out, oh_n, ow_n}));
  Conv2dGrads<T> grads{Tensor<T>(input.shape()), Tensor<T>(weight.shape()), Tensor<T>({c_out})};
  const T* x = input.data();
  const T* wt = weight.data();
  const T* gy = grad_out.data();
  T* gx = grads.input.data();
  T* gw = grads.weight.data();
  for (std::size_t n = 0; n < n_batch; ++n) {
    for (std::size_t o = 0; o < c_out; ++o) {
      const T* gyp = gy + (n * c_out + o) * oh_n * ow_n;
      T bsum = 0;
      for (std::size_t i = 0; i < oh_n * ow_n; ++i) bsum += gyp[i];
      grads.bias[o] += bsum;
      for (std::size_t c = 0; c < c_in; ++c) {
        const T* xp = x + (n * c_in + c) * h * w;
        T* gxp = gx + (n * c_in + c) * h * w;
        for (std::size_t kh = 0; kh < kh_n; ++kh) {
          std::size_t oh_lo, oh_hi;
          detail::valid_range(h, oh_n, g.stride, kh, g.padding, oh_lo, oh_hi);
          for (std::size_t kw = 0; kw < kw_n; ++kw) {
            const std::size_t widx = ((o * c_in + c) * kh_n + kh) * kw_n + kw;
            const T wv = wt[widx];
            std::size_t ow_lo, ow_hi;
            detail::valid_range(w, ow_n, g.stride, kw, g.padding, ow_lo, ow_hi);
            T acc = 0;
            for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
              const std::size_t off = (oh * g.stride + kh - g.padding) * w + kw - g.padding;
              const T* xr = xp + off;
              T* gxr = gxp + off;
              const T* gyr = gyp + oh * ow_n;
              for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) {
                acc += gyr[ow] * xr[ow * g.stride];
                gxr[ow * g.stride] += wv * gyr[ow];
              }
            }
            gw[widx] += acc;
          }
        }
      }
    }
  }
  return grads;
}

// ------------------------------------------------------------- batchnorm

struct BatchNormOptions {
  double momentum = 0.1;
  double epsilon = 1e-5;
};

template <typename T>
struct BatchNormCache {
  Tensor<T> normalized;      // x-hat
  std::vector<T> inv_std;    // per channel
  Mode mode = Mode::eval;
};

namespace detail {
// Views rank-2 [N,C] and rank-4 [N,C,H,W] inputs as [N,C,S].
inline void bn_dims(const Shape& s, std::size_t& n, std::size_t& c, std::size_t& sp) {
  if (s.size() != 2 && s.size() != 4)
    throw ConfigError("batchnorm expects rank 2 or 4 input, got " + shape_string(s));
  n = s[0];
  c = s[1];
  sp = s.size() == 4 ? s[2] * s[3] : 1;
}
}  // namespace detail

/// Train mode normalizes with batch statistics and updates the running
/// statistics in place (running variance uses the unbiased estimate).
/// Eval mode reads the running statistics only.
template <typename T>
Tensor<T> batchnorm_forward(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                            Mode mode, Tensor<T>& running_mean, Tensor<T>& running_var,
                            const BatchNormOptions& opt, BatchNormCache<T>* cache = nullptr) {
  std::size_t n_batch, channels, spatial;
  detail::bn_dims(input.shape(), n_batch, channels, spatial);
  for (const Tensor<T>* p : std::initializer_list<const Tensor<T>*>{&gamma, &beta, &running_mean, &running_var})
    if (p->rank() != 1 || p->dim(0) != channels)
      throw ConfigError("batchnorm parameter shape " + shape_string(p->shape()) + " does not match " +
                        std::to_string(channels) + " channels");
  if (mode == Mode::train && n_batch < 2)
    throw ConfigError("batchnorm in train mode needs a batch of at least 2, got 1");

  Tensor<T> out(input.shape());
  Tensor<T> xhat(input.shape());
  std::vector<T> inv_std(channels);
  const std::size_t count = n_batch * spatial;
  for (std::size_t c = 0; c < channels; ++c) {
    T mean, var;
    if (mode == Mode::train) {
      T sum = 0;
      for (std::size_t n = 0; n < n_batch; ++n) {
        const T* p = input.data() + (n * channels + c) * spatial;
        for (std::size_t i = 0; i < spatial; ++i) sum += p[i];
      }
      mean = sum / static_cast<T>(count);
      T sq = 0;
      for (std::size_t n = 0; n < n_batch; ++n) {
        const T* p = input.data() + (n * channels + c) * spatial;
        for (std::size_t i = 0; i < spatial; ++i) sq += (p[i] - mean) * (p[i] - mean);
      }
      var = sq / static_cast<T>(count);
      const T m = static_cast<T>(opt.momentum);
      running_mean[c] = (1 - m) * running_mean[c] + m * mean;
      running_var[c] = (1 - m) * running_var[c] +
                       m * var * static_cast<T>(count) / static_cast<T>(count - 1);
    } else {
      mean = running_mean[c];
      var = running_var[c];
    }
    const T is = T(1) / std::sqrt(var + static_cast<T>(opt.epsilon));
    inv_std[c] = is;
    for (std::size_t n = 0; n < n_batch; ++n) {
      const std::size_t base = (n * channels + c) * spatial;
      for (std::size_t i = 0; i < spatial; ++i) {
        const T xh = (input[base + i] - mean) * is;
        xhat[base + i] = xh;
        out[base + i] = gamma[c] * xh + beta[c];
      }
    }
  }
  if (cache) {
    cache->normalized = std::move(xhat);
    cache->inv_std = std::move(inv_std);
    cache->mode = mode;
  }
  return out;
}

template <typename T>
struct BatchNormGrads {
  Tensor<T> input;
  Tensor<T> gamma;
  Tensor<T> beta;
};

template <typename T>
BatchNormGrads<T> batchnorm_backward(const Tensor<T>& grad_out, const Tensor<T>& gamma,
                                     const BatchNormCache<T>& cache) {
  std::size_t n_batch, channels, spatial;
  detail::bn_dims(grad_out.shape(), n_batch, channels, spatial);
  if (cache.normalized.shape() != grad_out.shape())
    throw UsageError("batchnorm backward without a matching forward cache");
  BatchNormGrads<T> g{Tensor<T>(grad_out.shape()), Tensor<T>({channels}), Tensor<T>({channels})};
  const T count = static_cast<T>(n_batch * spatial);
  for (std::size_t c = 0; c < channels; ++c) {
    T sum_dy = 0, sum_dy_xhat = 0;
    for (std::size_t n = 0; n < n_batch; ++n) {
      const std::size_t base = (n * channels + c) * spatial;
      for (std::size_t i = 0; i < spatial; ++i) {
        sum_dy += grad_out[base + i];
        sum_dy_xhat += grad_out[base + i] * cache.normalized[base + i];
      }
    }
    g.gamma[c] = sum_dy_xhat;
    g.beta[c] = sum_dy;
    const T scale = gamma[c] * cache.inv_std[c];
    for (std::size_t n = 0; n < n_batch; ++n) {
      const std::size_t base = (n * channels + c) * spatial;
      for (std::size_t i = 0; i < spatial; ++i) {
        if (cache.mode == Mode::train) {
          g.input[base + i] = scale / count *
                              (count * grad_out[base + i] - sum_dy - cache.normalized[base + i] * sum_dy_xhat);
        } else {
          g.input[base + i] = scale * grad_out[base + i];
        }
      }
    }
  }
  return g;
}

// ------------------------------------------------------------------ relu

template <typename T>
Tensor<T> relu_forward(const Tensor<T>& input) {
  Tensor<T> out(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) out[i] = input[i] > 0 ? input[i] : T(0);
  return out;
}

template <typename T>
Tensor<T> relu_backward(const Tensor<T>& grad_out, const Tensor<T>& input) {
  Tensor<T> g(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) g[i] = input[i] > 0 ? grad_out[i] : T(0);
  return g;
}

// --------------------------------------------------------------- maxpool

/// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
template <typename T>
Tensor<T> maxpool2_forward(const Tensor<T>& input, std::vector<std::size_t>* argmax = nullptr) {
  detail::require_rank(input.shape(), 4, "maxpool2 input");
  const std::size_t n_batch = input.dim(0), channels = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (h < 2 || w < 2) throw ConfigError("maxpool2 needs spatial size >= 2, got " + shape_string(input.shape()));
  const std::size_t oh_n = h / 2, ow_n = w / 2;
  Tensor<T> out({n_batch, channels, oh_n, ow_n});
  if (argmax) argmax->assign(out.size(), 0);
  std::size_t k = 0;
  for (std::size_t nc = 0; nc < n_batch * channels; ++nc) {
    const std::size_t base = nc * h * w;
    for (std::size_t oh = 0; oh < oh_n; ++oh) {
      for (std::size_t ow = 0; ow < ow_n; ++ow, ++k) {
        std::size_t best = base + 2 * oh * w + 2 * ow;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t idx = base + (2 * oh + dy) * w + 2 * ow + dx;
            if (input[idx] > input[best]) best = idx;
          }
        out[k] = input[best];
        if (argmax) (*argmax)[k] = best;
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> maxpool2_backward(const Tensor<T>& grad_out, const Shape& input_shape,
                            const std::vector<std::size_t>& argmax) {
  if (argmax.size() != grad_out.size()) throw UsageError("maxpool2 backward without a matching forward cache");
  Tensor<T> g(input_shape);
  for (std::size_t k = 0; k < grad_out.size(); ++k) g[argmax[k]] += grad_out[k];
  return g;
}

// ------------------------------------------------------- global avg pool

template <typename T>
Tensor<T> global_avg_pool_forward(const Tensor<T>& input) {
  detail::require_rank(input.shape(), 4, "global_avg_pool input");
  const std::size_t nc = input.dim(0) * input.dim(1), sp = input.dim(2) * input.dim(3);
  Tensor<T> out({input.dim(0), input.dim(1)});
  for (std::size_t i = 0; i < nc; ++i) {
    T s = 0;
    for (std::size_t j = 0; j < sp; ++j) s += input[i * sp + j];
    out[i] = s / static_cast<T>(sp);
  }
  return out;
}

template <typename T>
Tensor<T> global_avg_pool_backward(const Tensor<T>& grad_out, const Shape& input_shape) {
  const std::size_t sp = input_shape[2] * input_shape[3];
  Tensor<T> g(input_shape);
  for (std::size_t i = 0; i < grad_out.size(); ++i) {
    const T v = grad_out[i] / static_cast<T>(sp);
    for (std::size_t j = 0; j < sp; ++j) g[i * sp + j] = v;
  }
  return g;
}

// ---------------------------------------------------------------- linear

/// input NxI, weight OxI, bias O -> NxO.
template <typename T>
Tensor<T> linear_forward(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias) {
  detail::require_rank(input.shape(), 2, "linear input");
  detail::require_rank(weight.shape(), 2, "linear weight");
  const std::size_t n_batch = input.dim(0), in = input.dim(1), out_n = weight.dim(0);
  if (weight.dim(1) != in)
    throw ConfigError("linear width mismatch: input has " + std::to_string(in) + " features, weight expects " +
                      std::to_string(weight.dim(1)));
  if (bias.rank() != 1 || bias.dim(0) != out_n)
    throw ConfigError("linear bias shape " + shape_string(bias.shape()) + " does not match " +
                      std::to_string(out_n) + " outputs");
  Tensor<T> out({n_batch, out_n});
  for (std::size_t n = 0; n < n_batch; ++n) {
    const T* x = input.data() + n * in;
    for (std::size_t o = 0; o < out_n; ++o) {
      const T* wr = weight.data() + o * in;
      T acc = bias[o];
      for (std::size_t i = 0; i < in; ++i) acc += wr[i] * x[i];
      out[n * out_n + o] = acc;
    }
  }
  return out;
}

template <typename T>
struct LinearGrads {
  Tensor<T> input;
  Tensor<T> weight;
  Tensor<T> bias;
};

template <typename T>
LinearGrads<T> linear_backward(const Tensor<T>& grad_out, const Tensor<T>& input, const Tensor<T>& weight) {
  const std::size_t n_batch = input.dim(0), in = input.dim(1), out_n = weight.dim(0);
  if (grad_out.shape() != Shape{n_batch, out_n})
    throw ConfigError("linear grad_out shape " + shape_string(grad_out.shape()) + " inconsistent with forward");
  LinearGrads<T> g{Tensor<T>(input.shape()), Tensor<T>(weight.shape()), Tensor<T>({out_n})};
  for (std::size_t n = 0; n < n_batch; ++n) {
    const T* x = input.data() + n * in;
    T* gx = g.input.data() + n * in;
    for (std::size_t o = 0; o < out_n; ++o) {
      const T gy = grad_out[n * out_n + o];
      const T* wr = weight.data() + o * in;
      T* gw = g.weight.data() + o * in;
      g.bias[o] += gy;
      for (std::size_t i = 0; i < in; ++i) {
        gx[i] += gy * wr[i];
        gw[i] += gy * x[i];
      }
    }
  }
  return g;
}

// --------------------------------------------------------------- dropout

inline void check_dropout_rate(double rate) {
  if (!(rate >= 0.0 && rate < 1.0))
    throw ConfigError("dropout rate must lie in [0, 1), got " + std::to_string(rate));
}

/// Inverted dropout mask: kept units carry 1/(1-rate), dropped units 0.
template <typename T>
std::vector<T> dropout_mask(std::size_t n, double rate, Rng& rng) {
  check_dropout_rate(rate);
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  std::vector<T> mask(n);
  for (auto& m : mask) m = rng.uniform() < rate ? T(0) : keep_scale;
  return mask;
}

/// Eval mode (or rate 0) is the identity; in train mode `mask` must hold one
/// entry per element.
template <typename T>
Tensor<T> dropout_forward(const Tensor<T>& input, double rate, Mode mode,
                          const std::type_identity_t<std::vector<T>>* mask = nullptr) {
  check_dropout_rate(rate);
  if (mode == Mode::eval || rate == 0.0) return input;
  if (!mask || mask->size() != input.size()) throw UsageError("dropout in train mode requires a mask");
  Tensor<T> out(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) out[i] = input[i] * (*mask)[i];
  return out;
}

template <typename T>
Tensor<T> dropout_backward(const Tensor<T>& grad_out, const std::vector<T>* mask) {
  if (!mask) return grad_out;
  Tensor<T> g(grad_out.shape());
  for (std::size_t i = 0; i < grad_out.size(); ++i) g[i] = grad_out[i] * (*mask)[i];
  return g;
}

}  // namespace kstl::nn
