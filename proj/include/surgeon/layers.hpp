// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "surgeon/kernels.hpp"
#include "surgeon/sparsity.hpp"
#include "surgeon/tensor.hpp"

namespace surgeon {

enum class LayerKind { linear, conv2d, batchnorm, relu, pool, softmax };
enum class PoolMode { max, avg };

inline const char* layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::linear: return "linear";
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::batchnorm: return "batchnorm";
    case LayerKind::relu: return "relu";
    case LayerKind::pool: return "pool";
    case LayerKind::softmax: return "softmax";
  }
  return "?";
}

struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  int id = -1;

  int in_features = 0, out_features = 0;            // linear
  int in_ch = 0, out_ch = 0;                        // conv2d
  int kernel = 3, stride = 1, pad = 1;              // conv2d
  int channels = 0;                                 // batchnorm
  PoolMode pool_mode = PoolMode::max;               // pool
  int pool_k = 2, pool_stride = 2;                  // pool

  bool parametric() const {
    return kind == LayerKind::linear || kind == LayerKind::conv2d ||
           kind == LayerKind::batchnorm;
  }
  // Layers whose cached input feeds a weight gradient; only these are pruned.
  bool prunable() const { return parametric(); }

  static LayerSpec make_linear(int in, int out) {
    LayerSpec s;
    s.kind = LayerKind::linear;
    s.in_features = in;
    s.out_features = out;
    return s;
  }
  static LayerSpec make_conv(int in_ch, int out_ch, int kernel = 3,
                             int stride = 1, int pad = 1) {
    LayerSpec s;
    s.kind = LayerKind::conv2d;
    s.in_ch = in_ch;
    s.out_ch = out_ch;
    s.kernel = kernel;
    s.stride = stride;
    s.pad = pad;
    return s;
  }
  static LayerSpec make_batchnorm(int channels) {
    LayerSpec s;
    s.kind = LayerKind::batchnorm;
    s.channels = channels;
    return s;
  }
  static LayerSpec make_relu() {
    LayerSpec s;
    s.kind = LayerKind::relu;
    return s;
  }
  static LayerSpec make_pool(PoolMode mode = PoolMode::max, int k = 2,
                             int stride = 2) {
    LayerSpec s;
    s.kind = LayerKind::pool;
    s.pool_mode = mode;
    s.pool_k = k;
    s.pool_stride = stride;
    return s;
  }
  static LayerSpec make_softmax() {
    LayerSpec s;
    s.kind = LayerKind::softmax;
    return s;
  }
};

constexpr double kBnEps = 1e-5;
constexpr double kBnMomentum = 0.1;

// Weight/bias per layer; batchnorm stores gamma in weight, beta in bias,
// plus running statistics (state, not parameters).
template <typename T>
struct LayerParams {
  TensorT<T> weight, bias;
  TensorT<T> running_mean, running_var;  // batchnorm only
};

template <typename T>
struct LayerGrads {
  TensorT<T> weight, bias;
};

// How batchnorm normalizes: blend = 1 is pure current-batch statistics,
// blend = 0 is pure running statistics (eval), anything between mixes them.
struct ForwardOptions {
  double bn_blend = 1.0;
};

template <typename T>
struct BnAux {
  std::vector<T> mean_use, inv_std, mean_batch;
  double blend = 1.0;
};

// Exact small per-layer data that backward needs besides the cached input.
template <typename T>
struct LayerAux {
  BnAux<T> bn;                        // batchnorm
  BitVec relu_mask;                   // relu (becomes the mask-only record)
  std::vector<std::int32_t> argmax;   // max pool: in-plane offset per output
  TensorT<T> probs;                   // softmax output
};

template <typename T>
struct LayerForward {
  TensorT<T> out;
  LayerAux<T> aux;
  bool has_bn_stats = false;
  std::vector<T> batch_mean, batch_var;  // biased variance, for stat refresh
};

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

inline std::vector<std::size_t> layer_out_shape(
    const LayerSpec& spec, const std::vector<std::size_t>& in) {
  switch (spec.kind) {
    case LayerKind::linear: {
      require(!in.empty(), "linear: scalar input");
      std::size_t f = 1;
      for (std::size_t i = 1; i < in.size(); ++i) f *= in[i];
      require(f == static_cast<std::size_t>(spec.in_features),
              "linear: input " + shape_str(in) + " has " + std::to_string(f) +
                  " features, expected " + std::to_string(spec.in_features));
      return {in[0], static_cast<std::size_t>(spec.out_features)};
    }
    case LayerKind::conv2d: {
      require(in.size() == 4 &&
                  in[1] == static_cast<std::size_t>(spec.in_ch),
              "conv2d: bad input shape " + shape_str(in));
      const auto ho = (in[2] + 2 * spec.pad - spec.kernel) / spec.stride + 1;
      const auto wo = (in[3] + 2 * spec.pad - spec.kernel) / spec.stride + 1;
      require(in[2] + 2 * spec.pad >= static_cast<std::size_t>(spec.kernel) &&
                  in[3] + 2 * spec.pad >= static_cast<std::size_t>(spec.kernel),
              "conv2d: input smaller than kernel");
      return {in[0], static_cast<std::size_t>(spec.out_ch), ho, wo};
    }
    case LayerKind::batchnorm:
      require(in.size() == 4 &&
                  in[1] == static_cast<std::size_t>(spec.channels),
              "batchnorm: bad input shape " + shape_str(in));
      return in;
    case LayerKind::relu:
      return in;
    case LayerKind::pool: {
      require(in.size() == 4, "pool: bad input shape " + shape_str(in));
      require(in[2] >= static_cast<std::size_t>(spec.pool_k) &&
                  in[3] >= static_cast<std::size_t>(spec.pool_k),
              "pool: input smaller than window");
      const auto ho = (in[2] - spec.pool_k) / spec.pool_stride + 1;
      const auto wo = (in[3] - spec.pool_k) / spec.pool_stride + 1;
      return {in[0], in[1], ho, wo};
    }
    case LayerKind::softmax:
      require(in.size() == 2, "softmax: bad input shape " + shape_str(in));
      return in;
  }
  throw std::invalid_argument("unknown layer kind");
}

// Analytic per-sample multiply-add count of one forward pass.
inline long long layer_forward_flops(const LayerSpec& spec,
                                     const std::vector<std::size_t>& in) {
  const auto out = layer_out_shape(spec, in);
  std::size_t n_in = 1, n_out = 1;
  for (std::size_t i = 1; i < in.size(); ++i) n_in *= in[i];
  for (std::size_t i = 1; i < out.size(); ++i) n_out *= out[i];
  switch (spec.kind) {
    case LayerKind::linear:
      return 2LL * spec.in_features * spec.out_features;
    case LayerKind::conv2d:
      return 2LL * spec.out_ch * spec.in_ch * spec.kernel * spec.kernel *
             static_cast<long long>(out[2] * out[3]);
    case LayerKind::batchnorm:
      return 4LL * static_cast<long long>(n_in);
    case LayerKind::relu:
      return static_cast<long long>(n_in);
    case LayerKind::pool:
      return static_cast<long long>(n_in);
    case LayerKind::softmax:
      return 3LL * static_cast<long long>(n_in);
  }
  return 0;
}

template <typename T>
LayerForward<T> layer_forward(const LayerSpec& spec,
                              const LayerParams<T>& params,
                              const TensorT<T>& in,
                              const ForwardOptions& opt = {}) {
  using i64 = kernels::i64;
  LayerForward<T> r;
  const auto out_shape = layer_out_shape(spec, in.shape());

  switch (spec.kind) {
    case LayerKind::linear: {
      const std::size_t B = in.dim(0);
      TensorT<T> flat =
          in.reshaped({B, static_cast<std::size_t>(spec.in_features)});
      r.out = TensorT<T>(out_shape);
      kernels::matmul_nt(flat.ptr(), params.weight.ptr(), r.out.ptr(),
                         static_cast<i64>(B), spec.in_features,
                         spec.out_features);
      T* po = r.out.ptr();
      const T* pb = params.bias.ptr();
      for (std::size_t b = 0; b < B; ++b)
        for (int j = 0; j < spec.out_features; ++j)
          po[b * spec.out_features + j] += pb[j];
      return r;
    }

    case LayerKind::conv2d: {
      r.out = TensorT<T>(out_shape);
      kernels::conv2d_forward(in.ptr(), params.weight.ptr(), params.bias.ptr(),
                              r.out.ptr(), static_cast<i64>(in.dim(0)),
                              spec.in_ch, static_cast<i64>(in.dim(2)),
                              static_cast<i64>(in.dim(3)), spec.out_ch,
                              spec.kernel, spec.stride, spec.pad,
                              static_cast<i64>(out_shape[2]),
                              static_cast<i64>(out_shape[3]));
      return r;
    }

    case LayerKind::batchnorm: {
      const i64 B = static_cast<i64>(in.dim(0));
      const i64 C = spec.channels;
      const i64 HW = static_cast<i64>(in.dim(2) * in.dim(3));
      const i64 n = B * HW;
      const double a = opt.bn_blend;
      require(a >= 0.0 && a <= 1.0, "batchnorm: blend outside [0, 1]");
      if (a > 0.0 && n < 2)
        throw std::invalid_argument(
            "batchnorm: batch statistics need at least 2 values per channel; "
            "use blended or running statistics (bn-blend < 1) for batch size "
            "1");
      r.out = TensorT<T>(out_shape);
      r.aux.bn.mean_use.resize(C);
      r.aux.bn.inv_std.resize(C);
      r.aux.bn.mean_batch.resize(C);
      r.aux.bn.blend = a;
      if (a > 0.0) {
        r.has_bn_stats = true;
        r.batch_mean.resize(C);
        r.batch_var.resize(C);
      }
      const T* pin = in.ptr();
      T* pout = r.out.ptr();
      const T* gamma = params.weight.ptr();
      const T* beta = params.bias.ptr();
      const T* rmean = params.running_mean.ptr();
      const T* rvar = params.running_var.ptr();
#pragma omp parallel for schedule(static)
      for (i64 c = 0; c < C; ++c) {
        T mean_b = T(0), var_b = T(0);
        if (a > 0.0) {
          T s = T(0);
          for (i64 b = 0; b < B; ++b) {
            const T* p = pin + (b * C + c) * HW;
            for (i64 i = 0; i < HW; ++i) s += p[i];
          }
          mean_b = s / static_cast<T>(n);
          T s2 = T(0);
          for (i64 b = 0; b < B; ++b) {
            const T* p = pin + (b * C + c) * HW;
            for (i64 i = 0; i < HW; ++i) {
              const T d = p[i] - mean_b;
              s2 += d * d;
            }
          }
          var_b = s2 / static_cast<T>(n);
          r.batch_mean[c] = mean_b;
          r.batch_var[c] = var_b;
        }
        const T mean_use = static_cast<T>(a) * mean_b +
                           static_cast<T>(1.0 - a) * rmean[c];
        const T var_use =
            static_cast<T>(a) * var_b + static_cast<T>(1.0 - a) * rvar[c];
        const T inv_std =
            T(1) / std::sqrt(var_use + static_cast<T>(kBnEps));
        r.aux.bn.mean_use[c] = mean_use;
        r.aux.bn.inv_std[c] = inv_std;
        r.aux.bn.mean_batch[c] = mean_b;
        const T g = gamma[c] * inv_std;
        for (i64 b = 0; b < B; ++b) {
          const T* p = pin + (b * C + c) * HW;
          T* q = pout + (b * C + c) * HW;
          for (i64 i = 0; i < HW; ++i)
            q[i] = g * (p[i] - mean_use) + beta[c];
        }
      }
      return r;
    }

    case LayerKind::relu: {
      r.out = TensorT<T>(in.shape());
      r.aux.relu_mask = BitVec(in.size());
      for (std::size_t i = 0; i < in.size(); ++i) {
        if (in[i] > T(0)) {
          r.out[i] = in[i];
          r.aux.relu_mask.set(i, true);
        }
      }
      return r;
    }

    case LayerKind::pool: {
      const i64 B = static_cast<i64>(in.dim(0));
      const i64 C = static_cast<i64>(in.dim(1));
      const i64 H = static_cast<i64>(in.dim(2));
      const i64 W = static_cast<i64>(in.dim(3));
      const i64 Ho = static_cast<i64>(out_shape[2]);
      const i64 Wo = static_cast<i64>(out_shape[3]);
      const i64 k = spec.pool_k, s = spec.pool_stride;
      r.out = TensorT<T>(out_shape);
      const bool is_max = spec.pool_mode == PoolMode::max;
      if (is_max) r.aux.argmax.resize(static_cast<std::size_t>(B * C * Ho * Wo));
      const T* pin = in.ptr();
      T* pout = r.out.ptr();
#pragma omp parallel for schedule(static)
      for (i64 bc = 0; bc < B * C; ++bc) {
        const T* plane = pin + bc * H * W;
        T* oplane = pout + bc * Ho * Wo;
        for (i64 y = 0; y < Ho; ++y) {
          for (i64 x = 0; x < Wo; ++x) {
            if (is_max) {
              i64 best = (y * s) * W + (x * s);
              T bv = plane[best];
              for (i64 ky = 0; ky < k; ++ky)
                for (i64 kx = 0; kx < k; ++kx) {
                  const i64 off = (y * s + ky) * W + (x * s + kx);
                  if (plane[off] > bv) {
                    bv = plane[off];
                    best = off;
                  }
                }
              oplane[y * Wo + x] = bv;
              r.aux.argmax[static_cast<std::size_t>(bc * Ho * Wo + y * Wo + x)] =
                  static_cast<std::int32_t>(best);
            } else {
              T acc = T(0);
              for (i64 ky = 0; ky < k; ++ky)
                for (i64 kx = 0; kx < k; ++kx)
                  acc += plane[(y * s + ky) * W + (x * s + kx)];
              oplane[y * Wo + x] = acc / static_cast<T>(k * k);
            }
          }
        }
      }
      return r;
    }

    case LayerKind::softmax: {
      const std::size_t B = in.dim(0), C = in.dim(1);
      r.out = TensorT<T>(in.shape());
      for (std::size_t b = 0; b < B; ++b) {
        const T* z = in.ptr() + b * C;
        T* p = r.out.ptr() + b * C;
        T m = z[0];
        for (std::size_t c = 1; c < C; ++c) m = std::max(m, z[c]);
        T sum = T(0);
        for (std::size_t c = 0; c < C; ++c) {
          p[c] = std::exp(z[c] - m);
          sum += p[c];
        }
        for (std::size_t c = 0; c < C; ++c) p[c] /= sum;
      }
      r.aux.probs = r.out;
      return r;
    }
  }
  throw std::invalid_argument("unknown layer kind");
}

template <typename T>
struct LayerBackward {
  TensorT<T> dinput;
  LayerGrads<T> grads;
  bool has_grads = false;
};

// record supplies the (possibly pruned) cached input for parametric layers
// and the sign mask for relu. in_shape is the forward-time input shape.
template <typename T>
LayerBackward<T> layer_backward(const LayerSpec& spec,
                                const LayerParams<T>& params,
                                const ActivationRecordT<T>& record,
                                const LayerAux<T>& aux, const TensorT<T>& dout,
                                const std::vector<std::size_t>& in_shape,
                                bool want_dinput, bool want_dparams) {
  using i64 = kernels::i64;
  using Kind = typename ActivationRecordT<T>::Kind;
  LayerBackward<T> r;

  auto cached = [&]() -> TensorT<T> {
    if (record.kind != Kind::dense && record.kind != Kind::sparse)
      throw std::invalid_argument(
          std::string("backward: missing activation record for layer kind ") +
          layer_kind_name(spec.kind));
    return record_tensor(record);
  };

  switch (spec.kind) {
    case LayerKind::linear: {
      const std::size_t B = dout.dim(0);
      if (want_dparams) {
        TensorT<T> a =
            cached().reshaped({B, static_cast<std::size_t>(spec.in_features)});
        r.grads.weight =
            TensorT<T>({static_cast<std::size_t>(spec.out_features),
                        static_cast<std::size_t>(spec.in_features)});
        kernels::matmul_tn(dout.ptr(), a.ptr(), r.grads.weight.ptr(),
                           spec.out_features, static_cast<i64>(B),
                           spec.in_features);
        r.grads.bias =
            TensorT<T>({static_cast<std::size_t>(spec.out_features)});
        for (std::size_t b = 0; b < B; ++b)
          for (int j = 0; j < spec.out_features; ++j)
            r.grads.bias[j] += dout[b * spec.out_features + j];
        r.has_grads = true;
      }
      if (want_dinput) {
        TensorT<T> flat({B, static_cast<std::size_t>(spec.in_features)});
        kernels::matmul(dout.ptr(), params.weight.ptr(), flat.ptr(),
                        static_cast<i64>(B), spec.out_features,
                        spec.in_features);
        r.dinput = flat.reshaped(in_shape);
      }
      return r;
    }

    case LayerKind::conv2d: {
      const i64 B = static_cast<i64>(in_shape[0]);
      const i64 H = static_cast<i64>(in_shape[2]);
      const i64 W = static_cast<i64>(in_shape[3]);
      const i64 Ho = static_cast<i64>(dout.dim(2));
      const i64 Wo = static_cast<i64>(dout.dim(3));
      if (want_dparams) {
        TensorT<T> a = cached();
        r.grads.weight = TensorT<T>({static_cast<std::size_t>(spec.out_ch),
                                     static_cast<std::size_t>(spec.in_ch),
                                     static_cast<std::size_t>(spec.kernel),
                                     static_cast<std::size_t>(spec.kernel)});
        r.grads.bias = TensorT<T>({static_cast<std::size_t>(spec.out_ch)});
        kernels::conv2d_backward_weights(
            a.ptr(), dout.ptr(), r.grads.weight.ptr(), r.grads.bias.ptr(), B,
            spec.in_ch, H, W, spec.out_ch, spec.kernel, spec.stride, spec.pad,
            Ho, Wo);
        r.has_grads = true;
      }
      if (want_dinput) {
        r.dinput = TensorT<T>(in_shape);
        kernels::conv2d_backward_input(dout.ptr(), params.weight.ptr(),
                                       r.dinput.ptr(), B, spec.in_ch, H, W,
                                       spec.out_ch, spec.kernel, spec.stride,
                                       spec.pad, Ho, Wo);
      }
      return r;
    }

    case LayerKind::batchnorm: {
      // The scale gradient and the batch-statistic part of the input
      // gradient use the cached (possibly sparse-reconstructed) input; the
      // per-channel statistics in aux are exact. With pure running
      // statistics (blend 0) and no parameter gradient wanted, the layer is
      // affine and no cached input is needed at all.
      const i64 B = static_cast<i64>(in_shape[0]);
      const i64 C = spec.channels;
      const i64 HW = static_cast<i64>(in_shape[2] * in_shape[3]);
      const i64 n = B * HW;
      const T a = static_cast<T>(aux.bn.blend);
      const bool needs_input = want_dparams || a > T(0);
      TensorT<T> x;
      if (needs_input) x = cached();
      if (want_dparams) {
        r.grads.weight = TensorT<T>({static_cast<std::size_t>(C)});
        r.grads.bias = TensorT<T>({static_cast<std::size_t>(C)});
        r.has_grads = true;
      }
      if (want_dinput) r.dinput = TensorT<T>(in_shape);
      const T* px = x.ptr();
      const T* pdy = dout.ptr();
#pragma omp parallel for schedule(static)
      for (i64 c = 0; c < C; ++c) {
        const T mean_use = aux.bn.mean_use[c];
        const T inv_std = aux.bn.inv_std[c];
        const T mean_b = aux.bn.mean_batch[c];
        T s1 = T(0), s2 = T(0);
        if (needs_input) {
          for (i64 b = 0; b < B; ++b) {
            const T* xr = px + (b * C + c) * HW;
            const T* dr = pdy + (b * C + c) * HW;
            for (i64 i = 0; i < HW; ++i) {
              s1 += dr[i];
              s2 += dr[i] * (xr[i] - mean_use) * inv_std;
            }
          }
        }
        if (want_dparams) {
          r.grads.weight[c] = s2;
          r.grads.bias[c] = s1;
        }
        if (want_dinput) {
          const T g = params.weight[c] * inv_std;
          T* di = r.dinput.ptr();
          if (a > T(0)) {
            const T an = a / static_cast<T>(n);
            const T shift = (mean_use - mean_b) * inv_std;
            for (i64 b = 0; b < B; ++b) {
              const T* xr = px + (b * C + c) * HW;
              const T* dr = pdy + (b * C + c) * HW;
              T* dd = di + (b * C + c) * HW;
              for (i64 i = 0; i < HW; ++i) {
                const T xhat = (xr[i] - mean_use) * inv_std;
                const T u = xhat + shift;
                dd[i] = g * (dr[i] - an * s1 - an * u * s2);
              }
            }
          } else {
            for (i64 b = 0; b < B; ++b) {
              const T* dr = pdy + (b * C + c) * HW;
              T* dd = di + (b * C + c) * HW;
              for (i64 i = 0; i < HW; ++i) dd[i] = g * dr[i];
            }
          }
        }
      }
      return r;
    }

    case LayerKind::relu: {
      if (!want_dinput) return r;
      if (record.kind != Kind::mask_only)
        throw std::invalid_argument("backward: relu needs its sign mask");
      r.dinput = TensorT<T>(in_shape);
      for (std::size_t i = 0; i < dout.size(); ++i)
        if (record.mask.get(i)) r.dinput[i] = dout[i];
      return r;
    }

    case LayerKind::pool: {
      if (!want_dinput) return r;
      const i64 B = static_cast<i64>(in_shape[0]);
      const i64 C = static_cast<i64>(in_shape[1]);
      const i64 H = static_cast<i64>(in_shape[2]);
      const i64 W = static_cast<i64>(in_shape[3]);
      const i64 Ho = static_cast<i64>(dout.dim(2));
      const i64 Wo = static_cast<i64>(dout.dim(3));
      r.dinput = TensorT<T>(in_shape);
      T* pd = r.dinput.ptr();
      const T* pdy = dout.ptr();
      if (spec.pool_mode == PoolMode::max) {
#pragma omp parallel for schedule(static)
        for (i64 bc = 0; bc < B * C; ++bc) {
          T* plane = pd + bc * H * W;
          const T* drow = pdy + bc * Ho * Wo;
          for (i64 i = 0; i < Ho * Wo; ++i)
            plane[aux.argmax[static_cast<std::size_t>(bc * Ho * Wo + i)]] +=
                drow[i];
        }
      } else {
        const i64 k = spec.pool_k, s = spec.pool_stride;
        const T inv = T(1) / static_cast<T>(k * k);
#pragma omp parallel for schedule(static)
        for (i64 bc = 0; bc < B * C; ++bc) {
          T* plane = pd + bc * H * W;
          const T* drow = pdy + bc * Ho * Wo;
          for (i64 y = 0; y < Ho; ++y)
            for (i64 x = 0; x < Wo; ++x) {
              const T v = drow[y * Wo + x] * inv;
              for (i64 ky = 0; ky < k; ++ky)
                for (i64 kx = 0; kx < k; ++kx)
                  plane[(y * s + ky) * W + (x * s + kx)] += v;
            }
        }
      }
      return r;
    }

    case LayerKind::softmax: {
      if (!want_dinput) return r;
      const std::size_t B = dout.dim(0), C = dout.dim(1);
      r.dinput = TensorT<T>(in_shape);
      for (std::size_t b = 0; b < B; ++b) {
        const T* p = aux.probs.ptr() + b * C;
        const T* dy = dout.ptr() + b * C;
        T dot = T(0);
        for (std::size_t c = 0; c < C; ++c) dot += dy[c] * p[c];
        for (std::size_t c = 0; c < C; ++c)
          r.dinput[b * C + c] = p[c] * (dy[c] - dot);
      }
      return r;
    }
  }
  throw std::invalid_argument("unknown layer kind");
}

}  // namespace surgeon
