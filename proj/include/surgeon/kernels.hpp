// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>

#ifdef _OPENMP
#include <omp.h>
#endif

// Dense compute kernels. The OpenMP variants parallelize over independent
// output elements only; every reduction runs left-to-right inside a single
// thread, so results are bit-identical to kernels::serial for any thread
// count. Tests and the surgeon-bench tool compare the two lanes.

namespace surgeon::kernels {

using i64 = std::int64_t;

namespace serial {

// C[m x n] = A[m x k] * B[k x n]
template <typename T>
void matmul(const T* a, const T* b, T* c, i64 m, i64 k, i64 n) {
  for (i64 i = 0; i < m; ++i) {
    T* row = c + i * n;
    for (i64 j = 0; j < n; ++j) row[j] = T(0);
    for (i64 kk = 0; kk < k; ++kk) {
      T av = a[i * k + kk];
      const T* brow = b + kk * n;
      for (i64 j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
}

// C[m x n] = A[m x k] * B[n x k]^T
template <typename T>
void matmul_nt(const T* a, const T* b, T* c, i64 m, i64 k, i64 n) {
  for (i64 i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    for (i64 j = 0; j < n; ++j) {
      const T* brow = b + j * k;
      T acc = T(0);
      for (i64 kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
      c[i * n + j] = acc;
    }
  }
}

// C[m x n] = A[k x m]^T * B[k x n]
template <typename T>
void matmul_tn(const T* a, const T* b, T* c, i64 m, i64 k, i64 n) {
  for (i64 i = 0; i < m; ++i) {
    T* row = c + i * n;
    for (i64 j = 0; j < n; ++j) row[j] = T(0);
    for (i64 kk = 0; kk < k; ++kk) {
      T av = a[kk * m + i];
      const T* brow = b + kk * n;
      for (i64 j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
}

// in [B,Cin,H,W], w [Cout,Cin,K,K], bias [Cout] or null, out [B,Cout,Ho,Wo].
// Shift-and-accumulate: for each output plane the (ci,kh,kw) contributions
// are added in ascending order, the same order a per-element dot product
// would use.
template <typename T>
void conv2d_forward(const T* in, const T* w, const T* bias, T* out, i64 B,
                    i64 Cin, i64 H, i64 W, i64 Cout, i64 K, i64 stride,
                    i64 pad, i64 Ho, i64 Wo) {
  for (i64 bc = 0; bc < B * Cout; ++bc) {
    const i64 b = bc / Cout, co = bc % Cout;
    T* plane = out + (b * Cout + co) * Ho * Wo;
    const T bv = bias ? bias[co] : T(0);
    for (i64 i = 0; i < Ho * Wo; ++i) plane[i] = bv;
    for (i64 ci = 0; ci < Cin; ++ci) {
      const T* iplane = in + (b * Cin + ci) * H * W;
      for (i64 kh = 0; kh < K; ++kh) {
        for (i64 kw = 0; kw < K; ++kw) {
          const T wv = w[((co * Cin + ci) * K + kh) * K + kw];
          for (i64 y = 0; y < Ho; ++y) {
            const i64 yin = y * stride + kh - pad;
            if (yin < 0 || yin >= H) continue;
            const T* irow = iplane + yin * W;
            T* orow = plane + y * Wo;
            for (i64 x = 0; x < Wo; ++x) {
              const i64 xin = x * stride + kw - pad;
              if (xin < 0 || xin >= W) continue;
              orow[x] += wv * irow[xin];
            }
          }
        }
      }
    }
  }
}

// din [B,Cin,H,W] <- dout [B,Cout,Ho,Wo]
template <typename T>
void conv2d_backward_input(const T* dout, const T* w, T* din, i64 B, i64 Cin,
                           i64 H, i64 W, i64 Cout, i64 K, i64 stride, i64 pad,
                           i64 Ho, i64 Wo) {
  for (i64 bc = 0; bc < B * Cin; ++bc) {
    const i64 b = bc / Cin, ci = bc % Cin;
    T* plane = din + (b * Cin + ci) * H * W;
    for (i64 i = 0; i < H * W; ++i) plane[i] = T(0);
    for (i64 co = 0; co < Cout; ++co) {
      const T* dplane = dout + (b * Cout + co) * Ho * Wo;
      for (i64 kh = 0; kh < K; ++kh) {
        for (i64 kw = 0; kw < K; ++kw) {
          const T wv = w[((co * Cin + ci) * K + kh) * K + kw];
          for (i64 y = 0; y < Ho; ++y) {
            const i64 yin = y * stride + kh - pad;
            if (yin < 0 || yin >= H) continue;
            T* irow = plane + yin * W;
            const T* drow = dplane + y * Wo;
            for (i64 x = 0; x < Wo; ++x) {
              const i64 xin = x * stride + kw - pad;
              if (xin < 0 || xin >= W) continue;
              irow[xin] += wv * drow[x];
            }
          }
        }
      }
    }
  }
}

// dw [Cout,Cin,K,K], dbias [Cout] or null
template <typename T>
void conv2d_backward_weights(const T* in, const T* dout, T* dw, T* dbias,
                             i64 B, i64 Cin, i64 H, i64 W, i64 Cout, i64 K,
                             i64 stride, i64 pad, i64 Ho, i64 Wo) {
  for (i64 co = 0; co < Cout; ++co) {
    for (i64 ci = 0; ci < Cin; ++ci) {
      for (i64 kh = 0; kh < K; ++kh) {
        for (i64 kw = 0; kw < K; ++kw) {
          T acc = T(0);
          for (i64 b = 0; b < B; ++b) {
            const T* iplane = in + (b * Cin + ci) * H * W;
            const T* dplane = dout + (b * Cout + co) * Ho * Wo;
            for (i64 y = 0; y < Ho; ++y) {
              const i64 yin = y * stride + kh - pad;
              if (yin < 0 || yin >= H) continue;
              const T* irow = iplane + yin * W;
              const T* drow = dplane + y * Wo;
              for (i64 x = 0; x < Wo; ++x) {
                const i64 xin = x * stride + kw - pad;
                if (xin < 0 || xin >= W) continue;
                acc += drow[x] * irow[xin];
              }
            }
          }
          dw[((co * Cin + ci) * K + kh) * K + kw] = acc;
        }
      }
    }
    if (dbias) {
      T acc = T(0);
      for (i64 b = 0; b < B; ++b) {
        const T* dplane = dout + (b * Cout + co) * Ho * Wo;
        for (i64 i = 0; i < Ho * Wo; ++i) acc += dplane[i];
      }
      dbias[co] = acc;
    }
  }
}

}  // namespace serial

template <typename T>
void matmul(const T* a, const T* b, T* c, i64 m, i64 k, i64 n) {
#pragma omp parallel for schedule(static)
  for (i64 i = 0; i < m; ++i) {
    T* row = c + i * n;
    for (i64 j = 0; j < n; ++j) row[j] = T(0);
    for (i64 kk = 0; kk < k; ++kk) {
      T av = a[i * k + kk];
      const T* brow = b + kk * n;
      for (i64 j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
}

template <typename T>
void matmul_nt(const T* a, const T* b, T* c, i64 m, i64 k, i64 n) {
#pragma omp parallel for schedule(static)
  for (i64 i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    for (i64 j = 0; j < n; ++j) {
      const T* brow = b + j * k;
      T acc = T(0);
      for (i64 kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
      c[i * n + j] = acc;
    }
  }
}

template <typename T>
void matmul_tn(const T* a, const T* b, T* c, i64 m, i64 k, i64 n) {
#pragma omp parallel for schedule(static)
  for (i64 i = 0; i < m; ++i) {
    T* row = c + i * n;
    for (i64 j = 0; j < n; ++j) row[j] = T(0);
    for (i64 kk = 0; kk < k; ++kk) {
      T av = a[kk * m + i];
      const T* brow = b + kk * n;
      for (i64 j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
}

template <typename T>
void conv2d_forward(const T* in, const T* w, const T* bias, T* out, i64 B,
                    i64 Cin, i64 H, i64 W, i64 Cout, i64 K, i64 stride,
                    i64 pad, i64 Ho, i64 Wo) {
#pragma omp parallel for schedule(static)
  for (i64 bc = 0; bc < B * Cout; ++bc) {
    const i64 b = bc / Cout, co = bc % Cout;
    serial::conv2d_forward(in + b * Cin * H * W, w + co * Cin * K * K,
                           bias ? bias + co : nullptr,
                           out + (b * Cout + co) * Ho * Wo, 1, Cin, H, W, 1, K,
                           stride, pad, Ho, Wo);
  }
}

template <typename T>
void conv2d_backward_input(const T* dout, const T* w, T* din, i64 B, i64 Cin,
                           i64 H, i64 W, i64 Cout, i64 K, i64 stride, i64 pad,
                           i64 Ho, i64 Wo) {
#pragma omp parallel for schedule(static)
  for (i64 bc = 0; bc < B * Cin; ++bc) {
    const i64 b = bc / Cin, ci = bc % Cin;
    T* plane = din + (b * Cin + ci) * H * W;
    for (i64 i = 0; i < H * W; ++i) plane[i] = T(0);
    for (i64 co = 0; co < Cout; ++co) {
      const T* dplane = dout + (b * Cout + co) * Ho * Wo;
      for (i64 kh = 0; kh < K; ++kh) {
        for (i64 kw = 0; kw < K; ++kw) {
          const T wv = w[((co * Cin + ci) * K + kh) * K + kw];
          for (i64 y = 0; y < Ho; ++y) {
            const i64 yin = y * stride + kh - pad;
            if (yin < 0 || yin >= H) continue;
            T* irow = plane + yin * W;
            const T* drow = dplane + y * Wo;
            for (i64 x = 0; x < Wo; ++x) {
              const i64 xin = x * stride + kw - pad;
              if (xin < 0 || xin >= W) continue;
              irow[xin] += wv * drow[x];
            }
          }
        }
      }
    }
  }
}

template <typename T>
void conv2d_backward_weights(const T* in, const T* dout, T* dw, T* dbias,
                             i64 B, i64 Cin, i64 H, i64 W, i64 Cout, i64 K,
                             i64 stride, i64 pad, i64 Ho, i64 Wo) {
#pragma omp parallel for schedule(static)
  for (i64 co = 0; co < Cout; ++co) {
    for (i64 ci = 0; ci < Cin; ++ci) {
      for (i64 kh = 0; kh < K; ++kh) {
        for (i64 kw = 0; kw < K; ++kw) {
          T acc = T(0);
          for (i64 b = 0; b < B; ++b) {
            const T* iplane = in + (b * Cin + ci) * H * W;
            const T* dplane = dout + (b * Cout + co) * Ho * Wo;
            for (i64 y = 0; y < Ho; ++y) {
              const i64 yin = y * stride + kh - pad;
              if (yin < 0 || yin >= H) continue;
              const T* irow = iplane + yin * W;
              const T* drow = dplane + y * Wo;
              for (i64 x = 0; x < Wo; ++x) {
                const i64 xin = x * stride + kw - pad;
                if (xin < 0 || xin >= W) continue;
                acc += drow[x] * irow[xin];
              }
            }
          }
          dw[((co * Cin + ci) * K + kh) * K + kw] = acc;
        }
      }
    }
    if (dbias) {
      T acc = T(0);
      for (i64 b = 0; b < B; ++b) {
        const T* dplane = dout + (b * Cout + co) * Ho * Wo;
        for (i64 i = 0; i < Ho * Wo; ++i) acc += dplane[i];
      }
      dbias[co] = acc;
    }
  }
}

}  // namespace surgeon::kernels
