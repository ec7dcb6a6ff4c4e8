// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include "surgeon/tensor.hpp"

namespace surgeon {

// Row-wise stable softmax for [B, C] logits.
template <typename T>
TensorT<T> softmax_probs(const TensorT<T>& logits) {
  if (logits.rank() != 2)
    throw std::invalid_argument("softmax: expected [B, C] logits, got " +
                                shape_str(logits.shape()));
  const std::size_t B = logits.dim(0), C = logits.dim(1);
  TensorT<T> p(logits.shape());
  for (std::size_t b = 0; b < B; ++b) {
    const T* z = logits.ptr() + b * C;
    T* q = p.ptr() + b * C;
    T m = z[0];
    for (std::size_t c = 1; c < C; ++c) m = std::max(m, z[c]);
    T sum = T(0);
    for (std::size_t c = 0; c < C; ++c) {
      q[c] = std::exp(z[c] - m);
      sum += q[c];
    }
    for (std::size_t c = 0; c < C; ++c) q[c] /= sum;
  }
  return p;
}

// H(softmax(z)) per row, natural log, computed via log-sum-exp.
template <typename T>
std::vector<T> per_sample_entropy(const TensorT<T>& logits) {
  if (logits.rank() != 2)
    throw std::invalid_argument("entropy: expected [B, C] logits");
  if (!logits.all_finite())
    throw std::invalid_argument("entropy: non-finite logits");
  const std::size_t B = logits.dim(0), C = logits.dim(1);
  std::vector<T> h(B);
  for (std::size_t b = 0; b < B; ++b) {
    const T* z = logits.ptr() + b * C;
    T m = z[0];
    for (std::size_t c = 1; c < C; ++c) m = std::max(m, z[c]);
    T sum = T(0);
    for (std::size_t c = 0; c < C; ++c) sum += std::exp(z[c] - m);
    const T lse = m + std::log(sum);
    T acc = T(0);
    for (std::size_t c = 0; c < C; ++c) {
      const T logp = z[c] - lse;
      acc -= std::exp(logp) * logp;
    }
    h[b] = acc;
  }
  return h;
}

// Mean over the batch of the per-sample prediction entropy.
template <typename T>
T entropy_loss(const TensorT<T>& logits) {
  auto h = per_sample_entropy(logits);
  T acc = T(0);
  for (T v : h) acc += v;
  return acc / static_cast<T>(h.size());
}

// d/dz of entropy_loss restricted to the given rows (all rows when empty);
// the mean is taken over the selected rows.
template <typename T>
TensorT<T> entropy_loss_grad(const TensorT<T>& logits,
                             const std::vector<int>& rows = {}) {
  const std::size_t B = logits.dim(0), C = logits.dim(1);
  std::vector<int> sel = rows;
  if (sel.empty())
    for (std::size_t b = 0; b < B; ++b) sel.push_back(static_cast<int>(b));
  TensorT<T> p = softmax_probs(logits);
  auto h = per_sample_entropy(logits);
  TensorT<T> g(logits.shape());
  const T invn = T(1) / static_cast<T>(sel.size());
  for (int b : sel) {
    const T* pb = p.ptr() + static_cast<std::size_t>(b) * C;
    T* gb = g.ptr() + static_cast<std::size_t>(b) * C;
    for (std::size_t c = 0; c < C; ++c) {
      // dH/dz_c = -p_c (log p_c + H)
      const T logp = std::log(pb[c]);
      gb[c] = -pb[c] * (logp + h[static_cast<std::size_t>(b)]) * invn;
    }
  }
  return g;
}

// Mean cross-entropy against integer labels, natural log.
template <typename T>
T cross_entropy_loss(const TensorT<T>& logits, const std::vector<int>& labels) {
  const std::size_t B = logits.dim(0), C = logits.dim(1);
  if (labels.size() != B)
    throw std::invalid_argument("cross_entropy: label count mismatch");
  T acc = T(0);
  for (std::size_t b = 0; b < B; ++b) {
    const T* z = logits.ptr() + b * C;
    T m = z[0];
    for (std::size_t c = 1; c < C; ++c) m = std::max(m, z[c]);
    T sum = T(0);
    for (std::size_t c = 0; c < C; ++c) sum += std::exp(z[c] - m);
    acc -= z[labels[b]] - m - std::log(sum);
  }
  return acc / static_cast<T>(B);
}

template <typename T>
TensorT<T> cross_entropy_grad(const TensorT<T>& logits,
                              const std::vector<int>& labels) {
  const std::size_t B = logits.dim(0), C = logits.dim(1);
  TensorT<T> g = softmax_probs(logits);
  const T invb = T(1) / static_cast<T>(B);
  for (std::size_t b = 0; b < B; ++b) {
    g[b * C + labels[b]] -= T(1);
    for (std::size_t c = 0; c < C; ++c) g[b * C + c] *= invb;
  }
  return g;
}

// Mean cross-entropy of p_aug against p_orig, both probability rows.
// p_orig is treated as a fixed soft label.
template <typename T>
T consistency_loss(const TensorT<T>& p_orig, const TensorT<T>& p_aug) {
  if (!p_orig.same_shape(p_aug) || p_orig.rank() != 2)
    throw std::invalid_argument("consistency: expected matching [B, C] rows");
  const std::size_t B = p_orig.dim(0), C = p_orig.dim(1);
  for (std::size_t b = 0; b < B; ++b) {
    T s1 = T(0), s2 = T(0);
    for (std::size_t c = 0; c < C; ++c) {
      s1 += p_orig[b * C + c];
      s2 += p_aug[b * C + c];
    }
    if (std::abs(static_cast<double>(s1) - 1.0) > 1e-5 ||
        std::abs(static_cast<double>(s2) - 1.0) > 1e-5)
      throw std::invalid_argument(
          "consistency: probability rows not normalized within 1e-5");
  }
  T acc = T(0);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t c = 0; c < C; ++c) {
      const T q = p_orig[b * C + c];
      if (q == T(0)) continue;  // 0 * log(0) := 0
      const T p = p_aug[b * C + c];
      if (p == T(0))
        throw std::invalid_argument(
            "consistency: zero probability under a non-zero target");
      acc -= q * std::log(p);
    }
  }
  return acc / static_cast<T>(B);
}

// Differentiable scalar head over model logits: value plus seed gradient.
template <typename T>
struct LossFn {
  std::function<T(const TensorT<T>&)> value;
  std::function<TensorT<T>(const TensorT<T>&)> grad;
};

template <typename T>
LossFn<T> make_entropy_loss() {
  return {[](const TensorT<T>& z) { return entropy_loss(z); },
          [](const TensorT<T>& z) { return entropy_loss_grad(z); }};
}

template <typename T>
LossFn<T> make_cross_entropy_loss(std::vector<int> labels) {
  auto l1 = labels;
  auto l2 = std::move(labels);
  return {[l1](const TensorT<T>& z) { return cross_entropy_loss(z, l1); },
          [l2](const TensorT<T>& z) { return cross_entropy_grad(z, l2); }};
}

}  // namespace surgeon
