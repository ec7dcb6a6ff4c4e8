// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "surgeon/common.hpp"
#include "surgeon/tensor.hpp"

namespace surgeon {

// Pruned activation stored as the non-zero values plus a 1-bit-per-element
// occupancy index.
template <typename T>
struct SparseActivationT {
  std::vector<T> values;                // kept elements in ascending flat order
  BitVec index;                         // bit j set iff element j != 0
  std::vector<std::size_t> orig_shape;  // shape of the dense tensor
};

using SparseActivation = SparseActivationT<float>;

// Per-layer pruning ratios for one batch, ordered like the prunable layers.
struct PruningSchedule {
  std::vector<double> ratios;
};

// Zero all but the ceil((1-p)*N) largest-magnitude elements. Ties keep the
// lower flat index. p=0 returns the input unchanged; p=1 zeroes everything.
template <typename T>
TensorT<T> prune(const TensorT<T>& a, double p) {
  if (!(p >= 0.0 && p <= 1.0))
    throw std::invalid_argument("prune: ratio " + std::to_string(p) +
                                " outside [0, 1]");
  const std::size_t n = a.size();
  if (p == 0.0) return a;
  const auto keep =
      static_cast<std::size_t>(std::ceil((1.0 - p) * static_cast<double>(n)));
  if (keep >= n) return a;
  TensorT<T> out(a.shape());
  if (keep == 0) return out;

  std::vector<std::uint32_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  auto by_magnitude = [&](std::uint32_t i, std::uint32_t j) {
    T ai = std::abs(a[i]), aj = std::abs(a[j]);
    if (ai != aj) return ai > aj;
    return i < j;
  };
  std::nth_element(idx.begin(), idx.begin() + (keep - 1), idx.end(),
                   by_magnitude);
  for (std::size_t r = 0; r < keep; ++r) out[idx[r]] = a[idx[r]];
  return out;
}

template <typename T>
SparseActivationT<T> decompose(const TensorT<T>& pruned) {
  SparseActivationT<T> s;
  s.orig_shape = pruned.shape();
  s.index = BitVec(pruned.size());
  for (std::size_t i = 0; i < pruned.size(); ++i) {
    if (pruned[i] != T(0)) {
      s.values.push_back(pruned[i]);
      s.index.set(i, true);
    }
  }
  return s;
}

template <typename T>
TensorT<T> reconstruct(const SparseActivationT<T>& s) {
  if (s.index.size() != shape_numel(s.orig_shape))
    throw std::invalid_argument("reconstruct: index has " +
                                std::to_string(s.index.size()) +
                                " bits but shape " + shape_str(s.orig_shape) +
                                " has " +
                                std::to_string(shape_numel(s.orig_shape)) +
                                " elements");
  if (s.index.popcount() != s.values.size())
    throw std::invalid_argument("reconstruct: index popcount " +
                                std::to_string(s.index.popcount()) +
                                " != value count " +
                                std::to_string(s.values.size()));
  TensorT<T> out(s.orig_shape);
  std::size_t v = 0;
  for (std::size_t i = 0; i < out.size(); ++i)
    if (s.index.get(i)) out[i] = s.values[v++];
  return out;
}

// Byte-cost formulas for the cache metric. Activations are 32-bit floats
// regardless of the compute dtype used for oracle runs.
inline std::size_t dense_bytes(std::size_t n) { return 4 * n; }
inline std::size_t sparse_bytes(std::size_t n, std::size_t kept) {
  return 4 * kept + (n + 7) / 8;
}
inline std::size_t mask_bytes(std::size_t n) { return (n + 7) / 8; }

// What a layer caches for backward.
template <typename T>
struct ActivationRecordT {
  enum class Kind { absent, dense, sparse, mask_only, recompute };

  Kind kind = Kind::absent;
  TensorT<T> dense;           // Kind::dense
  SparseActivationT<T> sparse;  // Kind::sparse
  BitVec mask;                // Kind::mask_only
  int recompute_anchor = -1;  // Kind::recompute: tape index of the anchor node

  static ActivationRecordT absent() { return {}; }
  static ActivationRecordT make_dense(TensorT<T> t) {
    ActivationRecordT r;
    r.kind = Kind::dense;
    r.dense = std::move(t);
    return r;
  }
  static ActivationRecordT make_sparse(SparseActivationT<T> s) {
    ActivationRecordT r;
    r.kind = Kind::sparse;
    r.sparse = std::move(s);
    return r;
  }
  static ActivationRecordT make_mask(BitVec m) {
    ActivationRecordT r;
    r.kind = Kind::mask_only;
    r.mask = std::move(m);
    return r;
  }
  static ActivationRecordT make_recompute(int anchor) {
    ActivationRecordT r;
    r.kind = Kind::recompute;
    r.recompute_anchor = anchor;
    return r;
  }
};

using ActivationRecord = ActivationRecordT<float>;

template <typename T>
std::size_t cached_bytes(const ActivationRecordT<T>& rec) {
  using Kind = typename ActivationRecordT<T>::Kind;
  switch (rec.kind) {
    case Kind::dense: return dense_bytes(rec.dense.size());
    case Kind::sparse:
      return sparse_bytes(rec.sparse.index.size(), rec.sparse.values.size());
    case Kind::mask_only: return mask_bytes(rec.mask.size());
    case Kind::recompute:
    case Kind::absent: return 0;
  }
  return 0;
}

// Prune at ratio p and pick the cheaper of sparse and dense storage. The
// stored tensor is always the pruned one, so gradient semantics do not
// depend on the storage format.
template <typename T>
ActivationRecordT<T> make_pruned_record(const TensorT<T>& a, double p) {
  if (p == 0.0) return ActivationRecordT<T>::make_dense(a);
  TensorT<T> pruned = prune(a, p);
  SparseActivationT<T> s = decompose(pruned);
  if (sparse_bytes(s.index.size(), s.values.size()) < dense_bytes(pruned.size()))
    return ActivationRecordT<T>::make_sparse(std::move(s));
  return ActivationRecordT<T>::make_dense(std::move(pruned));
}

// Materialize the cached activation regardless of storage kind.
template <typename T>
TensorT<T> record_tensor(const ActivationRecordT<T>& rec) {
  using Kind = typename ActivationRecordT<T>::Kind;
  if (rec.kind == Kind::dense) return rec.dense;
  if (rec.kind == Kind::sparse) return reconstruct(rec.sparse);
  throw std::invalid_argument("record_tensor: record holds no activation");
}

}  // namespace surgeon
