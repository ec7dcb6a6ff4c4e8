// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "surgeon/autograd.hpp"
#include "surgeon/losses.hpp"
#include "surgeon/model.hpp"
#include "surgeon/rng.hpp"

namespace surgeon {

// Controls the extra forward-backward pass that measures layer importance:
// a small random subset of the batch under a high global static pruning
// ratio, so the pre-pass never dominates peak memory.
struct PrePassConfig {
  int subset_size = 0;        // 0 = default rule max(1, batch / 8)
  double prune_ratio = 0.9;   // global static ratio during the pre-pass
  std::uint64_t rng_seed = 0;
  bool include_bias = false;  // count bias gradients into G
  // Log base for the reported M column; 0 = natural log. The base rescales
  // M by a constant that max-normalization cancels, so the schedule is
  // computed base-independently and only the report changes.
  double report_log_base = 0.0;

  int resolved_subset(int batch) const {
    return subset_size > 0 ? subset_size : std::max(1, batch / 8);
  }
};

// Per-layer RMS of the scalar weight gradients. Biases are excluded unless
// asked for. Accumulation is in double regardless of the model dtype.
template <typename T>
std::vector<double> gradient_importance(const GradientSet<T>& grads,
                                        bool include_bias = false) {
  if (grads.empty())
    throw std::invalid_argument("gradient_importance: empty gradient set");
  std::vector<double> out;
  out.reserve(grads.size());
  for (const auto& [id, g] : grads) {
    if (g.weight.size() == 0)
      throw std::invalid_argument(
          "gradient_importance: layer " + std::to_string(id) +
          " has an empty weight gradient");
    double sum = 0.0;
    std::size_t n = g.weight.size();
    for (std::size_t j = 0; j < g.weight.size(); ++j) {
      const double v = static_cast<double>(g.weight[j]);
      sum += v * v;
    }
    if (include_bias) {
      n += g.bias.size();
      for (std::size_t j = 0; j < g.bias.size(); ++j) {
        const double v = static_cast<double>(g.bias[j]);
        sum += v * v;
      }
    }
    out.push_back(std::sqrt(sum / static_cast<double>(n)));
  }
  return out;
}

// M_i = -log(m_i / sum m), natural log. The log base only rescales M by a
// constant, which max-normalization cancels, so reports in another base are
// derived from the natural-log values (see memory_importance_in_base).
inline std::vector<double> memory_importance(const std::vector<double>& sizes) {
  if (sizes.empty())
    throw std::invalid_argument("memory_importance: empty size list");
  double total = 0.0;
  for (double m : sizes) {
    if (!(m > 0.0))
      throw std::invalid_argument(
          "memory_importance: sizes must be positive, got " +
          std::to_string(m));
    total += m;
  }
  std::vector<double> out;
  out.reserve(sizes.size());
  for (double m : sizes) out.push_back(-std::log(m / total));
  return out;
}

inline std::vector<double> memory_importance_in_base(
    const std::vector<double>& sizes, double base) {
  if (!(base > 0.0) || base == 1.0)
    throw std::invalid_argument("memory_importance: invalid log base");
  auto out = memory_importance(sizes);
  const double k = std::log(base);
  for (double& v : out) v /= k;
  return out;
}

// I_i = Norm(M_i) * Norm(G_i) with divide-by-max normalization. An all-zero
// G (or M) normalizes to all ones so the other metric decides alone.
inline std::vector<double> combine_importance(const std::vector<double>& G,
                                              const std::vector<double>& M) {
  if (G.size() != M.size())
    throw std::invalid_argument("combine_importance: length mismatch (" +
                                std::to_string(G.size()) + " vs " +
                                std::to_string(M.size()) + ")");
  double gmax = 0.0, mmax = 0.0;
  for (double g : G) gmax = std::max(gmax, g);
  for (double m : M) mmax = std::max(mmax, m);
  std::vector<double> I(G.size());
  for (std::size_t i = 0; i < G.size(); ++i) {
    const double ng = gmax > 0.0 ? G[i] / gmax : 1.0;
    const double nm = mmax > 0.0 ? M[i] / mmax : 1.0;
    I[i] = nm * ng;
  }
  return I;
}

// p_i = 1 - I_i / max(I).
inline PruningSchedule pruning_ratios(const std::vector<double>& I) {
  double imax = 0.0;
  for (double v : I) imax = std::max(imax, v);
  if (!(imax > 0.0))
    throw std::invalid_argument(
        "pruning_ratios: all-zero importance (degenerate batch)");
  PruningSchedule s;
  s.ratios.reserve(I.size());
  for (double v : I) s.ratios.push_back(1.0 - v / imax);
  return s;
}

struct ImportanceRow {
  int layer_id = -1;
  double G = 0.0;
  double m = 0.0;  // activation element count at the adaptation batch size
  double M = 0.0;  // natural log
  double I = 0.0;  // max-normalized, in [0, 1], max row = 1
  double p = 0.0;
};

struct ImportanceReport {
  int batch_index = 0;
  std::vector<ImportanceRow> rows;
  PrePassConfig config;
  bool degenerate = false;  // all-zero importance; fell back to no pruning
  std::size_t cached_bytes = 0;  // pre-pass tape cost
  std::size_t peak_bytes = 0;

  PruningSchedule schedule() const {
    PruningSchedule s;
    for (const auto& r : rows) s.ratios.push_back(r.p);
    return s;
  }
};

namespace detail {

inline void fill_schedule(ImportanceReport& rep, const std::vector<double>& G,
                          const std::vector<double>& m_sizes,
                          double report_log_base) {
  const auto M = memory_importance(m_sizes);
  const auto I = combine_importance(G, M);
  double imax = 0.0;
  for (double v : I) imax = std::max(imax, v);
  const double base_k =
      report_log_base > 0.0 && report_log_base != 1.0
          ? std::log(report_log_base)
          : 1.0;
  for (std::size_t i = 0; i < I.size(); ++i) {
    auto& row = rep.rows[i];
    row.G = G[i];
    row.m = m_sizes[i];
    row.M = M[i] / base_k;
    if (imax > 0.0) {
      row.I = I[i] / imax;
      row.p = 1.0 - I[i] / imax;
    } else {
      row.I = 1.0;
      row.p = 0.0;
      rep.degenerate = true;
    }
  }
}

}  // namespace detail

// The additional forward-backward of the workflow: draw a seeded subset of
// the batch, run it under the heavy static policy, and turn the resulting
// gradients plus full-batch activation sizes into the pruning schedule.
// Never updates parameters or statistics.
template <typename T>
ImportanceReport importance_prepass(const ModelStateT<T>& model,
                                    const TensorT<T>& batch,
                                    const PrePassConfig& cfg,
                                    const LossFn<T>& loss,
                                    int batch_index = 0,
                                    const std::set<int>& frozen = {},
                                    const ForwardOptions& opts = {}) {
  if (batch.rank() < 1 || batch.dim(0) == 0)
    throw std::invalid_argument("importance_prepass: empty batch");
  const int B = static_cast<int>(batch.dim(0));
  const int k = cfg.resolved_subset(B);
  if (k > B)
    throw std::invalid_argument("importance_prepass: subset size " +
                                std::to_string(k) + " larger than batch " +
                                std::to_string(B));

  // Seeded draw without replacement, presented in ascending batch order.
  Rng rng = Rng::derive(cfg.rng_seed, static_cast<std::uint64_t>(batch_index));
  auto perm = rng.permutation(static_cast<std::uint32_t>(B));
  std::vector<std::uint32_t> pick(perm.begin(), perm.begin() + k);
  std::sort(pick.begin(), pick.end());

  const std::size_t row = batch.size() / static_cast<std::size_t>(B);
  std::vector<std::size_t> sub_shape = batch.shape();
  sub_shape[0] = static_cast<std::size_t>(k);
  TensorT<T> subset(sub_shape);
  for (int i = 0; i < k; ++i)
    std::copy(batch.ptr() + pick[i] * row, batch.ptr() + (pick[i] + 1) * row,
              subset.ptr() + static_cast<std::size_t>(i) * row);

  CachePolicy policy = CachePolicy::static_p(cfg.prune_ratio);
  policy.frozen = frozen;
  auto fw = forward(model, subset, policy, nullptr, opts);
  auto grads = backward(fw.tape, model, loss.grad(fw.output));

  ImportanceReport rep;
  rep.batch_index = batch_index;
  rep.config = cfg;
  rep.cached_bytes = fw.tape.stored_bytes;
  rep.peak_bytes = fw.tape.peak_bytes;

  std::vector<double> G = gradient_importance(grads, cfg.include_bias);
  std::vector<double> m_sizes;
  for (const auto& node : fw.tape.nodes) {
    const LayerSpec& spec = model.spec_by_id(node.layer_id);
    if (!spec.prunable() || frozen.count(node.layer_id)) continue;
    const std::size_t per_sample =
        shape_numel(node.in_shape) / static_cast<std::size_t>(k);
    m_sizes.push_back(static_cast<double>(per_sample) *
                      static_cast<double>(B));
    rep.rows.push_back(ImportanceRow{node.layer_id});
  }
  if (G.size() != m_sizes.size())
    throw std::invalid_argument(
        "importance_prepass: gradient/layer bookkeeping mismatch");
  detail::fill_schedule(rep, G, m_sizes, cfg.report_log_base);
  return rep;
}

}  // namespace surgeon
