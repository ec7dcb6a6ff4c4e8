// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "surgeon/autograd.hpp"
#include "surgeon/data.hpp"
#include "surgeon/losses.hpp"
#include "surgeon/model.hpp"

namespace surgeon {

// Predictions (argmax logits, ties to the lower class) for one batch.
template <typename T>
std::vector<int> predict(const TensorT<T>& logits) {
  const std::size_t B = logits.dim(0), C = logits.dim(1);
  std::vector<int> out(B);
  for (std::size_t b = 0; b < B; ++b) {
    const T* z = logits.ptr() + b * C;
    int best = 0;
    for (std::size_t c = 1; c < C; ++c)
      if (z[c] > z[best]) best = static_cast<int>(c);
    out[b] = best;
  }
  return out;
}

// Eval-mode forward (running statistics) over a dataset; returns plain error.
inline double eval_error(const ModelState& model, const Dataset& data,
                         int batch_size = 64) {
  ForwardOptions opts;
  opts.bn_blend = 0.0;
  int wrong = 0, total = 0;
  const int n = data.size();
  for (int off = 0; off < n; off += batch_size) {
    std::vector<std::uint32_t> idx;
    for (int j = off; j < std::min(n, off + batch_size); ++j)
      idx.push_back(static_cast<std::uint32_t>(j));
    Batch b = make_batch(data, idx);
    auto fw = forward(model, b.images, CachePolicy::freeze_all(model), nullptr,
                      opts);
    auto preds = predict(fw.output);
    for (std::size_t j = 0; j < preds.size(); ++j) {
      if (preds[j] != b.labels[j]) ++wrong;
      ++total;
    }
  }
  return static_cast<double>(wrong) / static_cast<double>(total);
}

inline void apply_bn_refresh(
    ModelState& model,
    const std::map<int, std::pair<std::vector<float>, std::vector<float>>>&
        stats,
    double momentum = kBnMomentum) {
  for (const auto& [id, mv] : stats) {
    auto& p = model.params_by_id(id);
    const auto m = static_cast<float>(momentum);
    for (std::size_t c = 0; c < p.running_mean.size(); ++c) {
      p.running_mean[c] = (1.0f - m) * p.running_mean[c] + m * mv.first[c];
      p.running_var[c] = (1.0f - m) * p.running_var[c] + m * mv.second[c];
    }
  }
}

// Source training: plain SGD on cross-entropy with current-batch BN
// statistics, refreshing the running statistics each step. Deterministic
// given the seed. Batches that would be smaller than batch_size are dropped.
inline ModelState train_source(ModelState model, const Dataset& data,
                               int epochs, double lr, std::uint64_t seed,
                               int batch_size = 32,
                               std::vector<double>* batch_losses = nullptr) {
  if (data.size() == 0)
    throw std::invalid_argument("train_source: empty dataset");
  const int n = data.size();
  ForwardOptions opts;  // bn_blend = 1: batch statistics
  for (int epoch = 0; epoch < epochs; ++epoch) {
    Rng rng = Rng::derive(seed, 0x747261696eULL + static_cast<std::uint64_t>(epoch));
    auto perm = rng.permutation(static_cast<std::uint32_t>(n));
    for (int off = 0; off + batch_size <= n; off += batch_size) {
      std::vector<std::uint32_t> idx(perm.begin() + off,
                                     perm.begin() + off + batch_size);
      Batch b = make_batch(data, idx);
      auto fw = forward(model, b.images, CachePolicy::full_caching(), nullptr,
                        opts);
      const double loss =
          static_cast<double>(cross_entropy_loss(fw.output, b.labels));
      if (batch_losses) batch_losses->push_back(loss);
      auto grads =
          backward(fw.tape, model, cross_entropy_grad(fw.output, b.labels));
      for (auto& [id, g] : grads) {
        auto& p = model.params_by_id(id);
        const auto a = static_cast<float>(lr);
        for (std::size_t j = 0; j < p.weight.size(); ++j)
          p.weight[j] -= a * g.weight[j];
        for (std::size_t j = 0; j < p.bias.size(); ++j)
          p.bias[j] -= a * g.bias[j];
      }
      apply_bn_refresh(model, fw.bn_batch_stats);
    }
  }
  model.meta.epochs += static_cast<std::uint32_t>(epochs);
  model.meta.dataset_fingerprint = data.fingerprint();
  return model;
}

}  // namespace surgeon
