// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "surgeon/autograd.hpp"
#include "surgeon/data.hpp"
#include "surgeon/importance.hpp"
#include "surgeon/model.hpp"

namespace surgeon {

enum class Method {
  source,
  bn_stat,
  tent,
  full_tuning,
  static_ratio,
  freeze_set,
  gradient_checkpoint,
  surgeon,
  surgeon_bn,
};

const char* method_name(Method m);
Method method_from_name(const std::string& name);

enum class OptimKind { sgd, adam };

struct AdaptationConfig {
  Method method = Method::surgeon;
  double static_p = 0.0;         // static_ratio
  std::set<int> freeze;          // freeze_set
  OptimKind optimizer = OptimKind::sgd;
  double lr = 1e-4;
  double momentum = 0.9;
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  PrePassConfig prepass;         // surgeon / surgeon-bn
  bool css = false;
  double css_threshold = 0.0;    // 0 = default 0.4 * ln(classes)
  bool cr = false;
  double cr_lambda = 1.0;
  double bn_blend = 1.0;         // batchnorm batch/running statistic mix
  std::uint64_t seed = 0;
  // Diagnostic: run the dynamic policy with every ratio forced to zero.
  bool force_zero_schedule = false;

  bool runs_backward() const {
    return method != Method::source && method != Method::bn_stat;
  }
  bool runs_prepass() const {
    return method == Method::surgeon || method == Method::surgeon_bn;
  }
  double resolved_css_threshold(int classes) const;
};

struct BatchOutcome {
  int t = 0;
  int segment = 0;
  std::vector<int> predictions;
  int correct = 0;
  double loss = 0.0;
  // Tape records of the adaptation step (main + CR tape) plus pre-pass.
  std::size_t cached_bytes = 0;
  std::map<int, std::size_t> per_layer_bytes;
  std::size_t prepass_bytes = 0;
  std::size_t prepass_peak_bytes = 0;
  std::size_t adapt_peak_bytes = 0;
  std::size_t peak_bytes = 0;  // max(prepass, adaptation step)
  int skipped = 0;             // samples CSS dropped from the update
  bool update_applied = false;
  std::vector<double> schedule;
  std::optional<ImportanceReport> importance;
  long long flops = 0;  // analytic count of work actually executed
};

struct OptimizerState {
  std::map<int, LayerGrads<float>> momentum;
  std::map<int, LayerGrads<float>> adam_m, adam_v;
  long long step = 0;
};

// SGD: buf <- momentum * buf + g; w <- w - lr * buf. Adam with standard
// bias correction. Only layers present in grads change.
void optimizer_step(ModelState& model, const GradientSet<float>& grads,
                    const AdaptationConfig& cfg, OptimizerState& state);

// Keep sample b iff H(softmax(logits_b)) < threshold.
std::vector<int> css_filter(const Tensor& logits, double threshold);

// Deterministic consistency augmentation: horizontal flip plus seeded
// gaussian pixel noise (sigma 0.02), clamped to [0, 1].
Tensor augment_batch(const Tensor& images, std::uint64_t seed, int batch_index);

struct AdaptResult {
  ModelState model;
  std::vector<BatchOutcome> outcomes;
};

// Online adaptation over the stream; model state carries across batches and
// is never reset.
AdaptResult adapt_stream(const ModelState& model, const Stream& stream,
                         const AdaptationConfig& cfg);

}  // namespace surgeon
