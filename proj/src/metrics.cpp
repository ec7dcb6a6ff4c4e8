// SPDX-License-Identifier: Apache-2.0
#include "surgeon/metrics.hpp"

#include <algorithm>
#include <stdexcept>

#include "surgeon/layers.hpp"
#include "surgeon/sparsity.hpp"

namespace surgeon {

OnlineError online_error(const std::vector<int>& predictions,
                         const std::vector<int>& labels,
                         const std::vector<int>& segment_start_sample,
                         int classes) {
  if (predictions.size() != labels.size())
    throw std::invalid_argument("online_error: prediction/label length mismatch");
  if (segment_start_sample.empty() || segment_start_sample[0] != 0)
    throw std::invalid_argument("online_error: segment starts must begin at 0");

  OnlineError out;
  const int n = static_cast<int>(labels.size());
  for (std::size_t s = 0; s < segment_start_sample.size(); ++s) {
    const int lo = segment_start_sample[s];
    const int hi = s + 1 < segment_start_sample.size()
                       ? segment_start_sample[s + 1]
                       : n;
    if (lo >= hi)
      throw std::invalid_argument("online_error: empty segment " +
                                  std::to_string(s));
    double acc = 0.0;
    int present = 0;
    for (int c = 0; c < classes; ++c) {
      int total = 0, wrong = 0;
      for (int i = lo; i < hi; ++i) {
        if (labels[i] != c) continue;
        ++total;
        if (predictions[i] != c) ++wrong;
      }
      if (total == 0) {
        out.warnings.push_back("class " + std::to_string(c) +
                               " absent from segment " + std::to_string(s) +
                               "; excluded from its average");
        continue;
      }
      acc += static_cast<double>(wrong) / static_cast<double>(total);
      ++present;
    }
    if (present == 0)
      throw std::invalid_argument("online_error: no classes present in segment " +
                                  std::to_string(s));
    out.per_segment.push_back(100.0 * acc / static_cast<double>(present));
  }
  double mean = 0.0;
  for (double v : out.per_segment) mean += v;
  out.mean = mean / static_cast<double>(out.per_segment.size());
  return out;
}

double plain_error(const std::vector<int>& predictions,
                   const std::vector<int>& labels) {
  if (predictions.size() != labels.size() || predictions.empty())
    throw std::invalid_argument("plain_error: bad input lengths");
  int wrong = 0;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (predictions[i] != labels[i]) ++wrong;
  return 100.0 * static_cast<double>(wrong) /
         static_cast<double>(labels.size());
}

namespace {

std::vector<long long> per_layer_forward_flops(
    const ModelState& model, const std::vector<std::size_t>& sample_shape) {
  std::vector<std::size_t> shape;
  shape.push_back(1);
  shape.insert(shape.end(), sample_shape.begin(), sample_shape.end());
  std::vector<long long> flops;
  for (const auto& spec : model.layers) {
    flops.push_back(layer_forward_flops(spec, shape));
    shape = layer_out_shape(spec, shape);
  }
  return flops;
}

std::set<int> updated_layers(const ModelState& model,
                             const AdaptationConfig& cfg) {
  std::set<int> u;
  if (!cfg.runs_backward()) return u;
  for (const auto& l : model.layers) {
    if (!l.parametric()) continue;
    const bool bn = l.kind == LayerKind::batchnorm;
    switch (cfg.method) {
      case Method::tent:
      case Method::surgeon_bn:
        if (bn) u.insert(l.id);
        break;
      case Method::freeze_set:
        if (!cfg.freeze.count(l.id)) u.insert(l.id);
        break;
      default:
        u.insert(l.id);
        break;
    }
  }
  return u;
}

}  // namespace

FlopsBreakdown flops_estimate(const ModelState& model, int batch_size,
                              const AdaptationConfig& cfg,
                              const std::vector<std::size_t>& sample_shape) {
  if (batch_size < 1)
    throw std::invalid_argument("flops_estimate: batch size must be positive");
  const auto fwd = per_layer_forward_flops(model, sample_shape);
  FlopsBreakdown out;
  for (long long f : fwd) out.forward += f;

  const auto updated = updated_layers(model, cfg);
  long long fwd_updated = 0;
  for (const auto& l : model.layers)
    if (updated.count(l.id)) fwd_updated += fwd[static_cast<std::size_t>(l.id)];
  out.backward = 2 * fwd_updated;

  if (cfg.runs_prepass()) {
    const double frac =
        static_cast<double>(cfg.prepass.resolved_subset(batch_size)) /
        static_cast<double>(batch_size);
    // The pre-pass backward covers every prunable layer regardless of which
    // layers the method later updates.
    long long fwd_prunable = 0;
    for (const auto& l : model.layers)
      if (l.prunable()) fwd_prunable += fwd[static_cast<std::size_t>(l.id)];
    out.prepass = static_cast<long long>(
        frac * static_cast<double>(out.forward + 2 * fwd_prunable));
  }

  if (cfg.method == Method::gradient_checkpoint) {
    const int L = model.num_layers();
    int i = 0;
    while (i < L) {
      int j = i + 1;
      if (model.layers[i].kind == LayerKind::conv2d) {
        while (j < L && (model.layers[j].kind == LayerKind::batchnorm ||
                         model.layers[j].kind == LayerKind::relu))
          ++j;
        if (j - i >= 2)
          for (int k = i; k < j; ++k)
            out.recompute += fwd[static_cast<std::size_t>(k)];
      }
      i = j;
    }
  }

  if (cfg.cr && cfg.runs_backward()) out.cr = out.forward + out.backward;
  return out;
}

FlopsBreakdown flops_estimate(const ModelState& model, int batch_size,
                              const AdaptationConfig& cfg) {
  if (model.meta.in_channels <= 0 || model.meta.image_hw <= 0)
    throw std::invalid_argument(
        "flops_estimate: model carries no input geometry; pass sample_shape");
  return flops_estimate(model, batch_size, cfg,
                        {static_cast<std::size_t>(model.meta.in_channels),
                         static_cast<std::size_t>(model.meta.image_hw),
                         static_cast<std::size_t>(model.meta.image_hw)});
}

std::size_t forward_peak_bytes(const ModelState& model, int batch_size,
                               const std::vector<std::size_t>& sample_shape) {
  std::vector<std::size_t> shape;
  shape.push_back(static_cast<std::size_t>(batch_size));
  shape.insert(shape.end(), sample_shape.begin(), sample_shape.end());
  std::size_t peak = dense_bytes(shape_numel(shape));
  for (const auto& spec : model.layers) {
    shape = layer_out_shape(spec, shape);
    peak = std::max(peak, dense_bytes(shape_numel(shape)));
  }
  return peak;
}

RunReport build_run_report(const ModelState& model, const Stream& stream,
                           const std::vector<BatchOutcome>& outcomes,
                           const AdaptationConfig& cfg) {
  if (outcomes.size() != stream.batches.size())
    throw std::invalid_argument("build_run_report: outcome/batch count mismatch");
  RunReport rep;
  rep.seed = cfg.seed;

  std::vector<int> preds;
  for (const auto& o : outcomes)
    preds.insert(preds.end(), o.predictions.begin(), o.predictions.end());
  const auto labels = stream.all_labels();

  int classes = 0;
  for (int l : labels) classes = std::max(classes, l + 1);
  if (model.meta.classes > 0) classes = std::max(classes, model.meta.classes);

  auto err = online_error(preds, labels, stream.segment_start_sample, classes);
  rep.per_segment_error = err.per_segment;
  rep.mean_online_error = err.mean;
  rep.warnings = err.warnings;
  rep.plain_error_pct = plain_error(preds, labels);

  double cache_sum = 0.0, prepass_sum = 0.0;
  for (const auto& o : outcomes) {
    cache_sum += static_cast<double>(o.cached_bytes);
    prepass_sum += static_cast<double>(o.prepass_bytes);
    rep.peak_cache_bytes = std::max(rep.peak_cache_bytes, o.peak_bytes);
    if (o.importance && o.importance->degenerate)
      rep.warnings.push_back("batch " + std::to_string(o.t) +
                             ": degenerate importance; no pruning applied");
  }
  rep.avg_cache_bytes = cache_sum / static_cast<double>(outcomes.size());
  rep.avg_prepass_bytes = prepass_sum / static_cast<double>(outcomes.size());

  const auto sample_shape = std::vector<std::size_t>(
      stream.batches[0].images.shape().begin() + 1,
      stream.batches[0].images.shape().end());
  const int batch_size = static_cast<int>(stream.batches[0].images.dim(0));
  rep.flops_per_sample = flops_estimate(model, batch_size, cfg, sample_shape);
  rep.forward_peak_bytes = forward_peak_bytes(model, batch_size, sample_shape);
  return rep;
}

}  // namespace surgeon
