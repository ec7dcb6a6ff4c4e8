// SPDX-License-Identifier: Apache-2.0
#include "surgeon/adapt.hpp"

#include <cmath>
#include <stdexcept>

#include "surgeon/losses.hpp"
#include "surgeon/metrics.hpp"
#include "surgeon/training.hpp"

namespace surgeon {

const char* method_name(Method m) {
  switch (m) {
    case Method::source: return "source";
    case Method::bn_stat: return "bn-stat";
    case Method::tent: return "tent";
    case Method::full_tuning: return "full-tuning";
    case Method::static_ratio: return "static";
    case Method::freeze_set: return "freeze";
    case Method::gradient_checkpoint: return "gradient-checkpoint";
    case Method::surgeon: return "surgeon";
    case Method::surgeon_bn: return "surgeon-bn";
  }
  return "?";
}

Method method_from_name(const std::string& name) {
  for (Method m : {Method::source, Method::bn_stat, Method::tent,
                   Method::full_tuning, Method::static_ratio,
                   Method::freeze_set, Method::gradient_checkpoint,
                   Method::surgeon, Method::surgeon_bn})
    if (name == method_name(m)) return m;
  throw ConfigError("unknown method: " + name);
}

double AdaptationConfig::resolved_css_threshold(int classes) const {
  if (css_threshold > 0.0) return css_threshold;
  return 0.4 * std::log(static_cast<double>(classes));
}

std::vector<int> css_filter(const Tensor& logits, double threshold) {
  if (!(threshold > 0.0))
    throw std::invalid_argument("css_filter: threshold must be positive");
  auto h = per_sample_entropy(logits);
  std::vector<int> kept;
  for (std::size_t b = 0; b < h.size(); ++b)
    if (static_cast<double>(h[b]) < threshold)
      kept.push_back(static_cast<int>(b));
  return kept;
}

void optimizer_step(ModelState& model, const GradientSet<float>& grads,
                    const AdaptationConfig& cfg, OptimizerState& state) {
  if (cfg.optimizer == OptimKind::sgd) {
    const auto lr = static_cast<float>(cfg.lr);
    const auto mu = static_cast<float>(cfg.momentum);
    for (const auto& [id, g] : grads) {
      auto& p = model.params_by_id(id);
      if (p.weight.shape() != g.weight.shape())
        throw std::invalid_argument("optimizer: gradient shape mismatch for layer " +
                                    std::to_string(id));
      auto& buf = state.momentum[id];
      if (buf.weight.size() == 0) {
        buf.weight = Tensor(g.weight.shape());
        buf.bias = Tensor(g.bias.shape());
      }
      for (std::size_t j = 0; j < g.weight.size(); ++j) {
        buf.weight[j] = mu * buf.weight[j] + g.weight[j];
        p.weight[j] -= lr * buf.weight[j];
      }
      for (std::size_t j = 0; j < g.bias.size(); ++j) {
        buf.bias[j] = mu * buf.bias[j] + g.bias[j];
        p.bias[j] -= lr * buf.bias[j];
      }
    }
    return;
  }

  // Adam with bias correction; the step count is shared across layers.
  ++state.step;
  const double b1 = cfg.beta1, b2 = cfg.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (const auto& [id, g] : grads) {
    auto& p = model.params_by_id(id);
    if (p.weight.shape() != g.weight.shape())
      throw std::invalid_argument("optimizer: gradient shape mismatch for layer " +
                                  std::to_string(id));
    auto& m = state.adam_m[id];
    auto& v = state.adam_v[id];
    if (m.weight.size() == 0) {
      m.weight = Tensor(g.weight.shape());
      m.bias = Tensor(g.bias.shape());
      v.weight = Tensor(g.weight.shape());
      v.bias = Tensor(g.bias.shape());
    }
    auto update = [&](Tensor& param, const Tensor& grad, Tensor& m1, Tensor& m2) {
      for (std::size_t j = 0; j < grad.size(); ++j) {
        const double gd = static_cast<double>(grad[j]);
        const double m1j = b1 * m1[j] + (1.0 - b1) * gd;
        const double m2j = b2 * m2[j] + (1.0 - b2) * gd * gd;
        m1[j] = static_cast<float>(m1j);
        m2[j] = static_cast<float>(m2j);
        param[j] -= static_cast<float>(cfg.lr * (m1j / bc1) /
                                       (std::sqrt(m2j / bc2) + cfg.adam_eps));
      }
    };
    update(p.weight, g.weight, m.weight, v.weight);
    update(p.bias, g.bias, m.bias, v.bias);
  }
}

Tensor augment_batch(const Tensor& images, std::uint64_t seed,
                     int batch_index) {
  const std::size_t B = images.dim(0), C = images.dim(1), H = images.dim(2),
                    W = images.dim(3);
  Tensor out(images.shape());
  for (std::size_t b = 0; b < B; ++b) {
    Rng rng = Rng::derive(seed ^ 0xC0FFEEULL,
                          (static_cast<std::uint64_t>(batch_index) << 20) + b);
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
          const float v =
              images[((b * C + c) * H + y) * W + (W - 1 - x)] +
              static_cast<float>(0.02 * rng.normal());
          out[((b * C + c) * H + y) * W + x] =
              std::min(1.0f, std::max(0.0f, v));
        }
  }
  return out;
}

namespace {

std::set<int> non_bn_parametric(const ModelState& model) {
  std::set<int> frozen;
  for (const auto& l : model.layers)
    if (l.parametric() && l.kind != LayerKind::batchnorm) frozen.insert(l.id);
  return frozen;
}

bool has_batchnorm(const ModelState& model) {
  for (const auto& l : model.layers)
    if (l.kind == LayerKind::batchnorm) return true;
  return false;
}

// Entropy loss restricted to the CSS-kept rows, for the pre-pass too.
LossFn<float> kept_entropy_loss(std::vector<int> kept) {
  auto k1 = kept;
  auto k2 = std::move(kept);
  return {[k1](const Tensor& z) {
            auto h = per_sample_entropy(z);
            double acc = 0.0;
            for (int b : k1) acc += h[static_cast<std::size_t>(b)];
            return static_cast<float>(acc / static_cast<double>(k1.size()));
          },
          [k2](const Tensor& z) { return entropy_loss_grad(z, k2); }};
}

void accumulate(GradientSet<float>& into, GradientSet<float>&& more) {
  for (auto& [id, g] : more) {
    auto it = into.find(id);
    if (it == into.end()) {
      into[id] = std::move(g);
      continue;
    }
    for (std::size_t j = 0; j < g.weight.size(); ++j)
      it->second.weight[j] += g.weight[j];
    for (std::size_t j = 0; j < g.bias.size(); ++j)
      it->second.bias[j] += g.bias[j];
  }
}

}  // namespace

AdaptResult adapt_stream(const ModelState& start, const Stream& stream,
                         const AdaptationConfig& cfg) {
  if (stream.batches.empty())
    throw std::invalid_argument("adapt_stream: empty stream");
  if (cfg.runs_backward() && !(cfg.lr > 0.0))
    throw std::invalid_argument("adapt_stream: learning rate must be positive");
  if ((cfg.method == Method::tent || cfg.method == Method::surgeon_bn ||
       cfg.method == Method::bn_stat) &&
      !has_batchnorm(start))
    throw std::invalid_argument(std::string("adapt_stream: method ") +
                                method_name(cfg.method) +
                                " requires batchnorm layers");
  if (cfg.css && !(cfg.css_threshold >= 0.0))
    throw std::invalid_argument("adapt_stream: css threshold must be >= 0");

  AdaptResult res;
  res.model = start;
  OptimizerState opt;

  const int classes = static_cast<int>(
      start.layers.back().kind == LayerKind::linear
          ? start.layers.back().out_features
          : start.meta.classes);
  const double css_thr = cfg.resolved_css_threshold(classes);

  std::set<int> frozen;
  switch (cfg.method) {
    case Method::tent:
    case Method::surgeon_bn:
      frozen = non_bn_parametric(res.model);
      break;
    case Method::freeze_set:
      frozen = cfg.freeze;
      break;
    default:
      break;
  }

  ForwardOptions opts;
  opts.bn_blend = cfg.method == Method::source ? 0.0 : cfg.bn_blend;

  PrePassConfig prepass = cfg.prepass;
  if (prepass.rng_seed == 0) prepass.rng_seed = cfg.seed ^ 0x5052455041535355ULL;

  const auto sample_shape = std::vector<std::size_t>(
      stream.batches[0].images.shape().begin() + 1,
      stream.batches[0].images.shape().end());
  const int batch_size = static_cast<int>(stream.batches[0].images.dim(0));
  const auto base_flops = flops_estimate(res.model, batch_size, cfg, sample_shape);

  for (std::size_t t = 0; t < stream.batches.size(); ++t) {
    const Batch& batch = stream.batches[t];
    BatchOutcome out;
    out.t = static_cast<int>(t);
    out.segment = batch.segment;

    // Pre-pass: importance metrics for this batch, no state change. The
    // pre-pass always ranks every prunable layer; surgeon-bn then applies
    // only the batchnorm entries of the schedule.
    PruningSchedule schedule;
    if (cfg.runs_prepass()) {
      auto rep = importance_prepass(res.model, batch.images, prepass,
                                    make_entropy_loss<float>(),
                                    static_cast<int>(t), {}, opts);
      if (cfg.method == Method::surgeon_bn) {
        for (const auto& row : rep.rows)
          if (!frozen.count(row.layer_id)) schedule.ratios.push_back(row.p);
      } else {
        schedule = rep.schedule();
      }
      if (cfg.force_zero_schedule)
        std::fill(schedule.ratios.begin(), schedule.ratios.end(), 0.0);
      out.prepass_bytes = rep.cached_bytes;
      out.prepass_peak_bytes = rep.peak_bytes;
      out.schedule = schedule.ratios;
      out.importance = std::move(rep);
    }

    CachePolicy policy;
    switch (cfg.method) {
      case Method::source:
      case Method::bn_stat:
        policy = CachePolicy::freeze_all(res.model);
        break;
      case Method::tent:
      case Method::freeze_set:
        policy = CachePolicy::full_caching();
        policy.frozen = frozen;
        break;
      case Method::full_tuning:
        policy = CachePolicy::full_caching();
        break;
      case Method::static_ratio:
        policy = CachePolicy::static_p(cfg.static_p);
        break;
      case Method::gradient_checkpoint:
        policy = CachePolicy::checkpoint();
        break;
      case Method::surgeon:
      case Method::surgeon_bn:
        policy = CachePolicy::dynamic();
        policy.frozen = frozen;
        break;
    }

    const PruningSchedule* sched_ptr =
        policy.kind == CachePolicy::Kind::dynamic ? &schedule : nullptr;
    auto fw = forward(res.model, batch.images, policy, sched_ptr, opts);
    if (!fw.output.all_finite())
      throw std::runtime_error(
          "adapt_stream: non-finite model output at batch " +
          std::to_string(t) + " (optimizer diverged)");

    out.predictions = predict(fw.output);
    for (std::size_t j = 0; j < out.predictions.size(); ++j)
      if (out.predictions[j] == batch.labels[j]) ++out.correct;

    out.loss = static_cast<double>(entropy_loss(fw.output));
    out.flops = static_cast<long long>(batch_size) * base_flops.forward +
                base_flops.prepass * batch_size;

    if (cfg.runs_backward()) {
      std::vector<int> kept;
      if (cfg.css) {
        kept = css_filter(fw.output, css_thr);
        out.skipped = static_cast<int>(out.predictions.size() - kept.size());
      } else {
        for (std::size_t b = 0; b < out.predictions.size(); ++b)
          kept.push_back(static_cast<int>(b));
      }

      if (!kept.empty()) {
        auto loss_fn = kept_entropy_loss(kept);
        double loss_value = static_cast<double>(loss_fn.value(fw.output));
        auto grads = backward(fw.tape, res.model, loss_fn.grad(fw.output));
        out.flops += static_cast<long long>(batch_size) * base_flops.backward +
                     static_cast<long long>(batch_size) * base_flops.recompute;

        if (cfg.cr) {
          Tensor aug = augment_batch(batch.images, cfg.seed, static_cast<int>(t));
          auto fw_aug = forward(res.model, aug, policy, sched_ptr, opts);
          Tensor p_orig = softmax_probs(fw.output);
          Tensor p_aug = softmax_probs(fw_aug.output);
          // d/dz of cross-entropy against fixed soft labels, kept rows only.
          Tensor aug_grad(fw_aug.output.shape());
          const std::size_t C = p_aug.dim(1);
          const float scale =
              static_cast<float>(cfg.cr_lambda / static_cast<double>(kept.size()));
          double cr_value = 0.0;
          for (int b : kept) {
            for (std::size_t c = 0; c < C; ++c) {
              const std::size_t i = static_cast<std::size_t>(b) * C + c;
              aug_grad[i] = scale * (p_aug[i] - p_orig[i]);
              if (p_orig[i] > 0.0f)
                cr_value -= static_cast<double>(p_orig[i]) *
                            std::log(static_cast<double>(p_aug[i]));
            }
          }
          cr_value /= static_cast<double>(kept.size());
          loss_value += cfg.cr_lambda * cr_value;
          accumulate(grads, backward(fw_aug.tape, res.model, aug_grad));
          out.cached_bytes += fw_aug.tape.stored_bytes;
          for (const auto& [id, b] : fw_aug.tape.per_layer_bytes())
            out.per_layer_bytes[id] += b;
          out.adapt_peak_bytes += fw_aug.tape.peak_bytes;
          out.flops += static_cast<long long>(batch_size) *
                       (base_flops.forward + base_flops.backward);
        }

        if (!std::isfinite(loss_value))
          throw std::runtime_error("adapt_stream: non-finite loss at batch " +
                                   std::to_string(t));
        out.loss = loss_value;
        optimizer_step(res.model, grads, cfg, opt);
        out.update_applied = true;
      }
    }

    out.cached_bytes += fw.tape.stored_bytes;
    for (const auto& [id, b] : fw.tape.per_layer_bytes())
      out.per_layer_bytes[id] += b;
    out.adapt_peak_bytes += fw.tape.peak_bytes;
    out.peak_bytes = std::max(out.prepass_peak_bytes, out.adapt_peak_bytes);
    out.cached_bytes += out.prepass_bytes;

    // Statistics refresh happens even when CSS skips the update; only the
    // no-adaptation baseline leaves them untouched.
    if (cfg.method != Method::source)
      apply_bn_refresh(res.model, fw.bn_batch_stats);

    res.outcomes.push_back(std::move(out));
  }
  return res;
}

}  // namespace surgeon
