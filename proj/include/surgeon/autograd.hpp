// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "surgeon/layers.hpp"
#include "surgeon/losses.hpp"
#include "surgeon/model.hpp"
#include "surgeon/sparsity.hpp"
#include "surgeon/tensor.hpp"

namespace surgeon {

// How activations are stored, per layer, for one forward pass. Pruning only
// ever touches the cached copy used for weight gradients; the forward signal
// itself is exact for every policy.
struct CachePolicy {
  enum class Kind { full, static_ratio, dynamic, checkpoint };

  Kind kind = Kind::full;
  double ratio = 0.0;      // static_ratio
  std::set<int> frozen;    // layer ids that never get a weight gradient

  static CachePolicy full_caching() { return {}; }
  static CachePolicy static_p(double p) {
    if (!(p >= 0.0 && p <= 1.0))
      throw std::invalid_argument("static policy: ratio outside [0, 1]");
    CachePolicy c;
    c.kind = Kind::static_ratio;
    c.ratio = p;
    return c;
  }
  static CachePolicy dynamic() {
    CachePolicy c;
    c.kind = Kind::dynamic;
    return c;
  }
  static CachePolicy checkpoint() {
    CachePolicy c;
    c.kind = Kind::checkpoint;
    return c;
  }
  template <typename T>
  static CachePolicy freeze_all(const ModelStateT<T>& m) {
    CachePolicy c;
    for (const auto& l : m.layers)
      if (l.parametric()) c.frozen.insert(l.id);
    return c;
  }
};

template <typename T>
struct TapeNode {
  int layer_id = -1;
  LayerKind kind = LayerKind::relu;
  std::vector<std::size_t> in_shape, out_shape;
  ActivationRecordT<T> record;
  LayerAux<T> aux;
  bool updated = false;      // weight gradient wanted
  bool need_dinput = false;  // some updated layer sits below this one
};

// One forward pass worth of cached state. Single-use: backward consumes it.
template <typename T>
struct TapeT {
  struct Segment {
    int begin = 0, end = 0;  // [begin, end) node indices
    bool checkpointed = false;
  };

  std::vector<TapeNode<T>> nodes;
  std::vector<Segment> segments;
  ForwardOptions opts;
  bool consumed = false;

  // Bytes held after the forward pass, by the cache-metric formulas.
  std::size_t stored_bytes = 0;
  // Max concurrent bytes including checkpoint rematerialization transients;
  // equals stored_bytes until backward runs a recompute.
  std::size_t peak_bytes = 0;

  std::map<int, std::size_t> per_layer_bytes() const {
    std::map<int, std::size_t> m;
    for (const auto& n : nodes) m[n.layer_id] = cached_bytes(n.record);
    return m;
  }
};

using Tape = TapeT<float>;

template <typename T>
using GradientSet = std::map<int, LayerGrads<T>>;

template <typename T>
struct ForwardResult {
  TensorT<T> output;
  TapeT<T> tape;
  // Per batchnorm layer id: biased batch statistics, for the caller to fold
  // into the running statistics if the method refreshes them.
  std::map<int, std::pair<std::vector<T>, std::vector<T>>> bn_batch_stats;
};

namespace detail {

template <typename T>
std::vector<typename TapeT<T>::Segment> plan_segments(
    const ModelStateT<T>& model, const CachePolicy& policy) {
  std::vector<typename TapeT<T>::Segment> segs;
  const int L = model.num_layers();
  int i = 0;
  while (i < L) {
    typename TapeT<T>::Segment s;
    s.begin = i;
    s.end = i + 1;
    if (policy.kind == CachePolicy::Kind::checkpoint &&
        model.layers[i].kind == LayerKind::conv2d) {
      int j = i + 1;
      while (j < L && (model.layers[j].kind == LayerKind::batchnorm ||
                       model.layers[j].kind == LayerKind::relu))
        ++j;
      s.end = j;
      s.checkpointed = (s.end - s.begin) >= 2;
    }
    segs.push_back(s);
    i = s.end;
  }
  return segs;
}

}  // namespace detail

// Runs the model over input, caching records per policy. Pure: batchnorm
// statistic refreshes are returned, never applied. schedule must be present
// exactly when the policy is dynamic, with one ratio per prunable non-frozen
// layer in chain order.
template <typename T>
ForwardResult<T> forward(const ModelStateT<T>& model, const TensorT<T>& input,
                         const CachePolicy& policy = {},
                         const PruningSchedule* schedule = nullptr,
                         const ForwardOptions& opts = {}) {
  const bool needs_schedule = policy.kind == CachePolicy::Kind::dynamic;
  if (needs_schedule != (schedule != nullptr))
    throw std::invalid_argument(
        needs_schedule
            ? "forward: dynamic policy requires a pruning schedule"
            : "forward: schedule given but the policy does not take one");

  std::vector<int> slots;  // prunable non-frozen layer ids, in chain order
  for (const auto& l : model.layers)
    if (l.prunable() && !policy.frozen.count(l.id)) slots.push_back(l.id);
  if (schedule && schedule->ratios.size() != slots.size())
    throw std::invalid_argument(
        "forward: schedule has " + std::to_string(schedule->ratios.size()) +
        " ratios but the model has " + std::to_string(slots.size()) +
        " prunable layers");
  if (schedule)
    for (double p : schedule->ratios)
      if (!(p >= 0.0 && p <= 1.0))
        throw std::invalid_argument("forward: schedule ratio outside [0, 1]");

  const int L = model.num_layers();
  // updated = gets a weight gradient; need_dinput = an updated layer below.
  std::vector<bool> updated(L), need_dinput(L);
  {
    bool any_below = false;
    for (int i = 0; i < L; ++i) {
      need_dinput[i] = any_below;
      updated[i] = model.layers[i].parametric() &&
                   !policy.frozen.count(model.layers[i].id);
      any_below = any_below || updated[i];
    }
  }

  ForwardResult<T> r;
  r.tape.opts = opts;
  r.tape.segments = detail::plan_segments(model, policy);
  std::vector<int> seg_of(L);
  std::vector<bool> is_anchor(L, false);
  for (std::size_t s = 0; s < r.tape.segments.size(); ++s) {
    const auto& seg = r.tape.segments[s];
    for (int i = seg.begin; i < seg.end; ++i) seg_of[i] = static_cast<int>(s);
    if (seg.checkpointed) is_anchor[seg.begin] = true;
  }

  std::size_t slot_idx = 0;
  TensorT<T> x = input;
  for (int i = 0; i < L; ++i) {
    const LayerSpec& spec = model.layers[i];
    auto fw = layer_forward(spec, model.params[i], x, opts);

    TapeNode<T> node;
    node.layer_id = spec.id;
    node.kind = spec.kind;
    node.in_shape = x.shape();
    node.out_shape = fw.out.shape();
    node.updated = updated[i];
    node.need_dinput = need_dinput[i];

    const auto& seg = r.tape.segments[static_cast<std::size_t>(seg_of[i])];
    const bool inner_checkpointed = seg.checkpointed && i != seg.begin;

    double ratio = 0.0;
    if (spec.prunable() && !policy.frozen.count(spec.id)) {
      if (policy.kind == CachePolicy::Kind::static_ratio)
        ratio = policy.ratio;
      else if (policy.kind == CachePolicy::Kind::dynamic)
        ratio = schedule->ratios[slot_idx];
      ++slot_idx;
    }

    if (inner_checkpointed) {
      node.record = ActivationRecordT<T>::make_recompute(seg.begin);
      // aux is rematerialized during backward.
    } else if (is_anchor[i]) {
      node.record = ActivationRecordT<T>::make_dense(x);
      node.aux = std::move(fw.aux);
    } else if (spec.parametric()) {
      if (!policy.frozen.count(spec.id)) {
        node.record = make_pruned_record(x, ratio);
      } else if (spec.kind == LayerKind::batchnorm && opts.bn_blend > 0.0 &&
                 need_dinput[i]) {
        // Frozen batch-stat BN still needs its input to pass gradients on.
        node.record = ActivationRecordT<T>::make_dense(x);
      }
      node.aux = std::move(fw.aux);
    } else if (spec.kind == LayerKind::relu) {
      if (need_dinput[i])
        node.record = ActivationRecordT<T>::make_mask(std::move(fw.aux.relu_mask));
    } else {
      if (need_dinput[i]) node.aux = std::move(fw.aux);
    }

    if (fw.has_bn_stats)
      r.bn_batch_stats[spec.id] = {std::move(fw.batch_mean),
                                   std::move(fw.batch_var)};
    r.tape.nodes.push_back(std::move(node));
    x = std::move(fw.out);
  }

  for (const auto& n : r.tape.nodes)
    r.tape.stored_bytes += cached_bytes(n.record);
  r.tape.peak_bytes = r.tape.stored_bytes;
  r.output = std::move(x);
  return r;
}

// Reverse pass over a tape produced by forward() on the same, unmodified
// model. Consumes the tape. Frozen layers pass the activation gradient
// through but emit no weight gradient; recompute records re-run their
// segment's forward from the stored anchor first.
template <typename T>
GradientSet<T> backward(TapeT<T>& tape, const ModelStateT<T>& model,
                        const TensorT<T>& loss_grad) {
  using Kind = typename ActivationRecordT<T>::Kind;
  if (tape.consumed)
    throw std::invalid_argument("backward: tape already consumed");
  tape.consumed = true;
  if (tape.nodes.empty()) throw std::invalid_argument("backward: empty tape");
  if (loss_grad.shape() != tape.nodes.back().out_shape)
    throw std::invalid_argument(
        "backward: loss gradient shape " + shape_str(loss_grad.shape()) +
        " does not match output shape " +
        shape_str(tape.nodes.back().out_shape));

  GradientSet<T> grads;
  const int L = static_cast<int>(tape.nodes.size());
  int first_updated = -1;
  for (int i = 0; i < L; ++i)
    if (tape.nodes[i].updated) {
      first_updated = i;
      break;
    }
  if (first_updated < 0) return grads;

  // Rematerialized records/aux for the checkpointed segment being processed.
  std::map<int, ActivationRecordT<T>> temp_records;
  std::map<int, LayerAux<T>> temp_aux;

  auto rematerialize = [&](const typename TapeT<T>::Segment& seg) {
    temp_records.clear();
    temp_aux.clear();
    TensorT<T> x = tape.nodes[seg.begin].record.dense;
    std::size_t temp_bytes = 0;
    for (int i = seg.begin; i < seg.end; ++i) {
      auto fw = layer_forward(model.layers[i], model.params[i], x, tape.opts);
      if (i != seg.begin) {
        const LayerSpec& spec = model.layers[i];
        if (spec.parametric()) {
          temp_records[i] = ActivationRecordT<T>::make_dense(x);
        } else if (spec.kind == LayerKind::relu) {
          temp_records[i] =
              ActivationRecordT<T>::make_mask(std::move(fw.aux.relu_mask));
        }
        if (spec.kind != LayerKind::relu) temp_aux[i] = std::move(fw.aux);
        auto it = temp_records.find(i);
        if (it != temp_records.end()) temp_bytes += cached_bytes(it->second);
      }
      x = std::move(fw.out);
    }
    tape.peak_bytes = std::max(tape.peak_bytes, tape.stored_bytes + temp_bytes);
  };

  TensorT<T> grad = loss_grad;
  for (int i = L - 1; i >= first_updated; --i) {
    TapeNode<T>& node = tape.nodes[i];
    const LayerSpec& spec = model.layers[i];
    // Everything above first_updated must pass the gradient on; the lowest
    // updated layer only needs its own weight gradient.
    const bool want_dinput = i > first_updated;
    const bool want_dparams = node.updated;

    const ActivationRecordT<T>* rec = &node.record;
    const LayerAux<T>* aux = &node.aux;
    if (node.record.kind == Kind::recompute) {
      if (!temp_records.count(i) && !temp_aux.count(i)) {
        for (const auto& seg : tape.segments)
          if (seg.begin <= i && i < seg.end) {
            rematerialize(seg);
            break;
          }
      }
      if (temp_records.count(i)) rec = &temp_records[i];
      if (temp_aux.count(i)) aux = &temp_aux[i];
    }
    if (spec.parametric() && want_dparams && rec->kind != Kind::dense &&
        rec->kind != Kind::sparse)
      throw std::invalid_argument(
          "backward: missing activation record for updated layer " +
          std::to_string(node.layer_id));

    auto bw = layer_backward(spec, model.params[i], *rec, *aux, grad,
                             node.in_shape, want_dinput, want_dparams);
    if (bw.has_grads) grads[node.layer_id] = std::move(bw.grads);
    if (want_dinput) grad = std::move(bw.dinput);
  }
  return grads;
}

// Central-difference gradient oracle over every parameter of a (small) f64
// model. Independent of the backward path: it only runs forward passes.
inline GradientSet<double> finite_difference_gradients(
    const ModelState64& model, const Tensor64& input, const LossFn<double>& loss,
    double epsilon, const ForwardOptions& opts = {}) {
  if (!(epsilon > 0.0 && epsilon <= 1e-2))
    throw std::invalid_argument("finite differences: epsilon outside (0, 1e-2]");
  ModelState64 m = model;
  auto eval = [&]() {
    auto fw = forward(m, input, CachePolicy::full_caching(), nullptr, opts);
    double v = loss.value(fw.output);
    if (!std::isfinite(v))
      throw std::invalid_argument("finite differences: non-finite loss");
    return v;
  };
  GradientSet<double> out;
  for (int i = 0; i < m.num_layers(); ++i) {
    if (!m.layers[i].parametric()) continue;
    LayerGrads<double> g;
    g.weight = Tensor64(m.params[i].weight.shape());
    g.bias = Tensor64(m.params[i].bias.shape());
    for (int which = 0; which < 2; ++which) {
      auto& param = which == 0 ? m.params[i].weight : m.params[i].bias;
      auto& gout = which == 0 ? g.weight : g.bias;
      for (std::size_t j = 0; j < param.size(); ++j) {
        const double orig = param[j];
        param[j] = orig + epsilon;
        const double lp = eval();
        param[j] = orig - epsilon;
        const double lm = eval();
        param[j] = orig;
        gout[j] = (lp - lm) / (2.0 * epsilon);
      }
    }
    out[m.layers[i].id] = std::move(g);
  }
  return out;
}

// Largest relative disagreement between two gradient sets; denominators are
// floored so near-zero gradients are compared absolutely at the floor scale.
template <typename T, typename U>
double max_relative_error(const GradientSet<T>& a, const GradientSet<U>& b,
                          double floor = 1e-3) {
  double worst = 0.0;
  for (const auto& [id, ga] : a) {
    auto it = b.find(id);
    if (it == b.end())
      throw std::invalid_argument("gradient sets cover different layers");
    for (int which = 0; which < 2; ++which) {
      const auto& ta = which == 0 ? ga.weight : ga.bias;
      const auto& tb = which == 0 ? it->second.weight : it->second.bias;
      for (std::size_t j = 0; j < ta.size(); ++j) {
        const double x = static_cast<double>(ta[j]);
        const double y = static_cast<double>(tb[j]);
        const double denom = std::max({std::abs(x), std::abs(y), floor});
        worst = std::max(worst, std::abs(x - y) / denom);
      }
    }
  }
  return worst;
}

template <typename T>
bool gradients_identical(const GradientSet<T>& a, const GradientSet<T>& b) {
  if (a.size() != b.size()) return false;
  for (const auto& [id, ga] : a) {
    auto it = b.find(id);
    if (it == b.end()) return false;
    if (!(ga.weight == it->second.weight) || !(ga.bias == it->second.bias))
      return false;
  }
  return true;
}

}  // namespace surgeon
