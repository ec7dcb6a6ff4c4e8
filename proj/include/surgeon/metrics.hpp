// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "surgeon/adapt.hpp"
#include "surgeon/data.hpp"
#include "surgeon/model.hpp"

namespace surgeon {

struct OnlineError {
  std::vector<double> per_segment;  // percent, class-balanced
  double mean = 0.0;                // percent
  std::vector<std::string> warnings;
};

// Class-balanced error: per segment, the mean over classes present of that
// class's error rate; classes absent from a segment are excluded with a
// warning. The mean averages the segment values.
OnlineError online_error(const std::vector<int>& predictions,
                         const std::vector<int>& labels,
                         const std::vector<int>& segment_start_sample,
                         int classes);

double plain_error(const std::vector<int>& predictions,
                   const std::vector<int>& labels);

// Analytic per-sample FLOP counts under the fixed accounting rules:
// backward = 2x forward over updated layers, pre-pass scaled by the subset
// fraction, checkpoint recompute adds its segments' forward count, CR adds
// one forward plus one backward.
struct FlopsBreakdown {
  long long forward = 0;
  long long backward = 0;
  long long prepass = 0;
  long long recompute = 0;
  long long cr = 0;
  long long total() const { return forward + backward + prepass + recompute + cr; }
};

FlopsBreakdown flops_estimate(const ModelState& model, int batch_size,
                              const AdaptationConfig& cfg,
                              const std::vector<std::size_t>& sample_shape);

// Uses the model's recorded input geometry.
FlopsBreakdown flops_estimate(const ModelState& model, int batch_size,
                              const AdaptationConfig& cfg);

// Densest single layer input at the given batch size (the forward-pass
// footprint figure reported for forward-only methods).
std::size_t forward_peak_bytes(const ModelState& model, int batch_size,
                               const std::vector<std::size_t>& sample_shape);

struct RunReport {
  std::vector<double> per_segment_error;  // percent
  double mean_online_error = 0.0;         // percent
  double plain_error_pct = 0.0;
  double avg_cache_bytes = 0.0;  // per batch, records + pre-pass
  std::size_t peak_cache_bytes = 0;
  double avg_prepass_bytes = 0.0;
  std::size_t forward_peak_bytes = 0;
  FlopsBreakdown flops_per_sample;
  int backward_flop_multiplier = 2;
  std::uint64_t seed = 0;
  std::map<std::string, std::string> config_echo;
  std::vector<std::string> warnings;
};

RunReport build_run_report(const ModelState& model, const Stream& stream,
                           const std::vector<BatchOutcome>& outcomes,
                           const AdaptationConfig& cfg);

}  // namespace surgeon
