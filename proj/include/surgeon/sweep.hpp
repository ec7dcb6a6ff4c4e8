// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "surgeon/adapt.hpp"
#include "surgeon/data.hpp"
#include "surgeon/model.hpp"
#include "surgeon/report_io.hpp"

namespace surgeon {

// Static-ratio grid plus one dynamic-sparsity run, averaged over seeds.
// matched_static_error interpolates the static error curve at the dynamic
// run's average cache size (the equal-cache comparison).
struct SweepResult {
  std::vector<SweepRow> rows;  // grid rows plus one "surgeon" row
  double surgeon_error = 0.0;
  double surgeon_cache = 0.0;
  double matched_ratio = 0.0;
  double matched_static_error = 0.0;
  double matched_cache_gap = 1.0;  // |interp cache - surgeon cache| / surgeon
  bool interpolation_ok = false;
};

// Stamps per-segment corruption seeds derived from the run seed.
StreamSpec reseed_stream_spec(const StreamSpec& spec, std::uint64_t seed);

// One adaptation run per seed (seed also reseeds the stream); returns the
// across-seed means of the online error and the per-batch cache bytes.
struct SeededRunStats {
  double mean_error = 0.0;
  double avg_cache = 0.0;
};
SeededRunStats averaged_runs(const ModelState& model, const Dataset& clean_test,
                             const StreamSpec& stream_template,
                             AdaptationConfig cfg, int n_seeds,
                             std::uint64_t base_seed);

// base_cfg supplies optimizer/plugin settings; its method and seed fields
// are overridden per run. Seeds are base_cfg.seed + 0..n_seeds-1, applied to
// both the stream segments and the adaptation.
SweepResult run_sweep(const ModelState& source_model, const Dataset& clean_test,
                      const StreamSpec& stream_template,
                      const AdaptationConfig& base_cfg,
                      const std::vector<double>& ratios, int n_seeds);

}  // namespace surgeon
