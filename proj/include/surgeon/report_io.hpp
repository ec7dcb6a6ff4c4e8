// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "surgeon/adapt.hpp"
#include "surgeon/importance.hpp"
#include "surgeon/metrics.hpp"

namespace surgeon {

// Shortest round-trip decimal form; deterministic across runs.
std::string fmt_double(double v);

// Whole-file atomic: write a temp file in the same directory, then rename.
void atomic_write(const std::string& path, const std::string& content);

std::string batches_csv(const std::vector<BatchOutcome>& outcomes);

struct SweepRow {
  std::string method;
  double ratio = 0.0;
  double mean_error = 0.0;
  double avg_cache_bytes = 0.0;
};
std::string sweep_csv(const std::vector<SweepRow>& rows);

std::string importance_csv(const std::vector<ImportanceReport>& reports);

std::string report_json(const RunReport& report);

}  // namespace surgeon
