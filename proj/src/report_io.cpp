// SPDX-License-Identifier: Apache-2.0
#include "surgeon/report_io.hpp"

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace surgeon {

std::string fmt_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  if (ec != std::errc())
    throw std::runtime_error("fmt_double: conversion failed");
  return std::string(buf, end);
}

void atomic_write(const std::string& path, const std::string& content) {
  namespace fs = std::filesystem;
  const fs::path target(path);
  const fs::path tmp = target.parent_path() / (target.filename().string() + ".tmp");
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open " + tmp.string());
    f.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!f) throw std::runtime_error("write failed: " + tmp.string());
  }
  fs::rename(tmp, target);
}

std::string batches_csv(const std::vector<BatchOutcome>& outcomes) {
  std::ostringstream os;
  os << "batch,segment,loss,correct,total,cache_bytes,prepass_bytes,"
        "peak_bytes,skipped,update_applied,flops\n";
  for (const auto& o : outcomes) {
    os << o.t << ',' << o.segment << ',' << fmt_double(o.loss) << ','
       << o.correct << ',' << o.predictions.size() << ',' << o.cached_bytes
       << ',' << o.prepass_bytes << ',' << o.peak_bytes << ',' << o.skipped
       << ',' << (o.update_applied ? 1 : 0) << ',' << o.flops << '\n';
  }
  return os.str();
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::ostringstream os;
  os << "method,ratio,mean_error,avg_cache_bytes\n";
  for (const auto& r : rows)
    os << r.method << ',' << fmt_double(r.ratio) << ','
       << fmt_double(r.mean_error) << ',' << fmt_double(r.avg_cache_bytes)
       << '\n';
  return os.str();
}

std::string importance_csv(const std::vector<ImportanceReport>& reports) {
  std::ostringstream os;
  os << "batch,layer_id,G,m,M,I,p\n";
  for (const auto& rep : reports)
    for (const auto& row : rep.rows)
      os << rep.batch_index << ',' << row.layer_id << ',' << fmt_double(row.G)
         << ',' << fmt_double(row.m) << ',' << fmt_double(row.M) << ','
         << fmt_double(row.I) << ',' << fmt_double(row.p) << '\n';
  return os.str();
}

std::string report_json(const RunReport& report) {
  nlohmann::json j;
  j["seed"] = report.seed;
  j["config"] = report.config_echo;
  j["error"] = {
      {"per_segment_pct", report.per_segment_error},
      {"mean_online_pct", report.mean_online_error},
      {"plain_pct", report.plain_error_pct},
  };
  j["cache"] = {
      {"avg_bytes", report.avg_cache_bytes},
      {"peak_bytes", report.peak_cache_bytes},
      {"avg_prepass_bytes", report.avg_prepass_bytes},
      {"forward_peak_bytes", report.forward_peak_bytes},
  };
  j["flops_per_sample"] = {
      {"forward", report.flops_per_sample.forward},
      {"backward", report.flops_per_sample.backward},
      {"prepass", report.flops_per_sample.prepass},
      {"recompute", report.flops_per_sample.recompute},
      {"cr", report.flops_per_sample.cr},
      {"total", report.flops_per_sample.total()},
      {"backward_multiplier", report.backward_flop_multiplier},
  };
  j["warnings"] = report.warnings;
  return j.dump(2) + "\n";
}

}  // namespace surgeon
