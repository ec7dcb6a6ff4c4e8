// SPDX-License-Identifier: Apache-2.0
#include "surgeon/sweep.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "surgeon/metrics.hpp"

namespace surgeon {

StreamSpec reseed_stream_spec(const StreamSpec& spec, std::uint64_t seed) {
  StreamSpec s = spec;
  for (std::size_t i = 0; i < s.segments.size(); ++i)
    s.segments[i].corruption.seed = seed * 1000003ULL + i;
  return s;
}

SeededRunStats averaged_runs(const ModelState& model, const Dataset& clean_test,
                             const StreamSpec& stream_template,
                             AdaptationConfig cfg, int n_seeds,
                             std::uint64_t base_seed) {
  SeededRunStats acc;
  for (int s = 0; s < n_seeds; ++s) {
    const std::uint64_t seed = base_seed + static_cast<std::uint64_t>(s);
    cfg.seed = seed;
    cfg.prepass.rng_seed = 0;  // derive from the run seed
    Stream stream =
        build_stream(clean_test, reseed_stream_spec(stream_template, seed));
    auto res = adapt_stream(model, stream, cfg);
    auto rep = build_run_report(res.model, stream, res.outcomes, cfg);
    acc.mean_error += rep.mean_online_error;
    acc.avg_cache += rep.avg_cache_bytes;
  }
  acc.mean_error /= n_seeds;
  acc.avg_cache /= n_seeds;
  return acc;
}

SweepResult run_sweep(const ModelState& source_model, const Dataset& clean_test,
                      const StreamSpec& stream_template,
                      const AdaptationConfig& base_cfg,
                      const std::vector<double>& ratios, int n_seeds) {
  if (ratios.size() < 2)
    throw std::invalid_argument("run_sweep: need at least two grid ratios");
  if (n_seeds < 1)
    throw std::invalid_argument("run_sweep: need at least one seed");

  SweepResult out;
  for (double p : ratios) {
    AdaptationConfig cfg = base_cfg;
    cfg.method = Method::static_ratio;
    cfg.static_p = p;
    auto stats = averaged_runs(source_model, clean_test, stream_template, cfg,
                               n_seeds, base_cfg.seed);
    out.rows.push_back({"static", p, stats.mean_error, stats.avg_cache});
  }
  std::sort(out.rows.begin(), out.rows.end(),
            [](const SweepRow& a, const SweepRow& b) { return a.ratio < b.ratio; });

  AdaptationConfig cfg = base_cfg;
  cfg.method = Method::surgeon;
  auto stats = averaged_runs(source_model, clean_test, stream_template, cfg,
                             n_seeds, base_cfg.seed);
  out.surgeon_error = stats.mean_error;
  out.surgeon_cache = stats.avg_cache;

  // Interpolate the static curve at the dynamic run's cache size. Cache is
  // decreasing in the ratio, so walk adjacent grid points.
  for (std::size_t i = 0; i + 1 < out.rows.size(); ++i) {
    const auto& hi = out.rows[i];      // lower ratio, bigger cache
    const auto& lo = out.rows[i + 1];  // higher ratio, smaller cache
    const double cmax = std::max(hi.avg_cache_bytes, lo.avg_cache_bytes);
    const double cmin = std::min(hi.avg_cache_bytes, lo.avg_cache_bytes);
    if (out.surgeon_cache >= cmin && out.surgeon_cache <= cmax) {
      const double span = hi.avg_cache_bytes - lo.avg_cache_bytes;
      const double w =
          span == 0.0 ? 0.5 : (out.surgeon_cache - lo.avg_cache_bytes) / span;
      out.matched_static_error = lo.mean_error + w * (hi.mean_error - lo.mean_error);
      out.matched_ratio = lo.ratio + w * (hi.ratio - lo.ratio);
      out.matched_cache_gap = 0.0;  // exact by interpolation
      out.interpolation_ok = true;
      break;
    }
  }
  if (!out.interpolation_ok) {
    // Outside the grid span: take the nearest endpoint and report the gap.
    const auto& nearest =
        out.surgeon_cache > out.rows.front().avg_cache_bytes ? out.rows.front()
                                                             : out.rows.back();
    out.matched_static_error = nearest.mean_error;
    out.matched_ratio = nearest.ratio;
    out.matched_cache_gap =
        std::abs(nearest.avg_cache_bytes - out.surgeon_cache) /
        std::max(1.0, out.surgeon_cache);
  }

  out.rows.push_back(
      {"surgeon", out.matched_ratio, out.surgeon_error, out.surgeon_cache});
  return out;
}

}  // namespace surgeon
