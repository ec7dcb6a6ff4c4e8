// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "surgeon/checkpoint.hpp"
#include "surgeon/data.hpp"
#include "surgeon/metrics.hpp"
#include "surgeon/model.hpp"
#include "surgeon/report_io.hpp"
#include "test_util.hpp"

using namespace surgeon;

namespace {

std::string tmp_path(const char* name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("online_error examples") {
  // all correct
  auto all = online_error({0, 1, 0, 1}, {0, 1, 0, 1}, {0}, 2);
  CHECK(all.per_segment[0] == 0.0);
  CHECK(all.mean == 0.0);

  // class A: 1 of 2 wrong, class B: 0 of 2 wrong -> (50 + 0) / 2 = 25%
  auto mixed = online_error({1, 0, 1, 1}, {0, 0, 1, 1}, {0}, 2);
  CHECK(mixed.per_segment[0] == doctest::Approx(25.0));

  // two segments at 50% and 10% -> mean 30%
  std::vector<int> labels, preds;
  for (int i = 0; i < 10; ++i) {  // segment 1: one class, 5/10 wrong
    labels.push_back(0);
    preds.push_back(i < 5 ? 1 : 0);
  }
  for (int i = 0; i < 10; ++i) {  // segment 2: one class, 1/10 wrong
    labels.push_back(0);
    preds.push_back(i < 1 ? 1 : 0);
  }
  auto two = online_error(preds, labels, {0, 10}, 2);
  CHECK(two.per_segment[0] == doctest::Approx(50.0));
  CHECK(two.per_segment[1] == doctest::Approx(10.0));
  CHECK(two.mean == doctest::Approx(30.0));
  CHECK(!two.warnings.empty());  // class 1 absent from both segments

  CHECK_THROWS_AS(online_error({0}, {0, 1}, {0}, 2), std::invalid_argument);
  CHECK_THROWS_AS(online_error({0, 1}, {0, 1}, {0, 2}, 2),
                  std::invalid_argument);

  CHECK(plain_error({0, 1, 1, 0}, {0, 1, 0, 0}) == doctest::Approx(25.0));
}

TEST_CASE("class-balanced differs from plain error under imbalance") {
  // 9 samples of class 0 (all right), 1 of class 1 (wrong):
  // plain 10%, balanced (0% + 100%)/2 = 50%.
  std::vector<int> labels(9, 0), preds(9, 0);
  labels.push_back(1);
  preds.push_back(0);
  auto e = online_error(preds, labels, {0}, 2);
  CHECK(e.per_segment[0] == doctest::Approx(50.0));
  CHECK(plain_error(preds, labels) == doctest::Approx(10.0));
}

TEST_CASE("flops examples") {
  auto m = assemble_model<float>({LayerSpec::make_linear(10, 5)}, 1);
  AdaptationConfig cfg;
  cfg.method = Method::source;
  auto f = flops_estimate(m, 4, cfg, {10});
  CHECK(f.forward == 100);
  CHECK(f.backward == 0);
  CHECK(f.prepass == 0);

  auto cnn = build_model<float>("cnn-small", 3);
  AdaptationConfig bs;
  bs.method = Method::bn_stat;
  CHECK(flops_estimate(cnn, 20, bs).backward == 0);

  AdaptationConfig ft;
  ft.method = Method::full_tuning;
  AdaptationConfig st;
  st.method = Method::static_ratio;
  st.static_p = 0.8;
  auto a = flops_estimate(cnn, 20, ft);
  auto b = flops_estimate(cnn, 20, st);
  CHECK(a.forward == b.forward);
  CHECK(a.backward == b.backward);
  CHECK(a.total() == b.total());
  CHECK(a.backward > 0);

  AdaptationConfig tent;
  tent.method = Method::tent;
  auto t = flops_estimate(cnn, 20, tent);
  CHECK(t.backward > 0);
  CHECK(t.backward < a.backward);  // only BN layers count as updated

  AdaptationConfig gc;
  gc.method = Method::gradient_checkpoint;
  auto g = flops_estimate(cnn, 20, gc);
  CHECK(g.recompute > 0);
  CHECK(g.backward == a.backward);

  AdaptationConfig sg;
  sg.method = Method::surgeon;
  auto s = flops_estimate(cnn, 20, sg);
  CHECK(s.prepass > 0);
  // subset 2 of 20 -> a tenth of (forward + 2x prunable forward)
  CHECK(s.prepass <= (s.forward + s.backward) / 5);

  sg.cr = true;
  auto scr = flops_estimate(cnn, 20, sg);
  CHECK(scr.cr == scr.forward + scr.backward);
}

TEST_CASE("crc32 known vector") {
  const char* s = "123456789";
  CHECK(crc32(reinterpret_cast<const std::uint8_t*>(s), 9) == 0xCBF43926u);
  CHECK(crc32(nullptr, 0) == 0u);
}

TEST_CASE("checkpoint round trip is bit-exact") {
  auto m = build_model<float>("cnn-small", 17);
  m.meta.epochs = 10;
  m.meta.seed = 0xDEADBEEFCAFE1234ULL;
  m.meta.dataset_fingerprint = 0x0123456789ABCDEFULL;
  auto bytes = serialize_checkpoint(m);
  auto m2 = parse_checkpoint(bytes);
  CHECK(m2.meta.arch == "cnn-small");
  CHECK(m2.meta.epochs == 10);
  CHECK(m2.meta.seed == m.meta.seed);
  CHECK(m2.meta.dataset_fingerprint == m.meta.dataset_fingerprint);
  CHECK(m2.meta.classes == m.meta.classes);
  REQUIRE(m2.num_layers() == m.num_layers());
  for (int i = 0; i < m.num_layers(); ++i) {
    CHECK(m2.layers[i].kind == m.layers[i].kind);
    CHECK(m2.params[i].weight == m.params[i].weight);
    CHECK(m2.params[i].bias == m.params[i].bias);
    CHECK(m2.params[i].running_mean == m.params[i].running_mean);
    CHECK(m2.params[i].running_var == m.params[i].running_var);
  }
  CHECK(serialize_checkpoint(m2) == bytes);

  const auto path = tmp_path("t_metrics_ckpt.srgw");
  save_checkpoint(m, path);
  auto m3 = load_checkpoint(path);
  CHECK(serialize_checkpoint(m3) == bytes);
  std::remove(path.c_str());
}

TEST_CASE("checkpoint rejects corruption with precise reasons") {
  auto m = build_model<float>("cnn-small", 19);
  auto bytes = serialize_checkpoint(m);

  auto bad_magic = bytes;
  bad_magic[2] = 'X';
  CHECK_THROWS_WITH_AS(parse_checkpoint(bad_magic), doctest::Contains("magic"),
                       std::runtime_error);

  auto truncated = bytes;
  truncated.resize(bytes.size() - 9);
  CHECK_THROWS_WITH_AS(parse_checkpoint(truncated), doctest::Contains("CRC"),
                       std::runtime_error);

  auto flipped = bytes;
  flipped[100] ^= 0x40;
  CHECK_THROWS_WITH_AS(parse_checkpoint(flipped), doctest::Contains("CRC"),
                       std::runtime_error);

  auto bad_version = bytes;
  bad_version[4] = 3;  // recompute CRC so only the version is wrong
  {
    const std::size_t body = bad_version.size() - 4;
    const std::uint32_t c = crc32(bad_version.data(), body);
    for (int i = 0; i < 4; ++i)
      bad_version[body + i] = static_cast<std::uint8_t>((c >> (8 * i)) & 0xff);
  }
  CHECK_THROWS_WITH_AS(parse_checkpoint(bad_version),
                       doctest::Contains("version"), std::runtime_error);
}

TEST_CASE("a bare tensor container parses as an empty model") {
  std::vector<std::uint8_t> bytes = {'S', 'R', 'G', 'W', 1, 0, 0, 0, 0, 0};
  const std::uint32_t c = crc32(bytes.data(), bytes.size());
  for (int i = 0; i < 4; ++i)
    bytes.push_back(static_cast<std::uint8_t>((c >> (8 * i)) & 0xff));
  CHECK(bytes.size() == 14);  // 10-byte header + CRC
  auto m = parse_checkpoint(bytes);
  CHECK(m.num_layers() == 0);

  ModelState empty;
  auto rt = parse_checkpoint(serialize_checkpoint(empty));
  CHECK(rt.num_layers() == 0);
  CHECK(rt.meta.arch == empty.meta.arch);
}

TEST_CASE("forward peak bytes equals the densest layer input") {
  auto m = build_model<float>("cnn-small", 5);
  // [20,16,32,32] activations after conv1 dominate: 20*16*32*32*4 bytes.
  CHECK(forward_peak_bytes(m, 20, {1, 32, 32}) == 20u * 16 * 32 * 32 * 4);
}

TEST_CASE("run report: audit fields against a tiny run") {
  auto data = generate_clean(64, 8, 32, 23);
  auto model = build_model<float>("cnn-small", 23);
  StreamSpec spec;
  spec.batch_size = 8;
  spec.segments.push_back({CorruptionSpec{CorruptionKind::contrast, 5, 1}, 32});
  spec.segments.push_back({CorruptionSpec{CorruptionKind::pixelate, 5, 2}, 32});
  auto stream = build_stream(data, spec);
  AdaptationConfig cfg;
  cfg.method = Method::full_tuning;
  cfg.seed = 4;
  auto res = adapt_stream(model, stream, cfg);
  auto rep = build_run_report(res.model, stream, res.outcomes, cfg);

  CHECK(rep.per_segment_error.size() == 2);
  const double mean =
      (rep.per_segment_error[0] + rep.per_segment_error[1]) / 2.0;
  CHECK(rep.mean_online_error == doctest::Approx(mean));

  double cache = 0.0;
  std::size_t peak = 0;
  for (const auto& o : res.outcomes) {
    cache += static_cast<double>(o.cached_bytes);
    peak = std::max(peak, o.peak_bytes);
  }
  CHECK(rep.avg_cache_bytes ==
        doctest::Approx(cache / static_cast<double>(res.outcomes.size())));
  CHECK(rep.peak_cache_bytes == peak);

  // Activation dominance: cached activations far exceed parameter storage.
  const double param_bytes = 4.0 * static_cast<double>(model.parameter_count());
  CHECK(rep.avg_cache_bytes > 4.0 * param_bytes);
}

TEST_CASE("csv and json formatting") {
  CHECK(fmt_double(0.5) == "0.5");
  CHECK(fmt_double(13.125) == "13.125");
  CHECK(fmt_double(1e-7) == "1e-07");

  BatchOutcome o;
  o.t = 3;
  o.segment = 1;
  o.predictions = {1, 2};
  o.correct = 1;
  o.loss = 0.25;
  o.cached_bytes = 1000;
  o.prepass_bytes = 100;
  o.peak_bytes = 1200;
  o.flops = 42;
  auto csv = batches_csv({o});
  CHECK(csv.find("batch,segment,loss,correct,total,cache_bytes") == 0);
  CHECK(csv.find("3,1,0.25,1,2,1000,100,1200,0,0,42") != std::string::npos);

  RunReport rep;
  rep.mean_online_error = 12.5;
  rep.per_segment_error = {10.0, 15.0};
  rep.seed = 7;
  rep.config_echo["method"] = "surgeon";
  auto json = report_json(rep);
  CHECK(json.find("\"mean_online_pct\": 12.5") != std::string::npos);
  CHECK(json.find("\"method\": \"surgeon\"") != std::string::npos);

  auto sw = sweep_csv({{"static", 0.5, 13.25, 1024.0}});
  CHECK(sw.find("method,ratio,mean_error,avg_cache_bytes\n") == 0);
  CHECK(sw.find("static,0.5,13.25,1024") != std::string::npos);
}

TEST_CASE("atomic_write replaces the whole file") {
  const auto path = tmp_path("t_metrics_atomic.txt");
  atomic_write(path, "first");
  atomic_write(path, "second");
  std::ifstream f(path);
  std::string content((std::istreambuf_iterator<char>(f)),
                      std::istreambuf_iterator<char>());
  CHECK(content == "second");
  std::remove(path.c_str());
}
