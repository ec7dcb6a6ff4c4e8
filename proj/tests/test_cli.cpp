// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "surgeon/checkpoint.hpp"
#include "surgeon/cli.hpp"
#include "surgeon/data.hpp"
#include "surgeon/model.hpp"
#include "surgeon/training.hpp"

using namespace surgeon;
namespace fs = std::filesystem;

namespace {

struct TmpDir {
  fs::path path;
  explicit TmpDir(const char* tag) {
    path = fs::temp_directory_path() / (std::string("surgeon_cli_") + tag);
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TmpDir() { fs::remove_all(path); }
  std::string operator/(const char* name) const { return (path / name).string(); }
};

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE(f.good());
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// Shared tiny workspace: data + a briefly trained checkpoint + manifest.
const TmpDir& workspace() {
  static TmpDir dir("ws");
  static bool built = false;
  if (!built) {
    built = true;
    auto train = generate_clean(128, 8, 32, 1);
    auto test = generate_clean(128, 8, 32, 2);
    save_srgd(train, dir / "train.srgd");
    save_srgd(test, dir / "test.srgd");
    auto model = build_model<float>("cnn-small", 1);
    model = train_source(model, train, 1, 0.05, 1);
    save_checkpoint(model, dir / "model.srgw");
    std::ofstream mf(dir / "stream.txt");
    mf << "gauss-noise 5 20 11\ncontrast 5 20 12\n";
  }
  return dir;
}

}  // namespace

TEST_CASE("gen-data writes datasets and corrupted segments") {
  TmpDir dir("gen");
  std::ofstream mf(dir / "m.txt");
  mf << "box-blur 4 10 3\n";
  mf.close();
  int rc = run_cli({"gen-data", "--out", dir.path.string(), "--seed", "5",
                    "--clean-train", "32", "--clean-test", "16", "--manifest",
                    dir / "m.txt"});
  CHECK(rc == 0);
  auto train = load_srgd(dir / "train.srgd");
  CHECK(train.size() == 32);
  auto test = load_srgd(dir / "test.srgd");
  CHECK(test.size() == 16);
  auto seg = load_srgd(dir / "stream_0_box-blur_s4.srgd");
  CHECK(seg.size() == 10);
}

TEST_CASE("unknown flags are rejected with exit code 2") {
  const auto& ws = workspace();
  CHECK(run_cli({"adapt", "--out", ws / "x", "--frobnicate"}) == 2);
  CHECK(run_cli({"no-such-command"}) == 2);
  CHECK(run_cli({}) == 2);
  CHECK(run_cli({"adapt"}) == 2);  // missing required flags
}

TEST_CASE("config errors exit 2, runtime failures exit 3") {
  const auto& ws = workspace();
  // bad method name
  CHECK(run_cli({"adapt", "--out", ws / "o1", "--checkpoint", ws / "model.srgw",
                 "--data", ws / "test.srgd", "--manifest", ws / "stream.txt",
                 "--method", "warp-drive"}) == 2);
  // missing checkpoint file
  CHECK(run_cli({"adapt", "--out", ws / "o2", "--checkpoint", ws / "nope.srgw",
                 "--data", ws / "test.srgd", "--manifest", ws / "stream.txt"}) ==
        3);
  // corrupted checkpoint
  {
    auto bytes = slurp(ws / "model.srgw");
    bytes[40] ^= 0x10;
    std::ofstream f(ws / "broken.srgw", std::ios::binary);
    f << bytes;
  }
  CHECK(run_cli({"adapt", "--out", ws / "o3", "--checkpoint", ws / "broken.srgw",
                 "--data", ws / "test.srgd", "--manifest", ws / "stream.txt"}) ==
        3);
}

TEST_CASE("adapt is byte-reproducible for identical argv") {
  const auto& ws = workspace();
  std::vector<std::string> args = {
      "adapt",        "--out",      ws / "r1",
      "--checkpoint", ws / "model.srgw",
      "--data",       ws / "test.srgd",
      "--manifest",   ws / "stream.txt",
      "--method",     "surgeon",
      "--batch",      "10",
      "--seed",       "42"};
  REQUIRE(run_cli(args) == 0);
  auto report1 = slurp(ws / "r1/report.json");
  auto batches1 = slurp(ws / "r1/batches.csv");
  args[2] = ws / "r2";
  REQUIRE(run_cli(args) == 0);
  CHECK(slurp(ws / "r2/report.json") == report1);
  CHECK(slurp(ws / "r2/batches.csv") == batches1);

  // A different seed changes the outputs.
  args[2] = ws / "r3";
  args.back() = "43";
  REQUIRE(run_cli(args) == 0);
  CHECK(slurp(ws / "r3/report.json") != report1);
}

TEST_CASE("adapt --method static --ratio 0 matches full-tuning") {
  const auto& ws = workspace();
  auto base = std::vector<std::string>{
      "adapt",        "--out",      "",
      "--checkpoint", ws / "model.srgw",
      "--data",       ws / "test.srgd",
      "--manifest",   ws / "stream.txt",
      "--batch",      "10",
      "--seed",       "9",
      "--method",     ""};
  base[2] = ws / "st0";
  base.back() = "static";
  auto st = base;
  st.push_back("--ratio");
  st.push_back("0.0");
  REQUIRE(run_cli(st) == 0);
  base[2] = ws / "ft";
  base.back() = "full-tuning";
  REQUIRE(run_cli(base) == 0);

  // Identical error fields; the config echo differs.
  auto pick = [](const std::string& json, const std::string& key) {
    auto pos = json.find(key);
    REQUIRE(pos != std::string::npos);
    return json.substr(pos, json.find('\n', pos) - pos);
  };
  auto a = slurp(ws / "st0/report.json");
  auto b = slurp(ws / "ft/report.json");
  CHECK(pick(a, "\"mean_online_pct\"") == pick(b, "\"mean_online_pct\""));
  CHECK(pick(a, "\"per_segment_pct\"") == pick(b, "\"per_segment_pct\""));
  // Zero pruning caches exactly what full tuning caches, so even the
  // per-batch rows coincide.
  CHECK(slurp(ws / "st0/batches.csv") == slurp(ws / "ft/batches.csv"));
}

TEST_CASE("config file supplies defaults, explicit flags win") {
  const auto& ws = workspace();
  {
    std::ofstream f(ws / "run.cfg");
    f << "# adaptation settings\n"
         "method = tent\n"
         "batch = 10\n"
         "lr = 0.001\n";
  }
  int rc = run_cli({"adapt", "--out", ws / "cfg1", "--checkpoint",
                    ws / "model.srgw", "--data", ws / "test.srgd",
                    "--manifest", ws / "stream.txt", "--config", ws / "run.cfg",
                    "--seed", "4"});
  REQUIRE(rc == 0);
  auto rep = slurp(ws / "cfg1/report.json");
  CHECK(rep.find("\"method\": \"tent\"") != std::string::npos);
  CHECK(rep.find("\"lr\": \"0.001\"") != std::string::npos);

  // Explicit --method overrides the config value.
  rc = run_cli({"adapt", "--out", ws / "cfg2", "--checkpoint",
                ws / "model.srgw", "--data", ws / "test.srgd", "--manifest",
                ws / "stream.txt", "--config", ws / "run.cfg", "--seed", "4",
                "--method", "bn-stat"});
  REQUIRE(rc == 0);
  CHECK(slurp(ws / "cfg2/report.json").find("\"method\": \"bn-stat\"") !=
        std::string::npos);

  // Unknown config keys are rejected.
  {
    std::ofstream f(ws / "bad.cfg");
    f << "warp = 9\n";
  }
  CHECK(run_cli({"adapt", "--out", ws / "cfg3", "--checkpoint",
                 ws / "model.srgw", "--data", ws / "test.srgd", "--manifest",
                 ws / "stream.txt", "--config", ws / "bad.cfg"}) == 2);
  // Malformed config line.
  {
    std::ofstream f(ws / "bad2.cfg");
    f << "just words\n";
  }
  CHECK(run_cli({"adapt", "--out", ws / "cfg4", "--checkpoint",
                 ws / "model.srgw", "--data", ws / "test.srgd", "--manifest",
                 ws / "stream.txt", "--config", ws / "bad2.cfg"}) == 2);
}

TEST_CASE("sweep writes the grid plus one surgeon row") {
  const auto& ws = workspace();
  int rc = run_cli({"sweep", "--out", ws / "sw", "--checkpoint",
                    ws / "model.srgw", "--data", ws / "test.srgd",
                    "--manifest", ws / "stream.txt", "--batch", "10",
                    "--ratios", "0,0.5,0.95", "--seeds", "1", "--seed", "3"});
  REQUIRE(rc == 0);
  auto csv = slurp(ws / "sw/sweep.csv");
  CHECK(csv.find("method,ratio,mean_error,avg_cache_bytes\n") == 0);
  int statics = 0, surgeons = 0;
  std::istringstream ss(csv);
  std::string line;
  std::getline(ss, line);
  std::vector<double> caches;
  while (std::getline(ss, line)) {
    if (line.rfind("static,", 0) == 0) ++statics;
    if (line.rfind("surgeon,", 0) == 0) ++surgeons;
  }
  CHECK(statics == 3);
  CHECK(surgeons == 1);

  CHECK(run_cli({"sweep", "--out", ws / "sw2", "--checkpoint",
                 ws / "model.srgw", "--data", ws / "test.srgd", "--manifest",
                 ws / "stream.txt", "--ratios", "0.5", "--seeds", "1"}) == 2);
}

TEST_CASE("importance command: rows satisfy p = 1 - I/max(I)") {
  const auto& ws = workspace();
  int rc = run_cli({"importance", "--out", ws / "imp", "--checkpoint",
                    ws / "model.srgw", "--data", ws / "test.srgd",
                    "--manifest", ws / "stream.txt", "--batch", "10",
                    "--method", "surgeon", "--seed", "6"});
  REQUIRE(rc == 0);
  auto csv = slurp(ws / "imp/importance.csv");
  std::istringstream ss(csv);
  std::string line;
  std::getline(ss, line);
  CHECK(line == "batch,layer_id,G,m,M,I,p");
  std::map<int, std::vector<std::pair<double, double>>> by_batch;  // I, p
  while (std::getline(ss, line)) {
    std::istringstream ls(line);
    std::string tok;
    std::vector<std::string> cols;
    while (std::getline(ls, tok, ',')) cols.push_back(tok);
    REQUIRE(cols.size() == 7);
    by_batch[std::stoi(cols[0])].push_back(
        {std::stod(cols[5]), std::stod(cols[6])});
  }
  CHECK(by_batch.size() == 4);  // 40 samples / batch 10
  for (const auto& [t, rows] : by_batch) {
    double imax = 0.0;
    for (auto [I, p] : rows) imax = std::max(imax, I);
    REQUIRE(imax > 0.0);
    for (auto [I, p] : rows) CHECK(std::abs(p - (1.0 - I / imax)) <= 1e-6);
  }

  CHECK(run_cli({"importance", "--out", ws / "imp2", "--checkpoint",
                 ws / "model.srgw", "--data", ws / "test.srgd", "--manifest",
                 ws / "stream.txt", "--method", "tent"}) == 2);
}

TEST_CASE("cache audit: report averages recompute from batches.csv") {
  const auto& ws = workspace();
  REQUIRE(run_cli({"adapt", "--out", ws / "audit", "--checkpoint",
                   ws / "model.srgw", "--data", ws / "test.srgd", "--manifest",
                   ws / "stream.txt", "--method", "surgeon", "--batch", "10",
                   "--seed", "12"}) == 0);
  // Recompute the cache average from the per-batch rows alone.
  std::istringstream csv(slurp(ws / "audit/batches.csv"));
  std::string line;
  std::getline(csv, line);
  REQUIRE(line ==
          "batch,segment,loss,correct,total,cache_bytes,prepass_bytes,"
          "peak_bytes,skipped,update_applied,flops");
  double cache_sum = 0.0, prepass_sum = 0.0;
  std::size_t peak = 0;
  int rows = 0;
  while (std::getline(csv, line)) {
    std::istringstream ls(line);
    std::string tok;
    std::vector<std::string> cols;
    while (std::getline(ls, tok, ',')) cols.push_back(tok);
    REQUIRE(cols.size() == 11);
    cache_sum += std::stod(cols[5]);
    prepass_sum += std::stod(cols[6]);
    peak = std::max(peak, static_cast<std::size_t>(std::stoull(cols[7])));
    ++rows;
  }
  REQUIRE(rows == 4);

  auto rep = slurp(ws / "audit/report.json");
  auto field = [&](const std::string& key) {
    auto pos = rep.find('"' + key + '"');
    REQUIRE(pos != std::string::npos);
    pos = rep.find(':', pos) + 1;
    return std::stod(rep.substr(pos));
  };
  CHECK(field("avg_bytes") == doctest::Approx(cache_sum / rows).epsilon(1e-9));
  CHECK(field("avg_prepass_bytes") ==
        doctest::Approx(prepass_sum / rows).epsilon(1e-9));
  CHECK(field("peak_bytes") == doctest::Approx(static_cast<double>(peak)));
}

TEST_CASE("train command trains and reports clean error") {
  TmpDir dir("train");
  auto data = generate_clean(64, 8, 32, 3);
  save_srgd(data, dir / "train.srgd");
  int rc = run_cli({"train", "--out", dir.path.string(), "--seed", "2",
                    "--data", dir / "train.srgd", "--epochs", "1", "--batch",
                    "16"});
  REQUIRE(rc == 0);
  auto m = load_checkpoint(dir / "model.srgw");
  CHECK(m.meta.arch == "cnn-small");
  CHECK(m.meta.epochs == 1);
}
