// SPDX-License-Identifier: Apache-2.0
#include "surgeon/cli.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include <CLI11.hpp>

#include "surgeon/adapt.hpp"
#include "surgeon/checkpoint.hpp"
#include "surgeon/common.hpp"
#include "surgeon/data.hpp"
#include "surgeon/metrics.hpp"
#include "surgeon/report_io.hpp"
#include "surgeon/sweep.hpp"
#include "surgeon/training.hpp"

namespace fs = std::filesystem;

namespace surgeon {

namespace {

// `key = value` lines; '#' starts a comment.
std::map<std::string, std::string> parse_config_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file " + path);
  std::map<std::string, std::string> kv;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    const auto trim = [](std::string s) {
      const auto a = s.find_first_not_of(" \t\r");
      const auto b = s.find_last_not_of(" \t\r");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    if (trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) +
                        ": expected `key = value`");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty())
      throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    if (!kv.emplace(key, value).second)
      throw ConfigError("config line " + std::to_string(lineno) +
                        ": duplicate key " + key);
  }
  return kv;
}

// Config entries become `--key value` arguments placed before the explicit
// command line, so explicit flags win under the take-last policy.
std::vector<std::string> merge_config(const std::vector<std::string>& args) {
  std::string config_path;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config") {
      if (i + 1 >= args.size()) throw ConfigError("--config needs a path");
      config_path = args[i + 1];
    } else if (args[i].rfind("--config=", 0) == 0) {
      config_path = args[i].substr(9);
    }
  }
  if (config_path.empty()) return args;
  auto kv = parse_config_file(config_path);
  std::vector<std::string> merged;
  merged.push_back(args.empty() ? "" : args[0]);  // subcommand
  for (const auto& [k, v] : kv) {
    if (k == "config") throw ConfigError("config file cannot set `config`");
    if (v == "false") continue;  // disabled flag
    merged.push_back("--" + k);
    if (!v.empty() && v != "true") merged.push_back(v);
  }
  for (std::size_t i = 1; i < args.size(); ++i) merged.push_back(args[i]);
  return merged;
}

struct CommonOpts {
  std::string out;
  std::uint64_t seed = 1;
  std::string config;
};

void add_common(CLI::App* cmd, CommonOpts& o) {
  cmd->add_option("--out", o.out, "output directory")->required();
  cmd->add_option("--seed", o.seed, "master seed");
  cmd->add_option("--config", o.config, "key = value config file");
}

void ensure_out_dir(const std::string& out) {
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw std::runtime_error("cannot create output directory " + out);
}

Dataset load_dataset_any(const std::string& path) {
  if (path.size() >= 4 && path.substr(path.size() - 4) == ".bin")
    return load_cifar_bin(path);
  return load_srgd(path);
}

struct AdaptFlags {
  std::string checkpoint, data, manifest;
  std::string method = "surgeon";
  int batch = 20;
  std::string optimizer = "sgd";
  double lr = 1e-4, momentum = 0.9;
  double ratio = 0.0;
  std::string freeze_set;
  bool css = false;
  double css_threshold = 0.0;
  bool cr = false;
  double cr_lambda = 1.0;
  int prepass_subset = 0;
  double prepass_ratio = 0.9;
  double bn_blend = 1.0;
};

void add_adapt_flags(CLI::App* cmd, AdaptFlags& f, bool with_method) {
  cmd->add_option("--checkpoint", f.checkpoint, "SRGW model checkpoint")
      ->required();
  cmd->add_option("--data", f.data, "clean test set (SRGD)")->required();
  cmd->add_option("--manifest", f.manifest,
                  "stream manifest (kind severity count seed per line); "
                  "default: built-in 4-segment benchmark");
  if (with_method)
    cmd->add_option("--method", f.method,
                    "source|bn-stat|tent|full-tuning|static|freeze|"
                    "gradient-checkpoint|surgeon|surgeon-bn");
  cmd->add_option("--batch", f.batch, "stream batch size");
  cmd->add_option("--optimizer", f.optimizer, "sgd|adam");
  cmd->add_option("--lr", f.lr, "learning rate");
  cmd->add_option("--momentum", f.momentum, "sgd momentum");
  cmd->add_option("--ratio", f.ratio, "static pruning ratio (method static)");
  cmd->add_option("--freeze-set", f.freeze_set,
                  "comma-separated layer ids (method freeze)");
  cmd->add_flag("--css", f.css, "certainty-based sample selection");
  cmd->add_option("--css-threshold", f.css_threshold,
                  "entropy threshold; 0 = 0.4*ln(classes)");
  cmd->add_flag("--cr", f.cr, "consistency regularization");
  cmd->add_option("--cr-lambda", f.cr_lambda, "consistency weight");
  cmd->add_option("--prepass-subset", f.prepass_subset,
                  "pre-pass sample count; 0 = max(1, batch/8)");
  cmd->add_option("--prepass-ratio", f.prepass_ratio,
                  "pre-pass static pruning ratio");
  cmd->add_option("--bn-blend", f.bn_blend,
                  "batch/running statistic mix (1 = pure batch)");
}

AdaptationConfig to_config(const AdaptFlags& f, std::uint64_t seed) {
  AdaptationConfig cfg;
  cfg.method = method_from_name(f.method);
  cfg.static_p = f.ratio;
  if (!f.freeze_set.empty()) {
    std::istringstream ss(f.freeze_set);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
      if (tok.empty()) continue;
      try {
        cfg.freeze.insert(std::stoi(tok));
      } catch (const std::exception&) {
        throw ConfigError("freeze-set: bad layer id `" + tok + "`");
      }
    }
  }
  if (f.optimizer == "sgd")
    cfg.optimizer = OptimKind::sgd;
  else if (f.optimizer == "adam")
    cfg.optimizer = OptimKind::adam;
  else
    throw ConfigError("unknown optimizer: " + f.optimizer);
  cfg.lr = f.lr;
  cfg.momentum = f.momentum;
  cfg.css = f.css;
  cfg.css_threshold = f.css_threshold;
  cfg.cr = f.cr;
  cfg.cr_lambda = f.cr_lambda;
  cfg.prepass.subset_size = f.prepass_subset;
  cfg.prepass.prune_ratio = f.prepass_ratio;
  cfg.bn_blend = f.bn_blend;
  cfg.seed = seed;
  if (cfg.lr <= 0.0) throw ConfigError("lr must be positive");
  if (f.batch < 1) throw ConfigError("batch must be positive");
  if (cfg.static_p < 0.0 || cfg.static_p > 1.0)
    throw ConfigError("ratio must lie in [0, 1]");
  if (cfg.prepass.prune_ratio < 0.0 || cfg.prepass.prune_ratio >= 1.0)
    throw ConfigError("prepass-ratio must lie in [0, 1)");
  if (cfg.css && cfg.css_threshold < 0.0)
    throw ConfigError("css-threshold must be >= 0");
  if (cfg.cr && cfg.cr_lambda < 0.0) throw ConfigError("cr-lambda must be >= 0");
  return cfg;
}

std::map<std::string, std::string> echo_config(const AdaptFlags& f,
                                               std::uint64_t seed, int batch) {
  std::map<std::string, std::string> e;
  e["method"] = f.method;
  e["batch"] = std::to_string(batch);
  e["optimizer"] = f.optimizer;
  e["lr"] = fmt_double(f.lr);
  e["momentum"] = fmt_double(f.momentum);
  e["ratio"] = fmt_double(f.ratio);
  e["freeze_set"] = f.freeze_set;
  e["css"] = f.css ? "true" : "false";
  e["css_threshold"] = fmt_double(f.css_threshold);
  e["cr"] = f.cr ? "true" : "false";
  e["cr_lambda"] = fmt_double(f.cr_lambda);
  e["prepass_subset"] = std::to_string(f.prepass_subset);
  e["prepass_ratio"] = fmt_double(f.prepass_ratio);
  e["bn_blend"] = fmt_double(f.bn_blend);
  e["seed"] = std::to_string(seed);
  return e;
}

StreamSpec resolve_stream(const AdaptFlags& f, std::uint64_t seed) {
  StreamSpec spec;
  spec.batch_size = f.batch;
  if (f.manifest.empty()) {
    spec = default_benchmark_stream(seed);
    spec.batch_size = f.batch;
  } else {
    spec.segments = load_stream_manifest(f.manifest);
  }
  return spec;
}

int cmd_gen_data(const CommonOpts& common, int clean_train, int clean_test,
                 int classes, int size, int channels,
                 const std::string& manifest) {
  ensure_out_dir(common.out);
  Dataset train = generate_clean(clean_train, classes, size, common.seed, channels);
  Dataset test =
      generate_clean(clean_test, classes, size, common.seed ^ 0x7465737473ULL, channels);
  save_srgd(train, common.out + "/train.srgd");
  save_srgd(test, common.out + "/test.srgd");
  std::cout << "wrote " << common.out << "/train.srgd (" << train.size()
            << " samples), test.srgd (" << test.size() << " samples)\n";
  if (!manifest.empty()) {
    auto segs = load_stream_manifest(manifest);
    StreamSpec spec;
    spec.segments = segs;
    spec.batch_size = 1;  // segment files keep draw order; batching is adapt's job
    Stream stream = build_stream(test, spec);
    for (std::size_t s = 0; s < segs.size(); ++s) {
      Dataset seg_data;
      seg_data.classes = test.classes;
      seg_data.channels = test.channels;
      seg_data.height = test.height;
      seg_data.width = test.width;
      const int lo = stream.segment_start_batch[s];
      const int hi = s + 1 < segs.size()
                         ? stream.segment_start_batch[s + 1]
                         : static_cast<int>(stream.batches.size());
      for (int b = lo; b < hi; ++b) {
        Sample smp;
        smp.label = stream.batches[static_cast<std::size_t>(b)].labels[0];
        smp.image =
            stream.batches[static_cast<std::size_t>(b)].images.reshaped(
                {static_cast<std::size_t>(test.channels),
                 static_cast<std::size_t>(test.height),
                 static_cast<std::size_t>(test.width)});
        seg_data.samples.push_back(std::move(smp));
      }
      std::ostringstream name;
      name << common.out << "/stream_" << s << '_'
           << corruption_name(segs[s].corruption.kind) << "_s"
           << segs[s].corruption.severity << ".srgd";
      save_srgd(seg_data, name.str());
      std::cout << "wrote " << name.str() << " (" << seg_data.size()
                << " samples)\n";
    }
  }
  return 0;
}

int cmd_train(const CommonOpts& common, const std::string& arch,
              const std::string& data_path, const std::string& test_path,
              int epochs, double lr, int batch) {
  ensure_out_dir(common.out);
  Dataset train = data_path.empty()
                      ? generate_clean(1024, 8, 32, common.seed)
                      : load_dataset_any(data_path);
  ModelState model = build_model<float>(arch, common.seed, train.channels,
                                        train.height, train.classes);
  model = train_source(model, train, epochs, lr, common.seed, batch);
  save_checkpoint(model, common.out + "/model.srgw");
  std::cout << "wrote " << common.out << "/model.srgw (" << arch << ", "
            << model.parameter_count() << " parameters, " << epochs
            << " epochs)\n";
  if (!test_path.empty()) {
    Dataset test = load_dataset_any(test_path);
    std::cout << "clean test error: " << fmt_double(100.0 * eval_error(model, test))
              << "%\n";
  }
  return 0;
}

int cmd_adapt(const CommonOpts& common, const AdaptFlags& flags) {
  ensure_out_dir(common.out);
  ModelState model = load_checkpoint(flags.checkpoint);
  Dataset test = load_dataset_any(flags.data);
  AdaptationConfig cfg = to_config(flags, common.seed);
  Stream stream = build_stream(test, resolve_stream(flags, common.seed));
  auto res = adapt_stream(model, stream, cfg);
  RunReport rep = build_run_report(res.model, stream, res.outcomes, cfg);
  rep.config_echo = echo_config(flags, common.seed, flags.batch);
  atomic_write(common.out + "/report.json", report_json(rep));
  atomic_write(common.out + "/batches.csv", batches_csv(res.outcomes));
  std::cout << "mean online error: " << fmt_double(rep.mean_online_error)
            << "%  avg cache bytes: " << fmt_double(rep.avg_cache_bytes)
            << '\n';
  return 0;
}

int cmd_sweep(const CommonOpts& common, const AdaptFlags& flags,
              const std::string& ratios_csv, int seeds) {
  ensure_out_dir(common.out);
  ModelState model = load_checkpoint(flags.checkpoint);
  Dataset test = load_dataset_any(flags.data);
  AdaptationConfig cfg = to_config(flags, common.seed);
  StreamSpec spec = resolve_stream(flags, common.seed);
  std::vector<double> ratios;
  {
    std::istringstream ss(ratios_csv);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
      if (tok.empty()) continue;
      try {
        ratios.push_back(std::stod(tok));
      } catch (const std::exception&) {
        throw ConfigError("ratios: bad value `" + tok + "`");
      }
    }
  }
  if (ratios.size() < 2) throw ConfigError("--ratios needs at least two values");
  for (double p : ratios)
    if (p < 0.0 || p > 1.0) throw ConfigError("sweep ratio outside [0, 1]");
  if (seeds < 1) throw ConfigError("--seeds must be positive");
  auto sweep = run_sweep(model, test, spec, cfg, ratios, seeds);
  atomic_write(common.out + "/sweep.csv", sweep_csv(sweep.rows));
  std::cout << "surgeon: error " << fmt_double(sweep.surgeon_error)
            << "% cache " << fmt_double(sweep.surgeon_cache)
            << " bytes; equal-cache static error "
            << fmt_double(sweep.matched_static_error) << "%\n";
  return 0;
}

int cmd_importance(const CommonOpts& common, const AdaptFlags& flags) {
  ensure_out_dir(common.out);
  ModelState model = load_checkpoint(flags.checkpoint);
  Dataset test = load_dataset_any(flags.data);
  AdaptationConfig cfg = to_config(flags, common.seed);
  if (!cfg.runs_prepass())
    throw ConfigError("importance requires --method surgeon or surgeon-bn");
  Stream stream = build_stream(test, resolve_stream(flags, common.seed));
  auto res = adapt_stream(model, stream, cfg);
  std::vector<ImportanceReport> reports;
  for (auto& o : res.outcomes)
    if (o.importance) reports.push_back(std::move(*o.importance));
  atomic_write(common.out + "/importance.csv", importance_csv(reports));
  std::cout << "wrote " << common.out << "/importance.csv ("
            << reports.size() << " batches)\n";
  return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& raw_args) {
  try {
    const auto args = merge_config(raw_args);

    CLI::App app{"memory-frugal test-time adaptation sandbox"};
    app.require_subcommand(1);
    app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

    auto* gen = app.add_subcommand("gen-data", "write SRGD datasets");
    CommonOpts gen_common;
    int clean_train = 1024, clean_test = 1024, classes = 8, size = 32,
        channels = 1;
    std::string gen_manifest;
    add_common(gen, gen_common);
    gen->add_option("--clean-train", clean_train, "training sample count");
    gen->add_option("--clean-test", clean_test, "test sample count");
    gen->add_option("--classes", classes, "class count (<= 16)");
    gen->add_option("--size", size, "square image size (>= 16)");
    gen->add_option("--channels", channels, "image channels");
    gen->add_option("--manifest", gen_manifest,
                    "also write corrupted per-segment SRGD files");

    auto* train = app.add_subcommand("train", "source-train a model");
    CommonOpts train_common;
    std::string arch = "cnn-small", train_data, test_data;
    int epochs = 10, train_batch = 32;
    double train_lr = 0.05;
    add_common(train, train_common);
    train->add_option("--arch", arch, "cnn-small|cnn-wide");
    train->add_option("--data", train_data,
                      "training SRGD (or CIFAR .bin); default synthetic");
    train->add_option("--test-data", test_data, "clean eval set");
    train->add_option("--epochs", epochs, "training epochs");
    train->add_option("--lr", train_lr, "learning rate");
    train->add_option("--batch", train_batch, "batch size");

    auto* adapt = app.add_subcommand("adapt", "run one adaptation method");
    CommonOpts adapt_common;
    AdaptFlags adapt_flags;
    add_common(adapt, adapt_common);
    add_adapt_flags(adapt, adapt_flags, true);

    auto* sweep = app.add_subcommand("sweep", "static-ratio grid + surgeon");
    CommonOpts sweep_common;
    AdaptFlags sweep_flags;
    std::string ratios = "0,0.25,0.5,0.7,0.85,0.95";
    int sweep_seeds = 5;
    add_common(sweep, sweep_common);
    add_adapt_flags(sweep, sweep_flags, false);
    sweep->add_option("--ratios", ratios, "comma-separated static grid");
    sweep->add_option("--seeds", sweep_seeds, "seeds per grid point");

    auto* imp = app.add_subcommand("importance", "per-batch importance CSV");
    CommonOpts imp_common;
    AdaptFlags imp_flags;
    add_common(imp, imp_common);
    add_adapt_flags(imp, imp_flags, true);

    std::vector<std::string> rev(args.rbegin(), args.rend());
    try {
      app.parse(rev);
    } catch (const CLI::ParseError& e) {
      if (e.get_exit_code() == 0) {  // --help
        return app.exit(e);
      }
      std::cerr << "error: " << e.what() << '\n';
      return 2;
    }

    if (gen->parsed())
      return cmd_gen_data(gen_common, clean_train, clean_test, classes, size,
                          channels, gen_manifest);
    if (train->parsed())
      return cmd_train(train_common, arch, train_data, test_data, epochs,
                       train_lr, train_batch);
    if (adapt->parsed()) return cmd_adapt(adapt_common, adapt_flags);
    if (sweep->parsed())
      return cmd_sweep(sweep_common, sweep_flags, ratios, sweep_seeds);
    if (imp->parsed()) return cmd_importance(imp_common, imp_flags);
    std::cerr << "error: no subcommand\n";
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  }
}

}  // namespace surgeon
