#pragma once

// Command-line driver. Every stage reads and writes files only.
//
// Parameter resolution, first hit wins:
//   1. command-line flag
//   2. config["<subcommand>"]["<key>"]
//   3. config["<key>"]
//   4. built-in default
//
// Synthetic-data parameters live under "synth", training hyperparameters
// under "train" and the MC pass count under "predict", so the same config
// file drives the whole chain.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mvtta/error.hpp"
#include "mvtta/evaluation.hpp"
#include "mvtta/prediction_store.hpp"
#include "mvtta/stage1_selector.hpp"
#include "mvtta/stage2_inference.hpp"
#include "mvtta/synthetic_lab.hpp"
#include "mvtta/uncertainty.hpp"

namespace mvtta::cli {

/// Usage problem that should exit with status 2.
class UsageError : public Error {
public:
  using Error::Error;
};

inline std::string format_fraction(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.6f", x);
  return buf;
}

class RunConfig {
public:
  RunConfig(std::string subcommand, nlohmann::json file)
      : sub_(std::move(subcommand)), file_(std::move(file)) {}

  static RunConfig load(const std::string &subcommand,
                        const std::optional<std::string> &path) {
    nlohmann::json j = nlohmann::json::object();
    if (path) {
      std::ifstream in(*path);
      if (!in) {
        throw IoError("cannot open config '" + *path + "'");
      }
      try {
        j = nlohmann::json::parse(in);
      } catch (const nlohmann::json::exception &e) {
        throw ValidationError("config '" + *path + "': " + e.what());
      }
      if (!j.is_object()) {
        throw ValidationError("config '" + *path + "' must be a JSON object");
      }
    }
    return RunConfig(subcommand, std::move(j));
  }

  const nlohmann::json &section(const std::string &name) const {
    static const nlohmann::json empty = nlohmann::json::object();
    auto it = file_.find(name);
    return it != file_.end() && it->is_object() ? *it : empty;
  }

  template <class T>
  T get(const std::string &key, const std::optional<T> &flag, T fallback) {
    T v = fallback;
    if (flag) {
      v = *flag;
    } else if (section(sub_).contains(key)) {
      v = section(sub_).at(key).get<T>();
    } else if (file_.contains(key) && !file_.at(key).is_object()) {
      v = file_.at(key).get<T>();
    }
    resolved_[key] = v;
    return v;
  }

  template <class T>
  T require(const std::string &key, const std::optional<T> &flag) {
    if (!flag && !section(sub_).contains(key) &&
        !(file_.contains(key) && !file_.at(key).is_object())) {
      throw UsageError(sub_ + ": missing required --" + key);
    }
    return get<T>(key, flag, T{});
  }

  void record(const std::string &key, const nlohmann::ordered_json &value) {
    resolved_[key] = value;
  }

  /// One line: the fully resolved parameter set.
  void echo(std::ostream &out) const {
    nlohmann::ordered_json j;
    j["subcommand"] = sub_;
    j["config"] = resolved_;
    out << "resolved: " << j.dump() << '\n';
  }

private:
  std::string sub_;
  nlohmann::json file_;
  nlohmann::ordered_json resolved_ = nlohmann::ordered_json::object();
};

/// Raw flag values; unset flags stay empty so the config file can fill them.
struct Flags {
  std::optional<std::string> config;
  std::optional<std::string> metric;
  std::optional<double> tau;
  std::optional<int> points;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  bool force_apply = false;
  std::optional<std::string> manifest;
  std::optional<std::string> vtable;
  std::optional<std::string> features;
  std::optional<std::string> model;
  std::optional<int> mc_samples;
  std::vector<std::string> sweeps;
};

namespace detail {

inline MetricConfig resolve_metric(RunConfig &rc, const Flags &f) {
  MetricConfig m;
  m.kind = parse_metric(rc.get<std::string>("metric", f.metric, "entropy"));
  m.odin_temperature = rc.get<double>("odin_temperature", std::nullopt,
                                      m.odin_temperature);
  m.mcd_min_samples =
      rc.get<int>("mcd_min_samples", std::nullopt, m.mcd_min_samples);
  m.check();
  return m;
}

inline void write_text(const std::string &path, const std::string &text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out || !(out << text) || !out.flush()) {
    throw IoError("cannot write '" + path + "'");
  }
}

inline int cmd_synth(const Flags &f, std::ostream &out) {
  auto rc = RunConfig::load("synth", f.config);
  auto cfg = synth::synth_config_from_json(rc.section("synth"));
  cfg.seed = rc.get<std::uint64_t>("seed", f.seed, cfg.seed);
  const auto dir = rc.require<std::string>("out", f.out);
  rc.record("synth", synth::synth_config_to_json(cfg));
  rc.echo(out);

  const auto data = synth::generate(cfg);
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) {
    throw IoError("cannot create '" + dir + "': " + ec.message());
  }
  const auto train_path = (std::filesystem::path(dir) / "train_features.jsonl").string();
  const auto test_path = (std::filesystem::path(dir) / "test_features.jsonl").string();
  synth::save_features(data.train, train_path);
  synth::save_features(data.test, test_path);
  out << "wrote " << train_path << " (" << data.train.samples.size()
      << " samples)\n";
  out << "wrote " << test_path << " (" << data.test.samples.size()
      << " samples)\n";
  return 0;
}

inline int cmd_train(const Flags &f, std::ostream &out) {
  auto rc = RunConfig::load("train", f.config);
  auto cfg = synth::train_config_from_json(rc.section("train"));
  cfg.seed = rc.get<std::uint64_t>("seed", f.seed, cfg.seed);
  const auto features = rc.require<std::string>("features", f.features);
  const auto path = rc.require<std::string>("out", f.out);
  rc.record("train", synth::train_config_to_json(cfg));
  rc.echo(out);

  const auto res = synth::train(synth::load_features(features), cfg);
  synth::save_model(res.model, path);
  out << "final_loss=" << format_fraction(res.final_loss)
      << " train_accuracy=" << format_fraction(res.train_accuracy) << '\n';
  out << "wrote " << path << '\n';
  return 0;
}

inline int cmd_predict(const Flags &f, std::ostream &out) {
  auto rc = RunConfig::load("predict", f.config);
  const auto model_path = rc.require<std::string>("model", f.model);
  const auto features = rc.require<std::string>("features", f.features);
  const auto path = rc.require<std::string>("out", f.out);
  const int mc = rc.get<int>("mc_samples", f.mc_samples, 16);
  const auto seed = rc.get<std::uint64_t>("seed", f.seed, 0);
  rc.echo(out);

  const auto model = synth::load_model(model_path);
  const auto manifest =
      synth::predict(model, synth::load_features(features), mc, seed);
  save_manifest(manifest, path);
  out << "wrote " << path << " (" << manifest.records.size() << " records)\n";
  return 0;
}

inline int cmd_fit_views(const Flags &f, std::ostream &out) {
  auto rc = RunConfig::load("fit-views", f.config);
  const auto manifest = rc.require<std::string>("manifest", f.manifest);
  const auto path = rc.require<std::string>("out", f.out);
  const auto metric = resolve_metric(rc, f);
  rc.echo(out);

  const auto train = load_manifest(manifest);
  const auto res = fit(train, metric);
  for (int c : res.table.fallback_classes) {
    out << "warning: class " << c
        << " has no training records; using fallback view '"
        << res.table.per_class[static_cast<std::size_t>(c)] << "'\n";
  }
  for (std::size_t c = 0; c < res.table.per_class.size(); ++c) {
    out << "class " << c << " -> " << res.table.per_class[c] << '\n';
  }
  save_view_table(res.table, path);
  out << "wrote " << path << '\n';
  return 0;
}

inline int cmd_infer(const Flags &f, std::ostream &out) {
  auto rc = RunConfig::load("infer", f.config);
  const auto manifest = rc.require<std::string>("manifest", f.manifest);
  const auto vtable_path = rc.require<std::string>("vtable", f.vtable);
  const auto metric = resolve_metric(rc, f);
  const bool force =
      rc.get<bool>("force_apply", f.force_apply ? std::optional<bool>(true)
                                                : std::nullopt,
                   false);
  const double tau = force ? rc.get<double>("tau", f.tau, 0.0)
                           : rc.require<double>("tau", f.tau);
  const auto out_path = rc.get<std::string>("out", f.out, "");
  rc.echo(out);

  const auto test = load_manifest(manifest);
  const auto vtable = load_view_table(vtable_path);
  const auto res = infer_all(test, vtable, Threshold{tau}, metric, force);
  if (!out_path.empty()) {
    std::ostringstream ss;
    write_decisions(res.decisions, ss);
    write_text(out_path, ss.str());
    out << "wrote " << out_path << '\n';
  }
  out << "n_augmented=" << res.n_augmented << '\n';
  if (res.accuracy) {
    out << "accuracy=" << format_fraction(*res.accuracy) << '\n';
  }
  return 0;
}

inline int cmd_sweep(const Flags &f, std::ostream &out) {
  auto rc = RunConfig::load("sweep", f.config);
  const auto manifest = rc.require<std::string>("manifest", f.manifest);
  const auto vtable_path = rc.require<std::string>("vtable", f.vtable);
  const auto metric = resolve_metric(rc, f);
  const int points = rc.get<int>("points", f.points, kDefaultSweepPoints);
  const auto seed = rc.get<std::uint64_t>("seed", f.seed, 0);
  const auto out_path = rc.get<std::string>("out", f.out, "");
  rc.echo(out);

  const auto test = load_manifest(manifest);
  const auto vtable = load_view_table(vtable_path);
  SweepRun run;
  run.sweep = sweep(test, vtable, metric, points);
  run.baselines.single_view_accuracy = single_view_accuracy(test);
  run.baselines.random_aug_accuracy = random_aug_accuracy(test, seed);
  run.baselines.rng_seed = seed;

  out << "single_view_accuracy=" << format_fraction(run.baselines.single_view_accuracy) << '\n';
  out << "random_aug_accuracy=" << format_fraction(run.baselines.random_aug_accuracy) << '\n';
  for (std::size_t i = 0; i < run.sweep.taus.size(); ++i) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "%.9g", run.sweep.taus[i]);
    out << "point=" << i << " tau=" << buf
        << " accuracy=" << format_fraction(run.sweep.accuracies[i])
        << " n_augmented=" << run.sweep.n_augmented[i] << '\n';
  }
  out << "best_index=" << run.sweep.best_index
      << " best_accuracy=" << format_fraction(run.sweep.best_accuracy) << '\n';
  if (!out_path.empty()) {
    write_text(out_path, dump_sweep_run(run));
    out << "wrote " << out_path << '\n';
  }
  return 0;
}

inline int cmd_report(const Flags &f, std::ostream &out) {
  auto rc = RunConfig::load("report", f.config);
  auto files = f.sweeps;
  if (files.empty()) {
    files = rc.get<std::vector<std::string>>("sweeps", std::nullopt, {});
  } else {
    rc.record("sweeps", files);
  }
  if (files.empty()) {
    throw UsageError("report: missing required --sweeps");
  }
  const auto dir = rc.require<std::string>("out", f.out);
  rc.echo(out);

  std::vector<SweepResult> sweeps;
  BaselineReport baselines;
  for (std::size_t i = 0; i < files.size(); ++i) {
    auto run = load_sweep_run(files[i]);
    if (i == 0) {
      baselines = run.baselines;
    } else if (!(run.baselines == baselines)) {
      throw ValidationError("sweep file '" + files[i] +
                            "' has different baselines than '" + files[0] +
                            "'; all sweeps must come from one test set and seed");
    }
    sweeps.push_back(std::move(run.sweep));
  }
  report(baselines, sweeps, dir);
  out << comparison_table_csv(baselines, sweeps);
  out << threshold_table_csv(sweeps);
  out << "wrote report to " << dir << '\n';
  return 0;
}

} // namespace detail

/// Runs one invocation. Returns the process exit status.
inline int run(std::vector<std::string> args, std::ostream &out,
               std::ostream &err) {
  CLI::App app{"Uncertainty-guided multi-view test-time augmentation", "mvtta"};
  app.require_subcommand(1);
  Flags f;

  auto common = [&](CLI::App *sub) {
    sub->add_option("--config", f.config, "JSON config file");
  };
  auto metric_opt = [&](CLI::App *sub) {
    sub->add_option("--metric", f.metric,
                    "entropy | nll | brier | odin | mcd | gradnorm");
  };

  auto *synth = app.add_subcommand("synth", "generate synthetic multi-view features");
  common(synth);
  synth->add_option("--seed", f.seed);
  synth->add_option("--out", f.out, "output directory");

  auto *train = app.add_subcommand("train", "fit the toy classifier on default-view features");
  common(train);
  train->add_option("--features", f.features);
  train->add_option("--seed", f.seed);
  train->add_option("--out", f.out, "model file");

  auto *predict = app.add_subcommand("predict", "emit a prediction manifest");
  common(predict);
  predict->add_option("--model", f.model);
  predict->add_option("--features", f.features);
  predict->add_option("--mc-samples", f.mc_samples);
  predict->add_option("--seed", f.seed, "dropout mask seed");
  predict->add_option("--out", f.out, "manifest file");

  auto *fitv = app.add_subcommand("fit-views", "select the optimal augmentation view per class");
  common(fitv);
  metric_opt(fitv);
  fitv->add_option("--manifest", f.manifest, "training manifest");
  fitv->add_option("--out", f.out, "view table file");

  auto *infer = app.add_subcommand("infer", "threshold-gated TTA at one tau");
  common(infer);
  metric_opt(infer);
  infer->add_option("--manifest", f.manifest, "test manifest");
  infer->add_option("--vtable", f.vtable);
  infer->add_option("--tau", f.tau);
  infer->add_flag("--force-apply", f.force_apply, "augment every record");
  infer->add_option("--out", f.out, "decision dump (JSON lines)");

  auto *sw = app.add_subcommand("sweep", "tau sweep plus baselines");
  common(sw);
  metric_opt(sw);
  sw->add_option("--manifest", f.manifest, "test manifest");
  sw->add_option("--vtable", f.vtable);
  sw->add_option("--points", f.points);
  sw->add_option("--seed", f.seed, "random-augmentation baseline seed");
  sw->add_option("--out", f.out, "sweep file");

  auto *rep = app.add_subcommand("report", "tables and sweep curves");
  common(rep);
  rep->add_option("--sweeps", f.sweeps, "sweep files")->expected(1, -1);
  rep->add_option("--out", f.out, "output directory");

  std::reverse(args.begin(), args.end());
  try {
    app.parse(args);
  } catch (const CLI::CallForHelp &) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp &) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError &e) {
    err << "error: " << e.what() << '\n' << app.help();
    return 2;
  }

  try {
    if (synth->parsed()) return detail::cmd_synth(f, out);
    if (train->parsed()) return detail::cmd_train(f, out);
    if (predict->parsed()) return detail::cmd_predict(f, out);
    if (fitv->parsed()) return detail::cmd_fit_views(f, out);
    if (infer->parsed()) return detail::cmd_infer(f, out);
    if (sw->parsed()) return detail::cmd_sweep(f, out);
    if (rep->parsed()) return detail::cmd_report(f, out);
  } catch (const UsageError &e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception &e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}

inline int main(int argc, char **argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(std::move(args), std::cout, std::cerr);
}

} // namespace mvtta::cli
