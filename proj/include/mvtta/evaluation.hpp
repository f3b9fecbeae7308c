#pragma once

// Baselines, the threshold sweep and report rendering.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mvtta/error.hpp"
#include "mvtta/prediction_store.hpp"
#include "mvtta/rng.hpp"
#include "mvtta/stage1_selector.hpp"
#include "mvtta/stage2_inference.hpp"
#include "mvtta/uncertainty.hpp"

namespace mvtta {

inline constexpr int kDefaultSweepPoints = 11;

struct SweepResult {
  MetricConfig metric;
  std::vector<double> taus;
  std::vector<double> accuracies;
  std::vector<std::size_t> n_augmented;
  std::size_t best_index = 0;
  double best_accuracy = 0.0;
  std::size_t num_records = 0;

  /// Accuracy with the optimal view applied to every test record.
  double min_tau_accuracy() const { return accuracies.front(); }

  bool operator==(const SweepResult &) const = default;
};

struct BaselineReport {
  double single_view_accuracy = 0.0;
  double random_aug_accuracy = 0.0;
  std::uint64_t rng_seed = 0;

  bool operator==(const BaselineReport &) const = default;
};

namespace detail {

inline void require_labeled(const Manifest &m) {
  if (m.records.empty()) {
    throw ValidationError("empty test set");
  }
  for (const auto &r : m.records) {
    if (!r.labeled()) {
      throw ValidationError("sample '" + r.sample_id +
                            "' has no true_class; accuracy needs labels");
    }
  }
}

inline std::string percent(double fraction) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", 100.0 * fraction);
  return buf;
}

} // namespace detail

inline double single_view_accuracy(const Manifest &test) {
  detail::require_labeled(test);
  std::size_t correct = 0;
  for (const auto &r : test.records) {
    const auto p = softmax(r.view(test.view_set.default_view).logits);
    correct += static_cast<int>(argmax(p)) == r.true_class ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(test.records.size());
}

/// Fuses every record with one augmentation view drawn uniformly by
/// rng::uniform_below on a std::mt19937_64 seeded with `seed`, one draw per
/// record in manifest order.
inline double random_aug_accuracy(const Manifest &test, std::uint64_t seed) {
  detail::require_labeled(test);
  const auto &views = test.view_set;
  if (views.augmentation_views.empty()) {
    throw ValidationError("no augmentation views");
  }
  rng::Engine gen(seed);
  std::size_t correct = 0;
  for (const auto &r : test.records) {
    const auto j = rng::uniform_below(gen, views.size());
    const auto &id = views.augmentation_views[j];
    if (!r.views.contains(id)) {
      throw ValidationError("sample '" + r.sample_id +
                            "': missing augmentation view '" + id + "'");
    }
    const auto p_def = softmax(r.view(views.default_view).logits);
    const auto p_aug = softmax(r.view(id).logits);
    Vector p(p_def.size());
    for (std::size_t k = 0; k < p.size(); ++k) {
      p[k] = (p_def[k] + p_aug[k]) / 2.0;
    }
    correct += static_cast<int>(argmax(p)) == r.true_class ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(test.records.size());
}

/// `points` equidistant values from min to max; the endpoints are exact.
inline std::vector<double> tau_grid(std::span<const double> uncertainties,
                                    int points = kDefaultSweepPoints) {
  if (uncertainties.empty()) {
    throw ValidationError("tau grid needs at least one uncertainty value");
  }
  if (points < 2) {
    throw ValidationError("tau grid needs at least 2 points");
  }
  const auto [lo_it, hi_it] =
      std::minmax_element(uncertainties.begin(), uncertainties.end());
  const double lo = *lo_it;
  const double hi = *hi_it;
  std::vector<double> t(static_cast<std::size_t>(points));
  const double step = (hi - lo) / static_cast<double>(points - 1);
  for (int i = 0; i < points; ++i) {
    t[static_cast<std::size_t>(i)] = lo + static_cast<double>(i) * step;
  }
  t.back() = hi;
  return t;
}

/// Index 0 forces augmentation on every record; later indices gate on u > tau.
inline SweepResult sweep(const Manifest &test, const OptimalViewTable &vtable,
                         const MetricConfig &cfg,
                         int points = kDefaultSweepPoints) {
  detail::check_test_manifest(test, vtable, cfg);
  detail::require_labeled(test);
  const auto u = default_uncertainties(test, cfg);
  std::vector<double> values;
  values.reserve(u.size());
  for (const auto &x : u) {
    values.push_back(x.value);
  }

  SweepResult s;
  s.metric = cfg;
  s.num_records = test.records.size();
  s.taus = tau_grid(values, points);
  for (std::size_t i = 0; i < s.taus.size(); ++i) {
    const auto res = infer_with(test, vtable, u, Threshold{s.taus[i]}, i == 0);
    s.accuracies.push_back(*res.accuracy);
    s.n_augmented.push_back(res.n_augmented);
  }
  s.best_index = static_cast<std::size_t>(
      std::max_element(s.accuracies.begin(), s.accuracies.end()) -
      s.accuracies.begin());
  s.best_accuracy = s.accuracies[s.best_index];
  return s;
}

// ---------------------------------------------------------------------------
// Sweep files: the output of one sweep run together with its baselines.

struct SweepRun {
  BaselineReport baselines;
  SweepResult sweep;

  bool operator==(const SweepRun &) const = default;
};

inline nlohmann::ordered_json baselines_to_json(const BaselineReport &b) {
  nlohmann::ordered_json j;
  j["single_view_accuracy"] = b.single_view_accuracy;
  j["random_aug_accuracy"] = b.random_aug_accuracy;
  j["rng_seed"] = b.rng_seed;
  return j;
}

inline nlohmann::ordered_json sweep_to_json(const SweepResult &s) {
  nlohmann::ordered_json j;
  j["metric"] = metric_to_json(s.metric);
  j["num_records"] = s.num_records;
  j["taus"] = s.taus;
  j["accuracies"] = s.accuracies;
  j["n_augmented"] = s.n_augmented;
  j["best_index"] = s.best_index;
  j["best_accuracy"] = s.best_accuracy;
  return j;
}

inline std::string dump_sweep_run(const SweepRun &run) {
  nlohmann::ordered_json j;
  j["baselines"] = baselines_to_json(run.baselines);
  j["sweep"] = sweep_to_json(run.sweep);
  return j.dump(2) + "\n";
}

inline SweepRun parse_sweep_run(const std::string &text,
                                const std::string &source = "<text>") {
  SweepRun run;
  try {
    const auto j = nlohmann::json::parse(text);
    const auto &b = j.at("baselines");
    run.baselines.single_view_accuracy = b.at("single_view_accuracy").get<double>();
    run.baselines.random_aug_accuracy = b.at("random_aug_accuracy").get<double>();
    run.baselines.rng_seed = b.at("rng_seed").get<std::uint64_t>();
    const auto &s = j.at("sweep");
    run.sweep.metric = metric_from_json(s.at("metric"));
    run.sweep.num_records = s.at("num_records").get<std::size_t>();
    run.sweep.taus = s.at("taus").get<std::vector<double>>();
    run.sweep.accuracies = s.at("accuracies").get<std::vector<double>>();
    run.sweep.n_augmented = s.at("n_augmented").get<std::vector<std::size_t>>();
    run.sweep.best_index = s.at("best_index").get<std::size_t>();
    run.sweep.best_accuracy = s.at("best_accuracy").get<double>();
  } catch (const nlohmann::json::exception &e) {
    throw ValidationError(source + ": malformed sweep file: " + e.what());
  }
  const auto &s = run.sweep;
  if (s.taus.empty() || s.accuracies.size() != s.taus.size() ||
      s.n_augmented.size() != s.taus.size() || s.best_index >= s.taus.size()) {
    throw ValidationError(source + ": sweep arrays are inconsistent");
  }
  return run;
}

inline SweepRun load_sweep_run(const std::string &path) {
  std::ifstream in(path);
  if (!in) {
    throw IoError("cannot open sweep file '" + path + "'");
  }
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_sweep_run(ss.str(), path);
}

// ---------------------------------------------------------------------------
// Report rendering

/// Mean over metrics of each metric's best sweep accuracy.
inline double int_tta_accuracy(std::span<const SweepResult> sweeps) {
  if (sweeps.empty()) {
    throw ValidationError("report needs at least one sweep");
  }
  double s = 0.0;
  for (const auto &x : sweeps) {
    s += x.best_accuracy;
  }
  return s / static_cast<double>(sweeps.size());
}

inline std::string comparison_table_csv(const BaselineReport &b,
                                        std::span<const SweepResult> sweeps) {
  std::string out = "single_view,random_aug,int_tta\n";
  out += detail::percent(b.single_view_accuracy) + "," +
         detail::percent(b.random_aug_accuracy) + "," +
         detail::percent(int_tta_accuracy(sweeps)) + "\n";
  return out;
}

inline std::string threshold_table_csv(std::span<const SweepResult> sweeps) {
  std::string out = "metric,min_tau,best\n";
  for (const auto &s : sweeps) {
    out += std::string(metric_name(s.metric.kind)) + "," +
           detail::percent(s.min_tau_accuracy()) + "," +
           detail::percent(s.best_accuracy) + "\n";
  }
  return out;
}

/// Accuracy vs. tau index, with the single-view accuracy as a dashed line.
inline std::string render_sweep_svg(const SweepResult &s, double baseline) {
  constexpr double W = 640, H = 400, L = 70, R = 20, T = 40, B = 60;
  const double pw = W - L - R;
  const double ph = H - T - B;

  double lo = baseline;
  double hi = baseline;
  for (double a : s.accuracies) {
    lo = std::min(lo, a);
    hi = std::max(hi, a);
  }
  const double pad = std::max(0.01, 0.1 * (hi - lo));
  lo = std::max(0.0, lo - pad);
  hi = std::min(1.0, hi + pad);
  if (hi <= lo) {
    hi = lo + 0.01;
  }

  const auto n = s.accuracies.size();
  auto x_of = [&](std::size_t i) {
    return n < 2 ? L + pw / 2 : L + pw * static_cast<double>(i) /
                                        static_cast<double>(n - 1);
  };
  auto y_of = [&](double a) { return T + ph * (hi - a) / (hi - lo); };
  auto num = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return std::string(buf);
  };

  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W
    << "\" height=\"" << H << "\" viewBox=\"0 0 " << W << ' ' << H << "\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" "
       "font-family=\"sans-serif\" font-size=\"16\">Threshold sweep ("
    << metric_name(s.metric.kind) << ")</text>\n";
  // axes
  o << "<path d=\"M" << L << ' ' << T << " V" << T + ph << " H" << L + pw
    << "\" fill=\"none\" stroke=\"black\"/>\n";
  for (std::size_t i = 0; i < n; ++i) {
    o << "<text x=\"" << num(x_of(i)) << "\" y=\"" << T + ph + 18
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
         "font-size=\"11\">"
      << i << "</text>\n";
  }
  for (int k = 0; k <= 4; ++k) {
    const double a = lo + (hi - lo) * k / 4.0;
    o << "<text x=\"" << L - 6 << "\" y=\"" << num(y_of(a) + 4)
      << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">"
      << num(100.0 * a) << "</text>\n";
  }
  o << "<text x=\"" << L + pw / 2 << "\" y=\"" << H - 14
    << "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
       "font-size=\"13\">tau index</text>\n";
  o << "<text x=\"16\" y=\"" << T + ph / 2
    << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\" "
       "transform=\"rotate(-90 16 "
    << T + ph / 2 << ")\">accuracy (%)</text>\n";

  o << "<line x1=\"" << L << "\" y1=\"" << num(y_of(baseline)) << "\" x2=\""
    << L + pw << "\" y2=\"" << num(y_of(baseline))
    << "\" stroke=\"gray\" stroke-dasharray=\"6 4\"/>\n";

  o << "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" "
       "points=\"";
  for (std::size_t i = 0; i < n; ++i) {
    o << (i ? " " : "") << num(x_of(i)) << ',' << num(y_of(s.accuracies[i]));
  }
  o << "\"/>\n";
  for (std::size_t i = 0; i < n; ++i) {
    o << "<circle cx=\"" << num(x_of(i)) << "\" cy=\""
      << num(y_of(s.accuracies[i])) << "\" r=\"4\" fill=\"steelblue\"/>\n";
  }
  o << "</svg>\n";
  return o.str();
}

namespace detail {

inline void write_text(const std::filesystem::path &p, const std::string &text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out || !(out << text) || !out.flush()) {
    throw IoError("cannot write '" + p.string() + "'");
  }
}

} // namespace detail

/// Writes comparison.csv, thresholds.csv, report.json and one
/// sweep_<metric>.svg per sweep into `out_dir`.
inline void report(const BaselineReport &baselines,
                   std::span<const SweepResult> sweeps,
                   const std::filesystem::path &out_dir) {
  if (sweeps.empty()) {
    throw ValidationError("report needs at least one sweep");
  }
  std::set<MetricKind> kinds;
  for (const auto &s : sweeps) {
    if (!kinds.insert(s.metric.kind).second) {
      throw ValidationError("duplicate sweep for metric '" +
                            std::string(metric_name(s.metric.kind)) + "'");
    }
  }
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) {
    throw IoError("cannot create '" + out_dir.string() + "': " + ec.message());
  }

  detail::write_text(out_dir / "comparison.csv",
                     comparison_table_csv(baselines, sweeps));
  detail::write_text(out_dir / "thresholds.csv", threshold_table_csv(sweeps));

  nlohmann::ordered_json j;
  j["baselines"] = baselines_to_json(baselines);
  j["int_tta_accuracy"] = int_tta_accuracy(sweeps);
  auto arr = nlohmann::ordered_json::array();
  for (const auto &s : sweeps) {
    auto js = sweep_to_json(s);
    js["min_tau_accuracy"] = s.min_tau_accuracy();
    arr.push_back(std::move(js));
  }
  j["sweeps"] = std::move(arr);
  detail::write_text(out_dir / "report.json", j.dump(2) + "\n");

  for (const auto &s : sweeps) {
    detail::write_text(out_dir / ("sweep_" +
                                  std::string(metric_name(s.metric.kind)) +
                                  ".svg"),
                       render_sweep_svg(s, baselines.single_view_accuracy));
  }
}

} // namespace mvtta
