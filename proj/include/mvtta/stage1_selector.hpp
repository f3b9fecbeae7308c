#pragma once

// Per-class optimal augmentation view selection.
//
// For every training record the augmentation view with the lowest uncertainty
// wins a vote in its class row of the K x N selection matrix. Each class then
// takes the view with the most votes. Ties go to the lowest view index in both
// steps. A class with no training records falls back to the view with the
// largest column sum.

#include <cstddef>
#include <cstdint>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mvtta/error.hpp"
#include "mvtta/prediction_store.hpp"
#include "mvtta/uncertainty.hpp"

namespace mvtta {

class SelectionMatrix {
public:
  SelectionMatrix() = default;
  SelectionMatrix(std::size_t num_classes, std::size_t num_views)
      : num_classes_(num_classes), num_views_(num_views),
        counts_(num_classes * num_views, 0) {}

  std::size_t num_classes() const { return num_classes_; }
  std::size_t num_views() const { return num_views_; }

  std::uint64_t &at(std::size_t c, std::size_t n) {
    return counts_.at(c * num_views_ + n);
  }
  std::uint64_t at(std::size_t c, std::size_t n) const {
    return counts_.at(c * num_views_ + n);
  }

  std::uint64_t row_sum(std::size_t c) const {
    std::uint64_t s = 0;
    for (std::size_t n = 0; n < num_views_; ++n) {
      s += at(c, n);
    }
    return s;
  }

  std::vector<std::uint64_t> column_sums() const {
    std::vector<std::uint64_t> s(num_views_, 0);
    for (std::size_t c = 0; c < num_classes_; ++c) {
      for (std::size_t n = 0; n < num_views_; ++n) {
        s[n] += at(c, n);
      }
    }
    return s;
  }

  std::uint64_t total() const {
    std::uint64_t s = 0;
    for (auto x : counts_) {
      s += x;
    }
    return s;
  }

  /// Lowest index attaining the row maximum.
  std::size_t row_argmax(std::size_t c) const {
    std::size_t best = 0;
    for (std::size_t n = 1; n < num_views_; ++n) {
      if (at(c, n) > at(c, best)) {
        best = n;
      }
    }
    return best;
  }

  bool operator==(const SelectionMatrix &) const = default;

private:
  std::size_t num_classes_ = 0;
  std::size_t num_views_ = 0;
  std::vector<std::uint64_t> counts_;
};

struct OptimalViewTable {
  /// Augmentation view chosen for each class.
  std::vector<ViewId> per_class;
  ViewSet view_set;
  MetricConfig metric;
  SelectionMatrix source_counts;
  std::vector<int> fallback_classes;

  bool operator==(const OptimalViewTable &) const = default;

  std::vector<std::string> violations() const {
    auto out = view_set.violations();
    for (std::size_t c = 0; c < per_class.size(); ++c) {
      if (!view_set.augmentation_index(per_class[c])) {
        out.push_back("class " + std::to_string(c) + ": view '" + per_class[c] +
                      "' is not an augmentation view");
      }
    }
    if (source_counts.num_classes() != per_class.size() ||
        source_counts.num_views() != view_set.size()) {
      out.emplace_back("selection counts do not match K x N");
    }
    return out;
  }
};

struct Stage1Fit {
  SelectionMatrix selection;
  OptimalViewTable table;
};

/// argmin over augmentation views of `uncertainty(record, view)`.
/// `uncertainty` returns a double; the default view never competes.
template <class UncertaintyFn>
std::size_t select_optimal_view(const PredictionRecord &record,
                                const ViewSet &views,
                                UncertaintyFn &&uncertainty) {
  if (views.augmentation_views.empty()) {
    throw ValidationError("no augmentation views to select from");
  }
  std::size_t best = 0;
  double best_u = 0.0;
  for (std::size_t j = 0; j < views.size(); ++j) {
    const auto &id = views.augmentation_views[j];
    if (!record.views.contains(id)) {
      throw ValidationError("sample '" + record.sample_id +
                            "': missing augmentation view '" + id + "'");
    }
    const double u = std::invoke(uncertainty, record, id);
    if (j == 0 || u < best_u) {
      best = j;
      best_u = u;
    }
  }
  return best;
}

inline std::size_t select_optimal_view(const PredictionRecord &record,
                                       const MetricConfig &cfg,
                                       const ViewSet &views) {
  return select_optimal_view(
      record, views, [&](const PredictionRecord &r, const ViewId &v) {
        return uncertainty_of_view(r, v, cfg).value;
      });
}

template <class UncertaintyFn>
Stage1Fit fit(const Manifest &train, const MetricConfig &cfg,
              UncertaintyFn &&uncertainty) {
  cfg.check();
  if (train.records.empty()) {
    throw ValidationError("empty training manifest");
  }
  if (auto v = validate(train); !v.empty()) {
    throw ValidationError("invalid training manifest: " + v.front());
  }
  const auto K = static_cast<std::size_t>(train.num_classes);
  const auto N = train.view_set.size();

  SelectionMatrix s(K, N);
  for (const auto &r : train.records) {
    if (!r.labeled()) {
      throw ValidationError("sample '" + r.sample_id +
                            "': training records need a true_class");
    }
    const auto n = select_optimal_view(r, train.view_set, uncertainty);
    ++s.at(static_cast<std::size_t>(r.true_class), n);
  }

  OptimalViewTable table;
  table.view_set = train.view_set;
  table.metric = cfg;
  table.source_counts = s;

  std::size_t fallback = 0;
  {
    const auto cols = s.column_sums();
    for (std::size_t n = 1; n < N; ++n) {
      if (cols[n] > cols[fallback]) {
        fallback = n;
      }
    }
  }
  for (std::size_t c = 0; c < K; ++c) {
    std::size_t n = s.row_argmax(c);
    if (s.row_sum(c) == 0) {
      n = fallback;
      table.fallback_classes.push_back(static_cast<int>(c));
    }
    table.per_class.push_back(train.view_set.augmentation_views[n]);
  }
  return {std::move(s), std::move(table)};
}

inline Stage1Fit fit(const Manifest &train, const MetricConfig &cfg) {
  return fit(train, cfg, [&](const PredictionRecord &r, const ViewId &v) {
    return uncertainty_of_view(r, v, cfg).value;
  });
}

// ---------------------------------------------------------------------------
// Table file: one pretty-printed JSON object.

inline nlohmann::ordered_json metric_to_json(const MetricConfig &m) {
  nlohmann::ordered_json j;
  j["kind"] = std::string(metric_name(m.kind));
  j["odin_temperature"] = m.odin_temperature;
  j["mcd_min_samples"] = m.mcd_min_samples;
  return j;
}

inline MetricConfig metric_from_json(const nlohmann::json &j) {
  MetricConfig m;
  m.kind = parse_metric(j.at("kind").get<std::string>());
  m.odin_temperature = j.value("odin_temperature", m.odin_temperature);
  m.mcd_min_samples = j.value("mcd_min_samples", m.mcd_min_samples);
  m.check();
  return m;
}

inline std::string dump_view_table(const OptimalViewTable &t) {
  nlohmann::ordered_json j;
  j["metric"] = metric_to_json(t.metric);
  j["default_view"] = t.view_set.default_view;
  j["augmentation_views"] = t.view_set.augmentation_views;
  j["per_class"] = t.per_class;
  auto rows = nlohmann::ordered_json::array();
  for (std::size_t c = 0; c < t.source_counts.num_classes(); ++c) {
    std::vector<std::uint64_t> row;
    for (std::size_t n = 0; n < t.source_counts.num_views(); ++n) {
      row.push_back(t.source_counts.at(c, n));
    }
    rows.push_back(row);
  }
  j["selection_counts"] = rows;
  j["fallback_classes"] = t.fallback_classes;
  return j.dump(2) + "\n";
}

inline OptimalViewTable parse_view_table(const std::string &text,
                                         const std::string &source = "<text>") {
  OptimalViewTable t;
  try {
    const auto j = nlohmann::json::parse(text);
    t.metric = metric_from_json(j.at("metric"));
    t.view_set.default_view = j.at("default_view").get<std::string>();
    t.view_set.augmentation_views =
        j.at("augmentation_views").get<std::vector<ViewId>>();
    t.per_class = j.at("per_class").get<std::vector<ViewId>>();
    const auto rows =
        j.at("selection_counts").get<std::vector<std::vector<std::uint64_t>>>();
    t.source_counts = SelectionMatrix(rows.size(), t.view_set.size());
    for (std::size_t c = 0; c < rows.size(); ++c) {
      if (rows[c].size() != t.view_set.size()) {
        throw ValidationError(source + ": selection_counts row " +
                              std::to_string(c) + " has wrong length");
      }
      for (std::size_t n = 0; n < rows[c].size(); ++n) {
        t.source_counts.at(c, n) = rows[c][n];
      }
    }
    t.fallback_classes = j.at("fallback_classes").get<std::vector<int>>();
  } catch (const nlohmann::json::exception &e) {
    throw ValidationError(source + ": malformed view table: " + e.what());
  }
  if (auto v = t.violations(); !v.empty()) {
    throw ValidationError(source + ": " + v.front());
  }
  return t;
}

inline void save_view_table(const OptimalViewTable &t, const std::string &path) {
  if (auto v = t.violations(); !v.empty()) {
    throw ValidationError("refusing to write invalid view table: " + v.front());
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw IoError("cannot write view table '" + path + "'");
  }
  out << dump_view_table(t);
}

inline OptimalViewTable load_view_table(const std::string &path) {
  std::ifstream in(path);
  if (!in) {
    throw IoError("cannot open view table '" + path + "'");
  }
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_view_table(ss.str(), path);
}

} // namespace mvtta
