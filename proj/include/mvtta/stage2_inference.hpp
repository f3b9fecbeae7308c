#pragma once

// Threshold-gated test-time augmentation.

#include <cmath>
#include <cstddef>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mvtta/error.hpp"
#include "mvtta/prediction_store.hpp"
#include "mvtta/stage1_selector.hpp"
#include "mvtta/uncertainty.hpp"

namespace mvtta {

struct Threshold {
  double tau = 0.0;
};

struct TtaDecision {
  std::string sample_id;
  Uncertainty u_default;
  bool applied = false;
  std::optional<ViewId> chosen_view;
  Vector p_default;
  std::optional<Vector> p_aug;
  Vector p_final;
  std::size_t predicted_class = 0;

  bool operator==(const TtaDecision &) const = default;
};

struct InferResult {
  std::vector<TtaDecision> decisions;
  /// Absent when any record is unlabeled.
  std::optional<double> accuracy;
  std::size_t n_augmented = 0;
};

namespace detail {

inline void check_table_for(const OptimalViewTable &vtable,
                            const MetricConfig &cfg) {
  if (!(vtable.metric == cfg)) {
    throw ValidationError("view table was fitted with metric '" +
                          std::string(metric_name(vtable.metric.kind)) +
                          "' but inference uses '" +
                          std::string(metric_name(cfg.kind)) +
                          "' (or different metric parameters)");
  }
}

} // namespace detail

/// Gate and fuse with a precomputed default-view uncertainty.
inline TtaDecision decide(const PredictionRecord &record,
                          const OptimalViewTable &vtable,
                          const Uncertainty &u_default, Threshold tau,
                          bool force_apply) {
  TtaDecision d;
  d.sample_id = record.sample_id;
  d.u_default = u_default;
  d.p_default = softmax(record.view(vtable.view_set.default_view).logits);
  if (d.p_default.size() != vtable.per_class.size()) {
    throw ValidationError("sample '" + record.sample_id + "': view table covers " +
                          std::to_string(vtable.per_class.size()) +
                          " classes, prediction has " +
                          std::to_string(d.p_default.size()));
  }

  d.applied = force_apply || u_default.value > tau.tau;
  if (d.applied) {
    const auto c = argmax(d.p_default);
    const auto &view = vtable.per_class[c];
    auto it = record.views.find(view);
    if (it == record.views.end()) {
      throw ValidationError("sample '" + record.sample_id +
                            "': chosen view '" + view + "' missing");
    }
    auto p_aug = softmax(it->second.logits);
    if (p_aug.size() != d.p_default.size()) {
      throw ValidationError("sample '" + record.sample_id +
                            "': view '" + view + "' has wrong logit length");
    }
    d.p_final.resize(p_aug.size());
    for (std::size_t k = 0; k < p_aug.size(); ++k) {
      d.p_final[k] = (d.p_default[k] + p_aug[k]) / 2.0;
    }
    d.chosen_view = view;
    d.p_aug = std::move(p_aug);
  } else {
    d.p_final = d.p_default;
  }
  d.predicted_class = argmax(d.p_final);
  return d;
}

inline TtaDecision infer_one(const PredictionRecord &record,
                             const OptimalViewTable &vtable, Threshold tau,
                             const MetricConfig &cfg, bool force_apply) {
  detail::check_table_for(vtable, cfg);
  const auto u = uncertainty_of_view(record, vtable.view_set.default_view, cfg);
  return decide(record, vtable, u, tau, force_apply);
}

/// Runs Stage-2 over precomputed default-view uncertainties.
inline InferResult infer_with(const Manifest &test,
                              const OptimalViewTable &vtable,
                              std::span<const Uncertainty> u_default,
                              Threshold tau, bool force_apply) {
  InferResult res;
  res.decisions.reserve(test.records.size());
  std::size_t correct = 0;
  bool labeled = true;
  for (std::size_t i = 0; i < test.records.size(); ++i) {
    const auto &r = test.records[i];
    auto d = decide(r, vtable, u_default[i], tau, force_apply);
    res.n_augmented += d.applied ? 1 : 0;
    labeled = labeled && r.labeled();
    if (r.labeled() && static_cast<int>(d.predicted_class) == r.true_class) {
      ++correct;
    }
    res.decisions.push_back(std::move(d));
  }
  if (labeled) {
    res.accuracy = static_cast<double>(correct) /
                   static_cast<double>(test.records.size());
  }
  return res;
}

inline std::vector<Uncertainty> default_uncertainties(const Manifest &test,
                                                      const MetricConfig &cfg) {
  std::vector<Uncertainty> u;
  u.reserve(test.records.size());
  for (const auto &r : test.records) {
    u.push_back(uncertainty_of_view(r, test.view_set.default_view, cfg));
  }
  return u;
}

namespace detail {

inline void check_test_manifest(const Manifest &test,
                                const OptimalViewTable &vtable,
                                const MetricConfig &cfg) {
  check_table_for(vtable, cfg);
  if (test.records.empty()) {
    throw ValidationError("empty test set");
  }
  if (auto v = validate(test); !v.empty()) {
    throw ValidationError("invalid test manifest: " + v.front());
  }
  if (test.view_set.default_view != vtable.view_set.default_view) {
    throw ValidationError("test default view '" + test.view_set.default_view +
                          "' differs from view table default '" +
                          vtable.view_set.default_view + "'");
  }
  if (static_cast<std::size_t>(test.num_classes) != vtable.per_class.size()) {
    throw ValidationError("test manifest has " +
                          std::to_string(test.num_classes) +
                          " classes, view table covers " +
                          std::to_string(vtable.per_class.size()));
  }
}

} // namespace detail

inline InferResult infer_all(const Manifest &test,
                             const OptimalViewTable &vtable, Threshold tau,
                             const MetricConfig &cfg, bool force_apply) {
  detail::check_test_manifest(test, vtable, cfg);
  const auto u = default_uncertainties(test, cfg);
  return infer_with(test, vtable, u, tau, force_apply);
}

/// One JSON line per decision.
inline void write_decisions(const std::vector<TtaDecision> &decisions,
                            std::ostream &os) {
  for (const auto &d : decisions) {
    nlohmann::ordered_json j;
    j["sample_id"] = d.sample_id;
    j["metric"] = std::string(metric_name(d.u_default.metric));
    j["u_default"] = d.u_default.value;
    j["applied"] = d.applied;
    if (d.chosen_view) {
      j["chosen_view"] = *d.chosen_view;
    }
    j["p_default"] = d.p_default;
    if (d.p_aug) {
      j["p_aug"] = *d.p_aug;
    }
    j["p_final"] = d.p_final;
    j["predicted_class"] = d.predicted_class;
    os << j.dump() << '\n';
  }
}

} // namespace mvtta
