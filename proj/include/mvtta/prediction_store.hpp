#pragma once

// Prediction data model and the line-delimited manifest format.
//
// A manifest file is UTF-8 JSON Lines. Line 1 is the header
//
//   {"name": ..., "num_classes": K, "default_view": ...,
//    "augmentation_views": [...]}
//
// and every following non-blank line is one record
//
//   {"sample_id": ..., "true_class": c,
//    "views": {view_id: {"logits": [...], "mc_logits": [[...], ...],
//                        "grad_l1": g}}}
//
// where mc_logits and grad_l1 are optional. Doubles are written in shortest
// round-trip form, so load(save(m)) == m bit for bit.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mvtta/error.hpp"

namespace mvtta {

using ViewId = std::string;
using Vector = std::vector<double>;

/// true_class value for records without a label. Accepted by validate(),
/// rejected by every accuracy-based operation.
inline constexpr int kUnlabeled = -1;

struct ViewSet {
  ViewId default_view;
  std::vector<ViewId> augmentation_views;

  std::size_t size() const { return augmentation_views.size(); }

  bool contains(const ViewId &id) const {
    return id == default_view || augmentation_index(id).has_value();
  }

  std::optional<std::size_t> augmentation_index(const ViewId &id) const {
    auto it = std::find(augmentation_views.begin(), augmentation_views.end(), id);
    if (it == augmentation_views.end()) {
      return std::nullopt;
    }
    return static_cast<std::size_t>(it - augmentation_views.begin());
  }

  std::vector<std::string> violations() const {
    std::vector<std::string> out;
    if (augmentation_views.empty()) {
      out.emplace_back("view set needs at least one augmentation view");
    }
    std::set<ViewId> seen{default_view};
    for (const auto &v : augmentation_views) {
      if (v == default_view) {
        out.push_back("default view '" + v + "' listed as augmentation view");
      } else if (!seen.insert(v).second) {
        out.push_back("duplicate augmentation view '" + v + "'");
      }
    }
    return out;
  }

  bool operator==(const ViewSet &) const = default;
};

struct ViewPrediction {
  Vector logits;
  /// Stochastic forward passes; empty when not exported.
  std::vector<Vector> mc_logits;
  std::optional<double> grad_l1;

  bool operator==(const ViewPrediction &) const = default;
};

struct PredictionRecord {
  std::string sample_id;
  int true_class = kUnlabeled;
  std::map<ViewId, ViewPrediction> views;

  bool labeled() const { return true_class != kUnlabeled; }

  const ViewPrediction &view(const ViewId &id) const {
    auto it = views.find(id);
    if (it == views.end()) {
      throw ValidationError("sample '" + sample_id + "': unknown view '" + id +
                            "'");
    }
    return it->second;
  }

  bool operator==(const PredictionRecord &) const = default;
};

struct Manifest {
  std::string name;
  int num_classes = 0;
  ViewSet view_set;
  std::vector<PredictionRecord> records;

  bool operator==(const Manifest &) const = default;
};

inline bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(),
                     [](double x) { return std::isfinite(x); });
}

/// Index of the largest entry; ties go to the lowest index.
inline std::size_t argmax(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) {
      best = i;
    }
  }
  return best;
}

/// Max-shifted softmax.
inline Vector softmax(std::span<const double> logits) {
  if (logits.size() < 2) {
    throw ValidationError("softmax needs at least 2 logits");
  }
  if (!all_finite(logits)) {
    throw ValidationError("softmax input contains non-finite values");
  }
  const double shift = logits[argmax(logits)];
  Vector p(logits.size());
  double sum = 0.0;
  for (std::size_t k = 0; k < logits.size(); ++k) {
    p[k] = std::exp(logits[k] - shift);
    sum += p[k];
  }
  for (auto &x : p) {
    x /= sum;
  }
  return p;
}

namespace detail {

inline void check_vector(std::vector<std::string> &out, const std::string &where,
                         const Vector &v, int num_classes) {
  if (static_cast<int>(v.size()) != num_classes) {
    out.push_back(where + ": logit length mismatch (expected " +
                  std::to_string(num_classes) + ", got " +
                  std::to_string(v.size()) + ")");
  } else if (!all_finite(v)) {
    out.push_back(where + ": non-finite logit");
  }
}

} // namespace detail

/// Invariant violations of one record against the manifest header.
inline std::vector<std::string> record_violations(const PredictionRecord &r,
                                                  int num_classes,
                                                  const ViewSet &view_set) {
  std::vector<std::string> out;
  const std::string who = "sample '" + r.sample_id + "'";
  if (r.sample_id.empty()) {
    out.emplace_back("empty sample_id");
  }
  if (r.true_class != kUnlabeled &&
      (r.true_class < 0 || r.true_class >= num_classes)) {
    out.push_back(who + ": true_class " + std::to_string(r.true_class) +
                  " outside [0, " + std::to_string(num_classes) + ")");
  }
  if (!r.views.contains(view_set.default_view)) {
    out.push_back(who + ": missing default view '" + view_set.default_view +
                  "'");
  }
  for (const auto &[id, vp] : r.views) {
    const std::string where = who + " view '" + id + "'";
    if (!view_set.contains(id)) {
      out.push_back(where + ": unknown view id");
      continue;
    }
    detail::check_vector(out, where, vp.logits, num_classes);
    if (vp.mc_logits.size() == 1) {
      out.push_back(where + ": mc_logits needs at least 2 samples");
    }
    for (const auto &z : vp.mc_logits) {
      detail::check_vector(out, where + " mc_logits", z, num_classes);
    }
    if (vp.grad_l1 && !(std::isfinite(*vp.grad_l1) && *vp.grad_l1 >= 0.0)) {
      out.push_back(where + ": grad_l1 must be finite and nonnegative");
    }
  }
  return out;
}

inline std::vector<std::string> header_violations(const Manifest &m) {
  std::vector<std::string> out;
  if (m.num_classes < 2) {
    out.push_back("num_classes must be at least 2, got " +
                  std::to_string(m.num_classes));
  }
  auto vs = m.view_set.violations();
  out.insert(out.end(), vs.begin(), vs.end());
  return out;
}

/// Empty iff every invariant holds.
inline std::vector<std::string> validate(const Manifest &m) {
  auto out = header_violations(m);
  if (!out.empty()) {
    return out;
  }
  std::set<std::string> ids;
  for (const auto &r : m.records) {
    auto rv = record_violations(r, m.num_classes, m.view_set);
    out.insert(out.end(), rv.begin(), rv.end());
    if (!ids.insert(r.sample_id).second) {
      out.push_back("duplicate sample id '" + r.sample_id + "'");
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Serialization

namespace detail {

using Json = nlohmann::json;
using OrderedJson = nlohmann::ordered_json;

inline OrderedJson header_to_json(const Manifest &m) {
  OrderedJson j;
  j["name"] = m.name;
  j["num_classes"] = m.num_classes;
  j["default_view"] = m.view_set.default_view;
  j["augmentation_views"] = m.view_set.augmentation_views;
  return j;
}

inline OrderedJson view_to_json(const ViewPrediction &vp) {
  OrderedJson j;
  j["logits"] = vp.logits;
  if (!vp.mc_logits.empty()) {
    j["mc_logits"] = vp.mc_logits;
  }
  if (vp.grad_l1) {
    j["grad_l1"] = *vp.grad_l1;
  }
  return j;
}

inline OrderedJson record_to_json(const PredictionRecord &r,
                                  const ViewSet &view_set) {
  OrderedJson j;
  j["sample_id"] = r.sample_id;
  j["true_class"] = r.true_class;
  OrderedJson views = OrderedJson::object();
  auto emit = [&](const ViewId &id) {
    if (auto it = r.views.find(id); it != r.views.end()) {
      views[id] = view_to_json(it->second);
    }
  };
  emit(view_set.default_view);
  for (const auto &id : view_set.augmentation_views) {
    emit(id);
  }
  j["views"] = std::move(views);
  return j;
}

inline PredictionRecord record_from_json(const Json &j) {
  PredictionRecord r;
  r.sample_id = j.at("sample_id").get<std::string>();
  r.true_class = j.at("true_class").get<int>();
  for (const auto &[id, jv] : j.at("views").items()) {
    ViewPrediction vp;
    vp.logits = jv.at("logits").get<Vector>();
    if (jv.contains("mc_logits")) {
      vp.mc_logits = jv.at("mc_logits").get<std::vector<Vector>>();
    }
    if (jv.contains("grad_l1")) {
      vp.grad_l1 = jv.at("grad_l1").get<double>();
    }
    r.views.emplace(id, std::move(vp));
  }
  return r;
}

} // namespace detail

inline void write_manifest(const Manifest &m, std::ostream &os) {
  if (auto v = validate(m); !v.empty()) {
    throw ValidationError("refusing to write invalid manifest: " + v.front());
  }
  os << detail::header_to_json(m).dump() << '\n';
  for (const auto &r : m.records) {
    os << detail::record_to_json(r, m.view_set).dump() << '\n';
  }
}

/// Parses a manifest stream. Errors carry "<source>:<line>: ...".
inline Manifest read_manifest(std::istream &is,
                              const std::string &source = "<stream>") {
  Manifest m;
  std::string line;
  std::size_t line_no = 0;
  auto fail = [&](const std::string &what) -> void {
    throw ValidationError(source + ":" + std::to_string(line_no) + ": " + what);
  };

  while (std::getline(is, line)) {
    ++line_no;
    if (!line.empty()) {
      break;
    }
  }
  if (line.empty()) {
    throw ValidationError(source + ": missing header line");
  }
  try {
    auto h = detail::Json::parse(line);
    m.name = h.at("name").get<std::string>();
    m.num_classes = h.at("num_classes").get<int>();
    m.view_set.default_view = h.at("default_view").get<std::string>();
    m.view_set.augmentation_views =
        h.at("augmentation_views").get<std::vector<ViewId>>();
  } catch (const nlohmann::json::exception &e) {
    fail(std::string("malformed header: ") + e.what());
  }
  if (auto v = header_violations(m); !v.empty()) {
    fail(v.front());
  }

  std::set<std::string> ids;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) {
      continue;
    }
    PredictionRecord r;
    try {
      r = detail::record_from_json(detail::Json::parse(line));
    } catch (const nlohmann::json::exception &e) {
      fail(std::string("malformed record: ") + e.what());
    }
    if (auto v = record_violations(r, m.num_classes, m.view_set); !v.empty()) {
      fail(v.front());
    }
    if (!ids.insert(r.sample_id).second) {
      fail("duplicate sample id '" + r.sample_id + "'");
    }
    m.records.push_back(std::move(r));
  }
  return m;
}

inline Manifest load_manifest(const std::string &path) {
  std::ifstream in(path);
  if (!in) {
    throw IoError("cannot open manifest '" + path + "'");
  }
  return read_manifest(in, path);
}

inline void save_manifest(const Manifest &m, const std::string &path) {
  if (auto v = validate(m); !v.empty()) {
    throw ValidationError("refusing to write invalid manifest: " + v.front());
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw IoError("cannot write manifest '" + path + "'");
  }
  write_manifest(m, out);
  if (!out.flush()) {
    throw IoError("write failed for '" + path + "'");
  }
}

} // namespace mvtta
