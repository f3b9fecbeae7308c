#pragma once

// Test-only helpers: random manifest generation and an independent
// re-evaluation of the gated fusion rule used as an oracle for the sweep.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include "mvtta/evaluation.hpp"
#include "mvtta/prediction_store.hpp"
#include "mvtta/stage1_selector.hpp"
#include "mvtta/uncertainty.hpp"

namespace mvtta::testing {

struct RandomManifestSpec {
  int num_classes = 3;
  int num_aug_views = 2;
  int num_records = 10;
  int mc_samples = 3;
  double logit_scale = 3.0;
};

inline ViewSet make_view_set(int n) {
  ViewSet vs{"front", {}};
  for (int j = 0; j < n; ++j) {
    vs.augmentation_views.push_back("v" + std::to_string(j));
  }
  return vs;
}

inline Manifest random_manifest(std::mt19937_64 &g, const RandomManifestSpec &s) {
  std::normal_distribution<double> z(0.0, s.logit_scale);
  std::uniform_int_distribution<int> cls(0, s.num_classes - 1);
  std::uniform_real_distribution<double> grad(0.0, 5.0);
  Manifest m;
  m.name = "random";
  m.num_classes = s.num_classes;
  m.view_set = make_view_set(s.num_aug_views);
  std::vector<ViewId> ids{m.view_set.default_view};
  ids.insert(ids.end(), m.view_set.augmentation_views.begin(),
             m.view_set.augmentation_views.end());
  for (int i = 0; i < s.num_records; ++i) {
    PredictionRecord r;
    r.sample_id = "r" + std::to_string(i);
    r.true_class = cls(g);
    for (const auto &id : ids) {
      ViewPrediction vp;
      for (int k = 0; k < s.num_classes; ++k) {
        vp.logits.push_back(z(g));
      }
      for (int t = 0; t < s.mc_samples; ++t) {
        Vector mc;
        for (int k = 0; k < s.num_classes; ++k) {
          mc.push_back(vp.logits[static_cast<std::size_t>(k)] + 0.5 * z(g));
        }
        vp.mc_logits.push_back(std::move(mc));
      }
      vp.grad_l1 = grad(g);
      r.views.emplace(id, std::move(vp));
    }
    m.records.push_back(std::move(r));
  }
  return m;
}

/// Random class->view table consistent with the manifest header.
inline OptimalViewTable random_table(std::mt19937_64 &g, const Manifest &m,
                                     const MetricConfig &cfg) {
  std::uniform_int_distribution<std::size_t> pick(0, m.view_set.size() - 1);
  OptimalViewTable t;
  t.view_set = m.view_set;
  t.metric = cfg;
  t.source_counts = SelectionMatrix(static_cast<std::size_t>(m.num_classes),
                                    m.view_set.size());
  for (int c = 0; c < m.num_classes; ++c) {
    t.per_class.push_back(m.view_set.augmentation_views[pick(g)]);
  }
  return t;
}

// ---------------------------------------------------------------------------
// Oracle: direct long-double evaluation of the Stage-2 definition.

namespace oracle {

using LVec = std::vector<long double>;

inline LVec softmax(const Vector &z) {
  long double mx = z[0];
  for (double v : z) mx = std::max<long double>(mx, v);
  LVec p;
  long double s = 0;
  for (double v : z) {
    p.push_back(std::exp(static_cast<long double>(v) - mx));
    s += p.back();
  }
  for (auto &x : p) x /= s;
  return p;
}

inline std::size_t first_max(const LVec &p) {
  std::size_t b = 0;
  for (std::size_t k = 1; k < p.size(); ++k)
    if (p[k] > p[b]) b = k;
  return b;
}

inline long double entropy(const LVec &p) {
  long double h = 0;
  for (auto x : p)
    if (x > 0) h -= x * std::log(x);
  return h;
}

inline long double uncertainty(const ViewPrediction &vp, const MetricConfig &c) {
  switch (c.kind) {
  case MetricKind::Entropy:
    return entropy(softmax(vp.logits));
  case MetricKind::NLL: {
    auto p = softmax(vp.logits);
    return -std::log(p[first_max(p)]);
  }
  case MetricKind::Brier: {
    auto p = softmax(vp.logits);
    auto t = first_max(p);
    long double s = 0;
    for (std::size_t k = 0; k < p.size(); ++k) {
      long double d = p[k] - (k == t ? 1.0L : 0.0L);
      s += d * d;
    }
    return s;
  }
  case MetricKind::ODIN: {
    Vector scaled;
    for (double v : vp.logits) scaled.push_back(v / c.odin_temperature);
    auto p = softmax(scaled);
    return 1.0L - p[first_max(p)];
  }
  case MetricKind::MCD: {
    LVec mean(vp.logits.size(), 0.0L);
    for (const auto &z : vp.mc_logits) {
      auto p = softmax(z);
      for (std::size_t k = 0; k < p.size(); ++k) mean[k] += p[k];
    }
    for (auto &x : mean) x /= static_cast<long double>(vp.mc_logits.size());
    return entropy(mean);
  }
  case MetricKind::GradNorm:
    return -static_cast<long double>(*vp.grad_l1);
  }
  return 0;
}

struct Decision {
  bool applied;
  std::size_t predicted;
};

inline Decision decide(const PredictionRecord &r, const OptimalViewTable &t,
                       long double u, long double tau, bool force) {
  const auto pd = softmax(r.views.at(t.view_set.default_view).logits);
  if (!(force || u > tau)) return {false, first_max(pd)};
  const auto pa = softmax(r.views.at(t.per_class[first_max(pd)]).logits);
  LVec pf(pd.size());
  for (std::size_t k = 0; k < pd.size(); ++k) pf[k] = (pd[k] + pa[k]) / 2;
  return {true, first_max(pf)};
}

struct SweepOracle {
  std::vector<long double> taus;
  std::vector<double> accuracies;
  std::vector<std::size_t> n_augmented;
  std::vector<std::vector<Decision>> decisions;
};

/// Full sweep straight from the definition: grid from min to max of the
/// default-view uncertainty, index 0 augments everything, index i > 0
/// augments iff u > tau_i.
inline SweepOracle sweep(const Manifest &m, const OptimalViewTable &t,
                         const MetricConfig &c, int points) {
  std::vector<long double> u;
  for (const auto &r : m.records)
    u.push_back(uncertainty(r.views.at(m.view_set.default_view), c));
  const long double lo = *std::min_element(u.begin(), u.end());
  const long double hi = *std::max_element(u.begin(), u.end());
  SweepOracle o;
  for (int i = 0; i < points; ++i) {
    const long double tau =
        i == points - 1 ? hi : lo + (hi - lo) * i / (points - 1);
    o.taus.push_back(tau);
    std::size_t correct = 0, aug = 0;
    std::vector<Decision> ds;
    for (std::size_t j = 0; j < m.records.size(); ++j) {
      auto d = decide(m.records[j], t, u[j], tau, i == 0);
      aug += d.applied;
      correct += static_cast<int>(d.predicted) == m.records[j].true_class;
      ds.push_back(d);
    }
    o.accuracies.push_back(static_cast<double>(correct) /
                           static_cast<double>(m.records.size()));
    o.n_augmented.push_back(aug);
    o.decisions.push_back(std::move(ds));
  }
  return o;
}

} // namespace oracle

/// Scratch directory removed on destruction.
class TempDir {
public:
  explicit TempDir(const std::string &tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("mvtta_" + tag + "_" + std::to_string(::getpid()) + "_" +
             std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir &) = delete;
  TempDir &operator=(const TempDir &) = delete;

  const std::filesystem::path &path() const { return path_; }
  std::string file(const std::string &name) const { return (path_ / name).string(); }

private:
  std::filesystem::path path_;
};

} // namespace mvtta::testing
