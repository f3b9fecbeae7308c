#include <cfloat>
#include <random>
#include <sstream>

#include <json.hpp>
#include <gtest/gtest.h>

#include "mvtta/evaluation.hpp"
#include "mvtta/stage2_inference.hpp"
#include "support.hpp"

using namespace mvtta;
using mvtta::testing::RandomManifestSpec;
using mvtta::testing::make_view_set;
using mvtta::testing::random_manifest;
using mvtta::testing::random_table;

namespace {

// Logits whose softmax is exactly (p, 1 - p) up to rounding.
Vector two_class(double p) { return {std::log(p), std::log(1.0 - p)}; }

OptimalViewTable fixed_table(const std::vector<ViewId> &per_class, int n_aug,
                             MetricConfig cfg = {MetricKind::Entropy}) {
  OptimalViewTable t;
  t.view_set = make_view_set(n_aug);
  t.metric = cfg;
  t.per_class = per_class;
  t.source_counts = SelectionMatrix(per_class.size(), t.view_set.size());
  return t;
}

PredictionRecord pair_record(double p_front, double p_v0, double p_v1 = 0.5) {
  PredictionRecord r{"s", 0, {}};
  r.views["front"] = {two_class(p_front), {}, std::nullopt};
  r.views["v0"] = {two_class(p_v0), {}, std::nullopt};
  r.views["v1"] = {two_class(p_v1), {}, std::nullopt};
  return r;
}

} // namespace

TEST(Decide, FusesWithClassView) {
  const auto t = fixed_table({"v0", "v1"}, 2);
  const auto r = pair_record(0.6, 0.9);
  const auto d = decide(r, t, Uncertainty{0.7, MetricKind::Entropy}, {0.5}, false);
  EXPECT_TRUE(d.applied);
  EXPECT_EQ(d.chosen_view, "v0");
  ASSERT_TRUE(d.p_aug);
  EXPECT_NEAR(d.p_final[0], 0.75, 1e-12);
  EXPECT_NEAR(d.p_final[1], 0.25, 1e-12);
  EXPECT_EQ(d.predicted_class, 0u);
}

TEST(Decide, ChosenViewFollowsDefaultPrediction) {
  const auto t = fixed_table({"v0", "v1"}, 2);
  const auto r = pair_record(0.3, 0.9, 0.2);
  const auto d = decide(r, t, Uncertainty{0.7, MetricKind::Entropy}, {0.5}, false);
  EXPECT_EQ(d.chosen_view, "v1");
  EXPECT_NEAR(d.p_final[0], 0.25, 1e-12);
}

TEST(Decide, ClosedGateKeepsDefault) {
  const auto t = fixed_table({"v0", "v1"}, 2);
  const auto r = pair_record(0.4, 0.9);
  // Equality does not open the gate.
  const auto d = decide(r, t, Uncertainty{0.5, MetricKind::Entropy}, {0.5}, false);
  EXPECT_FALSE(d.applied);
  EXPECT_FALSE(d.chosen_view);
  EXPECT_FALSE(d.p_aug);
  EXPECT_EQ(d.p_final, d.p_default);
  EXPECT_EQ(d.predicted_class, 1u);
}

TEST(Decide, HugeThresholdNeverApplies) {
  const auto t = fixed_table({"v0", "v1"}, 2);
  const auto d = infer_one(pair_record(0.5, 0.9), t, {DBL_MAX},
                           {MetricKind::Entropy}, false);
  EXPECT_FALSE(d.applied);
  const auto f = infer_one(pair_record(0.5, 0.9), t, {DBL_MAX},
                           {MetricKind::Entropy}, true);
  EXPECT_TRUE(f.applied);
}

TEST(InferOne, MetricMismatch) {
  const auto t = fixed_table({"v0", "v1"}, 2);
  EXPECT_THROW(infer_one(pair_record(0.5, 0.9), t, {0.0}, {MetricKind::NLL}, false),
               ValidationError);
  MetricConfig hot{MetricKind::Entropy};
  hot.odin_temperature = 2.0;
  EXPECT_THROW(infer_one(pair_record(0.5, 0.9), t, {0.0}, hot, false),
               ValidationError);
}

TEST(InferAll, Errors) {
  std::mt19937_64 g(1);
  RandomManifestSpec spec;
  auto m = random_manifest(g, spec);
  const MetricConfig cfg{MetricKind::Entropy};
  const auto t = random_table(g, m, cfg);

  auto empty = m;
  empty.records.clear();
  EXPECT_THROW(infer_all(empty, t, {0.0}, cfg, false), ValidationError);

  auto other = m;
  other.view_set.default_view = "top";
  for (auto &r : other.records) {
    r.views["top"] = r.views.at("front");
    r.views.erase("front");
  }
  EXPECT_THROW(infer_all(other, t, {0.0}, cfg, false), ValidationError);

  auto wider = t;
  wider.per_class.push_back("v0");
  EXPECT_THROW(infer_all(m, wider, {0.0}, cfg, false), ValidationError);
}

TEST(InferAll, UnlabeledHasNoAccuracy) {
  std::mt19937_64 g(2);
  auto m = random_manifest(g, {});
  m.records[3].true_class = kUnlabeled;
  const MetricConfig cfg{MetricKind::Entropy};
  const auto res = infer_all(m, random_table(g, m, cfg), {0.0}, cfg, false);
  EXPECT_FALSE(res.accuracy);
  EXPECT_EQ(res.decisions.size(), m.records.size());
}

TEST(InferAll, ForceAppliesEverywhere) {
  std::mt19937_64 g(3);
  const auto m = random_manifest(g, {});
  const MetricConfig cfg{MetricKind::Brier};
  const auto res = infer_all(m, random_table(g, m, cfg), {DBL_MAX}, cfg, true);
  EXPECT_EQ(res.n_augmented, m.records.size());
}

TEST(InferAll, ClosedGatesMatchSingleView) {
  std::mt19937_64 g(4);
  for (int trial = 0; trial < 20; ++trial) {
    const auto m = random_manifest(g, {});
    const MetricConfig cfg{MetricKind::Entropy};
    const auto res = infer_all(m, random_table(g, m, cfg), {DBL_MAX}, cfg, false);
    EXPECT_EQ(res.n_augmented, 0u);
    EXPECT_DOUBLE_EQ(*res.accuracy, single_view_accuracy(m));
  }
}

TEST(Stage2Properties, FusedIsTheMean) {
  std::mt19937_64 g(5);
  for (int trial = 0; trial < 100; ++trial) {
    RandomManifestSpec spec;
    spec.num_classes = 2 + trial % 5;
    spec.num_aug_views = 1 + trial % 3;
    const auto m = random_manifest(g, spec);
    const MetricConfig cfg{MetricKind::Entropy};
    const auto res = infer_all(m, random_table(g, m, cfg), {0.0}, cfg, true);
    for (const auto &d : res.decisions) {
      ASSERT_TRUE(d.p_aug);
      double sum = 0;
      for (std::size_t k = 0; k < d.p_final.size(); ++k) {
        EXPECT_NEAR(d.p_final[k], (d.p_default[k] + (*d.p_aug)[k]) / 2, 1e-15);
        sum += d.p_final[k];
      }
      EXPECT_NEAR(sum, 1.0, 1e-12);
    }
  }
}

TEST(Stage2Properties, GateIsMonotoneInTau) {
  std::mt19937_64 g(6);
  std::uniform_real_distribution<double> unif(0.0, 1.2);
  for (int trial = 0; trial < 50; ++trial) {
    const auto m = random_manifest(g, {});
    const MetricConfig cfg{MetricKind::Entropy};
    const auto t = random_table(g, m, cfg);
    double a = unif(g), b = unif(g);
    if (a > b) std::swap(a, b);
    const auto lo = infer_all(m, t, {a}, cfg, false);
    const auto hi = infer_all(m, t, {b}, cfg, false);
    EXPECT_GE(lo.n_augmented, hi.n_augmented);
    for (std::size_t i = 0; i < m.records.size(); ++i) {
      if (hi.decisions[i].applied) {
        EXPECT_TRUE(lo.decisions[i].applied);
      }
    }
  }
}

TEST(Stage2Properties, TauAtMaxIsSingleView) {
  std::mt19937_64 g(7);
  for (auto kind : kAllMetrics) {
    const auto m = random_manifest(g, {});
    const MetricConfig cfg{kind};
    const auto t = random_table(g, m, cfg);
    double mx = -DBL_MAX;
    for (const auto &u : default_uncertainties(m, cfg)) mx = std::max(mx, u.value);
    const auto res = infer_all(m, t, {mx}, cfg, false);
    EXPECT_EQ(res.n_augmented, 0u);
    EXPECT_DOUBLE_EQ(*res.accuracy, single_view_accuracy(m));
  }
}

TEST(Stage2Properties, ForceIgnoresTauAndIsDeterministic) {
  std::mt19937_64 g(8);
  for (int trial = 0; trial < 20; ++trial) {
    const auto m = random_manifest(g, {});
    const MetricConfig cfg{MetricKind::MCD};
    const auto t = random_table(g, m, cfg);
    const auto a = infer_all(m, t, {-5.0}, cfg, true);
    const auto b = infer_all(m, t, {5.0}, cfg, true);
    const auto c = infer_all(m, t, {5.0}, cfg, true);
    EXPECT_EQ(a.decisions, b.decisions);
    EXPECT_EQ(b.decisions, c.decisions);
  }
}

TEST(WriteDecisions, OneLinePerRecord) {
  const auto t = fixed_table({"v0", "v1"}, 2);
  const MetricConfig cfg{MetricKind::Entropy};
  std::vector<TtaDecision> ds{infer_one(pair_record(0.6, 0.9), t, {0.0}, cfg, false),
                              infer_one(pair_record(0.6, 0.9), t, {1.0}, cfg, false)};
  std::ostringstream os;
  write_decisions(ds, os);
  std::istringstream in(os.str());
  std::string line;
  std::vector<nlohmann::json> rows;
  while (std::getline(in, line)) rows.push_back(nlohmann::json::parse(line));
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0]["applied"], true);
  EXPECT_EQ(rows[0]["chosen_view"], "v0");
  EXPECT_EQ(rows[0]["metric"], "entropy");
  EXPECT_FALSE(rows[1].contains("chosen_view"));
  EXPECT_FALSE(rows[1].contains("p_aug"));
  EXPECT_EQ(rows[1]["predicted_class"], 0);
}
