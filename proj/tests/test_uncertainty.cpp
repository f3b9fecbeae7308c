#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <gtest/gtest.h>

#include "mvtta/uncertainty.hpp"

using namespace mvtta;

namespace {

Vector random_logits(std::mt19937_64 &g, std::size_t k, double scale = 4.0) {
  std::normal_distribution<double> z(0.0, scale);
  Vector v(k);
  for (auto &x : v) x = z(g);
  return v;
}

Vector permuted(const Vector &v, const std::vector<std::size_t> &perm) {
  Vector out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[perm[i]];
  return out;
}

} // namespace

TEST(Entropy, Examples) {
  EXPECT_NEAR(entropy(Vector(4, 0.25)).value, std::log(4.0), 1e-12);
  EXPECT_EQ(entropy(Vector{1.0, 0.0, 0.0}).value, 0.0);
  EXPECT_NEAR(entropy(Vector{0.5, 0.5, 0.0, 0.0}).value, std::log(2.0), 1e-12);
  EXPECT_EQ(entropy(Vector{1.0, 0.0}).metric, MetricKind::Entropy);
}

TEST(Entropy, RejectsUnnormalized) {
  EXPECT_THROW(entropy(Vector{0.5, 0.6}), ValidationError);
  EXPECT_THROW(entropy(Vector{1.5, -0.5}), ValidationError);
  EXPECT_THROW(nll(Vector{0.2, 0.2}), ValidationError);
  EXPECT_THROW(brier(Vector{}), ValidationError);
}

TEST(Nll, Examples) {
  EXPECT_EQ(nll(Vector{1.0, 0.0}).value, 0.0);
  EXPECT_NEAR(nll(Vector{0.5, 0.5}).value, std::log(2.0), 1e-15);
  EXPECT_NEAR(nll(Vector(4, 0.25)).value, std::log(4.0), 1e-15);
}

TEST(Brier, Examples) {
  EXPECT_EQ(brier(Vector{1.0, 0.0, 0.0}).value, 0.0);
  EXPECT_NEAR(brier(Vector{0.5, 0.5}).value, 0.5, 1e-15);
  EXPECT_NEAR(brier(Vector{0.6, 0.4}).value, 0.32, 1e-15);
}

TEST(Odin, Examples) {
  EXPECT_NEAR(odin(Vector{0, 0, 0}, 1.0).value, 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(odin(Vector{0, 0, 0}, 1000.0).value, 2.0 / 3.0, 1e-15);
  // 1 - 1 / (1 + e^-0.01), evaluated at 30 digits.
  EXPECT_NEAR(odin(Vector{10, 0}, 1000.0).value, 0.497500020833125002, 1e-15);
}

TEST(Odin, RejectsNonPositiveTemperature) {
  EXPECT_THROW(odin(Vector{1, 0}, 0.0), ValidationError);
  EXPECT_THROW(odin(Vector{1, 0}, -2.0), ValidationError);
}

TEST(Mcd, Examples) {
  const Vector z{1.0, -0.5, 2.0};
  const std::vector<Vector> same(5, z);
  EXPECT_NEAR(mcd(same).value, entropy(softmax(z)).value, 1e-12);

  const std::vector<Vector> sym{{30.0, -30.0}, {-30.0, 30.0}};
  EXPECT_NEAR(mcd(sym).value, std::log(2.0), 1e-12);

  // softmax -> [1, 0] and [0.5, 0.5]; mean [0.75, 0.25].
  const std::vector<Vector> mixed{{1000.0, 0.0}, {0.0, 0.0}};
  EXPECT_NEAR(mcd(mixed).value, 0.5623351446188083, 1e-12);
}

TEST(Mcd, TooFewSamples) {
  EXPECT_THROW(mcd(std::vector<Vector>{{1.0, 0.0}}), MetricUnavailable);
  EXPECT_THROW(mcd(std::vector<Vector>(3, Vector{1.0, 0.0}), 4), MetricUnavailable);
}

TEST(GradNorm, Examples) {
  EXPECT_EQ(gradnorm_uncertainty(0.0).value, 0.0);
  EXPECT_EQ(gradnorm_uncertainty(2.0).value, -2.0);
  EXPECT_LT(gradnorm_uncertainty(5.0).value, gradnorm_uncertainty(1.0).value);
  EXPECT_THROW(gradnorm_uncertainty(-1.0), ValidationError);
}

TEST(MetricNames, RoundTrip) {
  for (auto k : kAllMetrics) {
    EXPECT_EQ(parse_metric(metric_name(k)), k);
  }
  EXPECT_THROW(parse_metric("Entropy"), ValidationError);
  EXPECT_THROW(parse_metric("variance"), ValidationError);
}

TEST(UncertaintyOfView, Dispatch) {
  PredictionRecord r{"s1", 0, {}};
  r.views["front"] = {{0.0, 0.0}, {}, 1.5};
  r.views["left"] = {{1.0, 2.0}, {{1.0, 2.0}, {2.0, 1.0}}, std::nullopt};

  EXPECT_NEAR(uncertainty_of_view(r, "front", {MetricKind::Entropy}).value,
              std::log(2.0), 1e-15);
  EXPECT_EQ(uncertainty_of_view(r, "front", {MetricKind::GradNorm}).value, -1.5);
  EXPECT_NEAR(uncertainty_of_view(r, "left", {MetricKind::MCD}).value,
              std::log(2.0), 1e-12);

  try {
    uncertainty_of_view(r, "front", {MetricKind::MCD});
    FAIL();
  } catch (const MetricUnavailable &e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("s1"), std::string::npos);
    EXPECT_NE(msg.find("front"), std::string::npos);
  }
  EXPECT_THROW(uncertainty_of_view(r, "left", {MetricKind::GradNorm}),
               MetricUnavailable);
  EXPECT_THROW(uncertainty_of_view(r, "top", {MetricKind::Entropy}),
               ValidationError);
}

TEST(UncertaintyProperties, RangesAndIdentities) {
  std::mt19937_64 g(42);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t K = 2 + static_cast<std::size_t>(trial % 9);
    const auto z = random_logits(g, K, 0.5 + trial % 7);
    const auto p = softmax(z);
    const double lnK = std::log(static_cast<double>(K));

    const double h = entropy(p).value;
    EXPECT_GE(h, 0.0);
    EXPECT_LE(h, lnK + 1e-12);
    EXPECT_GE(nll(p).value, 0.0);
    const double b = brier(p).value;
    EXPECT_GE(b, 0.0);
    EXPECT_LT(b, 2.0);
    const double o = odin(z, 1000.0).value;
    EXPECT_GE(o, 0.0);
    EXPECT_LE(o, 1.0 - 1.0 / static_cast<double>(K) + 1e-12);

    EXPECT_NEAR(odin(z, 1.0).value, 1.0 - p[argmax(p)], 1e-12);

    const std::vector<Vector> copies(2 + trial % 5, z);
    EXPECT_NEAR(mcd(copies).value, h, 1e-12);
  }
}

TEST(UncertaintyProperties, PermutationInvariance) {
  std::mt19937_64 g(7);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t K = 2 + static_cast<std::size_t>(trial % 6);
    std::vector<std::size_t> perm(K);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::shuffle(perm.begin(), perm.end(), g);

    const auto z = random_logits(g, K);
    const auto zp = permuted(z, perm);
    const auto p = softmax(z);
    const auto pp = softmax(zp);
    EXPECT_NEAR(entropy(p).value, entropy(pp).value, 1e-12);
    EXPECT_NEAR(nll(p).value, nll(pp).value, 1e-12);
    EXPECT_NEAR(brier(p).value, brier(pp).value, 1e-12);
    EXPECT_NEAR(odin(z, 1000.0).value, odin(zp, 1000.0).value, 1e-12);
    const std::vector<Vector> mc{z, random_logits(g, K)};
    const std::vector<Vector> mcp{zp, permuted(mc[1], perm)};
    EXPECT_NEAR(mcd(mc).value, mcd(mcp).value, 1e-12);
  }
}

TEST(UncertaintyProperties, ConfidentBeatsUniform) {
  // Directional convention: a sharper prediction is less uncertain.
  const Vector sharp{5.0, 0.0, 0.0};
  const Vector flat{0.0, 0.0, 0.0};
  EXPECT_LT(entropy(softmax(sharp)).value, entropy(softmax(flat)).value);
  EXPECT_LT(nll(softmax(sharp)).value, nll(softmax(flat)).value);
  EXPECT_LT(brier(softmax(sharp)).value, brier(softmax(flat)).value);
  EXPECT_LT(odin(sharp, 1000.0).value, odin(flat, 1000.0).value);
}

TEST(MetricConfig, Check) {
  MetricConfig c;
  EXPECT_EQ(c.odin_temperature, 1000.0);
  EXPECT_EQ(c.mcd_min_samples, 2);
  EXPECT_NO_THROW(c.check());
  c.odin_temperature = 0.0;
  EXPECT_THROW(c.check(), ValidationError);
  c = MetricConfig{};
  c.mcd_min_samples = 1;
  EXPECT_THROW(c.check(), ValidationError);
}
