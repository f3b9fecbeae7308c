#pragma once

// Predictive-uncertainty metrics. Every metric is oriented so that a larger
// value means a less confident prediction. None of them needs a label: NLL
// and Brier are scored against the predicted (argmax) class.

#include <array>
#include <cmath>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mvtta/error.hpp"
#include "mvtta/prediction_store.hpp"

namespace mvtta {

enum class MetricKind { Entropy, NLL, Brier, ODIN, MCD, GradNorm };

inline constexpr std::array<MetricKind, 6> kAllMetrics = {
    MetricKind::Entropy, MetricKind::NLL, MetricKind::Brier,
    MetricKind::ODIN,    MetricKind::MCD, MetricKind::GradNorm};

inline std::string_view metric_name(MetricKind kind) {
  switch (kind) {
  case MetricKind::Entropy:
    return "entropy";
  case MetricKind::NLL:
    return "nll";
  case MetricKind::Brier:
    return "brier";
  case MetricKind::ODIN:
    return "odin";
  case MetricKind::MCD:
    return "mcd";
  case MetricKind::GradNorm:
    return "gradnorm";
  }
  return "unknown";
}

inline MetricKind parse_metric(std::string_view name) {
  for (auto k : kAllMetrics) {
    if (metric_name(k) == name) {
      return k;
    }
  }
  throw ValidationError(
      "unknown metric '" + std::string(name) +
      "' (expected one of entropy, nll, brier, odin, mcd, gradnorm)");
}

struct MetricConfig {
  MetricKind kind = MetricKind::Entropy;
  double odin_temperature = 1000.0;
  int mcd_min_samples = 2;

  void check() const {
    if (!(odin_temperature > 0.0) || !std::isfinite(odin_temperature)) {
      throw ValidationError("odin_temperature must be positive and finite");
    }
    if (mcd_min_samples < 2) {
      throw ValidationError("mcd_min_samples must be at least 2");
    }
  }

  bool operator==(const MetricConfig &) const = default;
};

struct Uncertainty {
  double value = 0.0;
  MetricKind metric = MetricKind::Entropy;

  bool operator==(const Uncertainty &) const = default;
};

namespace detail {

inline void check_probabilities(std::span<const double> p) {
  if (p.empty()) {
    throw ValidationError("empty probability vector");
  }
  double sum = 0.0;
  for (double x : p) {
    if (!(x >= 0.0 && x <= 1.0)) {
      throw ValidationError("probability entry outside [0, 1]");
    }
    sum += x;
  }
  if (std::abs(sum - 1.0) > 1e-9) {
    throw ValidationError("probability vector does not sum to 1");
  }
}

} // namespace detail

/// Shannon entropy in nats, 0 ln 0 := 0.
inline Uncertainty entropy(std::span<const double> p) {
  detail::check_probabilities(p);
  double h = 0.0;
  for (double x : p) {
    if (x > 0.0) {
      h -= x * std::log(x);
    }
  }
  return {h, MetricKind::Entropy};
}

/// Negative log of the winning class probability.
inline Uncertainty nll(std::span<const double> p) {
  detail::check_probabilities(p);
  return {0.0 - std::log(p[argmax(p)]), MetricKind::NLL};
}

/// Squared distance to the one-hot of the predicted class.
inline Uncertainty brier(std::span<const double> p) {
  detail::check_probabilities(p);
  const auto top = argmax(p);
  double s = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    const double d = p[k] - (k == top ? 1.0 : 0.0);
    s += d * d;
  }
  return {s, MetricKind::Brier};
}

/// 1 - max softmax(logits / T). No input perturbation.
inline Uncertainty odin(std::span<const double> logits, double temperature) {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw ValidationError("ODIN temperature must be positive and finite");
  }
  Vector scaled(logits.begin(), logits.end());
  for (auto &z : scaled) {
    z /= temperature;
  }
  const auto p = softmax(scaled);
  return {1.0 - p[argmax(p)], MetricKind::ODIN};
}

/// Entropy of the mean softmax over stochastic passes.
inline Uncertainty mcd(std::span<const Vector> mc_logits, int min_samples = 2) {
  if (static_cast<int>(mc_logits.size()) < min_samples) {
    throw MetricUnavailable("mcd needs at least " + std::to_string(min_samples) +
                            " stochastic samples, got " +
                            std::to_string(mc_logits.size()));
  }
  Vector mean(mc_logits.front().size(), 0.0);
  for (const auto &z : mc_logits) {
    if (z.size() != mean.size()) {
      throw ValidationError("mc_logits samples differ in length");
    }
    const auto p = softmax(z);
    for (std::size_t k = 0; k < p.size(); ++k) {
      mean[k] += p[k];
    }
  }
  for (auto &x : mean) {
    x /= static_cast<double>(mc_logits.size());
  }
  return {entropy(mean).value, MetricKind::MCD};
}

/// A large gradient norm reads as confidence, so uncertainty is its negation.
inline Uncertainty gradnorm_uncertainty(double grad_l1) {
  if (!(grad_l1 >= 0.0) || !std::isfinite(grad_l1)) {
    throw ValidationError("grad_l1 must be finite and nonnegative");
  }
  return {0.0 - grad_l1, MetricKind::GradNorm};
}

inline Uncertainty uncertainty_of_view(const PredictionRecord &record,
                                       const ViewId &view,
                                       const MetricConfig &cfg) {
  const auto &vp = record.view(view);
  const auto where = [&] {
    return "sample '" + record.sample_id + "' view '" + view + "': ";
  };
  switch (cfg.kind) {
  case MetricKind::Entropy:
    return entropy(softmax(vp.logits));
  case MetricKind::NLL:
    return nll(softmax(vp.logits));
  case MetricKind::Brier:
    return brier(softmax(vp.logits));
  case MetricKind::ODIN:
    return odin(vp.logits, cfg.odin_temperature);
  case MetricKind::MCD:
    if (static_cast<int>(vp.mc_logits.size()) < cfg.mcd_min_samples) {
      throw MetricUnavailable(where() + "mcd needs at least " +
                              std::to_string(cfg.mcd_min_samples) +
                              " mc_logits samples, found " +
                              std::to_string(vp.mc_logits.size()));
    }
    return mcd(vp.mc_logits, cfg.mcd_min_samples);
  case MetricKind::GradNorm:
    if (!vp.grad_l1) {
      throw MetricUnavailable(where() + "gradnorm needs grad_l1");
    }
    return gradnorm_uncertainty(*vp.grad_l1);
  }
  throw ValidationError("unhandled metric kind");
}

} // namespace mvtta
