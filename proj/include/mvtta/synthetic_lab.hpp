#pragma once

// Synthetic multi-view benchmark and a linear softmax classifier that turns
// it into prediction manifests.
//
// Each class c has a Gaussian prototype mu_c. A sample of class c sees
// view n as mu_c + noise, with noise_optimal on its planted view, noise_other
// on the remaining augmentation views and noise_default on the default view.
// Every sample and view draws from its own stream derived from the seed, so
// results do not depend on generation order.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mvtta/error.hpp"
#include "mvtta/prediction_store.hpp"
#include "mvtta/rng.hpp"

namespace mvtta::synth {

struct SynthConfig {
  int num_classes = 5;
  int num_aug_views = 4;
  int feature_dim = 16;
  /// Total per class, split into train and test by train_fraction.
  int samples_per_class = 200;
  double noise_default = 1.0;
  double noise_optimal = 0.1;
  double noise_other = 1.0;
  /// Standard deviation of the prototype coordinates.
  double prototype_scale = 1.0;
  /// Planted augmentation view per class; empty means c mod N.
  std::vector<int> planted_views;
  std::uint64_t seed = 0;
  double train_fraction = 0.8;

  std::vector<int> resolved_planted_views() const {
    if (!planted_views.empty()) {
      return planted_views;
    }
    std::vector<int> v(static_cast<std::size_t>(num_classes));
    for (int c = 0; c < num_classes; ++c) {
      v[static_cast<std::size_t>(c)] = c % num_aug_views;
    }
    return v;
  }

  int train_per_class() const {
    return static_cast<int>(
        std::lround(train_fraction * static_cast<double>(samples_per_class)));
  }

  void check() const {
    auto bad = [](const std::string &what) {
      throw ValidationError("invalid synth config: " + what);
    };
    if (num_classes < 2) bad("num_classes must be at least 2");
    if (num_aug_views < 1) bad("num_aug_views must be at least 1");
    if (feature_dim < 1) bad("feature_dim must be at least 1");
    if (samples_per_class < 1) bad("samples_per_class must be at least 1");
    if (!(train_fraction > 0.0 && train_fraction < 1.0))
      bad("train_fraction must lie in (0, 1)");
    if (!(noise_default >= 0.0 && noise_optimal >= 0.0 && noise_other >= 0.0))
      bad("noise levels must be nonnegative");
    // All-zero noise is allowed as a degenerate, fully deterministic setup.
    const bool all_zero =
        noise_default == 0.0 && noise_optimal == 0.0 && noise_other == 0.0;
    if (!all_zero &&
        !(noise_optimal < noise_default && noise_optimal < noise_other))
      bad("noise_optimal must be below noise_default and noise_other");
    if (!(prototype_scale > 0.0)) bad("prototype_scale must be positive");
    if (!planted_views.empty()) {
      if (static_cast<int>(planted_views.size()) != num_classes)
        bad("planted_views needs one entry per class");
      for (int v : planted_views) {
        if (v < 0 || v >= num_aug_views) bad("planted view index out of range");
      }
    }
  }
};

struct FeatureSample {
  std::string sample_id;
  int true_class = 0;
  /// [0] is the default view, [1 + n] augmentation view n.
  std::vector<Vector> features;

  bool operator==(const FeatureSample &) const = default;
};

struct FeatureSet {
  std::string name;
  int num_classes = 0;
  int feature_dim = 0;
  ViewSet views;
  std::vector<FeatureSample> samples;

  bool operator==(const FeatureSet &) const = default;
};

inline ViewSet synthetic_view_set(int num_aug_views) {
  ViewSet vs;
  vs.default_view = "default";
  for (int n = 0; n < num_aug_views; ++n) {
    vs.augmentation_views.push_back("aug" + std::to_string(n));
  }
  return vs;
}

struct GeneratedData {
  FeatureSet train;
  FeatureSet test;
  std::vector<Vector> prototypes;
};

inline GeneratedData generate(const SynthConfig &cfg) {
  cfg.check();
  const auto K = static_cast<std::size_t>(cfg.num_classes);
  const auto d = static_cast<std::size_t>(cfg.feature_dim);
  const auto planted = cfg.resolved_planted_views();

  GeneratedData out;
  {
    rng::Engine g(rng::derive_seed(cfg.seed, {0}));
    for (std::size_t c = 0; c < K; ++c) {
      Vector mu(d);
      for (;;) {
        for (auto &x : mu) {
          x = cfg.prototype_scale * rng::standard_normal(g);
        }
        if (std::find(out.prototypes.begin(), out.prototypes.end(), mu) ==
            out.prototypes.end()) {
          break;
        }
      }
      out.prototypes.push_back(mu);
    }
  }

  for (auto *fs : {&out.train, &out.test}) {
    fs->num_classes = cfg.num_classes;
    fs->feature_dim = cfg.feature_dim;
    fs->views = synthetic_view_set(cfg.num_aug_views);
  }
  out.train.name = "synthetic-train";
  out.test.name = "synthetic-test";

  const int n_train = cfg.train_per_class();
  for (std::size_t c = 0; c < K; ++c) {
    for (int s = 0; s < cfg.samples_per_class; ++s) {
      FeatureSample fsamp;
      fsamp.sample_id = "c" + std::to_string(c) + "_s" + std::to_string(s);
      fsamp.true_class = static_cast<int>(c);
      for (int v = 0; v <= cfg.num_aug_views; ++v) {
        double sigma = cfg.noise_default;
        if (v > 0) {
          sigma = (v - 1 == planted[c]) ? cfg.noise_optimal : cfg.noise_other;
        }
        rng::Engine g(rng::derive_seed(
            cfg.seed, {1, c, static_cast<std::uint64_t>(s),
                       static_cast<std::uint64_t>(v)}));
        Vector x(d);
        for (std::size_t i = 0; i < d; ++i) {
          x[i] = out.prototypes[c][i] + sigma * rng::standard_normal(g);
        }
        fsamp.features.push_back(std::move(x));
      }
      (s < n_train ? out.train : out.test).samples.push_back(std::move(fsamp));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Linear softmax classifier on L2-normalized inputs
//
// logits = W phi(x) + b with phi(x) = x / ||x||_2 and phi(0) = 0. Without the
// normalization a linear model grows more confident the further a noisy input
// lands along a class direction, so confidence stops tracking how informative
// a view is.

/// x / ||x||_2, or the zero vector for x = 0.
inline Vector unit_features(std::span<const double> x) {
  double n2 = 0.0;
  for (double v : x) {
    n2 += v * v;
  }
  Vector u(x.begin(), x.end());
  if (n2 > 0.0) {
    const double n = std::sqrt(n2);
    for (auto &v : u) {
      v /= n;
    }
  }
  return u;
}

struct TrainConfig {
  double learning_rate = 0.1;
  int epochs = 50;
  int batch_size = 32;
  double dropout_rate = 0.2;
  double init_scale = 0.01;
  std::uint64_t seed = 0;

  bool operator==(const TrainConfig &) const = default;
};

struct ToyModel {
  int num_classes = 0;
  int feature_dim = 0;
  /// Row-major K x d.
  Vector weights;
  Vector bias;
  double dropout_rate = 0.0;
  TrainConfig hyper;

  double w(std::size_t k, std::size_t i) const {
    return weights[k * static_cast<std::size_t>(feature_dim) + i];
  }

  Vector logits(std::span<const double> x) const {
    const auto K = static_cast<std::size_t>(num_classes);
    const auto d = static_cast<std::size_t>(feature_dim);
    if (x.size() != d) {
      throw ValidationError("feature vector has length " +
                            std::to_string(x.size()) + ", model expects " +
                            std::to_string(d));
    }
    const auto u = unit_features(x);
    Vector z(K);
    for (std::size_t k = 0; k < K; ++k) {
      double s = bias[k];
      for (std::size_t i = 0; i < d; ++i) {
        s += weights[k * d + i] * u[i];
      }
      z[k] = s;
    }
    return z;
  }

  bool operator==(const ToyModel &) const = default;
};

struct Gradient {
  Vector weights;
  Vector bias;
};

/// Cross-entropy -ln softmax(Wx + b)_y.
inline double loss(const ToyModel &m, std::span<const double> x, int y) {
  const auto z = m.logits(x);
  const double mx = z[argmax(z)];
  double s = 0.0;
  for (double v : z) {
    s += std::exp(v - mx);
  }
  return mx + std::log(s) - z[static_cast<std::size_t>(y)];
}

/// dL/dW = (p - y) phi(x)^T, dL/db = p - y.
inline Gradient loss_grad(const ToyModel &m, std::span<const double> x, int y) {
  const auto K = static_cast<std::size_t>(m.num_classes);
  const auto d = static_cast<std::size_t>(m.feature_dim);
  auto p = softmax(m.logits(x));
  p[static_cast<std::size_t>(y)] -= 1.0;
  const auto u = unit_features(x);
  Gradient g{Vector(K * d), p};
  for (std::size_t k = 0; k < K; ++k) {
    for (std::size_t i = 0; i < d; ++i) {
      g.weights[k * d + i] = p[k] * u[i];
    }
  }
  return g;
}

/// L1 norm of the weight gradient of the cross-entropy against the uniform
/// target. The gradient is (p - 1/K) phi(x)^T, so the norm factorizes as
/// ||p - 1/K||_1 * ||phi(x)||_1.
inline double gradnorm_score(const ToyModel &m, std::span<const double> x) {
  const auto p = softmax(m.logits(x));
  const double u = 1.0 / static_cast<double>(p.size());
  double dp = 0.0;
  for (double v : p) {
    dp += std::abs(v - u);
  }
  double dx = 0.0;
  for (double v : unit_features(x)) {
    dx += std::abs(v);
  }
  return dp * dx;
}

struct TrainResult {
  ToyModel model;
  double final_loss = 0.0;
  double train_accuracy = 0.0;
};

/// Mini-batch gradient descent on default-view features.
inline TrainResult train(const FeatureSet &data, const TrainConfig &cfg) {
  if (data.samples.empty()) {
    throw ValidationError("empty training set");
  }
  if (cfg.batch_size < 1 || cfg.epochs < 0 || !(cfg.learning_rate >= 0.0) ||
      !(cfg.dropout_rate >= 0.0 && cfg.dropout_rate < 1.0)) {
    throw ValidationError("invalid training config");
  }
  const auto K = static_cast<std::size_t>(data.num_classes);
  const auto d = static_cast<std::size_t>(data.feature_dim);

  ToyModel m;
  m.num_classes = data.num_classes;
  m.feature_dim = data.feature_dim;
  m.dropout_rate = cfg.dropout_rate;
  m.hyper = cfg;
  m.weights.resize(K * d);
  m.bias.assign(K, 0.0);
  {
    rng::Engine g(rng::derive_seed(cfg.seed, {2}));
    for (auto &w : m.weights) {
      w = cfg.init_scale * rng::standard_normal(g);
    }
  }

  auto mean_loss = [&] {
    double s = 0.0;
    for (const auto &x : data.samples) {
      s += loss(m, x.features[0], x.true_class);
    }
    return s / static_cast<double>(data.samples.size());
  };

  std::vector<std::size_t> order(data.samples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng::Engine g(rng::derive_seed(cfg.seed, {3, static_cast<std::uint64_t>(epoch)}));
    rng::shuffle(order.begin(), order.end(), g);
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
      const auto end =
          std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      Gradient acc{Vector(K * d, 0.0), Vector(K, 0.0)};
      for (std::size_t b = start; b < end; ++b) {
        const auto &s = data.samples[order[b]];
        const auto gr = loss_grad(m, s.features[0], s.true_class);
        for (std::size_t j = 0; j < acc.weights.size(); ++j) {
          acc.weights[j] += gr.weights[j];
        }
        for (std::size_t k = 0; k < K; ++k) {
          acc.bias[k] += gr.bias[k];
        }
      }
      const double step = cfg.learning_rate / static_cast<double>(end - start);
      for (std::size_t j = 0; j < acc.weights.size(); ++j) {
        m.weights[j] -= step * acc.weights[j];
      }
      for (std::size_t k = 0; k < K; ++k) {
        m.bias[k] -= step * acc.bias[k];
      }
    }
    if (!all_finite(m.weights) || !all_finite(m.bias) ||
        !std::isfinite(mean_loss())) {
      throw Error("training diverged at epoch " + std::to_string(epoch) +
                  " (non-finite loss); try a smaller learning rate");
    }
  }

  TrainResult res;
  res.final_loss = mean_loss();
  std::size_t correct = 0;
  for (const auto &s : data.samples) {
    correct += static_cast<int>(argmax(m.logits(s.features[0]))) == s.true_class;
  }
  res.train_accuracy =
      static_cast<double>(correct) / static_cast<double>(data.samples.size());
  res.model = std::move(m);
  return res;
}

/// Runs the model over every view of every sample.
///
/// mc_samples == 0 skips the stochastic passes. Otherwise each pass applies
/// an inverted-dropout Bernoulli(1 - rho) mask to the input features, drawn
/// from a stream derived from (mc_seed, sample index, view index).
inline Manifest predict(const ToyModel &model, const FeatureSet &features,
                        int mc_samples, std::uint64_t mc_seed) {
  if (!(model.dropout_rate >= 0.0 && model.dropout_rate < 1.0)) {
    throw ValidationError("dropout rate must lie in [0, 1)");
  }
  if (mc_samples == 1 || mc_samples < 0) {
    throw ValidationError("mc_samples must be 0 or at least 2");
  }
  if (features.num_classes != model.num_classes ||
      features.feature_dim != model.feature_dim) {
    throw ValidationError("feature set shape does not match the model");
  }
  const double keep = 1.0 - model.dropout_rate;
  const double scale = 1.0 / keep;

  Manifest m;
  m.name = features.name;
  m.num_classes = features.num_classes;
  m.view_set = features.views;
  m.records.reserve(features.samples.size());
  for (std::size_t s = 0; s < features.samples.size(); ++s) {
    const auto &fs = features.samples[s];
    PredictionRecord r;
    r.sample_id = fs.sample_id;
    r.true_class = fs.true_class;
    for (std::size_t v = 0; v < fs.features.size(); ++v) {
      const auto &x = fs.features[v];
      ViewPrediction vp;
      vp.logits = model.logits(x);
      vp.grad_l1 = gradnorm_score(model, x);
      if (mc_samples > 0) {
        rng::Engine g(rng::derive_seed(mc_seed, {s, v}));
        Vector masked(x.size());
        for (int k = 0; k < mc_samples; ++k) {
          for (std::size_t i = 0; i < x.size(); ++i) {
            masked[i] = rng::uniform01(g) < keep ? x[i] * scale : 0.0;
          }
          vp.mc_logits.push_back(model.logits(masked));
        }
      }
      const auto &id =
          v == 0 ? features.views.default_view : features.views.augmentation_views[v - 1];
      r.views.emplace(id, std::move(vp));
    }
    m.records.push_back(std::move(r));
  }
  return m;
}

// ---------------------------------------------------------------------------
// Files

inline SynthConfig synth_config_from_json(const nlohmann::json &j) {
  SynthConfig c;
  c.num_classes = j.value("num_classes", c.num_classes);
  c.num_aug_views = j.value("num_aug_views", c.num_aug_views);
  c.feature_dim = j.value("feature_dim", c.feature_dim);
  c.samples_per_class = j.value("samples_per_class", c.samples_per_class);
  c.noise_default = j.value("noise_default", c.noise_default);
  c.noise_optimal = j.value("noise_optimal", c.noise_optimal);
  c.noise_other = j.value("noise_other", c.noise_other);
  c.prototype_scale = j.value("prototype_scale", c.prototype_scale);
  c.planted_views = j.value("planted_views", c.planted_views);
  c.seed = j.value("seed", c.seed);
  c.train_fraction = j.value("train_fraction", c.train_fraction);
  return c;
}

inline nlohmann::ordered_json synth_config_to_json(const SynthConfig &c) {
  nlohmann::ordered_json j;
  j["num_classes"] = c.num_classes;
  j["num_aug_views"] = c.num_aug_views;
  j["feature_dim"] = c.feature_dim;
  j["samples_per_class"] = c.samples_per_class;
  j["noise_default"] = c.noise_default;
  j["noise_optimal"] = c.noise_optimal;
  j["noise_other"] = c.noise_other;
  j["prototype_scale"] = c.prototype_scale;
  j["planted_views"] = c.resolved_planted_views();
  j["seed"] = c.seed;
  j["train_fraction"] = c.train_fraction;
  return j;
}

inline TrainConfig train_config_from_json(const nlohmann::json &j) {
  TrainConfig c;
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.dropout_rate = j.value("dropout_rate", c.dropout_rate);
  c.init_scale = j.value("init_scale", c.init_scale);
  c.seed = j.value("seed", c.seed);
  return c;
}

inline nlohmann::ordered_json train_config_to_json(const TrainConfig &c) {
  nlohmann::ordered_json j;
  j["learning_rate"] = c.learning_rate;
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["dropout_rate"] = c.dropout_rate;
  j["init_scale"] = c.init_scale;
  j["seed"] = c.seed;
  return j;
}

inline std::string dump_model(const ToyModel &m) {
  nlohmann::ordered_json j;
  j["num_classes"] = m.num_classes;
  j["feature_dim"] = m.feature_dim;
  j["dropout_rate"] = m.dropout_rate;
  j["hyper"] = train_config_to_json(m.hyper);
  auto rows = nlohmann::ordered_json::array();
  const auto d = static_cast<std::size_t>(m.feature_dim);
  for (std::size_t k = 0; k < static_cast<std::size_t>(m.num_classes); ++k) {
    rows.push_back(Vector(m.weights.begin() + static_cast<std::ptrdiff_t>(k * d),
                          m.weights.begin() + static_cast<std::ptrdiff_t>((k + 1) * d)));
  }
  j["weights"] = std::move(rows);
  j["bias"] = m.bias;
  return j.dump(2) + "\n";
}

inline ToyModel parse_model(const std::string &text,
                            const std::string &source = "<text>") {
  ToyModel m;
  try {
    const auto j = nlohmann::json::parse(text);
    m.num_classes = j.at("num_classes").get<int>();
    m.feature_dim = j.at("feature_dim").get<int>();
    m.dropout_rate = j.at("dropout_rate").get<double>();
    m.hyper = train_config_from_json(j.at("hyper"));
    for (const auto &row : j.at("weights").get<std::vector<Vector>>()) {
      if (static_cast<int>(row.size()) != m.feature_dim) {
        throw ValidationError(source + ": weight row has wrong length");
      }
      m.weights.insert(m.weights.end(), row.begin(), row.end());
    }
    m.bias = j.at("bias").get<Vector>();
  } catch (const nlohmann::json::exception &e) {
    throw ValidationError(source + ": malformed model: " + e.what());
  }
  if (m.num_classes < 2 || m.feature_dim < 1 ||
      m.weights.size() != static_cast<std::size_t>(m.num_classes * m.feature_dim) ||
      m.bias.size() != static_cast<std::size_t>(m.num_classes) ||
      !all_finite(m.weights) || !all_finite(m.bias)) {
    throw ValidationError(source + ": model parameters have wrong shape or are "
                                   "not finite");
  }
  return m;
}

/// Same header/record layout as manifests, with "features" in place of
/// "views".
inline void write_features(const FeatureSet &fs, std::ostream &os) {
  nlohmann::ordered_json h;
  h["name"] = fs.name;
  h["num_classes"] = fs.num_classes;
  h["feature_dim"] = fs.feature_dim;
  h["default_view"] = fs.views.default_view;
  h["augmentation_views"] = fs.views.augmentation_views;
  os << h.dump() << '\n';
  for (const auto &s : fs.samples) {
    nlohmann::ordered_json r;
    r["sample_id"] = s.sample_id;
    r["true_class"] = s.true_class;
    nlohmann::ordered_json f = nlohmann::ordered_json::object();
    for (std::size_t v = 0; v < s.features.size(); ++v) {
      f[v == 0 ? fs.views.default_view : fs.views.augmentation_views[v - 1]] =
          s.features[v];
    }
    r["features"] = std::move(f);
    os << r.dump() << '\n';
  }
}

inline FeatureSet read_features(std::istream &is,
                                const std::string &source = "<stream>") {
  FeatureSet fs;
  std::string line;
  std::size_t line_no = 0;
  auto fail = [&](const std::string &what) -> void {
    throw ValidationError(source + ":" + std::to_string(line_no) + ": " + what);
  };
  try {
    if (!std::getline(is, line)) {
      throw ValidationError(source + ": missing header line");
    }
    ++line_no;
    const auto h = nlohmann::json::parse(line);
    fs.name = h.at("name").get<std::string>();
    fs.num_classes = h.at("num_classes").get<int>();
    fs.feature_dim = h.at("feature_dim").get<int>();
    fs.views.default_view = h.at("default_view").get<std::string>();
    fs.views.augmentation_views =
        h.at("augmentation_views").get<std::vector<ViewId>>();
    if (auto v = fs.views.violations(); !v.empty()) {
      fail(v.front());
    }
    while (std::getline(is, line)) {
      ++line_no;
      if (line.find_first_not_of(" \t\r") == std::string::npos) {
        continue;
      }
      const auto r = nlohmann::json::parse(line);
      FeatureSample s;
      s.sample_id = r.at("sample_id").get<std::string>();
      s.true_class = r.at("true_class").get<int>();
      const auto &f = r.at("features");
      s.features.push_back(f.at(fs.views.default_view).get<Vector>());
      for (const auto &id : fs.views.augmentation_views) {
        s.features.push_back(f.at(id).get<Vector>());
      }
      for (const auto &x : s.features) {
        if (static_cast<int>(x.size()) != fs.feature_dim || !all_finite(x)) {
          fail("feature vector has wrong length or non-finite values");
        }
      }
      if (s.true_class < 0 || s.true_class >= fs.num_classes) {
        fail("true_class out of range");
      }
      fs.samples.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception &e) {
    fail(std::string("malformed feature record: ") + e.what());
  }
  return fs;
}

namespace detail {

inline std::string read_file(const std::string &path, const char *what) {
  std::ifstream in(path);
  if (!in) {
    throw IoError(std::string("cannot open ") + what + " '" + path + "'");
  }
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::string &path, const std::string &text,
                       const char *what) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out || !(out << text) || !out.flush()) {
    throw IoError(std::string("cannot write ") + what + " '" + path + "'");
  }
}

} // namespace detail

inline void save_features(const FeatureSet &fs, const std::string &path) {
  std::ostringstream ss;
  write_features(fs, ss);
  detail::write_file(path, ss.str(), "feature file");
}

inline FeatureSet load_features(const std::string &path) {
  std::istringstream ss(detail::read_file(path, "feature file"));
  return read_features(ss, path);
}

inline void save_model(const ToyModel &m, const std::string &path) {
  detail::write_file(path, dump_model(m), "model file");
}

inline ToyModel load_model(const std::string &path) {
  return parse_model(detail::read_file(path, "model file"), path);
}

} // namespace mvtta::synth
