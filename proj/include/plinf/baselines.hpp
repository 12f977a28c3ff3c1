#pragma once

// Per-playlist classifiers (random, logistic regression, KNN, MLP). A user is
// classified by averaging the probability vectors of its playlists.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "plinf/error.hpp"
#include "plinf/matrix.hpp"
#include "plinf/model_spec.hpp"
#include "plinf/nn.hpp"
#include "plinf/rng.hpp"
#include "plinf/tensor_io.hpp"

namespace plinf {

class PlaylistClassifier {
 public:
  virtual ~PlaylistClassifier() = default;
  virtual ModelKind kind() const = 0;
  virtual int classes() const = 0;
  // One probability row per input row (raw, unscaled embeddings).
  virtual Matrix predict_proba(const Matrix& rows) const = 0;
  virtual bool has_input_gradient() const { return false; }
  // Gradient of sum(grad_proba .* predict_proba(rows)) w.r.t. the raw rows.
  virtual Matrix proba_input_gradient(const Matrix& rows, const Matrix& grad_proba) const {
    (void)rows;
    (void)grad_proba;
    throw ConfigError(to_string(kind()) + " classifier provides no input gradients");
  }
  virtual nlohmann::json to_json() const = 0;
};

/// Mean of per-playlist probabilities, then log; argmax ties go to the lowest class.
inline UserPrediction sample_predict_user(const PlaylistClassifier& clf, const Matrix& playlists, std::string user_id = {}) {
  if (playlists.rows() == 0) throw DataError("sample_predict_user: user '" + user_id + "' has no playlists");
  const Matrix probs = clf.predict_proba(playlists);
  const RowVector mean = probs.colwise().mean();
  UserPrediction p;
  p.user_id = std::move(user_id);
  p.log_probs.resize(static_cast<std::size_t>(mean.size()));
  std::vector<double> pv(mean.data(), mean.data() + mean.size());
  for (std::size_t c = 0; c < pv.size(); ++c) p.log_probs[c] = std::log(std::max(pv[c], 1e-300));
  p.predicted = argmax_lowest(pv);
  return p;
}

// ---------------------------------------------------------------------------

/// One-hot draws from the training priors. The draw for a row is seeded by
/// the row's bytes, so a prediction is a pure function of (seed, row).
class RandomClassifier final : public PlaylistClassifier {
 public:
  RandomClassifier(std::vector<double> priors, std::uint64_t seed) : priors_(std::move(priors)), seed_(seed) {}

  ModelKind kind() const override { return ModelKind::Random; }
  int classes() const override { return static_cast<int>(priors_.size()); }
  const std::vector<double>& priors() const { return priors_; }

  Matrix predict_proba(const Matrix& rows) const override {
    Matrix out = Matrix::Zero(rows.rows(), classes());
    for (Index i = 0; i < rows.rows(); ++i) {
      const RowVector r = rows.row(i);
      const std::string_view bytes(reinterpret_cast<const char*>(r.data()), sizeof(double) * static_cast<std::size_t>(r.size()));
      Rng rng(derive_seed(seed_, fnv1a(bytes)));
      out(i, static_cast<Index>(rng.categorical(priors_))) = 1.0;
    }
    return out;
  }

  nlohmann::json to_json() const override { return {{"priors", priors_}, {"seed", seed_}}; }

 private:
  std::vector<double> priors_;
  std::uint64_t seed_;
};

/// Multinomial logistic regression on standardized inputs.
class LinearClassifier final : public PlaylistClassifier {
 public:
  LinearClassifier(FeatureScaler scaler, Matrix weight, Vector bias)
      : scaler_(std::move(scaler)), weight_(std::move(weight)), bias_(std::move(bias)) {}

  ModelKind kind() const override { return ModelKind::Linear; }
  int classes() const override { return static_cast<int>(weight_.rows()); }
  const Matrix& weight() const { return weight_; }
  const Vector& bias() const { return bias_; }
  const FeatureScaler& scaler() const { return scaler_; }

  Matrix logits(const Matrix& rows) const {
    Matrix z = scaler_.apply(rows) * weight_.transpose();
    z.rowwise() += bias_.transpose();
    return z;
  }

  Matrix predict_proba(const Matrix& rows) const override { return nn::log_softmax(logits(rows)).array().exp(); }

  bool has_input_gradient() const override { return true; }
  Matrix proba_input_gradient(const Matrix& rows, const Matrix& grad_proba) const override {
    const Matrix p = predict_proba(rows);
    const Vector inner = (grad_proba.array() * p.array()).rowwise().sum();
    Matrix dlogits = p.array() * (grad_proba.array().colwise() - inner.array());
    Matrix dz = dlogits * weight_;
    return (dz.array().rowwise() / scaler_.scale.transpose().array()).matrix();
  }

  nlohmann::json to_json() const override;

 private:
  FeatureScaler scaler_;
  Matrix weight_;
  Vector bias_;
};

class KNNClassifier final : public PlaylistClassifier {
 public:
  // `standardized` holds the training rows after `scaler`.
  KNNClassifier(FeatureScaler scaler, Matrix standardized, std::vector<int> labels, int classes, int k,
                bool distance_weighting)
      : scaler_(std::move(scaler)), train_(std::move(standardized)), labels_(std::move(labels)), classes_(classes), k_(k),
        distance_weighting_(distance_weighting) {
    if (k_ < 1) throw ConfigError("KNN needs k >= 1");
    if (static_cast<Index>(labels_.size()) != train_.rows()) throw DataError("KNN: label count mismatch");
  }

  ModelKind kind() const override { return ModelKind::KNN; }
  int classes() const override { return classes_; }

  Matrix predict_proba(const Matrix& rows) const override {
    const Matrix q = scaler_.apply(rows);
    const Index n = train_.rows();
    const Index k = std::min<Index>(k_, n);
    Matrix out = Matrix::Zero(rows.rows(), classes_);
    std::vector<std::pair<double, Index>> dist(static_cast<std::size_t>(n));
    for (Index i = 0; i < q.rows(); ++i) {
      for (Index j = 0; j < n; ++j) dist[static_cast<std::size_t>(j)] = {(train_.row(j) - q.row(i)).norm(), j};
      std::partial_sort(dist.begin(), dist.begin() + k, dist.end());
      bool exact = false;
      for (Index r = 0; r < k; ++r) exact = exact || dist[static_cast<std::size_t>(r)].first == 0.0;
      double total = 0.0;
      for (Index r = 0; r < k; ++r) {
        const auto [d, j] = dist[static_cast<std::size_t>(r)];
        double w = 1.0;
        if (distance_weighting_) w = exact ? (d == 0.0 ? 1.0 : 0.0) : 1.0 / d;
        out(i, labels_[static_cast<std::size_t>(j)]) += w;
        total += w;
      }
      out.row(i) /= total;
    }
    return out;
  }

  nlohmann::json to_json() const override;

 private:
  FeatureScaler scaler_;
  Matrix train_;  // standardized
  std::vector<int> labels_;
  int classes_;
  int k_;
  bool distance_weighting_;
};

/// Per-playlist MLP with ReLU hidden layers and a linear output.
class MLPClassifier final : public PlaylistClassifier {
 public:
  MLPClassifier(FeatureScaler scaler, nn::MLPSpec spec, nn::MLPParams params)
      : scaler_(std::move(scaler)), spec_(std::move(spec)), params_(std::move(params)) {}

  ModelKind kind() const override { return ModelKind::SampleMLP; }
  int classes() const override { return spec_.output_dim(); }
  const nn::MLPSpec& spec() const { return spec_; }
  const nn::MLPParams& params() const { return params_; }
  const FeatureScaler& scaler() const { return scaler_; }

  Matrix log_proba(const Matrix& rows, nn::MLPTape* tape = nullptr) const {
    return nn::log_softmax(nn::mlp_forward(spec_, params_, scaler_.apply(rows), nn::Mode::Eval, nullptr, tape));
  }

  Matrix predict_proba(const Matrix& rows) const override { return log_proba(rows).array().exp(); }

  bool has_input_gradient() const override { return true; }
  Matrix proba_input_gradient(const Matrix& rows, const Matrix& grad_proba) const override {
    nn::MLPTape tape;
    const Matrix logp = log_proba(rows, &tape);
    const Matrix dlogp = grad_proba.array() * logp.array().exp();
    const Matrix dlogits = nn::log_softmax_backward(logp, dlogp);
    nn::MLPParams scratch = nn::zeros_like(params_);
    const Matrix dz = nn::mlp_backward(spec_, params_, tape, dlogits, scratch);
    return (dz.array().rowwise() / scaler_.scale.transpose().array()).matrix();
  }

  nlohmann::json to_json() const override;

 private:
  FeatureScaler scaler_;
  nn::MLPSpec spec_;
  nn::MLPParams params_;
};

// ---------------------------------------------------------------------------
// Serialization

inline nlohmann::json LinearClassifier::to_json() const {
  return {{"scaler", scaler_to_json(scaler_)}, {"weight", matrix_to_json(weight_)}, {"bias", vector_to_json(bias_)}};
}

inline nlohmann::json KNNClassifier::to_json() const {
  return {{"scaler", scaler_to_json(scaler_)}, {"train", matrix_to_json(train_)}, {"labels", labels_},
          {"classes", classes_}, {"neighbors", k_}, {"weights", distance_weighting_ ? "distance" : "uniform"}};
}

inline nlohmann::json MLPClassifier::to_json() const {
  nn::MLPParams copy = params_;
  std::vector<nn::ParamView> views;
  nn::append_views(copy, "mlp", views, true);
  std::vector<int> hidden(spec_.layer_dims.begin() + 1, spec_.layer_dims.end() - 1);
  return {{"scaler", scaler_to_json(scaler_)}, {"input_dim", spec_.input_dim()}, {"hidden_layers", hidden},
          {"classes", spec_.output_dim()}, {"params", views_to_json(views)}};
}

/// Inverse of PlaylistClassifier::to_json for the given kind.
inline std::unique_ptr<PlaylistClassifier> baseline_from_json(ModelKind kind, const nlohmann::json& j) {
  try {
    switch (kind) {
      case ModelKind::Random:
        return std::make_unique<RandomClassifier>(j.at("priors").get<std::vector<double>>(), j.at("seed").get<std::uint64_t>());
      case ModelKind::Linear:
        return std::make_unique<LinearClassifier>(scaler_from_json(j.at("scaler")), matrix_from_json(j.at("weight")),
                                                  vector_from_json(j.at("bias")));
      case ModelKind::KNN:
        return std::make_unique<KNNClassifier>(scaler_from_json(j.at("scaler")), matrix_from_json(j.at("train")),
                                               j.at("labels").get<std::vector<int>>(), j.at("classes").get<int>(),
                                               j.at("neighbors").get<int>(), j.at("weights").get<std::string>() == "distance");
      case ModelKind::SampleMLP: {
        nn::MLPSpec spec;
        spec.layer_dims.push_back(j.at("input_dim").get<int>());
        for (int h : j.at("hidden_layers").get<std::vector<int>>()) spec.layer_dims.push_back(h);
        spec.layer_dims.push_back(j.at("classes").get<int>());
        spec.activation = nn::Activation::ReLU;
        spec.activate_output = false;
        Rng rng(0);
        nn::MLPParams params = nn::init_mlp(spec, rng);
        std::vector<nn::ParamView> views;
        nn::append_views(params, "mlp", views, true);
        views_from_json(views, j.at("params"));
        return std::make_unique<MLPClassifier>(scaler_from_json(j.at("scaler")), std::move(spec), std::move(params));
      }
      default: break;
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint: " + std::string(e.what()));
  }
  throw DataError("checkpoint: " + to_string(kind) + " is not a baseline");
}

// ---------------------------------------------------------------------------
// Training

namespace detail {

inline void check_all_classes(std::span<const int> labels, int classes) {
  std::vector<int> count(static_cast<std::size_t>(classes), 0);
  for (int y : labels) {
    if (y < 0 || y >= classes) throw DataError("training label " + std::to_string(y) + " out of range");
    ++count[static_cast<std::size_t>(y)];
  }
  for (int c = 0; c < classes; ++c)
    if (count[static_cast<std::size_t>(c)] == 0)
      throw DataError("class " + std::to_string(c) + " is absent from the training data");
}

inline Matrix one_hot_labels(std::span<const int> labels, int classes) {
  Matrix y = Matrix::Zero(static_cast<Index>(labels.size()), classes);
  for (std::size_t i = 0; i < labels.size(); ++i) y(static_cast<Index>(i), labels[i]) = 1.0;
  return y;
}

}  // namespace detail

struct LinearFitOptions {
  double lr = 0.05;
  int max_iterations = 3000;
  double tolerance = 1e-9;  // relative change in the objective
};

/// Full-batch Adam on mean NLL + ||W||^2 / (2 C n).
inline std::unique_ptr<LinearClassifier> fit_linear(const Matrix& x, std::span<const int> labels, int classes, double c,
                                                    const LinearFitOptions& opt = {}) {
  if (!(c > 0.0)) throw ConfigError("Linear: C must be positive");
  detail::check_all_classes(labels, classes);
  FeatureScaler scaler = FeatureScaler::fit(x);
  const Matrix z = scaler.apply(x);
  const double n = static_cast<double>(x.rows());
  const Matrix y = detail::one_hot_labels(labels, classes);
  Matrix w = Matrix::Zero(classes, x.cols());
  Vector b = Vector::Zero(classes);
  Matrix gw(classes, x.cols());
  Vector gb(classes);
  nn::AdamState adam;
  adam.lr = opt.lr;
  std::vector<nn::ParamView> pv{{"w", w.data(), w.rows(), w.cols()}, {"b", b.data(), b.size(), 1}};
  std::vector<nn::ParamView> gv{{"w", gw.data(), gw.rows(), gw.cols()}, {"b", gb.data(), gb.size(), 1}};
  const double l2 = 1.0 / (c * n);
  double previous = INFINITY;
  for (int it = 0; it < opt.max_iterations; ++it) {
    Matrix logits = z * w.transpose();
    logits.rowwise() += b.transpose();
    const Matrix logp = nn::log_softmax(logits);
    const double loss = -(y.array() * logp.array()).sum() / n + 0.5 * l2 * w.squaredNorm();
    const Matrix dlogits = (logp.array().exp() - y.array()) / n;
    gw = dlogits.transpose() * z + l2 * w;
    gb = dlogits.colwise().sum().transpose();
    if (std::abs(previous - loss) <= opt.tolerance * std::max(1.0, std::abs(loss))) break;
    previous = loss;
    nn::adam_step(adam, pv, gv);
  }
  return std::make_unique<LinearClassifier>(std::move(scaler), std::move(w), std::move(b));
}

struct MLPFitOptions {
  double lr = 1e-3;
  int max_epochs = 200;
  int batch_size = 200;
  double tolerance = 1e-4;
  int no_improvement_epochs = 10;
};

/// Minibatch Adam on mean NLL + alpha ||W||^2 / (2 n_batch).
inline std::unique_ptr<MLPClassifier> fit_sample_mlp(const Matrix& x, std::span<const int> labels, int classes,
                                                      const std::vector<int>& hidden, double alpha, Rng& rng,
                                                      const MLPFitOptions& opt = {}) {
  detail::check_all_classes(labels, classes);
  FeatureScaler scaler = FeatureScaler::fit(x);
  const Matrix z = scaler.apply(x);
  nn::MLPSpec spec;
  spec.layer_dims.push_back(static_cast<int>(x.cols()));
  for (int h : hidden) spec.layer_dims.push_back(h);
  spec.layer_dims.push_back(classes);
  spec.activation = nn::Activation::ReLU;
  spec.activate_output = false;
  nn::MLPParams params = nn::init_mlp(spec, rng);
  nn::MLPParams grads = nn::zeros_like(params);
  std::vector<nn::ParamView> pv, gv;
  nn::append_views(params, "mlp", pv);
  nn::append_views(grads, "mlp", gv);
  nn::AdamState adam;
  adam.lr = opt.lr;

  std::vector<Index> order(static_cast<std::size_t>(x.rows()));
  std::iota(order.begin(), order.end(), Index{0});
  double best = INFINITY;
  int stale = 0;
  for (int epoch = 0; epoch < opt.max_epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(opt.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(opt.batch_size));
      const Index nb = static_cast<Index>(end - start);
      Matrix xb(nb, z.cols());
      std::vector<int> yb(static_cast<std::size_t>(nb));
      for (Index i = 0; i < nb; ++i) {
        xb.row(i) = z.row(order[start + static_cast<std::size_t>(i)]);
        yb[static_cast<std::size_t>(i)] = labels[static_cast<std::size_t>(order[start + static_cast<std::size_t>(i)])];
      }
      nn::MLPTape tape;
      const Matrix logp = nn::log_softmax(nn::mlp_forward(spec, params, xb, nn::Mode::Train, &rng, &tape));
      auto nll = nn::weighted_nll(logp, yb, {});
      double reg = 0.0;
      for (const auto& l : params.linear) reg += l.weight.squaredNorm();
      epoch_loss += (nll.loss + 0.5 * alpha * reg / static_cast<double>(nb)) * static_cast<double>(nb);
      for (auto& g : gv) std::fill(g.values().begin(), g.values().end(), 0.0);
      nn::mlp_backward(spec, params, tape, nn::log_softmax_backward(logp, nll.grad), grads);
      for (std::size_t l = 0; l < params.linear.size(); ++l)
        grads.linear[l].weight += (alpha / static_cast<double>(nb)) * params.linear[l].weight;
      nn::adam_step(adam, pv, gv);
    }
    epoch_loss /= static_cast<double>(x.rows());
    if (!std::isfinite(epoch_loss)) throw RuntimeFailure("SampleMLP training diverged");
    if (epoch_loss > best - opt.tolerance) {
      if (++stale >= opt.no_improvement_epochs) break;
    } else {
      stale = 0;
    }
    best = std::min(best, epoch_loss);
  }
  return std::make_unique<MLPClassifier>(std::move(scaler), std::move(spec), std::move(params));
}

/// Fits one of the sample-based baselines. `x`/`labels` are the (oversampled)
/// training playlists; `priors` are the class priors of the unbalanced
/// training users, used by the random classifier.
inline std::unique_ptr<PlaylistClassifier> fit_baseline(const ModelSpec& spec, const Matrix& x, std::span<const int> labels,
                                                        int classes, std::span<const double> priors, Rng& rng) {
  switch (spec.kind) {
    case ModelKind::Random: {
      if (static_cast<int>(priors.size()) != classes) throw DataError("Random: prior count mismatch");
      detail::check_all_classes(labels, classes);
      return std::make_unique<RandomClassifier>(std::vector<double>(priors.begin(), priors.end()), rng.next());
    }
    case ModelKind::Linear: return fit_linear(x, labels, classes, spec.hp.c);
    case ModelKind::KNN: {
      detail::check_all_classes(labels, classes);
      FeatureScaler scaler = FeatureScaler::fit(x);
      Matrix z = scaler.apply(x);
      return std::make_unique<KNNClassifier>(std::move(scaler), std::move(z), std::vector<int>(labels.begin(), labels.end()),
                                             classes, spec.hp.neighbors, spec.hp.distance_weighting);
    }
    case ModelKind::SampleMLP: return fit_sample_mlp(x, labels, classes, spec.hp.hidden_layers, spec.hp.alpha, rng);
    default: throw ConfigError(to_string(spec.kind) + " is not a sample-based baseline");
  }
}

}  // namespace plinf
