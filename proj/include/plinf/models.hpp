#pragma once

// A trained classifier of any kind, evaluated on users given as node lists of
// a playlist graph, plus training entry point and checkpoints.

#include <fstream>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "plinf/baselines.hpp"
#include "plinf/error.hpp"
#include "plinf/graph.hpp"
#include "plinf/matrix.hpp"
#include "plinf/model_spec.hpp"
#include "plinf/setnet.hpp"
#include "plinf/tensor_io.hpp"

namespace plinf {

// A virtual playlist that duplicates `source` (edges included) but carries
// its own embedding.
struct VirtualNode {
  NodeId source = 0;
  std::vector<double> embedding;
};

struct SetModel {
  SetArchitecture arch;
  SetParams params;
  FeatureScaler scaler;
  int depth = 0;       // propagation depth, graph kinds only
  bool graph = false;
};

class TrainedModel {
 public:
  ModelSpec spec;
  std::string attribute;
  std::vector<std::string> class_names;
  std::shared_ptr<const PlaylistClassifier> baseline;
  std::optional<SetModel> net;

  int classes() const { return static_cast<int>(class_names.size()); }
  bool uses_graph() const { return net && net->graph; }

  bool has_input_gradient() const { return baseline ? baseline->has_input_gradient() : true; }

  /// log-probabilities (users x classes) for users given as node lists of g.
  /// `prop` must be normalize(g) for graph kinds; computed when null.
  Matrix predict(const PlaylistGraph& g, const std::vector<std::vector<NodeId>>& users,
                 const Propagator* prop = nullptr) const {
    Matrix out(static_cast<Index>(users.size()), classes());
    if (baseline) {
      for (std::size_t u = 0; u < users.size(); ++u)
        out.row(static_cast<Index>(u)) = Eigen::Map<const RowVector>(
            sample_predict_user(*baseline, gather(g.features, users[u])).log_probs.data(), classes());
      return out;
    }
    const Matrix scaled = net->scaler.apply(g.features);
    Matrix rows;
    if (net->graph) {
      std::optional<Propagator> local;
      if (!prop) prop = &local.emplace(normalize(g));
      rows = propagate(*prop, scaled, net->depth);
    } else {
      rows = scaled;
    }
    const SetBatch batch = make_batch(rows.cols(), users.size(), [&](std::size_t u) { return gather(rows, users[u]); });
    return set_forward(net->arch, net->params, batch, nn::Mode::Eval, nullptr);
  }

  /// log-probabilities of one user owning `nodes` of g, optionally with an
  /// extra virtual playlist. Graph kinds only touch the k-hop neighborhood.
  RowVector user_log_probs(const PlaylistGraph& g, std::span<const NodeId> nodes, const VirtualNode* extra = nullptr) const {
    if (nodes.empty() && !extra) throw DataError("user_log_probs: user has no playlists");
    if (baseline) {
      Matrix rows = gather(g.features, nodes, extra ? 1 : 0);
      if (extra) rows.row(rows.rows() - 1) = Eigen::Map<const RowVector>(extra->embedding.data(), rows.cols());
      const auto p = sample_predict_user(*baseline, rows);
      return Eigen::Map<const RowVector>(p.log_probs.data(), classes());
    }
    SetBatch batch;
    if (net->graph) {
      batch.rows = extra ? graph_rows(DuplicateAdjacency{g, extra->source}, g, nodes, extra)
                         : graph_rows(GraphAdjacency{g}, g, nodes, nullptr);
    } else {
      Matrix raw = gather(g.features, nodes, extra ? 1 : 0);
      if (extra) raw.row(raw.rows() - 1) = Eigen::Map<const RowVector>(extra->embedding.data(), raw.cols());
      batch.rows = net->scaler.apply(raw);
    }
    batch.offsets.push_back(batch.rows.rows());
    return set_forward(net->arch, net->params, batch, nn::Mode::Eval, nullptr).row(0);
  }

  /// Gradient of log p_target(user) w.r.t. the raw embedding of node `wrt`.
  /// For non-graph kinds `wrt` must be one of the user's nodes.
  RowVector log_prob_gradient(const PlaylistGraph& g, std::span<const NodeId> nodes, NodeId wrt, int target) const {
    if (target < 0 || target >= classes()) throw DataError("log_prob_gradient: class out of range");
    if (!has_input_gradient()) throw ConfigError(to_string(spec.kind) + " provides no input gradients");
    auto pos = std::find(nodes.begin(), nodes.end(), wrt);
    if (baseline) {
      if (pos == nodes.end()) throw DataError("log_prob_gradient: node is not among the user's playlists");
      const Matrix rows = gather(g.features, nodes);
      const RowVector mean = baseline->predict_proba(rows).colwise().mean();
      Matrix gp = Matrix::Zero(1, classes());
      gp(0, target) = 1.0 / (static_cast<double>(rows.rows()) * std::max(mean[target], 1e-300));
      return baseline->proba_input_gradient(g.features.row(wrt), gp).row(0);
    }
    Matrix coeff;
    SetBatch batch;
    if (net->graph) {
      coeff = row_coefficients(GraphAdjacency{g}, nodes, net->depth);
      batch.rows = apply_coefficients(coeff, g, nullptr);
    } else {
      if (pos == nodes.end()) throw DataError("log_prob_gradient: node is not among the user's playlists");
      batch.rows = net->scaler.apply(gather(g.features, nodes));
    }
    batch.offsets.push_back(batch.rows.rows());
    SetTape tape;
    set_forward(net->arch, net->params, batch, nn::Mode::Eval, nullptr, &tape);
    Matrix grad = Matrix::Zero(1, classes());
    grad(0, target) = 1.0;
    SetParams scratch = zeros_like(net->params);
    const Matrix drows = set_backward(net->arch, net->params, tape, grad, scratch);
    RowVector d;
    if (net->graph) {
      d = coeff.col(wrt).transpose() * drows;
    } else {
      d = drows.row(pos - nodes.begin());
    }
    return d.array() / net->scaler.scale.transpose().array();
  }

  nlohmann::json to_json() const;
  static TrainedModel from_json(const nlohmann::json& j);

 private:
  static Matrix gather(const Matrix& src, std::span<const NodeId> nodes, Index extra_rows = 0) {
    Matrix out(static_cast<Index>(nodes.size()) + extra_rows, src.cols());
    for (std::size_t i = 0; i < nodes.size(); ++i) out.row(static_cast<Index>(i)) = src.row(nodes[i]);
    return out;
  }

  // Rows of (S^k scaled X) picked by C; column N of C (if any) is the virtual node.
  Matrix apply_coefficients(const Matrix& coeff, const PlaylistGraph& g, const VirtualNode* extra) const {
    const Index n = static_cast<Index>(g.size());
    Matrix out = Matrix::Zero(coeff.rows(), g.features.cols());
    const RowVector inv = net->scaler.scale.cwiseInverse().transpose();
    const RowVector mean = net->scaler.mean.transpose();
    for (Index j = 0; j < coeff.cols(); ++j) {
      bool any = false;
      for (Index r = 0; r < coeff.rows() && !any; ++r) any = coeff(r, j) != 0.0;
      if (!any) continue;
      RowVector x;
      if (j < n) {
        x = (g.features.row(j) - mean).cwiseProduct(inv);
      } else {
        x = (Eigen::Map<const RowVector>(extra->embedding.data(), g.features.cols()) - mean).cwiseProduct(inv);
      }
      out.noalias() += coeff.col(j) * x;
    }
    return out;
  }

  template <typename Adjacency>
  Matrix graph_rows(const Adjacency& adj, const PlaylistGraph& g, std::span<const NodeId> nodes,
                    const VirtualNode* extra) const {
    std::vector<NodeId> rows(nodes.begin(), nodes.end());
    if (extra) rows.push_back(static_cast<NodeId>(g.size()));
    return apply_coefficients(row_coefficients(adj, std::span<const NodeId>(rows), net->depth), g, extra);
  }
};

// ---------------------------------------------------------------------------
// Training

struct FitData {
  const PlaylistGraph* graph = nullptr;
  const Propagator* propagator = nullptr;  // normalize(*graph); graph kinds
  std::vector<std::vector<NodeId>> train_users, val_users;
  std::vector<int> train_labels, val_labels;
  std::vector<std::size_t> sample_users;  // oversampled indices into train_users (baselines)
  std::vector<double> class_weights;
  std::vector<double> priors;  // of the unbalanced training users
  int classes = 2;
};

struct FitOutcome {
  TrainedModel model;
  std::vector<double> val_curve;
  double val_loss = INFINITY;
  bool diverged = false;
};

struct FitOptions {
  int patience = 30;
  int max_epochs = 500;
};

inline FitOutcome fit_model(const ModelSpec& spec, const std::string& attribute, const std::vector<std::string>& class_names,
                            const FitData& data, Rng& rng, const FitOptions& opt = {}) {
  if (!data.graph) throw ConfigError("fit_model: no graph");
  const PlaylistGraph& g = *data.graph;
  if (static_cast<int>(class_names.size()) != data.classes) throw DataError("fit_model: class count mismatch");
  FitOutcome out;
  out.model.spec = spec;
  out.model.attribute = attribute;
  out.model.class_names = class_names;

  if (is_baseline(spec.kind)) {
    std::vector<int> labels;
    std::vector<NodeId> nodes;
    const auto& users = data.sample_users;
    for (std::size_t idx : users) {
      for (NodeId v : data.train_users.at(idx)) {
        nodes.push_back(v);
        labels.push_back(data.train_labels.at(idx));
      }
    }
    Matrix x(static_cast<Index>(nodes.size()), g.features.cols());
    for (std::size_t i = 0; i < nodes.size(); ++i) x.row(static_cast<Index>(i)) = g.features.row(nodes[i]);
    out.model.baseline = fit_baseline(spec, x, labels, data.classes, data.priors, rng);
    return out;
  }

  // Scaler fitted on the training users' playlists.
  std::vector<NodeId> train_nodes;
  for (const auto& u : data.train_users) train_nodes.insert(train_nodes.end(), u.begin(), u.end());
  Matrix train_raw(static_cast<Index>(train_nodes.size()), g.features.cols());
  for (std::size_t i = 0; i < train_nodes.size(); ++i) train_raw.row(static_cast<Index>(i)) = g.features.row(train_nodes[i]);

  SetModel m;
  m.arch = make_architecture(spec, static_cast<int>(g.features.cols()), data.classes);
  m.scaler = FeatureScaler::fit(train_raw);
  m.graph = is_graph_model(spec.kind);
  m.depth = m.graph ? spec.hp.depth : 0;
  Matrix rows = m.scaler.apply(g.features);
  if (m.graph) {
    std::optional<Propagator> local;
    const Propagator* prop = data.propagator;
    if (!prop) prop = &local.emplace(normalize(g));
    rows = propagate(*prop, rows, m.depth);
  }
  auto batch_of = [&](const std::vector<std::vector<NodeId>>& users) {
    return make_batch(rows.cols(), users.size(), [&](std::size_t u) {
      Matrix r(static_cast<Index>(users[u].size()), rows.cols());
      for (std::size_t i = 0; i < users[u].size(); ++i) r.row(static_cast<Index>(i)) = rows.row(users[u][i]);
      return r;
    });
  };
  const SetBatch train = batch_of(data.train_users);
  const SetBatch val = data.val_users.empty() ? SetBatch{} : batch_of(data.val_users);
  SetParams init = init_set_params(m.arch, rng);
  SetTrainOptions so{spec.hp.lr, opt.patience, opt.max_epochs};
  auto result = train_set_network(m.arch, std::move(init), train, data.train_labels, val, data.val_labels,
                                  data.class_weights, so, rng);
  m.params = std::move(result.params);
  out.model.net = std::move(m);
  out.val_curve = std::move(result.val_curve);
  out.val_loss = result.best_val_loss;
  out.diverged = result.diverged;
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints: a JSON header (kind, hyperparameters, attribute, class names)
// and the parameters as name -> tensor.

inline nlohmann::json TrainedModel::to_json() const {
  nlohmann::json j = {{"format", "plinf-model"},
                      {"version", 1},
                      {"kind", to_string(spec.kind)},
                      {"hyperparameters", hyperparams_to_json(spec)},
                      {"attribute", attribute},
                      {"class_names", class_names}};
  if (baseline) {
    j["state"] = baseline->to_json();
  } else {
    SetParams copy = net->params;
    j["input_dim"] = net->arch.encoder.input_dim();
    j["scaler"] = scaler_to_json(net->scaler);
    j["params"] = views_to_json(param_views(copy, true));
  }
  return j;
}

inline TrainedModel TrainedModel::from_json(const nlohmann::json& j) {
  TrainedModel m;
  try {
    if (j.value("format", "") != "plinf-model") throw DataError("not a model checkpoint");
    m.spec = model_spec_from_json(j);
    m.attribute = j.at("attribute").get<std::string>();
    m.class_names = j.at("class_names").get<std::vector<std::string>>();
    if (is_baseline(m.spec.kind)) {
      m.baseline = baseline_from_json(m.spec.kind, j.at("state"));
    } else {
      SetModel s;
      s.arch = make_architecture(m.spec, j.at("input_dim").get<int>(), m.classes());
      s.scaler = scaler_from_json(j.at("scaler"));
      s.graph = is_graph_model(m.spec.kind);
      s.depth = s.graph ? m.spec.hp.depth : 0;
      Rng rng(0);
      s.params = init_set_params(s.arch, rng);
      views_from_json(param_views(s.params, true), j.at("params"));
      m.net = std::move(s);
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint: " + std::string(e.what()));
  }
  return m;
}

inline void write_model(const TrainedModel& m, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw RuntimeFailure("cannot write '" + path + "'");
  out << m.to_json().dump() << '\n';
}

inline TrainedModel load_model(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open checkpoint '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint '" + path + "': " + e.what());
  }
  return TrainedModel::from_json(j);
}

}  // namespace plinf
