#pragma once

// Set networks over a user's playlist rows: a per-row encoder, then either
// concat(sum, mean, max) pooling or a DeepSet rho(sum phi(.)), then a linear
// readout and log-softmax. The graph kinds use the same network on
// propagated rows, with a single linear+activation layer as the encoder.

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "plinf/error.hpp"
#include "plinf/matrix.hpp"
#include "plinf/model_spec.hpp"
#include "plinf/nn.hpp"
#include "plinf/rng.hpp"

namespace plinf {

struct SetArchitecture {
  bool deepset = false;
  nn::MLPSpec encoder;
  nn::MLPSpec phi, rho;  // deepset only
  int classes = 2;

  int latent() const { return encoder.output_dim(); }
  int pooled_dim() const { return deepset ? rho.output_dim() : 3 * latent(); }

  void validate() const {
    encoder.validate();
    if (deepset) {
      phi.validate();
      rho.validate();
      if (phi.input_dim() != latent() || rho.input_dim() != phi.output_dim())
        throw ConfigError("set architecture: phi/rho dimensions do not chain");
    }
    if (classes < 2) throw ConfigError("set architecture needs at least two classes");
  }
};

/// Architecture for a set or graph model kind on `input_dim` features.
inline SetArchitecture make_architecture(const ModelSpec& spec, int input_dim, int classes) {
  if (is_baseline(spec.kind)) throw ConfigError(to_string(spec.kind) + " is not a set or graph model");
  const auto& h = spec.hp;
  if (h.hidden < 1) throw ConfigError("hidden size must be positive");
  SetArchitecture a;
  a.deepset = is_deepset(spec.kind);
  a.classes = classes;
  a.encoder.activation = h.activation;
  a.encoder.dropout_rate = h.dropout;
  a.encoder.layer_dims = {input_dim};
  if (is_graph_model(spec.kind)) {
    if (h.depth < 0) throw ConfigError("gnn depth must be nonnegative");
    a.encoder.layer_dims.push_back(h.hidden);
  } else {
    if (h.mlp_layers < 1) throw ConfigError("mlp_layers must be at least 1");
    for (int l = 0; l < h.mlp_layers; ++l) a.encoder.layer_dims.push_back(h.hidden);
    a.encoder.batch_norm.assign(static_cast<std::size_t>(h.mlp_layers), true);
  }
  if (a.deepset) {
    if (h.phi_layers < 1 || h.rho_layers < 1) throw ConfigError("phi_layers and rho_layers must be at least 1");
    a.phi.activation = a.rho.activation = h.activation;
    a.phi.layer_dims.assign(static_cast<std::size_t>(h.phi_layers) + 1, h.hidden);
    a.rho.layer_dims.assign(static_cast<std::size_t>(h.rho_layers) + 1, h.hidden);
    a.phi.batch_norm.assign(static_cast<std::size_t>(h.phi_layers), true);
    a.phi.batch_norm.back() = false;  // BN after hidden layers of phi only
  }
  a.validate();
  return a;
}

struct SetParams {
  nn::MLPParams encoder, phi, rho;
  nn::Linear readout;  // classes x pooled_dim
};

inline SetParams init_set_params(const SetArchitecture& a, Rng& rng) {
  a.validate();
  SetParams p;
  p.encoder = nn::init_mlp(a.encoder, rng);
  if (a.deepset) {
    p.phi = nn::init_mlp(a.phi, rng);
    p.rho = nn::init_mlp(a.rho, rng);
  }
  p.readout = nn::init_linear(a.pooled_dim(), a.classes, rng);
  return p;
}

inline std::vector<nn::ParamView> param_views(SetParams& p, bool include_stats = false) {
  std::vector<nn::ParamView> out;
  nn::append_views(p.encoder, "encoder", out, include_stats);
  nn::append_views(p.phi, "phi", out, include_stats);
  nn::append_views(p.rho, "rho", out, include_stats);
  nn::append_views(p.readout, "readout", out);
  return out;
}

inline SetParams zeros_like(const SetParams& p) {
  return {nn::zeros_like(p.encoder), nn::zeros_like(p.phi), nn::zeros_like(p.rho),
          {Matrix::Zero(p.readout.weight.rows(), p.readout.weight.cols()), Vector::Zero(p.readout.bias.size())}};
}

// Stacked rows of several users; user u owns rows [offsets[u], offsets[u+1]).
struct SetBatch {
  Matrix rows;
  std::vector<Index> offsets{0};

  std::size_t users() const { return offsets.size() - 1; }
  Index count(std::size_t u) const { return offsets[u + 1] - offsets[u]; }
};

template <typename RowsOf>
SetBatch make_batch(Index dim, std::size_t users, RowsOf&& rows_of) {
  SetBatch b;
  std::vector<Matrix> parts;
  Index total = 0;
  for (std::size_t u = 0; u < users; ++u) {
    parts.push_back(rows_of(u));
    if (parts.back().rows() == 0) throw DataError("set model: user with no playlists");
    total += parts.back().rows();
    b.offsets.push_back(total);
  }
  b.rows.resize(total, dim);
  for (std::size_t u = 0; u < users; ++u) b.rows.middleRows(b.offsets[u], parts[u].rows()) = parts[u];
  return b;
}

struct SetTape {
  nn::MLPTape encoder, phi, rho;
  std::vector<Index> offsets;
  std::vector<Index> argmax;  // users x latent, row of the first maximal entry
  Matrix pooled;
  Matrix log_probs;
};

/// users x classes log-probabilities.
inline Matrix set_forward(const SetArchitecture& a, const SetParams& p, const SetBatch& batch, nn::Mode mode, Rng* rng,
                          SetTape* tape = nullptr) {
  const std::size_t users = batch.users();
  if (users == 0) throw DataError("set_forward: empty batch");
  for (std::size_t u = 0; u < users; ++u)
    if (batch.count(u) <= 0) throw DataError("set_forward: user with no playlists");
  const Matrix h = nn::mlp_forward(a.encoder, p.encoder, batch.rows, mode, rng, tape ? &tape->encoder : nullptr);
  const Index d = h.cols();
  Matrix pooled;
  if (a.deepset) {
    const Matrix f = nn::mlp_forward(a.phi, p.phi, h, mode, rng, tape ? &tape->phi : nullptr);
    Matrix z(static_cast<Index>(users), f.cols());
    for (std::size_t u = 0; u < users; ++u)
      z.row(static_cast<Index>(u)) = f.middleRows(batch.offsets[u], batch.count(u)).colwise().sum();
    pooled = nn::mlp_forward(a.rho, p.rho, z, mode, rng, tape ? &tape->rho : nullptr);
  } else {
    pooled.resize(static_cast<Index>(users), 3 * d);
    std::vector<Index> arg(users * static_cast<std::size_t>(d));
    for (std::size_t u = 0; u < users; ++u) {
      const auto block = h.middleRows(batch.offsets[u], batch.count(u));
      const auto ui = static_cast<Index>(u);
      pooled.row(ui).segment(0, d) = block.colwise().sum();
      pooled.row(ui).segment(d, d) = pooled.row(ui).segment(0, d) / static_cast<double>(block.rows());
      for (Index j = 0; j < d; ++j) {
        Index best = 0;
        for (Index r = 1; r < block.rows(); ++r)
          if (block(r, j) > block(best, j)) best = r;
        pooled(ui, 2 * d + j) = block(best, j);
        arg[u * static_cast<std::size_t>(d) + static_cast<std::size_t>(j)] = batch.offsets[u] + best;
      }
    }
    if (tape) tape->argmax = std::move(arg);
  }
  Matrix logits = pooled * p.readout.weight.transpose();
  logits.rowwise() += p.readout.bias.transpose();
  Matrix logp = nn::log_softmax(logits);
  if (tape) {
    tape->offsets = batch.offsets;
    tape->pooled = std::move(pooled);
    tape->log_probs = logp;
  }
  return logp;
}

/// Accumulates parameter gradients for d(sum grad_log_probs .* log_probs) and
/// returns the gradient with respect to the batch rows.
inline Matrix set_backward(const SetArchitecture& a, const SetParams& p, const SetTape& tape, const Matrix& grad_log_probs,
                           SetParams& grads) {
  if (grad_log_probs.rows() != tape.log_probs.rows() || grad_log_probs.cols() != tape.log_probs.cols())
    throw DataError("set_backward: gradient shape mismatch");
  const Matrix dlogits = nn::log_softmax_backward(tape.log_probs, grad_log_probs);
  grads.readout.weight.noalias() += dlogits.transpose() * tape.pooled;
  grads.readout.bias += dlogits.colwise().sum().transpose();
  const Matrix dpooled = dlogits * p.readout.weight;
  const std::size_t users = tape.offsets.size() - 1;
  const Index rows = tape.offsets.back();
  const Index d = a.latent();
  Matrix dh(rows, d);
  if (a.deepset) {
    const Matrix dz = nn::mlp_backward(a.rho, p.rho, tape.rho, dpooled, grads.rho);
    Matrix df(rows, dz.cols());
    for (std::size_t u = 0; u < users; ++u)
      for (Index r = tape.offsets[u]; r < tape.offsets[u + 1]; ++r) df.row(r) = dz.row(static_cast<Index>(u));
    dh = nn::mlp_backward(a.phi, p.phi, tape.phi, df, grads.phi);
  } else {
    for (std::size_t u = 0; u < users; ++u) {
      const auto ui = static_cast<Index>(u);
      const double n = static_cast<double>(tape.offsets[u + 1] - tape.offsets[u]);
      const RowVector base = dpooled.row(ui).segment(0, d) + dpooled.row(ui).segment(d, d) / n;
      for (Index r = tape.offsets[u]; r < tape.offsets[u + 1]; ++r) dh.row(r) = base;
      for (Index j = 0; j < d; ++j) dh(tape.argmax[u * static_cast<std::size_t>(d) + static_cast<std::size_t>(j)], j) += dpooled(ui, 2 * d + j);
    }
  }
  return nn::mlp_backward(a.encoder, p.encoder, tape.encoder, dh, grads.encoder);
}

inline void update_running_stats(const SetArchitecture& a, SetParams& p, const SetTape& tape) {
  nn::update_running_stats(a.encoder, p.encoder, tape.encoder);
  if (a.deepset) {
    nn::update_running_stats(a.phi, p.phi, tape.phi);
    nn::update_running_stats(a.rho, p.rho, tape.rho);
  }
}

// ---------------------------------------------------------------------------

struct SetTrainOptions {
  double lr = 0.005;
  int patience = 30;
  int max_epochs = 500;
};

struct SetTrainResult {
  SetParams params;  // best-validation parameters
  std::vector<double> val_curve;
  double best_val_loss = INFINITY;
  int best_epoch = -1;
  bool diverged = false;
};

/// Full-batch Adam on the class-weighted NLL with early stopping on the
/// validation loss; the best-validation parameters are restored.
inline SetTrainResult train_set_network(const SetArchitecture& a, SetParams init, const SetBatch& train,
                                        std::span<const int> train_labels, const SetBatch& val,
                                        std::span<const int> val_labels, std::span<const double> class_weights,
                                        const SetTrainOptions& opt, Rng& rng) {
  if (train.users() != train_labels.size() || val.users() != val_labels.size())
    throw DataError("train_set_network: label count mismatch");
  SetTrainResult out;
  SetParams params = std::move(init);
  SetParams grads = zeros_like(params);
  auto pv = param_views(params);
  auto gv = param_views(grads);
  nn::AdamState adam;
  adam.lr = opt.lr;
  out.params = params;
  int since_best = 0;
  for (int epoch = 0; epoch < opt.max_epochs; ++epoch) {
    SetTape tape;
    const Matrix logp = set_forward(a, params, train, nn::Mode::Train, &rng, &tape);
    const auto loss = nn::weighted_nll(logp, train_labels, class_weights);
    if (!std::isfinite(loss.loss)) {
      out.diverged = true;
      break;
    }
    for (auto& g : gv) std::fill(g.values().begin(), g.values().end(), 0.0);
    set_backward(a, params, tape, loss.grad, grads);
    bool finite = true;
    for (const auto& g : gv)
      for (double v : g.values()) finite = finite && std::isfinite(v);
    if (!finite) {
      out.diverged = true;
      break;
    }
    nn::adam_step(adam, pv, gv);
    update_running_stats(a, params, tape);

    double vloss = 0.0;
    if (val.users() > 0) vloss = nn::weighted_nll(set_forward(a, params, val, nn::Mode::Eval, nullptr), val_labels, class_weights).loss;
    if (!std::isfinite(vloss)) {
      out.diverged = true;
      break;
    }
    out.val_curve.push_back(vloss);
    if (vloss < out.best_val_loss) {
      out.best_val_loss = vloss;
      out.best_epoch = epoch;
      out.params = params;
      since_best = 0;
    } else if (++since_best >= opt.patience) {
      break;
    }
  }
  return out;
}

}  // namespace plinf
