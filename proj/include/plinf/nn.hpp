#pragma once

// Small dense networks with hand-written reverse mode: linear layers, batch
// normalization, dropout, activations, log-softmax, class-weighted NLL and Adam.

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "plinf/error.hpp"
#include "plinf/matrix.hpp"
#include "plinf/rng.hpp"

namespace plinf::nn {

enum class Activation { ReLU, LeakyReLU, Identity };
enum class Mode { Train, Eval };

inline constexpr double kLeakySlope = 0.01;
inline constexpr double kBatchNormMomentum = 0.1;
inline constexpr double kBatchNormEps = 1e-5;

inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::ReLU: return "ReLU";
    case Activation::LeakyReLU: return "LeakyReLU";
    case Activation::Identity: return "Identity";
  }
  return "ReLU";
}

inline Activation activation_from_string(const std::string& s) {
  if (s == "ReLU" || s == "Relu" || s == "relu") return Activation::ReLU;
  if (s == "LeakyReLU" || s == "leaky_relu" || s == "leakyrelu") return Activation::LeakyReLU;
  if (s == "Identity" || s == "identity" || s == "linear") return Activation::Identity;
  throw ConfigError("unknown activation '" + s + "'");
}

inline double activate(Activation a, double x) {
  switch (a) {
    case Activation::ReLU: return x > 0.0 ? x : 0.0;
    case Activation::LeakyReLU: return x > 0.0 ? x : kLeakySlope * x;
    case Activation::Identity: return x;
  }
  return x;
}

inline double activation_slope(Activation a, double x) {
  switch (a) {
    case Activation::ReLU: return x > 0.0 ? 1.0 : 0.0;
    case Activation::LeakyReLU: return x > 0.0 ? 1.0 : kLeakySlope;
    case Activation::Identity: return 1.0;
  }
  return 1.0;
}

struct MLPSpec {
  std::vector<int> layer_dims;   // input, hidden..., output
  Activation activation = Activation::ReLU;
  std::vector<bool> batch_norm;  // one flag per layer; empty means none
  double dropout_rate = 0.0;
  bool activate_output = true;   // activation (and dropout) after the last layer too

  int layers() const { return static_cast<int>(layer_dims.size()) - 1; }
  int input_dim() const { return layer_dims.front(); }
  int output_dim() const { return layer_dims.back(); }
  bool normalized(int l) const { return l < static_cast<int>(batch_norm.size()) && batch_norm[l]; }
  bool activated(int l) const { return l + 1 < layers() || activate_output; }

  void validate() const {
    if (layers() < 1) throw ConfigError("MLP needs at least one layer");
    for (int d : layer_dims)
      if (d <= 0) throw ConfigError("MLP layer dimensions must be positive");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ConfigError("dropout rate must lie in [0, 1)");
  }
};

// y = x W^T + b with W of shape out x in.
struct Linear {
  Matrix weight;
  Vector bias;
};

struct BatchNorm {
  Vector gamma, beta;
  Vector running_mean, running_var;
};

struct MLPParams {
  std::vector<Linear> linear;
  std::vector<std::optional<BatchNorm>> norm;
};

/// Uniform(-1/sqrt(in), 1/sqrt(in)) for weights and biases.
inline Linear init_linear(int in, int out, Rng& rng) {
  Linear l;
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  l.weight.resize(out, in);
  for (Index i = 0; i < l.weight.size(); ++i) l.weight.data()[i] = rng.uniform(-bound, bound);
  l.bias.resize(out);
  for (Index i = 0; i < out; ++i) l.bias[i] = rng.uniform(-bound, bound);
  return l;
}

inline MLPParams init_mlp(const MLPSpec& spec, Rng& rng) {
  spec.validate();
  MLPParams p;
  for (int l = 0; l < spec.layers(); ++l) {
    p.linear.push_back(init_linear(spec.layer_dims[l], spec.layer_dims[l + 1], rng));
    if (spec.normalized(l)) {
      const int d = spec.layer_dims[l + 1];
      p.norm.push_back(BatchNorm{Vector::Ones(d), Vector::Zero(d), Vector::Zero(d), Vector::Ones(d)});
    } else {
      p.norm.emplace_back(std::nullopt);
    }
  }
  return p;
}

// Per-layer record of one forward pass.
struct LayerTape {
  Matrix input;       // layer input
  Matrix normalized;  // x-hat (batch norm, train mode)
  Vector inv_std;     // batch norm scale actually applied (train: batch, eval: running)
  Vector batch_mean, batch_var;
  Matrix pre_activation;
  Matrix dropout_mask;  // empty when no dropout was applied
};

struct MLPTape {
  Mode mode = Mode::Eval;
  std::vector<LayerTape> layers;
};

/// Applies the network to the rows of x. Train mode: batch statistics and
/// inverted dropout; eval mode: running statistics and no dropout. Running
/// statistics are not touched here; see update_running_stats.
inline Matrix mlp_forward(const MLPSpec& spec, const MLPParams& params, const Matrix& x, Mode mode, Rng* rng,
                          MLPTape* tape = nullptr) {
  if (x.cols() != spec.input_dim())
    throw DataError("mlp_forward: input has " + std::to_string(x.cols()) + " columns, expected " +
                    std::to_string(spec.input_dim()));
  if (mode == Mode::Train && spec.dropout_rate > 0.0 && rng == nullptr)
    throw ConfigError("mlp_forward: dropout in train mode requires an rng");
  if (tape) {
    tape->mode = mode;
    tape->layers.assign(spec.layers(), {});
  }
  Matrix h = x;
  const Index n = x.rows();
  for (int l = 0; l < spec.layers(); ++l) {
    const auto& lin = params.linear[l];
    Matrix z = h * lin.weight.transpose();
    z.rowwise() += lin.bias.transpose();
    LayerTape* lt = tape ? &tape->layers[l] : nullptr;
    if (lt) lt->input = h;
    if (spec.normalized(l)) {
      const auto& bn = *params.norm[l];
      Vector mean, var;
      if (mode == Mode::Train) {
        mean = z.colwise().mean().transpose();
        var = (z.rowwise() - mean.transpose()).array().square().colwise().mean().transpose();
      } else {
        mean = bn.running_mean;
        var = bn.running_var;
      }
      Vector inv_std = (var.array() + kBatchNormEps).rsqrt();
      Matrix xhat = (z.rowwise() - mean.transpose()).array().rowwise() * inv_std.transpose().array();
      z = (xhat.array().rowwise() * bn.gamma.transpose().array()).rowwise() + bn.beta.transpose().array();
      if (lt) {
        lt->normalized = std::move(xhat);
        lt->inv_std = inv_std;
        lt->batch_mean = mean;
        lt->batch_var = var;
      }
    }
    if (spec.activated(l)) {
      if (lt) lt->pre_activation = z;
      h = z.unaryExpr([a = spec.activation](double v) { return activate(a, v); });
      if (mode == Mode::Train && spec.dropout_rate > 0.0) {
        const double keep = 1.0 - spec.dropout_rate;
        Matrix mask(n, h.cols());
        for (Index i = 0; i < mask.size(); ++i) mask.data()[i] = rng->uniform() < keep ? 1.0 / keep : 0.0;
        h.array() *= mask.array();
        if (lt) lt->dropout_mask = std::move(mask);
      }
    } else {
      h = std::move(z);
    }
  }
  return h;
}

/// Exponential moving average of the batch statistics recorded in `tape`
/// (unbiased variance), momentum kBatchNormMomentum.
inline void update_running_stats(const MLPSpec& spec, MLPParams& params, const MLPTape& tape) {
  if (tape.mode != Mode::Train) return;
  for (int l = 0; l < spec.layers(); ++l) {
    if (!spec.normalized(l)) continue;
    auto& bn = *params.norm[l];
    const auto& lt = tape.layers[l];
    const double n = static_cast<double>(lt.input.rows());
    const double correction = n > 1.0 ? n / (n - 1.0) : 1.0;
    bn.running_mean = (1.0 - kBatchNormMomentum) * bn.running_mean + kBatchNormMomentum * lt.batch_mean;
    bn.running_var = (1.0 - kBatchNormMomentum) * bn.running_var + kBatchNormMomentum * correction * lt.batch_var;
  }
}

inline MLPParams zeros_like(const MLPParams& p) {
  MLPParams g;
  for (const auto& l : p.linear) g.linear.push_back({Matrix::Zero(l.weight.rows(), l.weight.cols()), Vector::Zero(l.bias.size())});
  for (const auto& n : p.norm) {
    if (n) {
      const auto d = n->gamma.size();
      g.norm.push_back(BatchNorm{Vector::Zero(d), Vector::Zero(d), Vector::Zero(d), Vector::Zero(d)});
    } else {
      g.norm.emplace_back(std::nullopt);
    }
  }
  return g;
}

/// Reverse pass. Accumulates parameter gradients into `grads` (same layout as
/// params; running statistics unused) and returns the input gradient.
inline Matrix mlp_backward(const MLPSpec& spec, const MLPParams& params, const MLPTape& tape, const Matrix& grad_output,
                           MLPParams& grads) {
  if (static_cast<int>(tape.layers.size()) != spec.layers())
    throw DataError("mlp_backward: tape does not match network");
  Matrix g = grad_output;
  for (int l = spec.layers() - 1; l >= 0; --l) {
    const auto& lt = tape.layers[l];
    if (g.rows() != lt.input.rows() || g.cols() != spec.layer_dims[l + 1])
      throw DataError("mlp_backward: gradient shape mismatch");
    if (spec.activated(l)) {
      if (lt.dropout_mask.size() > 0) g.array() *= lt.dropout_mask.array();
      g.array() *= lt.pre_activation.unaryExpr([a = spec.activation](double v) { return activation_slope(a, v); }).array();
    }
    if (spec.normalized(l)) {
      const auto& bn = *params.norm[l];
      auto& gbn = *grads.norm[l];
      if (tape.mode == Mode::Train) {
        const double n = static_cast<double>(g.rows());
        gbn.gamma += (g.array() * lt.normalized.array()).colwise().sum().transpose().matrix();
        gbn.beta += g.colwise().sum().transpose();
        Matrix gx = g.array().rowwise() * bn.gamma.transpose().array();
        const RowVector sum_g = gx.colwise().sum();
        const RowVector sum_gx = (gx.array() * lt.normalized.array()).colwise().sum();
        Matrix out = (n * gx.array() - lt.normalized.array().rowwise() * sum_gx.array()).rowwise() - sum_g.array();
        g = (out.array().rowwise() * (lt.inv_std.transpose().array() / n)).matrix();
      } else {
        // Eval mode is affine per feature: gamma * (z - mean) * inv_std + beta.
        gbn.gamma += (g.array() * lt.normalized.array()).colwise().sum().transpose().matrix();
        gbn.beta += g.colwise().sum().transpose();
        g = (g.array().rowwise() * (bn.gamma.array() * lt.inv_std.array()).transpose()).matrix();
      }
    }
    auto& gl = grads.linear[l];
    gl.weight.noalias() += g.transpose() * lt.input;
    gl.bias += g.colwise().sum().transpose();
    g = g * params.linear[l].weight;
  }
  return g;
}

// ---------------------------------------------------------------------------

/// Row-wise log-softmax with max subtraction.
inline Matrix log_softmax(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Index i = 0; i < logits.rows(); ++i) {
    const double m = logits.row(i).maxCoeff();
    const double lse = m + std::log((logits.row(i).array() - m).exp().sum());
    out.row(i) = logits.row(i).array() - lse;
  }
  return out;
}

// Gradient w.r.t. logits given the gradient w.r.t. log-probabilities.
inline Matrix log_softmax_backward(const Matrix& log_probs, const Matrix& grad_log_probs) {
  const Matrix p = log_probs.array().exp();
  const Vector row_sum = grad_log_probs.rowwise().sum();
  Matrix g = grad_log_probs;
  g -= (p.array().colwise() * row_sum.array()).matrix();
  return g;
}

struct LossResult {
  double loss = 0.0;
  Matrix grad;  // d loss / d log_probs
};

/// (sum_i w[y_i] * -log p_i[y_i]) / (sum_i w[y_i]).
inline LossResult weighted_nll(const Matrix& log_probs, std::span<const int> labels, std::span<const double> class_weights) {
  if (static_cast<Index>(labels.size()) != log_probs.rows()) throw DataError("weighted_nll: label count mismatch");
  const Index c = log_probs.cols();
  LossResult r;
  r.grad = Matrix::Zero(log_probs.rows(), c);
  double total_w = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= c) throw DataError("weighted_nll: label " + std::to_string(labels[i]) + " out of range");
    const double w = class_weights.empty() ? 1.0 : class_weights[static_cast<std::size_t>(labels[i])];
    total_w += w;
  }
  if (total_w <= 0.0) return r;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double w = class_weights.empty() ? 1.0 : class_weights[static_cast<std::size_t>(labels[i])];
    r.loss -= w * log_probs(static_cast<Index>(i), labels[i]);
    r.grad(static_cast<Index>(i), labels[i]) = -w / total_w;
  }
  r.loss /= total_w;
  return r;
}

// ---------------------------------------------------------------------------
// Parameter views: a flat, named list of trainable tensors shared by Adam,
// checkpointing and gradient checks.

struct ParamView {
  std::string name;
  double* data = nullptr;
  Index rows = 0, cols = 0;

  Index size() const { return rows * cols; }
  std::span<double> values() const { return {data, static_cast<std::size_t>(size())}; }
};

inline void append_views(Linear& l, const std::string& prefix, std::vector<ParamView>& out) {
  out.push_back({prefix + ".weight", l.weight.data(), l.weight.rows(), l.weight.cols()});
  out.push_back({prefix + ".bias", l.bias.data(), l.bias.size(), 1});
}

// include_stats adds batch-norm running statistics (for checkpoints, not training).
inline void append_views(MLPParams& p, const std::string& prefix, std::vector<ParamView>& out, bool include_stats = false) {
  for (std::size_t l = 0; l < p.linear.size(); ++l) {
    const std::string base = prefix + "." + std::to_string(l);
    append_views(p.linear[l], base, out);
    if (p.norm[l]) {
      auto& bn = *p.norm[l];
      out.push_back({base + ".bn.gamma", bn.gamma.data(), bn.gamma.size(), 1});
      out.push_back({base + ".bn.beta", bn.beta.data(), bn.beta.size(), 1});
      if (include_stats) {
        out.push_back({base + ".bn.running_mean", bn.running_mean.data(), bn.running_mean.size(), 1});
        out.push_back({base + ".bn.running_var", bn.running_var.data(), bn.running_var.size(), 1});
      }
    }
  }
}

struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long step = 0;
  std::vector<Vector> m, v;
};

/// One bias-corrected Adam update of `params` from `grads` (matching layouts).
inline void adam_step(AdamState& s, const std::vector<ParamView>& params, const std::vector<ParamView>& grads) {
  if (params.size() != grads.size()) throw DataError("adam_step: parameter/gradient count mismatch");
  if (s.m.empty()) {
    for (const auto& p : params) {
      s.m.push_back(Vector::Zero(p.size()));
      s.v.push_back(Vector::Zero(p.size()));
    }
  }
  ++s.step;
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (params[k].size() != grads[k].size()) throw DataError("adam_step: shape mismatch for " + params[k].name);
    double* w = params[k].data;
    const double* g = grads[k].data;
    auto& m = s.m[k];
    auto& v = s.v[k];
    for (Index i = 0; i < params[k].size(); ++i) {
      m[i] = s.beta1 * m[i] + (1.0 - s.beta1) * g[i];
      v[i] = s.beta2 * v[i] + (1.0 - s.beta2) * g[i] * g[i];
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      w[i] -= s.lr * mhat / (std::sqrt(vhat) + s.eps);
    }
  }
}

}  // namespace plinf::nn
