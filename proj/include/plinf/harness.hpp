#pragma once

// User-level stratified cross-validation, oversampling, grid search with
// repeated training, and per-fold model selection.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <functional>
#include <mutex>
#include <numeric>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "plinf/dataset.hpp"
#include "plinf/error.hpp"
#include "plinf/graph.hpp"
#include "plinf/metrics.hpp"
#include "plinf/model_spec.hpp"
#include "plinf/models.hpp"
#include "plinf/rng.hpp"

namespace plinf {

struct Fold {
  std::vector<std::size_t> train, val, test;  // dataset user indices, ascending
};

struct FoldPlan {
  std::string attribute;
  int k = 5;
  std::uint64_t seed = 0;
  std::vector<Fold> folds;
};

/// Stratified k-fold split of the users labeled for `attribute`. Each class
/// is shuffled and dealt round-robin over the folds, continuing from where the
/// previous class stopped so fold sizes stay within one user of each other.
/// A stratified `val_fraction` of every fold's training users is held out.
inline FoldPlan make_folds(const Dataset& ds, const std::string& attribute, int k, std::uint64_t seed,
                           double val_fraction = 0.2) {
  if (k < 2) throw ConfigError("fold count must be at least 2");
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw ConfigError("validation fraction must lie in [0, 1)");
  const auto& schema = ds.attribute(attribute);
  const int classes = schema.class_count();
  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(classes));
  for (std::size_t u : ds.labeled_users(attribute)) by_class[static_cast<std::size_t>(*ds.label(u, attribute))].push_back(u);
  for (int c = 0; c < classes; ++c) {
    const auto n = by_class[static_cast<std::size_t>(c)].size();
    if (n > 0 && n < static_cast<std::size_t>(k))
      throw DataError("attribute '" + attribute + "' class '" + schema.class_names[static_cast<std::size_t>(c)] + "' has " +
                      std::to_string(n) + " labeled users, fewer than the " + std::to_string(k) + " folds");
  }
  FoldPlan plan;
  plan.attribute = attribute;
  plan.k = k;
  plan.seed = seed;
  plan.folds.assign(static_cast<std::size_t>(k), {});
  const std::uint64_t attr_hash = fnv1a(attribute);
  std::vector<int> fold_of(ds.users().size(), -1);
  std::size_t cursor = 0;
  for (int c = 0; c < classes; ++c) {
    auto members = by_class[static_cast<std::size_t>(c)];
    Rng rng(derive_seed(seed, attr_hash, 0x666f6c64ULL, static_cast<std::uint64_t>(c)));
    rng.shuffle(members);
    for (std::size_t u : members) fold_of[u] = static_cast<int>(cursor++ % static_cast<std::size_t>(k));
  }
  for (int f = 0; f < k; ++f) {
    auto& fold = plan.folds[static_cast<std::size_t>(f)];
    for (int c = 0; c < classes; ++c) {
      std::vector<std::size_t> train_c;
      for (std::size_t u : by_class[static_cast<std::size_t>(c)]) {
        if (fold_of[u] == f) {
          fold.test.push_back(u);
        } else {
          train_c.push_back(u);
        }
      }
      std::sort(train_c.begin(), train_c.end());
      Rng rng(derive_seed(seed, attr_hash, 0x76616cULL, static_cast<std::uint64_t>(f), static_cast<std::uint64_t>(c)));
      rng.shuffle(train_c);
      std::size_t n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(train_c.size())));
      if (train_c.size() > 0) n_val = std::min(n_val, train_c.size() - 1);
      fold.val.insert(fold.val.end(), train_c.begin(), train_c.begin() + static_cast<long>(n_val));
      fold.train.insert(fold.train.end(), train_c.begin() + static_cast<long>(n_val), train_c.end());
    }
    std::sort(fold.train.begin(), fold.train.end());
    std::sort(fold.val.begin(), fold.val.end());
    std::sort(fold.test.begin(), fold.test.end());
  }
  return plan;
}

/// Minority-class users drawn uniformly with replacement until every class
/// present matches the majority count. Returns the input followed by the
/// duplicates.
inline std::vector<std::size_t> oversample_users(const Dataset& ds, const std::vector<std::size_t>& users,
                                                 const std::string& attribute, std::uint64_t seed) {
  const int classes = ds.attribute(attribute).class_count();
  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(classes));
  for (std::size_t u : users) {
    const auto y = ds.label(u, attribute);
    if (!y) throw DataError("oversample_users: user '" + ds.user(u).id + "' has no label for '" + attribute + "'");
    by_class[static_cast<std::size_t>(*y)].push_back(u);
  }
  std::size_t majority = 0;
  for (const auto& m : by_class) majority = std::max(majority, m.size());
  std::vector<std::size_t> out = users;
  Rng rng(derive_seed(seed, fnv1a(attribute), 0x6f7665ULL));
  for (const auto& m : by_class) {
    if (m.empty()) continue;
    for (std::size_t i = m.size(); i < majority; ++i) out.push_back(m[rng.index(m.size())]);
  }
  return out;
}

/// w_c = N / (C N_c); classes without users get weight 0.
inline std::vector<double> class_weights(std::span<const int> labels, int classes) {
  std::vector<double> count(static_cast<std::size_t>(classes), 0.0);
  for (int y : labels) count[static_cast<std::size_t>(y)] += 1.0;
  std::vector<double> w(static_cast<std::size_t>(classes), 0.0);
  for (int c = 0; c < classes; ++c)
    if (count[static_cast<std::size_t>(c)] > 0)
      w[static_cast<std::size_t>(c)] = static_cast<double>(labels.size()) / (classes * count[static_cast<std::size_t>(c)]);
  return w;
}

// ---------------------------------------------------------------------------
// Grids

struct GridAxis {
  std::string key;
  std::vector<nlohmann::json> values;
};

struct Grid {
  ModelKind kind = ModelKind::Random;
  std::vector<GridAxis> axes;  // cartesian product, first axis varies slowest
};

inline std::vector<ModelSpec> expand_grid(const Grid& g) {
  std::vector<ModelSpec> out{ModelSpec{g.kind, {}}};
  for (const auto& axis : g.axes) {
    if (axis.values.empty()) throw ConfigError("grid axis '" + axis.key + "' has no values");
    std::vector<ModelSpec> next;
    for (const auto& base : out)
      for (const auto& v : axis.values) {
        ModelSpec s = base;
        apply_hyperparam(s.hp, axis.key, v);
        next.push_back(s);
      }
    out = std::move(next);
  }
  return out;
}

/// The default search grids.
inline Grid default_grid(ModelKind kind) {
  using J = nlohmann::json;
  const GridAxis hidden{"hidden", {J(75), J(150)}};
  const GridAxis act{"activation", {J("LeakyReLU"), J("ReLU")}};
  const GridAxis lr{"lr", {J(0.005), J(0.001)}};
  const GridAxis phi{"phi_layers", {J(2), J(3)}};
  const GridAxis rho{"rho_layers", {J(2), J(3)}};
  switch (kind) {
    case ModelKind::Random: return {kind, {}};
    case ModelKind::Linear: return {kind, {{"C", {J(0.01), J(0.1), J(1), J(10)}}}};
    case ModelKind::KNN: return {kind, {{"neighbors", {J(3), J(5), J(7)}}, {"weights", {J("uniform"), J("distance")}}}};
    case ModelKind::SampleMLP:
      return {kind, {{"hidden_layers", {J::array({50}), J::array({100}), J::array({100, 50})}}, {"alpha", {J(1e-4), J(1e-3)}}}};
    case ModelKind::MLPPooling: return {kind, {hidden, {"mlp_layers", {J(2), J(3), J(4)}}, act, lr}};
    case ModelKind::MLPDeepSet: return {kind, {hidden, {"mlp_layers", {J(2), J(3), J(4)}}, phi, rho, act, lr}};
    case ModelKind::GNNPooling: return {kind, {hidden, {"depth", {J(1), J(2), J(3)}}, act, lr}};
    case ModelKind::GNNDeepSet: return {kind, {hidden, {"depth", {J(3), J(4)}}, phi, rho, act, lr}};
  }
  return {kind, {}};
}

// ---------------------------------------------------------------------------
// Runs

struct HarnessOptions {
  int folds = 5;
  int repetitions = 10;
  int patience = 30;
  int max_epochs = 500;
  double val_fraction = 0.2;
  int jobs = 1;
};

struct RepetitionResult {
  bool diverged = false;
  std::string error;
  double val_loss = INFINITY;
  double val_f1 = 0.0;
  double test_f1 = 0.0;
  std::vector<double> val_curve;
};

struct FoldResult {
  std::size_t selected = 0;  // grid index
  ModelSpec spec;
  std::vector<double> test_f1;  // per completed repetition
  std::vector<std::vector<double>> val_curves;
  std::size_t diverged = 0;
  double mean_test_f1 = 0.0;
  double selection_score = 0.0;  // mean val loss (deep) or mean val macro-F1 (baselines)
};

struct RunResult {
  ModelKind kind = ModelKind::Random;
  std::string attribute;
  std::vector<FoldResult> folds;
  std::vector<std::size_t> excluded_grid_points;  // all repetitions diverged in some fold
  double mean_f1 = 0.0;
  double std_across_folds = 0.0;  // population std of the fold means
  double std_pooled = 0.0;        // population std of all repetition scores
};

/// Runs `tasks` indexed jobs on up to `jobs` threads. Results are written to
/// per-index slots by the callee, so the outcome does not depend on `jobs`.
inline void parallel_for(std::size_t tasks, int jobs, const std::function<void(std::size_t)>& body) {
  jobs = std::max(1, std::min<int>(jobs, static_cast<int>(tasks)));
  if (jobs <= 1) {
    for (std::size_t i = 0; i < tasks; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> pool;
  for (int t = 0; t < jobs; ++t)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < tasks; i = next++) {
        try {
          body(i);
        } catch (...) {
          std::lock_guard lock(failure_mutex);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
}

// Per-experiment shared inputs.
struct ExperimentData {
  const Dataset* dataset = nullptr;
  const PlaylistGraph* graph = nullptr;  // built from *dataset; node i = playlist i
  const Propagator* propagator = nullptr;
};

inline std::vector<std::vector<NodeId>> user_nodes(const Dataset& ds, const std::vector<std::size_t>& users) {
  std::vector<std::vector<NodeId>> out;
  out.reserve(users.size());
  for (std::size_t u : users) {
    std::vector<NodeId> nodes;
    for (std::size_t p : ds.playlists_of(u)) nodes.push_back(static_cast<NodeId>(p));
    out.push_back(std::move(nodes));
  }
  return out;
}

inline std::vector<int> user_labels(const Dataset& ds, const std::vector<std::size_t>& users, const std::string& attribute) {
  std::vector<int> out;
  for (std::size_t u : users) out.push_back(*ds.label(u, attribute));
  return out;
}

inline std::vector<int> predicted_classes(const Matrix& log_probs) {
  std::vector<int> out;
  for (Index i = 0; i < log_probs.rows(); ++i) {
    const RowVector r = log_probs.row(i);
    out.push_back(argmax_lowest(std::span<const double>(r.data(), static_cast<std::size_t>(r.size()))));
  }
  return out;
}

/// Training inputs for one fold. `seed` drives the baselines' oversampling.
inline FitData fold_fit_data(const ExperimentData& ex, const std::string& attribute, const Fold& fold, std::uint64_t seed) {
  const Dataset& ds = *ex.dataset;
  FitData d;
  d.graph = ex.graph;
  d.propagator = ex.propagator;
  d.classes = ds.attribute(attribute).class_count();
  d.train_users = user_nodes(ds, fold.train);
  d.val_users = user_nodes(ds, fold.val);
  d.train_labels = user_labels(ds, fold.train, attribute);
  d.val_labels = user_labels(ds, fold.val, attribute);
  d.class_weights = class_weights(d.train_labels, d.classes);
  d.priors.assign(static_cast<std::size_t>(d.classes), 0.0);
  for (int y : d.train_labels) d.priors[static_cast<std::size_t>(y)] += 1.0 / static_cast<double>(d.train_labels.size());
  const auto over = oversample_users(ds, fold.train, attribute, seed);
  std::vector<std::size_t> position(ds.users().size());
  for (std::size_t i = 0; i < fold.train.size(); ++i) position[fold.train[i]] = i;
  for (std::size_t u : over) d.sample_users.push_back(position[u]);
  return d;
}

/// Grid search with repeated training per fold; see FoldResult for what is kept.
inline RunResult train_and_score(const ExperimentData& ex, const std::string& attribute, const std::vector<ModelSpec>& grid,
                                 const FoldPlan& plan, const HarnessOptions& opt, std::uint64_t master_seed) {
  if (grid.empty()) throw ConfigError("empty grid");
  if (opt.repetitions < 1) throw ConfigError("repetitions must be at least 1");
  const Dataset& ds = *ex.dataset;
  const auto& schema = ds.attribute(attribute);
  const ModelKind kind = grid.front().kind;
  for (const auto& s : grid)
    if (s.kind != kind) throw ConfigError("grid mixes model kinds");
  const std::size_t nf = plan.folds.size(), ng = grid.size(), nr = static_cast<std::size_t>(opt.repetitions);

  for (const auto& fold : plan.folds) {
    std::vector<bool> seen(ds.users().size(), false);
    for (std::size_t u : fold.train) seen[u] = true;
    for (std::size_t u : fold.val) seen[u] = true;
    for (std::size_t u : fold.test)
      if (seen[u]) throw RuntimeFailure("fold leaks user '" + ds.user(u).id + "' into its test set");
  }

  std::vector<FitData> fit_data;
  for (std::size_t f = 0; f < nf; ++f)
    fit_data.push_back(fold_fit_data(ex, attribute, plan.folds[f], derive_seed(master_seed, fnv1a(attribute), f)));
  std::vector<std::vector<std::vector<NodeId>>> test_nodes;
  std::vector<std::vector<int>> test_labels;
  for (const auto& fold : plan.folds) {
    test_nodes.push_back(user_nodes(ds, fold.test));
    test_labels.push_back(user_labels(ds, fold.test, attribute));
  }

  std::vector<RepetitionResult> slots(nf * ng * nr);
  const FitOptions fo{opt.patience, opt.max_epochs};
  parallel_for(slots.size(), opt.jobs, [&](std::size_t t) {
    const std::size_t f = t / (ng * nr), g = (t / nr) % ng, r = t % nr;
    RepetitionResult& out = slots[t];
    Rng rng(derive_seed(master_seed, static_cast<std::uint64_t>(kind) + 1, fnv1a(attribute), f, r, g));
    const FitData& d = fit_data[f];
    try {
      auto fit = fit_model(grid[g], attribute, schema.class_names, d, rng, fo);
      out.diverged = fit.diverged;
      out.val_curve = std::move(fit.val_curve);
      if (out.diverged) return;
      const Matrix val_lp = fit.model.predict(*ex.graph, d.val_users, ex.propagator);
      out.val_loss = d.val_users.empty() ? 0.0 : nn::weighted_nll(val_lp, d.val_labels, d.class_weights).loss;
      out.val_f1 = d.val_users.empty() ? 0.0 : macro_f1(predicted_classes(val_lp), d.val_labels, d.classes);
      if (is_baseline(kind)) out.val_curve = {out.val_loss};
      const Matrix test_lp = fit.model.predict(*ex.graph, test_nodes[f], ex.propagator);
      out.test_f1 = macro_f1(predicted_classes(test_lp), test_labels[f], d.classes);
    } catch (const RuntimeFailure& e) {
      out.diverged = true;
      out.error = e.what();
    }
  });

  RunResult res;
  res.kind = kind;
  res.attribute = attribute;
  std::vector<bool> excluded(ng, false);
  std::vector<double> pooled;
  for (std::size_t f = 0; f < nf; ++f) {
    FoldResult fr;
    bool have = false;
    double best = 0.0;
    for (std::size_t g = 0; g < ng; ++g) {
      double sum = 0.0;
      std::size_t ok = 0;
      for (std::size_t r = 0; r < nr; ++r) {
        const auto& s = slots[(f * ng + g) * nr + r];
        if (s.diverged) continue;
        sum += is_baseline(kind) ? s.val_f1 : s.val_loss;
        ++ok;
      }
      if (ok == 0) {
        excluded[g] = true;
        continue;
      }
      const double score = sum / static_cast<double>(ok);
      const bool better = is_baseline(kind) ? score > best : score < best;
      if (!have || better) {
        have = true;
        best = score;
        fr.selected = g;
      }
    }
    if (!have) throw RuntimeFailure(to_string(kind) + " on '" + attribute + "': every grid point diverged in fold " + std::to_string(f));
    fr.spec = grid[fr.selected];
    fr.selection_score = best;
    for (std::size_t r = 0; r < nr; ++r) {
      const auto& s = slots[(f * ng + fr.selected) * nr + r];
      if (s.diverged) {
        ++fr.diverged;
        continue;
      }
      fr.test_f1.push_back(s.test_f1);
      fr.val_curves.push_back(s.val_curve);
      pooled.push_back(s.test_f1);
    }
    fr.mean_test_f1 = std::accumulate(fr.test_f1.begin(), fr.test_f1.end(), 0.0) / static_cast<double>(fr.test_f1.size());
    res.folds.push_back(std::move(fr));
  }
  for (std::size_t g = 0; g < ng; ++g)
    if (excluded[g]) res.excluded_grid_points.push_back(g);
  auto mean_std = [](const std::vector<double>& v) {
    const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return std::pair{m, std::sqrt(s / static_cast<double>(v.size()))};
  };
  std::vector<double> fold_means;
  for (const auto& fr : res.folds) fold_means.push_back(fr.mean_test_f1);
  std::tie(res.mean_f1, res.std_across_folds) = mean_std(fold_means);
  res.std_pooled = mean_std(pooled).second;
  return res;
}

inline nlohmann::json run_result_to_json(const RunResult& r, bool include_curves = true) {
  nlohmann::json folds = nlohmann::json::array();
  for (const auto& f : r.folds) {
    nlohmann::json jf = {{"selected_grid_index", f.selected},
                         {"hyperparameters", hyperparams_to_json(f.spec)},
                         {"selection_score", f.selection_score},
                         {"test_macro_f1", f.test_f1},
                         {"mean_test_macro_f1", f.mean_test_f1},
                         {"diverged_repetitions", f.diverged}};
    if (include_curves) jf["validation_loss_curves"] = f.val_curves;
    folds.push_back(std::move(jf));
  }
  return {{"model", to_string(r.kind)},
          {"attribute", r.attribute},
          {"folds", folds},
          {"excluded_grid_points", r.excluded_grid_points},
          {"mean_macro_f1", r.mean_f1},
          {"std_across_folds", r.std_across_folds},
          {"std_pooled_repetitions", r.std_pooled}};
}

}  // namespace plinf
