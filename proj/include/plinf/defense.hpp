#pragma once

// Defenses against attribute inference: clipped Gaussian noise, feature
// ablation, and decoy-playlist injection refined by projected sign ascent.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "plinf/dataset.hpp"
#include "plinf/error.hpp"
#include "plinf/graph.hpp"
#include "plinf/harness.hpp"
#include "plinf/metrics.hpp"
#include "plinf/models.hpp"
#include "plinf/rng.hpp"

namespace plinf {

namespace detail {

inline std::vector<bool> user_selection(const Dataset& ds, const std::vector<std::size_t>* users) {
  std::vector<bool> sel(ds.users().size(), users == nullptr);
  if (users)
    for (std::size_t u : *users) sel.at(u) = true;
  return sel;
}

}  // namespace detail

struct NoiseConfig {
  double sigma_multiplier = 3.0;
  std::uint64_t seed = 0;
};

/// Every modifiable value of the selected users' playlists (all users when
/// `users` is null) gets delta ~ N(0, sigma_f^2) redrawn until
/// |delta| <= multiplier * sigma_f, then is clipped to [min_f, max_f] of the
/// input dataset. Each playlist draws from its own stream keyed by its id.
/// `deltas`, when given, receives every pre-clip delta in application order.
inline Dataset apply_noise(const Dataset& ds, const NoiseConfig& cfg, const std::vector<std::size_t>* users = nullptr,
                           std::vector<double>* deltas = nullptr) {
  if (!(cfg.sigma_multiplier >= 0.0)) throw ConfigError("noise sigma multiplier must be nonnegative");
  DatasetContent c = ds.content();
  if (cfg.sigma_multiplier == 0.0) return Dataset(std::move(c));
  const auto sel = detail::user_selection(ds, users);
  const auto& st = ds.feature_stats();
  const auto cols = ds.modifiable_columns();
  for (std::size_t p = 0; p < c.playlists.size(); ++p) {
    if (!sel[ds.user_of_playlist(p)]) continue;
    auto& pl = c.playlists[p];
    Rng rng(derive_seed(cfg.seed, fnv1a(pl.id)));
    for (std::size_t f : cols) {
      const double sigma = st.std[f];
      if (!(sigma > 0.0)) continue;
      const double bound = cfg.sigma_multiplier * sigma;
      double delta;
      do {
        delta = rng.normal(0.0, sigma);
      } while (std::abs(delta) > bound);
      if (deltas) deltas->push_back(delta);
      pl.embedding[f] = std::clamp(pl.embedding[f] + delta, st.min[f], st.max[f]);
    }
  }
  return Dataset(std::move(c));
}

struct AblationMask {
  std::vector<std::size_t> columns;
};

inline AblationMask full_modifiable_mask(const Dataset& ds) { return {ds.modifiable_columns()}; }

/// Zeroes the masked columns of the selected users' playlists.
inline Dataset apply_ablation(const Dataset& ds, const AblationMask& mask, const std::vector<std::size_t>* users = nullptr) {
  const auto& modifiable = ds.modifiable_mask();
  for (std::size_t f : mask.columns) {
    if (f >= ds.dim()) throw ConfigError("ablation column " + std::to_string(f) + " is out of range");
    if (!modifiable[f]) throw ConfigError("ablation column '" + ds.feature_names()[f] + "' is not a modifiable feature");
  }
  DatasetContent c = ds.content();
  const auto sel = detail::user_selection(ds, users);
  for (std::size_t p = 0; p < c.playlists.size(); ++p) {
    if (!sel[ds.user_of_playlist(p)]) continue;
    for (std::size_t f : mask.columns) c.playlists[p].embedding[f] = 0.0;
  }
  return Dataset(std::move(c));
}

// ---------------------------------------------------------------------------
// Injection

struct InjectionConfig {
  int k = 1;
  int pool_size = 0;      // 0: every playlist not owned by the user; else a seeded sample per user
  double lambda = 0.5;    // frequency penalty weight
  double epsilon = 0.5;   // per-feature PGD radius in units of the feature std
  double step_fraction = 0.25;  // step = step_fraction * epsilon
  int pgd_iterations = 10;
  std::uint64_t seed = 0;
};

struct PgdResult {
  std::vector<double> embedding;
  int target_class = -1;
  double objective_before = 0.0;  // log p of the target class
  double objective_after = 0.0;
  int accepted = 0;
  bool aborted = false;
  std::vector<double> trace;  // objective after every iteration
};

struct InjectionStep {
  std::string user;
  int step = 0;
  std::string candidate;
  double raw_score = 0.0;
  double penalized_score = 0.0;
  double post_pgd_loss = 0.0;  // attacker loss on the final profile
};

struct UserInjection {
  std::string user;
  std::vector<std::string> sources;
  std::vector<std::string> decoys;
  std::vector<NodeId> nodes;
  std::vector<std::vector<double>> embeddings;  // refined
  std::vector<double> loss_trace;               // attacker loss after each pick, then after refinement
  std::vector<PgdResult> pgd;
};

struct InjectionResult {
  std::vector<UserInjection> users;
  std::vector<InjectionStep> log;
};

struct ProjectionBox {
  std::vector<double> lo, hi;
  std::vector<double> step;
  std::vector<std::size_t> free;  // modifiable columns
};

/// {|x_f - x0_f| <= eps_f on modifiable f, x_f = x0_f elsewhere, x_f in [min_f, max_f]}.
inline ProjectionBox projection_box(const Dataset& ds, std::span<const double> x0, const InjectionConfig& cfg) {
  const auto& st = ds.feature_stats();
  ProjectionBox b;
  b.lo.assign(x0.begin(), x0.end());
  b.hi.assign(x0.begin(), x0.end());
  b.step.assign(x0.size(), 0.0);
  for (std::size_t f : ds.modifiable_columns()) {
    const double eps = cfg.epsilon * st.std[f];
    b.lo[f] = std::min(x0[f], std::max(st.min[f], x0[f] - eps));
    b.hi[f] = std::max(x0[f], std::min(st.max[f], x0[f] + eps));
    b.step[f] = cfg.step_fraction * eps;
    b.free.push_back(f);
  }
  return b;
}

/// Projected sign ascent on log p_c*(user) w.r.t. the embedding of `node`,
/// where c* is the most probable class other than `truth` at entry. An
/// iterate is kept only if the objective does not decrease; otherwise the
/// step is halved. The graph row of `node` holds the result on return.
inline PgdResult pgd_refine(PlaylistGraph& g, NodeId node, std::span<const NodeId> user_nodes, const TrainedModel& attacker,
                            int truth, const Dataset& ds, const InjectionConfig& cfg) {
  PgdResult r;
  const Index d = g.features.cols();
  std::vector<double> x(g.features.row(node).data(), g.features.row(node).data() + d);
  r.embedding = x;
  const RowVector lp = attacker.user_log_probs(g, user_nodes);
  r.target_class = -1;
  for (int c = 0; c < attacker.classes(); ++c)
    if (c != truth && (r.target_class < 0 || lp[c] > lp[r.target_class])) r.target_class = c;
  r.objective_before = r.objective_after = lp[r.target_class];
  if (cfg.pgd_iterations <= 0) return r;
  if (!attacker.has_input_gradient())
    throw ConfigError(to_string(attacker.spec.kind) + " attacker provides no input gradients; set pgd_iterations to 0");
  const ProjectionBox box = projection_box(ds, x, cfg);
  std::vector<double> step = box.step;
  double obj = r.objective_before;
  auto set_row = [&](const std::vector<double>& v) {
    for (Index f = 0; f < d; ++f) g.features(node, f) = v[static_cast<std::size_t>(f)];
  };
  for (int it = 0; it < cfg.pgd_iterations; ++it) {
    const RowVector grad = attacker.log_prob_gradient(g, user_nodes, node, r.target_class);
    bool finite = true;
    for (Index f = 0; f < d; ++f) finite = finite && std::isfinite(grad[f]);
    if (!finite) {
      r.aborted = true;
      set_row(r.embedding);
      r.objective_after = r.objective_before;
      return r;
    }
    std::vector<double> cand = x;
    for (std::size_t f : box.free) {
      const double s = grad[static_cast<Index>(f)] > 0.0 ? 1.0 : (grad[static_cast<Index>(f)] < 0.0 ? -1.0 : 0.0);
      cand[f] = std::clamp(x[f] + step[f] * s, box.lo[f], box.hi[f]);
    }
    set_row(cand);
    const double next = attacker.user_log_probs(g, user_nodes)[r.target_class];
    if (std::isfinite(next) && next >= obj) {
      x = std::move(cand);
      obj = next;
      ++r.accepted;
    } else {
      set_row(x);
      for (auto& s : step) s *= 0.5;
    }
    r.trace.push_back(obj);
  }
  r.embedding = x;
  r.objective_after = obj;
  return r;
}

struct InjectionOutcome {
  Dataset dataset;
  PlaylistGraph graph;
  InjectionResult result;
};

/// Greedy decoy injection for the selected users (sorted by id; users
/// without a label for the attacker's attribute are skipped). `graph` must
/// be the playlist graph of `ds` (node i = playlist i).
inline InjectionOutcome inject(const Dataset& ds, const PlaylistGraph& graph, const TrainedModel& attacker,
                               const std::vector<std::size_t>& users, const InjectionConfig& cfg) {
  if (cfg.k < 1) throw ConfigError("injection needs k >= 1");
  if (!(cfg.epsilon >= 0.0)) throw ConfigError("injection epsilon must be nonnegative");
  if (!(cfg.lambda >= 0.0)) throw ConfigError("frequency penalty must be nonnegative");
  if (graph.size() != ds.playlists().size()) throw DataError("inject: graph does not match the dataset");
  if (cfg.pgd_iterations > 0 && !attacker.has_input_gradient())
    throw ConfigError(to_string(attacker.spec.kind) + " attacker provides no input gradients; set pgd_iterations to 0");
  const std::string& attribute = attacker.attribute;
  ds.attribute(attribute);

  InjectionOutcome out{Dataset{}, graph, {}};
  PlaylistGraph& g = out.graph;
  DatasetContent content = ds.content();
  std::vector<int> uses(ds.playlists().size(), 0);

  std::vector<std::size_t> order = users;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return ds.user(a).id < ds.user(b).id; });
  order.erase(std::unique(order.begin(), order.end()), order.end());

  for (std::size_t u : order) {
    const auto truth = ds.label(u, attribute);
    if (!truth) continue;
    const std::string& uid = ds.user(u).id;
    std::vector<std::size_t> pool;
    for (std::size_t p = 0; p < ds.playlists().size(); ++p)
      if (ds.user_of_playlist(p) != u) pool.push_back(p);
    if (pool.empty()) throw DataError("inject: empty candidate pool for user '" + uid + "'");
    if (cfg.pool_size > 0 && static_cast<std::size_t>(cfg.pool_size) < pool.size()) {
      Rng rng(derive_seed(cfg.seed, fnv1a(uid), 0x706f6f6cULL));
      for (std::size_t i = 0; i < static_cast<std::size_t>(cfg.pool_size); ++i)
        std::swap(pool[i], pool[i + rng.index(pool.size() - i)]);
      pool.resize(static_cast<std::size_t>(cfg.pool_size));
    }
    std::sort(pool.begin(), pool.end(), [&](std::size_t a, std::size_t b) { return ds.playlist(a).id < ds.playlist(b).id; });

    UserInjection ui;
    ui.user = uid;
    std::vector<NodeId> nodes;
    for (std::size_t p : ds.playlists_of(u)) nodes.push_back(static_cast<NodeId>(p));
    const std::size_t first_log = out.result.log.size();
    for (int step = 0; step < cfg.k; ++step) {
      std::size_t best = pool.front();
      double best_pen = -INFINITY, best_raw = 0.0;
      for (std::size_t c : pool) {
        const VirtualNode vn{static_cast<NodeId>(c), ds.playlist(c).embedding};
        const double raw = -attacker.user_log_probs(g, nodes, &vn)[*truth];
        const double pen = raw / (1.0 + cfg.lambda * uses[c]);
        if (pen > best_pen) {  // pool is sorted by id, so ties keep the lower id
          best_pen = pen;
          best_raw = raw;
          best = c;
        }
      }
      ++uses[best];
      std::string id = uid + "~decoy" + std::to_string(step);
      while (g.index.count(id) || ds.has_playlist(id)) id += "_";
      const NodeId nid = append_duplicate(g, static_cast<NodeId>(best), id, uid, ds.playlist(best).embedding);
      nodes.push_back(nid);
      ui.sources.push_back(ds.playlist(best).id);
      ui.decoys.push_back(id);
      ui.nodes.push_back(nid);
      ui.loss_trace.push_back(best_raw);
      out.result.log.push_back({uid, step, ds.playlist(best).id, best_raw, best_pen, 0.0});
    }
    for (NodeId nid : ui.nodes) {
      ui.pgd.push_back(pgd_refine(g, nid, nodes, attacker, *truth, ds, cfg));
      ui.embeddings.push_back(ui.pgd.back().embedding);
    }
    const double final_loss = -attacker.user_log_probs(g, nodes)[*truth];
    ui.loss_trace.push_back(final_loss);
    for (std::size_t i = first_log; i < out.result.log.size(); ++i) out.result.log[i].post_pgd_loss = final_loss;

    auto& user_rec = content.users[u];
    for (std::size_t i = 0; i < ui.decoys.size(); ++i) {
      Playlist pl;
      pl.id = ui.decoys[i];
      pl.owner = uid;
      pl.song_ids = ds.playlist(ds.playlist_index(ui.sources[i])).song_ids;
      pl.embedding = ui.embeddings[i];
      content.playlists.push_back(std::move(pl));
      user_rec.playlist_ids.push_back(ui.decoys[i]);
    }
    out.result.users.push_back(std::move(ui));
  }
  out.dataset = Dataset(std::move(content));
  return out;
}

inline void write_audit_log(const InjectionResult& r, std::ostream& os) {
  for (const auto& s : r.log)
    os << nlohmann::json{{"user", s.user},
                         {"step", s.step},
                         {"candidate", s.candidate},
                         {"raw_score", s.raw_score},
                         {"penalized_score", s.penalized_score},
                         {"post_pgd_loss", s.post_pgd_loss}}
              .dump()
       << '\n';
}

// ---------------------------------------------------------------------------
// Evaluation

enum class DefenseKind { None, Noise, Ablation, Injection };

inline std::string to_string(DefenseKind k) {
  switch (k) {
    case DefenseKind::None: return "none";
    case DefenseKind::Noise: return "noise";
    case DefenseKind::Ablation: return "ablation";
    case DefenseKind::Injection: return "inject";
  }
  return "none";
}

inline DefenseKind defense_kind_from_string(const std::string& s) {
  for (DefenseKind k : {DefenseKind::None, DefenseKind::Noise, DefenseKind::Ablation, DefenseKind::Injection})
    if (to_string(k) == s) return k;
  if (s == "injection") return DefenseKind::Injection;
  throw ConfigError("unknown defense '" + s + "'");
}

// Test: only the evaluated (test) users are defended and the attacker was
// trained on clean data. Release: every user's public embeddings are defended
// at export time, so the attacker can only train on the defended release.
enum class DefenseScope { Test, Release };

inline std::string to_string(DefenseScope s) { return s == DefenseScope::Test ? "test" : "release"; }

inline DefenseScope defense_scope_from_string(const std::string& s) {
  if (s == "test") return DefenseScope::Test;
  if (s == "release") return DefenseScope::Release;
  throw ConfigError("unknown defense scope '" + s + "' (expected test or release)");
}

// Feature-level defenses act on the exported embeddings; injection targets a
// deployed attacker.
inline DefenseScope default_scope(DefenseKind k) {
  return k == DefenseKind::Noise || k == DefenseKind::Ablation ? DefenseScope::Release : DefenseScope::Test;
}

struct DefenseSpec {
  DefenseKind kind = DefenseKind::None;
  std::optional<DefenseScope> scope;  // unset: default_scope(kind)
  NoiseConfig noise;
  std::optional<AblationMask> ablation;  // default: every modifiable column
  InjectionConfig injection;
};

struct DefendedView {
  Dataset dataset;
  PlaylistGraph graph;
  std::optional<InjectionResult> injection;
};

/// Applies `spec` to `users` only. The returned graph keeps node i = playlist i.
inline DefendedView apply_defense(const Dataset& ds, const PlaylistGraph& graph, const DefenseSpec& spec,
                                  const std::vector<std::size_t>& users, const TrainedModel* attacker) {
  auto with_features = [&](Dataset d) {
    PlaylistGraph g = graph;
    for (std::size_t p = 0; p < d.playlists().size(); ++p)
      for (std::size_t f = 0; f < d.dim(); ++f) g.features(static_cast<Index>(p), static_cast<Index>(f)) = d.playlist(p).embedding[f];
    return DefendedView{std::move(d), std::move(g), std::nullopt};
  };
  switch (spec.kind) {
    case DefenseKind::None: return {ds, graph, std::nullopt};
    case DefenseKind::Noise: return with_features(apply_noise(ds, spec.noise, &users));
    case DefenseKind::Ablation: return with_features(apply_ablation(ds, spec.ablation.value_or(full_modifiable_mask(ds)), &users));
    case DefenseKind::Injection: {
      if (!attacker) throw ConfigError("injection needs an attacker model");
      auto o = inject(ds, graph, *attacker, users, spec.injection);
      return {std::move(o.dataset), std::move(o.graph), std::move(o.result)};
    }
  }
  return {ds, graph, std::nullopt};
}

struct DefenseFoldResult {
  double before = 0.0, after = 0.0;
};

struct DefenseAttributeResult {
  std::string attribute;
  std::vector<DefenseFoldResult> folds;
  double before = 0.0, after = 0.0, delta = 0.0;
};

struct DefenseReport {
  DefenseKind kind = DefenseKind::None;
  DefenseScope scope = DefenseScope::Test;
  ModelSpec attacker;
  std::vector<DefenseAttributeResult> attributes;
  double mean_delta = 0.0;
  std::vector<InjectionResult> injections;  // one per (attribute, fold), in order
};

/// Per attribute and fold: trains the attacker on clean data and scores it on
/// the fold's test users ("before"). Test scope then defends the test users
/// and rescores the same attacker; release scope defends every user, retrains
/// the attacker on the defended release and scores that one ("after").
inline DefenseReport evaluate_defense(const Dataset& ds, const PlaylistGraph& graph, const DefenseSpec& spec,
                                      const ModelSpec& attacker_spec, const std::vector<std::string>& attributes,
                                      const HarnessOptions& opt, std::uint64_t seed) {
  if (attributes.empty()) throw ConfigError("evaluate_defense: no attributes");
  if (spec.kind == DefenseKind::Injection && spec.injection.pgd_iterations > 0 &&
      (attacker_spec.kind == ModelKind::Random || attacker_spec.kind == ModelKind::KNN))
    throw ConfigError(to_string(attacker_spec.kind) + " attacker provides no input gradients; set pgd_iterations to 0");
  const Propagator prop = normalize(graph);
  const ExperimentData ex{&ds, &graph, &prop};
  const DefenseScope scope = spec.scope.value_or(default_scope(spec.kind));
  if (scope == DefenseScope::Release && spec.kind == DefenseKind::Injection)
    throw ConfigError("injection needs test scope: decoys are chosen against a trained attacker");
  std::vector<std::size_t> everyone(ds.users().size());
  std::iota(everyone.begin(), everyone.end(), std::size_t{0});
  DefenseReport rep;
  rep.kind = spec.kind;
  rep.scope = scope;
  rep.attacker = attacker_spec;
  for (const auto& attr : attributes) {
    const auto& schema = ds.attribute(attr);
    const FoldPlan plan = make_folds(ds, attr, opt.folds, derive_seed(seed, fnv1a(attr)), opt.val_fraction);
    DefenseAttributeResult ar;
    ar.attribute = attr;
    std::vector<DefenseFoldResult> results(plan.folds.size());
    std::vector<std::optional<InjectionResult>> logs(plan.folds.size());
    parallel_for(plan.folds.size(), opt.jobs, [&](std::size_t f) {
      const Fold& fold = plan.folds[f];
      const FitData d = fold_fit_data(ex, attr, fold, derive_seed(seed, fnv1a(attr), f, 1));
      Rng rng(derive_seed(seed, fnv1a(attr), f, 2));
      const auto fit = fit_model(attacker_spec, attr, schema.class_names, d, rng, {opt.patience, opt.max_epochs});
      if (fit.diverged) throw RuntimeFailure("attacker training diverged on '" + attr + "' fold " + std::to_string(f));
      const auto labels = user_labels(ds, fold.test, attr);
      const auto clean_nodes = user_nodes(ds, fold.test);
      results[f].before = macro_f1(predicted_classes(fit.model.predict(graph, clean_nodes, &prop)), labels, d.classes);

      DefenseSpec local = spec;
      local.noise.seed = derive_seed(spec.noise.seed, fnv1a(attr), f);
      local.injection.seed = derive_seed(spec.injection.seed, fnv1a(attr), f);
      if (scope == DefenseScope::Release) {
        // The song sets are untouched, so the graph structure and propagator
        // carry over; only the features change.
        const DefendedView v = apply_defense(ds, graph, local, everyone, nullptr);
        const ExperimentData dex{&v.dataset, &v.graph, &prop};
        const FitData dd = fold_fit_data(dex, attr, fold, derive_seed(seed, fnv1a(attr), f, 1));
        Rng drng(derive_seed(seed, fnv1a(attr), f, 2));
        const auto refit = fit_model(attacker_spec, attr, schema.class_names, dd, drng, {opt.patience, opt.max_epochs});
        if (refit.diverged) throw RuntimeFailure("attacker retraining diverged on '" + attr + "' fold " + std::to_string(f));
        results[f].after = macro_f1(predicted_classes(refit.model.predict(v.graph, clean_nodes, &prop)), labels, d.classes);
        return;
      }
      DefendedView v = apply_defense(ds, graph, local, fold.test, &fit.model);
      const Propagator dprop = spec.kind == DefenseKind::Injection ? normalize(v.graph) : prop;
      std::vector<std::vector<NodeId>> nodes;
      for (std::size_t u : fold.test) {
        std::vector<NodeId> nu;
        for (std::size_t p : v.dataset.playlists_of(v.dataset.user_index(ds.user(u).id)))
          nu.push_back(v.graph.node(v.dataset.playlist(p).id));
        nodes.push_back(std::move(nu));
      }
      results[f].after = macro_f1(predicted_classes(fit.model.predict(v.graph, nodes, &dprop)), labels, d.classes);
      logs[f] = std::move(v.injection);
    });
    for (std::size_t f = 0; f < results.size(); ++f) {
      ar.before += results[f].before / static_cast<double>(results.size());
      ar.after += results[f].after / static_cast<double>(results.size());
      if (logs[f]) rep.injections.push_back(std::move(*logs[f]));
    }
    ar.delta = ar.after - ar.before;
    ar.folds = std::move(results);
    rep.mean_delta += ar.delta / static_cast<double>(attributes.size());
    rep.attributes.push_back(std::move(ar));
  }
  return rep;
}

inline nlohmann::json defense_report_to_json(const DefenseReport& r) {
  nlohmann::json attrs = nlohmann::json::array();
  for (const auto& a : r.attributes) {
    nlohmann::json folds = nlohmann::json::array();
    for (const auto& f : a.folds) folds.push_back({{"before", f.before}, {"after", f.after}, {"delta", f.after - f.before}});
    attrs.push_back({{"attribute", a.attribute}, {"before", a.before}, {"after", a.after}, {"delta", a.delta}, {"folds", folds}});
  }
  return {{"defense", to_string(r.kind)}, {"scope", to_string(r.scope)}, {"attacker", model_spec_to_json(r.attacker)}, {"attributes", attrs}, {"mean_delta", r.mean_delta}};
}

}  // namespace plinf
