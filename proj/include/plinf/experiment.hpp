#pragma once

// Experiment configuration (JSON), dataset sourcing, and the attack report.

#include <cstdio>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "plinf/dataset.hpp"
#include "plinf/defense.hpp"
#include "plinf/error.hpp"
#include "plinf/graph.hpp"
#include "plinf/harness.hpp"
#include "plinf/stats.hpp"
#include "plinf/synthetic.hpp"

namespace plinf {

namespace detail {

inline void check_keys(const nlohmann::json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [k, v] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || k == a;
    if (!ok) throw ConfigError(where + ": unknown key '" + k + "'");
  }
}

template <typename T>
T get_or(const nlohmann::json& j, const char* key, T fallback, const std::string& where) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

inline std::string hex64(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Synthetic config JSON

inline SyntheticConfig synthetic_config_from_json(const nlohmann::json& j) {
  const std::string w = "synthetic";
  detail::check_keys(j, w, {"user_count", "playlists_per_user", "songs_per_playlist", "song_vocabulary_size", "embedding_dim",
                            "attributes", "signal_strength", "overlap_rate", "signal_features", "modifiable_signal_share", "cross_class_rate", "seed"});
  SyntheticConfig c;
  c.user_count = detail::get_or(j, "user_count", c.user_count, w);
  c.playlists_per_user = detail::get_or(j, "playlists_per_user", c.playlists_per_user, w);
  c.songs_per_playlist = detail::get_or(j, "songs_per_playlist", c.songs_per_playlist, w);
  c.song_vocabulary_size = detail::get_or(j, "song_vocabulary_size", c.song_vocabulary_size, w);
  c.embedding_dim = detail::get_or(j, "embedding_dim", c.embedding_dim, w);
  c.signal_strength = detail::get_or(j, "signal_strength", c.signal_strength, w);
  c.overlap_rate = detail::get_or(j, "overlap_rate", c.overlap_rate, w);
  c.signal_features = detail::get_or(j, "signal_features", c.signal_features, w);
  c.modifiable_signal_share = detail::get_or(j, "modifiable_signal_share", c.modifiable_signal_share, w);
  c.cross_class_rate = detail::get_or(j, "cross_class_rate", c.cross_class_rate, w);
  c.seed = detail::get_or<std::uint64_t>(j, "seed", c.seed, w);
  if (j.contains("attributes")) {
    for (const auto& a : j.at("attributes")) {
      detail::check_keys(a, w + ".attributes[]", {"name", "category", "classes", "priors"});
      SyntheticAttribute sa;
      sa.name = detail::get_or<std::string>(a, "name", "", w + ".attributes[]");
      if (sa.name.empty()) throw ConfigError("synthetic attribute without a name");
      sa.category = category_from_string(detail::get_or<std::string>(a, "category", "demographics", w));
      sa.classes = detail::get_or(a, "classes", 2, w);
      sa.priors = detail::get_or(a, "priors", std::vector<double>{}, w);
      c.attributes.push_back(std::move(sa));
    }
  } else {
    c.attributes = default_synthetic_attributes();
  }
  validate(c);
  return c;
}

inline nlohmann::json synthetic_config_to_json(const SyntheticConfig& c) {
  nlohmann::json attrs = nlohmann::json::array();
  for (const auto& a : c.attributes)
    attrs.push_back({{"name", a.name}, {"category", to_string(a.category)}, {"classes", a.classes}, {"priors", a.priors}});
  return {{"user_count", c.user_count},
          {"playlists_per_user", c.playlists_per_user},
          {"songs_per_playlist", c.songs_per_playlist},
          {"song_vocabulary_size", c.song_vocabulary_size},
          {"embedding_dim", c.embedding_dim},
          {"attributes", attrs},
          {"signal_strength", c.signal_strength},
          {"overlap_rate", c.overlap_rate},
          {"signal_features", c.signal_features},
          {"modifiable_signal_share", c.modifiable_signal_share},
          {"cross_class_rate", c.cross_class_rate},
          {"seed", c.seed}};
}

// ---------------------------------------------------------------------------
// Experiment config

struct DefenseSection {
  DefenseSpec spec;
  ModelSpec attacker;
  std::vector<std::string> ablation_features;  // base or column names; empty = all modifiable
};

struct ExperimentConfig {
  std::optional<std::string> dataset_path;
  std::optional<SyntheticConfig> synthetic;
  int tau = 0;
  std::vector<std::string> attributes;  // empty: every attribute of the dataset
  std::vector<Grid> models;
  bool strict_grid = true;
  HarnessOptions harness;
  std::uint64_t seed = 0;
  std::string output_dir = "out";
  std::optional<DefenseSection> defense;
  nlohmann::json normalized;  // canonical form, used for the config hash
};

/// Values permitted for `key` of `kind` under the default grids.
inline const std::vector<nlohmann::json>* default_grid_values(ModelKind kind, const std::string& key) {
  static const auto grids = [] {
    std::vector<Grid> g;
    for (ModelKind k : kAllModelKinds) g.push_back(default_grid(k));
    return g;
  }();
  for (const auto& g : grids)
    if (g.kind == kind)
      for (const auto& a : g.axes)
        if (a.key == key) return &a.values;
  return nullptr;
}

inline bool json_number_equal(const nlohmann::json& a, const nlohmann::json& b) {
  if (a.is_number() && b.is_number()) return a.get<double>() == b.get<double>();
  return a == b;
}

inline Grid grid_from_json(const nlohmann::json& j, bool strict) {
  Grid g;
  if (j.is_string()) return default_grid(model_kind_from_string(j.get<std::string>()));
  detail::check_keys(j, "models[]", {"kind", "grid"});
  g.kind = model_kind_from_string(detail::get_or<std::string>(j, "kind", "", "models[]"));
  if (!j.contains("grid")) return default_grid(g.kind);
  const auto& grid = j.at("grid");
  if (!grid.is_object()) throw ConfigError("models[].grid must be an object of value lists");
  // Axes follow the default order; extra axes come after in key order.
  const Grid defaults = default_grid(g.kind);
  std::set<std::string> used;
  auto add_axis = [&](const std::string& key, const nlohmann::json& values) {
    GridAxis axis{key, {}};
    if (!values.is_array() || values.empty()) throw ConfigError("grid axis '" + key + "' must be a nonempty list");
    const auto* allowed = default_grid_values(g.kind, key);
    for (const auto& v : values) {
      if (strict) {
        bool ok = false;
        if (allowed)
          for (const auto& a : *allowed) ok = ok || json_number_equal(a, v);
        if (!ok)
          throw ConfigError(to_string(g.kind) + " grid value " + v.dump() + " for '" + key +
                            "' is outside the default grid (set \"strict_grid\": false to allow)");
      }
      axis.values.push_back(v);
    }
    Hyperparams probe;
    for (const auto& v : axis.values) apply_hyperparam(probe, key, v);
    g.axes.push_back(std::move(axis));
    used.insert(key);
  };
  for (const auto& a : defaults.axes)
    if (grid.contains(a.key)) add_axis(a.key, grid.at(a.key));
  for (const auto& [k, v] : grid.items())
    if (!used.count(k)) add_axis(k, v);
  return g;
}

inline nlohmann::json grid_to_json(const Grid& g) {
  nlohmann::json axes = nlohmann::json::array();
  for (const auto& a : g.axes) axes.push_back({{"key", a.key}, {"values", a.values}});
  return {{"kind", to_string(g.kind)}, {"axes", axes}};
}

inline DefenseSection defense_from_json(const nlohmann::json& j) {
  const std::string w = "defense";
  detail::check_keys(j, w, {"kind", "scope", "attacker", "sigma_multiplier", "features", "k", "pool_size", "lambda", "epsilon",
                            "step_fraction", "pgd_iterations", "seed"});
  DefenseSection d;
  d.spec.kind = defense_kind_from_string(detail::get_or<std::string>(j, "kind", "none", w));
  if (j.contains("scope")) d.spec.scope = defense_scope_from_string(detail::get_or<std::string>(j, "scope", "test", w));
  if (j.contains("attacker")) {
    d.attacker = model_spec_from_json(j.at("attacker"));
  } else {
    d.attacker.kind = ModelKind::GNNDeepSet;
  }
  d.spec.noise.sigma_multiplier = detail::get_or(j, "sigma_multiplier", 3.0, w);
  d.ablation_features = detail::get_or(j, "features", std::vector<std::string>{}, w);
  auto& in = d.spec.injection;
  in.k = detail::get_or(j, "k", in.k, w);
  in.pool_size = detail::get_or(j, "pool_size", in.pool_size, w);
  in.lambda = detail::get_or(j, "lambda", in.lambda, w);
  in.epsilon = detail::get_or(j, "epsilon", in.epsilon, w);
  in.step_fraction = detail::get_or(j, "step_fraction", in.step_fraction, w);
  in.pgd_iterations = detail::get_or(j, "pgd_iterations", in.pgd_iterations, w);
  const auto seed = detail::get_or<std::uint64_t>(j, "seed", 0, w);
  in.seed = d.spec.noise.seed = seed;
  if (d.spec.noise.sigma_multiplier < 0) throw ConfigError("defense.sigma_multiplier must be nonnegative");
  if (in.k < 1) throw ConfigError("defense.k must be at least 1");
  if (in.pool_size < 0) throw ConfigError("defense.pool_size must be nonnegative");
  if (in.lambda < 0) throw ConfigError("defense.lambda must be nonnegative");
  if (in.epsilon < 0) throw ConfigError("defense.epsilon must be nonnegative");
  if (in.pgd_iterations < 0) throw ConfigError("defense.pgd_iterations must be nonnegative");
  return d;
}

inline nlohmann::json defense_to_json(const DefenseSection& d) {
  const auto& in = d.spec.injection;
  return {{"kind", to_string(d.spec.kind)},      {"scope", to_string(d.spec.scope.value_or(default_scope(d.spec.kind)))},
          {"attacker", model_spec_to_json(d.attacker)},
          {"sigma_multiplier", d.spec.noise.sigma_multiplier}, {"features", d.ablation_features},
          {"k", in.k},                            {"pool_size", in.pool_size},
          {"lambda", in.lambda},                  {"epsilon", in.epsilon},
          {"step_fraction", in.step_fraction},    {"pgd_iterations", in.pgd_iterations},
          {"seed", in.seed}};
}

inline ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
  detail::check_keys(j, "config", {"dataset", "tau", "attributes", "models", "strict_grid", "harness", "seed", "output_dir", "defense"});
  ExperimentConfig c;
  if (!j.contains("dataset")) throw ConfigError("config: 'dataset' is required (a path or {\"synthetic\": {...}})");
  const auto& d = j.at("dataset");
  if (d.is_string()) {
    c.dataset_path = d.get<std::string>();
  } else if (d.is_object() && d.contains("synthetic") && d.size() == 1) {
    c.synthetic = synthetic_config_from_json(d.at("synthetic"));
  } else {
    throw ConfigError("config.dataset must be a path or {\"synthetic\": {...}}");
  }
  c.tau = detail::get_or(j, "tau", 0, "config");
  if (c.tau < 0) throw ConfigError("config.tau must be nonnegative");
  c.attributes = detail::get_or(j, "attributes", std::vector<std::string>{}, "config");
  c.strict_grid = detail::get_or(j, "strict_grid", true, "config");
  if (j.contains("models")) {
    if (!j.at("models").is_array() || j.at("models").empty()) throw ConfigError("config.models must be a nonempty list");
    for (const auto& m : j.at("models")) c.models.push_back(grid_from_json(m, c.strict_grid));
  }
  if (j.contains("harness")) {
    const auto& h = j.at("harness");
    detail::check_keys(h, "harness", {"folds", "repetitions", "patience", "max_epochs", "val_fraction"});
    c.harness.folds = detail::get_or(h, "folds", c.harness.folds, "harness");
    c.harness.repetitions = detail::get_or(h, "repetitions", c.harness.repetitions, "harness");
    c.harness.patience = detail::get_or(h, "patience", c.harness.patience, "harness");
    c.harness.max_epochs = detail::get_or(h, "max_epochs", c.harness.max_epochs, "harness");
    c.harness.val_fraction = detail::get_or(h, "val_fraction", c.harness.val_fraction, "harness");
  }
  if (c.harness.folds < 2) throw ConfigError("harness.folds must be at least 2");
  if (c.harness.repetitions < 1) throw ConfigError("harness.repetitions must be at least 1");
  if (c.harness.patience < 1) throw ConfigError("harness.patience must be at least 1");
  if (c.harness.max_epochs < 1) throw ConfigError("harness.max_epochs must be at least 1");
  if (!(c.harness.val_fraction >= 0.0 && c.harness.val_fraction < 1.0)) throw ConfigError("harness.val_fraction must lie in [0, 1)");
  c.seed = detail::get_or<std::uint64_t>(j, "seed", 0, "config");
  c.output_dir = detail::get_or<std::string>(j, "output_dir", "out", "config");
  if (j.contains("defense")) c.defense = defense_from_json(j.at("defense"));

  nlohmann::json n;
  if (c.dataset_path) n["dataset"] = *c.dataset_path;
  else n["dataset"] = {{"synthetic", synthetic_config_to_json(*c.synthetic)}};
  n["tau"] = c.tau;
  n["attributes"] = c.attributes;
  n["models"] = nlohmann::json::array();
  for (const auto& g : c.models) n["models"].push_back(grid_to_json(g));
  n["strict_grid"] = c.strict_grid;
  n["harness"] = {{"folds", c.harness.folds}, {"repetitions", c.harness.repetitions}, {"patience", c.harness.patience},
                  {"max_epochs", c.harness.max_epochs}, {"val_fraction", c.harness.val_fraction}};
  n["seed"] = c.seed;
  if (c.defense) n["defense"] = defense_to_json(*c.defense);
  c.normalized = std::move(n);
  return c;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config '" + path + "': " + e.what());
  }
  return experiment_config_from_json(j);
}

/// FNV-1a of the canonical config (output directory excluded).
inline std::string config_hash(const ExperimentConfig& c) { return detail::hex64(fnv1a(c.normalized.dump())); }

inline Dataset load_experiment_dataset(const ExperimentConfig& c) {
  if (c.dataset_path) return load_dataset(*c.dataset_path);
  return generate_synthetic(*c.synthetic);
}

inline std::vector<std::string> experiment_attributes(const ExperimentConfig& c, const Dataset& ds) {
  if (!c.attributes.empty()) {
    for (const auto& a : c.attributes) ds.attribute(a);
    return c.attributes;
  }
  std::vector<std::string> out;
  for (const auto& a : ds.attributes()) out.push_back(a.name);
  return out;
}

inline AblationMask ablation_mask_for(const Dataset& ds, const std::vector<std::string>& features) {
  if (features.empty()) return full_modifiable_mask(ds);
  AblationMask m;
  for (const auto& name : features) {
    bool found = false;
    for (std::size_t f = 0; f < ds.dim(); ++f) {
      if (ds.feature_names()[f] == name || column_derives_from(normalize_feature_name(ds.feature_names()[f]), normalize_feature_name(name))) {
        m.columns.push_back(f);
        found = true;
      }
    }
    if (!found) throw ConfigError("ablation feature '" + name + "' matches no column");
  }
  std::sort(m.columns.begin(), m.columns.end());
  m.columns.erase(std::unique(m.columns.begin(), m.columns.end()), m.columns.end());
  return m;
}

// ---------------------------------------------------------------------------
// Attack report

struct AttackOutput {
  nlohmann::json report;
  std::string cd_csv;  // empty when no statistics were computed
  std::string summary;
};

inline AttackOutput run_attack(const ExperimentConfig& c, const Dataset& ds, int jobs) {
  if (c.models.empty()) throw ConfigError("config.models is required for attack");
  const auto attributes = experiment_attributes(c, ds);
  const PlaylistGraph graph = build_graph(ds, c.tau);
  const Propagator prop = normalize(graph);
  const ExperimentData ex{&ds, &graph, &prop};
  HarnessOptions opt = c.harness;
  opt.jobs = jobs;

  nlohmann::json results = nlohmann::json::array();
  std::vector<std::vector<double>> scores(c.models.size(), std::vector<double>(attributes.size()));
  for (std::size_t a = 0; a < attributes.size(); ++a) {
    const FoldPlan plan = make_folds(ds, attributes[a], opt.folds, derive_seed(c.seed, fnv1a(attributes[a])), opt.val_fraction);
    for (std::size_t m = 0; m < c.models.size(); ++m) {
      const auto run = train_and_score(ex, attributes[a], expand_grid(c.models[m]), plan, opt, c.seed);
      scores[m][a] = run.mean_f1;
      results.push_back(run_result_to_json(run));
    }
  }
  std::vector<std::string> names;
  for (const auto& g : c.models) names.push_back(to_string(g.kind));

  AttackOutput out;
  nlohmann::json stats = nullptr;
  std::string note;
  std::set<std::string> distinct(names.begin(), names.end());
  if (names.size() >= 2 && attributes.size() >= 2 && distinct.size() == names.size()) {
    const auto sr = compare_models(scores, names, attributes, 0.05);
    stats = stats_to_json(sr);
    out.cd_csv = cd_csv(sr);
  } else {
    note = "statistics need at least two distinct models and two attributes";
  }
  out.report = {{"tool", "plinf"},
                {"report_version", 1},
                {"config_hash", config_hash(c)},
                {"seed", c.seed},
                {"config", c.normalized},
                {"dataset", {{"users", ds.users().size()}, {"playlists", ds.playlists().size()}, {"dim", ds.dim()},
                             {"graph_edges", graph.edge_count()}}},
                {"results", results},
                {"score_matrix", {{"models", names}, {"attributes", attributes}, {"mean_macro_f1", scores}}},
                {"stats", stats}};
  if (!note.empty()) out.report["stats_note"] = note;

  std::ostringstream s;
  char buf[64];
  s << "mean test macro-F1\n";
  std::size_t width = 10;
  for (const auto& n : names) width = std::max(width, n.size() + 2);
  std::snprintf(buf, sizeof buf, "%-24s", "attribute");
  s << buf;
  for (const auto& n : names) s << std::string(width - n.size(), ' ') << n;
  s << '\n';
  for (std::size_t a = 0; a < attributes.size(); ++a) {
    std::snprintf(buf, sizeof buf, "%-24s", attributes[a].c_str());
    s << buf;
    for (std::size_t m = 0; m < names.size(); ++m) {
      std::snprintf(buf, sizeof buf, "%*.4f", static_cast<int>(width), scores[m][a]);
      s << buf;
    }
    s << '\n';
  }
  if (!stats.is_null())
    s << "Friedman chi2 = " << stats["friedman"]["statistic"].get<double>() << ", p = " << stats["friedman"]["p_value"].get<double>()
      << '\n';
  out.summary = s.str();
  return out;
}

}  // namespace plinf
