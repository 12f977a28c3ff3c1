// plinf: playlist attribute inference experiments from the command line.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "plinf/plinf.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

enum class Level { Error = 0, Warn = 1, Info = 2, Debug = 3 };
Level g_level = Level::Warn;

void log(Level l, const std::string& msg) {
  static const char* names[] = {"error", "warn", "info", "debug"};
  if (l <= g_level) std::cerr << "[" << names[static_cast<int>(l)] << "] " << msg << '\n';
}

Level level_from_string(const std::string& s) {
  if (s == "error") return Level::Error;
  if (s == "warn" || s == "warning") return Level::Warn;
  if (s == "info") return Level::Info;
  if (s == "debug") return Level::Debug;
  throw plinf::ConfigError("unknown log level '" + s + "'");
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  if (!out) throw plinf::RuntimeFailure("cannot write '" + path.string() + "'");
  out << text;
}

json read_json(const std::string& path, bool config) {
  std::ifstream in(path);
  if (!in) {
    if (config) throw plinf::ConfigError("cannot open '" + path + "'");
    throw plinf::DataError("cannot open '" + path + "'");
  }
  try {
    json j;
    in >> j;
    return j;
  } catch (const json::exception& e) {
    if (config) throw plinf::ConfigError("'" + path + "': " + e.what());
    throw plinf::DataError("'" + path + "': " + e.what());
  }
}

// ---------------------------------------------------------------------------

struct GenArgs {
  std::string config, output;
  int users = 200;
  std::uint64_t seed = 0;
  double signal = 1.0, overlap = 0.3, cross = 0.0;
  int dim = 111;
  int attributes = 0;   // 0: the fifteen default attributes
  int classes = 2;      // for --attributes N
  int min_playlists = 3, max_playlists = 8;
  int vocabulary = 20000;
};

int cmd_gen_data(const GenArgs& a, const CLI::App& sub) {
  plinf::SyntheticConfig c;
  if (!a.config.empty()) c = plinf::synthetic_config_from_json(read_json(a.config, true));
  if (a.config.empty() || sub.count("--users")) c.user_count = a.users;
  if (a.config.empty() || sub.count("--seed")) c.seed = a.seed;
  if (a.config.empty() || sub.count("--signal")) c.signal_strength = a.signal;
  if (a.config.empty() || sub.count("--overlap")) c.overlap_rate = a.overlap;
  if (a.config.empty() || sub.count("--cross-class")) c.cross_class_rate = a.cross;
  if (a.config.empty() || sub.count("--dim")) c.embedding_dim = a.dim;
  if (a.config.empty() || sub.count("--vocabulary")) c.song_vocabulary_size = a.vocabulary;
  if (a.config.empty() || sub.count("--min-playlists") || sub.count("--max-playlists"))
    c.playlists_per_user = {a.min_playlists, a.max_playlists};
  if (a.attributes > 0) {
    c.attributes.clear();
    for (int i = 0; i < a.attributes; ++i) c.attributes.push_back({"attr" + std::to_string(i), plinf::Category::Demographics, a.classes, {}});
  } else if (c.attributes.empty()) {
    c.attributes = plinf::default_synthetic_attributes();
  }
  const auto ds = plinf::generate_synthetic(c);
  write_text(a.output, plinf::dataset_to_json(ds).dump(1) + "\n");
  log(Level::Info, "wrote " + std::to_string(ds.users().size()) + " users, " + std::to_string(ds.playlists().size()) +
                       " playlists to " + a.output);
  return 0;
}

struct GraphArgs {
  std::string data, edges, nodes;
  int tau = 0;
};

int cmd_build_graph(const GraphArgs& a) {
  const auto ds = plinf::load_dataset(a.data);
  const auto g = plinf::build_graph(ds, a.tau);
  if (!a.edges.empty() || !a.nodes.empty()) {
    const std::string edges = a.edges.empty() ? "edges.txt" : a.edges;
    const std::string nodes = a.nodes.empty() ? "nodes.json" : a.nodes;
    for (const auto& p : {edges, nodes})
      if (fs::path(p).has_parent_path()) fs::create_directories(fs::path(p).parent_path());
    plinf::export_graph(g, edges, nodes);
  }
  std::size_t isolated = 0, max_degree = 0;
  for (plinf::NodeId i = 0; i < g.size(); ++i) {
    isolated += g.degree(i) == 0;
    max_degree = std::max(max_degree, g.degree(i));
  }
  std::cout << json{{"nodes", g.size()}, {"edges", g.edge_count()}, {"isolated", isolated}, {"max_degree", max_degree}, {"tau", a.tau}}.dump()
            << '\n';
  return 0;
}

struct TrainArgs {
  std::string data, attribute, kind, hyperparameters, output, config;
  int tau = 0;
  std::uint64_t seed = 0;
  int patience = 30, max_epochs = 500;
  double val_fraction = 0.2;
};

// Trains one model on every labeled user (a stratified validation share is
// held out for early stopping) and writes a checkpoint.
int cmd_train(const TrainArgs& a) {
  plinf::Dataset ds;
  if (!a.config.empty()) {
    const auto cfg = plinf::load_experiment_config(a.config);
    ds = plinf::load_experiment_dataset(cfg);
  } else if (!a.data.empty()) {
    ds = plinf::load_dataset(a.data);
  } else {
    throw plinf::ConfigError("train needs --data or --config");
  }
  plinf::ModelSpec spec;
  spec.kind = plinf::model_kind_from_string(a.kind);
  if (!a.hyperparameters.empty()) {
    json hp;
    try {
      hp = json::parse(a.hyperparameters);
    } catch (const json::exception& e) {
      throw plinf::ConfigError(std::string("--hp: ") + e.what());
    }
    for (const auto& [k, v] : hp.items()) plinf::apply_hyperparam(spec.hp, k, v);
  }
  const auto& schema = ds.attribute(a.attribute);
  const auto graph = plinf::build_graph(ds, a.tau);
  const auto prop = plinf::normalize(graph);
  const plinf::ExperimentData ex{&ds, &graph, &prop};
  // A two-fold plan whose fold 0 test set is empty is not available, so split
  // the labeled users into train/validation directly.
  plinf::Fold fold;
  {
    const auto plan = plinf::make_folds(ds, a.attribute, 2, a.seed, a.val_fraction);
    fold = plan.folds[0];
    fold.train.insert(fold.train.end(), fold.test.begin(), fold.test.end());
    fold.test.clear();
    std::sort(fold.train.begin(), fold.train.end());
  }
  const auto data = plinf::fold_fit_data(ex, a.attribute, fold, plinf::derive_seed(a.seed, 1));
  plinf::Rng rng(plinf::derive_seed(a.seed, 2));
  const auto fit = plinf::fit_model(spec, a.attribute, schema.class_names, data, rng, {a.patience, a.max_epochs});
  if (fit.diverged) throw plinf::RuntimeFailure("training diverged");
  write_text(a.output, fit.model.to_json().dump() + "\n");
  json summary = {{"model", plinf::to_string(spec.kind)}, {"attribute", a.attribute}, {"checkpoint", a.output},
                  {"epochs", fit.val_curve.size()}};
  if (std::isfinite(fit.val_loss)) summary["best_validation_loss"] = fit.val_loss;
  std::cout << summary.dump() << '\n';
  return 0;
}

struct AttackArgs {
  std::string config, out;
  int jobs = 1;
};

int cmd_attack(const AttackArgs& a) {
  const auto cfg = plinf::load_experiment_config(a.config);
  const auto ds = plinf::load_experiment_dataset(cfg);
  const fs::path dir = a.out.empty() ? fs::path(cfg.output_dir) : fs::path(a.out);
  log(Level::Info, "config hash " + plinf::config_hash(cfg));
  const auto out = plinf::run_attack(cfg, ds, a.jobs);
  write_text(dir / "report.json", out.report.dump(1) + "\n");
  if (!out.cd_csv.empty()) write_text(dir / "cd.csv", out.cd_csv);
  std::cout << out.summary;
  return 0;
}

struct DefendArgs {
  std::string config, out, defense, scope, attacker;
  int k = 0;
  int jobs = 1;
  bool skip_dataset = false;
};

int cmd_defend(const DefendArgs& a) {
  const auto cfg = plinf::load_experiment_config(a.config);
  const auto ds = plinf::load_experiment_dataset(cfg);
  plinf::DefenseSection d = cfg.defense.value_or(plinf::DefenseSection{});
  if (!a.defense.empty()) d.spec.kind = plinf::defense_kind_from_string(a.defense);
  if (!a.scope.empty()) d.spec.scope = plinf::defense_scope_from_string(a.scope);
  if (a.k > 0) d.spec.injection.k = a.k;
  if (d.spec.kind == plinf::DefenseKind::Ablation) d.spec.ablation = plinf::ablation_mask_for(ds, d.ablation_features);
  const fs::path dir = a.out.empty() ? fs::path(cfg.output_dir) : fs::path(a.out);
  auto attributes = plinf::experiment_attributes(cfg, ds);
  const auto graph = plinf::build_graph(ds, cfg.tau);
  plinf::HarnessOptions opt = cfg.harness;
  opt.jobs = a.jobs;

  std::optional<plinf::TrainedModel> checkpoint;
  if (!a.attacker.empty()) {
    checkpoint = plinf::load_model(a.attacker);
    if (std::find(attributes.begin(), attributes.end(), checkpoint->attribute) == attributes.end())
      throw plinf::ConfigError("attacker checkpoint targets '" + checkpoint->attribute + "', which is not a configured attribute");
    attributes = {checkpoint->attribute};
    d.attacker = checkpoint->spec;
  }

  const auto rep = plinf::evaluate_defense(ds, graph, d.spec, d.attacker, attributes, opt, cfg.seed);
  json report = plinf::defense_report_to_json(rep);
  report["config_hash"] = plinf::config_hash(cfg);
  report["seed"] = cfg.seed;

  if (!a.skip_dataset) {
    std::vector<std::size_t> all(ds.users().size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    if (d.spec.kind == plinf::DefenseKind::Injection) {
      // One defended dataset per attribute: the decoys depend on the attacker.
      std::ofstream audit;
      fs::create_directories(dir);
      audit.open(dir / "audit.jsonl", std::ios::trunc);
      for (const auto& attr : attributes) {
        plinf::TrainedModel attacker;
        if (checkpoint) {
          attacker = *checkpoint;
        } else {
          const auto prop = plinf::normalize(graph);
          const plinf::ExperimentData ex{&ds, &graph, &prop};
          const auto plan = plinf::make_folds(ds, attr, 2, cfg.seed, opt.val_fraction);
          plinf::Fold fold = plan.folds[0];
          fold.train.insert(fold.train.end(), fold.test.begin(), fold.test.end());
          fold.test.clear();
          std::sort(fold.train.begin(), fold.train.end());
          const auto data = plinf::fold_fit_data(ex, attr, fold, plinf::derive_seed(cfg.seed, 7));
          plinf::Rng rng(plinf::derive_seed(cfg.seed, 8));
          attacker = plinf::fit_model(d.attacker, attr, ds.attribute(attr).class_names, data, rng, {opt.patience, opt.max_epochs}).model;
        }
        plinf::DefenseSpec local = d.spec;
        const auto v = plinf::apply_defense(ds, graph, local, all, &attacker);
        write_text(dir / ("defended_" + attr + ".json"), plinf::dataset_to_json(v.dataset).dump(1) + "\n");
        if (v.injection) plinf::write_audit_log(*v.injection, audit);
      }
    } else {
      const auto v = plinf::apply_defense(ds, graph, d.spec, all, nullptr);
      write_text(dir / "defended.json", plinf::dataset_to_json(v.dataset).dump(1) + "\n");
    }
  }
  write_text(dir / "defense_report.json", report.dump(1) + "\n");

  char buf[128];
  std::cout << "defense " << plinf::to_string(rep.kind) << " (" << plinf::to_string(rep.scope) << " scope) against "
            << plinf::to_string(rep.attacker.kind) << "\n";
  std::snprintf(buf, sizeof buf, "%-24s%10s%10s%10s\n", "attribute", "before", "after", "delta");
  std::cout << buf;
  for (const auto& r : rep.attributes) {
    std::snprintf(buf, sizeof buf, "%-24s%10.4f%10.4f%+10.4f\n", r.attribute.c_str(), r.before, r.after, r.delta);
    std::cout << buf;
  }
  std::snprintf(buf, sizeof buf, "%-24s%30s%+10.4f\n", "mean", "", rep.mean_delta);
  std::cout << buf;
  return 0;
}

struct StatsArgs {
  std::string input, out;
  double alpha = 0.05;
};

// Input: an attack report, or {"models": [...], "targets": [...], "scores": [[...]]}.
int cmd_stats(const StatsArgs& a) {
  const json j = read_json(a.input, false);
  std::vector<std::string> models, targets;
  std::vector<std::vector<double>> scores;
  try {
    if (j.contains("score_matrix")) {
      const auto& m = j.at("score_matrix");
      models = m.at("models").get<std::vector<std::string>>();
      targets = m.at("attributes").get<std::vector<std::string>>();
      scores = m.at("mean_macro_f1").get<std::vector<std::vector<double>>>();
    } else {
      scores = j.at("scores").get<std::vector<std::vector<double>>>();
      if (j.contains("models")) models = j.at("models").get<std::vector<std::string>>();
      if (j.contains("targets")) targets = j.at("targets").get<std::vector<std::string>>();
    }
  } catch (const json::exception& e) {
    throw plinf::DataError(std::string("stats input: ") + e.what());
  }
  const auto r = plinf::compare_models(scores, models, targets, a.alpha);
  const json out = plinf::stats_to_json(r);
  if (!a.out.empty()) {
    write_text(fs::path(a.out) / "stats.json", out.dump(1) + "\n");
    write_text(fs::path(a.out) / "cd.csv", plinf::cd_csv(r));
  }
  std::cout << out.dump(1) << '\n';
  return 0;
}

struct ReportArgs {
  std::string input;
};

int cmd_report(const ReportArgs& a) {
  const json j = read_json(a.input, false);
  try {
    if (j.contains("score_matrix")) {
      const auto& m = j.at("score_matrix");
      const auto models = m.at("models").get<std::vector<std::string>>();
      const auto attrs = m.at("attributes").get<std::vector<std::string>>();
      const auto scores = m.at("mean_macro_f1").get<std::vector<std::vector<double>>>();
      char buf[64];
      std::snprintf(buf, sizeof buf, "%-24s", "attribute");
      std::cout << "config " << j.value("config_hash", "") << " seed " << j.value("seed", 0) << '\n' << buf;
      for (const auto& n : models) {
        std::snprintf(buf, sizeof buf, "%12s", n.c_str());
        std::cout << buf;
      }
      std::cout << '\n';
      for (std::size_t t = 0; t < attrs.size(); ++t) {
        std::snprintf(buf, sizeof buf, "%-24s", attrs[t].c_str());
        std::cout << buf;
        for (std::size_t mi = 0; mi < models.size(); ++mi) {
          std::snprintf(buf, sizeof buf, "%12.4f", scores[mi][t]);
          std::cout << buf;
        }
        std::cout << '\n';
      }
      if (j.contains("stats") && !j.at("stats").is_null()) {
        const auto& s = j.at("stats");
        std::cout << "Friedman chi2 " << s.at("friedman").at("statistic").get<double>() << ", p "
                  << s.at("friedman").at("p_value").get<double>() << '\n';
        const auto ranks = s.at("average_ranks").get<std::vector<double>>();
        for (std::size_t mi = 0; mi < models.size(); ++mi) {
          std::snprintf(buf, sizeof buf, "  %-14s avg rank %.3f\n", models[mi].c_str(), ranks[mi]);
          std::cout << buf;
        }
      }
    } else if (j.contains("defense")) {
      char buf[128];
      std::cout << "defense " << j.at("defense").get<std::string>() << '\n';
      for (const auto& r : j.at("attributes")) {
        std::snprintf(buf, sizeof buf, "%-24s%10.4f%10.4f%+10.4f\n", r.at("attribute").get<std::string>().c_str(),
                      r.at("before").get<double>(), r.at("after").get<double>(), r.at("delta").get<double>());
        std::cout << buf;
      }
    } else {
      throw plinf::DataError("'" + a.input + "' is neither an attack nor a defense report");
    }
  } catch (const json::exception& e) {
    throw plinf::DataError(std::string("report: ") + e.what());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Playlist attribute inference attacks and defenses"};
  app.require_subcommand(1);
  std::string level = "warn";
  app.add_option("--log-level", level, "error, warn, info or debug")->capture_default_str();

  GenArgs gen;
  auto* g = app.add_subcommand("gen-data", "Generate a synthetic dataset");
  g->add_option("--config", gen.config, "Synthetic config JSON");
  g->add_option("--users", gen.users);
  g->add_option("--seed", gen.seed);
  g->add_option("--signal", gen.signal, "Signal strength");
  g->add_option("--overlap", gen.overlap, "Song overlap rate");
  g->add_option("--cross-class", gen.cross, "Share of cross-class playlists");
  g->add_option("--dim", gen.dim, "Embedding dimension");
  g->add_option("--vocabulary", gen.vocabulary, "Song vocabulary size");
  g->add_option("--min-playlists", gen.min_playlists);
  g->add_option("--max-playlists", gen.max_playlists);
  g->add_option("--attributes", gen.attributes, "Number of generic attributes (default: the fifteen named ones)");
  g->add_option("--classes", gen.classes, "Classes per generic attribute");
  g->add_option("-o,--output", gen.output)->required();

  GraphArgs ga;
  auto* b = app.add_subcommand("build-graph", "Build the playlist graph and print its summary");
  b->add_option("--data", ga.data)->required();
  b->add_option("--tau", ga.tau);
  b->add_option("--edges", ga.edges, "Edge list output");
  b->add_option("--nodes", ga.nodes, "Node map output");

  TrainArgs ta;
  auto* t = app.add_subcommand("train", "Train one model and write a checkpoint");
  t->add_option("--data", ta.data);
  t->add_option("--config", ta.config, "Experiment config providing the dataset");
  t->add_option("--attribute", ta.attribute)->required();
  t->add_option("--kind", ta.kind)->required();
  t->add_option("--hp", ta.hyperparameters, "Hyperparameters as a JSON object");
  t->add_option("--tau", ta.tau);
  t->add_option("--seed", ta.seed);
  t->add_option("--patience", ta.patience);
  t->add_option("--max-epochs", ta.max_epochs);
  t->add_option("-o,--output", ta.output)->required();

  AttackArgs aa;
  auto* at = app.add_subcommand("attack", "Cross-validated grid search and model comparison");
  at->add_option("--config", aa.config)->required();
  at->add_option("--out", aa.out, "Output directory (default: config output_dir)");
  at->add_option("--jobs", aa.jobs)->check(CLI::PositiveNumber);

  DefendArgs da;
  auto* d = app.add_subcommand("defend", "Evaluate a defense");
  d->add_option("--config", da.config)->required();
  d->add_option("--defense", da.defense, "none, noise, ablation or inject");
  d->add_option("--scope", da.scope, "test or release (default: release for noise and ablation, test otherwise)");
  d->add_option("--k", da.k, "Decoys per user");
  d->add_option("--attacker", da.attacker, "Attacker checkpoint");
  d->add_option("--out", da.out);
  d->add_option("--jobs", da.jobs)->check(CLI::PositiveNumber);
  d->add_flag("--no-dataset", da.skip_dataset, "Skip writing the defended dataset");

  StatsArgs sa;
  auto* s = app.add_subcommand("stats", "Friedman/Conover/Holm comparison of a score matrix");
  s->add_option("--input", sa.input)->required();
  s->add_option("--out", sa.out);
  s->add_option("--alpha", sa.alpha);

  ReportArgs ra;
  auto* r = app.add_subcommand("report", "Render a report as a table");
  r->add_option("--input", ra.input)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    g_level = level_from_string(level);
    if (g->parsed()) return cmd_gen_data(gen, *g);
    if (b->parsed()) return cmd_build_graph(ga);
    if (t->parsed()) return cmd_train(ta);
    if (at->parsed()) return cmd_attack(aa);
    if (d->parsed()) return cmd_defend(da);
    if (s->parsed()) return cmd_stats(sa);
    if (r->parsed()) return cmd_report(ra);
  } catch (const plinf::Error& e) {
    static const char* kinds[] = {"", "", "config", "data", "runtime"};
    std::cerr << json{{"error", kinds[e.exit_code()]}, {"message", e.what()}}.dump() << '\n';
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << json{{"error", "runtime"}, {"message", e.what()}}.dump() << '\n';
    return 4;
  }
  return 2;
}
