#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "support.hpp"

namespace plinf {
namespace {

const std::string kCli = PLINF_CLI;
const std::string kConfigs = PLINF_CONFIG_DIR;

int run(const std::string& args, const std::string& log = "/dev/null") {
  const int status = std::system((kCli + " " + args + " > " + log + " 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// A small generated dataset plus an experiment config pointing at it.
struct Workspace {
  std::filesystem::path dir, data, config;
};

Workspace workspace(const std::string& name) {
  Workspace w;
  w.dir = test::temp_dir("cli_" + name);
  w.data = w.dir / "data.json";
  EXPECT_EQ(run("gen-data --users 16 --seed 4 --signal 3 --vocabulary 800 --min-playlists 2 --max-playlists 3 "
                "--attributes 2 --classes 2 -o " + w.data.string()),
            0);
  w.config = w.dir / "exp.json";
  nlohmann::json cfg = {{"dataset", w.data.string()},
                        {"strict_grid", false},
                        {"models", {"Random", {{"kind", "GNNPooling"}, {"grid", {{"hidden", {8}}, {"depth", {1}}}}}}},
                        {"harness", {{"folds", 2}, {"repetitions", 1}, {"patience", 5}, {"max_epochs", 15}}},
                        {"seed", 3},
                        {"output_dir", (w.dir / "out").string()},
                        {"defense", {{"attacker", {{"kind", "GNNPooling"}, {"hyperparameters", {{"hidden", 8}, {"depth", 1}}}}}}}};
  std::ofstream(w.config) << cfg.dump(2);
  return w;
}

TEST(Cli, GenDataIsDeterministic) {
  const auto dir = test::temp_dir("cli_gen");
  const std::string common = "gen-data --users 12 --vocabulary 500 --dim 20 --attributes 2 ";
  ASSERT_EQ(run(common + "--seed 5 -o " + (dir / "a.json").string()), 0);
  ASSERT_EQ(run(common + "--seed 5 -o " + (dir / "b.json").string()), 0);
  ASSERT_EQ(run(common + "--seed 6 -o " + (dir / "c.json").string()), 0);
  EXPECT_EQ(slurp(dir / "a.json"), slurp(dir / "b.json"));
  EXPECT_NE(slurp(dir / "a.json"), slurp(dir / "c.json"));
  const auto ds = load_dataset((dir / "a.json").string());
  EXPECT_EQ(ds.users().size(), 12u);
  EXPECT_EQ(ds.dim(), 20u);
}

TEST(Cli, ExitCodes) {
  const auto dir = test::temp_dir("cli_exit");
  EXPECT_EQ(run("--help"), 0);
  EXPECT_EQ(run("no-such-command"), 2);
  EXPECT_EQ(run("build-graph"), 2);  // missing required option
  std::ofstream(dir / "bad_config.json") << R"({"dataset": {"synthetic": {}}, "unknown_key": 1})";
  EXPECT_EQ(run("attack --config " + (dir / "bad_config.json").string()), 2);
  std::ofstream(dir / "bad_data.json") << R"({"feature_names": ["a"], "playlists": [{"id": 1}]})";
  EXPECT_EQ(run("build-graph --data " + (dir / "bad_data.json").string()), 3);
  EXPECT_EQ(run("build-graph --data " + (dir / "missing.json").string()), 3);
  const std::string err = (dir / "err.txt").string();
  run("build-graph --data " + (dir / "bad_data.json").string(), err);
  const auto j = nlohmann::json::parse(slurp(err));
  EXPECT_EQ(j["error"], "data");
}

TEST(Cli, BuildGraphSummary) {
  const auto w = workspace("graph");
  const std::string out = (w.dir / "graph.txt").string();
  ASSERT_EQ(run("build-graph --data " + w.data.string() + " --edges " + (w.dir / "e.txt").string() + " --nodes " +
                    (w.dir / "n.json").string(),
                out),
            0);
  const auto j = nlohmann::json::parse(slurp(out));
  const auto ds = load_dataset(w.data.string());
  const auto g = build_graph(ds, 0);
  EXPECT_EQ(j["nodes"], g.size());
  EXPECT_EQ(j["edges"], g.edge_count());
  EXPECT_TRUE(std::filesystem::exists(w.dir / "e.txt"));
}

TEST(Cli, TrainWritesLoadableCheckpoint) {
  const auto w = workspace("train");
  const auto ckpt = w.dir / "model.json";
  ASSERT_EQ(run("train --data " + w.data.string() + " --attribute attr0 --kind GNNDeepSet --hp '{\"hidden\": 8}' " +
                "--max-epochs 10 -o " + ckpt.string()),
            0);
  const auto m = load_model(ckpt.string());
  EXPECT_EQ(m.spec.kind, ModelKind::GNNDeepSet);
  EXPECT_EQ(m.spec.hp.hidden, 8);
  EXPECT_EQ(m.attribute, "attr0");
  EXPECT_EQ(run("train --data " + w.data.string() + " --attribute attr0 --kind Bogus -o " + ckpt.string()), 2);
}

TEST(Cli, AttackReportIsReproducible) {
  const auto w = workspace("attack");
  ASSERT_EQ(run("attack --config " + w.config.string() + " --out " + (w.dir / "r1").string()), 0);
  ASSERT_EQ(run("attack --config " + w.config.string() + " --out " + (w.dir / "r2").string() + " --jobs 3"), 0);
  const std::string a = slurp(w.dir / "r1" / "report.json");
  EXPECT_FALSE(a.empty());
  EXPECT_EQ(a, slurp(w.dir / "r2" / "report.json"));
  EXPECT_EQ(slurp(w.dir / "r1" / "cd.csv"), slurp(w.dir / "r2" / "cd.csv"));
  const auto j = nlohmann::json::parse(a);
  EXPECT_TRUE(j.contains("config_hash"));
  EXPECT_EQ(j["seed"], 3);
  EXPECT_EQ(run("report --input " + (w.dir / "r1" / "report.json").string()), 0);
  EXPECT_EQ(run("stats --input " + (w.dir / "r1" / "report.json").string() + " --out " + (w.dir / "s").string()), 0);
}

TEST(Cli, DefendNoneHasZeroDelta) {
  const auto w = workspace("none");
  ASSERT_EQ(run("defend --config " + w.config.string() + " --defense none --out " + (w.dir / "d").string()), 0);
  const auto j = nlohmann::json::parse(slurp(w.dir / "d" / "defense_report.json"));
  EXPECT_EQ(j["mean_delta"], 0.0);
  EXPECT_TRUE(j.contains("config_hash"));
  EXPECT_EQ(j["defense"], "none");
}

TEST(Cli, DefendAblationKeepsFixedColumns) {
  const auto w = workspace("ablation");
  ASSERT_EQ(run("defend --config " + w.config.string() + " --defense ablation --out " + (w.dir / "d").string()), 0);
  const auto j = nlohmann::json::parse(slurp(w.dir / "d" / "defense_report.json"));
  EXPECT_EQ(j["scope"], "release");
  const auto before = load_dataset(w.data.string());
  const auto after = load_dataset((w.dir / "d" / "defended.json").string());
  ASSERT_EQ(before.playlists().size(), after.playlists().size());
  const auto& mask = before.modifiable_mask();
  for (std::size_t p = 0; p < before.playlists().size(); ++p)
    for (std::size_t f = 0; f < before.dim(); ++f) {
      const double v = after.playlist(p).embedding[f], v0 = before.playlist(p).embedding[f];
      if (mask[f]) {
        EXPECT_EQ(v, 0.0);
      } else {
        EXPECT_EQ(std::memcmp(&v, &v0, sizeof v), 0);
      }
    }
}

TEST(Cli, DefendInjectWritesAuditLog) {
  const auto w = workspace("inject");
  ASSERT_EQ(run("defend --config " + w.config.string() + " --defense inject --k 1 --out " + (w.dir / "d").string()), 0);
  const std::string audit = slurp(w.dir / "d" / "audit.jsonl");
  EXPECT_GT(std::count(audit.begin(), audit.end(), '\n'), 0);
  const auto first = nlohmann::json::parse(audit.substr(0, audit.find('\n')));
  for (const char* key : {"user", "step", "candidate", "raw_score", "penalized_score", "post_pgd_loss"})
    EXPECT_TRUE(first.contains(key)) << key;
  EXPECT_TRUE(std::filesystem::exists(w.dir / "d" / "defended_attr0.json"));
  EXPECT_EQ(run("defend --config " + w.config.string() + " --defense inject --scope release --out " + (w.dir / "e").string()), 2);
}

TEST(Cli, SmokeConfigRuns) {
  const auto dir = test::temp_dir("cli_smoke");
  EXPECT_EQ(run("attack --config " + kConfigs + "/smoke.json --out " + dir.string()), 0);
  EXPECT_TRUE(std::filesystem::exists(dir / "report.json"));
}

}  // namespace
}  // namespace plinf
