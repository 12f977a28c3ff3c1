#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "support.hpp"

namespace plinf {
namespace {

nlohmann::json single_zero_file() {
  nlohmann::json j;
  j["feature_names"] = default_feature_names();
  j["modifiable_features"] = modifiable_base_features();
  j["attributes"] = {{{"name", "gender"}, {"category", "demographics"}, {"classes", {"f", "m"}}}};
  j["users"] = {{{"id", "u1"},
                 {"labels", {{"gender", 1}}},
                 {"playlists", {{{"id", "p1"}, {"songs", {"a", "b"}}, {"embedding", std::vector<double>(111, 0.0)}}}}}};
  return j;
}

std::string write_temp(const std::string& name, const std::string& text) {
  const auto dir = test::temp_dir("dataset");
  const auto path = dir / name;
  std::ofstream(path) << text;
  return path.string();
}

TEST(Dataset, SingleZeroRecordHasZeroStats) {
  const auto ds = load_dataset(write_temp("one.json", single_zero_file().dump()));
  ASSERT_EQ(ds.users().size(), 1u);
  ASSERT_EQ(ds.dim(), 111u);
  const auto& s = ds.feature_stats();
  for (std::size_t f = 0; f < 111; ++f) {
    EXPECT_EQ(s.mean[f], 0.0);
    EXPECT_EQ(s.std[f], 0.0);
    EXPECT_EQ(s.min[f], 0.0);
    EXPECT_EQ(s.max[f], 0.0);
  }
}

TEST(Dataset, ModifiableMaskCoversEveryStatisticOfTheFourteenFeatures) {
  const auto ds = dataset_from_json(single_zero_file());
  const auto& names = ds.feature_names();
  std::size_t marked = 0;
  for (std::size_t f = 0; f < names.size(); ++f) {
    bool derived = false;
    for (const auto& base : modifiable_base_features()) {
      for (const char* st : {"_avg", "_min", "_max", "_std"})
        derived = derived || names[f] == base + st;
    }
    EXPECT_EQ(ds.modifiable_mask()[f], derived) << names[f];
    marked += derived;
  }
  EXPECT_EQ(marked, 56u);
  // Lookalike prefixes do not count: "popularity_art" must not claim "popularity_art_unique_avg".
  std::vector<bool> mask = modifiable_mask_for({"popularity_art_unique_avg", "popularity_art_avg"}, {"popularity_art"});
  EXPECT_FALSE(mask[0]);
  EXPECT_TRUE(mask[1]);
}

TEST(Dataset, MaskPartitionsColumns) {
  const auto ds = dataset_from_json(single_zero_file());
  std::size_t modifiable = ds.modifiable_columns().size();
  std::size_t fixed = 0;
  for (bool b : ds.modifiable_mask()) fixed += !b;
  EXPECT_EQ(modifiable + fixed, ds.dim());
}

TEST(Dataset, NonFiniteValueIsReportedWithLocation) {
  Rng rng(3);
  test::TinySpec spec;
  auto c = test::tiny_content(spec, rng);
  c.playlists[1].embedding[3] = std::numeric_limits<double>::quiet_NaN();
  try {
    Dataset ds(std::move(c));
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("user0"), std::string::npos) << msg;
    EXPECT_NE(msg.find("user0_pl1"), std::string::npos) << msg;
    EXPECT_NE(msg.find("fixed3"), std::string::npos) << msg;
  }
}

TEST(Dataset, OverflowingNumberInFileIsRejected) {
  auto j = single_zero_file();
  std::string text = j.dump();
  const auto pos = text.find("[0.0,");
  ASSERT_NE(pos, std::string::npos);
  text.replace(pos, 5, "[1e999,");
  EXPECT_THROW(load_dataset(write_temp("inf.json", text)), DataError);
}

TEST(Dataset, ValidationErrors) {
  auto bad_dim = single_zero_file();
  bad_dim["users"][0]["playlists"][0]["embedding"] = std::vector<double>(110, 0.0);
  EXPECT_THROW(dataset_from_json(bad_dim), DataError);

  auto bad_class = single_zero_file();
  bad_class["users"][0]["labels"]["gender"] = 2;
  try {
    dataset_from_json(bad_class);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("u1"), std::string::npos);
  }

  Rng rng(1);
  auto c = test::tiny_content({}, rng);
  c.users[0].playlist_ids.push_back("nowhere");
  EXPECT_THROW(Dataset(std::move(c)), DataError);

  EXPECT_THROW(load_dataset(write_temp("broken.json", "{\"users\": [")), DataError);
  EXPECT_THROW(load_dataset("/nonexistent/file.json"), DataError);
}

TEST(Dataset, PartialLabelsAreAllowed) {
  Rng rng(1);
  auto c = test::tiny_content({}, rng);
  c.users[1].labels.clear();
  Dataset ds(std::move(c));
  EXPECT_FALSE(ds.label(1, "target").has_value());
  EXPECT_EQ(ds.labeled_users("target"), std::vector<std::size_t>({0}));
}

TEST(FeatureStats, TwoPlaylistsHandComputed) {
  Rng rng(1);
  test::TinySpec spec;
  spec.dim = 1;
  spec.playlists_per_user = {2};
  auto c = test::tiny_content(spec, rng);
  c.playlists[0].embedding = {0.0};
  c.playlists[1].embedding = {2.0};
  const auto s = compute_feature_stats(Dataset(std::move(c)));
  EXPECT_DOUBLE_EQ(s.mean[0], 1.0);
  EXPECT_DOUBLE_EQ(s.std[0], 1.0);  // population std
  EXPECT_DOUBLE_EQ(s.min[0], 0.0);
  EXPECT_DOUBLE_EQ(s.max[0], 2.0);
}

TEST(FeatureStats, SinglePlaylist) {
  test::TinySpec spec;
  spec.playlists_per_user = {1};
  const auto ds = test::tiny_dataset(spec, 5);
  const auto s = compute_feature_stats(ds);
  for (std::size_t f = 0; f < ds.dim(); ++f) {
    EXPECT_EQ(s.std[f], 0.0);
    EXPECT_EQ(s.mean[f], ds.playlist(0).embedding[f]);
    EXPECT_EQ(s.min[f], s.max[f]);
  }
}

TEST(FeatureStats, EmptyDatasetIsAnError) {
  DatasetContent c;
  c.feature_names = {"a"};
  Dataset ds(std::move(c));
  EXPECT_THROW(compute_feature_stats(ds), DataError);
}

// Welford streaming mean/variance as an independent oracle.
TEST(FeatureStats, MatchesStreamingOracleAndIsIdempotent) {
  SyntheticConfig cfg;
  cfg.user_count = 40;
  cfg.attributes = {{"a", Category::Habits, 3, {}}};
  cfg.seed = 9;
  const auto ds = generate_synthetic(cfg);
  const auto s = compute_feature_stats(ds);
  for (std::size_t f = 0; f < ds.dim(); ++f) {
    double mean = 0.0, m2 = 0.0, n = 0.0;
    for (const auto& p : ds.playlists()) {
      n += 1.0;
      const double d = p.embedding[f] - mean;
      mean += d / n;
      m2 += d * (p.embedding[f] - mean);
    }
    EXPECT_NEAR(s.mean[f], mean, 1e-9);
    EXPECT_NEAR(s.std[f], std::sqrt(m2 / n), 1e-9);
    EXPECT_NEAR(ds.feature_stats().mean[f], s.mean[f], 1e-9);
  }
  const auto again = compute_feature_stats(Dataset(ds.content()));
  EXPECT_EQ(again.mean, s.mean);
  EXPECT_EQ(again.std, s.std);
}

TEST(DatasetFile, RoundTripIsIdentical) {
  SyntheticConfig cfg;
  cfg.user_count = 12;
  cfg.attributes = {{"a", Category::Habits, 2, {}}, {"b", Category::Personality, 3, {0.2, 0.3, 0.5}}};
  cfg.seed = 4;
  const auto ds = generate_synthetic(cfg);
  const auto dir = test::temp_dir("roundtrip");
  write_dataset(ds, (dir / "a.json").string());
  const auto back = load_dataset((dir / "a.json").string());
  write_dataset(back, (dir / "b.json").string());
  std::ifstream a(dir / "a.json"), b(dir / "b.json");
  std::stringstream sa, sb;
  sa << a.rdbuf();
  sb << b.rdbuf();
  EXPECT_EQ(sa.str(), sb.str());
  ASSERT_EQ(back.playlists().size(), ds.playlists().size());
  for (std::size_t p = 0; p < ds.playlists().size(); ++p) {
    EXPECT_EQ(back.playlist(p).embedding, ds.playlist(p).embedding);
    EXPECT_EQ(back.playlist(p).song_ids, ds.playlist(p).song_ids);
  }
}

TEST(Synthetic, DeterministicUnderSeed) {
  SyntheticConfig cfg;
  cfg.user_count = 30;
  cfg.seed = 17;
  cfg.attributes = default_synthetic_attributes();
  const auto a = dataset_to_json(generate_synthetic(cfg)).dump();
  const auto b = dataset_to_json(generate_synthetic(cfg)).dump();
  EXPECT_EQ(a, b);
  cfg.seed = 18;
  EXPECT_NE(a, dataset_to_json(generate_synthetic(cfg)).dump());
}

TEST(Synthetic, DefaultHasStandardLayout) {
  SyntheticConfig cfg;
  cfg.attributes = default_synthetic_attributes();
  cfg.user_count = 5;
  const auto ds = generate_synthetic(cfg);
  EXPECT_EQ(ds.dim(), 111u);
  EXPECT_EQ(ds.attributes().size(), 15u);
  EXPECT_EQ(ds.modifiable_columns().size(), 56u);
}

// Largest class-conditional mean gap over all columns, in units of column std.
double max_mean_gap(const Dataset& ds) {
  double worst = 0.0;
  for (std::size_t f = 0; f < ds.dim(); ++f) {
    double sum[2] = {0, 0}, n[2] = {0, 0};
    for (std::size_t p = 0; p < ds.playlists().size(); ++p) {
      const int c = *ds.label(ds.user_of_playlist(p), "a");
      sum[c] += ds.playlist(p).embedding[f];
      n[c] += 1;
    }
    const double sd = ds.feature_stats().std[f];
    worst = std::max(worst, std::abs(sum[0] / n[0] - sum[1] / n[1]) / sd);
  }
  return worst;
}

TEST(Synthetic, NullSignalGapShrinksWithUsers) {
  SyntheticConfig cfg;
  cfg.attributes = {{"a", Category::Habits, 2, {}}};
  cfg.signal_strength = 0.0;
  cfg.seed = 2;
  cfg.user_count = 50;
  const double small = max_mean_gap(generate_synthetic(cfg));
  cfg.user_count = 1500;
  const double large = max_mean_gap(generate_synthetic(cfg));
  EXPECT_LT(large, small);
  EXPECT_LT(large, 0.2);
  cfg.signal_strength = 5.0;
  EXPECT_GT(max_mean_gap(generate_synthetic(cfg)), 1.0);
}

// Closed-form Fisher discriminant on mean user embeddings, fitted on half the
// users and scored on the other half.
TEST(Synthetic, PlantedSignalIsLinearlySeparable) {
  SyntheticConfig cfg;
  cfg.user_count = 200;
  cfg.attributes = {{"a", Category::Demographics, 2, {}}};
  cfg.signal_strength = 5.0;
  cfg.seed = 2024;
  const auto ds = generate_synthetic(cfg);
  const Index d = static_cast<Index>(ds.dim());
  std::vector<Vector> mean_emb;
  std::vector<int> label;
  for (std::size_t u = 0; u < ds.users().size(); ++u) {
    Vector m = Vector::Zero(d);
    for (std::size_t p : ds.playlists_of(u)) m += Eigen::Map<const Vector>(ds.playlist(p).embedding.data(), d);
    mean_emb.push_back(m / static_cast<double>(ds.playlists_of(u).size()));
    label.push_back(*ds.label(u, "a"));
  }
  Vector mu[2] = {Vector::Zero(d), Vector::Zero(d)};
  double n[2] = {0, 0};
  for (std::size_t u = 0; u < 100; ++u) {
    mu[label[u]] += mean_emb[u];
    n[label[u]] += 1;
  }
  mu[0] /= n[0];
  mu[1] /= n[1];
  Matrix sw = Matrix::Zero(d, d);
  for (std::size_t u = 0; u < 100; ++u) {
    const Vector c = mean_emb[u] - mu[label[u]];
    sw += c * c.transpose();
  }
  sw /= 100.0;
  sw += 1e-2 * Matrix::Identity(d, d);
  const Vector w = sw.ldlt().solve(mu[1] - mu[0]);
  const double threshold = w.dot(0.5 * (mu[0] + mu[1]));
  int correct = 0;
  for (std::size_t u = 100; u < 200; ++u) correct += (w.dot(mean_emb[u]) > threshold ? 1 : 0) == label[u];
  EXPECT_GE(correct / 100.0, 0.95);
}

TEST(Synthetic, ConfigValidation) {
  SyntheticConfig cfg;
  cfg.attributes = {{"a", Category::Habits, 2, {0.5, 0.6}}};
  EXPECT_THROW(generate_synthetic(cfg), ConfigError);
  cfg.attributes = {{"a", Category::Habits, 2, {}}};
  cfg.user_count = 0;
  EXPECT_THROW(generate_synthetic(cfg), ConfigError);
}

TEST(Synthetic, CrossClassPlaylistsCarryTheOtherSignal) {
  SyntheticConfig cfg;
  cfg.user_count = 100;
  cfg.attributes = {{"a", Category::Habits, 2, {}}};
  cfg.signal_strength = 5.0;
  cfg.seed = 8;
  const double clean = max_mean_gap(generate_synthetic(cfg));
  cfg.cross_class_rate = 0.4;
  const double mixed = max_mean_gap(generate_synthetic(cfg));
  EXPECT_LT(mixed, clean);
}

}  // namespace
}  // namespace plinf
