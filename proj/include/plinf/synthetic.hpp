#pragma once

// Synthetic datasets with a planted, tunable attribute signal in both the
// embeddings and the song-overlap structure.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>
#include <utility>
#include <vector>

#include "plinf/dataset.hpp"
#include "plinf/error.hpp"
#include "plinf/rng.hpp"

namespace plinf {

struct SyntheticAttribute {
  std::string name;
  Category category = Category::Demographics;
  int classes = 2;
  std::vector<double> priors;  // empty means uniform
};

struct SyntheticConfig {
  int user_count = 200;
  std::pair<int, int> playlists_per_user{3, 8};
  std::pair<int, int> songs_per_playlist{10, 30};
  int song_vocabulary_size = 20000;
  int embedding_dim = 111;
  std::vector<SyntheticAttribute> attributes;
  // Class c of attribute a shifts the attribute's designated columns by
  // signal_strength * d(a, c), with d a unit direction.
  double signal_strength = 1.0;
  // Per song slot: probability the song comes from the owner's class pool.
  double overlap_rate = 0.3;
  // Designated columns per attribute, split between modifiable and fixed ones.
  int signal_features = 8;
  // Share of the designated columns drawn from the modifiable features.
  double modifiable_signal_share = 0.5;
  // Probability that a playlist carries the signal (and songs) of a class
  // other than its owner's. Produces decoy-rich candidate pools.
  double cross_class_rate = 0.0;
  std::uint64_t seed = 0;
};

inline const std::vector<std::string>& modifiable_base_features() {
  static const std::vector<std::string> bases = {
      "acousticness",      "danceability",
      "instrumentalness",  "liveness",
      "loudness",          "popularity_art",
      "popularity_art_unique", "popularity_songs",
      "ratio_unpopulart_artists", "ratio_unpopulart_artists_unique",
      "speechiness",       "tempo",
      "valence",           "year_add"};
  return bases;
}

// The 111-column playlist layout: 14 modifiable base features x 4 statistics,
// then genre ratios, public metadata and reconstructable columns.
inline std::vector<std::string> default_feature_names() {
  std::vector<std::string> names;
  const char* stats[] = {"avg", "min", "max", "std"};
  for (const auto& base : modifiable_base_features())
    for (const char* s : stats) names.push_back(base + "_" + s);
  const char* genres[] = {"pop",     "rock",   "hip_hop",  "rap",       "metal",    "jazz",
                          "classical", "electronic", "dance", "house",    "techno",   "indie",
                          "folk",    "country", "blues",   "soul",      "rnb",      "reggae",
                          "latin",   "punk",   "alternative", "ambient", "funk",     "disco",
                          "gospel",  "kpop",   "trap",     "edm",       "soundtrack", "lofi"};
  for (const char* g : genres) names.push_back(std::string("genre_") + g + "_ratio");
  for (const char* base : {"artist_followers", "artist_followers_unique", "duration", "release_year"})
    for (const char* s : stats) names.push_back(std::string(base) + "_" + s);
  for (const char* extra : {"num_songs", "num_artists", "num_artists_unique", "num_albums", "explicit_ratio",
                            "playlist_followers", "collaborative", "description_length", "name_length"})
    names.push_back(extra);
  return names;
}

// The fifteen evaluated attributes with illustrative class counts.
inline std::vector<SyntheticAttribute> default_synthetic_attributes() {
  using C = Category;
  return {{"age", C::Demographics, 5, {}},          {"country", C::Demographics, 6, {}},
          {"economy", C::Demographics, 3, {}},      {"gender", C::Demographics, 2, {}},
          {"marital_status", C::Demographics, 3, {}}, {"occupation", C::Demographics, 4, {}},
          {"alcohol", C::Habits, 3, {}},            {"smoke", C::Habits, 2, {}},
          {"sport", C::Habits, 3, {}},              {"premium", C::Habits, 2, {}},
          {"openness", C::Personality, 3, {}},      {"conscientiousness", C::Personality, 3, {}},
          {"extraversion", C::Personality, 3, {}},  {"agreeableness", C::Personality, 3, {}},
          {"neuroticism", C::Personality, 3, {}}};
}

inline void validate(const SyntheticConfig& c) {
  auto fail = [](const std::string& m) { throw ConfigError("synthetic config: " + m); };
  if (c.user_count <= 0) fail("user_count must be positive");
  if (c.playlists_per_user.first <= 0 || c.playlists_per_user.first > c.playlists_per_user.second)
    fail("playlists_per_user must be a positive (min, max) range");
  if (c.songs_per_playlist.first <= 0 || c.songs_per_playlist.first > c.songs_per_playlist.second)
    fail("songs_per_playlist must be a positive (min, max) range");
  if (c.embedding_dim <= 1) fail("embedding_dim must be at least 2");
  if (c.attributes.empty()) fail("at least one attribute is required");
  int class_pairs = 0;
  for (const auto& a : c.attributes) {
    if (a.classes < 2) fail("attribute '" + a.name + "' needs at least two classes");
    if (!a.priors.empty()) {
      if (static_cast<int>(a.priors.size()) != a.classes) fail("attribute '" + a.name + "': prior count mismatch");
      double total = 0.0;
      for (double p : a.priors) {
        if (!(p >= 0.0)) fail("attribute '" + a.name + "': negative prior");
        total += p;
      }
      if (std::abs(total - 1.0) > 1e-9) fail("attribute '" + a.name + "': priors must sum to 1");
    }
    class_pairs += a.classes;
  }
  if (c.song_vocabulary_size < 20 * class_pairs)
    fail("song_vocabulary_size too small for the class song pools");
  if (!(c.signal_strength >= 0.0)) fail("signal_strength must be >= 0");
  if (!(c.overlap_rate >= 0.0 && c.overlap_rate <= 1.0)) fail("overlap_rate must lie in [0, 1]");
  if (!(c.cross_class_rate >= 0.0 && c.cross_class_rate <= 1.0)) fail("cross_class_rate must lie in [0, 1]");
  if (c.signal_features < 1 || c.signal_features > c.embedding_dim) fail("signal_features out of range");
  if (!(c.modifiable_signal_share >= 0.0 && c.modifiable_signal_share <= 1.0)) fail("modifiable_signal_share must lie in [0, 1]");
}

inline Dataset generate_synthetic(const SyntheticConfig& cfg) {
  validate(cfg);
  const int dim = cfg.embedding_dim;
  DatasetContent content;
  if (dim == static_cast<int>(default_feature_names().size())) {
    content.feature_names = default_feature_names();
    content.modifiable_features = modifiable_base_features();
  } else {
    // Generic layout: even columns modifiable, odd columns fixed.
    for (int f = 0; f < dim; ++f) {
      char buf[32];
      if (f % 2 == 0) {
        std::snprintf(buf, sizeof buf, "m%03d", f / 2);
        content.modifiable_features.emplace_back(buf);
        content.feature_names.emplace_back(std::string(buf) + "_avg");
      } else {
        std::snprintf(buf, sizeof buf, "u%03d", f / 2);
        content.feature_names.emplace_back(buf);
      }
    }
  }
  const std::vector<bool> mask = modifiable_mask_for(content.feature_names, content.modifiable_features);
  std::vector<int> modifiable, fixed;
  for (int f = 0; f < dim; ++f) (mask[f] ? modifiable : fixed).push_back(f);

  Rng structure(derive_seed(cfg.seed, 1));
  Rng column_rng(derive_seed(cfg.seed, 2));

  std::vector<double> offset(dim), scale(dim);
  for (int f = 0; f < dim; ++f) {
    offset[f] = column_rng.uniform(-2.0, 2.0);
    scale[f] = column_rng.uniform(0.5, 2.0);
  }

  // direction[a][c] is a dense dim-vector, nonzero on the designated columns.
  const std::size_t n_attr = cfg.attributes.size();
  std::vector<std::vector<std::vector<double>>> direction(n_attr);
  for (std::size_t a = 0; a < n_attr; ++a) {
    const auto& attr = cfg.attributes[a];
    std::vector<int> chosen;
    std::vector<int> mod_pool = modifiable, fix_pool = fixed;
    structure.shuffle(mod_pool);
    structure.shuffle(fix_pool);
    const int want_mod = std::min<int>(static_cast<int>(std::lround(cfg.signal_features * cfg.modifiable_signal_share)),
                                      static_cast<int>(mod_pool.size()));
    for (int i = 0; i < want_mod; ++i) chosen.push_back(mod_pool[i]);
    for (int i = 0; i < static_cast<int>(fix_pool.size()) && static_cast<int>(chosen.size()) < cfg.signal_features; ++i)
      chosen.push_back(fix_pool[i]);
    for (int i = want_mod; i < static_cast<int>(mod_pool.size()) && static_cast<int>(chosen.size()) < cfg.signal_features; ++i)
      chosen.push_back(mod_pool[i]);

    std::vector<std::vector<double>> raw(attr.classes, std::vector<double>(chosen.size()));
    for (auto& v : raw)
      for (auto& x : v) x = structure.normal();
    for (std::size_t j = 0; j < chosen.size(); ++j) {
      double mean = 0.0;
      for (const auto& v : raw) mean += v[j];
      mean /= attr.classes;
      for (auto& v : raw) v[j] -= mean;
    }
    direction[a].assign(attr.classes, std::vector<double>(dim, 0.0));
    for (int c = 0; c < attr.classes; ++c) {
      double norm = 0.0;
      for (double x : raw[c]) norm += x * x;
      norm = std::sqrt(norm);
      for (std::size_t j = 0; j < chosen.size(); ++j)
        direction[a][c][chosen[j]] = norm > 0.0 ? raw[c][j] / norm : 0.0;
    }
  }

  // Song pools: the first tenth of the vocabulary is split into one pool per
  // (attribute, class); the rest is a long tail shared by everyone.
  int class_pairs = 0;
  std::vector<int> pool_base(n_attr);
  for (std::size_t a = 0; a < n_attr; ++a) {
    pool_base[a] = class_pairs;
    class_pairs += cfg.attributes[a].classes;
  }
  const int pooled_region = std::max(1, cfg.song_vocabulary_size / 10);
  const int pool_size = std::max(1, pooled_region / class_pairs);
  const int generic_begin = pooled_region;
  const int generic_size = cfg.song_vocabulary_size - pooled_region;

  for (std::size_t a = 0; a < n_attr; ++a) {
    const auto& sa = cfg.attributes[a];
    AttributeSchema schema;
    schema.name = sa.name;
    schema.category = sa.category;
    for (int c = 0; c < sa.classes; ++c) schema.class_names.push_back("class_" + std::to_string(c));
    content.attributes.push_back(std::move(schema));
  }

  auto song_name = [](int s) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "s%06d", s);
    return std::string(buf);
  };

  for (int u = 0; u < cfg.user_count; ++u) {
    Rng rng(derive_seed(cfg.seed, 3, static_cast<std::uint64_t>(u)));
    User user;
    char buf[32];
    std::snprintf(buf, sizeof buf, "u%04d", u);
    user.id = buf;
    std::vector<int> cls(n_attr);
    for (std::size_t a = 0; a < n_attr; ++a) {
      const auto& sa = cfg.attributes[a];
      std::vector<double> priors = sa.priors.empty() ? std::vector<double>(sa.classes, 1.0 / sa.classes) : sa.priors;
      cls[a] = static_cast<int>(rng.categorical(priors));
      user.labels[sa.name] = cls[a];
    }
    const int n_pl = rng.integer(cfg.playlists_per_user.first, cfg.playlists_per_user.second);
    for (int i = 0; i < n_pl; ++i) {
      Playlist p;
      std::snprintf(buf, sizeof buf, "%s_p%02d", user.id.c_str(), i);
      p.id = buf;
      p.owner = user.id;
      std::vector<int> point = cls;
      if (cfg.cross_class_rate > 0.0 && rng.bernoulli(cfg.cross_class_rate)) {
        for (std::size_t a = 0; a < n_attr; ++a) {
          const int k = cfg.attributes[a].classes;
          point[a] = (cls[a] + 1 + static_cast<int>(rng.index(static_cast<std::size_t>(k - 1)))) % k;
        }
      }
      p.embedding.assign(dim, 0.0);
      for (int f = 0; f < dim; ++f) {
        double z = rng.normal();
        for (std::size_t a = 0; a < n_attr; ++a) z += cfg.signal_strength * direction[a][point[a]][f];
        p.embedding[f] = offset[f] + scale[f] * z;
      }
      const int n_songs = rng.integer(cfg.songs_per_playlist.first, cfg.songs_per_playlist.second);
      for (int s = 0; s < n_songs; ++s) {
        int song;
        if (rng.bernoulli(cfg.overlap_rate)) {
          const std::size_t a = rng.index(n_attr);
          const int pool = pool_base[a] + point[a];
          song = pool * pool_size + static_cast<int>(rng.index(static_cast<std::size_t>(pool_size)));
        } else {
          song = generic_begin + static_cast<int>(rng.index(static_cast<std::size_t>(generic_size)));
        }
        p.song_ids.push_back(song_name(song));
      }
      user.playlist_ids.push_back(p.id);
      content.playlists.push_back(std::move(p));
    }
    content.users.push_back(std::move(user));
  }
  return Dataset(std::move(content));
}

}  // namespace plinf
