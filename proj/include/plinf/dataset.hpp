#pragma once

// Users, playlists, embeddings and attribute labels; JSON loading and writing.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "plinf/error.hpp"

namespace plinf {

enum class Category { Demographics, Habits, Personality };

inline std::string to_string(Category c) {
  switch (c) {
    case Category::Demographics: return "demographics";
    case Category::Habits: return "habits";
    case Category::Personality: return "personality";
  }
  return "demographics";
}

inline Category category_from_string(std::string_view s) {
  if (s == "demographics") return Category::Demographics;
  if (s == "habits") return Category::Habits;
  if (s == "personality") return Category::Personality;
  throw DataError("unknown attribute category '" + std::string(s) + "'");
}

struct AttributeSchema {
  std::string name;
  Category category = Category::Demographics;
  std::vector<std::string> class_names;

  int class_count() const { return static_cast<int>(class_names.size()); }
};

struct Playlist {
  std::string id;
  std::string owner;
  std::vector<std::string> song_ids;  // sorted, unique
  std::vector<double> embedding;
};

struct User {
  std::string id;
  std::vector<std::string> playlist_ids;
  std::map<std::string, int> labels;  // attribute name -> class index
};

struct FeatureStats {
  std::vector<double> mean;
  std::vector<double> std;  // population std
  std::vector<double> min;
  std::vector<double> max;

  std::size_t size() const { return mean.size(); }
};

// Everything a dataset file carries. Dataset validates it on construction.
struct DatasetContent {
  std::vector<std::string> feature_names;
  std::vector<std::string> modifiable_features;  // base feature names
  std::vector<AttributeSchema> attributes;
  std::vector<User> users;
  std::vector<Playlist> playlists;  // in file order: users in order, each user's playlists in order
};

// Population statistics over the columns of `rows`; throws on an empty set.
template <typename RowRange>
FeatureStats feature_stats_of(const RowRange& rows, std::size_t dim) {
  if (std::empty(rows)) throw DataError("feature statistics need at least one playlist");
  FeatureStats s;
  s.mean.assign(dim, 0.0);
  s.std.assign(dim, 0.0);
  s.min.assign(dim, INFINITY);
  s.max.assign(dim, -INFINITY);
  double n = 0.0;
  for (const auto& row : rows) {
    n += 1.0;
    for (std::size_t f = 0; f < dim; ++f) {
      const double v = row[f];
      s.mean[f] += v;
      s.min[f] = std::min(s.min[f], v);
      s.max[f] = std::max(s.max[f], v);
    }
  }
  for (auto& m : s.mean) m /= n;
  for (const auto& row : rows) {
    for (std::size_t f = 0; f < dim; ++f) {
      const double d = row[f] - s.mean[f];
      s.std[f] += d * d;
    }
  }
  for (auto& v : s.std) v = std::sqrt(v / n);
  return s;
}

inline std::string normalize_feature_name(std::string_view name) {
  std::string out;
  out.reserve(name.size());
  for (char c : name) {
    if (c == ' ' || c == '-') {
      out.push_back('_');
    } else {
      out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
  }
  return out;
}

// A column derives from a base feature when it is the base itself or the base
// followed by one summary-statistic suffix.
inline bool column_derives_from(std::string_view column, std::string_view base) {
  static constexpr std::string_view kStats[] = {"avg", "mean", "min", "max", "std", "ratio", "median"};
  const std::string col = normalize_feature_name(column);
  const std::string b = normalize_feature_name(base);
  if (col == b) return true;
  if (col.size() <= b.size() + 1 || col.compare(0, b.size(), b) != 0 || col[b.size()] != '_') return false;
  const std::string_view suffix = std::string_view(col).substr(b.size() + 1);
  return std::find(std::begin(kStats), std::end(kStats), suffix) != std::end(kStats);
}

inline std::vector<bool> modifiable_mask_for(const std::vector<std::string>& feature_names,
                                             const std::vector<std::string>& modifiable_features) {
  std::vector<bool> mask(feature_names.size(), false);
  for (const auto& base : modifiable_features) {
    bool matched = false;
    for (std::size_t f = 0; f < feature_names.size(); ++f) {
      if (column_derives_from(feature_names[f], base)) {
        mask[f] = true;
        matched = true;
      }
    }
    if (!matched) throw DataError("modifiable feature '" + base + "' matches no embedding column");
  }
  return mask;
}

/// Validated, immutable dataset. All lookups are by dense index; string ids
/// resolve through the index maps.
class Dataset {
 public:
  Dataset() = default;

  explicit Dataset(DatasetContent content) : content_(std::move(content)) {
    validate_and_index();
  }

  const DatasetContent& content() const { return content_; }
  std::size_t dim() const { return content_.feature_names.size(); }
  const std::vector<std::string>& feature_names() const { return content_.feature_names; }
  const std::vector<AttributeSchema>& attributes() const { return content_.attributes; }
  const std::vector<User>& users() const { return content_.users; }
  const std::vector<Playlist>& playlists() const { return content_.playlists; }
  const FeatureStats& feature_stats() const { return stats_; }
  const std::vector<bool>& modifiable_mask() const { return modifiable_mask_; }

  const User& user(std::size_t u) const { return content_.users[u]; }
  const Playlist& playlist(std::size_t p) const { return content_.playlists[p]; }

  std::size_t user_index(std::string_view id) const {
    auto it = user_index_.find(std::string(id));
    if (it == user_index_.end()) throw DataError("unknown user '" + std::string(id) + "'");
    return it->second;
  }

  std::size_t playlist_index(std::string_view id) const {
    auto it = playlist_index_.find(std::string(id));
    if (it == playlist_index_.end()) throw DataError("unknown playlist '" + std::string(id) + "'");
    return it->second;
  }

  bool has_playlist(std::string_view id) const { return playlist_index_.count(std::string(id)) != 0; }

  // Playlist indices of user u, in the user's listed order.
  const std::vector<std::size_t>& playlists_of(std::size_t u) const { return user_playlists_[u]; }

  std::size_t user_of_playlist(std::size_t p) const { return playlist_owner_[p]; }

  const AttributeSchema& attribute(std::string_view name) const {
    for (const auto& a : content_.attributes)
      if (a.name == name) return a;
    throw ConfigError("unknown attribute '" + std::string(name) + "'");
  }

  std::optional<int> label(std::size_t u, std::string_view attribute) const {
    const auto& labels = content_.users[u].labels;
    auto it = labels.find(std::string(attribute));
    if (it == labels.end()) return std::nullopt;
    return it->second;
  }

  // Users carrying a label for `attribute`, in dataset order.
  std::vector<std::size_t> labeled_users(std::string_view attribute) const {
    std::vector<std::size_t> out;
    for (std::size_t u = 0; u < content_.users.size(); ++u)
      if (label(u, attribute)) out.push_back(u);
    return out;
  }

  std::vector<std::size_t> modifiable_columns() const {
    std::vector<std::size_t> cols;
    for (std::size_t f = 0; f < modifiable_mask_.size(); ++f)
      if (modifiable_mask_[f]) cols.push_back(f);
    return cols;
  }

 private:
  void validate_and_index();

  DatasetContent content_;
  FeatureStats stats_;
  std::vector<bool> modifiable_mask_;
  std::unordered_map<std::string, std::size_t> user_index_;
  std::unordered_map<std::string, std::size_t> playlist_index_;
  std::vector<std::vector<std::size_t>> user_playlists_;
  std::vector<std::size_t> playlist_owner_;
};

inline FeatureStats compute_feature_stats(const Dataset& dataset) {
  std::vector<std::span<const double>> rows;
  rows.reserve(dataset.playlists().size());
  for (const auto& p : dataset.playlists()) rows.emplace_back(p.embedding);
  return feature_stats_of(rows, dataset.dim());
}

inline void Dataset::validate_and_index() {
  auto& c = content_;
  const std::size_t dim = c.feature_names.size();
  if (dim == 0) throw DataError("dataset declares no features");
  {
    std::vector<std::string> sorted = c.feature_names;
    std::sort(sorted.begin(), sorted.end());
    auto dup = std::adjacent_find(sorted.begin(), sorted.end());
    if (dup != sorted.end()) throw DataError("duplicate feature name '" + *dup + "'");
  }
  for (const auto& a : c.attributes) {
    if (a.class_names.size() < 2)
      throw DataError("attribute '" + a.name + "' needs at least two classes");
    std::vector<std::string> sorted = a.class_names;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
      throw DataError("attribute '" + a.name + "' has duplicate class names");
  }
  modifiable_mask_ = modifiable_mask_for(c.feature_names, c.modifiable_features);

  playlist_owner_.assign(c.playlists.size(), 0);
  for (std::size_t p = 0; p < c.playlists.size(); ++p) {
    auto& pl = c.playlists[p];
    if (!playlist_index_.emplace(pl.id, p).second)
      throw DataError("duplicate playlist id '" + pl.id + "'");
    if (pl.embedding.size() != dim) {
      throw DataError("user '" + pl.owner + "' playlist '" + pl.id + "': embedding has " +
                      std::to_string(pl.embedding.size()) + " entries, expected " + std::to_string(dim));
    }
    for (std::size_t f = 0; f < dim; ++f) {
      if (!std::isfinite(pl.embedding[f])) {
        throw DataError("user '" + pl.owner + "' playlist '" + pl.id + "' feature '" + c.feature_names[f] +
                        "': non-finite value");
      }
    }
    std::sort(pl.song_ids.begin(), pl.song_ids.end());
    pl.song_ids.erase(std::unique(pl.song_ids.begin(), pl.song_ids.end()), pl.song_ids.end());
  }

  user_playlists_.assign(c.users.size(), {});
  for (std::size_t u = 0; u < c.users.size(); ++u) {
    const auto& user = c.users[u];
    if (!user_index_.emplace(user.id, u).second) throw DataError("duplicate user id '" + user.id + "'");
    if (user.playlist_ids.empty()) throw DataError("user '" + user.id + "' has no playlists");
    for (const auto& pid : user.playlist_ids) {
      auto it = playlist_index_.find(pid);
      if (it == playlist_index_.end())
        throw DataError("user '" + user.id + "': dangling playlist reference '" + pid + "'");
      if (c.playlists[it->second].owner != user.id)
        throw DataError("user '" + user.id + "': playlist '" + pid + "' is owned by '" +
                        c.playlists[it->second].owner + "'");
      user_playlists_[u].push_back(it->second);
      playlist_owner_[it->second] = u;
    }
    for (const auto& [attr, cls] : user.labels) {
      const AttributeSchema* schema = nullptr;
      for (const auto& a : c.attributes)
        if (a.name == attr) schema = &a;
      if (!schema) throw DataError("user '" + user.id + "': label for unknown attribute '" + attr + "'");
      if (cls < 0 || cls >= schema->class_count())
        throw DataError("user '" + user.id + "' attribute '" + attr + "': unknown class index " +
                        std::to_string(cls));
    }
  }
  for (const auto& pl : c.playlists) {
    if (!user_index_.count(pl.owner))
      throw DataError("playlist '" + pl.id + "' owned by unknown user '" + pl.owner + "'");
  }
  for (std::size_t p = 0; p < c.playlists.size(); ++p) {
    const auto& owner = c.users[user_index_.at(c.playlists[p].owner)];
    if (std::find(owner.playlist_ids.begin(), owner.playlist_ids.end(), c.playlists[p].id) ==
        owner.playlist_ids.end())
      throw DataError("playlist '" + c.playlists[p].id + "' is not listed by its owner");
  }
  if (!c.playlists.empty()) {
    std::vector<std::span<const double>> rows;
    rows.reserve(c.playlists.size());
    for (const auto& p : c.playlists) rows.emplace_back(p.embedding);
    stats_ = feature_stats_of(rows, dim);
  }
}

// ---------------------------------------------------------------------------
// File format

inline nlohmann::json dataset_to_json(const Dataset& ds) {
  using nlohmann::json;
  const auto& c = ds.content();
  json j;
  j["feature_names"] = c.feature_names;
  j["modifiable_features"] = c.modifiable_features;
  json attrs = json::array();
  for (const auto& a : c.attributes)
    attrs.push_back({{"name", a.name}, {"category", to_string(a.category)}, {"classes", a.class_names}});
  j["attributes"] = std::move(attrs);
  json users = json::array();
  for (std::size_t u = 0; u < c.users.size(); ++u) {
    const auto& user = c.users[u];
    json labels = json::object();
    for (const auto& [k, v] : user.labels) labels[k] = v;
    json pls = json::array();
    for (std::size_t p : ds.playlists_of(u)) {
      const auto& pl = c.playlists[p];
      pls.push_back({{"id", pl.id}, {"songs", pl.song_ids}, {"embedding", pl.embedding}});
    }
    users.push_back({{"id", user.id}, {"labels", std::move(labels)}, {"playlists", std::move(pls)}});
  }
  j["users"] = std::move(users);
  return j;
}

inline Dataset dataset_from_json(const nlohmann::json& j) {
  DatasetContent c;
  auto where = [](const std::string& ctx, const std::exception& e) {
    return DataError("malformed dataset at " + ctx + ": " + e.what());
  };
  try {
    c.feature_names = j.at("feature_names").get<std::vector<std::string>>();
    if (j.contains("modifiable_features"))
      c.modifiable_features = j.at("modifiable_features").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw where("header", e);
  }
  const std::size_t dim = c.feature_names.size();
  if (j.contains("attributes")) {
    std::size_t i = 0;
    for (const auto& a : j.at("attributes")) {
      try {
        AttributeSchema s;
        s.name = a.at("name").get<std::string>();
        s.category = category_from_string(a.value("category", std::string("demographics")));
        s.class_names = a.at("classes").get<std::vector<std::string>>();
        c.attributes.push_back(std::move(s));
      } catch (const nlohmann::json::exception& e) {
        throw where("attributes[" + std::to_string(i) + "]", e);
      }
      ++i;
    }
  }
  if (!j.contains("users") || !j.at("users").is_array()) throw DataError("malformed dataset: missing 'users' array");
  std::size_t ui = 0;
  for (const auto& ju : j.at("users")) {
    User user;
    std::string ctx = "users[" + std::to_string(ui) + "]";
    try {
      user.id = ju.at("id").get<std::string>();
      ctx = "user '" + user.id + "'";
      if (ju.contains("labels"))
        for (const auto& [k, v] : ju.at("labels").items()) user.labels[k] = v.get<int>();
      for (const auto& jp : ju.at("playlists")) {
        Playlist p;
        p.id = jp.at("id").get<std::string>();
        p.owner = user.id;
        if (jp.contains("songs")) {
          for (const auto& s : jp.at("songs")) {
            p.song_ids.push_back(s.is_string() ? s.get<std::string>() : s.dump());
          }
        }
        const auto& emb = jp.at("embedding");
        if (!emb.is_array())
          throw DataError(ctx + " playlist '" + p.id + "': embedding is not an array");
        if (emb.size() != dim) {
          throw DataError(ctx + " playlist '" + p.id + "': embedding has " + std::to_string(emb.size()) +
                          " entries, expected " + std::to_string(dim));
        }
        p.embedding.reserve(dim);
        for (std::size_t f = 0; f < dim; ++f) {
          if (!emb[f].is_number())
            throw DataError(ctx + " playlist '" + p.id + "' feature '" + c.feature_names[f] + "': not a number");
          p.embedding.push_back(emb[f].get<double>());
        }
        user.playlist_ids.push_back(p.id);
        c.playlists.push_back(std::move(p));
      }
    } catch (const nlohmann::json::exception& e) {
      throw where(ctx, e);
    }
    c.users.push_back(std::move(user));
    ++ui;
  }
  return Dataset(std::move(c));
}

inline Dataset load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open dataset file '" + path + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed dataset file '" + path + "': " + e.what());
  }
  return dataset_from_json(j);
}

inline void write_dataset(const Dataset& ds, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw RuntimeFailure("cannot write dataset file '" + path + "'");
  out << dataset_to_json(ds).dump(1) << '\n';
}

}  // namespace plinf
