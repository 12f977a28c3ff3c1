#pragma once

// Small fixtures shared by the test binaries.

#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "plinf/plinf.hpp"

namespace plinf::test {

// One user per entry of `playlists_per_user`; playlist p of user u gets
// `songs[global index]` when provided. Features are named f0..f{dim-1}, the
// even ones modifiable (base names m0, m2, ...).
struct TinySpec {
  int dim = 4;
  std::vector<int> playlists_per_user{2, 2};
  std::vector<std::vector<std::string>> songs;  // per global playlist index, optional
  int classes = 2;
};

inline DatasetContent tiny_content(const TinySpec& s, Rng& rng) {
  DatasetContent c;
  for (int f = 0; f < s.dim; ++f) {
    c.feature_names.push_back(f % 2 == 0 ? "m" + std::to_string(f) + "_avg" : "fixed" + std::to_string(f));
    if (f % 2 == 0) c.modifiable_features.push_back("m" + std::to_string(f));
  }
  AttributeSchema a{"target", Category::Demographics, {}};
  for (int k = 0; k < s.classes; ++k) a.class_names.push_back("c" + std::to_string(k));
  c.attributes.push_back(a);
  std::size_t global = 0;
  for (std::size_t u = 0; u < s.playlists_per_user.size(); ++u) {
    User user;
    user.id = "user" + std::to_string(u);
    user.labels["target"] = static_cast<int>(u % static_cast<std::size_t>(s.classes));
    for (int i = 0; i < s.playlists_per_user[u]; ++i, ++global) {
      Playlist p;
      p.id = user.id + "_pl" + std::to_string(i);
      p.owner = user.id;
      if (global < s.songs.size()) p.song_ids = s.songs[global];
      for (int f = 0; f < s.dim; ++f) p.embedding.push_back(rng.normal());
      user.playlist_ids.push_back(p.id);
      c.playlists.push_back(std::move(p));
    }
    c.users.push_back(std::move(user));
  }
  return c;
}

inline Dataset tiny_dataset(const TinySpec& s, std::uint64_t seed = 1) {
  Rng rng(seed);
  return Dataset(tiny_content(s, rng));
}

// Random song sets over a small vocabulary so overlaps are common.
inline Dataset random_song_dataset(Rng& rng, int users, int max_playlists, int vocab, int dim = 3) {
  TinySpec s;
  s.dim = dim;
  s.playlists_per_user.clear();
  for (int u = 0; u < users; ++u) s.playlists_per_user.push_back(rng.integer(1, max_playlists));
  int total = 0;
  for (int n : s.playlists_per_user) total += n;
  for (int p = 0; p < total; ++p) {
    std::vector<std::string> songs;
    const int n = rng.integer(0, 6);
    for (int i = 0; i < n; ++i) songs.push_back("s" + std::to_string(rng.integer(0, vocab - 1)));
    s.songs.push_back(songs);
  }
  return Dataset(tiny_content(s, rng));
}

// Replaces empty song lists so build_graph accepts the dataset.
inline Dataset with_songs(const Dataset& ds, const std::string& filler = "filler") {
  DatasetContent c = ds.content();
  for (auto& p : c.playlists)
    if (p.song_ids.empty()) p.song_ids = {filler};
  return Dataset(std::move(c));
}

// An untrained set or graph model with random weights. Batch-norm affine
// parameters and running statistics are randomized too so eval mode is not
// the identity.
inline TrainedModel random_set_model(ModelKind kind, Hyperparams hp, int dim, int classes, Rng& rng) {
  TrainedModel m;
  m.spec = {kind, hp};
  m.attribute = "target";
  for (int k = 0; k < classes; ++k) m.class_names.push_back("c" + std::to_string(k));
  SetModel s;
  s.arch = make_architecture(m.spec, dim, classes);
  s.params = init_set_params(s.arch, rng);
  for (auto* mlp : {&s.params.encoder, &s.params.phi, &s.params.rho})
    for (auto& n : mlp->norm)
      if (n) {
        for (Index i = 0; i < n->gamma.size(); ++i) {
          n->gamma[i] = rng.uniform(0.5, 1.5);
          n->beta[i] = rng.normal(0.0, 0.2);
          n->running_mean[i] = rng.normal(0.0, 0.3);
          n->running_var[i] = rng.uniform(0.5, 2.0);
        }
      }
  s.scaler.mean.resize(dim);
  s.scaler.scale.resize(dim);
  for (int f = 0; f < dim; ++f) {
    s.scaler.mean[f] = rng.normal(0.0, 0.5);
    s.scaler.scale[f] = rng.uniform(0.5, 2.0);
  }
  s.graph = is_graph_model(kind);
  s.depth = s.graph ? hp.depth : 0;
  m.net = std::move(s);
  return m;
}

// FitData with every labelled user for training (user order, node i =
// playlist i) and no validation users.
inline FitData all_users_fit_data(const Dataset& ds, const PlaylistGraph& g, const Propagator* prop,
                                  const std::string& attr = "target") {
  FitData d;
  d.graph = &g;
  d.propagator = prop;
  d.classes = static_cast<int>(ds.attribute(attr).class_names.size());
  std::vector<int> counts(static_cast<std::size_t>(d.classes), 0);
  for (std::size_t u = 0; u < ds.users().size(); ++u) {
    const auto it = ds.user(u).labels.find(attr);
    if (it == ds.user(u).labels.end()) continue;
    std::vector<NodeId> n;
    for (std::size_t p : ds.playlists_of(u)) n.push_back(static_cast<NodeId>(p));
    d.sample_users.push_back(d.train_users.size());
    d.train_users.push_back(n);
    d.train_labels.push_back(it->second);
    ++counts[static_cast<std::size_t>(it->second)];
  }
  const double total = static_cast<double>(d.train_users.size());
  for (int c : counts) {
    d.priors.push_back(c / total);
    d.class_weights.push_back(c > 0 ? total / (d.classes * c) : 0.0);
  }
  return d;
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("plinf_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

// |a - n| / max(|a|, |n|, 1e-6)
inline double relative_error(double a, double n) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-6});
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return INFINITY;
  return (a - b).cwiseAbs().maxCoeff();
}

// Node lists of every user of ds in the graph built from ds (node i = playlist i).
inline std::vector<std::vector<NodeId>> all_user_nodes(const Dataset& ds) {
  std::vector<std::vector<NodeId>> out;
  for (std::size_t u = 0; u < ds.users().size(); ++u) {
    std::vector<NodeId> n;
    for (std::size_t p : ds.playlists_of(u)) n.push_back(static_cast<NodeId>(p));
    out.push_back(n);
  }
  return out;
}

}  // namespace plinf::test
