#include <gtest/gtest.h>

#include <numeric>

#include "support.hpp"

namespace plinf {
namespace {

// Treats each input row as its own probability vector.
class EchoClassifier final : public PlaylistClassifier {
 public:
  ModelKind kind() const override { return ModelKind::Random; }
  int classes() const override { return 2; }
  Matrix predict_proba(const Matrix& rows) const override { return rows; }
  nlohmann::json to_json() const override { return {}; }
};

Hyperparams small_hp() {
  Hyperparams hp;
  hp.hidden = 6;
  hp.mlp_layers = 2;
  hp.phi_layers = 2;
  hp.rho_layers = 2;
  hp.depth = 2;
  hp.activation = nn::Activation::LeakyReLU;
  return hp;
}

constexpr ModelKind kSetKinds[] = {ModelKind::MLPPooling, ModelKind::MLPDeepSet, ModelKind::GNNPooling,
                                   ModelKind::GNNDeepSet};

TEST(SamplePredict, AveragesProbabilities) {
  EchoClassifier clf;
  Matrix rows(2, 2);
  rows << 0.2, 0.8, 0.6, 0.4;
  const auto p = sample_predict_user(clf, rows);
  EXPECT_NEAR(std::exp(p.log_probs[0]), 0.4, 1e-15);
  EXPECT_NEAR(std::exp(p.log_probs[1]), 0.6, 1e-15);
  EXPECT_EQ(p.predicted, 1);

  Matrix tie(1, 2);
  tie << 0.5, 0.5;
  EXPECT_EQ(sample_predict_user(clf, tie).predicted, 0);
  EXPECT_THROW(sample_predict_user(clf, Matrix(0, 2)), DataError);
}

TEST(Baselines, KnnOneNeighborRecallsTrainingRow) {
  Rng rng(1);
  Matrix x(6, 3);
  for (Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
  const std::vector<int> y = {0, 1, 0, 1, 1, 0};
  ModelSpec spec{ModelKind::KNN, {}};
  spec.hp.neighbors = 1;
  const std::vector<double> priors = {0.5, 0.5};
  const auto clf = fit_baseline(spec, x, y, 2, priors, rng);
  const Matrix p = clf->predict_proba(x);
  for (Index i = 0; i < 6; ++i) EXPECT_EQ(p(i, y[static_cast<std::size_t>(i)]), 1.0);
}

TEST(Baselines, LinearSeparatesMarginData) {
  Rng rng(2);
  Matrix x(40, 2);
  std::vector<int> y;
  for (Index i = 0; i < 40; ++i) {
    const int c = static_cast<int>(i % 2);
    x(i, 0) = (c == 1 ? 1.0 : -1.0) * rng.uniform(1.0, 3.0);
    x(i, 1) = rng.normal();
    y.push_back(c);
  }
  const auto clf = fit_linear(x, y, 2, 1.0);
  const Matrix p = clf->predict_proba(x);
  for (Index i = 0; i < 40; ++i) {
    const int pred = p(i, 1) > p(i, 0) ? 1 : 0;
    EXPECT_EQ(pred, y[static_cast<std::size_t>(i)]);
  }
}

TEST(Baselines, AbsentClassIsRejected) {
  Rng rng(3);
  Matrix x = Matrix::Zero(3, 2);
  const std::vector<int> y = {0, 0, 0};
  const std::vector<double> priors = {1.0, 0.0};
  for (ModelKind k : {ModelKind::Random, ModelKind::Linear, ModelKind::KNN, ModelKind::SampleMLP})
    EXPECT_THROW(fit_baseline({k, {}}, x, y, 2, priors, rng), DataError) << to_string(k);
}

// Identity encoder, phi and rho (one linear layer each, no BN, no bias).
SetArchitecture identity_deepset(int dim) {
  SetArchitecture a;
  a.deepset = true;
  a.classes = dim;
  a.encoder = {{dim, dim}, nn::Activation::Identity, {}, 0.0, true};
  a.phi = a.encoder;
  a.rho = a.encoder;
  return a;
}

SetParams identity_params(const SetArchitecture& a) {
  Rng rng(0);
  SetParams p = init_set_params(a, rng);
  for (auto* m : {&p.encoder, &p.phi, &p.rho}) {
    m->linear[0].weight = Matrix::Identity(a.latent(), a.latent());
    m->linear[0].bias.setZero();
  }
  p.readout.weight = Matrix::Identity(a.classes, a.pooled_dim());
  p.readout.bias.setZero();
  return p;
}

TEST(SetForward, DeepSetIdentitySumsRows) {
  const auto a = identity_deepset(2);
  const auto p = identity_params(a);
  SetBatch b;
  b.rows.resize(2, 2);
  b.rows << 1, 2, 3, 4;
  b.offsets.push_back(2);
  SetTape tape;
  set_forward(a, p, b, nn::Mode::Eval, nullptr, &tape);
  EXPECT_EQ(tape.pooled(0, 0), 4.0);
  EXPECT_EQ(tape.pooled(0, 1), 6.0);
}

TEST(SetForward, DeepSetHomogeneity) {
  Rng rng(4);
  auto a = identity_deepset(3);
  a.phi.layer_dims = {3, 5};
  a.rho.layer_dims = {5, 4};
  a.classes = 2;
  SetParams p = init_set_params(a, rng);
  for (auto* m : {&p.encoder, &p.phi, &p.rho}) m->linear[0].bias.setZero();
  SetBatch b;
  b.rows.resize(3, 3);
  for (Index i = 0; i < b.rows.size(); ++i) b.rows.data()[i] = rng.normal();
  b.offsets.push_back(3);
  SetTape t1, t2;
  set_forward(a, p, b, nn::Mode::Eval, nullptr, &t1);
  b.rows *= 2.0;
  set_forward(a, p, b, nn::Mode::Eval, nullptr, &t2);
  EXPECT_LT(test::max_abs_diff(t2.pooled, 2.0 * t1.pooled), 1e-12);
}

TEST(SetForward, SingletonPoolingRepeatsRow) {
  Rng rng(5);
  SetArchitecture a;
  a.classes = 2;
  a.encoder = {{3, 4}, nn::Activation::LeakyReLU, {}, 0.0, true};
  const SetParams p = init_set_params(a, rng);
  SetBatch b;
  b.rows.resize(1, 3);
  b.rows << 0.3, -1.0, 2.0;
  b.offsets.push_back(1);
  SetTape tape;
  set_forward(a, p, b, nn::Mode::Eval, nullptr, &tape);
  const Matrix h = nn::mlp_forward(a.encoder, p.encoder, b.rows, nn::Mode::Eval, nullptr);
  for (int seg = 0; seg < 3; ++seg)
    for (Index j = 0; j < 4; ++j) EXPECT_EQ(tape.pooled(0, seg * 4 + j), h(0, j));
}

TEST(SetForward, EmptyUserIsRejected) {
  Rng rng(6);
  const auto a = identity_deepset(2);
  const auto p = identity_params(a);
  SetBatch b;
  b.rows.resize(1, 2);
  b.offsets = {0, 1, 1};
  EXPECT_THROW(set_forward(a, p, b, nn::Mode::Eval, nullptr), DataError);
}

struct ModelFixture {
  Dataset ds;
  PlaylistGraph g;
  Propagator s;
};

ModelFixture fixture(std::uint64_t seed, int users = 6, int dim = 5) {
  Rng rng(seed);
  ModelFixture f{test::with_songs(test::random_song_dataset(rng, users, 4, 12, dim)), {}, {}};
  f.g = build_graph(f.ds, 0);
  f.s = normalize(f.g);
  return f;
}

TEST(Models, PermutationInvariance) {
  for (ModelKind kind : kSetKinds) {
    const auto f = fixture(7);
    Rng rng(8);
    const auto m = test::random_set_model(kind, small_hp(), static_cast<int>(f.ds.dim()), 2, rng);
    auto users = test::all_user_nodes(f.ds);
    const Matrix base = m.predict(f.g, users, &f.s);
    for (int trial = 0; trial < 10; ++trial) {
      for (auto& u : users) rng.shuffle(u);
      EXPECT_LT(test::max_abs_diff(m.predict(f.g, users, &f.s), base), 1e-9) << to_string(kind);
    }
  }
}

TEST(Models, GraphRenumberingInvariance) {
  for (ModelKind kind : {ModelKind::GNNPooling, ModelKind::GNNDeepSet}) {
    const auto f = fixture(9);
    Rng rng(10);
    const auto m = test::random_set_model(kind, small_hp(), static_cast<int>(f.ds.dim()), 2, rng);
    const Matrix base = m.predict(f.g, test::all_user_nodes(f.ds), &f.s);
    DatasetContent c = f.ds.content();
    rng.shuffle(c.playlists);
    const Dataset shuffled(std::move(c));
    const auto g2 = build_graph(shuffled, 0);
    EXPECT_LT(test::max_abs_diff(m.predict(g2, test::all_user_nodes(shuffled)), base), 1e-9) << to_string(kind);
  }
}

TEST(Models, CrossUserIsolationForSetKinds) {
  for (ModelKind kind : {ModelKind::MLPPooling, ModelKind::MLPDeepSet}) {
    auto f = fixture(11);
    Rng rng(12);
    const auto m = test::random_set_model(kind, small_hp(), static_cast<int>(f.ds.dim()), 2, rng);
    const auto users = test::all_user_nodes(f.ds);
    const Matrix base = m.predict(f.g, users);
    for (NodeId v : users[1]) f.g.features.row(v).setConstant(100.0);
    const Matrix after = m.predict(f.g, users);
    EXPECT_EQ(after.row(0), base.row(0)) << to_string(kind);
    EXPECT_NE(after.row(1), base.row(1)) << to_string(kind);
  }
}

TEST(Models, GraphInfluenceIsLocal) {
  // A path of playlists: pl i shares song i with pl i+1.
  test::TinySpec spec;
  spec.dim = 4;
  spec.playlists_per_user = {1, 6};
  for (int i = 0; i < 7; ++i) spec.songs.push_back({"s" + std::to_string(i), "s" + std::to_string(i + 1)});
  const auto ds = test::tiny_dataset(spec);
  const auto g = build_graph(ds, 0);
  ASSERT_EQ(g.edge_count(), 6u);
  for (ModelKind kind : {ModelKind::GNNPooling, ModelKind::GNNDeepSet}) {
    for (int depth = 0; depth <= 3; ++depth) {
      auto hp = small_hp();
      hp.depth = depth;
      Rng rng(13 + depth);
      const auto m = test::random_set_model(kind, hp, 4, 2, rng);
      const std::vector<NodeId> user_a = {0};
      const RowVector base = m.user_log_probs(g, user_a);
      auto far = g;
      far.features.row(depth + 1).setConstant(50.0);
      EXPECT_EQ(m.user_log_probs(far, user_a), base) << to_string(kind) << " depth " << depth;
      EXPECT_EQ(m.predict(far, {user_a}).row(0), m.predict(g, {user_a}).row(0));
      auto near = g;
      near.features.row(depth).setConstant(50.0);
      if (depth > 0) {
        EXPECT_NE(m.user_log_probs(near, user_a), base);
      }
    }
  }
}

TEST(Models, UserLogProbsAgreeWithPredict) {
  for (ModelKind kind : kSetKinds) {
    const auto f = fixture(14);
    Rng rng(15);
    const auto m = test::random_set_model(kind, small_hp(), static_cast<int>(f.ds.dim()), 2, rng);
    const auto users = test::all_user_nodes(f.ds);
    const Matrix all = m.predict(f.g, users, &f.s);
    for (std::size_t u = 0; u < users.size(); ++u)
      EXPECT_LT((m.user_log_probs(f.g, users[u]) - all.row(static_cast<Index>(u))).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Models, VirtualNodeMatchesMaterializedDuplicate) {
  for (ModelKind kind : kSetKinds) {
    const auto f = fixture(16);
    Rng rng(17);
    const auto m = test::random_set_model(kind, small_hp(), static_cast<int>(f.ds.dim()), 2, rng);
    auto users = test::all_user_nodes(f.ds);
    const NodeId source = users[1][0];
    std::vector<double> emb(f.ds.dim());
    for (auto& e : emb) e = rng.normal();
    const VirtualNode v{source, emb};
    const RowVector virt = m.user_log_probs(f.g, users[0], &v);
    const auto [h, id] = duplicate_node(f.g, source, "dup", f.ds.user(0).id, emb);
    auto nodes = users[0];
    nodes.push_back(id);
    EXPECT_LT((m.predict(h, {nodes}).row(0) - virt).cwiseAbs().maxCoeff(), 1e-12) << to_string(kind);
  }
}

TEST(Models, SgcDepthZeroMatchesMlpPooling) {
  for (int trial = 0; trial < 5; ++trial) {
    const auto f = fixture(20 + trial);
    Rng rng(30 + trial);
    auto hp = small_hp();
    hp.depth = 0;
    hp.mlp_layers = 1;
    const int dim = static_cast<int>(f.ds.dim());
    const auto gnn = test::random_set_model(ModelKind::GNNPooling, hp, dim, 2, rng);
    auto mlp = test::random_set_model(ModelKind::MLPPooling, hp, dim, 2, rng);
    mlp.net->scaler = gnn.net->scaler;
    mlp.net->params.encoder.linear = gnn.net->params.encoder.linear;
    mlp.net->params.readout = gnn.net->params.readout;
    // The GNN head has no batch norm; make the MLP's exactly the identity.
    auto& bn = *mlp.net->params.encoder.norm[0];
    bn.gamma.setOnes();
    bn.beta.setZero();
    bn.running_mean.setZero();
    bn.running_var.setConstant(1.0 - nn::kBatchNormEps);
    const auto users = test::all_user_nodes(f.ds);
    EXPECT_LT(test::max_abs_diff(gnn.predict(f.g, users, &f.s), mlp.predict(f.g, users)), 1e-9);
  }
}

TEST(Models, InputGradientMatchesFiniteDifference) {
  for (ModelKind kind : kSetKinds) {
    const auto f = fixture(40, 4, 4);
    Rng rng(41);
    const auto m = test::random_set_model(kind, small_hp(), 4, 2, rng);
    const auto users = test::all_user_nodes(f.ds);
    const auto& nodes = users[0];
    std::vector<NodeId> wrt = {nodes[0]};
    if (is_graph_model(kind) && !f.g.neighbors[nodes[0]].empty()) wrt.push_back(f.g.neighbors[nodes[0]][0]);
    for (NodeId w : wrt) {
      const RowVector grad = m.log_prob_gradient(f.g, nodes, w, 1);
      for (Index c = 0; c < grad.size(); ++c) {
        auto up = f.g, down = f.g;
        up.features(w, c) += 1e-5;
        down.features(w, c) -= 1e-5;
        const double num = (m.user_log_probs(up, nodes)[1] - m.user_log_probs(down, nodes)[1]) / 2e-5;
        EXPECT_LT(test::relative_error(grad[c], num), 1e-4) << to_string(kind);
      }
    }
  }
}

TEST(Checkpoint, RoundTripIsExact) {
  const auto f = fixture(50, 8, 4);
  const auto dir = test::temp_dir("ckpt");
  const auto data = test::all_users_fit_data(f.ds, f.g, &f.s);
  for (ModelKind kind : kAllModelKinds) {
    ModelSpec spec{kind, small_hp()};
    spec.hp.neighbors = 3;
    spec.hp.hidden_layers = {5};
    Rng rng(51);
    const auto fit = fit_model(spec, "target", {"c0", "c1"}, data, rng, {5, 20});
    const auto path = (dir / (to_string(kind) + ".json")).string();
    write_model(fit.model, path);
    const auto back = load_model(path);
    EXPECT_EQ(back.spec.kind, kind);
    EXPECT_EQ(back.class_names, fit.model.class_names);
    const auto users = test::all_user_nodes(f.ds);
    EXPECT_EQ(back.predict(f.g, users, &f.s), fit.model.predict(f.g, users, &f.s)) << to_string(kind);
    EXPECT_EQ(back.to_json().dump(), fit.model.to_json().dump());
  }
}

TEST(Checkpoint, CorruptFileIsDataError) {
  const auto dir = test::temp_dir("ckpt_bad");
  const auto path = (dir / "bad.json").string();
  std::ofstream(path) << "{\"format\": \"plinf-model\", \"kind\": \"GNNDeepSet\"}";
  EXPECT_THROW(load_model(path), DataError);
  std::ofstream(path) << "{not json";
  EXPECT_THROW(load_model(path), DataError);
  EXPECT_THROW(load_model((dir / "missing.json").string()), DataError);
}

TEST(Training, DeepSetLearnsPlantedSignal) {
  // Class decided by the sign of feature 0 on every playlist.
  test::TinySpec spec;
  spec.dim = 3;
  spec.playlists_per_user.assign(30, 3);
  Rng gen(60);
  auto c = test::tiny_content(spec, gen);
  for (auto& p : c.playlists) {
    const int label = c.users[static_cast<std::size_t>(std::stoi(p.owner.substr(4)))].labels["target"];
    p.embedding[0] = (label == 1 ? 2.0 : -2.0) + 0.3 * p.embedding[0];
    p.song_ids = {p.id};
  }
  const Dataset ds(std::move(c));
  const auto g = build_graph(ds, 0);
  const auto s = normalize(g);
  auto data = test::all_users_fit_data(ds, g, &s);
  data.val_users = data.train_users;
  data.val_labels = data.train_labels;
  Rng rng(61);
  auto hp = small_hp();
  hp.hidden = 8;
  const auto fit = fit_model({ModelKind::MLPDeepSet, hp}, "target", {"c0", "c1"}, data, rng, {20, 200});
  EXPECT_FALSE(fit.diverged);
  EXPECT_LT(fit.val_loss, 0.2);
  const Matrix lp = fit.model.predict(g, data.train_users);
  int correct = 0;
  for (Index u = 0; u < lp.rows(); ++u) correct += (lp(u, 1) > lp(u, 0) ? 1 : 0) == data.train_labels[static_cast<std::size_t>(u)];
  EXPECT_EQ(correct, 30);
}

}  // namespace
}  // namespace plinf
