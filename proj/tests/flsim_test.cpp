#include <gtest/gtest.h>

#include <cstdlib>
#include <limits>
#include <numeric>

#include "neurontrace/checkpoint.hpp"
#include "neurontrace/error.hpp"
#include "neurontrace/flsim.hpp"
#include "test_support.hpp"

using namespace neurontrace;
using nt_test::TempDir;
namespace fs = std::filesystem;

namespace {

FLConfig tiny_config(std::size_t rounds = 3) {
  return parse_config(R"(
[run]
seed = 7
rounds = )" + std::to_string(rounds) + R"(
num_clients = 4
clients_per_round = 3
[train]
lr = 0.05
local_epochs = 2
[model]
preset = mlp
hidden = 8
[data]
source = blobs
num_classes = 4
dim = 6
train_per_class = 40
test_per_class = 10
alpha = 1.0
)");
}

std::vector<ClientMeta> pool_of(std::initializer_list<std::size_t> sizes) {
  std::vector<ClientMeta> pool;
  std::size_t id = 0;
  for (std::size_t n : sizes) pool.push_back({id++, n, 0.0, false});
  return pool;
}

ModelWeights scalar_model(const ModelArch& arch, double value) {
  ModelWeights w = ModelWeights::zeros(arch);
  for (auto& p : w.params) {
    for (double& v : p.weight.data) v = value;
    for (double& v : p.bias.data) v = value;
  }
  return w;
}

std::map<std::string, std::string> dir_contents(const fs::path& root) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) files[fs::relative(e.path(), root).string()] = read_file(e.path());
  return files;
}

}  // namespace

TEST(SampleClients, ExactPoolAndExclusion) {
  const auto pool = pool_of({20, 20, 20});
  EXPECT_EQ(sample_clients(pool, 3, 16, 1), (std::vector<std::size_t>{0, 1, 2}));

  const auto with_small = pool_of({20, 15, 20, 20});
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const auto chosen = sample_clients(with_small, 2, 16, seed);
    EXPECT_TRUE(std::find(chosen.begin(), chosen.end(), 1u) == chosen.end());
    EXPECT_TRUE(std::is_sorted(chosen.begin(), chosen.end()));
  }
  EXPECT_THROW(sample_clients(with_small, 4, 16, 1), ConfigError);
}

TEST(SampleClients, DeterministicAndCoversPool) {
  const auto pool = pool_of({30, 30, 30, 30, 30, 30, 30, 30, 30, 30});
  EXPECT_EQ(sample_clients(pool, 4, 16, 99), sample_clients(pool, 4, 16, 99));
  std::vector<int> hits(10, 0);
  for (std::uint64_t seed = 0; seed < 500; ++seed)
    for (std::size_t id : sample_clients(pool, 4, 16, seed)) ++hits[id];
  for (int h : hits) EXPECT_GT(h, 100);
}

TEST(Fuse, SymmetricAndWeightedAverages) {
  const ModelArch arch = ModelArch::parse("dense:1:1", {1});
  {
    std::vector<ClientMeta> metas = pool_of({5, 5});
    assign_weights(metas);
    const std::vector<ModelWeights> ws{scalar_model(arch, 1.0), scalar_model(arch, 3.0)};
    EXPECT_EQ(fuse(ws, metas), scalar_model(arch, 2.0));
  }
  {
    std::vector<ClientMeta> metas = pool_of({1, 3});
    assign_weights(metas);
    EXPECT_EQ(metas[0].p_k, 0.25);
    EXPECT_EQ(metas[1].p_k, 0.75);
    const std::vector<ModelWeights> ws{scalar_model(arch, 0.0), scalar_model(arch, 4.0)};
    EXPECT_EQ(fuse(ws, metas), scalar_model(arch, 3.0));
  }
}

TEST(Fuse, SingleClientIsBitwiseIdentity) {
  const ModelArch arch = ModelArch::small_cnn(10);
  std::vector<ClientMeta> metas = pool_of({37});
  assign_weights(metas);
  const std::vector<ModelWeights> ws{ModelWeights::uniform(arch, 4, -1, 1)};
  EXPECT_EQ(fuse(ws, metas), ws[0]);
}

TEST(Fuse, ScalingCountsLeavesResultUnchanged) {
  const ModelArch arch = ModelArch::parse("dense:3:4,relu,dense:4:2", {3});
  std::vector<ModelWeights> ws;
  for (std::uint64_t s = 0; s < 5; ++s) ws.push_back(ModelWeights::uniform(arch, s, -1, 1));
  std::vector<ClientMeta> a = pool_of({3, 17, 8, 1, 40});
  std::vector<ClientMeta> b = pool_of({3 * 7, 17 * 7, 8 * 7, 1 * 7, 40 * 7});
  assign_weights(a);
  assign_weights(b);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].p_k, b[i].p_k);
  EXPECT_EQ(fuse(ws, a), fuse(ws, b));
  EXPECT_NEAR(std::accumulate(a.begin(), a.end(), 0.0, [](double s, const ClientMeta& m) { return s + m.p_k; }), 1.0,
              1e-12);
}

TEST(Fuse, ShapeMismatchThrows) {
  const ModelArch a = ModelArch::parse("dense:1:1", {1});
  const ModelArch b = ModelArch::parse("dense:2:1", {2});
  std::vector<ClientMeta> metas = pool_of({1, 1});
  assign_weights(metas);
  const std::vector<ModelWeights> ws{ModelWeights::zeros(a), ModelWeights::zeros(b)};
  EXPECT_THROW(fuse(ws, metas), ConfigError);
}

TEST(Evaluate, PerfectConstantAndAbsentLabels) {
  const ModelArch arch = ModelArch::parse("dense:10:10", {10});
  Dataset d;
  d.num_classes = 10;
  d.images = Tensor({50, 10});
  for (std::size_t r = 0; r < 50; ++r) {
    d.labels.push_back(r % 10);
    d.images[r * 10 + r % 10] = 1.0;
  }
  ModelWeights identity = ModelWeights::zeros(arch);
  for (std::size_t i = 0; i < 10; ++i) identity.params[0].weight[i * 10 + i] = 1.0;
  const EvalResult perfect = evaluate(arch, identity, d);
  EXPECT_EQ(perfect.overall, 100.0);
  for (const auto& v : perfect.per_label) EXPECT_EQ(v, 100.0);

  ModelWeights constant = ModelWeights::zeros(arch);
  constant.params[0].bias[0] = 1.0;
  const EvalResult c0 = evaluate(arch, constant, d);
  EXPECT_EQ(c0.overall, 10.0);
  EXPECT_EQ(c0.per_label[0], 100.0);
  EXPECT_EQ(c0.per_label[3], 0.0);

  const std::vector<std::size_t> rows{0, 1, 2, 11};
  const EvalResult partial = evaluate(arch, identity, d.subset(rows));
  EXPECT_FALSE(partial.per_label[5].has_value());
  EXPECT_EQ(partial.per_label[1], 100.0);
}

TEST(Evaluate, PerLabelRecomposesOverall) {
  const FLConfig cfg = tiny_config();
  Federation fed(cfg);
  const RoundResult r = fed.run_round();
  double recomposed = 0.0;
  for (std::size_t l = 0; l < r.eval.per_label.size(); ++l)
    if (r.eval.per_label[l]) recomposed += *r.eval.per_label[l] * static_cast<double>(r.eval.label_counts[l]);
  recomposed /= static_cast<double>(r.eval.total);
  EXPECT_NEAR(recomposed, r.eval.overall, 1e-9);
  EXPECT_GE(r.eval.overall, 0.0);
  EXPECT_LE(r.eval.overall, 100.0);
}

TEST(Federation, ZeroLearningRateKeepsGlobal) {
  FLConfig cfg = tiny_config();
  cfg.lr = 0.0;
  Federation fed(cfg);
  const ModelWeights before = fed.global();
  const RoundResult r = fed.run_round();
  // Every local model is bitwise the old global; the convex combination
  // reproduces it up to the rounding of sum_k p_k * w.
  for (const auto& w : r.client_weights) EXPECT_EQ(w, before);
  double worst = 0.0;
  for (std::size_t j = 0; j < before.params.size(); ++j)
    for (std::size_t i = 0; i < before.params[j].weight.size(); ++i) {
      const double a = before.params[j].weight[i], b = r.global.params[j].weight[i];
      worst = std::max(worst, std::abs(a - b) / std::abs(a));
    }
  EXPECT_LE(worst, 4 * std::numeric_limits<double>::epsilon());
}

TEST(Federation, SingleParticipantGlobalIsItsModel) {
  FLConfig cfg = tiny_config();
  cfg.clients_per_round = 1;
  Federation fed(cfg);
  const RoundResult r = fed.run_round();
  ASSERT_EQ(r.client_weights.size(), 1u);
  EXPECT_EQ(r.global, r.client_weights[0]);
  EXPECT_EQ(r.log.participants[0].p_k, 1.0);
}

TEST(Federation, WeightsSumToOneEveryRound) {
  Federation fed(tiny_config());
  for (int i = 0; i < 3; ++i) {
    const RoundResult r = fed.run_round();
    double sum = 0.0;
    for (const auto& m : r.log.participants) {
      EXPECT_GT(m.p_k, 0.0);
      EXPECT_LE(m.p_k, 1.0);
      sum += m.p_k;
    }
    EXPECT_NEAR(sum, 1.0, 1e-12);
  }
}

TEST(RunTraining, ZeroRoundsWritesOnlyInitialCheckpoint) {
  TempDir dir("zero_rounds");
  run_training(tiny_config(0), dir.path());
  const auto files = dir_contents(dir.path());
  EXPECT_EQ(files.size(), 2u);
  EXPECT_TRUE(files.contains("manifest.json"));
  EXPECT_TRUE(files.contains("round_000/global.ckpt"));
  EXPECT_TRUE(read_manifest(dir.path()).rounds.empty());
}

TEST(RunTraining, StoredCheckpointsReconstructGlobalBitwise) {
  TempDir dir("reconstruct");
  const FLConfig cfg = tiny_config(3);
  run_training(cfg, dir.path());
  const RunManifest m = read_manifest(dir.path());
  const ModelArch arch = m.config.arch();
  ASSERT_EQ(m.rounds.size(), 3u);
  for (const RoundLog& log : m.rounds) {
    std::vector<ModelWeights> clients;
    for (const auto& ref : log.client_checkpoints) clients.push_back(read_checkpoint(dir.path() / ref, arch));
    EXPECT_EQ(fuse(clients, log.participants), read_checkpoint(dir.path() / log.global_checkpoint, arch))
        << "round " << log.round_index;
  }
  EXPECT_THROW(m.round(99), ConfigError);
}

TEST(RunTraining, SameConfigGivesIdenticalRunDirectory) {
  TempDir a("determinism_a"), b("determinism_b");
  run_training(tiny_config(2), a.path());
  run_training(tiny_config(2), b.path());
  EXPECT_EQ(dir_contents(a.path()), dir_contents(b.path()));

  // rerun from the stored manifest
  TempDir c("determinism_c");
  run_training(read_manifest(a.path()).config, c.path());
  EXPECT_EQ(dir_contents(a.path()), dir_contents(c.path()));
}

TEST(RunTraining, ThreadCountDoesNotChangeResults) {
  TempDir a("threads_a"), b("threads_b");
  ::setenv("NEURONTRACE_THREADS", "1", 1);
  run_training(tiny_config(2), a.path());
  ::setenv("NEURONTRACE_THREADS", "3", 1);
  run_training(tiny_config(2), b.path());
  ::unsetenv("NEURONTRACE_THREADS");
  EXPECT_EQ(dir_contents(a.path()), dir_contents(b.path()));
}

TEST(RunTraining, RefusesNonEmptyDirectoryWithoutForce) {
  TempDir dir("nonempty");
  run_training(tiny_config(1), dir.path());
  EXPECT_THROW(run_training(tiny_config(1), dir.path()), IoError);
  EXPECT_NO_THROW(run_training(tiny_config(1), dir.path(), {.force = true}));
}

TEST(RunTraining, DisjointLabelBlobRunLearns) {
  const FLConfig cfg = parse_config(R"(
[run]
seed = 11
rounds = 20
num_clients = 5
clients_per_round = 5
[train]
lr = 0.1
local_epochs = 2
[model]
preset = mlp
hidden = 32
[data]
source = blobs
num_classes = 10
dim = 16
train_per_class = 100
test_per_class = 10
partition = label_groups
label_groups = 0,1;2,3;4,5;6,7;8,9
clients_per_group = 1
)");
  TempDir dir("label_groups_run");
  const auto logs = run_training(cfg, dir.path());
  ASSERT_EQ(logs.size(), 20u);
  EXPECT_GT(logs.back().accuracy, 100.0 / 10.0);
}
