#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "neurontrace/error.hpp"
#include "neurontrace/nn.hpp"
#include "test_support.hpp"

using namespace neurontrace;
using nt_test::close_rel;
using nt_test::finite_difference;
using nt_test::random_tensor;

namespace {

ModelWeights dense_weights(std::vector<double> w, std::vector<double> b, std::size_t in, std::size_t out) {
  ModelWeights m;
  m.params.push_back({Tensor({out, in}, std::move(w)), Tensor({out}, std::move(b))});
  return m;
}

// Small conv net: 1x8x8 -> conv3 (2ch) -> relu -> pool2 -> flatten -> dense 18->5 -> relu -> dense 5->3
ModelArch tiny_cnn() { return ModelArch::parse("conv:1:2:3,relu,pool:2,flatten,dense:18:5,relu,dense:5:3", {1, 8, 8}); }

}  // namespace

TEST(Tensor, RejectsSizeMismatch) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), ConfigError);
  Tensor t({2, 3}, 1.5);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.rank(), 2u);
  EXPECT_EQ(shape_string(t.shape), "2x3");
  EXPECT_TRUE(t.all_finite());
  t[4] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_FALSE(t.all_finite());
}

TEST(ModelArch, ParsesAndDescribes) {
  const ModelArch a = ModelArch::parse("conv:1:4:5,relu,pool:2,flatten,dense:576:10", {1, 28, 28});
  EXPECT_EQ(a.num_classes(), 10u);
  ASSERT_EQ(a.param_layers().size(), 2u);
  EXPECT_TRUE(a.param_layers()[0].relu_follows);
  EXPECT_FALSE(a.param_layers()[1].relu_follows);
  EXPECT_EQ(a.total_neurons(), 4u * 24 * 24 + 10);
  const ModelArch again = ModelArch::parse(a.describe().substr(a.describe().find('|') + 1), {1, 28, 28});
  EXPECT_EQ(a, again);
  EXPECT_EQ(a.fingerprint(), again.fingerprint());
}

TEST(ModelArch, RejectsBadCompositions) {
  EXPECT_THROW(ModelArch::parse("dense:3:2", {4}), ConfigError);
  EXPECT_THROW(ModelArch::parse("dense:4:2,relu", {4}), ConfigError);
  EXPECT_THROW(ModelArch::parse("conv:1:2:9,flatten,dense:2:2", {1, 4, 4}), ConfigError);
  EXPECT_THROW(ModelArch::parse("bogus:1", {4}), ConfigError);
  EXPECT_THROW(ModelArch::parse("dense:4:x", {4}), ConfigError);
  EXPECT_THROW(ModelArch::parse("", {4}), ConfigError);
}

TEST(ModelArch, PresetsCompose) {
  EXPECT_NO_THROW(ModelArch::small_cnn(10));
  EXPECT_NO_THROW(ModelArch::lenet(10));
  const std::vector<std::size_t> hidden{8, 6};
  const ModelArch m = ModelArch::mlp(5, hidden, 3);
  EXPECT_EQ(m.total_neurons(), 8u + 6 + 3);
}

TEST(Forward, DenseDotProduct) {
  const ModelArch arch = ModelArch::parse("dense:2:1", {2});
  const auto w = dense_weights({1, 1}, {0}, 2, 1);
  const ActivationTrace tr = forward(arch, w, Tensor({2}, std::vector<double>{2, 3}));
  EXPECT_EQ(tr.logits[0], 5.0);
  EXPECT_EQ(tr.layers[0].pre_activation[0], 5.0);
  EXPECT_EQ(tr.layers[0].post_activation[0], 5.0);
  EXPECT_EQ(tr.total_neurons, 1u);
}

TEST(Forward, ReluClamp) {
  const ModelArch arch = ModelArch::parse("dense:1:1,relu,dense:1:1", {1});
  ModelWeights w = ModelWeights::zeros(arch);
  w.params[0].weight[0] = 1.0;
  w.params[1].weight[0] = 1.0;
  const ActivationTrace tr = forward(arch, w, Tensor({1}, std::vector<double>{-1}));
  EXPECT_EQ(tr.layers[0].pre_activation[0], -1.0);
  EXPECT_EQ(tr.layers[0].post_activation[0], 0.0);
}

TEST(Forward, LenetZeroWeightsGiveZeroLogits) {
  const ModelArch arch = ModelArch::lenet(10);
  const ActivationTrace tr = forward(arch, ModelWeights::zeros(arch), Tensor({1, 28, 28}, 0.0));
  for (double v : tr.logits.values()) EXPECT_EQ(v, 0.0);
}

TEST(Forward, ShapeConservation) {
  for (const ModelArch& arch : {ModelArch::lenet(10), ModelArch::small_cnn(10), tiny_cnn()}) {
    const ModelWeights w = ModelWeights::uniform(arch, 3, -0.1, 0.1);
    const ActivationTrace tr = forward(arch, w, random_tensor(arch.input_shape(), 4, 0, 1));
    ASSERT_EQ(tr.values.size(), arch.layers().size() + 1);
    for (std::size_t i = 0; i < arch.layers().size(); ++i) EXPECT_EQ(tr.values[i + 1].shape, arch.output_shapes()[i]);
    for (std::size_t j = 0; j < arch.param_layers().size(); ++j) {
      EXPECT_EQ(tr.layers[j].pre_activation.shape, arch.param_layers()[j].output_shape);
      EXPECT_EQ(tr.layers[j].layer_input.shape, arch.param_layers()[j].input_shape);
      for (std::size_t i = 0; i < tr.layers[j].pre_activation.size(); ++i) {
        const double pre = tr.layers[j].pre_activation[i];
        EXPECT_EQ(tr.layers[j].post_activation[i], arch.param_layers()[j].relu_follows ? std::max(0.0, pre) : pre);
      }
    }
    EXPECT_EQ(tr.logits, tr.layers.back().pre_activation);
  }
}

TEST(Forward, Errors) {
  const ModelArch arch = ModelArch::parse("dense:2:2", {2});
  ModelWeights w = ModelWeights::zeros(arch);
  EXPECT_THROW(forward(arch, w, Tensor({3}, 0.0)), ConfigError);
  w.params[0].bias[0] = std::numeric_limits<double>::infinity();
  EXPECT_THROW(forward(arch, w, Tensor({2}, 0.0)), NumericError);
  const ModelArch other = ModelArch::parse("dense:2:3", {2});
  EXPECT_THROW(forward(other, ModelWeights::zeros(arch), Tensor({2}, 0.0)), ConfigError);
}

TEST(Predict, ArgmaxAndTies) {
  const ModelArch arch = ModelArch::parse("dense:1:2", {1});
  EXPECT_EQ(predict(arch, dense_weights({0, 0}, {0.1, 0.9}, 1, 2), std::vector<double>{1.0}), 1u);
  EXPECT_EQ(predict(arch, dense_weights({0, 0}, {0.5, 0.5}, 1, 2), std::vector<double>{1.0}), 0u);
  const ModelArch big = ModelArch::small_cnn(10);
  const Tensor x = random_tensor(big.input_shape(), 9, 0, 1);
  EXPECT_EQ(predict(big, ModelWeights::zeros(big), x.values()), 0u);
  const std::vector<double> v{1, 3, 3, 2};
  EXPECT_EQ(argmax(v), 1u);
}

TEST(Backward, LinearChainHandComputed) {
  // y = v * z, z = w * x with w = 2, v = 3
  const ModelArch arch = ModelArch::parse("dense:1:1,dense:1:1", {1});
  ModelWeights w = ModelWeights::zeros(arch);
  w.params[0].weight[0] = 2.0;
  w.params[1].weight[0] = 3.0;
  const ActivationTrace tr = forward(arch, w, Tensor({1}, std::vector<double>{1.5}));
  const InfluenceMap c = backward_influence(arch, w, tr, 0);
  EXPECT_EQ(c.at({0, 0}), 3.0);
  EXPECT_EQ(c.at({1, 0}), 1.0);
}

TEST(Backward, OutputNeuronsAreIdentity) {
  const ModelArch arch = ModelArch::parse("dense:4:6,relu,dense:6:3", {4});
  const ModelWeights w = ModelWeights::uniform(arch, 11, -1, 1);
  const ActivationTrace tr = forward(arch, w, random_tensor({4}, 12));
  for (std::size_t cls = 0; cls < 3; ++cls) {
    const InfluenceMap c = backward_influence(arch, w, tr, cls);
    for (std::size_t o = 0; o < 3; ++o) EXPECT_EQ(c.at({1, o}), o == cls ? 1.0 : 0.0);
  }
}

TEST(Backward, MatchesFiniteDifferencesMlp) {
  const ModelArch arch = ModelArch::parse("dense:6:8,relu,dense:8:7,relu,dense:7:4", {6});
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const ModelWeights w = ModelWeights::uniform(arch, seed, -1, 1);
    const Tensor x = random_tensor({6}, 100 + seed);
    const ActivationTrace tr = forward(arch, w, x);
    for (std::size_t cls = 0; cls < arch.num_classes(); ++cls) {
      const InfluenceMap c = backward_influence(arch, w, tr, cls);
      ASSERT_EQ(c.size(), arch.total_neurons());
      for (const auto& [n, g] : c) {
        const double fd = finite_difference(arch, w, x, n, cls);
        EXPECT_TRUE(close_rel(g, fd, 1e-6, 1e-9)) << "seed " << seed << " neuron (" << n.layer << "," << n.index
                                                  << ") analytic " << g << " fd " << fd;
      }
    }
  }
}

TEST(Backward, MatchesFiniteDifferencesConv) {
  const ModelArch arch = tiny_cnn();
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    const ModelWeights w = ModelWeights::uniform(arch, seed, -0.6, 0.6);
    const Tensor x = random_tensor(arch.input_shape(), 200 + seed, 0, 1);
    const ActivationTrace tr = forward(arch, w, x);
    const std::size_t cls = argmax(tr.logits.values());
    const InfluenceMap c = backward_influence(arch, w, tr, cls);
    ASSERT_EQ(c.size(), arch.total_neurons());
    for (const auto& [n, g] : c) {
      const double fd = finite_difference(arch, w, x, n, cls);
      EXPECT_TRUE(close_rel(g, fd, 1e-6, 1e-9)) << "seed " << seed << " neuron (" << n.layer << "," << n.index
                                                << ") analytic " << g << " fd " << fd;
    }
  }
}

TEST(Backward, ReluPreAndPostGradientsAgreeOnActiveNeurons) {
  // d y / d post_n is rebuilt from the next layer's pre-activation gradients.
  const ModelArch arch = ModelArch::parse("dense:5:9,relu,dense:9:4", {5});
  const ModelWeights w = ModelWeights::uniform(arch, 21, -1, 1);
  const ActivationTrace tr = forward(arch, w, random_tensor({5}, 22));
  const auto grads = neuron_gradients(arch, w, tr, 2);
  std::size_t active = 0;
  for (std::size_t n = 0; n < 9; ++n) {
    if (!(tr.layers[0].post_activation[n] > 0)) continue;
    ++active;
    double d_post = 0.0;
    for (std::size_t m = 0; m < 4; ++m) d_post += w.params[1].weight[m * 9 + n] * grads[1][m];
    EXPECT_EQ(grads[0][n], d_post);
  }
  EXPECT_GT(active, 0u);
}

TEST(OverrideActivation, IdentityAndShifts) {
  const ModelArch arch = ModelArch::parse("dense:3:2,dense:2:2", {3});
  const ModelWeights w = ModelWeights::uniform(arch, 5, -1, 1);
  const Tensor x = random_tensor({3}, 6);
  const Tensor base = forward(arch, w, x).logits;
  EXPECT_EQ(override_activation(arch, w, x, {0, 1}, 0.0), base);

  const double d = 0.37;
  const Tensor out = override_activation(arch, w, x, {1, 1}, d);
  EXPECT_EQ(out[1], base[1] + d);
  EXPECT_EQ(out[0], base[0]);

  // hidden linear neuron 0 feeds logit 1 through v = W2[1][0]
  const double v = w.params[1].weight[1 * 2 + 0];
  const Tensor hidden = override_activation(arch, w, x, {0, 0}, d);
  EXPECT_NEAR(hidden[1] - base[1], v * d, 1e-12);

  EXPECT_THROW(override_activation(arch, w, x, {2, 0}, 1.0), ContractError);
  EXPECT_THROW(override_activation(arch, w, x, {0, 2}, 1.0), ContractError);
}

TEST(LayerResponse, MatchesTracePreActivation) {
  const ModelArch arch = tiny_cnn();
  const ModelWeights w = ModelWeights::uniform(arch, 8, -0.5, 0.5);
  const ActivationTrace tr = forward(arch, w, random_tensor(arch.input_shape(), 9, 0, 1));
  for (std::size_t j = 0; j < arch.param_layers().size(); ++j)
    EXPECT_EQ(layer_response(arch, w, j, tr.layers[j].layer_input), tr.layers[j].pre_activation);
}

// ---------------------------------------------------------------------------

namespace {

struct Toy {
  std::vector<double> features;
  std::vector<std::size_t> labels;
  LabeledBatchSource source() const {
    LabeledBatchSource s{features, 1, {}, labels};
    for (std::size_t i = 0; i < labels.size(); ++i) s.rows.push_back(i);
    return s;
  }
};

Toy separable_1d() {
  Toy t;
  for (int i = 0; i < 20; ++i) {
    const double x = -1.0 + 0.1 * i + (i >= 10 ? 0.1 : 0.0);  // gap around 0
    t.features.push_back(x);
    t.labels.push_back(x > 0 ? 1 : 0);
  }
  return t;
}

}  // namespace

TEST(TrainLocal, ZeroLearningRateIsIdentity) {
  const ModelArch arch = ModelArch::parse("dense:1:4,relu,dense:4:2", {1});
  const ModelWeights w = ModelWeights::uniform(arch, 1, -0.5, 0.5);
  const Toy toy = separable_1d();
  EXPECT_EQ(train_local(arch, w, toy.source(), {0.0, 3, 4, 9}), w);
  ModelWeights ref = ModelWeights::uniform(arch, 2, -0.5, 0.5);
  EXPECT_EQ(train_local(arch, w, toy.source(), {0.0, 3, 4, 9}, Proximal{0.5, &ref}), w);
}

TEST(TrainLocal, LearnsSeparableLogisticToy) {
  const ModelArch arch = ModelArch::parse("dense:1:2", {1});
  const Toy toy = separable_1d();
  const ModelWeights trained = train_local(arch, ModelWeights::zeros(arch), toy.source(), {0.5, 50, 4, 3});
  for (std::size_t i = 0; i < toy.labels.size(); ++i)
    EXPECT_EQ(predict(arch, trained, std::span<const double>(&toy.features[i], 1)), toy.labels[i]) << "sample " << i;
}

TEST(TrainLocal, ProximalTermPullsTowardReference) {
  const ModelArch arch = ModelArch::parse("dense:1:3,relu,dense:3:2", {1});
  const ModelWeights start = ModelWeights::uniform(arch, 4, -0.5, 0.5);
  const ModelWeights reference = ModelWeights::uniform(arch, 5, -0.5, 0.5);
  const Toy toy = separable_1d();
  const TrainHyper hyper{0.1, 10, 4, 6};
  const ModelWeights plain = train_local(arch, start, toy.source(), hyper);
  const ModelWeights prox = train_local(arch, start, toy.source(), hyper, Proximal{5.0, &reference});
  EXPECT_LT(squared_distance(prox, reference), squared_distance(plain, reference));
}

TEST(TrainLocal, DeterministicUnderSeed) {
  const ModelArch arch = ModelArch::parse("dense:1:5,relu,dense:5:2", {1});
  const ModelWeights start = ModelWeights::uniform(arch, 7, -0.5, 0.5);
  const Toy toy = separable_1d();
  const ModelWeights a = train_local(arch, start, toy.source(), {0.05, 3, 4, 42});
  const ModelWeights b = train_local(arch, start, toy.source(), {0.05, 3, 4, 42});
  const ModelWeights c = train_local(arch, start, toy.source(), {0.05, 3, 4, 43});
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
}

TEST(TrainLocal, Errors) {
  const ModelArch arch = ModelArch::parse("dense:1:2", {1});
  const ModelWeights w = ModelWeights::zeros(arch);
  Toy toy = separable_1d();
  LabeledBatchSource empty{toy.features, 1, {}, {}};
  EXPECT_THROW(train_local(arch, w, empty, {}), ConfigError);
  toy.labels[0] = 7;
  EXPECT_THROW(train_local(arch, w, toy.source(), {}), ConfigError);
  EXPECT_THROW(train_local(arch, w, separable_1d().source(), {0.1, 0, 4, 1}), ConfigError);
  const ModelArch deep = ModelArch::parse("dense:1:4,relu,dense:4:2", {1});
  EXPECT_THROW(train_local(deep, ModelWeights::uniform(deep, 1, -1, 1), separable_1d().source(), {1e300, 3, 4, 1}),
               NumericError);
}
