#include <gtest/gtest.h>

#include <string>

#include "neurontrace/config.hpp"
#include "neurontrace/error.hpp"

using namespace neurontrace;

namespace {

const std::string kBase = R"(
[run]
seed = 7
rounds = 3
num_clients = 4
clients_per_round = 3

[model]
preset = mlp
hidden = 16

[data]
source = blobs
num_classes = 4
dim = 8
)";

std::string error_of(const std::string& text) {
  try {
    parse_config(text).validate();
  } catch (const ConfigError& e) {
    return e.what();
  }
  return {};
}

std::string replace(std::string text, const std::string& from, const std::string& to) {
  text.replace(text.find(from), from.size(), to);
  return text;
}

}  // namespace

TEST(Config, ParsesDefaultsAndValues) {
  const FLConfig c = parse_config(kBase);
  EXPECT_EQ(c.seed, 7u);
  EXPECT_EQ(c.rounds, 3u);
  EXPECT_EQ(c.num_clients, 4u);
  EXPECT_EQ(c.clients_per_round, 3u);
  EXPECT_EQ(c.fusion, Fusion::FedAvg);
  EXPECT_EQ(c.hidden, (std::vector<std::size_t>{16}));
  EXPECT_EQ(c.data.dim, 8u);
  EXPECT_FALSE(c.fault.has_value());
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.arch().num_classes(), 4u);
  EXPECT_EQ(c.arch().input_shape(), (Shape{8}));
}

TEST(Config, MissingFieldIsNamed) {
  const std::string msg = error_of(replace(kBase, "rounds = 3\n", ""));
  EXPECT_NE(msg.find("run.rounds"), std::string::npos) << msg;
}

TEST(Config, UnknownKeyIsRejected) {
  const std::string msg = error_of(kBase + "\n[train]\nlearning_rate = 0.1\n");
  EXPECT_NE(msg.find("train.learning_rate"), std::string::npos) << msg;
}

TEST(Config, FieldLevelValidation) {
  EXPECT_NE(error_of(replace(kBase, "clients_per_round = 3", "clients_per_round = 5")).find("run.clients_per_round"),
            std::string::npos);
  EXPECT_NE(error_of(replace(kBase, "rounds = 3", "rounds = -1")).find("run.rounds"), std::string::npos);
  EXPECT_NE(error_of(replace(kBase, "dim = 8", "dim = eight")).find("data.dim"), std::string::npos);
  EXPECT_NE(error_of(kBase + "[train]\nfusion = fedsgd\n").find("train.fusion"), std::string::npos);
  EXPECT_NE(error_of(replace(kBase, "preset = mlp", "preset = resnet")).find("model.preset"), std::string::npos);
}

TEST(Config, FaultSection) {
  const FLConfig c = parse_config(kBase + "[fault]\nfraction = 0.5\nmapping = 0:1, 1:0\nper_round = 1\n");
  ASSERT_TRUE(c.fault.has_value());
  EXPECT_EQ(c.fault->mapping, (LabelMapping{{0, 1}, {1, 0}}));
  EXPECT_NO_THROW(c.validate());
  EXPECT_NE(error_of(kBase + "[fault]\nfraction = 0.5\nmapping = 0:9\n").find("fault.mapping"), std::string::npos);
  EXPECT_NE(error_of(kBase + "[fault]\nfraction = 0.5\nmapping = 0:1\nper_round = 4\n").find("fault.per_round"),
            std::string::npos);
}

TEST(Config, LabelGroupsMustNotOverlap) {
  const std::string groups = replace(kBase, "dim = 8", "dim = 8\npartition = label_groups\nlabel_groups = 0,1;1,2\nclients_per_group = 2");
  EXPECT_NE(error_of(groups).find("data.label_groups"), std::string::npos);
}

TEST(Config, RoundTripsThroughValuesAndIni) {
  const FLConfig c = parse_config(kBase + "[fault]\nfraction = 0.25\nmapping = 0:1\n[train]\nfusion = fedprox\nmu = 0.5\n");
  const FLConfig again = parse_config_values(c.to_values());
  EXPECT_EQ(again.to_values(), c.to_values());
  EXPECT_EQ(parse_config(c.to_ini()).to_values(), c.to_values());
  EXPECT_EQ(again.fusion, Fusion::FedProx);
  EXPECT_EQ(again.mu, 0.5);
}

TEST(Config, ShippedConfigsValidate) {
  for (const char* name : {"blobs_tiny.ini", "cross_silo_mnist.ini", "fault_blobs.ini", "forgetting_blobs.ini"}) {
    const auto path = std::filesystem::path(NEURONTRACE_DATA_DIR) / ".." / "configs" / name;
    EXPECT_NO_THROW(load_config(path).validate()) << name;
  }
}
