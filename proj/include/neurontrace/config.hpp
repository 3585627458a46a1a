#pragma once

// Run configuration. On disk it is an INI-style file:
//
//   [run]
//   seed = 7
//   rounds = 20
//   num_clients = 10
//
//   [model]
//   preset = small_cnn
//
// Keys are documented in README.md. Every value is echoed into the run
// manifest, which is enough to rebuild the exact same federation.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "neurontrace/data.hpp"
#include "neurontrace/nn.hpp"

namespace neurontrace {

enum class Fusion { FedAvg, FedProx };
enum class DataSource { Blobs, Idx };
enum class PartitionScheme { Dirichlet, LabelGroups };

struct DataSpec {
  DataSource source = DataSource::Blobs;
  std::size_t num_classes = 10;

  // synthetic blobs
  std::size_t dim = 16;
  double spread = 0.1;
  std::size_t train_per_class = 100;
  std::size_t test_per_class = 20;

  // IDX files; 0 keeps every row of a class
  std::filesystem::path train_images, train_labels, test_images, test_labels;
  std::size_t max_train_per_class = 0;
  std::size_t max_test_per_class = 0;

  PartitionScheme partition = PartitionScheme::Dirichlet;
  double alpha = 0.1;
  std::vector<std::vector<std::size_t>> label_groups;
  std::size_t clients_per_group = 1;
};

struct FaultConfig {
  double fraction = 0.2;
  LabelMapping mapping;
  std::size_t per_round = 2;
};

struct ExperimentConfig {
  double threshold = 0.0;
  std::size_t trace_limit = 200;  // traced inputs per round
  std::size_t exclude_group = 0;  // forgetting: label group whose clients drop out
  std::size_t exclude_from_round = 11;
};

struct FLConfig {
  std::uint64_t seed = 0;
  std::size_t rounds = 20;
  std::size_t num_clients = 10;
  std::size_t clients_per_round = 10;
  // Clients that stop participating from `exclude_from_round` on (0: never).
  std::vector<std::size_t> exclude_clients;
  std::size_t exclude_from_round = 0;

  Fusion fusion = Fusion::FedAvg;
  double mu = 0.01;
  double lr = 0.01;
  std::size_t local_epochs = 4;
  std::size_t batch_size = 16;
  double init_scale = 0.05;

  std::string model_preset;  // mlp | small_cnn | lenet, or empty for explicit layers
  std::string model_layers;
  Shape input_shape;
  std::vector<std::size_t> hidden{32};  // mlp preset

  DataSpec data;
  std::optional<FaultConfig> fault;
  ExperimentConfig experiment;

  /// Builds the model architecture described by the model section.
  ModelArch arch() const;
  /// Throws ConfigError naming the first offending field.
  void validate() const;

  /// Flat "section.key" -> value view; round-trips through parse_config_values.
  std::map<std::string, std::string> to_values() const;
  std::string to_ini() const;
};

/// Parses config text. Relative IDX paths resolve against `base_dir`.
FLConfig parse_config(const std::string& text, const std::filesystem::path& base_dir = {});
FLConfig load_config(const std::filesystem::path& path);
FLConfig parse_config_values(const std::map<std::string, std::string>& values,
                             const std::filesystem::path& base_dir = {});

std::string fusion_name(Fusion f);

}  // namespace neurontrace
