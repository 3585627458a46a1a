#pragma once

// Round-based federated learning simulation: client sampling, local training,
// FedAvg/FedProx fusion, evaluation and checkpointing.
//
// Seeding: every random choice derives from FLConfig::seed.
//   round seed  = derive_seed({seed, kRoundTag, round})
//   client seed = derive_seed({seed, kClientTag, round, client_id})
// Initial global weights are uniform in [-init_scale, init_scale).
//
// Run directory:
//   manifest.json                 config echo, checkpoint index, round logs
//   round_000/global.ckpt         initial global model
//   round_NNN/global.ckpt         global model after fusing round NNN
//   round_NNN/client_<id>.ckpt    local model of each participant

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "neurontrace/config.hpp"
#include "neurontrace/data.hpp"
#include "neurontrace/nn.hpp"

namespace neurontrace {

inline constexpr const char* kToolVersion = "0.1.0";

struct ClientMeta {
  std::size_t client_id = 0;
  std::size_t n_k = 0;
  double p_k = 0.0;  // n_k / n over the round's participants
  bool faulty = false;

  friend bool operator==(const ClientMeta&, const ClientMeta&) = default;
};

struct EvalResult {
  double overall = 0.0;                        // percent
  std::vector<std::optional<double>> per_label;  // percent; nullopt when the label is absent
  std::vector<std::size_t> label_counts;
  std::vector<std::size_t> label_correct;
  std::vector<std::size_t> predictions;  // per test row
  std::size_t correct = 0;
  std::size_t total = 0;
};

struct RoundLog {
  std::size_t round_index = 0;
  std::vector<ClientMeta> participants;  // ascending client_id
  std::string global_checkpoint;         // relative to the run directory
  std::vector<std::string> client_checkpoints;  // parallel to participants
  double accuracy = 0.0;
  std::vector<std::optional<double>> per_label_accuracy;
};

/// Eligible clients (n_k >= batch_size) sampled uniformly without
/// replacement, returned ascending. Throws ConfigError when fewer than k are eligible.
std::vector<std::size_t> sample_clients(std::span<const ClientMeta> pool, std::size_t k, std::size_t batch_size,
                                        std::uint64_t round_seed);

/// Fills p_k = n_k / n for the given participants.
void assign_weights(std::vector<ClientMeta>& participants);

/// w_global = sum_k p_k w_k for every parameter, accumulated in ascending
/// client_id order.
ModelWeights fuse(std::span<const ModelWeights> client_weights, std::span<const ClientMeta> metas);

EvalResult evaluate(const ModelArch& arch, const ModelWeights& weights, const Dataset& test_set);

/// Worker count for parallel sections: NEURONTRACE_THREADS if set, otherwise
/// the hardware concurrency.
std::size_t worker_count();

/// Runs fn(i) for i in [0, n) on up to worker_count() threads.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

/// Everything produced by one round, kept in memory for tracing.
struct RoundResult {
  RoundLog log;
  std::vector<ModelWeights> client_weights;  // parallel to log.participants
  ModelWeights global;
  EvalResult eval;
};

/// A federation built from a config: datasets, client partitions, label
/// overlays for faulty clients, and the current global model.
class Federation {
 public:
  explicit Federation(FLConfig config);

  const FLConfig& config() const { return config_; }
  const ModelArch& arch() const { return arch_; }
  const Dataset& train_set() const { return train_; }
  const Dataset& test_set() const { return test_; }
  const std::vector<Partition>& partitions() const { return partitions_; }
  const std::vector<std::size_t>& faulty_clients() const { return faulty_; }
  bool is_faulty(std::size_t client_id) const;
  /// Labels the client trains on (overlay applied when faulty).
  std::vector<std::size_t> client_labels(std::size_t client_id) const;
  const ModelWeights& global() const { return global_; }
  std::size_t next_round() const { return next_round_; }

  /// Pool of clients allowed to take part in `round_index`, with n_k filled in.
  std::vector<ClientMeta> eligible_pool(std::size_t round_index) const;
  /// Participants of `round_index` (ascending), honouring the fault schedule.
  std::vector<ClientMeta> select_participants(std::size_t round_index) const;

  /// Trains the participants from the current global model, fuses and
  /// evaluates. Advances the global model. Checkpoint paths in the log are
  /// filled in but nothing is written here.
  RoundResult run_round();

 private:
  FLConfig config_;
  ModelArch arch_;
  Dataset train_;
  Dataset test_;
  std::vector<Partition> partitions_;
  std::vector<std::size_t> faulty_;
  std::vector<std::optional<LabelOverlay>> overlays_;
  ModelWeights global_;
  std::size_t next_round_ = 1;
};

/// Loads (or generates) the train and test sets a config describes.
std::pair<Dataset, Dataset> load_datasets(const FLConfig& config);

struct RunOptions {
  bool force = false;  // allow writing into a non-empty directory
  /// Called after each round with in-memory results (before the next round starts).
  std::function<void(const Federation&, const RoundResult&)> on_round;
};

/// Runs config.rounds rounds and writes the run directory (see top of file).
/// Throws IoError if `out_dir` is non-empty and options.force is false.
std::vector<RoundLog> run_training(const FLConfig& config, const std::filesystem::path& out_dir,
                                   const RunOptions& options = {});

/// Reads a run directory back.
struct RunManifest {
  FLConfig config;
  std::string tool_version;
  std::string initial_checkpoint;
  std::vector<RoundLog> rounds;

  const RoundLog& round(std::size_t index) const;  // throws ConfigError naming the round
};

RunManifest read_manifest(const std::filesystem::path& run_dir);

}  // namespace neurontrace
