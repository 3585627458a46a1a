#pragma once

// Neuron-level provenance for a fused global model.
//
// For one input x and the global model's predicted class y:
//   1. A      = neurons whose post-activation exceeds the threshold t
//   2. c_n    = d logit_y / d pre_activation_n for n in A
//   3. cont_k(n) = c_n * p_k * (w_k,n . z-bar_n + b_k,n), where z-bar_n is the
//               input the GLOBAL model fed to neuron n and (w_k,n, b_k,n) are
//               client k's weights for the same neuron
//   4. Cont_k = sum over A of cont_k(n); shares = softmax(Cont)
//
// Because w_global = sum_k p_k w_k, summing step 3 over clients gives back
// c_n * pre_activation_n exactly (up to rounding).

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "neurontrace/flsim.hpp"
#include "neurontrace/nn.hpp"

namespace neurontrace {

struct ActivatedSet {
  std::vector<NeuronId> neurons;  // ascending (layer, index)
  double threshold = 0.0;

  bool contains(NeuronId n) const;
};

/// Neurons with post_activation > t (strict), output layer included.
ActivatedSet activated_neurons(const ActivationTrace& trace, double t);

/// backward_influence() restricted to the activated set.
InfluenceMap neuron_influence(const ModelArch& arch, const ModelWeights& global_weights,
                              const ActivationTrace& trace, std::size_t predicted_class,
                              const ActivatedSet& activated);

/// One client's gradient-weighted share of one neuron. `c` must contain the
/// neuron (i.e. be restricted to an activated set that holds it); otherwise
/// ContractError.
double client_neuron_contribution(const ModelArch& arch, NeuronId neuron, const ActivationTrace& global_trace,
                                  const ModelWeights& client_weights, double p_k, const InfluenceMap& c);

/// Cont_k: client_neuron_contribution summed over the activated set, one
/// neuron at a time.
double client_total_contribution(const ModelArch& arch, const ActivatedSet& activated,
                                 const ActivationTrace& global_trace, const ModelWeights& client_weights,
                                 double p_k, const InfluenceMap& c);

/// Softmax with max subtraction.
std::map<std::size_t, double> normalize_contributions(const std::map<std::size_t, double>& raw);

struct ProvenanceReport {
  std::size_t input_id = 0;
  std::size_t round = 0;
  std::size_t true_label = 0;
  std::size_t predicted_label = 0;
  std::map<std::size_t, double> raw;         // client_id -> Cont_k
  std::map<std::size_t, double> normalized;  // client_id -> softmax share
  std::vector<std::size_t> ranking;          // descending share, ties by ascending id
  std::size_t activated_count = 0;           // not serialized
  /// Per-neuron, per-client contributions; only filled when requested.
  std::optional<std::map<NeuronId, std::map<std::size_t, double>>> detail;
};

struct TraceOptions {
  double threshold = 0.0;
  bool detail = false;
};

/// A participating client as seen by the tracer.
struct TracedClient {
  std::size_t client_id = 0;
  double p_k = 0.0;
  const ModelWeights* weights = nullptr;
};

/// Runs the four provenance steps for one input. Throws DegenerateResult
/// when no neuron is activated.
ProvenanceReport trace_prediction(const ModelArch& arch, const ModelWeights& global, std::span<const TracedClient> clients,
                                  const Tensor& input, const TraceOptions& options, std::size_t input_id = 0,
                                  std::size_t true_label = 0, std::size_t round = 0);

/// The checkpoints of one recorded round, loaded into memory.
struct LoadedRound {
  std::size_t round = 0;
  ModelArch arch;
  ModelWeights global;
  std::vector<ClientMeta> participants;  // p_k recomputed from n_k
  std::vector<ModelWeights> clients;     // parallel to participants

  std::vector<TracedClient> traced_clients() const;
};

/// Throws ConfigError naming the round when it was never recorded, IoError
/// when a checkpoint is missing or corrupt.
LoadedRound load_round(const std::filesystem::path& run_dir, std::size_t round);
LoadedRound load_round(const std::filesystem::path& run_dir, const RunManifest& manifest, std::size_t round);

ProvenanceReport trace_input(const LoadedRound& round, const Tensor& input, const TraceOptions& options,
                             std::size_t input_id = 0, std::size_t true_label = 0);
ProvenanceReport trace_input(const std::filesystem::path& run_dir, std::size_t round, const Tensor& input,
                             const TraceOptions& options, std::size_t input_id = 0, std::size_t true_label = 0);

/// Fixed field order: input_id, round, true_label, predicted_label, raw,
/// normalized, ranking[, detail].
std::string report_to_json(const ProvenanceReport& report);
ProvenanceReport report_from_json(const std::string& text);

struct HeatmapMatrix {
  std::vector<std::size_t> labels;   // rows, ascending
  std::vector<std::size_t> clients;  // columns
  std::vector<std::vector<double>> cells;
  std::vector<std::size_t> row_counts;  // reports averaged into each row

  std::string to_csv() const;
};

/// cell(label, client) = mean normalized share of `client` over reports
/// whose true label is `label`. Labels without reports get no row. With
/// `same_round` set, reports from different rounds raise ConfigError.
HeatmapMatrix heatmap(std::span<const ProvenanceReport> reports, std::span<const std::size_t> participants,
                      bool same_round = true);

}  // namespace neurontrace
