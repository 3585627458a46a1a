#pragma once

// Evaluation protocols built on flsim + provenance: the provenance-accuracy
// metric, fault localization, catastrophic forgetting and cross-silo runs.
//
// Each *_run writes the training run to <out>/run and its own result files
// next to it:
//   fault-localization  fault_localization.json, fault_localization.csv
//   forgetting          forgetting.json, overall_accuracy.csv, excluded_accuracy.csv
//   cross-silo          cross_silo.json, provenance_accuracy.csv, heatmap.csv

#include <cstddef>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "neurontrace/config.hpp"
#include "neurontrace/flsim.hpp"
#include "neurontrace/provenance.hpp"

namespace neurontrace {

/// input_id -> client ids considered responsible for that prediction.
struct GroundTruth {
  std::map<std::size_t, std::vector<std::size_t>> responsible;
};

struct AccuracyResult {
  std::size_t z = 0;  // inputs evaluated
  std::size_t m = 0;  // inputs whose top-ranked client(s) hit the truth
  double accuracy = 0.0;  // m * 100 / z, 0 when z == 0
};

AccuracyResult make_accuracy(std::size_t m, std::size_t z);

/// A report counts when any of its first `match_depth` ranked clients is in
/// the truth set for its input. Throws DegenerateResult on an empty report
/// set and ConfigError when truth is missing or empty for an input.
AccuracyResult provenance_accuracy(std::span<const ProvenanceReport> reports, const GroundTruth& truth,
                                   std::size_t match_depth);

/// Mean of `accuracy` over entries with z > 0; 0 when there are none.
double mean_accuracy(std::span<const AccuracyResult> results);

/// Up to `limit` rows of `candidates`, taken round-robin across labels so
/// that a class-ordered test set still yields a mix. Deterministic.
std::vector<std::size_t> stratified_selection(const Dataset& data, std::span<const std::size_t> candidates,
                                              std::size_t limit);

/// Traces the given test rows against an in-memory round. Inputs whose
/// activated set is empty are skipped and counted in `skipped`.
std::vector<ProvenanceReport> trace_rows(const ModelArch& arch, const RoundResult& round, const Dataset& test,
                                         std::span<const std::size_t> rows, const TraceOptions& options,
                                         std::size_t* skipped = nullptr);

/// Truth for correct predictions: participants holding at least one training
/// sample (as they trained on it) of the report's predicted label.
GroundTruth label_holder_truth(const Federation& federation, const RoundResult& round,
                               std::span<const ProvenanceReport> reports);

// ---------------------------------------------------------------------------

struct FaultRound {
  std::size_t round = 0;
  double global_accuracy = 0.0;
  std::vector<std::size_t> participants;
  std::vector<std::size_t> faulty_participants;
  AccuracyResult accuracy;      // any of the top-|F| clients is faulty
  AccuracyResult exact;         // the top-|F| clients are exactly the faulty ones
  double overlap = 0.0;         // mean |top-|F| ∩ F| / |F|, percent
  double chance_any = 0.0;      // analytic random-ranking rate for `accuracy`
  double chance_exact = 0.0;    // analytic random-ranking rate for `exact`
  double chance_overlap = 0.0;  // |F| / K, percent
  std::size_t skipped = 0;
};

struct FaultLocalizationResult {
  std::vector<std::size_t> faulty_clients;
  std::vector<std::size_t> targeted_labels;
  std::vector<FaultRound> rounds;
  double mean_accuracy = 0.0;        // over rounds with z > 0
  double mean_exact_accuracy = 0.0;
  double mean_overlap = 0.0;
  double mean_chance_any = 0.0;      // percent, same rounds
  double mean_chance_exact = 0.0;
  double mean_chance_overlap = 0.0;
};

/// Per round, traces misclassified test inputs of the labels the fault
/// mapping rewrites; truth is the round's faulty participants.
FaultLocalizationResult fault_localization_run(const FLConfig& config, const std::filesystem::path& out_dir,
                                               bool force = false);

struct ForgettingRound {
  std::size_t round = 0;
  std::size_t participants = 0;
  double overall = 0.0;
  double excluded_labels = 0.0;
};

struct ForgettingResult {
  std::vector<std::size_t> excluded_clients;
  std::vector<std::size_t> excluded_labels;
  std::size_t exclude_from_round = 0;
  std::vector<ForgettingRound> rounds;
};

/// Requires label-group partitioning whose groups cover every label once.
/// Clients of experiment.exclude_group stop participating from
/// experiment.exclude_from_round on.
ForgettingResult forgetting_run(const FLConfig& config, const std::filesystem::path& out_dir, bool force = false);

struct CrossSiloRound {
  std::size_t round = 0;
  double global_accuracy = 0.0;
  AccuracyResult accuracy;
  std::size_t skipped = 0;
};

struct CrossSiloResult {
  std::vector<CrossSiloRound> rounds;
  HeatmapMatrix heatmap;  // pooled over every traced input of every round

  /// Mean provenance accuracy over the last `n` rounds (z > 0 only).
  double mean_last(std::size_t n) const;
};

/// Every client takes part in every round (clients_per_round is forced to
/// num_clients); correctly classified test inputs are traced each round.
CrossSiloResult cross_silo_run(const FLConfig& config, const std::filesystem::path& out_dir, bool force = false);

/// Same as cross_silo_run but also hands every round's reports to `sink`.
CrossSiloResult cross_silo_run(const FLConfig& config, const std::filesystem::path& out_dir, bool force,
                               const std::function<void(std::size_t, std::span<const ProvenanceReport>)>& sink);

}  // namespace neurontrace
