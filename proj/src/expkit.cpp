#include "neurontrace/expkit.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iterator>
#include <optional>

#include <nlohmann/json.hpp>

#include "neurontrace/checkpoint.hpp"
#include "neurontrace/error.hpp"

namespace neurontrace {

AccuracyResult make_accuracy(std::size_t m, std::size_t z) {
  if (m > z) throw ContractError("accuracy: more matches than inputs");
  AccuracyResult r{z, m, 0.0};
  if (z > 0) r.accuracy = static_cast<double>(m) * 100.0 / static_cast<double>(z);
  return r;
}

AccuracyResult provenance_accuracy(std::span<const ProvenanceReport> reports, const GroundTruth& truth,
                                   std::size_t match_depth) {
  if (reports.empty()) throw DegenerateResult("provenance accuracy over an empty report set");
  if (match_depth == 0) throw ConfigError("provenance accuracy: match depth must be at least 1");
  std::size_t m = 0;
  for (const auto& r : reports) {
    auto it = truth.responsible.find(r.input_id);
    if (it == truth.responsible.end() || it->second.empty())
      throw ConfigError("provenance accuracy: no ground truth for input " + std::to_string(r.input_id));
    const std::size_t depth = std::min(match_depth, r.ranking.size());
    const bool hit = std::any_of(r.ranking.begin(), r.ranking.begin() + static_cast<std::ptrdiff_t>(depth),
                                 [&](std::size_t id) { return std::ranges::find(it->second, id) != it->second.end(); });
    m += hit ? 1 : 0;
  }
  return make_accuracy(m, reports.size());
}

double mean_accuracy(std::span<const AccuracyResult> results) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& r : results)
    if (r.z > 0) {
      sum += r.accuracy;
      ++n;
    }
  return n ? sum / static_cast<double>(n) : 0.0;
}

std::vector<std::size_t> stratified_selection(const Dataset& data, std::span<const std::size_t> candidates,
                                              std::size_t limit) {
  std::map<std::size_t, std::vector<std::size_t>> by_label;
  for (std::size_t row : candidates) by_label[data.labels.at(row)].push_back(row);
  std::vector<std::size_t> out;
  for (std::size_t depth = 0; out.size() < limit; ++depth) {
    bool any = false;
    for (auto& [label, rows] : by_label) {
      if (depth >= rows.size()) continue;
      any = true;
      if (out.size() < limit) out.push_back(rows[depth]);
    }
    if (!any) break;
  }
  std::ranges::sort(out);
  return out;
}

std::vector<ProvenanceReport> trace_rows(const ModelArch& arch, const RoundResult& round, const Dataset& test,
                                         std::span<const std::size_t> rows, const TraceOptions& options,
                                         std::size_t* skipped) {
  std::vector<TracedClient> clients;
  for (std::size_t i = 0; i < round.log.participants.size(); ++i)
    clients.push_back({round.log.participants[i].client_id, round.log.participants[i].p_k, &round.client_weights[i]});

  std::vector<std::optional<ProvenanceReport>> slots(rows.size());
  parallel_for(rows.size(), [&](std::size_t i) {
    const std::size_t row = rows[i];
    try {
      slots[i] = trace_prediction(arch, round.global, clients, test.sample_tensor(row), options, row, test.labels[row],
                                  round.log.round_index);
    } catch (const DegenerateResult&) {
    }
  });
  std::vector<ProvenanceReport> out;
  std::size_t missed = 0;
  for (auto& s : slots) {
    if (s)
      out.push_back(std::move(*s));
    else
      ++missed;
  }
  if (skipped) *skipped = missed;
  return out;
}

GroundTruth label_holder_truth(const Federation& federation, const RoundResult& round,
                               std::span<const ProvenanceReport> reports) {
  const std::size_t classes = federation.arch().num_classes();
  std::vector<std::vector<std::size_t>> holders(classes);
  for (const auto& p : round.log.participants) {
    std::vector<bool> has(classes, false);
    for (std::size_t label : federation.client_labels(p.client_id)) has.at(label) = true;
    for (std::size_t l = 0; l < classes; ++l)
      if (has[l]) holders[l].push_back(p.client_id);
  }
  GroundTruth truth;
  for (const auto& r : reports) truth.responsible[r.input_id] = holders.at(r.predicted_label);
  return truth;
}

namespace {

using ojson = nlohmann::ordered_json;

void prepare_out_dir(const std::filesystem::path& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
}

RunOptions run_options(bool force, std::function<void(const Federation&, const RoundResult&)> on_round) {
  RunOptions o;
  o.force = force;
  o.on_round = std::move(on_round);
  return o;
}

ojson accuracy_json(const AccuracyResult& a) { return {{"z", a.z}, {"m", a.m}, {"accuracy", a.accuracy}}; }

std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double binom(std::size_t n, std::size_t k) {
  if (k > n) return 0.0;
  double r = 1.0;
  for (std::size_t i = 1; i <= k; ++i) r = r * static_cast<double>(n - k + i) / static_cast<double>(i);
  return r;
}

std::vector<std::size_t> rows_where(const Dataset& test, const std::function<bool(std::size_t)>& keep) {
  std::vector<std::size_t> rows;
  for (std::size_t row = 0; row < test.count(); ++row)
    if (keep(row)) rows.push_back(row);
  return rows;
}

// Validates label groups for the forgetting and cross-silo protocols.
void require_label_groups(const FLConfig& config, bool cover_all) {
  if (config.data.partition != PartitionScheme::LabelGroups)
    throw ConfigError("config field `data.partition` must be label_groups for this experiment");
  std::vector<int> seen(config.data.num_classes, 0);
  for (const auto& g : config.data.label_groups)
    for (std::size_t l : g) {
      if (l >= seen.size()) throw ConfigError("config field `data.label_groups`: label " + std::to_string(l) + " out of range");
      if (seen[l]++) throw ConfigError("config field `data.label_groups`: label " + std::to_string(l) + " appears in more than one group");
    }
  if (cover_all)
    for (std::size_t l = 0; l < seen.size(); ++l)
      if (!seen[l]) throw ConfigError("config field `data.label_groups`: label " + std::to_string(l) + " is not assigned to any group");
}

}  // namespace

// ---------------------------------------------------------------------------

FaultLocalizationResult fault_localization_run(const FLConfig& config, const std::filesystem::path& out_dir,
                                               bool force) {
  if (!config.fault) throw ConfigError("config section `fault` is required for fault localization");
  const FaultConfig& fault = *config.fault;
  if (std::llround(fault.fraction * static_cast<double>(config.num_clients)) == 0)
    throw ConfigError("config field `fault.fraction` selects no faulty clients");
  if (fault.per_round == 0) throw ConfigError("config field `fault.per_round` must be at least 1");

  FaultLocalizationResult result;
  for (const auto& [from, to] : fault.mapping)
    if (from != to) result.targeted_labels.push_back(from);
  if (result.targeted_labels.empty()) throw ConfigError("config field `fault.mapping` changes no label");

  prepare_out_dir(out_dir);
  const TraceOptions options{config.experiment.threshold, false};
  auto on_round = [&](const Federation& fed, const RoundResult& rr) {
    if (result.faulty_clients.empty()) result.faulty_clients = fed.faulty_clients();
    FaultRound fr;
    fr.round = rr.log.round_index;
    fr.global_accuracy = rr.log.accuracy;
    for (const auto& p : rr.log.participants) {
      fr.participants.push_back(p.client_id);
      if (p.faulty) fr.faulty_participants.push_back(p.client_id);
    }
    const std::size_t f = fr.faulty_participants.size();
    const std::size_t k = fr.participants.size();
    if (f > 0) {
      fr.chance_any = 100.0 * (1.0 - binom(k - f, f) / binom(k, f));
      fr.chance_exact = 100.0 / binom(k, f);
      fr.chance_overlap = 100.0 * static_cast<double>(f) / static_cast<double>(k);
      const Dataset& test = fed.test_set();
      const auto rows = rows_where(test, [&](std::size_t row) {
        return std::ranges::find(result.targeted_labels, test.labels[row]) != result.targeted_labels.end() &&
               rr.eval.predictions[row] != test.labels[row];
      });
      const auto chosen = stratified_selection(test, rows, config.experiment.trace_limit);
      const auto reports = trace_rows(fed.arch(), rr, test, chosen, options, &fr.skipped);
      if (!reports.empty()) {
        GroundTruth truth;
        std::size_t exact = 0, overlap = 0;
        for (const auto& r : reports) {
          truth.responsible[r.input_id] = fr.faulty_participants;
          std::vector<std::size_t> top(r.ranking.begin(), r.ranking.begin() + static_cast<std::ptrdiff_t>(std::min(f, r.ranking.size())));
          std::ranges::sort(top);
          exact += top == fr.faulty_participants ? 1 : 0;
          std::vector<std::size_t> common;
          std::ranges::set_intersection(top, fr.faulty_participants, std::back_inserter(common));
          overlap += common.size();
        }
        fr.overlap = 100.0 * static_cast<double>(overlap) / static_cast<double>(f * reports.size());
        fr.accuracy = provenance_accuracy(reports, truth, f);
        fr.exact = make_accuracy(exact, reports.size());
      }
    }
    result.rounds.push_back(std::move(fr));
  };
  run_training(config, out_dir / "run", run_options(force, on_round));

  std::vector<AccuracyResult> any, exact;
  double chance_any = 0.0, chance_exact = 0.0, chance_overlap = 0.0, overlap = 0.0;
  for (const auto& r : result.rounds) {
    any.push_back(r.accuracy);
    exact.push_back(r.exact);
    if (r.accuracy.z > 0) {
      chance_any += r.chance_any;
      chance_exact += r.chance_exact;
      chance_overlap += r.chance_overlap;
      overlap += r.overlap;
    }
  }
  const auto counted = std::ranges::count_if(result.rounds, [](const FaultRound& r) { return r.accuracy.z > 0; });
  result.mean_accuracy = mean_accuracy(any);
  result.mean_exact_accuracy = mean_accuracy(exact);
  if (counted > 0) {
    result.mean_chance_any = chance_any / static_cast<double>(counted);
    result.mean_chance_exact = chance_exact / static_cast<double>(counted);
    result.mean_chance_overlap = chance_overlap / static_cast<double>(counted);
    result.mean_overlap = overlap / static_cast<double>(counted);
  }

  ojson j;
  j["experiment"] = "fault-localization";
  j["faulty_clients"] = result.faulty_clients;
  j["targeted_labels"] = result.targeted_labels;
  j["mean_accuracy"] = result.mean_accuracy;
  j["mean_exact_accuracy"] = result.mean_exact_accuracy;
  j["mean_chance_any"] = result.mean_chance_any;
  j["mean_chance_exact"] = result.mean_chance_exact;
  j["mean_overlap"] = result.mean_overlap;
  j["mean_chance_overlap"] = result.mean_chance_overlap;
  ojson rounds = ojson::array();
  std::string csv = "round,global_accuracy,z,m,accuracy,exact_m,exact_accuracy,overlap,chance_any,chance_exact,chance_overlap\n";
  for (const auto& r : result.rounds) {
    rounds.push_back({{"round", r.round},
                      {"global_accuracy", r.global_accuracy},
                      {"participants", r.participants},
                      {"faulty_participants", r.faulty_participants},
                      {"provenance", accuracy_json(r.accuracy)},
                      {"exact", accuracy_json(r.exact)},
                      {"chance_any", r.chance_any},
                      {"overlap", r.overlap},
                      {"chance_exact", r.chance_exact},
                      {"chance_overlap", r.chance_overlap},
                      {"skipped", r.skipped}});
    csv += std::to_string(r.round) + "," + fmt_double(r.global_accuracy) + "," + std::to_string(r.accuracy.z) + "," +
           std::to_string(r.accuracy.m) + "," + fmt_double(r.accuracy.accuracy) + "," + std::to_string(r.exact.m) + "," +
           fmt_double(r.exact.accuracy) + "," + fmt_double(r.overlap) + "," + fmt_double(r.chance_any) + "," +
           fmt_double(r.chance_exact) + "," + fmt_double(r.chance_overlap) + "\n";
  }
  j["rounds"] = std::move(rounds);
  write_file_atomic(out_dir / "fault_localization.json", j.dump(2) + "\n");
  write_file_atomic(out_dir / "fault_localization.csv", csv);
  return result;
}

// ---------------------------------------------------------------------------

ForgettingResult forgetting_run(const FLConfig& config, const std::filesystem::path& out_dir, bool force) {
  require_label_groups(config, true);
  const auto& groups = config.data.label_groups;
  if (groups.size() < 2) throw ConfigError("config field `data.label_groups` needs at least two clusters");
  const std::size_t g = config.experiment.exclude_group;
  if (g >= groups.size()) throw ConfigError("config field `experiment.exclude_group` names a missing cluster");
  if (config.experiment.exclude_from_round < 2)
    throw ConfigError("config field `experiment.exclude_from_round` must be at least 2");

  ForgettingResult result;
  result.excluded_labels = groups[g];
  std::ranges::sort(result.excluded_labels);
  result.exclude_from_round = config.experiment.exclude_from_round;
  const std::size_t per = config.data.clients_per_group;
  for (std::size_t c = g * per; c < (g + 1) * per; ++c) result.excluded_clients.push_back(c);

  FLConfig cfg = config;
  cfg.exclude_clients = result.excluded_clients;
  cfg.exclude_from_round = result.exclude_from_round;

  prepare_out_dir(out_dir);
  auto on_round = [&](const Federation&, const RoundResult& rr) {
    std::size_t correct = 0, total = 0;
    for (std::size_t l : result.excluded_labels) {
      correct += rr.eval.label_correct.at(l);
      total += rr.eval.label_counts.at(l);
    }
    result.rounds.push_back({rr.log.round_index, rr.log.participants.size(), rr.log.accuracy,
                             total ? 100.0 * static_cast<double>(correct) / static_cast<double>(total) : 0.0});
  };
  run_training(cfg, out_dir / "run", run_options(force, on_round));

  ojson j;
  j["experiment"] = "forgetting";
  j["excluded_clients"] = result.excluded_clients;
  j["excluded_labels"] = result.excluded_labels;
  j["exclude_from_round"] = result.exclude_from_round;
  ojson rounds = ojson::array();
  std::string overall = "round,accuracy\n", excluded = "round,accuracy\n";
  for (const auto& r : result.rounds) {
    rounds.push_back({{"round", r.round},
                      {"participants", r.participants},
                      {"overall_accuracy", r.overall},
                      {"excluded_labels_accuracy", r.excluded_labels}});
    overall += std::to_string(r.round) + "," + fmt_double(r.overall) + "\n";
    excluded += std::to_string(r.round) + "," + fmt_double(r.excluded_labels) + "\n";
  }
  j["rounds"] = std::move(rounds);
  write_file_atomic(out_dir / "forgetting.json", j.dump(2) + "\n");
  write_file_atomic(out_dir / "overall_accuracy.csv", overall);
  write_file_atomic(out_dir / "excluded_accuracy.csv", excluded);
  return result;
}

// ---------------------------------------------------------------------------

double CrossSiloResult::mean_last(std::size_t n) const {
  std::vector<AccuracyResult> tail;
  for (std::size_t i = rounds.size() > n ? rounds.size() - n : 0; i < rounds.size(); ++i) tail.push_back(rounds[i].accuracy);
  return mean_accuracy(tail);
}

CrossSiloResult cross_silo_run(const FLConfig& config, const std::filesystem::path& out_dir, bool force) {
  return cross_silo_run(config, out_dir, force, {});
}

CrossSiloResult cross_silo_run(const FLConfig& config, const std::filesystem::path& out_dir, bool force,
                               const std::function<void(std::size_t, std::span<const ProvenanceReport>)>& sink) {
  require_label_groups(config, false);
  FLConfig cfg = config;
  cfg.clients_per_round = cfg.num_clients;

  prepare_out_dir(out_dir);
  CrossSiloResult result;
  std::vector<ProvenanceReport> pooled;
  std::vector<std::size_t> all_clients;
  const TraceOptions options{config.experiment.threshold, false};
  auto on_round = [&](const Federation& fed, const RoundResult& rr) {
    if (all_clients.empty())
      for (const auto& p : fed.partitions()) all_clients.push_back(p.client_id);
    CrossSiloRound cr{rr.log.round_index, rr.log.accuracy, {}, 0};
    const Dataset& test = fed.test_set();
    const auto rows = rows_where(test, [&](std::size_t row) { return rr.eval.predictions[row] == test.labels[row]; });
    const auto chosen = stratified_selection(test, rows, config.experiment.trace_limit);
    auto reports = trace_rows(fed.arch(), rr, test, chosen, options, &cr.skipped);
    if (!reports.empty()) cr.accuracy = provenance_accuracy(reports, label_holder_truth(fed, rr, reports), 1);
    if (sink) sink(rr.log.round_index, reports);
    pooled.insert(pooled.end(), std::make_move_iterator(reports.begin()), std::make_move_iterator(reports.end()));
    result.rounds.push_back(cr);
  };
  run_training(cfg, out_dir / "run", run_options(force, on_round));
  result.heatmap = heatmap(pooled, all_clients, false);

  ojson j;
  j["experiment"] = "cross-silo";
  j["mean_last_10"] = result.mean_last(10);
  ojson rounds = ojson::array();
  std::string csv = "round,global_accuracy,z,m,accuracy\n";
  for (const auto& r : result.rounds) {
    rounds.push_back({{"round", r.round},
                      {"global_accuracy", r.global_accuracy},
                      {"provenance", accuracy_json(r.accuracy)},
                      {"skipped", r.skipped}});
    csv += std::to_string(r.round) + "," + fmt_double(r.global_accuracy) + "," + std::to_string(r.accuracy.z) + "," +
           std::to_string(r.accuracy.m) + "," + fmt_double(r.accuracy.accuracy) + "\n";
  }
  j["rounds"] = std::move(rounds);
  write_file_atomic(out_dir / "cross_silo.json", j.dump(2) + "\n");
  write_file_atomic(out_dir / "provenance_accuracy.csv", csv);
  write_file_atomic(out_dir / "heatmap.csv", result.heatmap.to_csv());
  return result;
}

}  // namespace neurontrace
