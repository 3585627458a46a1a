#include "neurontrace/cli.hpp"

#include <glob.h>

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <set>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "neurontrace/checkpoint.hpp"
#include "neurontrace/config.hpp"
#include "neurontrace/error.hpp"
#include "neurontrace/expkit.hpp"
#include "neurontrace/flsim.hpp"
#include "neurontrace/provenance.hpp"

namespace neurontrace {
namespace {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

constexpr const char* kExperiments[] = {"forgetting", "cross-silo", "fault-localization"};

std::string pct(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::size_t parse_index(const std::string& text, const std::string& what) {
  std::size_t v = 0;
  const char* end = text.data() + text.size();
  auto [p, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || p != end) throw ConfigError(what + ": `" + text + "` is not a non-negative integer");
  return v;
}

// --inputs: "3", "0,4,9", "label=K", "all-correct" or "all-wrong".
std::vector<std::size_t> select_inputs(const std::string& spec, const Dataset& test,
                                       const std::vector<std::size_t>& predictions) {
  std::vector<std::size_t> rows;
  if (spec == "all-correct" || spec == "all-wrong") {
    const bool want_correct = spec == "all-correct";
    for (std::size_t r = 0; r < test.count(); ++r)
      if ((predictions[r] == test.labels[r]) == want_correct) rows.push_back(r);
    if (rows.empty()) throw ConfigError("--inputs " + spec + " selects no test inputs");
    return rows;
  }
  if (spec.starts_with("label=")) {
    const std::size_t label = parse_index(spec.substr(6), "--inputs label");
    for (std::size_t r = 0; r < test.count(); ++r)
      if (test.labels[r] == label) rows.push_back(r);
    if (rows.empty()) throw ConfigError("--inputs " + spec + ": the test set has no input with label " + std::to_string(label));
    return rows;
  }
  std::set<std::size_t> unique;
  std::size_t start = 0;
  while (start <= spec.size()) {
    const std::size_t comma = std::min(spec.find(',', start), spec.size());
    const std::size_t row = parse_index(spec.substr(start, comma - start), "--inputs");
    if (row >= test.count())
      throw ConfigError("--inputs: index " + std::to_string(row) + " is outside the test set (" + std::to_string(test.count()) + " inputs)");
    unique.insert(row);
    start = comma + 1;
  }
  return {unique.begin(), unique.end()};
}

bool non_empty_dir(const fs::path& dir) {
  std::error_code ec;
  return fs::is_directory(dir, ec) && !fs::is_empty(dir, ec);
}

int cmd_train(const std::string& config_path, const std::string& out_dir, bool force, std::ostream& out) {
  const FLConfig config = load_config(config_path);
  RunOptions options;
  options.force = force;
  options.on_round = [&](const Federation&, const RoundResult& r) {
    out << "round " << r.log.round_index << ": " << r.log.participants.size() << " clients, accuracy "
        << pct(r.log.accuracy) << "%\n";
  };
  run_training(config, out_dir, options);
  out << "wrote " << out_dir << "\n";
  return kExitOk;
}

int cmd_trace(const std::string& run_dir, std::size_t round, const std::string& spec, double threshold, bool detail,
              std::string out_dir, bool force, std::ostream& out, std::ostream& err) {
  const RunManifest manifest = read_manifest(run_dir);
  const LoadedRound loaded = load_round(run_dir, manifest, round);
  const Dataset test = load_datasets(manifest.config).second;

  std::vector<std::size_t> predictions(test.count());
  parallel_for(test.count(), [&](std::size_t r) { predictions[r] = predict(loaded.arch, loaded.global, test.sample(r)); });
  const auto rows = select_inputs(spec, test, predictions);

  char name[32];
  std::snprintf(name, sizeof name, "round_%03zu", round);
  const fs::path dir = out_dir.empty() ? fs::path(run_dir) / "traces" / name : fs::path(out_dir);
  if (non_empty_dir(dir) && !force) throw IoError(dir.string() + " is not empty (use --force to overwrite)");
  if (force && fs::exists(dir))
    for (const auto& entry : fs::directory_iterator(dir)) fs::remove_all(entry.path());
  fs::create_directories(dir);

  const TraceOptions options{threshold, detail};
  std::vector<std::optional<ProvenanceReport>> reports(rows.size());
  std::vector<std::string> failures(rows.size());
  parallel_for(rows.size(), [&](std::size_t i) {
    try {
      reports[i] = trace_input(loaded, test.sample_tensor(rows[i]), options, rows[i], test.labels[rows[i]]);
    } catch (const DegenerateResult& e) {
      failures[i] = e.what();
    }
  });

  ojson summary;
  summary["run"] = run_dir;
  summary["round"] = round;
  summary["threshold"] = threshold;
  ojson entries = ojson::array();
  ojson rejected = ojson::array();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (!reports[i]) {
      err << "input " << rows[i] << ": " << failures[i] << "\n";
      rejected.push_back({{"input_id", rows[i]}, {"reason", failures[i]}});
      continue;
    }
    const ProvenanceReport& r = *reports[i];
    const std::string file = "report_" + std::to_string(r.input_id) + ".json";
    write_file_atomic(dir / file, report_to_json(r));
    const std::size_t top = r.ranking.front();
    entries.push_back({{"input_id", r.input_id},
                       {"true_label", r.true_label},
                       {"predicted_label", r.predicted_label},
                       {"top_client", top},
                       {"top_share", r.normalized.at(top)},
                       {"file", file}});
  }
  summary["reports"] = std::move(entries);
  summary["rejected"] = rejected;
  write_file_atomic(dir / "summary.json", summary.dump(2) + "\n");
  out << "traced " << rows.size() - rejected.size() << " of " << rows.size() << " inputs into " << dir.string() << "\n";
  if (!rejected.empty()) {
    err << rejected.size() << " input(s) had an empty activated set at t=" << threshold << "\n";
    return kExitDegenerate;
  }
  return kExitOk;
}

int cmd_experiment(const std::string& name, const std::string& config_path, const std::string& out_dir, bool force,
                   std::ostream& out) {
  if (std::ranges::find(kExperiments, name) == std::end(kExperiments))
    throw ConfigError("unknown experiment `" + name + "`; valid names: forgetting, cross-silo, fault-localization");
  const FLConfig config = load_config(config_path);
  if (name == "forgetting") {
    const auto r = forgetting_run(config, out_dir, force);
    for (const auto& row : r.rounds)
      out << "round " << row.round << ": overall " << pct(row.overall) << "%, excluded labels " << pct(row.excluded_labels) << "%\n";
  } else if (name == "cross-silo") {
    const auto r = cross_silo_run(config, out_dir, force);
    for (const auto& row : r.rounds)
      out << "round " << row.round << ": provenance " << pct(row.accuracy.accuracy) << "% (" << row.accuracy.m << "/"
          << row.accuracy.z << "), global " << pct(row.global_accuracy) << "%\n";
    out << "mean provenance accuracy, last 10 rounds: " << pct(r.mean_last(10)) << "%\n";
  } else {
    const auto r = fault_localization_run(config, out_dir, force);
    for (const auto& row : r.rounds)
      out << "round " << row.round << ": localization " << pct(row.accuracy.accuracy) << "% (" << row.accuracy.m << "/"
          << row.accuracy.z << "), global " << pct(row.global_accuracy) << "%\n";
    out << "mean localization accuracy: " << pct(r.mean_accuracy) << "% (random top-2: " << pct(r.mean_chance_any)
        << "%), mean overlap " << pct(r.mean_overlap) << "% (random: " << pct(r.mean_chance_overlap) << "%)\n";
  }
  out << "wrote " << out_dir << "\n";
  return kExitOk;
}

int cmd_report_heatmap(const std::string& pattern, const std::string& out_file, std::ostream& out) {
  glob_t g{};
  const int rc = ::glob(pattern.c_str(), 0, nullptr, &g);
  std::vector<std::string> files;
  if (rc == 0)
    for (std::size_t i = 0; i < g.gl_pathc; ++i) files.emplace_back(g.gl_pathv[i]);
  globfree(&g);
  if (files.empty()) throw ConfigError("--reports `" + pattern + "` matches no files");

  std::vector<ProvenanceReport> reports;
  std::set<std::size_t> clients;
  for (const auto& f : files) {
    try {
      reports.push_back(report_from_json(read_file(f)));
    } catch (const IoError& e) {
      throw IoError(f + ": " + e.what());
    }
    for (const auto& [id, share] : reports.back().normalized) clients.insert(id);
  }
  std::ranges::sort(reports, {}, &ProvenanceReport::input_id);
  const std::vector<std::size_t> participants(clients.begin(), clients.end());
  const HeatmapMatrix m = heatmap(reports, participants, true);
  const fs::path path(out_file);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_file_atomic(path, m.to_csv());
  out << "heatmap of " << reports.size() << " reports (" << m.labels.size() << " labels) written to " << out_file << "\n";
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Deterministic federated-learning simulator with neuron-level provenance", "neurontrace"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kToolVersion));

  std::string config_path, out_dir, run_dir, inputs, reports_glob, experiment;
  bool force = false, detail = false;
  std::size_t round = 0;
  double threshold = 0.0;

  auto* train = app.add_subcommand("train", "Run federated training and write a run directory");
  train->add_option("--config", config_path, "Config file")->required();
  train->add_option("--out", out_dir, "Run directory")->required();
  train->add_flag("--force", force, "Overwrite a non-empty run directory");

  auto* trace = app.add_subcommand("trace", "Trace test inputs of a recorded round back to clients");
  trace->add_option("--run", run_dir, "Run directory")->required();
  trace->add_option("--round", round, "Round index")->required();
  trace->add_option("--inputs", inputs, "Indices (0,3,7), label=K, all-correct or all-wrong")->required();
  trace->add_option("--t", threshold, "Activation threshold");
  trace->add_flag("--detail", detail, "Include per-neuron contributions");
  trace->add_option("--out", out_dir, "Report directory (default: <run>/traces/round_NNN)");
  trace->add_flag("--force", force, "Overwrite a non-empty report directory");

  auto* exp = app.add_subcommand("experiment", "Run an evaluation protocol");
  exp->add_option("name", experiment, "forgetting | cross-silo | fault-localization")->required();
  exp->add_option("--config", config_path, "Config file")->required();
  exp->add_option("--out", out_dir, "Output directory")->required();
  exp->add_flag("--force", force, "Overwrite existing results");

  auto* report = app.add_subcommand("report", "Aggregate provenance reports");
  auto* hm = report->add_subcommand("heatmap", "Label x client mean-share CSV");
  report->require_subcommand(1);
  hm->add_option("--reports", reports_glob, "Glob of report JSON files")->required();
  hm->add_option("--out", out_dir, "CSV file")->required();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForVersion&) {
    out << kToolVersion << "\n";
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      out << app.help();
      return kExitOk;
    }
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }

  try {
    if (*train) return cmd_train(config_path, out_dir, force, out);
    if (*trace) return cmd_trace(run_dir, round, inputs, threshold, detail, out_dir, force, out, err);
    if (*exp) return cmd_experiment(experiment, config_path, out_dir, force, out);
    if (*hm) return cmd_report_heatmap(reports_glob, out_dir, out);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const IoError& e) {
    err << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const DegenerateResult& e) {
    err << "error: " << e.what() << "\n";
    return kExitDegenerate;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return kExitUsage;
}

int run_cli(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run_cli(args, std::cout, std::cerr);
}

}  // namespace neurontrace
