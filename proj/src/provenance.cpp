#include "neurontrace/provenance.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include <nlohmann/json.hpp>

#include "neurontrace/checkpoint.hpp"
#include "neurontrace/error.hpp"

namespace neurontrace {

bool ActivatedSet::contains(NeuronId n) const { return std::ranges::binary_search(neurons, n); }

ActivatedSet activated_neurons(const ActivationTrace& trace, double t) {
  ActivatedSet set;
  set.threshold = t;
  for (std::size_t j = 0; j < trace.layers.size(); ++j) {
    const Tensor& post = trace.layers[j].post_activation;
    for (std::size_t i = 0; i < post.size(); ++i)
      if (post[i] > t) set.neurons.push_back({j, i});
  }
  return set;
}

InfluenceMap neuron_influence(const ModelArch& arch, const ModelWeights& global_weights, const ActivationTrace& trace,
                              std::size_t predicted_class, const ActivatedSet& activated) {
  const auto grads = neuron_gradients(arch, global_weights, trace, predicted_class);
  InfluenceMap map;
  for (NeuronId n : activated.neurons) map.emplace_hint(map.end(), n, grads.at(n.layer).data.at(n.index));
  return map;
}

namespace {

// w_k . z-bar + b_k for a single neuron, written out term by term.
double neuron_response(const ModelArch& arch, NeuronId neuron, const Tensor& layer_input, const LayerParams& p) {
  const auto& info = arch.param_layers().at(neuron.layer);
  const Layer& spec = arch.layers()[info.position];
  double s = 0.0;
  if (const auto* d = std::get_if<Dense>(&spec)) {
    const double* row = p.weight.data.data() + neuron.index * d->in;
    for (std::size_t i = 0; i < d->in; ++i) s += row[i] * layer_input[i];
    return s + p.bias[neuron.index];
  }
  const auto& c = std::get<Conv2d>(spec);
  const std::size_t OH = info.output_shape[1], OW = info.output_shape[2];
  const std::size_t H = info.input_shape[1], W = info.input_shape[2], K = c.kernel;
  const std::size_t oc = neuron.index / (OH * OW);
  const std::size_t oy = (neuron.index / OW) % OH;
  const std::size_t ox = neuron.index % OW;
  // The receptive-field patch of this output position is its z-bar.
  for (std::size_t ic = 0; ic < c.in_channels; ++ic)
    for (std::size_t ky = 0; ky < K; ++ky)
      for (std::size_t kx = 0; kx < K; ++kx)
        s += p.weight[((oc * c.in_channels + ic) * K + ky) * K + kx] *
             layer_input[(ic * H + oy * c.stride + ky) * W + ox * c.stride + kx];
  return s + p.bias[oc];
}

}  // namespace

double client_neuron_contribution(const ModelArch& arch, NeuronId neuron, const ActivationTrace& global_trace,
                                  const ModelWeights& client_weights, double p_k, const InfluenceMap& c) {
  auto it = c.find(neuron);
  if (it == c.end())
    throw ContractError("neuron (" + std::to_string(neuron.layer) + ", " + std::to_string(neuron.index) +
                        ") is not in the activated set");
  if (neuron.layer >= client_weights.params.size() || neuron.layer >= global_trace.layers.size())
    throw ContractError("neuron layer out of range");
  const double response =
      neuron_response(arch, neuron, global_trace.layers[neuron.layer].layer_input, client_weights.params[neuron.layer]);
  return it->second * p_k * response;
}

double client_total_contribution(const ModelArch& arch, const ActivatedSet& activated,
                                 const ActivationTrace& global_trace, const ModelWeights& client_weights, double p_k,
                                 const InfluenceMap& c) {
  double total = 0.0;
  for (NeuronId n : activated.neurons) total += client_neuron_contribution(arch, n, global_trace, client_weights, p_k, c);
  return total;
}

std::map<std::size_t, double> normalize_contributions(const std::map<std::size_t, double>& raw) {
  if (raw.empty()) throw ConfigError("normalize_contributions: no clients");
  double mx = -std::numeric_limits<double>::infinity();
  for (const auto& [id, v] : raw) {
    if (!std::isfinite(v)) throw NumericError("normalize_contributions: non-finite contribution for client " + std::to_string(id));
    mx = std::max(mx, v);
  }
  std::map<std::size_t, double> out;
  double z = 0.0;
  for (const auto& [id, v] : raw) z += (out[id] = std::exp(v - mx));
  for (auto& [id, v] : out) v /= z;
  return out;
}

ProvenanceReport trace_prediction(const ModelArch& arch, const ModelWeights& global, std::span<const TracedClient> clients,
                                  const Tensor& input, const TraceOptions& options, std::size_t input_id,
                                  std::size_t true_label, std::size_t round) {
  if (clients.empty()) throw ConfigError("trace: no participating clients");
  for (const auto& cl : clients) {
    if (!cl.weights) throw ConfigError("trace: client " + std::to_string(cl.client_id) + " has no weights");
    cl.weights->check_compatible(arch);
  }

  const ActivationTrace trace = forward(arch, global, input);
  ProvenanceReport report;
  report.input_id = input_id;
  report.round = round;
  report.true_label = true_label;
  report.predicted_label = argmax(trace.logits.values());

  const ActivatedSet activated = activated_neurons(trace, options.threshold);
  report.activated_count = activated.neurons.size();
  if (activated.neurons.empty())
    throw DegenerateResult("no neuron exceeds the activation threshold " + std::to_string(options.threshold) +
                           " for input " + std::to_string(input_id));
  const auto grads = neuron_gradients(arch, global, trace, report.predicted_label);

  // Vectorized route: each client's whole layer applied to the global layer
  // input, then masked by the activated set.
  if (options.detail) report.detail.emplace();
  for (const auto& cl : clients) {
    double total = 0.0;
    std::size_t cursor = 0;
    for (std::size_t j = 0; j < trace.layers.size(); ++j) {
      if (cursor < activated.neurons.size() && activated.neurons[cursor].layer != j) continue;
      const Tensor response = layer_response(arch, *cl.weights, j, trace.layers[j].layer_input);
      for (; cursor < activated.neurons.size() && activated.neurons[cursor].layer == j; ++cursor) {
        const NeuronId n = activated.neurons[cursor];
        const double cont = grads[j][n.index] * cl.p_k * response[n.index];
        total += cont;
        if (report.detail) (*report.detail)[n][cl.client_id] = cont;
      }
    }
    report.raw[cl.client_id] = total;
  }
  report.normalized = normalize_contributions(report.raw);
  for (const auto& [id, share] : report.normalized) report.ranking.push_back(id);
  std::ranges::stable_sort(report.ranking, [&](std::size_t a, std::size_t b) {
    return report.normalized.at(a) > report.normalized.at(b);
  });
  return report;
}

// ---------------------------------------------------------------------------

std::vector<TracedClient> LoadedRound::traced_clients() const {
  std::vector<TracedClient> out;
  for (std::size_t i = 0; i < participants.size(); ++i) out.push_back({participants[i].client_id, participants[i].p_k, &clients[i]});
  return out;
}

LoadedRound load_round(const std::filesystem::path& run_dir, const RunManifest& manifest, std::size_t round) {
  const RoundLog& log = manifest.round(round);
  LoadedRound out{round, manifest.config.arch(), {}, log.participants, {}};
  assign_weights(out.participants);
  out.global = read_checkpoint(run_dir / log.global_checkpoint, out.arch);
  for (const auto& path : log.client_checkpoints) out.clients.push_back(read_checkpoint(run_dir / path, out.arch));
  if (out.clients.size() != out.participants.size())
    throw IoError((run_dir / "manifest.json").string() + ": round " + std::to_string(round) +
                  " lists a different number of checkpoints and participants");
  return out;
}

LoadedRound load_round(const std::filesystem::path& run_dir, std::size_t round) {
  return load_round(run_dir, read_manifest(run_dir), round);
}

ProvenanceReport trace_input(const LoadedRound& round, const Tensor& input, const TraceOptions& options,
                             std::size_t input_id, std::size_t true_label) {
  const auto clients = round.traced_clients();
  return trace_prediction(round.arch, round.global, clients, input, options, input_id, true_label, round.round);
}

ProvenanceReport trace_input(const std::filesystem::path& run_dir, std::size_t round, const Tensor& input,
                             const TraceOptions& options, std::size_t input_id, std::size_t true_label) {
  return trace_input(load_round(run_dir, round), input, options, input_id, true_label);
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

using ojson = nlohmann::ordered_json;

ojson client_map(const std::map<std::size_t, double>& m) {
  ojson out = ojson::object();
  for (const auto& [id, v] : m) out[std::to_string(id)] = v;
  return out;
}

std::map<std::size_t, double> parse_client_map(const ojson& j) {
  std::map<std::size_t, double> out;
  for (const auto& [k, v] : j.items()) out[std::stoull(k)] = v.get<double>();
  return out;
}

}  // namespace

std::string report_to_json(const ProvenanceReport& report) {
  ojson j;
  j["input_id"] = report.input_id;
  j["round"] = report.round;
  j["true_label"] = report.true_label;
  j["predicted_label"] = report.predicted_label;
  j["raw"] = client_map(report.raw);
  j["normalized"] = client_map(report.normalized);
  j["ranking"] = report.ranking;
  if (report.detail) {
    ojson d = ojson::array();
    for (const auto& [n, per_client] : *report.detail)
      d.push_back({{"layer", n.layer}, {"index", n.index}, {"cont", client_map(per_client)}});
    j["detail"] = std::move(d);
  }
  return j.dump(2) + "\n";
}

ProvenanceReport report_from_json(const std::string& text) {
  try {
    const ojson j = ojson::parse(text);
    ProvenanceReport r;
    r.input_id = j.at("input_id").get<std::size_t>();
    r.round = j.at("round").get<std::size_t>();
    r.true_label = j.at("true_label").get<std::size_t>();
    r.predicted_label = j.at("predicted_label").get<std::size_t>();
    r.raw = parse_client_map(j.at("raw"));
    r.normalized = parse_client_map(j.at("normalized"));
    r.ranking = j.at("ranking").get<std::vector<std::size_t>>();
    if (j.contains("detail")) {
      r.detail.emplace();
      for (const auto& d : j.at("detail"))
        (*r.detail)[{d.at("layer").get<std::size_t>(), d.at("index").get<std::size_t>()}] = parse_client_map(d.at("cont"));
    }
    return r;
  } catch (const std::exception& e) {
    throw IoError(std::string("malformed provenance report: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Heatmaps

HeatmapMatrix heatmap(std::span<const ProvenanceReport> reports, std::span<const std::size_t> participants,
                      bool same_round) {
  HeatmapMatrix m;
  m.clients.assign(participants.begin(), participants.end());
  if (reports.empty()) return m;
  std::map<std::size_t, std::pair<std::vector<double>, std::size_t>> rows;
  for (const auto& r : reports) {
    if (same_round && r.round != reports.front().round)
      throw ConfigError("heatmap: reports come from rounds " + std::to_string(reports.front().round) + " and " +
                        std::to_string(r.round));
    auto& [sums, count] = rows[r.true_label];
    sums.resize(m.clients.size(), 0.0);
    for (std::size_t c = 0; c < m.clients.size(); ++c) {
      auto it = r.normalized.find(m.clients[c]);
      if (it == r.normalized.end())
        throw ConfigError("heatmap: report for input " + std::to_string(r.input_id) + " lacks client " +
                          std::to_string(m.clients[c]));
      sums[c] += it->second;
    }
    ++count;
  }
  for (auto& [label, acc] : rows) {
    auto& [sums, count] = acc;
    for (double& s : sums) s /= static_cast<double>(count);
    m.labels.push_back(label);
    m.cells.push_back(std::move(sums));
    m.row_counts.push_back(count);
  }
  return m;
}

std::string HeatmapMatrix::to_csv() const {
  std::string out = "label";
  for (std::size_t c : clients) out += ",client_" + std::to_string(c);
  out += '\n';
  char buf[32];
  for (std::size_t r = 0; r < labels.size(); ++r) {
    out += std::to_string(labels[r]);
    for (double v : cells[r]) {
      std::snprintf(buf, sizeof buf, ",%.17g", v);
      out += buf;
    }
    out += '\n';
  }
  return out;
}

}  // namespace neurontrace
