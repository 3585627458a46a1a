#include "neurontrace/flsim.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <thread>

#include <nlohmann/json.hpp>

#include "neurontrace/checkpoint.hpp"
#include "neurontrace/error.hpp"
#include "neurontrace/rng.hpp"

namespace neurontrace {

namespace {

constexpr std::uint64_t kRoundTag = 0x524f554e44ULL;      // "ROUND"
constexpr std::uint64_t kClientTag = 0x434c49454e54ULL;   // "CLIENT"
constexpr std::uint64_t kInitTag = 0x494e4954ULL;         // "INIT"
constexpr std::uint64_t kDataTag = 0x44415441ULL;         // "DATA"
constexpr std::uint64_t kPartitionTag = 0x50415254ULL;    // "PART"
constexpr std::uint64_t kFaultTag = 0x4641554c54ULL;      // "FAULT"

std::string round_dir_name(std::size_t round) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "round_%03zu", round);
  return buf;
}

std::vector<std::size_t> sample_ids(std::vector<std::size_t> ids, std::size_t k, std::uint64_t seed) {
  Rng rng(seed);
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + rng.uniform_index(ids.size() - i);
    std::swap(ids[i], ids[j]);
  }
  ids.resize(k);
  std::ranges::sort(ids);
  return ids;
}

}  // namespace

// ---------------------------------------------------------------------------

std::vector<std::size_t> sample_clients(std::span<const ClientMeta> pool, std::size_t k, std::size_t batch_size,
                                        std::uint64_t round_seed) {
  std::vector<std::size_t> eligible;
  for (const auto& c : pool)
    if (c.n_k >= batch_size) eligible.push_back(c.client_id);
  std::ranges::sort(eligible);
  if (eligible.size() < k)
    throw ConfigError("only " + std::to_string(eligible.size()) + " clients hold at least " + std::to_string(batch_size) +
                      " samples; cannot select " + std::to_string(k));
  return sample_ids(std::move(eligible), k, round_seed);
}

void assign_weights(std::vector<ClientMeta>& participants) {
  std::size_t n = 0;
  for (const auto& c : participants) n += c.n_k;
  if (n == 0) throw ConfigError("participants hold no data");
  for (auto& c : participants) c.p_k = static_cast<double>(c.n_k) / static_cast<double>(n);
}

ModelWeights fuse(std::span<const ModelWeights> client_weights, std::span<const ClientMeta> metas) {
  if (client_weights.empty() || client_weights.size() != metas.size())
    throw ConfigError("fuse: need one weight set per client metadata entry");
  double total = 0.0;
  for (const auto& m : metas) total += m.p_k;
  if (std::abs(total - 1.0) > 1e-12) throw ConfigError("fuse: client weights p_k do not sum to 1");

  std::vector<std::size_t> order(metas.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::ranges::sort(order, [&](std::size_t a, std::size_t b) { return metas[a].client_id < metas[b].client_id; });

  // Accumulator starts at p_first * w_first so a single client comes back bit-for-bit.
  ModelWeights out = client_weights[order[0]];
  const double p0 = metas[order[0]].p_k;
  for (auto& p : out.params) {
    for (double& v : p.weight.data) v *= p0;
    for (double& v : p.bias.data) v *= p0;
  }
  for (std::size_t n = 1; n < order.size(); ++n) {
    const std::size_t idx = order[n];
    const ModelWeights& w = client_weights[idx];
    const double pk = metas[idx].p_k;
    if (w.params.size() != out.params.size()) throw ConfigError("fuse: client models differ in layer count");
    for (std::size_t j = 0; j < w.params.size(); ++j) {
      auto accumulate = [&](Tensor& acc, const Tensor& t) {
        if (t.shape != acc.shape) throw ConfigError("fuse: client models differ in tensor shape");
        for (std::size_t i = 0; i < t.size(); ++i) acc[i] += pk * t[i];
      };
      accumulate(out.params[j].weight, w.params[j].weight);
      accumulate(out.params[j].bias, w.params[j].bias);
    }
  }
  return out;
}

EvalResult evaluate(const ModelArch& arch, const ModelWeights& weights, const Dataset& test_set) {
  if (test_set.count() == 0) throw ConfigError("evaluate: empty test set");
  std::vector<std::size_t> predicted(test_set.count());
  parallel_for(test_set.count(), [&](std::size_t row) { predicted[row] = predict(arch, weights, test_set.sample(row)); });

  EvalResult r;
  const std::size_t classes = std::max(arch.num_classes(), test_set.num_classes);
  r.label_counts.assign(classes, 0);
  std::vector<std::size_t>& correct = r.label_correct;
  correct.assign(classes, 0);
  for (std::size_t row = 0; row < test_set.count(); ++row) {
    const std::size_t label = test_set.labels[row];
    ++r.label_counts[label];
    if (predicted[row] == label) {
      ++correct[label];
      ++r.correct;
    }
  }
  r.total = test_set.count();
  r.predictions = std::move(predicted);
  r.overall = 100.0 * static_cast<double>(r.correct) / static_cast<double>(r.total);
  for (std::size_t l = 0; l < classes; ++l) {
    if (r.label_counts[l] == 0)
      r.per_label.emplace_back(std::nullopt);
    else
      r.per_label.emplace_back(100.0 * static_cast<double>(correct[l]) / static_cast<double>(r.label_counts[l]));
  }
  return r;
}

std::size_t worker_count() {
  if (const char* env = std::getenv("NEURONTRACE_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) return static_cast<std::size_t>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min(worker_count(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < n; i = next++) {
          try {
            fn(i);
          } catch (...) {
            std::scoped_lock lock(failure_mutex);
            if (!failure) failure = std::current_exception();
          }
        }
      });
    }
  }
  if (failure) std::rethrow_exception(failure);
}

// ---------------------------------------------------------------------------
// Federation

std::pair<Dataset, Dataset> load_datasets(const FLConfig& config) {
  const auto& d = config.data;
  if (d.source == DataSource::Blobs) {
    Dataset all = synth_blobs(d.num_classes, d.train_per_class + d.test_per_class, d.dim, d.spread,
                              derive_seed({config.seed, kDataTag}));
    return split_per_class(all, d.train_per_class, d.test_per_class);
  }
  Dataset train = load_idx(d.train_images, d.train_labels, d.num_classes);
  Dataset test = load_idx(d.test_images, d.test_labels, d.num_classes);
  if (d.max_train_per_class) train = take_per_class(train, d.max_train_per_class);
  if (d.max_test_per_class) test = take_per_class(test, d.max_test_per_class);
  return {std::move(train), std::move(test)};
}

Federation::Federation(FLConfig config) : config_(std::move(config)), arch_(config_.arch()) {
  config_.validate();
  auto [train, test] = load_datasets(config_);
  train_ = std::move(train);
  test_ = std::move(test);
  if (train_.sample_size() != numel(arch_.input_shape()))
    throw ConfigError("dataset samples hold " + std::to_string(train_.sample_size()) + " values but the model expects " +
                      shape_string(arch_.input_shape()));
  if (test_.count() == 0) throw ConfigError("test set is empty");

  const std::uint64_t part_seed = derive_seed({config_.seed, kPartitionTag});
  if (config_.data.partition == PartitionScheme::Dirichlet)
    partitions_ = dirichlet_partition(train_, config_.num_clients, config_.data.alpha, part_seed);
  else
    partitions_ = label_group_partition(train_, config_.data.label_groups, config_.data.clients_per_group, part_seed);

  overlays_.resize(config_.num_clients);
  if (config_.fault) {
    faulty_ = choose_faulty_clients(config_.num_clients, config_.fault->fraction, derive_seed({config_.seed, kFaultTag}));
    for (std::size_t id : faulty_) overlays_[id] = flip_labels(partitions_[id], train_, config_.fault->mapping);
  }
  global_ = ModelWeights::uniform(arch_, derive_seed({config_.seed, kInitTag}), -config_.init_scale, config_.init_scale);
}

bool Federation::is_faulty(std::size_t client_id) const { return std::ranges::binary_search(faulty_, client_id); }

std::vector<std::size_t> Federation::client_labels(std::size_t client_id) const {
  if (overlays_.at(client_id)) return overlays_[client_id]->labels;
  std::vector<std::size_t> labels;
  for (std::size_t row : partitions_.at(client_id).indices) labels.push_back(train_.labels[row]);
  return labels;
}

std::vector<ClientMeta> Federation::eligible_pool(std::size_t round_index) const {
  const bool excluding = config_.exclude_from_round > 0 && round_index >= config_.exclude_from_round;
  std::vector<ClientMeta> pool;
  for (const auto& p : partitions_) {
    if (excluding && std::ranges::find(config_.exclude_clients, p.client_id) != config_.exclude_clients.end()) continue;
    pool.push_back({p.client_id, p.indices.size(), 0.0, is_faulty(p.client_id)});
  }
  return pool;
}

std::vector<ClientMeta> Federation::select_participants(std::size_t round_index) const {
  const auto pool = eligible_pool(round_index);
  const std::uint64_t round_seed = derive_seed({config_.seed, kRoundTag, round_index});
  const std::size_t batch = config_.batch_size;
  std::vector<std::size_t> chosen;

  if (config_.fault && config_.fault->per_round > 0) {
    std::vector<ClientMeta> faulty, clean;
    for (const auto& c : pool) (c.faulty ? faulty : clean).push_back(c);
    const std::size_t f = config_.fault->per_round;
    chosen = sample_clients(faulty, f, batch, derive_seed({round_seed, 1}));
    auto rest = sample_clients(clean, config_.clients_per_round - f, batch, derive_seed({round_seed, 2}));
    chosen.insert(chosen.end(), rest.begin(), rest.end());
    std::ranges::sort(chosen);
  } else {
    std::size_t k = config_.clients_per_round;
    if (config_.exclude_from_round > 0 && round_index >= config_.exclude_from_round) {
      const auto eligible = std::ranges::count_if(pool, [&](const ClientMeta& c) { return c.n_k >= batch; });
      k = std::min<std::size_t>(k, static_cast<std::size_t>(eligible));
    }
    chosen = sample_clients(pool, k, batch, round_seed);
  }

  std::vector<ClientMeta> out;
  for (std::size_t id : chosen)
    out.push_back(*std::ranges::find_if(pool, [&](const ClientMeta& c) { return c.client_id == id; }));
  assign_weights(out);
  return out;
}

RoundResult Federation::run_round() {
  const std::size_t round = next_round_;
  RoundResult result;
  result.log.round_index = round;
  result.log.participants = select_participants(round);
  const auto& participants = result.log.participants;

  result.client_weights.resize(participants.size());
  parallel_for(participants.size(), [&](std::size_t i) {
    const std::size_t id = participants[i].client_id;
    LabeledBatchSource src = training_source(train_, partitions_[id], overlays_[id] ? &*overlays_[id] : nullptr);
    TrainHyper hyper{config_.lr, config_.local_epochs, config_.batch_size,
                     derive_seed({config_.seed, kClientTag, round, id})};
    std::optional<Proximal> prox;
    if (config_.fusion == Fusion::FedProx) prox = Proximal{config_.mu, &global_};
    result.client_weights[i] = train_local(arch_, global_, src, hyper, prox);
  });

  result.global = fuse(result.client_weights, participants);
  result.eval = evaluate(arch_, result.global, test_);
  result.log.accuracy = result.eval.overall;
  result.log.per_label_accuracy = result.eval.per_label;

  const std::string dir = round_dir_name(round);
  result.log.global_checkpoint = dir + "/global.ckpt";
  for (const auto& c : participants) result.log.client_checkpoints.push_back(dir + "/client_" + std::to_string(c.client_id) + ".ckpt");

  global_ = result.global;
  ++next_round_;
  return result;
}

// ---------------------------------------------------------------------------
// Run directory

namespace {

using ojson = nlohmann::ordered_json;

ojson round_to_json(const RoundLog& log) {
  ojson r;
  r["round"] = log.round_index;
  ojson parts = ojson::array();
  for (const auto& c : log.participants)
    parts.push_back({{"client_id", c.client_id}, {"n_k", c.n_k}, {"p_k", c.p_k}, {"faulty", c.faulty}});
  r["participants"] = std::move(parts);
  r["global_checkpoint"] = log.global_checkpoint;
  r["client_checkpoints"] = log.client_checkpoints;
  r["accuracy"] = log.accuracy;
  ojson per = ojson::array();
  for (const auto& a : log.per_label_accuracy) per.push_back(a ? ojson(*a) : ojson(nullptr));
  r["per_label_accuracy"] = std::move(per);
  return r;
}

std::string manifest_text(const FLConfig& config, const ModelArch& arch, const std::vector<RoundLog>& logs) {
  ojson m;
  m["tool"] = "neurontrace";
  m["version"] = kToolVersion;
  m["seed"] = config.seed;
  ojson cfg = ojson::object();
  for (const auto& [k, v] : config.to_values()) cfg[k] = v;
  m["config"] = std::move(cfg);
  char fp[32];
  std::snprintf(fp, sizeof fp, "%016llx", static_cast<unsigned long long>(arch.fingerprint()));
  m["arch"] = {{"description", arch.describe()}, {"fingerprint", fp}};
  m["initial_checkpoint"] = round_dir_name(0) + "/global.ckpt";
  ojson rounds = ojson::array();
  for (const auto& log : logs) rounds.push_back(round_to_json(log));
  m["rounds"] = std::move(rounds);
  return m.dump(2) + "\n";
}

}  // namespace

std::vector<RoundLog> run_training(const FLConfig& config, const std::filesystem::path& out_dir,
                                   const RunOptions& options) {
  namespace fs = std::filesystem;
  std::error_code ec;
  if (fs::exists(out_dir, ec) && !fs::is_empty(out_dir, ec)) {
    if (!options.force) throw IoError(out_dir.string() + " is not empty (use --force to overwrite)");
    for (const auto& entry : fs::directory_iterator(out_dir)) fs::remove_all(entry.path());
  }
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());

  Federation fed(config);
  fs::create_directories(out_dir / round_dir_name(0));
  write_checkpoint(out_dir / round_dir_name(0) / "global.ckpt", fed.arch(), fed.global());

  std::vector<RoundLog> logs;
  write_file_atomic(out_dir / "manifest.json", manifest_text(fed.config(), fed.arch(), logs));
  for (std::size_t r = 1; r <= config.rounds; ++r) {
    RoundResult result = fed.run_round();
    fs::create_directories(out_dir / round_dir_name(r), ec);
    if (ec) throw IoError("cannot create " + (out_dir / round_dir_name(r)).string() + ": " + ec.message());
    for (std::size_t i = 0; i < result.client_weights.size(); ++i)
      write_checkpoint(out_dir / result.log.client_checkpoints[i], fed.arch(), result.client_weights[i]);
    write_checkpoint(out_dir / result.log.global_checkpoint, fed.arch(), result.global);
    logs.push_back(result.log);
    write_file_atomic(out_dir / "manifest.json", manifest_text(fed.config(), fed.arch(), logs));
    if (options.on_round) options.on_round(fed, result);
  }
  return logs;
}

const RoundLog& RunManifest::round(std::size_t index) const {
  for (const auto& r : rounds)
    if (r.round_index == index) return r;
  throw ConfigError("round " + std::to_string(index) + " is not in the run (recorded rounds: 1.." +
                    std::to_string(rounds.size()) + ")");
}

RunManifest read_manifest(const std::filesystem::path& run_dir) {
  const auto path = run_dir / "manifest.json";
  ojson m;
  try {
    m = ojson::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": " + e.what());
  }
  RunManifest out;
  try {
    std::map<std::string, std::string> values;
    for (const auto& [k, v] : m.at("config").items()) values[k] = v.get<std::string>();
    out.config = parse_config_values(values);
    out.tool_version = m.at("version").get<std::string>();
    out.initial_checkpoint = m.at("initial_checkpoint").get<std::string>();
    for (const auto& r : m.at("rounds")) {
      RoundLog log;
      log.round_index = r.at("round").get<std::size_t>();
      for (const auto& p : r.at("participants"))
        log.participants.push_back({p.at("client_id").get<std::size_t>(), p.at("n_k").get<std::size_t>(),
                                    p.at("p_k").get<double>(), p.at("faulty").get<bool>()});
      log.global_checkpoint = r.at("global_checkpoint").get<std::string>();
      log.client_checkpoints = r.at("client_checkpoints").get<std::vector<std::string>>();
      log.accuracy = r.at("accuracy").get<double>();
      for (const auto& a : r.at("per_label_accuracy"))
        log.per_label_accuracy.push_back(a.is_null() ? std::nullopt : std::optional<double>(a.get<double>()));
      out.rounds.push_back(std::move(log));
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": malformed manifest: " + e.what());
  }
  return out;
}

}  // namespace neurontrace
