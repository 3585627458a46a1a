#include "neurontrace/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <charconv>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "neurontrace/error.hpp"

namespace neurontrace {

namespace {

std::string trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return std::string(s);
}

std::vector<std::string> split(std::string_view text, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (;;) {
    std::size_t pos = text.find(sep, start);
    out.push_back(trim(text.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
    if (pos == std::string_view::npos) return out;
    start = pos + 1;
  }
}

std::string format_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

std::string join(const std::vector<std::size_t>& xs, char sep) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) out += sep;
    out += std::to_string(xs[i]);
  }
  return out;
}

// Typed access to the flat key map; remembers which keys were consumed so
// leftovers can be reported as unknown.
class Reader {
 public:
  explicit Reader(const std::map<std::string, std::string>& values) : values_(values) {}

  bool has(const std::string& key) const { return values_.contains(key); }

  std::string text(const std::string& key, std::string fallback) {
    used_.insert(key);
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  std::string required_text(const std::string& key) {
    if (!has(key)) throw ConfigError("config field `" + key + "` is required");
    return text(key, {});
  }

  std::uint64_t count(const std::string& key, std::optional<std::uint64_t> fallback, bool allow_zero = false) {
    if (!has(key)) {
      used_.insert(key);
      if (!fallback) throw ConfigError("config field `" + key + "` is required");
      return *fallback;
    }
    const std::string s = text(key, {});
    std::uint64_t v = 0;
    auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || end != s.data() + s.size() || (!allow_zero && v == 0))
      throw ConfigError("config field `" + key + "`: expected a " + (allow_zero ? "non-negative" : "positive") +
                        " integer, got '" + s + "'");
    return v;
  }

  double real(const std::string& key, double fallback) {
    if (!has(key)) {
      used_.insert(key);
      return fallback;
    }
    const std::string s = text(key, {});
    double v = 0.0;
    auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || end != s.data() + s.size() || !std::isfinite(v))
      throw ConfigError("config field `" + key + "`: expected a number, got '" + s + "'");
    return v;
  }

  std::vector<std::size_t> list(const std::string& key, char sep = ',') {
    std::vector<std::size_t> out;
    const std::string s = text(key, {});
    if (trim(s).empty()) return out;
    for (const auto& piece : split(s, sep)) {
      std::size_t v = 0;
      auto [end, ec] = std::from_chars(piece.data(), piece.data() + piece.size(), v);
      if (ec != std::errc() || end != piece.data() + piece.size())
        throw ConfigError("config field `" + key + "`: bad list entry '" + piece + "'");
      out.push_back(v);
    }
    return out;
  }

  void reject_unknown() const {
    for (const auto& [key, value] : values_)
      if (!used_.contains(key)) throw ConfigError("config field `" + key + "` is not recognised");
  }

 private:
  const std::map<std::string, std::string>& values_;
  std::set<std::string> used_;
};

std::filesystem::path resolve(const std::string& p, const std::filesystem::path& base) {
  if (p.empty()) return {};
  std::filesystem::path path(p);
  if (path.is_relative() && !base.empty()) path = base / path;
  return path.lexically_normal();
}

}  // namespace

std::string fusion_name(Fusion f) { return f == Fusion::FedAvg ? "fedavg" : "fedprox"; }

ModelArch FLConfig::arch() const {
  if (model_preset == "small_cnn") return ModelArch::small_cnn(data.num_classes);
  if (model_preset == "lenet") return ModelArch::lenet(data.num_classes);
  if (model_preset == "mlp") {
    if (input_shape.empty()) throw ConfigError("config field `model.input_shape` is required for the mlp preset");
    return ModelArch::mlp(numel(input_shape), hidden, data.num_classes);
  }
  if (!model_preset.empty()) throw ConfigError("config field `model.preset`: unknown preset '" + model_preset + "'");
  if (input_shape.empty()) throw ConfigError("config field `model.input_shape` is required with `model.layers`");
  return ModelArch::parse(model_layers, input_shape);
}

void FLConfig::validate() const {
  if (rounds > 100000) throw ConfigError("config field `run.rounds` is unreasonably large");
  if (num_clients == 0) throw ConfigError("config field `run.num_clients` must be positive");
  if (clients_per_round == 0 || clients_per_round > num_clients)
    throw ConfigError("config field `run.clients_per_round` must lie in [1, num_clients]");
  for (std::size_t c : exclude_clients)
    if (c >= num_clients) throw ConfigError("config field `run.exclude_clients`: client " + std::to_string(c) + " does not exist");
  if (!(lr >= 0.0)) throw ConfigError("config field `train.lr` must be non-negative");
  if (!(mu >= 0.0)) throw ConfigError("config field `train.mu` must be non-negative");
  if (local_epochs == 0) throw ConfigError("config field `train.local_epochs` must be positive");
  if (batch_size == 0) throw ConfigError("config field `train.batch_size` must be positive");
  if (!(init_scale >= 0.0)) throw ConfigError("config field `train.init_scale` must be non-negative");
  if (data.num_classes < 2) throw ConfigError("config field `data.num_classes` must be at least 2");
  if (data.partition == PartitionScheme::Dirichlet && !(data.alpha > 0.0))
    throw ConfigError("config field `data.alpha` must be positive");
  if (data.partition == PartitionScheme::LabelGroups) {
    if (data.label_groups.empty()) throw ConfigError("config field `data.label_groups` is required for label_groups partitioning");
    if (data.label_groups.size() * data.clients_per_group != num_clients)
      throw ConfigError("config field `run.num_clients` must equal label group count times `data.clients_per_group`");
    std::set<std::size_t> seen;
    for (const auto& g : data.label_groups)
      for (std::size_t l : g) {
        if (l >= data.num_classes) throw ConfigError("config field `data.label_groups`: label " + std::to_string(l) + " out of range");
        if (!seen.insert(l).second)
          throw ConfigError("config field `data.label_groups`: label " + std::to_string(l) + " appears in more than one group");
      }
  }
  if (data.source == DataSource::Idx) {
    for (const auto* p : {&data.train_images, &data.train_labels, &data.test_images, &data.test_labels})
      if (p->empty()) throw ConfigError("config field `data.train_images`/`train_labels`/`test_images`/`test_labels` are required for idx data");
  }
  if (fault) {
    if (!(fault->fraction > 0.0 && fault->fraction <= 1.0))
      throw ConfigError("config field `fault.fraction` must lie in (0, 1]");
    if (fault->mapping.empty()) throw ConfigError("config field `fault.mapping` is required");
    for (const auto& [from, to] : fault->mapping)
      if (from >= data.num_classes || to >= data.num_classes)
        throw ConfigError("config field `fault.mapping`: class out of range");
    if (fault->per_round > clients_per_round)
      throw ConfigError("config field `fault.per_round` exceeds `run.clients_per_round`");
  }
  const ModelArch a = arch();
  if (a.num_classes() != data.num_classes)
    throw ConfigError("config field `model.layers`: final layer has " + std::to_string(a.num_classes()) +
                      " outputs but `data.num_classes` is " + std::to_string(data.num_classes));
}

std::map<std::string, std::string> FLConfig::to_values() const {
  std::map<std::string, std::string> v;
  v["run.seed"] = std::to_string(seed);
  v["run.rounds"] = std::to_string(rounds);
  v["run.num_clients"] = std::to_string(num_clients);
  v["run.clients_per_round"] = std::to_string(clients_per_round);
  v["run.exclude_clients"] = join(exclude_clients, ',');
  v["run.exclude_from_round"] = std::to_string(exclude_from_round);
  v["train.fusion"] = fusion_name(fusion);
  v["train.mu"] = format_double(mu);
  v["train.lr"] = format_double(lr);
  v["train.local_epochs"] = std::to_string(local_epochs);
  v["train.batch_size"] = std::to_string(batch_size);
  v["train.init_scale"] = format_double(init_scale);
  if (!model_preset.empty()) v["model.preset"] = model_preset;
  if (!model_layers.empty()) v["model.layers"] = model_layers;
  if (!input_shape.empty()) v["model.input_shape"] = shape_string(input_shape);
  v["model.hidden"] = join(hidden, ',');
  v["data.num_classes"] = std::to_string(data.num_classes);
  if (data.source == DataSource::Blobs) {
    v["data.source"] = "blobs";
    v["data.dim"] = std::to_string(data.dim);
    v["data.spread"] = format_double(data.spread);
    v["data.train_per_class"] = std::to_string(data.train_per_class);
    v["data.test_per_class"] = std::to_string(data.test_per_class);
  } else {
    v["data.source"] = "idx";
    v["data.train_images"] = data.train_images.string();
    v["data.train_labels"] = data.train_labels.string();
    v["data.test_images"] = data.test_images.string();
    v["data.test_labels"] = data.test_labels.string();
    v["data.max_train_per_class"] = std::to_string(data.max_train_per_class);
    v["data.max_test_per_class"] = std::to_string(data.max_test_per_class);
  }
  if (data.partition == PartitionScheme::Dirichlet) {
    v["data.partition"] = "dirichlet";
    v["data.alpha"] = format_double(data.alpha);
  } else {
    v["data.partition"] = "label_groups";
    std::string groups;
    for (std::size_t g = 0; g < data.label_groups.size(); ++g) {
      if (g) groups += ';';
      groups += join(data.label_groups[g], ',');
    }
    v["data.label_groups"] = groups;
    v["data.clients_per_group"] = std::to_string(data.clients_per_group);
  }
  if (fault) {
    v["fault.fraction"] = format_double(fault->fraction);
    std::string m;
    for (const auto& [from, to] : fault->mapping) {
      if (!m.empty()) m += ',';
      m += std::to_string(from) + ":" + std::to_string(to);
    }
    v["fault.mapping"] = m;
    v["fault.per_round"] = std::to_string(fault->per_round);
  }
  v["experiment.threshold"] = format_double(experiment.threshold);
  v["experiment.trace_limit"] = std::to_string(experiment.trace_limit);
  v["experiment.exclude_group"] = std::to_string(experiment.exclude_group);
  v["experiment.exclude_from_round"] = std::to_string(experiment.exclude_from_round);
  return v;
}

std::string FLConfig::to_ini() const {
  std::string out;
  std::string section;
  for (const auto& [key, value] : to_values()) {
    const auto dot = key.find('.');
    const std::string sec = key.substr(0, dot);
    if (sec != section) {
      if (!section.empty()) out += '\n';
      out += "[" + sec + "]\n";
      section = sec;
    }
    out += key.substr(dot + 1) + " = " + value + "\n";
  }
  return out;
}

FLConfig parse_config_values(const std::map<std::string, std::string>& values, const std::filesystem::path& base_dir) {
  Reader r(values);
  FLConfig c;
  c.seed = r.count("run.seed", std::nullopt, true);
  c.rounds = r.count("run.rounds", std::nullopt, true);
  c.num_clients = r.count("run.num_clients", std::nullopt);
  c.clients_per_round = r.count("run.clients_per_round", std::min<std::size_t>(10, c.num_clients));
  c.exclude_clients = r.list("run.exclude_clients");
  c.exclude_from_round = r.count("run.exclude_from_round", 0, true);

  const std::string fusion = r.text("train.fusion", "fedavg");
  if (fusion == "fedavg")
    c.fusion = Fusion::FedAvg;
  else if (fusion == "fedprox")
    c.fusion = Fusion::FedProx;
  else
    throw ConfigError("config field `train.fusion`: expected fedavg or fedprox, got '" + fusion + "'");
  c.mu = r.real("train.mu", 0.01);
  c.lr = r.real("train.lr", 0.01);
  c.local_epochs = r.count("train.local_epochs", 4);
  c.batch_size = r.count("train.batch_size", 16);
  c.init_scale = r.real("train.init_scale", 0.05);

  c.model_preset = r.text("model.preset", "");
  c.model_layers = r.text("model.layers", "");
  if (c.model_preset.empty() && c.model_layers.empty())
    throw ConfigError("config field `model.preset` or `model.layers` is required");
  if (r.has("model.input_shape")) {
    for (const auto& piece : split(r.text("model.input_shape", ""), 'x')) {
      std::size_t v = 0;
      auto [end, ec] = std::from_chars(piece.data(), piece.data() + piece.size(), v);
      if (ec != std::errc() || end != piece.data() + piece.size() || v == 0)
        throw ConfigError("config field `model.input_shape`: expected e.g. 1x28x28");
      c.input_shape.push_back(v);
    }
  }
  if (r.has("model.hidden")) c.hidden = r.list("model.hidden");

  const std::string source = r.required_text("data.source");
  c.data.num_classes = r.count("data.num_classes", 10);
  if (source == "blobs") {
    c.data.source = DataSource::Blobs;
    c.data.dim = r.count("data.dim", 16);
    c.data.spread = r.real("data.spread", 0.1);
    c.data.train_per_class = r.count("data.train_per_class", 100);
    c.data.test_per_class = r.count("data.test_per_class", 20);
    if (c.model_preset == "mlp" && c.input_shape.empty()) c.input_shape = {c.data.dim};
  } else if (source == "idx") {
    c.data.source = DataSource::Idx;
    c.data.train_images = resolve(r.text("data.train_images", ""), base_dir);
    c.data.train_labels = resolve(r.text("data.train_labels", ""), base_dir);
    c.data.test_images = resolve(r.text("data.test_images", ""), base_dir);
    c.data.test_labels = resolve(r.text("data.test_labels", ""), base_dir);
    c.data.max_train_per_class = r.count("data.max_train_per_class", 0, true);
    c.data.max_test_per_class = r.count("data.max_test_per_class", 0, true);
    if (c.model_preset == "mlp" && c.input_shape.empty()) c.input_shape = {28 * 28};
  } else {
    throw ConfigError("config field `data.source`: expected blobs or idx, got '" + source + "'");
  }
  const std::string partition = r.text("data.partition", "dirichlet");
  if (partition == "dirichlet") {
    c.data.partition = PartitionScheme::Dirichlet;
    c.data.alpha = r.real("data.alpha", 0.1);
  } else if (partition == "label_groups") {
    c.data.partition = PartitionScheme::LabelGroups;
    for (const auto& group : split(r.text("data.label_groups", ""), ';')) {
      std::map<std::string, std::string> one{{"g", group}};
      Reader gr(one);
      auto labels = gr.list("g");
      if (labels.empty()) throw ConfigError("config field `data.label_groups`: empty group");
      c.data.label_groups.push_back(std::move(labels));
    }
    c.data.clients_per_group = r.count("data.clients_per_group", 1);
  } else {
    throw ConfigError("config field `data.partition`: expected dirichlet or label_groups, got '" + partition + "'");
  }

  if (r.has("fault.fraction") || r.has("fault.mapping") || r.has("fault.per_round")) {
    FaultConfig f;
    f.fraction = r.real("fault.fraction", 0.2);
    for (const auto& pair : split(r.text("fault.mapping", ""), ',')) {
      if (pair.empty()) continue;
      auto ends = split(pair, ':');
      std::map<std::string, std::string> one{{"from", ends.at(0)}, {"to", ends.size() > 1 ? ends[1] : ""}};
      Reader pr(one);
      if (ends.size() != 2) throw ConfigError("config field `fault.mapping`: expected from:to pairs, got '" + pair + "'");
      f.mapping[pr.count("from", std::nullopt, true)] = pr.count("to", std::nullopt, true);
    }
    f.per_round = r.count("fault.per_round", 2, true);
    c.fault = f;
  }

  c.experiment.threshold = r.real("experiment.threshold", 0.0);
  c.experiment.trace_limit = r.count("experiment.trace_limit", 200);
  c.experiment.exclude_group = r.count("experiment.exclude_group", 0, true);
  c.experiment.exclude_from_round = r.count("experiment.exclude_from_round", 11);

  r.reject_unknown();
  c.validate();
  return c;
}

FLConfig parse_config(const std::string& text, const std::filesystem::path& base_dir) {
  boost::property_tree::ptree tree;
  std::istringstream in(text);
  try {
    boost::property_tree::ini_parser::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError("config syntax error at line " + std::to_string(e.line()) + ": " + e.message());
  }
  std::map<std::string, std::string> values;
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty())
      throw ConfigError("config key `" + section + "` must live inside a [section]");
    for (const auto& [key, value] : body) values[section + "." + key] = trim(value.data());
  }
  return parse_config_values(values, base_dir);
}

FLConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str(), path.parent_path());
}

}  // namespace neurontrace
