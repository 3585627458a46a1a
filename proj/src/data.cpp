#include "neurontrace/data.hpp"

#include <zlib.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <memory>

#include "neurontrace/error.hpp"
#include "neurontrace/rng.hpp"

namespace neurontrace {

Tensor Dataset::sample_tensor(std::size_t row) const {
  auto s = sample(row);
  return Tensor(sample_shape(), std::vector<double>(s.begin(), s.end()));
}

std::vector<std::size_t> Dataset::label_counts() const {
  std::vector<std::size_t> counts(num_classes, 0);
  for (std::size_t l : labels) ++counts[l];
  return counts;
}

Dataset Dataset::subset(std::span<const std::size_t> rows) const {
  Dataset out;
  out.num_classes = num_classes;
  Shape shape = images.shape;
  shape[0] = rows.size();
  out.images = Tensor(shape);
  const std::size_t n = sample_size();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    auto s = sample(rows[i]);
    std::copy(s.begin(), s.end(), out.images.data.begin() + static_cast<std::ptrdiff_t>(i * n));
    out.labels.push_back(labels[rows[i]]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// IDX

namespace {

struct GzCloser {
  void operator()(gzFile f) const { gzclose(f); }
};
using GzFile = std::unique_ptr<std::remove_pointer_t<gzFile>, GzCloser>;

// gzread handles both compressed and plain files.
std::vector<unsigned char> read_all(const std::filesystem::path& path) {
  GzFile f(gzopen(path.c_str(), "rb"));
  if (!f) throw IoError("cannot open " + path.string());
  std::vector<unsigned char> bytes;
  std::array<unsigned char, 1 << 16> buf{};
  for (;;) {
    int got = gzread(f.get(), buf.data(), static_cast<unsigned>(buf.size()));
    if (got < 0) throw IoError("read error in " + path.string());
    if (got == 0) break;
    bytes.insert(bytes.end(), buf.begin(), buf.begin() + got);
  }
  return bytes;
}

std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t at) {
  return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) | (std::uint32_t{b[at + 2]} << 8) |
         std::uint32_t{b[at + 3]};
}

void put_be32(std::ofstream& out, std::uint32_t v) {
  const char bytes[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                         static_cast<char>(v)};
  out.write(bytes, 4);
}

}  // namespace

Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                 std::size_t num_classes) {
  const auto img = read_all(images_path);
  if (img.size() < 16) throw IoError(images_path.string() + ": truncated IDX header");
  if (be32(img, 0) != 0x00000803)
    throw IoError(images_path.string() + ": bad IDX image magic (expected 0x00000803)");
  const std::size_t count = be32(img, 4), rows = be32(img, 8), cols = be32(img, 12);
  if (img.size() != 16 + count * rows * cols)
    throw IoError(images_path.string() + ": truncated image data (header declares " + std::to_string(count) +
                  " images of " + std::to_string(rows) + "x" + std::to_string(cols) + ")");

  const auto lab = read_all(labels_path);
  if (lab.size() < 8) throw IoError(labels_path.string() + ": truncated IDX header");
  if (be32(lab, 0) != 0x00000801)
    throw IoError(labels_path.string() + ": bad IDX label magic (expected 0x00000801)");
  const std::size_t label_count = be32(lab, 4);
  if (lab.size() != 8 + label_count) throw IoError(labels_path.string() + ": truncated label data");
  if (label_count != count)
    throw IoError(labels_path.string() + ": holds " + std::to_string(label_count) + " labels but " +
                  images_path.string() + " holds " + std::to_string(count) + " images");

  Dataset out;
  out.num_classes = num_classes;
  out.images = Tensor({count, rows, cols});
  for (std::size_t i = 0; i < count * rows * cols; ++i) out.images[i] = static_cast<double>(img[16 + i]) / 255.0;
  out.labels.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    out.labels[i] = lab[8 + i];
    if (out.labels[i] >= num_classes)
      throw IoError(labels_path.string() + ": label " + std::to_string(out.labels[i]) + " at row " +
                    std::to_string(i) + " exceeds " + std::to_string(num_classes) + " classes");
  }
  return out;
}

void write_idx(const Dataset& data, const std::filesystem::path& images_path,
               const std::filesystem::path& labels_path) {
  if (data.images.rank() != 3) throw ConfigError("write_idx: samples must be H x W");
  std::ofstream img(images_path, std::ios::binary);
  if (!img) throw IoError("cannot write " + images_path.string());
  put_be32(img, 0x00000803);
  for (std::size_t d : data.images.shape) put_be32(img, static_cast<std::uint32_t>(d));
  for (double v : data.images.data)
    img.put(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0))));
  std::ofstream lab(labels_path, std::ios::binary);
  if (!lab) throw IoError("cannot write " + labels_path.string());
  put_be32(lab, 0x00000801);
  put_be32(lab, static_cast<std::uint32_t>(data.count()));
  for (std::size_t l : data.labels) lab.put(static_cast<char>(l));
  if (!img || !lab) throw IoError("write failed for " + images_path.string());
}

// ---------------------------------------------------------------------------
// Synthetic data and splits

Dataset synth_blobs(std::size_t num_classes, std::size_t per_class, std::size_t dim, double spread,
                    std::uint64_t seed) {
  if (num_classes == 0 || per_class == 0 || dim == 0) throw ConfigError("synth_blobs: sizes must be positive");
  if (!(spread >= 0.0)) throw ConfigError("synth_blobs: spread must be non-negative");
  Rng rng(seed);
  std::vector<double> centres(num_classes * dim);
  for (double& c : centres) c = rng.uniform(0.2, 0.8);

  Dataset out;
  out.num_classes = num_classes;
  out.images = Tensor({num_classes * per_class, dim});
  out.labels.resize(num_classes * per_class);
  for (std::size_t c = 0; c < num_classes; ++c) {
    for (std::size_t i = 0; i < per_class; ++i) {
      const std::size_t row = c * per_class + i;
      out.labels[row] = c;
      for (std::size_t d = 0; d < dim; ++d) {
        const double noise = spread > 0.0 ? spread * rng.normal() : 0.0;
        out.images[row * dim + d] = std::clamp(centres[c * dim + d] + noise, 0.0, 1.0);
      }
    }
  }
  return out;
}

std::pair<Dataset, Dataset> split_per_class(const Dataset& data, std::size_t train_per_class,
                                            std::size_t test_per_class) {
  std::vector<std::size_t> seen(data.num_classes, 0);
  std::vector<std::size_t> train, test;
  for (std::size_t row = 0; row < data.count(); ++row) {
    const std::size_t k = seen[data.labels[row]]++;
    if (k < train_per_class)
      train.push_back(row);
    else if (k < train_per_class + test_per_class)
      test.push_back(row);
  }
  return {data.subset(train), data.subset(test)};
}

Dataset take_per_class(const Dataset& data, std::size_t max_per_class) {
  return split_per_class(data, max_per_class, 0).first;
}

// ---------------------------------------------------------------------------
// Partitioning

namespace {

std::vector<std::vector<std::size_t>> rows_by_class(const Dataset& data) {
  std::vector<std::vector<std::size_t>> rows(data.num_classes);
  for (std::size_t row = 0; row < data.count(); ++row) rows[data.labels[row]].push_back(row);
  return rows;
}

// Integer counts summing to `total` whose ratios follow `shares`; leftover
// units go to the largest fractional parts (ties: lower index).
std::vector<std::size_t> largest_remainder(std::span<const double> shares, std::size_t total) {
  std::vector<std::size_t> counts(shares.size());
  std::vector<std::pair<double, std::size_t>> rema;
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < shares.size(); ++i) {
    const double exact = shares[i] * static_cast<double>(total);
    counts[i] = static_cast<std::size_t>(std::floor(exact));
    assigned += counts[i];
    rema.emplace_back(exact - std::floor(exact), i);
  }
  std::ranges::stable_sort(rema, [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t i = 0; assigned < total; ++i, ++assigned) ++counts[rema[i % rema.size()].second];
  // Floating-point drift can only over-assign by rounding down a share of 1.0;
  // trim from the end if that ever happens.
  for (std::size_t i = counts.size(); assigned > total && i-- > 0;) {
    const std::size_t take = std::min(counts[i], assigned - total);
    counts[i] -= take;
    assigned -= take;
  }
  return counts;
}

void finish(std::vector<Partition>& parts, const Dataset& data) {
  for (auto& p : parts) {
    std::ranges::sort(p.indices);
    p.label_histogram.assign(data.num_classes, 0);
    for (std::size_t row : p.indices) ++p.label_histogram[data.labels[row]];
  }
}

}  // namespace

std::vector<Partition> dirichlet_partition(const Dataset& data, std::size_t num_clients, double alpha,
                                           std::uint64_t seed) {
  if (num_clients == 0) throw ConfigError("dirichlet_partition: num_clients must be at least 1");
  if (!(alpha > 0.0)) throw ConfigError("dirichlet_partition: alpha must be positive");
  std::vector<Partition> parts(num_clients);
  for (std::size_t k = 0; k < num_clients; ++k) parts[k].client_id = k;

  Rng rng(seed);
  auto by_class = rows_by_class(data);
  for (auto& rows : by_class) {
    const auto shares = rng.dirichlet(num_clients, alpha);
    rng.shuffle(rows);
    const auto counts = largest_remainder(shares, rows.size());
    std::size_t at = 0;
    for (std::size_t k = 0; k < num_clients; ++k) {
      parts[k].indices.insert(parts[k].indices.end(), rows.begin() + static_cast<std::ptrdiff_t>(at),
                              rows.begin() + static_cast<std::ptrdiff_t>(at + counts[k]));
      at += counts[k];
    }
  }
  finish(parts, data);
  return parts;
}

std::vector<Partition> label_group_partition(const Dataset& data,
                                             const std::vector<std::vector<std::size_t>>& groups,
                                             std::size_t clients_per_group, std::uint64_t seed) {
  if (groups.empty() || clients_per_group == 0) throw ConfigError("label groups: need at least one group and client");
  std::vector<int> owner(data.num_classes, -1);
  for (std::size_t g = 0; g < groups.size(); ++g) {
    if (groups[g].empty()) throw ConfigError("label groups: group " + std::to_string(g) + " is empty");
    for (std::size_t label : groups[g]) {
      if (label >= data.num_classes) throw ConfigError("label groups: label " + std::to_string(label) + " out of range");
      if (owner[label] >= 0)
        throw ConfigError("label groups: label " + std::to_string(label) + " appears in more than one group");
      owner[label] = static_cast<int>(g);
    }
  }

  std::vector<Partition> parts(groups.size() * clients_per_group);
  for (std::size_t k = 0; k < parts.size(); ++k) parts[k].client_id = k;
  Rng rng(seed);
  for (std::size_t g = 0; g < groups.size(); ++g) {
    std::vector<std::size_t> rows;
    for (std::size_t row = 0; row < data.count(); ++row)
      if (owner[data.labels[row]] == static_cast<int>(g)) rows.push_back(row);
    rng.shuffle(rows);
    for (std::size_t i = 0; i < rows.size(); ++i) parts[g * clients_per_group + i % clients_per_group].indices.push_back(rows[i]);
  }
  finish(parts, data);
  return parts;
}

LabelOverlay flip_labels(const Partition& partition, const Dataset& data, const LabelMapping& mapping) {
  bool changes_something = mapping.empty();
  for (const auto& [from, to] : mapping) {
    if (from >= data.num_classes || to >= data.num_classes)
      throw ConfigError("label mapping " + std::to_string(from) + "->" + std::to_string(to) + " is out of range");
    if (from != to) changes_something = true;
  }
  if (!changes_something) throw ConfigError("label flip requested with an identity mapping");

  LabelOverlay overlay{partition.client_id, {}};
  overlay.labels.reserve(partition.indices.size());
  for (std::size_t row : partition.indices) {
    const std::size_t label = data.labels[row];
    auto it = mapping.find(label);
    overlay.labels.push_back(it == mapping.end() ? label : it->second);
  }
  return overlay;
}

std::vector<std::size_t> choose_faulty_clients(std::size_t num_clients, double fraction, std::uint64_t seed) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) throw ConfigError("fault fraction must lie in [0, 1]");
  const auto count = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(num_clients)));
  std::vector<std::size_t> ids(num_clients);
  for (std::size_t i = 0; i < num_clients; ++i) ids[i] = i;
  Rng rng(seed);
  rng.shuffle(ids);
  ids.resize(count);
  std::ranges::sort(ids);
  return ids;
}

LabeledBatchSource training_source(const Dataset& data, const Partition& partition, const LabelOverlay* overlay) {
  LabeledBatchSource src;
  src.features = data.images.values();
  src.sample_size = data.sample_size();
  src.rows = partition.indices;
  if (overlay) {
    if (overlay->labels.size() != partition.indices.size())
      throw ConfigError("label overlay does not match partition of client " + std::to_string(partition.client_id));
    src.labels = overlay->labels;
  } else {
    for (std::size_t row : partition.indices) src.labels.push_back(data.labels[row]);
  }
  return src;
}

}  // namespace neurontrace
