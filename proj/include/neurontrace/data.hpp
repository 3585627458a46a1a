#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <span>
#include <vector>

#include "neurontrace/nn.hpp"
#include "neurontrace/tensor.hpp"

namespace neurontrace {

/// Immutable labelled sample collection. `images` is count x (sample dims).
struct Dataset {
  Tensor images;
  std::vector<std::size_t> labels;
  std::size_t num_classes = 0;

  std::size_t count() const { return labels.size(); }
  Shape sample_shape() const { return Shape(images.shape.begin() + 1, images.shape.end()); }
  std::size_t sample_size() const { return numel(sample_shape()); }
  std::span<const double> sample(std::size_t row) const {
    return images.values().subspan(row * sample_size(), sample_size());
  }
  Tensor sample_tensor(std::size_t row) const;

  std::vector<std::size_t> label_counts() const;
  /// Rows in the given order; labels follow.
  Dataset subset(std::span<const std::size_t> rows) const;
};

/// Reads an IDX image file (magic 0x00000803) and label file (0x00000801).
/// Both may be gzip-compressed. Pixels are scaled by 1/255.
Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                 std::size_t num_classes = 10);

/// Writes a dataset back out as uncompressed IDX (pixels * 255, rounded).
/// Only rank-2 samples (H x W) are supported.
void write_idx(const Dataset& data, const std::filesystem::path& images_path,
               const std::filesystem::path& labels_path);

/// One Gaussian cluster per class around a centre drawn in [0.2, 0.8]^dim,
/// clamped to [0, 1]. Rows are class-major: row = class * per_class + i.
Dataset synth_blobs(std::size_t num_classes, std::size_t per_class, std::size_t dim, double spread,
                    std::uint64_t seed);

/// Splits each class: its first `train_per_class` rows go to the first
/// dataset, the remaining rows (at most `test_per_class`) to the second.
std::pair<Dataset, Dataset> split_per_class(const Dataset& data, std::size_t train_per_class,
                                            std::size_t test_per_class);

/// Keeps at most `max_per_class` rows of each class, preserving order.
Dataset take_per_class(const Dataset& data, std::size_t max_per_class);

struct Partition {
  std::size_t client_id = 0;
  std::vector<std::size_t> indices;  // ascending dataset rows
  std::vector<std::size_t> label_histogram;

  friend bool operator==(const Partition&, const Partition&) = default;
};

/// Per class, a Dirichlet(alpha) draw over clients decides that class's
/// share for each client; shares become integer counts by largest remainder.
/// Clients may end up empty.
std::vector<Partition> dirichlet_partition(const Dataset& data, std::size_t num_clients, double alpha,
                                           std::uint64_t seed);

/// Disjoint label groups, `clients_per_group` clients each: group g's rows
/// are shuffled and dealt round-robin to clients g*cpg .. g*cpg+cpg-1.
/// Throws ConfigError when groups overlap or reference unknown labels.
std::vector<Partition> label_group_partition(const Dataset& data,
                                             const std::vector<std::vector<std::size_t>>& groups,
                                             std::size_t clients_per_group, std::uint64_t seed);

using LabelMapping = std::map<std::size_t, std::size_t>;

struct FaultSpec {
  double fraction_faulty = 0.0;
  LabelMapping mapping;
  std::uint64_t seed = 0;
};

/// Labels for one client's rows (parallel to Partition::indices) with the
/// mapping applied. The shared dataset is never modified.
struct LabelOverlay {
  std::size_t client_id = 0;
  std::vector<std::size_t> labels;
};

LabelOverlay flip_labels(const Partition& partition, const Dataset& data, const LabelMapping& mapping);

/// round(fraction * num_clients) distinct client ids, chosen with `seed`, ascending.
std::vector<std::size_t> choose_faulty_clients(std::size_t num_clients, double fraction, std::uint64_t seed);

/// Training view over a client's partition; uses the overlay labels when given.
LabeledBatchSource training_source(const Dataset& data, const Partition& partition,
                                   const LabelOverlay* overlay = nullptr);

}  // namespace neurontrace
