#pragma once

// Minimal feed-forward network engine: dense, conv2d, max-pool, ReLU and
// flatten layers evaluated in 64-bit floats, with a reverse pass that yields
// gradients for both parameters and individual neuron outputs.

#include <compare>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "neurontrace/tensor.hpp"

namespace neurontrace {

struct Dense {
  std::size_t in = 0;
  std::size_t out = 0;
  friend bool operator==(const Dense&, const Dense&) = default;
};

struct Conv2d {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 0;
  std::size_t stride = 1;
  friend bool operator==(const Conv2d&, const Conv2d&) = default;
};

/// Non-overlapping pooling: stride equals the window.
struct MaxPool {
  std::size_t window = 2;
  friend bool operator==(const MaxPool&, const MaxPool&) = default;
};

struct ReLU {
  friend bool operator==(const ReLU&, const ReLU&) = default;
};

struct Flatten {
  friend bool operator==(const Flatten&, const Flatten&) = default;
};

using Layer = std::variant<Dense, Conv2d, MaxPool, ReLU, Flatten>;

/// A parametric (dense or conv) layer as seen by the rest of the engine.
struct ParamLayerInfo {
  std::size_t position = 0;  // index into ModelArch::layers()
  bool relu_follows = false;
  Shape input_shape;
  Shape output_shape;
  Shape weight_shape;
  Shape bias_shape;
};

/// Validated network architecture. Construction checks that adjacent layer
/// shapes compose and that the last layer is Dense; the parametric layers
/// are numbered 0..P-1 in order and those indices are stable.
class ModelArch {
 public:
  ModelArch(Shape input_shape, std::vector<Layer> layers);

  /// Parses "conv:1:4:5:1,relu,pool:2,flatten,dense:128:10" style layer lists.
  /// The conv stride may be omitted (defaults to 1).
  static ModelArch parse(std::string_view layers, Shape input_shape);

  static ModelArch mlp(std::size_t input_dim, std::span<const std::size_t> hidden,
                       std::size_t num_classes);
  /// Two conv/pool stages (4 and 8 channels) and a 32-unit hidden layer.
  static ModelArch small_cnn(std::size_t num_classes = 10);
  /// Classic LeNet-5 layout without padding, for 28x28 single-channel input.
  static ModelArch lenet(std::size_t num_classes = 10);

  const Shape& input_shape() const { return input_shape_; }
  const std::vector<Layer>& layers() const { return layers_; }
  std::size_t num_classes() const { return num_classes_; }

  /// Output shape of every layer, same length as layers().
  const std::vector<Shape>& output_shapes() const { return output_shapes_; }
  const std::vector<ParamLayerInfo>& param_layers() const { return param_layers_; }

  /// Total number of neurons N: one per output scalar of each parametric layer.
  std::size_t total_neurons() const;

  /// Canonical text form; stable across runs and platforms.
  std::string describe() const;
  /// FNV-1a of describe(); stored in checkpoint headers.
  std::uint64_t fingerprint() const;

  friend bool operator==(const ModelArch& a, const ModelArch& b) {
    return a.input_shape_ == b.input_shape_ && a.layers_ == b.layers_;
  }

 private:
  Shape input_shape_;
  std::vector<Layer> layers_;
  std::size_t num_classes_ = 0;
  std::vector<Shape> output_shapes_;
  std::vector<ParamLayerInfo> param_layers_;
};

struct LayerParams {
  Tensor weight;  // dense: out x in; conv: out_ch x in_ch x k x k
  Tensor bias;    // out (dense) or out_ch (conv)
  friend bool operator==(const LayerParams&, const LayerParams&) = default;
};

/// Ordered (weight, bias) pairs, one per parametric layer.
struct ModelWeights {
  std::vector<LayerParams> params;

  static ModelWeights zeros(const ModelArch& arch);
  /// Every value drawn uniformly from [lo, hi).
  static ModelWeights uniform(const ModelArch& arch, std::uint64_t seed, double lo, double hi);

  /// Throws ConfigError unless the tensor shapes match `arch`.
  void check_compatible(const ModelArch& arch) const;
  bool all_finite() const;

  friend bool operator==(const ModelWeights&, const ModelWeights&) = default;
};

double squared_distance(const ModelWeights& a, const ModelWeights& b);

/// Identifies one neuron: a parametric layer index and a row-major position
/// in that layer's output tensor. Conv layers have one neuron per spatial
/// position per channel.
struct NeuronId {
  std::size_t layer = 0;
  std::size_t index = 0;
  friend auto operator<=>(const NeuronId&, const NeuronId&) = default;
};

struct LayerActivation {
  Tensor layer_input;      // the z-bar fed to this layer
  Tensor pre_activation;   // w . z-bar + b per output scalar
  Tensor post_activation;  // after the following ReLU; equals pre when none follows
};

/// Everything recorded during one forward pass of a model.
struct ActivationTrace {
  std::vector<LayerActivation> layers;  // one per parametric layer
  Tensor logits;
  std::size_t total_neurons = 0;
  /// Input to every arch layer followed by the final output
  /// (layers().size() + 1 entries). Needed by the reverse pass.
  std::vector<Tensor> values;
};

/// Gradient of the selected output with respect to each neuron.
using InfluenceMap = std::map<NeuronId, double>;

/// Index of the largest value; ties go to the lowest index.
std::size_t argmax(std::span<const double> values);

/// Runs the network and records an ActivationTrace. The input must hold
/// exactly numel(arch.input_shape()) values; it is read as that shape.
ActivationTrace forward(const ModelArch& arch, const ModelWeights& weights, const Tensor& input);

/// Forward pass that only returns the logits.
Tensor infer(const ModelArch& arch, const ModelWeights& weights, std::span<const double> input);

/// Same as forward() except `delta` is added to one neuron's pre-activation
/// before its nonlinearity. Returns the resulting logits.
Tensor override_activation(const ModelArch& arch, const ModelWeights& weights,
                           const Tensor& input, NeuronId neuron, double delta);

/// d logit[class_index] / d pre_activation for every neuron, one tensor per
/// parametric layer (shaped like that layer's output).
///
/// The trace must come from forward() with these same weights; this is not
/// checked.
std::vector<Tensor> neuron_gradients(const ModelArch& arch, const ModelWeights& weights,
                                     const ActivationTrace& trace, std::size_t class_index);

/// neuron_gradients() as a map over every neuron of the network.
InfluenceMap backward_influence(const ModelArch& arch, const ModelWeights& weights,
                                const ActivationTrace& trace, std::size_t class_index);

/// w . z-bar + b for every neuron of parametric layer `layer`, using the
/// given weights and an externally supplied layer input.
Tensor layer_response(const ModelArch& arch, const ModelWeights& weights, std::size_t layer,
                      const Tensor& layer_input);

std::size_t predict(const ModelArch& arch, const ModelWeights& weights,
                    std::span<const double> input);

/// Training rows for one client. Labels may differ from the dataset's own
/// (label-flip overlays), so they travel alongside the row indices.
struct LabeledBatchSource {
  std::span<const double> features;  // dataset features, sample after sample
  std::size_t sample_size = 0;
  std::vector<std::size_t> rows;
  std::vector<std::size_t> labels;  // parallel to rows

  std::size_t size() const { return rows.size(); }
};

struct TrainHyper {
  double lr = 0.01;
  std::size_t epochs = 4;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
};

/// FedProx proximal term: adds (mu/2) * ||w - reference||^2 to the loss.
struct Proximal {
  double mu = 0.01;
  const ModelWeights* reference = nullptr;
};

/// Minibatch SGD on softmax cross-entropy, starting from `weights`.
/// Deterministic: the per-epoch shuffle comes from hyper.seed and gradients
/// are accumulated in batch order.
ModelWeights train_local(const ModelArch& arch, const ModelWeights& weights,
                         const LabeledBatchSource& data, const TrainHyper& hyper,
                         std::optional<Proximal> prox = std::nullopt);

}  // namespace neurontrace
