#include "neurontrace/nn.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "neurontrace/error.hpp"
#include "neurontrace/rng.hpp"

namespace neurontrace {

// ---------------------------------------------------------------------------
// Architecture

namespace {

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};

std::string layer_token(const Layer& layer) {
  return std::visit(
      overloaded{
          [](const Dense& d) { return "dense:" + std::to_string(d.in) + ":" + std::to_string(d.out); },
          [](const Conv2d& c) {
            return "conv:" + std::to_string(c.in_channels) + ":" + std::to_string(c.out_channels) +
                   ":" + std::to_string(c.kernel) + ":" + std::to_string(c.stride);
          },
          [](const MaxPool& p) { return "pool:" + std::to_string(p.window); },
          [](const ReLU&) { return std::string("relu"); },
          [](const Flatten&) { return std::string("flatten"); },
      },
      layer);
}

std::vector<std::string> split(std::string_view text, char sep) {
  std::vector<std::string> parts;
  std::size_t start = 0;
  while (true) {
    std::size_t pos = text.find(sep, start);
    std::string_view piece = text.substr(start, pos == std::string_view::npos ? pos : pos - start);
    while (!piece.empty() && std::isspace(static_cast<unsigned char>(piece.front()))) piece.remove_prefix(1);
    while (!piece.empty() && std::isspace(static_cast<unsigned char>(piece.back()))) piece.remove_suffix(1);
    parts.emplace_back(piece);
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return parts;
}

std::size_t parse_count(const std::string& s, std::string_view context) {
  try {
    std::size_t used = 0;
    long long v = std::stoll(s, &used);
    if (used != s.size() || v <= 0) throw std::invalid_argument(s);
    return static_cast<std::size_t>(v);
  } catch (const std::exception&) {
    throw ConfigError("layer '" + std::string(context) + "': expected a positive integer, got '" + s + "'");
  }
}

}  // namespace

ModelArch::ModelArch(Shape input_shape, std::vector<Layer> layers)
    : input_shape_(std::move(input_shape)), layers_(std::move(layers)) {
  if (input_shape_.empty() || numel(input_shape_) == 0 ||
      std::ranges::find(input_shape_, 0u) != input_shape_.end())
    throw ConfigError("model input shape must be non-empty with positive dimensions");
  if (layers_.empty()) throw ConfigError("model has no layers");
  if (!std::holds_alternative<Dense>(layers_.back()))
    throw ConfigError("the final layer must be dense");

  Shape cur = input_shape_;
  for (std::size_t pos = 0; pos < layers_.size(); ++pos) {
    const std::string where = "layer " + std::to_string(pos) + " (" + layer_token(layers_[pos]) + ")";
    Shape next = std::visit(
        overloaded{
            [&](const Dense& d) -> Shape {
              if (d.in == 0 || d.out == 0) throw ConfigError(where + ": sizes must be positive");
              if (cur.size() != 1 || cur[0] != d.in)
                throw ConfigError(where + ": expects a flat input of " + std::to_string(d.in) +
                                  " values, got " + shape_string(cur));
              return {d.out};
            },
            [&](const Conv2d& c) -> Shape {
              if (c.in_channels == 0 || c.out_channels == 0 || c.kernel == 0 || c.stride == 0)
                throw ConfigError(where + ": sizes must be positive");
              if (cur.size() != 3 || cur[0] != c.in_channels)
                throw ConfigError(where + ": expects " + std::to_string(c.in_channels) +
                                  " x H x W input, got " + shape_string(cur));
              if (cur[1] < c.kernel || cur[2] < c.kernel)
                throw ConfigError(where + ": kernel larger than input " + shape_string(cur));
              return {c.out_channels, (cur[1] - c.kernel) / c.stride + 1,
                      (cur[2] - c.kernel) / c.stride + 1};
            },
            [&](const MaxPool& p) -> Shape {
              if (p.window == 0) throw ConfigError(where + ": window must be positive");
              if (cur.size() != 3 || cur[1] < p.window || cur[2] < p.window)
                throw ConfigError(where + ": cannot pool input " + shape_string(cur));
              return {cur[0], cur[1] / p.window, cur[2] / p.window};
            },
            [&](const ReLU&) -> Shape { return cur; },
            [&](const Flatten&) -> Shape { return {numel(cur)}; },
        },
        layers_[pos]);

    if (const auto* d = std::get_if<Dense>(&layers_[pos])) {
      ParamLayerInfo info{pos, false, cur, next, {d->out, d->in}, {d->out}};
      param_layers_.push_back(std::move(info));
    } else if (const auto* c = std::get_if<Conv2d>(&layers_[pos])) {
      ParamLayerInfo info{pos, false, cur, next,
                          {c->out_channels, c->in_channels, c->kernel, c->kernel}, {c->out_channels}};
      param_layers_.push_back(std::move(info));
    }
    output_shapes_.push_back(next);
    cur = std::move(next);
  }
  for (auto& info : param_layers_) {
    info.relu_follows = info.position + 1 < layers_.size() &&
                        std::holds_alternative<ReLU>(layers_[info.position + 1]);
  }
  num_classes_ = std::get<Dense>(layers_.back()).out;
}

ModelArch ModelArch::parse(std::string_view text, Shape input_shape) {
  std::vector<Layer> layers;
  for (const std::string& token : split(text, ',')) {
    if (token.empty()) continue;
    auto fields = split(token, ':');
    const std::string& kind = fields[0];
    auto arg = [&](std::size_t i) { return parse_count(fields.at(i), token); };
    auto expect = [&](std::size_t lo, std::size_t hi) {
      if (fields.size() < lo + 1 || fields.size() > hi + 1)
        throw ConfigError("layer '" + token + "': wrong number of arguments");
    };
    if (kind == "dense") {
      expect(2, 2);
      layers.emplace_back(Dense{arg(1), arg(2)});
    } else if (kind == "conv") {
      expect(3, 4);
      layers.emplace_back(Conv2d{arg(1), arg(2), arg(3), fields.size() > 4 ? arg(4) : 1});
    } else if (kind == "pool" || kind == "maxpool") {
      expect(1, 1);
      layers.emplace_back(MaxPool{arg(1)});
    } else if (kind == "relu") {
      expect(0, 0);
      layers.emplace_back(ReLU{});
    } else if (kind == "flatten") {
      expect(0, 0);
      layers.emplace_back(Flatten{});
    } else {
      throw ConfigError("unknown layer kind '" + kind + "'");
    }
  }
  return ModelArch(std::move(input_shape), std::move(layers));
}

ModelArch ModelArch::mlp(std::size_t input_dim, std::span<const std::size_t> hidden,
                         std::size_t num_classes) {
  std::vector<Layer> layers;
  std::size_t prev = input_dim;
  for (std::size_t h : hidden) {
    layers.emplace_back(Dense{prev, h});
    layers.emplace_back(ReLU{});
    prev = h;
  }
  layers.emplace_back(Dense{prev, num_classes});
  return ModelArch({input_dim}, std::move(layers));
}

ModelArch ModelArch::small_cnn(std::size_t num_classes) {
  return ModelArch({1, 28, 28}, {Conv2d{1, 4, 5, 1}, ReLU{}, MaxPool{2}, Conv2d{4, 8, 5, 1}, ReLU{},
                                 MaxPool{2}, Flatten{}, Dense{128, 32}, ReLU{}, Dense{32, num_classes}});
}

ModelArch ModelArch::lenet(std::size_t num_classes) {
  return ModelArch({1, 28, 28},
                   {Conv2d{1, 6, 5, 1}, ReLU{}, MaxPool{2}, Conv2d{6, 16, 5, 1}, ReLU{}, MaxPool{2},
                    Flatten{}, Dense{256, 120}, ReLU{}, Dense{120, 84}, ReLU{}, Dense{84, num_classes}});
}

std::size_t ModelArch::total_neurons() const {
  std::size_t n = 0;
  for (const auto& p : param_layers_) n += numel(p.output_shape);
  return n;
}

std::string ModelArch::describe() const {
  std::string out = shape_string(input_shape_) + "|";
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (i) out += ',';
    out += layer_token(layers_[i]);
  }
  return out;
}

std::uint64_t ModelArch::fingerprint() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : describe()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// ---------------------------------------------------------------------------
// Weights

ModelWeights ModelWeights::zeros(const ModelArch& arch) {
  ModelWeights w;
  for (const auto& p : arch.param_layers()) w.params.push_back({Tensor(p.weight_shape), Tensor(p.bias_shape)});
  return w;
}

ModelWeights ModelWeights::uniform(const ModelArch& arch, std::uint64_t seed, double lo, double hi) {
  ModelWeights w = zeros(arch);
  Rng rng(seed);
  for (auto& p : w.params) {
    for (double& v : p.weight.data) v = rng.uniform(lo, hi);
    for (double& v : p.bias.data) v = rng.uniform(lo, hi);
  }
  return w;
}

void ModelWeights::check_compatible(const ModelArch& arch) const {
  const auto& infos = arch.param_layers();
  if (params.size() != infos.size())
    throw ConfigError("weights hold " + std::to_string(params.size()) + " parametric layers, model has " +
                      std::to_string(infos.size()));
  for (std::size_t j = 0; j < infos.size(); ++j) {
    if (params[j].weight.shape != infos[j].weight_shape || params[j].bias.shape != infos[j].bias_shape ||
        params[j].weight.size() != numel(infos[j].weight_shape) ||
        params[j].bias.size() != numel(infos[j].bias_shape))
      throw ConfigError("parametric layer " + std::to_string(j) + ": weight shape " +
                        shape_string(params[j].weight.shape) + " does not match model (" +
                        shape_string(infos[j].weight_shape) + ")");
  }
}

bool ModelWeights::all_finite() const {
  return std::ranges::all_of(params, [](const LayerParams& p) { return p.weight.all_finite() && p.bias.all_finite(); });
}

double squared_distance(const ModelWeights& a, const ModelWeights& b) {
  if (a.params.size() != b.params.size()) throw ConfigError("squared_distance: layer count differs");
  double acc = 0.0;
  for (std::size_t j = 0; j < a.params.size(); ++j) {
    const auto& pa = a.params[j];
    const auto& pb = b.params[j];
    if (pa.weight.size() != pb.weight.size() || pa.bias.size() != pb.bias.size())
      throw ConfigError("squared_distance: shape mismatch");
    for (std::size_t i = 0; i < pa.weight.size(); ++i) acc += (pa.weight[i] - pb.weight[i]) * (pa.weight[i] - pb.weight[i]);
    for (std::size_t i = 0; i < pa.bias.size(); ++i) acc += (pa.bias[i] - pb.bias[i]) * (pa.bias[i] - pb.bias[i]);
  }
  return acc;
}

// ---------------------------------------------------------------------------
// Kernels

namespace {

void dense_forward(const Dense& d, const LayerParams& p, const double* x, double* y) {
  const double* w = p.weight.data.data();
  for (std::size_t o = 0; o < d.out; ++o) {
    const double* row = w + o * d.in;
    double s = 0.0;
    for (std::size_t i = 0; i < d.in; ++i) s += row[i] * x[i];
    y[o] = s + p.bias[o];
  }
}

void dense_backward(const Dense& d, const LayerParams& p, const double* x, const double* gy, double* gx,
                    LayerParams* grad) {
  const double* w = p.weight.data.data();
  if (gx) std::fill(gx, gx + d.in, 0.0);
  for (std::size_t o = 0; o < d.out; ++o) {
    const double g = gy[o];
    if (g == 0.0) continue;
    const double* row = w + o * d.in;
    if (gx)
      for (std::size_t i = 0; i < d.in; ++i) gx[i] += row[i] * g;
    if (grad) {
      double* grow = grad->weight.data.data() + o * d.in;
      for (std::size_t i = 0; i < d.in; ++i) grow[i] += g * x[i];
      grad->bias[o] += g;
    }
  }
}

void conv_forward(const Conv2d& c, const Shape& in, const Shape& out, const LayerParams& p, const double* x,
                  double* y) {
  const std::size_t H = in[1], W = in[2], OH = out[1], OW = out[2], K = c.kernel, S = c.stride;
  const double* w = p.weight.data.data();
  for (std::size_t oc = 0; oc < c.out_channels; ++oc) {
    for (std::size_t oy = 0; oy < OH; ++oy) {
      for (std::size_t ox = 0; ox < OW; ++ox) {
        double s = 0.0;
        for (std::size_t ic = 0; ic < c.in_channels; ++ic) {
          for (std::size_t ky = 0; ky < K; ++ky) {
            const double* xr = x + (ic * H + oy * S + ky) * W + ox * S;
            const double* wr = w + ((oc * c.in_channels + ic) * K + ky) * K;
            for (std::size_t kx = 0; kx < K; ++kx) s += wr[kx] * xr[kx];
          }
        }
        y[(oc * OH + oy) * OW + ox] = s + p.bias[oc];
      }
    }
  }
}

void conv_backward(const Conv2d& c, const Shape& in, const Shape& out, const LayerParams& p, const double* x,
                   const double* gy, double* gx, LayerParams* grad) {
  const std::size_t H = in[1], W = in[2], OH = out[1], OW = out[2], K = c.kernel, S = c.stride;
  const double* w = p.weight.data.data();
  if (gx) std::fill(gx, gx + c.in_channels * H * W, 0.0);
  for (std::size_t oc = 0; oc < c.out_channels; ++oc) {
    for (std::size_t oy = 0; oy < OH; ++oy) {
      for (std::size_t ox = 0; ox < OW; ++ox) {
        const double g = gy[(oc * OH + oy) * OW + ox];
        if (g == 0.0) continue;
        if (grad) grad->bias[oc] += g;
        for (std::size_t ic = 0; ic < c.in_channels; ++ic) {
          for (std::size_t ky = 0; ky < K; ++ky) {
            const std::size_t xoff = (ic * H + oy * S + ky) * W + ox * S;
            const std::size_t woff = ((oc * c.in_channels + ic) * K + ky) * K;
            if (gx)
              for (std::size_t kx = 0; kx < K; ++kx) gx[xoff + kx] += w[woff + kx] * g;
            if (grad) {
              double* gw = grad->weight.data.data() + woff;
              for (std::size_t kx = 0; kx < K; ++kx) gw[kx] += g * x[xoff + kx];
            }
          }
        }
      }
    }
  }
}

void pool_forward(const MaxPool& p, const Shape& in, const Shape& out, const double* x, double* y) {
  const std::size_t W = in[2], OH = out[1], OW = out[2], P = p.window;
  for (std::size_t ch = 0; ch < out[0]; ++ch)
    for (std::size_t oy = 0; oy < OH; ++oy)
      for (std::size_t ox = 0; ox < OW; ++ox) {
        double best = x[(ch * in[1] + oy * P) * W + ox * P];
        for (std::size_t ky = 0; ky < P; ++ky)
          for (std::size_t kx = 0; kx < P; ++kx) best = std::max(best, x[(ch * in[1] + oy * P + ky) * W + ox * P + kx]);
        y[(ch * OH + oy) * OW + ox] = best;
      }
}

// Routes each output gradient to the first maximal input of its window.
void pool_backward(const MaxPool& p, const Shape& in, const Shape& out, const double* x, const double* gy,
                   double* gx) {
  const std::size_t W = in[2], OH = out[1], OW = out[2], P = p.window;
  std::fill(gx, gx + numel(in), 0.0);
  for (std::size_t ch = 0; ch < out[0]; ++ch)
    for (std::size_t oy = 0; oy < OH; ++oy)
      for (std::size_t ox = 0; ox < OW; ++ox) {
        std::size_t best_at = (ch * in[1] + oy * P) * W + ox * P;
        for (std::size_t ky = 0; ky < P; ++ky)
          for (std::size_t kx = 0; kx < P; ++kx) {
            const std::size_t at = (ch * in[1] + oy * P + ky) * W + ox * P + kx;
            if (x[at] > x[best_at]) best_at = at;
          }
        gx[best_at] += gy[(ch * OH + oy) * OW + ox];
      }
}

struct Override {
  std::size_t position;
  std::size_t index;
  double delta;
};

// values[l] is the input of layer l; values[L] the network output.
void run_forward(const ModelArch& arch, const ModelWeights& weights, std::span<const double> input,
                 std::vector<std::vector<double>>& values, const Override* override_at = nullptr) {
  const auto& layers = arch.layers();
  const auto& shapes = arch.output_shapes();
  values.resize(layers.size() + 1);
  values[0].assign(input.begin(), input.end());
  std::size_t param = 0;
  for (std::size_t pos = 0; pos < layers.size(); ++pos) {
    const Shape& in_shape = pos == 0 ? arch.input_shape() : shapes[pos - 1];
    const Shape& out_shape = shapes[pos];
    const double* x = values[pos].data();
    auto& y_vec = values[pos + 1];
    y_vec.resize(numel(out_shape));
    double* y = y_vec.data();
    std::visit(overloaded{
                   [&](const Dense& d) { dense_forward(d, weights.params[param++], x, y); },
                   [&](const Conv2d& c) { conv_forward(c, in_shape, out_shape, weights.params[param++], x, y); },
                   [&](const MaxPool& p) { pool_forward(p, in_shape, out_shape, x, y); },
                   [&](const ReLU&) {
                     for (std::size_t i = 0; i < y_vec.size(); ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
                   },
                   [&](const Flatten&) { std::copy(x, x + y_vec.size(), y); },
               },
               layers[pos]);
    if (override_at && override_at->position == pos) y[override_at->index] += override_at->delta;
  }
  for (double v : values.back())
    if (!std::isfinite(v)) throw NumericError("forward pass produced a non-finite logit");
}

// grads[l] receives d out / d (output of layer l). `grad_out` seeds the last
// layer. Parameter gradients are accumulated into `param_grads` when given.
// The gradient with respect to the network input is never formed.
void run_backward(const ModelArch& arch, const ModelWeights& weights,
                  std::span<const std::span<const double>> values, std::span<const double> grad_out,
                  std::vector<std::vector<double>>& grads, ModelWeights* param_grads) {
  const auto& layers = arch.layers();
  const auto& shapes = arch.output_shapes();
  const std::size_t L = layers.size();
  grads.resize(L);
  for (std::size_t pos = 0; pos < L; ++pos) grads[pos].resize(numel(shapes[pos]));
  std::copy(grad_out.begin(), grad_out.end(), grads[L - 1].begin());

  std::size_t param = arch.param_layers().size();
  for (std::size_t pos = L; pos-- > 0;) {
    const Shape& in_shape = pos == 0 ? arch.input_shape() : shapes[pos - 1];
    const Shape& out_shape = shapes[pos];
    const double* x = values[pos].data();
    const double* gy = grads[pos].data();
    double* gx = pos == 0 ? nullptr : grads[pos - 1].data();
    std::visit(
        overloaded{
            [&](const Dense& d) {
              --param;
              dense_backward(d, weights.params[param], x, gy, gx, param_grads ? &param_grads->params[param] : nullptr);
            },
            [&](const Conv2d& c) {
              --param;
              conv_backward(c, in_shape, out_shape, weights.params[param], x, gy, gx,
                            param_grads ? &param_grads->params[param] : nullptr);
            },
            [&](const MaxPool& p) {
              if (gx) pool_backward(p, in_shape, out_shape, x, gy, gx);
            },
            [&](const ReLU&) {
              if (gx)
                for (std::size_t i = 0; i < grads[pos].size(); ++i) gx[i] = x[i] > 0.0 ? gy[i] : 0.0;
            },
            [&](const Flatten&) {
              if (gx) std::copy(gy, gy + grads[pos].size(), gx);
            },
        },
        layers[pos]);
  }
}

void check_input(const ModelArch& arch, std::span<const double> input) {
  if (input.size() != numel(arch.input_shape()))
    throw ConfigError("input holds " + std::to_string(input.size()) + " values, model expects " +
                      shape_string(arch.input_shape()));
}

}  // namespace

// ---------------------------------------------------------------------------
// Public operations

std::size_t argmax(std::span<const double> values) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i)
    if (values[i] > values[best]) best = i;
  return best;
}

ActivationTrace forward(const ModelArch& arch, const ModelWeights& weights, const Tensor& input) {
  check_input(arch, input.values());
  weights.check_compatible(arch);
  std::vector<std::vector<double>> values;
  run_forward(arch, weights, input.values(), values);

  const auto& shapes = arch.output_shapes();
  ActivationTrace trace;
  trace.values.reserve(values.size());
  trace.values.emplace_back(arch.input_shape(), std::move(values[0]));
  for (std::size_t pos = 0; pos < shapes.size(); ++pos) trace.values.emplace_back(shapes[pos], std::move(values[pos + 1]));

  for (const auto& info : arch.param_layers()) {
    LayerActivation act;
    act.layer_input = trace.values[info.position];
    act.pre_activation = trace.values[info.position + 1];
    act.post_activation = info.relu_follows ? trace.values[info.position + 2] : act.pre_activation;
    trace.layers.push_back(std::move(act));
  }
  trace.logits = trace.values.back();
  trace.total_neurons = arch.total_neurons();
  return trace;
}

Tensor infer(const ModelArch& arch, const ModelWeights& weights, std::span<const double> input) {
  check_input(arch, input);
  std::vector<std::vector<double>> values;
  run_forward(arch, weights, input, values);
  return Tensor({arch.num_classes()}, std::move(values.back()));
}

Tensor override_activation(const ModelArch& arch, const ModelWeights& weights, const Tensor& input,
                           NeuronId neuron, double delta) {
  check_input(arch, input.values());
  const auto& infos = arch.param_layers();
  if (neuron.layer >= infos.size() || neuron.index >= numel(infos[neuron.layer].output_shape))
    throw ContractError("neuron (" + std::to_string(neuron.layer) + ", " + std::to_string(neuron.index) +
                        ") is outside the model");
  Override at{infos[neuron.layer].position, neuron.index, delta};
  std::vector<std::vector<double>> values;
  run_forward(arch, weights, input.values(), values, &at);
  return Tensor({arch.num_classes()}, std::move(values.back()));
}

std::vector<Tensor> neuron_gradients(const ModelArch& arch, const ModelWeights& weights,
                                     const ActivationTrace& trace, std::size_t class_index) {
  if (class_index >= arch.num_classes())
    throw ConfigError("class index " + std::to_string(class_index) + " out of range");
  if (trace.values.size() != arch.layers().size() + 1) throw ContractError("activation trace does not match model");
  std::vector<std::span<const double>> views;
  for (const auto& t : trace.values) views.emplace_back(t.values());
  std::vector<double> seed(arch.num_classes(), 0.0);
  seed[class_index] = 1.0;
  std::vector<std::vector<double>> grads;
  run_backward(arch, weights, views, seed, grads, nullptr);

  std::vector<Tensor> out;
  for (const auto& info : arch.param_layers()) out.emplace_back(info.output_shape, std::move(grads[info.position]));
  return out;
}

InfluenceMap backward_influence(const ModelArch& arch, const ModelWeights& weights, const ActivationTrace& trace,
                                std::size_t class_index) {
  auto grads = neuron_gradients(arch, weights, trace, class_index);
  InfluenceMap map;
  for (std::size_t j = 0; j < grads.size(); ++j)
    for (std::size_t i = 0; i < grads[j].size(); ++i) map.emplace_hint(map.end(), NeuronId{j, i}, grads[j][i]);
  return map;
}

Tensor layer_response(const ModelArch& arch, const ModelWeights& weights, std::size_t layer,
                      const Tensor& layer_input) {
  const auto& infos = arch.param_layers();
  if (layer >= infos.size()) throw ContractError("parametric layer " + std::to_string(layer) + " does not exist");
  const auto& info = infos[layer];
  if (layer_input.size() != numel(info.input_shape))
    throw ConfigError("layer input of shape " + shape_string(layer_input.shape) + " does not fit parametric layer " +
                      std::to_string(layer));
  if (layer >= weights.params.size()) throw ConfigError("weights lack parametric layer " + std::to_string(layer));
  Tensor out(info.output_shape);
  const Layer& spec = arch.layers()[info.position];
  if (const auto* d = std::get_if<Dense>(&spec))
    dense_forward(*d, weights.params[layer], layer_input.data.data(), out.data.data());
  else
    conv_forward(std::get<Conv2d>(spec), info.input_shape, info.output_shape, weights.params[layer],
                 layer_input.data.data(), out.data.data());
  return out;
}

std::size_t predict(const ModelArch& arch, const ModelWeights& weights, std::span<const double> input) {
  return argmax(infer(arch, weights, input).values());
}

ModelWeights train_local(const ModelArch& arch, const ModelWeights& weights, const LabeledBatchSource& data,
                         const TrainHyper& hyper, std::optional<Proximal> prox) {
  weights.check_compatible(arch);
  if (data.size() == 0) throw ConfigError("train_local: client has no training data");
  if (data.labels.size() != data.rows.size()) throw ConfigError("train_local: labels and rows differ in length");
  if (hyper.epochs == 0 || hyper.batch_size == 0) throw ConfigError("train_local: epochs and batch_size must be positive");
  if (data.sample_size != numel(arch.input_shape()))
    throw ConfigError("train_local: samples hold " + std::to_string(data.sample_size) + " values, model expects " +
                      shape_string(arch.input_shape()));
  if (prox && !prox->reference) throw ConfigError("train_local: proximal term needs a reference model");
  if (prox) prox->reference->check_compatible(arch);
  for (std::size_t label : data.labels)
    if (label >= arch.num_classes()) throw ConfigError("train_local: label " + std::to_string(label) + " out of range");

  ModelWeights w = weights;
  ModelWeights grad = ModelWeights::zeros(arch);
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(hyper.seed);

  std::vector<std::vector<double>> values;
  std::vector<std::vector<double>> grads;
  std::vector<std::span<const double>> views;
  std::vector<double> seed(arch.num_classes());

  for (std::size_t epoch = 0; epoch < hyper.epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += hyper.batch_size) {
      const std::size_t stop = std::min(order.size(), start + hyper.batch_size);
      for (auto& p : grad.params) {
        std::ranges::fill(p.weight.data, 0.0);
        std::ranges::fill(p.bias.data, 0.0);
      }
      for (std::size_t b = start; b < stop; ++b) {
        const std::size_t row = data.rows[order[b]];
        run_forward(arch, w, data.features.subspan(row * data.sample_size, data.sample_size), values);
        // softmax cross-entropy gradient: p - onehot
        const auto& logits = values.back();
        const double mx = *std::ranges::max_element(logits);
        double z = 0.0;
        for (std::size_t k = 0; k < logits.size(); ++k) z += (seed[k] = std::exp(logits[k] - mx));
        for (double& s : seed) s /= z;
        seed[data.labels[order[b]]] -= 1.0;
        views.assign(values.begin(), values.end());
        run_backward(arch, w, views, seed, grads, &grad);
      }
      const double scale = 1.0 / static_cast<double>(stop - start);
      for (std::size_t j = 0; j < w.params.size(); ++j) {
        auto step = [&](Tensor& param, const Tensor& g, const Tensor* ref) {
          for (std::size_t i = 0; i < param.size(); ++i) {
            double d = g[i] * scale;
            if (ref) d += prox->mu * (param[i] - (*ref)[i]);
            param[i] -= hyper.lr * d;
          }
        };
        step(w.params[j].weight, grad.params[j].weight, prox ? &prox->reference->params[j].weight : nullptr);
        step(w.params[j].bias, grad.params[j].bias, prox ? &prox->reference->params[j].bias : nullptr);
      }
    }
  }
  if (!w.all_finite()) throw NumericError("train_local: weights diverged to non-finite values");
  return w;
}

}  // namespace neurontrace
