// Small classifiers: layer descriptors, seeded initialization, forward
// evaluation on a Graph, softmax cross-entropy, gradients and checkpoints.
//
// Image activations are stored channels-last: a batch is [N, H, W, C].
#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <memory>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "colab/autodiff.hpp"
#include "colab/random.hpp"
#include "colab/tensor.hpp"

namespace colab {

enum class LayerKind { dense, conv, relu, flatten };

struct Layer {
  LayerKind kind = LayerKind::relu;
  std::size_t in = 0;
  std::size_t out = 0;
  std::size_t kernel = 0;
  std::size_t stride = 1;

  static Layer dense(std::size_t in, std::size_t out) { return {LayerKind::dense, in, out, 0, 1}; }
  static Layer conv(std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
                    std::size_t stride = 1) {
    return {LayerKind::conv, in_channels, out_channels, kernel, stride};
  }
  static Layer relu() { return {LayerKind::relu}; }
  static Layer flatten() { return {LayerKind::flatten}; }

  bool has_params() const { return kind == LayerKind::dense || kind == LayerKind::conv; }
  std::size_t fan_in() const { return kind == LayerKind::conv ? kernel * kernel * in : in; }
  Shape weight_shape() const {
    return kind == LayerKind::conv ? Shape{out, kernel * kernel * in} : Shape{in, out};
  }
  std::size_t param_count() const { return has_params() ? fan_in() * out + out : 0; }

  friend bool operator==(const Layer&, const Layer&) = default;
};

struct Architecture {
  Shape input_shape;  // per-sample extents: [d] or [H, W, C]
  std::size_t num_classes = 0;
  std::vector<Layer> layers;

  /// Walks the layer list and returns the per-sample output shape.
  Shape output_shape() const {
    if (input_shape.empty() || numel(input_shape) == 0) throw ShapeError("architecture: empty input shape");
    Shape s = input_shape;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const Layer& l = layers[i];
      const std::string where = "layer " + std::to_string(i) + ": ";
      switch (l.kind) {
        case LayerKind::dense:
          if (s.size() != 1 || s[0] != l.in) {
            throw ShapeError(where + "dense(" + std::to_string(l.in) + "->" + std::to_string(l.out) +
                             ") cannot consume " + to_string(s));
          }
          if (l.out == 0) throw ShapeError(where + "dense with zero outputs");
          s = Shape{l.out};
          break;
        case LayerKind::conv:
          if (s.size() != 3 || s[2] != l.in || l.kernel == 0 || l.stride == 0 || l.kernel > s[0] ||
              l.kernel > s[1] || l.out == 0) {
            throw ShapeError(where + "conv(" + std::to_string(l.in) + "->" + std::to_string(l.out) + ", " +
                             std::to_string(l.kernel) + "x" + std::to_string(l.kernel) + ") cannot consume " +
                             to_string(s));
          }
          s = Shape{(s[0] - l.kernel) / l.stride + 1, (s[1] - l.kernel) / l.stride + 1, l.out};
          break;
        case LayerKind::relu:
          break;
        case LayerKind::flatten:
          s = Shape{numel(s)};
          break;
      }
    }
    if (s != Shape{num_classes}) {
      throw ShapeError("architecture produces " + to_string(s) + " but declares " +
                       std::to_string(num_classes) + " classes");
    }
    return s;
  }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (const Layer& l : layers) n += l.param_count();
    return n;
  }

  /// Text form used in checkpoints, e.g. "input=28x28x1;classes=10;conv:1:8:3:1;relu;...".
  std::string describe() const {
    std::ostringstream out;
    out << "input=";
    for (std::size_t i = 0; i < input_shape.size(); ++i) out << (i ? "x" : "") << input_shape[i];
    out << ";classes=" << num_classes;
    for (const Layer& l : layers) {
      switch (l.kind) {
        case LayerKind::dense: out << ";dense:" << l.in << ':' << l.out; break;
        case LayerKind::conv: out << ";conv:" << l.in << ':' << l.out << ':' << l.kernel << ':' << l.stride; break;
        case LayerKind::relu: out << ";relu"; break;
        case LayerKind::flatten: out << ";flatten"; break;
      }
    }
    return out.str();
  }

  static Architecture parse(std::string_view text) {
    auto split = [](std::string_view s, char sep) {
      std::vector<std::string> parts;
      std::size_t start = 0;
      while (true) {
        const std::size_t pos = s.find(sep, start);
        parts.emplace_back(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
        if (pos == std::string_view::npos) break;
        start = pos + 1;
      }
      return parts;
    };
    auto number = [&](const std::string& s) -> std::size_t {
      std::size_t used = 0;
      unsigned long long v = 0;
      try {
        v = std::stoull(s, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != s.size() || s.empty()) throw ShapeError("architecture: bad number '" + s + "'");
      return static_cast<std::size_t>(v);
    };
    Architecture arch;
    for (const std::string& tok : split(text, ';')) {
      if (tok.rfind("input=", 0) == 0) {
        for (const std::string& d : split(std::string_view(tok).substr(6), 'x')) arch.input_shape.push_back(number(d));
      } else if (tok.rfind("classes=", 0) == 0) {
        arch.num_classes = number(tok.substr(8));
      } else {
        const auto f = split(tok, ':');
        if (f[0] == "dense" && f.size() == 3) {
          arch.layers.push_back(Layer::dense(number(f[1]), number(f[2])));
        } else if (f[0] == "conv" && f.size() == 5) {
          arch.layers.push_back(Layer::conv(number(f[1]), number(f[2]), number(f[3]), number(f[4])));
        } else if (f[0] == "relu" && f.size() == 1) {
          arch.layers.push_back(Layer::relu());
        } else if (f[0] == "flatten" && f.size() == 1) {
          arch.layers.push_back(Layer::flatten());
        } else {
          throw ShapeError("architecture: unknown layer '" + tok + "'");
        }
      }
    }
    arch.output_shape();
    return arch;
  }

  friend bool operator==(const Architecture&, const Architecture&) = default;
};

namespace arch {

/// conv(1->8, 3x3) -> relu -> conv(8->16, 3x3, stride 2) -> relu -> flatten -> dense.
inline Architecture desk_cnn(std::size_t height, std::size_t width, std::size_t channels, std::size_t classes) {
  const std::size_t h1 = height - 2, w1 = width - 2;
  const std::size_t h2 = (h1 - 3) / 2 + 1, w2 = (w1 - 3) / 2 + 1;
  return {Shape{height, width, channels},
          classes,
          {Layer::conv(channels, 8, 3), Layer::relu(), Layer::conv(8, 16, 3, 2), Layer::relu(), Layer::flatten(),
           Layer::dense(h2 * w2 * 16, classes)}};
}

inline Architecture mlp(std::size_t inputs, std::vector<std::size_t> hidden, std::size_t classes) {
  Architecture a{Shape{inputs}, classes, {}};
  std::size_t prev = inputs;
  for (std::size_t h : hidden) {
    a.layers.push_back(Layer::dense(prev, h));
    a.layers.push_back(Layer::relu());
    prev = h;
  }
  a.layers.push_back(Layer::dense(prev, classes));
  return a;
}

inline Architecture linear(std::size_t inputs, std::size_t classes) { return mlp(inputs, {}, classes); }

}  // namespace arch

/// Forward/backward traversal counts, the unit of training cost.
struct PassCounter {
  std::uint64_t forward = 0;
  std::uint64_t backward = 0;

  PassCounter& operator+=(const PassCounter& o) {
    forward += o.forward;
    backward += o.backward;
    return *this;
  }
  friend bool operator==(const PassCounter&, const PassCounter&) = default;
};

class Model {
 public:
  Model() = default;
  Model(Architecture arch, std::vector<Tensor> params) : arch_(std::move(arch)), params_(std::move(params)) {
    arch_.output_shape();
    std::size_t p = 0;
    for (const Layer& l : arch_.layers) {
      if (!l.has_params()) continue;
      if (params_.size() < p + 2 || params_[p].shape() != l.weight_shape() ||
          params_[p + 1].shape() != Shape{l.out}) {
        throw ShapeError("model parameters do not match architecture");
      }
      p += 2;
    }
    if (p != params_.size()) throw ShapeError("model has extra parameter tensors");
  }

  const Architecture& arch() const { return arch_; }
  const std::vector<Tensor>& params() const { return params_; }
  std::vector<Tensor>& params() { return params_; }
  std::size_t num_classes() const { return arch_.num_classes; }
  const Shape& input_shape() const { return arch_.input_shape; }
  std::size_t input_size() const { return numel(arch_.input_shape); }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (const Tensor& t : params_) n += t.size();
    return n;
  }

 private:
  Architecture arch_;
  std::vector<Tensor> params_;  // weight, bias per parametrized layer
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.
inline Model build_model(const Architecture& arch, std::uint64_t seed) {
  arch.output_shape();
  std::vector<Tensor> params;
  std::uint64_t stream = 0;
  for (const Layer& l : arch.layers) {
    if (!l.has_params()) continue;
    const double bound = 1.0 / std::sqrt(static_cast<double>(l.fan_in()));
    for (Shape shape : {l.weight_shape(), Shape{l.out}}) {
      CounterRng rng(seed, stream++);
      Tensor t(shape);
      for (double& v : t.data()) v = rng.uniform(-bound, bound);
      params.push_back(std::move(t));
    }
  }
  return Model(arch, std::move(params));
}

struct Batch {
  Tensor inputs;            // [n, ...input_shape]
  std::vector<int> labels;  // n entries
};

using Labels = std::shared_ptr<const std::vector<int>>;

inline Labels share_labels(std::span<const int> labels) {
  return std::make_shared<const std::vector<int>>(labels.begin(), labels.end());
}

inline void check_inputs(const Model& model, const Tensor& inputs, std::size_t label_count) {
  Shape expected = model.input_shape();
  expected.insert(expected.begin(), inputs.rank() ? inputs.dim(0) : 0);
  if (inputs.shape() != expected || inputs.dim(0) == 0) {
    throw ShapeError("inputs " + to_string(inputs.shape()) + " do not match model input " +
                     to_string(model.input_shape()));
  }
  if (label_count != inputs.dim(0)) {
    throw ShapeError("batch has " + std::to_string(inputs.dim(0)) + " inputs but " + std::to_string(label_count) +
                     " labels");
  }
}

inline std::vector<Var> bind(Graph& g, const Model& model) {
  std::vector<Var> out;
  out.reserve(model.params().size());
  for (const Tensor& t : model.params()) out.push_back(g.input(t));
  return out;
}

/// Logits [n, classes] for inputs already placed on the graph.
inline Var forward(const Model& model, std::span<const Var> params, Var x) {
  const std::size_t n = x.shape().at(0);
  std::size_t p = 0;
  Var h = x;
  Shape spatial = model.input_shape();  // per-sample extents of h
  for (const Layer& l : model.arch().layers) {
    switch (l.kind) {
      case LayerKind::dense:
        if (h.shape().size() != 2 || h.shape()[0] != n) h = reshape(h, Shape{n, h.value().size() / n});
        h = add_row_vector(matmul(h, params[p]), params[p + 1]);
        spatial = Shape{l.out};
        p += 2;
        break;
      case LayerKind::conv: {
        // Conv activations stay flat as [N*H*W, C] between layers.
        const ConvGeometry geo{n, spatial[0], spatial[1], spatial[2], l.kernel, l.stride};
        h = conv2d(h, params[p], params[p + 1], geo);
        spatial = Shape{geo.out_h(), geo.out_w(), l.out};
        p += 2;
        break;
      }
      case LayerKind::relu:
        h = relu(h);
        break;
      case LayerKind::flatten:
        h = reshape(h, Shape{n, h.value().size() / n});
        spatial = Shape{numel(spatial)};
        break;
    }
  }
  return h;
}

/// Sum over the batch of per-sample cross-entropy. Its input gradient is the
/// per-sample gradient of each sample's own loss.
inline Var loss_sum(const Model& model, std::span<const Var> params, Var x, const Labels& labels) {
  return sum(cross_entropy_rows(forward(model, params, x), labels));
}

/// Mean softmax cross-entropy over the batch, attached to `g`.
inline Var loss(Graph& g, const Model& model, std::span<const Var> params, const Batch& batch) {
  check_inputs(model, batch.inputs, batch.labels.size());
  Var x = g.input(batch.inputs);
  return mean(cross_entropy_rows(forward(model, params, x), share_labels(batch.labels)));
}

inline double loss(const Model& model, const Batch& batch) {
  Graph g;
  const auto params = bind(g, model);
  return loss(g, model, params, batch).value().item();
}

inline Tensor logits(const Model& model, const Tensor& inputs, PassCounter* passes = nullptr) {
  check_inputs(model, inputs, inputs.dim(0));
  Graph g;
  const auto params = bind(g, model);
  Var out = forward(model, params, g.input(inputs));
  if (passes) ++passes->forward;
  return out.value();
}

inline std::vector<double> per_sample_loss(const Model& model, const Tensor& inputs, std::span<const int> labels,
                                           PassCounter* passes = nullptr) {
  check_inputs(model, inputs, labels.size());
  Graph g;
  const auto params = bind(g, model);
  Var l = cross_entropy_rows(forward(model, params, g.input(inputs)), share_labels(labels));
  if (passes) ++passes->forward;
  return l.value().storage();
}

inline std::vector<int> argmax_rows(const Tensor& logits) {
  std::vector<int> out(logits.dim(0));
  for (std::size_t i = 0; i < out.size(); ++i) {
    const auto r = logits.row(i);
    out[i] = static_cast<int>(std::max_element(r.begin(), r.end()) - r.begin());
  }
  return out;
}

struct Scores {
  std::vector<double> losses;
  std::vector<int> predictions;
};

/// Per-sample loss and predicted class from one forward pass.
inline Scores score(const Model& model, const Tensor& inputs, std::span<const int> labels,
                    PassCounter* passes = nullptr) {
  check_inputs(model, inputs, labels.size());
  Graph g;
  const auto params = bind(g, model);
  Var z = forward(model, params, g.input(inputs));
  Var l = cross_entropy_rows(z, share_labels(labels));
  if (passes) ++passes->forward;
  return Scores{l.value().storage(), argmax_rows(z.value())};
}

struct GradientProbe {
  Tensor gradient;             // per-sample input gradient, shaped like inputs
  std::vector<double> losses;  // per-sample loss at the evaluation point
  std::vector<int> predictions;
};

/// One forward and one backward pass at `inputs`.
inline GradientProbe probe_gradient(const Model& model, const Tensor& inputs, std::span<const int> labels,
                                    PassCounter* passes = nullptr) {
  check_inputs(model, inputs, labels.size());
  Graph g;
  const auto params = bind(g, model);
  Var x = g.input(inputs);
  Var z = forward(model, params, x);
  Var per = cross_entropy_rows(z, share_labels(labels));
  Var total = sum(per);
  GradientProbe out;
  out.losses = per.value().storage();
  out.predictions = argmax_rows(z.value());
  const Var wrt[] = {x};
  out.gradient = g.backward(total, wrt)[0];
  if (passes) {
    ++passes->forward;
    ++passes->backward;
  }
  return out;
}

/// Per-sample gradient of each sample's loss with respect to its input.
inline Tensor input_gradient(const Model& model, const Tensor& inputs, std::span<const int> labels,
                             PassCounter* passes = nullptr) {
  return probe_gradient(model, inputs, labels, passes).gradient;
}

inline Tensor input_gradient(const Model& model, const Batch& batch, PassCounter* passes = nullptr) {
  return input_gradient(model, batch.inputs, batch.labels, passes);
}

// ---------------------------------------------------------------------------
// Checkpoints: "COLAB1", u32 LE descriptor length, descriptor text, then
// every parameter as a little-endian IEEE-754 double in layer order.

inline constexpr char kCheckpointMagic[6] = {'C', 'O', 'L', 'A', 'B', '1'};

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void put_u64_le(std::ostream& out, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(b, 8);
}

inline std::uint64_t get_u64_le(std::istream& in) {
  unsigned char b[8];
  if (!in.read(reinterpret_cast<char*>(b), 8)) throw FormatError("checkpoint truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

}  // namespace detail

inline void save_checkpoint(std::ostream& out, const Model& model) {
  out.write(kCheckpointMagic, sizeof kCheckpointMagic);
  const std::string desc = model.arch().describe();
  const auto len = static_cast<std::uint32_t>(desc.size());
  for (int i = 0; i < 4; ++i) out.put(static_cast<char>((len >> (8 * i)) & 0xff));
  out.write(desc.data(), static_cast<std::streamsize>(desc.size()));
  for (const Tensor& t : model.params()) {
    for (double v : t.data()) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, sizeof bits);
      detail::put_u64_le(out, bits);
    }
  }
}

inline Model load_checkpoint(std::istream& in) {
  char magic[6];
  if (!in.read(magic, 6) || std::memcmp(magic, kCheckpointMagic, 6) != 0) {
    throw FormatError("not a COLAB1 checkpoint");
  }
  unsigned char lb[4];
  if (!in.read(reinterpret_cast<char*>(lb), 4)) throw FormatError("checkpoint truncated");
  const std::uint32_t len = lb[0] | (lb[1] << 8) | (lb[2] << 16) | (static_cast<std::uint32_t>(lb[3]) << 24);
  std::string desc(len, '\0');
  if (!in.read(desc.data(), len)) throw FormatError("checkpoint truncated");
  Architecture arch = Architecture::parse(desc);
  std::vector<Tensor> params;
  for (const Layer& l : arch.layers) {
    if (!l.has_params()) continue;
    for (Shape shape : {l.weight_shape(), Shape{l.out}}) {
      Tensor t(shape);
      for (double& v : t.data()) {
        const std::uint64_t bits = detail::get_u64_le(in);
        std::memcpy(&v, &bits, sizeof v);
      }
      params.push_back(std::move(t));
    }
  }
  if (in.peek() != std::char_traits<char>::eof()) throw FormatError("checkpoint has trailing bytes");
  return Model(std::move(arch), std::move(params));
}

inline void save_checkpoint(const std::string& path, const Model& model) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  save_checkpoint(out, model);
}

inline Model load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  return load_checkpoint(in);
}

}  // namespace colab
