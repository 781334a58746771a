#include "mrr/network.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "mrr/error.hpp"
#include "mrr/kernels.hpp"
#include "mrr/rng.hpp"

namespace mrr {
namespace {

constexpr LayerKind kAllKinds[] = {LayerKind::Dense,         LayerKind::Conv2D,      LayerKind::MaxPool2D,
                                   LayerKind::ReLU,          LayerKind::GlobalAvgPool, LayerKind::L2Normalize,
                                   LayerKind::Softmax};

[[noreturn]] void layer_shape_error(const Layer& layer, const Shape& in, const std::string& why) {
  throw ShapeError(layer.describe() + ": input " + shape_to_string(in) + " " + why);
}

Shape batched(std::size_t batch, const Shape& per_sample) {
  Shape s{batch};
  s.insert(s.end(), per_sample.begin(), per_sample.end());
  return s;
}

}  // namespace

std::string_view to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::Dense: return "Dense";
    case LayerKind::Conv2D: return "Conv2D";
    case LayerKind::MaxPool2D: return "MaxPool2D";
    case LayerKind::ReLU: return "ReLU";
    case LayerKind::GlobalAvgPool: return "GlobalAvgPool";
    case LayerKind::L2Normalize: return "L2Normalize";
    case LayerKind::Softmax: return "Softmax";
  }
  return "?";
}

LayerKind layer_kind_from_string(std::string_view name) {
  for (LayerKind k : kAllKinds) {
    if (to_string(k) == name) return k;
  }
  throw DataError("unknown layer kind '" + std::string(name) + "'");
}

Layer Layer::dense(std::size_t in_features, std::size_t units) {
  Layer l;
  l.kind = LayerKind::Dense;
  l.hyper.in_features = in_features;
  l.hyper.units = units;
  l.params = {Tensor({units, in_features}), Tensor({units})};
  return l;
}

Layer Layer::conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel) {
  Layer l;
  l.kind = LayerKind::Conv2D;
  l.hyper.in_channels = in_channels;
  l.hyper.out_channels = out_channels;
  l.hyper.kernel = kernel;
  l.params = {Tensor({out_channels, in_channels, kernel, kernel}), Tensor({out_channels})};
  return l;
}

Layer Layer::max_pool(std::size_t window) {
  Layer l;
  l.kind = LayerKind::MaxPool2D;
  l.hyper.window = window;
  return l;
}

Layer Layer::relu() { return Layer{}; }

Layer Layer::global_avg_pool() {
  Layer l;
  l.kind = LayerKind::GlobalAvgPool;
  return l;
}

Layer Layer::l2_normalize(double epsilon) {
  Layer l;
  l.kind = LayerKind::L2Normalize;
  l.hyper.epsilon = epsilon;
  return l;
}

Layer Layer::softmax() {
  Layer l;
  l.kind = LayerKind::Softmax;
  return l;
}

std::string Layer::describe() const {
  std::ostringstream out;
  out << to_string(kind);
  switch (kind) {
    case LayerKind::Dense: out << '(' << hyper.in_features << "->" << hyper.units << ')'; break;
    case LayerKind::Conv2D:
      out << '(' << hyper.in_channels << "->" << hyper.out_channels << ", k=" << hyper.kernel << ')';
      break;
    case LayerKind::MaxPool2D: out << "(w=" << hyper.window << ')'; break;
    default: break;
  }
  return out.str();
}

Shape Layer::output_shape(const Shape& in) const {
  switch (kind) {
    case LayerKind::Dense:
      if (shape_size(in) != hyper.in_features) {
        layer_shape_error(*this, in, "flattens to " + std::to_string(shape_size(in)) + " features, expected " +
                                         std::to_string(hyper.in_features));
      }
      return {hyper.units};
    case LayerKind::Conv2D:
      if (in.size() != 3 || in[0] != hyper.in_channels || in[1] < hyper.kernel || in[2] < hyper.kernel) {
        layer_shape_error(*this, in, "is not a (channels, height, width) map this kernel fits");
      }
      return {hyper.out_channels, in[1] - hyper.kernel + 1, in[2] - hyper.kernel + 1};
    case LayerKind::MaxPool2D:
      if (in.size() != 3 || hyper.window == 0 || in[1] < hyper.window || in[2] < hyper.window) {
        layer_shape_error(*this, in, "is not a spatial map at least one window wide");
      }
      return {in[0], in[1] / hyper.window, in[2] / hyper.window};
    case LayerKind::GlobalAvgPool:
      if (in.size() != 3) layer_shape_error(*this, in, "is not a (channels, height, width) map");
      return {in[0]};
    case LayerKind::ReLU:
    case LayerKind::L2Normalize:
    case LayerKind::Softmax:
      return in;
  }
  return in;
}

std::vector<Shape> Network::activation_shapes() const {
  std::vector<Shape> shapes{input_shape};
  shapes.reserve(layers.size() + 1);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    try {
      shapes.push_back(layers[i].output_shape(shapes.back()));
    } catch (const ShapeError& e) {
      throw ShapeError("layer " + std::to_string(i) + " " + e.what());
    }
  }
  return shapes;
}

Shape Network::output_shape() const { return activation_shapes().back(); }

std::size_t Network::num_classes() const { return shape_size(output_shape()); }

std::size_t Network::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers)
    for (const auto& p : l.params) n += p.size();
  return n;
}

void initialize(Network& net, std::uint64_t seed) {
  Rng rng(seed);
  for (auto& layer : net.layers) {
    if (!layer.has_params()) continue;
    const std::size_t fan_in = layer.kind == LayerKind::Dense
                                   ? layer.hyper.in_features
                                   : layer.hyper.in_channels * layer.hyper.kernel * layer.hyper.kernel;
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (double& w : layer.params[0].data) w = rng.uniform(-limit, limit);
    std::fill(layer.params[1].data.begin(), layer.params[1].data.end(), 0.0);
  }
}

L2NormalizeResult l2_normalize(const Tensor& rows, double epsilon) {
  L2NormalizeResult r{rows, 0};
  const std::size_t n = rows.rank() <= 1 ? 1 : rows.rows();
  const std::size_t width = rows.rank() <= 1 ? rows.size() : rows.row_size();
  for (std::size_t b = 0; b < n; ++b) {
    std::span<double> row(r.output.data.data() + b * width, width);
    double norm = norm2(row);
    if (norm < epsilon) {
      norm = epsilon;
      ++r.degenerate_rows;
    }
    for (double& v : row) v /= norm;
  }
  return r;
}

ForwardTrace forward_trace(const Network& net, const Tensor& batch) {
  if (batch.rank() != net.input_shape.size() + 1 ||
      !std::equal(net.input_shape.begin(), net.input_shape.end(), batch.shape.begin() + 1)) {
    throw ShapeError("input batch " + shape_to_string(batch.shape) + " does not match network input " +
                     shape_to_string(net.input_shape) + " with a leading batch axis");
  }
  const auto shapes = net.activation_shapes();
  const std::size_t B = batch.rows();

  ForwardTrace t;
  t.activations.reserve(net.layers.size() + 1);
  t.activations.push_back(batch);
  t.pool_argmax.resize(net.layers.size());
  t.row_norms.resize(net.layers.size());

  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const Layer& layer = net.layers[i];
    const Tensor& in = t.activations.back();
    const Shape& sin = shapes[i];
    Tensor out(batched(B, shapes[i + 1]));
    switch (layer.kind) {
      case LayerKind::Dense:
        kernels::dense_forward({B, layer.hyper.in_features, layer.hyper.units}, in.data, layer.params[0].data,
                               layer.params[1].data, out.data);
        break;
      case LayerKind::Conv2D:
        kernels::conv2d_forward({B, sin[0], sin[1], sin[2], layer.hyper.out_channels, layer.hyper.kernel},
                                in.data, layer.params[0].data, layer.params[1].data, out.data);
        break;
      case LayerKind::MaxPool2D:
        t.pool_argmax[i].resize(out.size());
        kernels::maxpool_forward({B, sin[0], sin[1], sin[2], layer.hyper.window}, in.data, out.data,
                                 t.pool_argmax[i]);
        break;
      case LayerKind::ReLU:
        for (std::size_t k = 0; k < in.size(); ++k) out[k] = in[k] > 0.0 ? in[k] : 0.0;
        break;
      case LayerKind::GlobalAvgPool: {
        const std::size_t plane = sin[1] * sin[2];
        for (std::size_t bc = 0; bc < B * sin[0]; ++bc) {
          double acc = 0.0;
          for (std::size_t k = 0; k < plane; ++k) acc += in[bc * plane + k];
          out[bc] = acc / static_cast<double>(plane);
        }
        break;
      }
      case LayerKind::L2Normalize: {
        const std::size_t width = in.row_size();
        auto& norms = t.row_norms[i];
        norms.resize(B);
        for (std::size_t b = 0; b < B; ++b) {
          double norm = norm2(in.row(b));
          if (norm < layer.hyper.epsilon) {
            norm = layer.hyper.epsilon;
            ++t.degenerate_rows;
          }
          norms[b] = norm;
          for (std::size_t k = 0; k < width; ++k) out[b * width + k] = in[b * width + k] / norm;
        }
        break;
      }
      case LayerKind::Softmax: {
        Tensor flat = in.reshaped({B, in.row_size()});
        out.data = softmax_rows(flat).data;
        break;
      }
    }
    t.activations.push_back(std::move(out));
  }
  return t;
}

ForwardResult forward(const Network& net, const Tensor& batch, std::optional<std::size_t> capture_at) {
  if (capture_at && *capture_at >= net.layers.size()) {
    throw ShapeError("capture layer " + std::to_string(*capture_at) + " out of range for a " +
                     std::to_string(net.layers.size()) + "-layer network");
  }
  ForwardTrace t = forward_trace(net, batch);
  ForwardResult r;
  r.degenerate_rows = t.degenerate_rows;
  if (capture_at) r.captured = std::move(t.activations[*capture_at + 1]);
  r.logits = std::move(t.activations.back());
  r.logits = r.logits.reshaped({batch.rows(), r.logits.row_size()});
  return r;
}

std::vector<int> predict(const Network& net, const Tensor& batch, std::size_t chunk) {
  std::vector<int> out;
  out.reserve(batch.rows());
  for (std::size_t first = 0; first < batch.rows(); first += chunk) {
    const std::size_t last = std::min(batch.rows(), first + chunk);
    const Tensor logits = forward(net, slice_rows(batch, first, last)).logits;
    for (std::size_t b = 0; b < logits.rows(); ++b) {
      auto row = logits.row(b);
      out.push_back(static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()));
    }
  }
  return out;
}

Gradients backward(const Network& net, const ForwardTrace& trace, const Tensor& grad_output,
                   std::span<const InjectedGrad> injected) {
  const auto shapes = net.activation_shapes();
  const std::size_t B = trace.activations.front().rows();
  if (grad_output.size() != trace.output().size()) {
    throw ShapeError("output gradient " + shape_to_string(grad_output.shape) + " does not match network output " +
                     shape_to_string(trace.output().shape));
  }

  Gradients grads;
  grads.params.resize(net.layers.size());
  std::vector<double> g = grad_output.data;

  for (std::size_t ii = net.layers.size(); ii-- > 0;) {
    const Layer& layer = net.layers[ii];
    for (const auto& inj : injected) {
      if (inj.layer != ii) continue;
      if (inj.grad.size() != g.size()) {
        throw ShapeError("injected gradient at layer " + std::to_string(ii) + " has " +
                         std::to_string(inj.grad.size()) + " values, expected " + std::to_string(g.size()));
      }
      for (std::size_t k = 0; k < g.size(); ++k) g[k] += inj.grad[k];
    }
    const Tensor& in = trace.activations[ii];
    const Tensor& out = trace.activations[ii + 1];
    const Shape& sin = shapes[ii];
    std::vector<double> gin(in.size(), 0.0);

    switch (layer.kind) {
      case LayerKind::Dense: {
        auto& pg = grads.params[ii];
        pg = {Tensor(layer.params[0].shape), Tensor(layer.params[1].shape)};
        kernels::dense_backward({B, layer.hyper.in_features, layer.hyper.units}, in.data, layer.params[0].data, g,
                                gin, pg[0].data, pg[1].data);
        break;
      }
      case LayerKind::Conv2D: {
        auto& pg = grads.params[ii];
        pg = {Tensor(layer.params[0].shape), Tensor(layer.params[1].shape)};
        kernels::conv2d_backward({B, sin[0], sin[1], sin[2], layer.hyper.out_channels, layer.hyper.kernel}, in.data,
                                 layer.params[0].data, g, gin, pg[0].data, pg[1].data);
        break;
      }
      case LayerKind::MaxPool2D:
        kernels::maxpool_backward({B, sin[0], sin[1], sin[2], layer.hyper.window}, g, trace.pool_argmax[ii], gin);
        break;
      case LayerKind::ReLU:
        for (std::size_t k = 0; k < gin.size(); ++k) gin[k] = in[k] > 0.0 ? g[k] : 0.0;
        break;
      case LayerKind::GlobalAvgPool: {
        const std::size_t plane = sin[1] * sin[2];
        const double scale = 1.0 / static_cast<double>(plane);
        for (std::size_t bc = 0; bc < B * sin[0]; ++bc)
          for (std::size_t k = 0; k < plane; ++k) gin[bc * plane + k] = g[bc] * scale;
        break;
      }
      case LayerKind::L2Normalize: {
        // y = v / |v|  =>  dv = (g - y (y.g)) / |v|; degenerate rows were divided by epsilon.
        const std::size_t width = in.row_size();
        for (std::size_t b = 0; b < B; ++b) {
          const double norm = trace.row_norms[ii][b];
          const double* y = out.data.data() + b * width;
          const double* gb = g.data() + b * width;
          double* gi = gin.data() + b * width;
          if (norm2(in.row(b)) < layer.hyper.epsilon) {
            for (std::size_t k = 0; k < width; ++k) gi[k] = gb[k] / norm;
            continue;
          }
          double yg = 0.0;
          for (std::size_t k = 0; k < width; ++k) yg += y[k] * gb[k];
          for (std::size_t k = 0; k < width; ++k) gi[k] = (gb[k] - y[k] * yg) / norm;
        }
        break;
      }
      case LayerKind::Softmax: {
        const std::size_t width = in.row_size();
        for (std::size_t b = 0; b < B; ++b) {
          const double* y = out.data.data() + b * width;
          const double* gb = g.data() + b * width;
          double yg = 0.0;
          for (std::size_t k = 0; k < width; ++k) yg += y[k] * gb[k];
          for (std::size_t k = 0; k < width; ++k) gin[b * width + k] = y[k] * (gb[k] - yg);
        }
        break;
      }
    }
    g = std::move(gin);
  }
  grads.input = Tensor(trace.activations.front().shape, std::move(g));
  return grads;
}

Tensor softmax_rows(const Tensor& logits) {
  Tensor p = logits;
  const std::size_t width = logits.row_size();
  for (std::size_t b = 0; b < logits.rows(); ++b) {
    double* row = p.data.data() + b * width;
    const double m = *std::max_element(row, row + width);
    double z = 0.0;
    for (std::size_t k = 0; k < width; ++k) {
      row[k] = std::exp(row[k] - m);
      z += row[k];
    }
    for (std::size_t k = 0; k < width; ++k) row[k] /= z;
  }
  return p;
}

void check_labels(std::span<const int> labels, std::size_t num_classes) {
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes) {
      throw DataError("label " + std::to_string(labels[i]) + " at index " + std::to_string(i) +
                      " outside [0, " + std::to_string(num_classes) + ")");
    }
  }
}

LossAndGrad cross_entropy(const Tensor& logits, std::span<const int> labels) {
  const std::size_t B = logits.rows();
  const std::size_t C = logits.row_size();
  if (labels.size() != B) throw ShapeError("cross_entropy: label count does not match batch");
  check_labels(labels, C);
  LossAndGrad r;
  r.grad = softmax_rows(logits);
  const double inv_b = 1.0 / static_cast<double>(B);
  for (std::size_t b = 0; b < B; ++b) {
    auto row = logits.row(b);
    const double m = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double v : row) z += std::exp(v - m);
    r.loss += (m + std::log(z) - row[labels[b]]) * inv_b;
    r.grad[b * C + labels[b]] -= 1.0;
  }
  for (double& v : r.grad.data) v *= inv_b;
  return r;
}

void validate(const TrainConfig& cfg) {
  if (!(cfg.learning_rate > 0.0)) throw DataError("learning rate must be positive");
  if (cfg.batch_size < 1) throw DataError("batch size must be at least 1");
  if (cfg.epochs < 1) throw DataError("epochs must be at least 1");
}

void apply_sgd(Network& net, const Gradients& grads, double learning_rate) {
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    auto& params = net.layers[i].params;
    for (std::size_t p = 0; p < params.size(); ++p) {
      auto& w = params[p].data;
      const auto& gw = grads.params[i][p].data;
      for (std::size_t k = 0; k < w.size(); ++k) w[k] -= learning_rate * gw[k];
    }
  }
}

std::vector<std::vector<std::size_t>> shuffled_batches(std::size_t n, std::size_t batch_size, std::uint64_t seed,
                                                       std::size_t epoch) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(seed + 0x9E3779B97F4A7C15ULL * (epoch + 1));
  rng.shuffle(std::span<std::size_t>(order));
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t first = 0; first < n; first += batch_size) {
    batches.emplace_back(order.begin() + first, order.begin() + std::min(n, first + batch_size));
  }
  return batches;
}

TrainResult train(Network& net, const Tensor& images, std::span<const int> labels, const TrainConfig& cfg) {
  validate(cfg);
  if (images.rows() == 0) throw DataError("cannot train on an empty dataset");
  if (labels.size() != images.rows()) throw DataError("image and label counts differ");
  check_labels(labels, net.num_classes());

  TrainResult result;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    double total = 0.0;
    for (const auto& idx : shuffled_batches(images.rows(), cfg.batch_size, cfg.seed, epoch)) {
      const Tensor x = gather_rows(images, idx);
      std::vector<int> y(idx.size());
      for (std::size_t k = 0; k < idx.size(); ++k) y[k] = labels[idx[k]];
      const ForwardTrace trace = forward_trace(net, x);
      const LossAndGrad ce = cross_entropy(trace.output(), y);
      apply_sgd(net, backward(net, trace, ce.grad), cfg.learning_rate);
      total += ce.loss * static_cast<double>(idx.size());
    }
    const double mean = total / static_cast<double>(images.rows());
    if (!std::isfinite(mean)) throw DivergenceError("training loss became non-finite");
    result.epoch_loss.push_back(mean);
  }
  return result;
}

double accuracy(const Network& net, const Tensor& images, std::span<const int> labels) {
  const auto pred = predict(net, images);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == labels[i];
  return pred.empty() ? 0.0 : static_cast<double>(hit) / static_cast<double>(pred.size());
}

}  // namespace mrr
