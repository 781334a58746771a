#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mrr/tensor.hpp"

namespace mrr {

enum class LayerKind { Dense, Conv2D, MaxPool2D, ReLU, GlobalAvgPool, L2Normalize, Softmax };

std::string_view to_string(LayerKind kind);
LayerKind layer_kind_from_string(std::string_view name);

struct LayerHyper {
  std::size_t in_features = 0;  // Dense (flattened input)
  std::size_t units = 0;        // Dense
  std::size_t in_channels = 0;  // Conv2D
  std::size_t out_channels = 0; // Conv2D
  std::size_t kernel = 0;       // Conv2D, square, valid padding, stride 1
  std::size_t window = 0;       // MaxPool2D, stride == window
  double epsilon = 1e-12;       // L2Normalize divide guard

  friend bool operator==(const LayerHyper&, const LayerHyper&) = default;
};

struct Layer {
  LayerKind kind = LayerKind::ReLU;
  LayerHyper hyper;
  // Dense: {weight (units, in_features), bias (units)}.
  // Conv2D: {kernel (out, in, k, k), bias (out)}. Everything else: empty.
  std::vector<Tensor> params;

  static Layer dense(std::size_t in_features, std::size_t units);
  static Layer conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel);
  static Layer max_pool(std::size_t window);
  static Layer relu();
  static Layer global_avg_pool();
  static Layer l2_normalize(double epsilon = 1e-12);
  static Layer softmax();

  bool has_params() const { return !params.empty(); }
  std::string describe() const;

  // Per-sample output shape; throws ShapeError naming the layer when `in` does not fit.
  Shape output_shape(const Shape& in) const;

  friend bool operator==(const Layer&, const Layer&) = default;
};

struct Network {
  Shape input_shape;  // per sample, e.g. (1, 28, 28)
  std::vector<Layer> layers;

  // Per-sample shapes: element 0 is the input, element i+1 the output of layer i.
  std::vector<Shape> activation_shapes() const;
  Shape output_shape() const;
  std::size_t num_classes() const;
  std::size_t parameter_count() const;

  friend bool operator==(const Network&, const Network&) = default;
};

// He-style uniform fan-in initialization, biases zero.
void initialize(Network& net, std::uint64_t seed);

// Result of L2-normalizing the rows of a batch.
struct L2NormalizeResult {
  Tensor output;
  std::size_t degenerate_rows = 0;  // rows with norm < epsilon, divided by epsilon instead
};

L2NormalizeResult l2_normalize(const Tensor& rows, double epsilon = 1e-12);

// All activations of one forward pass, kept for backward().
struct ForwardTrace {
  std::vector<Tensor> activations;                   // size layers + 1
  std::vector<std::vector<std::size_t>> pool_argmax; // per layer; empty unless MaxPool2D
  std::vector<std::vector<double>> row_norms;        // per layer; L2Normalize only
  std::size_t degenerate_rows = 0;

  const Tensor& output() const { return activations.back(); }
};

ForwardTrace forward_trace(const Network& net, const Tensor& batch);

struct ForwardResult {
  Tensor logits;
  std::optional<Tensor> captured;  // activations exiting layer `capture_at`
  std::size_t degenerate_rows = 0;
};

ForwardResult forward(const Network& net, const Tensor& batch,
                      std::optional<std::size_t> capture_at = std::nullopt);

std::vector<int> predict(const Network& net, const Tensor& batch, std::size_t chunk = 256);

// Extra gradient added to the output of layer `layer` during backward.
struct InjectedGrad {
  std::size_t layer;
  Tensor grad;
};

struct Gradients {
  std::vector<std::vector<Tensor>> params;  // mirrors Network::layers[i].params
  Tensor input;
};

Gradients backward(const Network& net, const ForwardTrace& trace, const Tensor& grad_output,
                   std::span<const InjectedGrad> injected = {});

struct LossAndGrad {
  double loss = 0.0;
  Tensor grad;
};

// Mean softmax cross-entropy over the batch and its gradient w.r.t. the logits.
LossAndGrad cross_entropy(const Tensor& logits, std::span<const int> labels);

Tensor softmax_rows(const Tensor& logits);

struct TrainConfig {
  double learning_rate = 0.05;
  std::size_t batch_size = 32;
  std::size_t epochs = 3;
  std::uint64_t seed = 1;
};

void validate(const TrainConfig& cfg);

struct TrainResult {
  std::vector<double> epoch_loss;  // mean training loss per epoch
};

void apply_sgd(Network& net, const Gradients& grads, double learning_rate);

// Batches of a seeded shuffle of [0, n).
std::vector<std::vector<std::size_t>> shuffled_batches(std::size_t n, std::size_t batch_size,
                                                       std::uint64_t seed, std::size_t epoch);

void check_labels(std::span<const int> labels, std::size_t num_classes);

// Plain minibatch SGD on mean cross-entropy.
TrainResult train(Network& net, const Tensor& images, std::span<const int> labels,
                  const TrainConfig& cfg);

double accuracy(const Network& net, const Tensor& images, std::span<const int> labels);

}  // namespace mrr
