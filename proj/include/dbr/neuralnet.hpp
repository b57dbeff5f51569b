#pragma once

// Feedforward tanh networks with exact reverse-mode gradients and Adam.
//
// A network with layer sizes [n_in, n_0, ..., n_{L-1}, n_out] applies
// tanh(W x + b) on every hidden layer and a plain affine map on the last one.
// Batches are row-major: one input per row.

#include "dbr/core.hpp"
#include "dbr/paths.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <vector>

namespace dbr {

struct DenseLayer {
  Eigen::MatrixXd weights;  ///< n_out x n_in
  Eigen::VectorXd bias;     ///< n_out
};

/// Optional affine preprocessing x -> (x - shift) .* scale applied before the first layer.
struct InputScaling {
  Eigen::VectorXd shift;
  Eigen::VectorXd scale;
};

class MlpNetwork {
 public:
  MlpNetwork() = default;
  /// All parameters zero.
  explicit MlpNetwork(std::vector<std::size_t> layer_sizes);

  const std::vector<std::size_t>& layer_sizes() const { return sizes_; }
  std::size_t input_size() const { return sizes_.empty() ? 0 : sizes_.front(); }
  std::size_t output_size() const { return sizes_.empty() ? 0 : sizes_.back(); }
  std::size_t parameter_count() const;

  std::vector<DenseLayer>& layers() { return layers_; }
  const std::vector<DenseLayer>& layers() const { return layers_; }

  std::optional<InputScaling> input_scaling;

 private:
  std::vector<std::size_t> sizes_;
  std::vector<DenseLayer> layers_;
};

/// Per-parameter partial derivatives, laid out exactly like MlpNetwork::layers().
struct GradBundle {
  std::vector<DenseLayer> layers;
};

/// Flat view over layer parameters: each layer's weights (row-major) then its bias.
double& flat_parameter(std::vector<DenseLayer>& layers, std::size_t index);
double flat_parameter(const std::vector<DenseLayer>& layers, std::size_t index);

/// Glorot-uniform weights in [-sqrt(6 / (fan_in + fan_out)), +...], zero biases. Uses lane 0 of `stream`.
MlpNetwork init_xavier(const std::vector<std::size_t>& layer_sizes, const RngStream& stream);

/// Activations of every layer for one batch; activations[0] is the (scaled) input.
struct ForwardTrace {
  std::vector<Matrix> activations;
  const Matrix& output() const { return activations.back(); }
};

Matrix forward_batch(const MlpNetwork& net, const Matrix& inputs);
const Matrix& forward_traced(const MlpNetwork& net, const Matrix& inputs, ForwardTrace& trace);

/// Gradient of sum_b <out_grads_b, net(inputs_b)> with respect to every parameter.
GradBundle backward_batch(const MlpNetwork& net, const Matrix& inputs, const Matrix& out_grads);
void backward_traced(const MlpNetwork& net, const ForwardTrace& trace, const Matrix& out_grads, GradBundle& grads);

struct GradCheckOptions {
  std::size_t parameters = 100;  ///< sampled without replacement (all if the net is smaller)
  double step = 1e-5;
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  double max_relative_deviation = 0.0;
  std::size_t parameters_checked = 0;
  bool within_tolerance = true;
};

/// Compares `analytic` with central differences of sum_b <out_grads_b, net(inputs_b)>
/// on sampled parameters; deviation is |analytic - fd| / (|fd| + 1e-12).
GradCheckResult check_gradient(const MlpNetwork& net, const Matrix& inputs, const Matrix& out_grads,
                               const GradBundle& analytic, double tolerance, const GradCheckOptions& options = {});

/// check_gradient against backward_batch.
GradCheckResult grad_check(const MlpNetwork& net, const Matrix& inputs, const Matrix& out_grads, double tolerance,
                           const GradCheckOptions& options = {});

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  bool operator==(const AdamOptions&) const = default;
};

class AdamState {
 public:
  AdamState(const MlpNetwork& net, AdamOptions options = {});

  const AdamOptions& options() const { return options_; }
  std::uint64_t steps() const { return steps_; }

 private:
  friend void adam_update(AdamState&, MlpNetwork&, const GradBundle&, double);

  AdamOptions options_;
  std::uint64_t steps_ = 0;
  std::vector<DenseLayer> first_;
  std::vector<DenseLayer> second_;
};

/// One bias-corrected Adam step. Throws on non-finite gradients or lr <= 0.
void adam_update(AdamState& state, MlpNetwork& net, const GradBundle& grads, double lr);

// Checkpoints: see docs/checkpoint_format.md for the byte layout.
void save_checkpoint(const MlpNetwork& net, std::ostream& out);
MlpNetwork load_checkpoint(std::istream& in);
void save_checkpoint(const MlpNetwork& net, const std::filesystem::path& file);
MlpNetwork load_checkpoint(const std::filesystem::path& file);

}  // namespace dbr
