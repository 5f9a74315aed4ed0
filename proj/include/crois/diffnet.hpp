#pragma once

// Dense multilayer perceptron with a detachable linear classifier head.
//
// Batches are row-major in the sense that row i of a batch matrix is example
// i. A layer maps an [n x in] activation to [n x out] via A * W^T + 1 b^T.
// Hidden layers use the rectifier; the head (always the last layer) is linear.

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace crois {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

enum class Activation { relu, identity };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& s);

struct DenseLayer {
  Matrix weight;  // [out x in]
  Vector bias;    // [out]
  Activation activation = Activation::relu;

  int in() const { return static_cast<int>(weight.cols()); }
  int out() const { return static_cast<int>(weight.rows()); }
};

bool operator==(const DenseLayer& a, const DenseLayer& b);

class MlpModel {
 public:
  MlpModel() = default;

  /// Takes ownership of `layers`; throws ShapeError unless consecutive
  /// dimensions chain. The last layer is forced to the identity activation.
  explicit MlpModel(std::vector<DenseLayer> layers, std::uint64_t init_seed = 0);

  /// Glorot-uniform weights, zero biases. `widths` lists the input dimension,
  /// every hidden width, then the number of classes.
  static MlpModel initialize(std::span<const int> widths, std::uint64_t seed);

  const std::vector<DenseLayer>& layers() const { return layers_; }
  std::vector<DenseLayer>& layers() { return layers_; }

  std::size_t num_layers() const { return layers_.size(); }
  std::size_t head_index() const { return layers_.size() - 1; }
  const DenseLayer& head() const { return layers_.back(); }
  DenseLayer& head() { return layers_.back(); }

  int input_dim() const { return layers_.front().in(); }
  /// Dimension of the penultimate activation (the head's input).
  int feature_dim() const { return head().in(); }
  int num_classes() const { return head().out(); }

  std::uint64_t init_seed() const { return init_seed_; }

  /// The head alone, as a one-layer model over feature space.
  MlpModel head_model() const;
  /// Replaces the head; throws ShapeError if the shape differs.
  void set_head(const DenseLayer& head);

  bool all_finite() const;
  std::size_t num_parameters() const;

  friend bool operator==(const MlpModel& a, const MlpModel& b);

 private:
  std::vector<DenseLayer> layers_;
  std::uint64_t init_seed_ = 0;
};

/// Shape-congruent with the model it was computed from.
struct Gradients {
  std::vector<Matrix> weight;
  std::vector<Vector> bias;

  static Gradients zeros_like(const MlpModel& model);
};

struct ForwardResult {
  Matrix logits;    // [n x k]
  Matrix features;  // [n x d], the head's input
};

/// Intermediate activations retained for backpropagation.
/// activations[0] is the input batch, activations[l + 1] the output of layer l.
struct ForwardTrace {
  std::vector<Matrix> activations;

  const Matrix& logits() const { return activations.back(); }
  const Matrix& features() const { return activations[activations.size() - 2]; }
};

ForwardResult forward(const MlpModel& model, const Matrix& batch);
ForwardTrace forward_trace(const MlpModel& model, const Matrix& batch);

/// Penultimate activations only.
Matrix extract_features(const MlpModel& model, const Matrix& batch);

/// Row-wise softmax with max subtraction.
Matrix softmax(const Matrix& logits);

/// Per-row cross-entropy, log input clamped at 1e-12.
Vector cross_entropy(const Matrix& logits, std::span<const int> labels);

/// Row-wise argmax, ties to the lowest class index.
std::vector<int> predict(const Matrix& logits);

struct LossAndGradients {
  double loss = 0.0;
  Gradients grads;
};

/// loss = sum_i w_i CE_i / sum_i w_i, with exact gradients of that loss.
LossAndGradients backward(const MlpModel& model, const Matrix& batch, std::span<const int> labels,
                          std::span<const double> weights);

/// Same as above, reusing a trace from forward_trace on the same batch.
LossAndGradients backward(const MlpModel& model, const ForwardTrace& trace,
                          std::span<const int> labels, std::span<const double> weights);

enum class UpdateScope { full, head_only };

struct SgdOptions {
  double lr = 1e-4;
  double momentum = 0.9;
  double l2 = 0.0;
  UpdateScope scope = UpdateScope::full;
};

/// Momentum buffers; lazily sized on first use.
struct SgdVelocity {
  Gradients buffers;
  bool initialized = false;
};

/// v <- momentum * v + g + l2 * theta;  theta <- theta - lr * v.
/// In head_only scope every non-head parameter and buffer is left untouched.
void sgd_step(MlpModel& model, const Gradients& grads, const SgdOptions& options,
              SgdVelocity& velocity);

/// Divides each head row by its norm raised to `tau` and zeroes the head bias.
MlpModel rescale_head(const MlpModel& model, double tau);

// Checkpoints are JSON documents:
//   {"format": "crois-mlp", "version": 1, "init_seed": S, "head_index": H,
//    "layers": [{"in": I, "out": O, "activation": "relu"|"identity",
//                "weight": [row-major O*I values], "bias": [O values]}, ...]}
nlohmann::json model_to_json(const MlpModel& model);
MlpModel model_from_json(const nlohmann::json& doc);
void save_checkpoint(const MlpModel& model, const std::filesystem::path& path);
MlpModel load_checkpoint(const std::filesystem::path& path);

}  // namespace crois
