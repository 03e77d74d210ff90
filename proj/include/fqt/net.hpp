#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "fqt/matrix.hpp"
#include "fqt/quant.hpp"
#include "fqt/rng.hpp"

namespace fqt::net {

/// Fully connected layer without bias; `weight` is in_dim x out_dim so the
/// forward map is H W.
struct Linear {
  Matrix weight;
};

struct Relu {};

using Layer = std::variant<Linear, Relu>;

class Network {
 public:
  explicit Network(std::vector<Layer> layers);

  const std::vector<Layer>& layers() const { return layers_; }
  std::vector<Layer>& layers() { return layers_; }
  std::size_t size() const { return layers_.size(); }
  bool is_linear(std::size_t l) const { return std::holds_alternative<Linear>(layers_[l]); }

  std::size_t input_dim() const { return input_dim_; }
  std::size_t output_dim() const { return output_dim_; }
  /// Width of the activation produced by layer l.
  std::size_t output_dim(std::size_t l) const;
  std::size_t parameter_count() const;

  friend bool operator==(const Network&, const Network&);

 private:
  std::vector<Layer> layers_;
  std::size_t input_dim_ = 0;
  std::size_t output_dim_ = 0;
};

/// Linear/ReLU stack over `dims` (input, hidden..., classes) with He-scaled
/// Gaussian weights.
Network make_mlp(const std::vector<std::size_t>& dims, std::uint64_t seed);

/// Parses "linear(8,32) relu linear(32,4)".
std::vector<Layer> parse_layers(const std::string& text, std::uint64_t seed);
std::string describe(const Network& net);

/// Flat binary checkpoint: magic "FQTNET01", u64 layer count, per layer a
/// u64 kind (0 linear, 1 relu) and for linear u64 rows, u64 cols followed by
/// rows*cols little-endian f64 values.
void save_checkpoint(const Network& net, const std::filesystem::path& path);
Network load_checkpoint(const std::filesystem::path& path);

// --- quantization scheme -------------------------------------------------------

enum class GradVariant { None, PerTensor, PerSample, BlockHouseholder };

std::string to_string(GradVariant v);
GradVariant parse_grad_variant(const std::string& text);

struct GradQuantizer {
  GradVariant variant = GradVariant::PerTensor;
  int bits = 8;
  quant::Rounding rounding = quant::Rounding::Stochastic;
};

/// Forward quantizers are deterministic per-tensor at `forward_bits`
/// (0 disables them). The output gradient of every linear layer is quantized
/// twice, independently: `weight_grad` feeds the parameter gradient and
/// `act_grad` feeds the gradient passed to the layer below.
struct QuantScheme {
  int forward_bits = 8;
  GradQuantizer weight_grad{GradVariant::PerTensor, 8};
  GradQuantizer act_grad{GradVariant::PerSample, 8};

  /// Scheme whose gradient quantizers are the identity.
  static QuantScheme identity_gradients(int forward_bits = 8);
  void validate() const;
};

// --- forward -----------------------------------------------------------------------

struct LayerRecord {
  /// Input as seen by the layer (quantized for linear layers under QAT/FQT).
  Matrix input;
  /// Weight as used (quantized under QAT/FQT); empty for ReLU.
  Matrix weight;
  Matrix output;
};

struct Tape {
  Matrix x;
  std::vector<LayerRecord> layers;
};

struct ForwardResult {
  Matrix predictions;
  Tape tape;
};

ForwardResult forward_exact(const Network& net, const Matrix& x);
/// Deterministic: inputs and weights of every linear layer pass through
/// quant::quantize_forward at `scheme.forward_bits`.
ForwardResult forward_quantized(const Network& net, const Matrix& x, const QuantScheme& scheme);

// --- loss ----------------------------------------------------------------------------

struct LossAndGrad {
  /// Softmax cross-entropy summed over the batch.
  double loss = 0.0;
  /// d loss / d logits = softmax(h_i) - y_i per row.
  Matrix grad;
  std::size_t correct = 0;
};

/// `y` must be one-hot. `label_smoothing` mixes the targets with the uniform
/// distribution before the loss is taken.
LossAndGrad loss_and_grad(const Matrix& logits, const Matrix& y, double label_smoothing = 0.0);

// --- backward --------------------------------------------------------------------

struct Gradients {
  /// Per layer; empty for ReLU layers.
  std::vector<Matrix> params;
  /// activations[l] is the gradient w.r.t. the input of layer l;
  /// activations[size] is the output gradient.
  std::vector<Matrix> activations;
};

/// Flattens the parameter gradients of all linear layers in layer order.
std::vector<double> flatten_params(const Gradients& g);

Gradients backward_qat(const Network& net, const Tape& tape, const Matrix& grad_out);

/// Identifies one backward pass inside a Monte Carlo experiment. Layer l uses
/// substream (seed, trial, l, 0) for the weight-gradient quantizer and
/// (seed, trial, l, 1) for the activation-gradient quantizer.
struct TrialKey {
  std::uint64_t seed = 0;
  std::uint64_t trial = 0;
};

/// What a single backward pass fed into each linear layer's quantizers.
struct QuantizerInput {
  std::size_t layer;
  Matrix grad;  // the realized output gradient of the layer
};

Gradients backward_fqt(const Network& net, const Tape& tape, const Matrix& grad_out,
                       const QuantScheme& scheme, TrialKey key,
                       std::vector<QuantizerInput>* trace = nullptr);

/// Applies one configured gradient quantizer (identity for GradVariant::None).
Matrix apply_grad_quantizer(const GradQuantizer& q, const Matrix& g, Rng& rng);
/// Fitted transform for a gradient quantizer; nullopt for GradVariant::None.
std::optional<quant::ScaleTransform> fit_grad_quantizer(const GradQuantizer& q, const Matrix& g);

// --- explicit Jacobians --------------------------------------------------------------

inline constexpr std::size_t kMaxJacobianDim = 4096;

struct Jacobians {
  /// d vec(H_out) / d vec(H_in), rows indexed by output entries.
  Matrix j;
  /// d vec(H_out) / d vec(W); zero columns for ReLU.
  Matrix k;
};

/// vec() is row-major throughout: entry (n, c) of an N x D matrix maps to n*D + c.
Jacobians jacobians(const Network& net, const Tape& tape, std::size_t layer);
/// gamma(k, l) = J_l J_(l-1) ... J_(k+1) K_k for k <= l.
Matrix gamma(const Network& net, const Tape& tape, std::size_t k, std::size_t l);

}  // namespace fqt::net
