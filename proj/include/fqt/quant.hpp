#pragma once

// Gradient and activation quantizers.
//
// Every quantizer is an affine map into [0, B] followed by rounding and the
// inverse map:
//
//   Q(X) = S^-1 round(S (X - 1 z) - o) + S^-1 o + 1 z
//
// The three supported scale structures are a per-tensor scalar, a per-row
// diagonal and a block diagonal of Householder-times-diagonal factors. All of
// them live behind ScaleTransform so fitting, quantization, exact variance
// and serialization are written once.

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "fqt/matrix.hpp"
#include "fqt/rng.hpp"

namespace fqt::quant {

/// Bit width b in [2, 8] and the resulting bin count B = 2^b - 1.
class QuantBits {
 public:
  explicit QuantBits(int bits);
  int bits() const { return bits_; }
  int bins() const { return (1 << bits_) - 1; }
  double bins_d() const { return static_cast<double>(bins()); }
  friend bool operator==(QuantBits, QuantBits) = default;

 private:
  int bits_;
};

enum class Variant { PerTensor, PerSample, BlockHouseholder };

std::string to_string(Variant v);
/// Accepts "ptq", "psq", "bhq" and the long names returned by to_string.
Variant parse_variant(const std::string& text);

struct PerTensorParams {
  double scale = 1.0;
  double zero = 0.0;
  /// Zero dynamic range: every value equals `zero` and is reproduced exactly.
  bool degenerate = false;
};

struct PerSampleParams {
  std::vector<double> scales;
  std::vector<double> zeros;
  std::vector<std::uint8_t> degenerate;
};

/// One diagonal block of the block Householder scale matrix. `rows[0]` is the
/// large row; the remaining entries are the small rows that share its bins.
struct HouseholderGroup {
  std::vector<std::size_t> rows;
  double s1 = 1.0;
  double s2 = 1.0;
  /// Range of the large row and twice the largest small-row magnitude, as
  /// measured on the fitted matrix (after the degenerate-value clamp).
  double lambda1 = 0.0;
  double lambda2 = 0.0;
  /// Post-rotation offset subtracted from each local row.
  std::vector<double> offsets;
  /// False for single-row and zero-range groups, which are plain row scaling.
  bool rotated = false;
  bool degenerate = false;

  std::size_t size() const { return rows.size(); }
  double scale_of(std::size_t local) const { return local == 0 ? s1 : s2; }
};

struct BlockHouseholderParams {
  std::size_t n_rows = 0;
  std::vector<HouseholderGroup> groups;
};

class ScaleTransform {
 public:
  using Params = std::variant<PerTensorParams, PerSampleParams, BlockHouseholderParams>;

  ScaleTransform(Params params, QuantBits bits);

  Variant variant() const;
  QuantBits bits() const { return bits_; }
  const Params& params() const { return params_; }

  /// Forward affine map X -> S (X - 1 z) - o. The result lies in [0, B] for
  /// any matrix the transform was fitted on.
  Matrix apply(const Matrix& m) const;
  /// Inverse of apply.
  Matrix invert(const Matrix& t) const;
  /// S^-1 e, the linear part of the inverse (no offsets or zero points).
  Matrix apply_inverse_linear(const Matrix& e) const;
  /// Dense S^-1 for an n-row input.
  Matrix inverse_scale_matrix(std::size_t n_rows) const;
  /// ||S^-1||_F^2 for an n-row input.
  double inverse_frobenius_sq(std::size_t n_rows) const;

  friend bool operator==(const ScaleTransform&, const ScaleTransform&);

 private:
  void check_rows(std::size_t n_rows) const;

  Params params_;
  QuantBits bits_;
};

/// Matrix of bin codes in [0, B]; B <= 255 so one byte per entry suffices.
class CodeMatrix {
 public:
  CodeMatrix(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), data_(rows * cols) {}
  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::uint8_t& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  std::uint8_t operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  std::span<const std::uint8_t> values() const { return data_; }
  std::span<std::uint8_t> values() { return data_; }
  friend bool operator==(const CodeMatrix&, const CodeMatrix&) = default;

 private:
  std::size_t rows_;
  std::size_t cols_;
  std::vector<std::uint8_t> data_;
};

struct QuantizedGrad {
  CodeMatrix codes;
  ScaleTransform transform;
};

enum class Rounding {
  Stochastic,
  /// Round to nearest. Biased; used as a negative control only.
  Nearest,
};

// --- rounding primitives ---------------------------------------------------

/// SR(x): ceil(x) with probability x - floor(x), floor(x) otherwise.
Matrix stochastic_round(const Matrix& m, Rng& rng);
/// Round to nearest, ties away from zero.
Matrix deterministic_round(const Matrix& m);
/// Entrywise Var[SR(x)] = frac(x) (1 - frac(x)).
Matrix rounding_variance(const Matrix& m);

// --- fitting -----------------------------------------------------------------

ScaleTransform fit_per_tensor(const Matrix& m, QuantBits bits);
ScaleTransform fit_per_sample(const Matrix& m, QuantBits bits);

/// Row partition chosen for the block Householder quantizer.
struct Grouping {
  struct Group {
    std::size_t large_row;
    std::vector<std::size_t> small_rows;
  };
  std::vector<Group> groups;
  /// Approximate variance sum_i M_i^2 / |group_i| for every candidate count G
  /// (index G - 1); infinity where a candidate is infeasible.
  std::vector<double> scores;
};

/// Groups rows so each group holds one large row and a share of small rows
/// proportional to the large row's magnitude. Candidate group counts are
/// scored by the approximate variance and the smallest score wins, with ties
/// going to fewer groups.
Grouping select_groups(const Matrix& m);

struct HouseholderScales {
  double s1;
  double s2;
};

/// Minimizer of s1^-2 + n s2^-2 subject to
/// lambda1 s1 n^-1/2 + lambda2 s2 n^1/2 = B. lambda2 is clamped to at least
/// 1e-12 lambda1.
HouseholderScales optimal_householder_scales(double lambda1, double lambda2, std::size_t n,
                                             QuantBits bits);

/// Q x with Q = I - 2 v v^T / ||v||^2 and v = 1/sqrt(n) - e1, without forming Q.
std::vector<double> householder_reflect(std::span<const double> x);
/// Applies the same reflection in place.
void householder_reflect_inplace(std::span<double> x);

/// A rotated group is kept only where it lowers ||S^-1||_F^2 below per-row
/// scaling of the same rows; if no group is rotated the per-sample transform
/// is returned.
ScaleTransform fit_block_householder(const Matrix& m, QuantBits bits);

ScaleTransform fit(Variant variant, const Matrix& m, QuantBits bits);

// --- quantization --------------------------------------------------------------

/// Rounds the transformed matrix. Throws std::domain_error if a transformed
/// entry leaves [0, B] by more than 1e-9, which means the transform was fitted
/// on a different matrix.
QuantizedGrad quantize(const Matrix& m, const ScaleTransform& t, Rng& rng,
                       Rounding rounding = Rounding::Stochastic);
Matrix dequantize(const QuantizedGrad& q);

/// Fit + quantize + dequantize in one call.
Matrix quantize_dequantize(Variant variant, const Matrix& m, QuantBits bits, Rng& rng,
                           Rounding rounding = Rounding::Stochastic);

/// Deterministic per-tensor quantizer used on the forward path: fit per
/// tensor, round to nearest, map back.
Matrix quantize_forward(const Matrix& m, QuantBits bits);

/// E[Q(m) | m] computed in closed form from the two rounding outcomes.
Matrix expected_dequantize(const Matrix& m, const ScaleTransform& t);

struct ConditionalVariance {
  Matrix per_entry;
  double total = 0.0;
};

/// Exact Var[Q(m) | m]: entry (i, j) is sum_k (S^-1)_ik^2 p_kj (1 - p_kj).
ConditionalVariance exact_conditional_variance(const Matrix& m, const ScaleTransform& t);

/// Closed-form upper bound on the quantizer variance for a d-column input:
///   per tensor         N d R^2 / (4 B^2)
///   per sample         d / (4 B^2) sum_i R_i^2
///   block Householder  d / (4 B^2) sum_groups (l1^2/3 n^-1/3 + l2^2/3 n^2/3)^3
/// where single-row groups contribute d R^2 / (4 B^2).
double variance_bound(const ScaleTransform& t, std::size_t n_rows, std::size_t d);

/// The generic matrix-quantizer bound d/4 ||S^-1||_F^2.
double frobenius_variance_bound(const ScaleTransform& t, std::size_t n_rows, std::size_t d);

// --- serialization -------------------------------------------------------------

/// Line-oriented text record; field order is documented in the README.
void write_transform(std::ostream& out, const ScaleTransform& t);
ScaleTransform read_transform(std::istream& in);
std::string to_text(const ScaleTransform& t);

}  // namespace fqt::quant
