#pragma once

// Monte Carlo harness for the gradient estimators in net.hpp.
//
// Every experiment conditions on one fixed batch. Trials are keyed by
// (seed, trial) and split into `batches` contiguous blocks; each block is
// reduced on its own and the blocks are merged in index order, so results do
// not depend on the thread count.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fqt/matrix.hpp"
#include "fqt/net.hpp"
#include "fqt/quant.hpp"

namespace fqt::analysis {

struct McConfig {
  std::size_t trials = 10000;
  std::uint64_t seed = 1;
  /// Blocks for batched-means standard errors.
  std::size_t batches = 100;
  unsigned threads = 1;

  /// Throws std::invalid_argument unless trials >= 100, batches >= 2 and
  /// every block holds at least two trials.
  void validate() const;
};

struct Batch {
  Matrix x;
  Matrix y;
};

/// Per-coordinate running mean and sum of squared deviations.
class Moments {
 public:
  explicit Moments(std::size_t dim = 0) : mean_(dim, 0.0), m2_(dim, 0.0) {}

  void add(std::span<const double> x);
  /// Pairwise combination of two independent accumulators.
  void merge(const Moments& other);

  std::size_t count() const { return n_; }
  std::size_t dim() const { return mean_.size(); }
  const std::vector<double>& mean() const { return mean_; }
  /// Unbiased per-coordinate sample variance (n - 1 denominator).
  std::vector<double> variance() const;
  /// Sum of the per-coordinate sample variances.
  double total_variance() const;

 private:
  std::size_t n_ = 0;
  std::vector<double> mean_;
  std::vector<double> m2_;
};

/// Mean and standard error of a list of block estimates.
struct Estimate {
  double value = 0.0;
  double se = 0.0;
};
Estimate batched_mean(std::span<const double> block_values);

/// Runs f(block_index) for every block on up to `threads` workers.
void for_each_block(std::size_t blocks, unsigned threads, const std::function<void(std::size_t)>& f);

/// Trial range [begin, end) of block b.
std::pair<std::size_t, std::size_t> block_range(const McConfig& mc, std::size_t b);

// --- unbiasedness ------------------------------------------------------------------

struct BiasReport {
  std::size_t trials = 0;
  double k_sigma = 4.0;
  double required_fraction = 0.99;
  std::vector<double> qat;
  std::vector<double> mean;
  std::vector<double> se;
  /// Fraction of coordinates with |mean - qat| <= k_sigma * se. Coordinates
  /// with zero spread must match to 1e-12 relative.
  double fraction_within = 0.0;
  double max_abs_z = 0.0;
  double max_abs_deviation = 0.0;
  bool passed() const { return fraction_within >= required_fraction; }
};

/// Compares the Monte Carlo mean of the FQT parameter gradient with the QAT
/// gradient on a fixed batch. A scheme with biased rounding fails the check.
BiasReport bias_check(const net::Network& net, const Batch& batch, const net::QuantScheme& scheme,
                      const McConfig& mc, double k_sigma = 4.0, double required_fraction = 0.99);

// --- variance decomposition --------------------------------------------------------

/// Contribution of the quantizer at linear layer `source` to the gradient of
/// linear layer `param`. source == param is the weight-gradient quantizer,
/// param < source the activation-gradient quantizer. Indices are network
/// layer indices.
struct VarianceTerm {
  std::size_t source = 0;
  std::size_t param = 0;
  Estimate value;
};

struct VarianceReport {
  std::size_t trials = 0;
  /// Trace of the conditional covariance of the flattened parameter gradient,
  /// as the mean of per-block sample variances.
  Estimate total_mc;
  /// Variance from resampling the batch; zero because the batch is fixed.
  double qat_variance = 0.0;
  std::vector<VarianceTerm> terms;
  Estimate terms_sum;
  /// total_mc - terms_sum, with the block-wise standard error of the difference.
  Estimate difference;
  /// Exact quantizer variance times the summed squared operator norms of the
  /// propagation matrices, averaged over trials.
  Estimate quantizer_bound;
  /// Closed-form per-tensor bound; present when both gradient quantizers are
  /// per-tensor.
  std::optional<Estimate> range_bound;

  /// |difference| <= k * se(difference).
  bool decomposition_holds(double k = 3.0) const;
};

VarianceReport variance_decomposition(const net::Network& net, const Batch& batch,
                                      const net::QuantScheme& scheme, const McConfig& mc);

struct BoundCheck {
  bool quantizer_bound = false;
  std::optional<bool> range_bound;
  /// Standard errors used as slack.
  double k_sigma = 3.0;
  bool passed() const { return quantizer_bound && range_bound.value_or(true); }
};

/// measured total <= bound + k * sqrt(se_total^2 + se_bound^2) for each bound.
BoundCheck bound_check(const VarianceReport& report, double k_sigma = 3.0);

// --- bit sweep -----------------------------------------------------------------------

struct SweepRow {
  int bits = 0;
  double exact = 0.0;
  double bound = 0.0;
  Estimate mc;
  /// exact(bits) / exact(next wider width in the list); empty when undefined.
  std::optional<double> exact_ratio;
  std::optional<double> bound_ratio;
};

/// Exact quantizer variance, bound and a Monte Carlo re-estimate for each bit
/// width on one fixed gradient. `bits_list` is processed from widest to
/// narrowest; ratios compare each width with the previous (wider) row.
std::vector<SweepRow> bit_sweep(const Matrix& grad, quant::Variant variant,
                                const std::vector<int>& bits_list, const McConfig& mc);

/// Sweep over the QAT output gradients of every linear layer of `net`,
/// summed across layers.
std::vector<SweepRow> bit_sweep(const net::Network& net, const Batch& batch, int forward_bits,
                                quant::Variant variant, const std::vector<int>& bits_list,
                                const McConfig& mc);

// --- sparse gradient bench -------------------------------------------------------------

/// One row of magnitude lambda1 followed by n_rows - 1 rows of magnitude
/// lambda2 / 2: the large row spans exactly [-lambda1/2, lambda1/2] and the
/// small rows are uniform on [-lambda2/2, lambda2/2].
Matrix sparse_gradient(std::size_t n_rows, double lambda1, double lambda2, std::size_t d,
                       std::uint64_t seed);

struct SparseRow {
  quant::Variant variant;
  double exact = 0.0;
  double bound = 0.0;
};

struct SparseBench {
  std::size_t n_rows = 0;
  std::vector<SparseRow> rows;  // per tensor, per sample, block Householder
  double exact(quant::Variant v) const;
  /// BHQ < PSQ < PTQ on the exact variance.
  bool ordered() const;
};

SparseBench sparse_gradient_bench(std::size_t n_rows, double lambda1, double lambda2,
                                  std::size_t d, int bits, std::uint64_t seed);

}  // namespace fqt::analysis
