#include "fqt/quant.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace fqt::quant {

namespace {

constexpr double kRangeTolerance = 1e-9;
constexpr double kLambdaFloor = 1e-12;

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

double row_min(std::span<const double> v) { return *std::min_element(v.begin(), v.end()); }

// Local copy of a group's rows, row r of the result is m.row(rows[r]).
Matrix gather_rows(const Matrix& m, const std::vector<std::size_t>& rows) {
  Matrix out(rows.size(), m.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    auto src = m.row(rows[r]);
    std::copy(src.begin(), src.end(), out.row(r).begin());
  }
  return out;
}

void reflect_columns(Matrix& local) {
  std::vector<double> column(local.rows());
  for (std::size_t j = 0; j < local.cols(); ++j) {
    for (std::size_t i = 0; i < local.rows(); ++i) column[i] = local(i, j);
    householder_reflect_inplace(column);
    for (std::size_t i = 0; i < local.rows(); ++i) local(i, j) = column[i];
  }
}

// Q for an n-row group, formed explicitly for variance bookkeeping.
Matrix householder_matrix(std::size_t n) {
  Matrix q(n, n);
  std::vector<double> e(n, 0.0);
  for (std::size_t k = 0; k < n; ++k) {
    std::fill(e.begin(), e.end(), 0.0);
    e[k] = 1.0;
    householder_reflect_inplace(e);
    for (std::size_t i = 0; i < n; ++i) q(i, k) = e[i];
  }
  return q;
}

// Rows of diag(s) * local, reflected when the group is rotated.
Matrix scaled_group(const Matrix& local, const HouseholderGroup& g) {
  Matrix y = local;
  for (std::size_t i = 0; i < y.rows(); ++i) {
    const double s = g.scale_of(i);
    for (double& v : y.row(i)) v *= s;
  }
  if (g.rotated) reflect_columns(y);
  return y;
}

std::vector<double> row_minima(const Matrix& y) {
  std::vector<double> out(y.rows());
  for (std::size_t i = 0; i < y.rows(); ++i) out[i] = row_min(y.row(i));
  return out;
}

double max_row_range(const Matrix& y) {
  double best = 0.0;
  for (std::size_t i = 0; i < y.rows(); ++i) best = std::max(best, dynamic_range(y.row(i)));
  return best;
}

// Transformed matrix clamped into [0, B]; throws when the transform does not
// fit the input.
Matrix checked_transform(const Matrix& m, const ScaleTransform& t) {
  Matrix y = t.apply(m);
  const double b = t.bits().bins_d();
  for (double& v : y.values()) {
    if (v < -kRangeTolerance || v > b + kRangeTolerance) {
      throw std::domain_error("quantize: transformed value " + std::to_string(v) +
                              " outside [0, " + std::to_string(t.bits().bins()) +
                              "]; transform was fitted on a different matrix");
    }
    v = std::clamp(v, 0.0, b);
  }
  return y;
}

}  // namespace

// --- QuantBits / Variant -------------------------------------------------------

QuantBits::QuantBits(int bits) : bits_(bits) {
  if (bits < 2 || bits > 8) {
    throw std::invalid_argument("QuantBits: bit width " + std::to_string(bits) +
                                " outside [2, 8]");
  }
}

std::string to_string(Variant v) {
  switch (v) {
    case Variant::PerTensor: return "per_tensor";
    case Variant::PerSample: return "per_sample";
    case Variant::BlockHouseholder: return "block_householder";
  }
  return "unknown";
}

Variant parse_variant(const std::string& text) {
  if (text == "ptq" || text == "per_tensor") return Variant::PerTensor;
  if (text == "psq" || text == "per_sample") return Variant::PerSample;
  if (text == "bhq" || text == "block_householder") return Variant::BlockHouseholder;
  throw std::invalid_argument("unknown quantizer variant '" + text + "'");
}

// --- ScaleTransform ------------------------------------------------------------

ScaleTransform::ScaleTransform(Params params, QuantBits bits)
    : params_(std::move(params)), bits_(bits) {
  auto positive = [](double s) { return std::isfinite(s) && s > 0.0; };
  std::visit(Overloaded{
                 [&](const PerTensorParams& p) {
                   if (!positive(p.scale)) throw std::invalid_argument("per-tensor scale <= 0");
                 },
                 [&](const PerSampleParams& p) {
                   if (p.scales.size() != p.zeros.size() ||
                       p.scales.size() != p.degenerate.size())
                     throw std::invalid_argument("per-sample parameter lengths differ");
                   if (!std::all_of(p.scales.begin(), p.scales.end(), positive))
                     throw std::invalid_argument("per-sample scale <= 0");
                 },
                 [&](const BlockHouseholderParams& p) {
                   std::vector<std::uint8_t> seen(p.n_rows, 0);
                   for (const auto& g : p.groups) {
                     if (g.rows.empty() || g.offsets.size() != g.rows.size())
                       throw std::invalid_argument("householder group malformed");
                     if (!positive(g.s1) || !positive(g.s2))
                       throw std::invalid_argument("householder scale <= 0");
                     for (std::size_t r : g.rows) {
                       if (r >= p.n_rows || seen[r])
                         throw std::invalid_argument("householder groups do not partition rows");
                       seen[r] = 1;
                     }
                   }
                   if (std::find(seen.begin(), seen.end(), 0) != seen.end())
                     throw std::invalid_argument("householder groups do not cover all rows");
                 },
             },
             params_);
}

Variant ScaleTransform::variant() const {
  return std::visit(Overloaded{
                        [](const PerTensorParams&) { return Variant::PerTensor; },
                        [](const PerSampleParams&) { return Variant::PerSample; },
                        [](const BlockHouseholderParams&) { return Variant::BlockHouseholder; },
                    },
                    params_);
}

void ScaleTransform::check_rows(std::size_t n_rows) const {
  std::visit(Overloaded{
                 [](const PerTensorParams&) {},
                 [&](const PerSampleParams& p) {
                   if (p.scales.size() != n_rows)
                     throw std::invalid_argument("per-sample transform has " +
                                                 std::to_string(p.scales.size()) +
                                                 " rows, input has " + std::to_string(n_rows));
                 },
                 [&](const BlockHouseholderParams& p) {
                   if (p.n_rows != n_rows)
                     throw std::invalid_argument("householder transform has " +
                                                 std::to_string(p.n_rows) + " rows, input has " +
                                                 std::to_string(n_rows));
                 },
             },
             params_);
}

Matrix ScaleTransform::apply(const Matrix& m) const {
  check_rows(m.rows());
  Matrix out(m.rows(), m.cols());
  std::visit(Overloaded{
                 [&](const PerTensorParams& p) {
                   auto src = m.values();
                   auto dst = out.values();
                   for (std::size_t i = 0; i < src.size(); ++i) dst[i] = p.scale * (src[i] - p.zero);
                 },
                 [&](const PerSampleParams& p) {
                   for (std::size_t i = 0; i < m.rows(); ++i) {
                     auto src = m.row(i);
                     auto dst = out.row(i);
                     for (std::size_t j = 0; j < src.size(); ++j)
                       dst[j] = p.scales[i] * (src[j] - p.zeros[i]);
                   }
                 },
                 [&](const BlockHouseholderParams& p) {
                   for (const auto& g : p.groups) {
                     const Matrix y = scaled_group(gather_rows(m, g.rows), g);
                     for (std::size_t r = 0; r < g.size(); ++r) {
                       auto src = y.row(r);
                       auto dst = out.row(g.rows[r]);
                       for (std::size_t j = 0; j < src.size(); ++j) dst[j] = src[j] - g.offsets[r];
                     }
                   }
                 },
             },
             params_);
  return out;
}

Matrix ScaleTransform::invert(const Matrix& t) const {
  check_rows(t.rows());
  Matrix out(t.rows(), t.cols());
  std::visit(Overloaded{
                 [&](const PerTensorParams& p) {
                   auto src = t.values();
                   auto dst = out.values();
                   for (std::size_t i = 0; i < src.size(); ++i) dst[i] = src[i] / p.scale + p.zero;
                 },
                 [&](const PerSampleParams& p) {
                   for (std::size_t i = 0; i < t.rows(); ++i) {
                     auto src = t.row(i);
                     auto dst = out.row(i);
                     for (std::size_t j = 0; j < src.size(); ++j)
                       dst[j] = src[j] / p.scales[i] + p.zeros[i];
                   }
                 },
                 [&](const BlockHouseholderParams& p) {
                   for (const auto& g : p.groups) {
                     Matrix y = gather_rows(t, g.rows);
                     for (std::size_t r = 0; r < g.size(); ++r)
                       for (double& v : y.row(r)) v += g.offsets[r];
                     if (g.rotated) reflect_columns(y);
                     for (std::size_t r = 0; r < g.size(); ++r) {
                       const double s = g.scale_of(r);
                       auto src = y.row(r);
                       auto dst = out.row(g.rows[r]);
                       for (std::size_t j = 0; j < src.size(); ++j) dst[j] = src[j] / s;
                     }
                   }
                 },
             },
             params_);
  return out;
}

Matrix ScaleTransform::apply_inverse_linear(const Matrix& e) const {
  check_rows(e.rows());
  Matrix out(e.rows(), e.cols());
  std::visit(Overloaded{
                 [&](const PerTensorParams& p) {
                   auto src = e.values();
                   auto dst = out.values();
                   for (std::size_t i = 0; i < src.size(); ++i) dst[i] = src[i] / p.scale;
                 },
                 [&](const PerSampleParams& p) {
                   for (std::size_t i = 0; i < e.rows(); ++i) {
                     auto src = e.row(i);
                     auto dst = out.row(i);
                     for (std::size_t j = 0; j < src.size(); ++j) dst[j] = src[j] / p.scales[i];
                   }
                 },
                 [&](const BlockHouseholderParams& p) {
                   for (const auto& g : p.groups) {
                     Matrix y = gather_rows(e, g.rows);
                     if (g.rotated) reflect_columns(y);
                     for (std::size_t r = 0; r < g.size(); ++r) {
                       const double s = g.scale_of(r);
                       auto src = y.row(r);
                       auto dst = out.row(g.rows[r]);
                       for (std::size_t j = 0; j < src.size(); ++j) dst[j] = src[j] / s;
                     }
                   }
                 },
             },
             params_);
  return out;
}

Matrix ScaleTransform::inverse_scale_matrix(std::size_t n_rows) const {
  return apply_inverse_linear(Matrix::identity(n_rows));
}

double ScaleTransform::inverse_frobenius_sq(std::size_t n_rows) const {
  check_rows(n_rows);
  return std::visit(Overloaded{
                        [&](const PerTensorParams& p) {
                          return static_cast<double>(n_rows) / (p.scale * p.scale);
                        },
                        [&](const PerSampleParams& p) {
                          double acc = 0.0;
                          for (double s : p.scales) acc += 1.0 / (s * s);
                          return acc;
                        },
                        [&](const BlockHouseholderParams& p) {
                          // Q is orthogonal, so ||diag(1/s) Q||_F^2 = sum 1/s_i^2.
                          double acc = 0.0;
                          for (const auto& g : p.groups)
                            for (std::size_t r = 0; r < g.size(); ++r)
                              acc += 1.0 / (g.scale_of(r) * g.scale_of(r));
                          return acc;
                        },
                    },
                    params_);
}

bool operator==(const ScaleTransform& a, const ScaleTransform& b) {
  if (!(a.bits_ == b.bits_) || a.params_.index() != b.params_.index()) return false;
  return std::visit(
      Overloaded{
          [&](const PerTensorParams& p) {
            const auto& q = std::get<PerTensorParams>(b.params_);
            return p.scale == q.scale && p.zero == q.zero && p.degenerate == q.degenerate;
          },
          [&](const PerSampleParams& p) {
            const auto& q = std::get<PerSampleParams>(b.params_);
            return p.scales == q.scales && p.zeros == q.zeros && p.degenerate == q.degenerate;
          },
          [&](const BlockHouseholderParams& p) {
            const auto& q = std::get<BlockHouseholderParams>(b.params_);
            if (p.n_rows != q.n_rows || p.groups.size() != q.groups.size()) return false;
            for (std::size_t i = 0; i < p.groups.size(); ++i) {
              const auto& x = p.groups[i];
              const auto& y = q.groups[i];
              if (x.rows != y.rows || x.s1 != y.s1 || x.s2 != y.s2 || x.lambda1 != y.lambda1 ||
                  x.lambda2 != y.lambda2 || x.offsets != y.offsets || x.rotated != y.rotated ||
                  x.degenerate != y.degenerate)
                return false;
            }
            return true;
          },
      },
      a.params_);
}

// --- rounding --------------------------------------------------------------------

Matrix stochastic_round(const Matrix& m, Rng& rng) {
  Matrix out = m;
  for (double& v : out.values()) {
    const double lo = std::floor(v);
    const double p = v - lo;
    v = (p > 0.0 && rng.uniform() < p) ? lo + 1.0 : lo;
  }
  return out;
}

Matrix deterministic_round(const Matrix& m) {
  Matrix out = m;
  for (double& v : out.values()) v = std::round(v);  // half away from zero
  return out;
}

Matrix rounding_variance(const Matrix& m) {
  Matrix out = m;
  for (double& v : out.values()) {
    const double p = v - std::floor(v);
    v = p * (1.0 - p);
  }
  return out;
}

// --- fitting ---------------------------------------------------------------------

ScaleTransform fit_per_tensor(const Matrix& m, QuantBits bits) {
  const double r = dynamic_range(m);
  PerTensorParams p;
  p.zero = *std::min_element(m.values().begin(), m.values().end());
  if (r > 0.0) {
    p.scale = bits.bins_d() / r;
  } else {
    p.scale = 1.0;
    p.degenerate = true;
  }
  return ScaleTransform(p, bits);
}

ScaleTransform fit_per_sample(const Matrix& m, QuantBits bits) {
  if (m.empty()) throw std::invalid_argument("fit_per_sample: empty matrix");
  PerSampleParams p;
  p.scales.resize(m.rows());
  p.zeros.resize(m.rows());
  p.degenerate.resize(m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const double r = dynamic_range(m.row(i));
    p.zeros[i] = row_min(m.row(i));
    p.degenerate[i] = r > 0.0 ? 0 : 1;
    p.scales[i] = r > 0.0 ? bits.bins_d() / r : 1.0;
  }
  return ScaleTransform(std::move(p), bits);
}

Grouping select_groups(const Matrix& m) {
  if (m.empty()) throw std::invalid_argument("select_groups: empty matrix");
  const std::size_t n = m.rows();
  std::vector<double> mag(n);
  for (std::size_t i = 0; i < n; ++i) mag[i] = sup_norm(m.row(i));

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return mag[a] > mag[b]; });

  Grouping result;
  result.scores.assign(n, std::numeric_limits<double>::infinity());

  if (mag[order[0]] == 0.0) {
    result.groups.push_back({order[0], {order.begin() + 1, order.end()}});
    return result;
  }

  std::vector<std::size_t> best_sizes;
  double best_score = std::numeric_limits<double>::infinity();
  for (std::size_t g = 1; g <= n; ++g) {
    double total = 0.0;
    for (std::size_t i = 0; i < g; ++i) total += mag[order[i]];
    if (mag[order[g - 1]] == 0.0) break;  // a zero row cannot be a large row

    const std::size_t small = n - g;
    const std::size_t floor_size = small >= g ? 1 : 0;
    std::vector<std::size_t> sizes(g);
    std::size_t assigned = 0;
    for (std::size_t i = 0; i < g; ++i) {
      const double share = static_cast<double>(small) * mag[order[i]] / total;
      sizes[i] = std::max<std::size_t>(floor_size, static_cast<std::size_t>(std::llround(share)));
      assigned += sizes[i];
    }
    // Remainders go to the largest rows first and are taken back from the
    // smallest rows first.
    for (std::size_t i = 0; assigned < small; i = (i + 1) % g) {
      ++sizes[i];
      ++assigned;
    }
    while (assigned > small) {
      bool removed = false;
      for (std::size_t i = g; i-- > 0 && assigned > small;) {
        if (sizes[i] > floor_size) {
          --sizes[i];
          --assigned;
          removed = true;
        }
      }
      if (!removed) break;
    }

    double score = 0.0;
    for (std::size_t i = 0; i < g; ++i) {
      const double mi = mag[order[i]];
      score += mi * mi / static_cast<double>(1 + sizes[i]);
    }
    result.scores[g - 1] = score;
    if (score < best_score) {
      best_score = score;
      best_sizes = sizes;
    }
  }

  std::size_t next = best_sizes.size();
  for (std::size_t i = 0; i < best_sizes.size(); ++i) {
    Grouping::Group group{order[i], {}};
    for (std::size_t k = 0; k < best_sizes[i]; ++k) group.small_rows.push_back(order[next++]);
    result.groups.push_back(std::move(group));
  }
  return result;
}

HouseholderScales optimal_householder_scales(double lambda1, double lambda2, std::size_t n,
                                             QuantBits bits) {
  if (!(lambda1 > 0.0) || !std::isfinite(lambda1))
    throw std::invalid_argument("optimal_householder_scales: lambda1 must be positive");
  if (!(lambda2 >= 0.0) || !std::isfinite(lambda2))
    throw std::invalid_argument("optimal_householder_scales: lambda2 must be non-negative");
  if (n < 1) throw std::invalid_argument("optimal_householder_scales: n must be positive");
  lambda2 = std::max(lambda2, kLambdaFloor * lambda1);

  const double nd = static_cast<double>(n);
  const double b = bits.bins_d();
  const double denom =
      std::cbrt(lambda1 * lambda1) / std::cbrt(nd) + std::cbrt(lambda2 * lambda2) * std::cbrt(nd * nd);
  const double n16 = std::pow(nd, 1.0 / 6.0);
  return {b * n16 / (std::cbrt(lambda1) * denom), b * n16 / (std::cbrt(lambda2) * denom)};
}

void householder_reflect_inplace(std::span<double> x) {
  const std::size_t n = x.size();
  if (n < 2) return;
  // v = 1/sqrt(n) - e1, ||v||^2 = 2 - 2/sqrt(n).
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(n));
  double dot = 0.0;
  for (std::size_t i = 0; i < n; ++i) dot += x[i];
  dot = dot * inv_sqrt - x[0];
  const double coef = 2.0 * dot / (2.0 - 2.0 * inv_sqrt);
  for (std::size_t i = 0; i < n; ++i) x[i] -= coef * inv_sqrt;
  x[0] += coef;
}

std::vector<double> householder_reflect(std::span<const double> x) {
  if (x.size() < 2) throw std::invalid_argument("householder_reflect: need at least 2 entries");
  std::vector<double> out(x.begin(), x.end());
  householder_reflect_inplace(out);
  return out;
}

namespace {

HouseholderGroup fit_group(const Matrix& m, const Grouping::Group& spec, QuantBits bits) {
  HouseholderGroup g;
  g.rows.push_back(spec.large_row);
  g.rows.insert(g.rows.end(), spec.small_rows.begin(), spec.small_rows.end());
  const Matrix local = gather_rows(m, g.rows);
  const std::size_t n = g.size();
  const double b = bits.bins_d();

  double small_sup = 0.0;
  bool any_range = false;
  for (std::size_t r = 0; r < n; ++r) {
    if (r > 0) small_sup = std::max(small_sup, sup_norm(local.row(r)));
    any_range = any_range || dynamic_range(local.row(r)) > 0.0;
  }
  g.lambda1 = dynamic_range(local.row(0));
  g.lambda2 = 2.0 * small_sup;

  if (!any_range) {
    g.degenerate = true;
    g.offsets = row_minima(local);
    return g;
  }

  if (n == 1) {
    g.s1 = g.s2 = b / g.lambda1;
    g.offsets = row_minima(scaled_group(local, g));
    return g;
  }

  g.rotated = true;
  g.lambda1 = std::max(g.lambda1, kLambdaFloor * g.lambda2);
  g.lambda2 = std::max(g.lambda2, kLambdaFloor * g.lambda1);

  // Range of the reflected small rows. The worst case is lambda2 sqrt(n); the
  // measured value lets the small rows claim only the bins they need.
  Matrix small = local;
  std::fill(small.row(0).begin(), small.row(0).end(), 0.0);
  reflect_columns(small);
  const double measured = max_row_range(small) / std::sqrt(static_cast<double>(n));
  const double lambda2_eff = std::max(std::min(g.lambda2, measured), kLambdaFloor * g.lambda1);

  const auto s = optimal_householder_scales(g.lambda1, lambda2_eff, n, bits);
  g.s1 = s.s1;
  g.s2 = s.s2;

  // The closed form satisfies an upper bound on the range; stretch both
  // scales until the widest row uses all B bins.
  Matrix y = scaled_group(local, g);
  const double widest = max_row_range(y);
  if (widest > 0.0) {
    const double stretch = b / widest;
    g.s1 *= stretch;
    g.s2 *= stretch;
    y = scaled_group(local, g);
  }
  g.offsets = row_minima(y);
  return g;
}

}  // namespace

ScaleTransform fit_block_householder(const Matrix& m, QuantBits bits) {
  const Grouping grouping = select_groups(m);
  BlockHouseholderParams p;
  p.n_rows = m.rows();
  const double b = bits.bins_d();
  for (const auto& spec : grouping.groups) {
    HouseholderGroup g = fit_group(m, spec, bits);
    if (!g.rotated) {
      p.groups.push_back(std::move(g));
      continue;
    }
    // Keep the rotation only if it lowers ||S^-1||_F^2 for these rows;
    // otherwise every row is scaled on its own.
    const double n = static_cast<double>(g.size());
    const double rotated = 1.0 / (g.s1 * g.s1) + (n - 1.0) / (g.s2 * g.s2);
    double per_row = 0.0;
    for (std::size_t r : g.rows) {
      const double range = dynamic_range(m.row(r)) / b;
      per_row += range * range;
    }
    if (rotated < per_row) {
      p.groups.push_back(std::move(g));
      continue;
    }
    for (std::size_t r : g.rows) p.groups.push_back(fit_group(m, {r, {}}, bits));
  }
  // Without a rotated group the block transform is row scaling; hand back the
  // per-sample transform so both quantizers agree to the last bit.
  const bool any_rotated =
      std::any_of(p.groups.begin(), p.groups.end(), [](const HouseholderGroup& g) { return g.rotated; });
  if (!any_rotated) return fit_per_sample(m, bits);
  return ScaleTransform(std::move(p), bits);
}

ScaleTransform fit(Variant variant, const Matrix& m, QuantBits bits) {
  switch (variant) {
    case Variant::PerTensor: return fit_per_tensor(m, bits);
    case Variant::PerSample: return fit_per_sample(m, bits);
    case Variant::BlockHouseholder: return fit_block_householder(m, bits);
  }
  throw std::invalid_argument("fit: unknown variant");
}

// --- quantization ------------------------------------------------------------------

QuantizedGrad quantize(const Matrix& m, const ScaleTransform& t, Rng& rng, Rounding rounding) {
  const Matrix y = checked_transform(m, t);
  const Matrix r = rounding == Rounding::Stochastic ? stochastic_round(y, rng)
                                                    : deterministic_round(y);
  CodeMatrix codes(m.rows(), m.cols());
  auto src = r.values();
  auto dst = codes.values();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<std::uint8_t>(src[i]);
  return {std::move(codes), t};
}

Matrix dequantize(const QuantizedGrad& q) {
  Matrix codes(q.codes.rows(), q.codes.cols());
  auto src = q.codes.values();
  auto dst = codes.values();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<double>(src[i]);
  return q.transform.invert(codes);
}

Matrix quantize_dequantize(Variant variant, const Matrix& m, QuantBits bits, Rng& rng,
                           Rounding rounding) {
  return dequantize(quantize(m, fit(variant, m, bits), rng, rounding));
}

Matrix quantize_forward(const Matrix& m, QuantBits bits) {
  const ScaleTransform t = fit_per_tensor(m, bits);
  return t.invert(deterministic_round(checked_transform(m, t)));
}

Matrix expected_dequantize(const Matrix& m, const ScaleTransform& t) {
  Matrix y = checked_transform(m, t);
  for (double& v : y.values()) {
    const double lo = std::floor(v);
    const double p = v - lo;
    v = p * (lo + 1.0) + (1.0 - p) * lo;
  }
  return t.invert(y);
}

ConditionalVariance exact_conditional_variance(const Matrix& m, const ScaleTransform& t) {
  const Matrix v = rounding_variance(checked_transform(m, t));
  Matrix out(m.rows(), m.cols());
  std::visit(Overloaded{
                 [&](const PerTensorParams& p) {
                   const double w = 1.0 / (p.scale * p.scale);
                   auto src = v.values();
                   auto dst = out.values();
                   for (std::size_t i = 0; i < src.size(); ++i) dst[i] = w * src[i];
                 },
                 [&](const PerSampleParams& p) {
                   for (std::size_t i = 0; i < m.rows(); ++i) {
                     const double w = 1.0 / (p.scales[i] * p.scales[i]);
                     auto src = v.row(i);
                     auto dst = out.row(i);
                     for (std::size_t j = 0; j < src.size(); ++j) dst[j] = w * src[j];
                   }
                 },
                 [&](const BlockHouseholderParams& p) {
                   for (const auto& g : p.groups) {
                     const std::size_t n = g.size();
                     const Matrix q = g.rotated ? householder_matrix(n) : Matrix::identity(n);
                     for (std::size_t i = 0; i < n; ++i) {
                       const double si = g.scale_of(i);
                       auto dst = out.row(g.rows[i]);
                       for (std::size_t k = 0; k < n; ++k) {
                         const double w = q(i, k) * q(i, k) / (si * si);
                         if (w == 0.0) continue;
                         auto src = v.row(g.rows[k]);
                         for (std::size_t j = 0; j < src.size(); ++j) dst[j] += w * src[j];
                       }
                     }
                   }
                 },
             },
             t.params());
  double total = 0.0;
  for (double x : out.values()) total += x;
  return {std::move(out), total};
}

double variance_bound(const ScaleTransform& t, std::size_t n_rows, std::size_t d) {
  const double b = t.bits().bins_d();
  const double unit = static_cast<double>(d) / (4.0 * b * b);
  return std::visit(
      Overloaded{
          [&](const PerTensorParams& p) {
            if (p.degenerate) return 0.0;
            const double r = b / p.scale;
            return unit * static_cast<double>(n_rows) * r * r;
          },
          [&](const PerSampleParams& p) {
            double acc = 0.0;
            for (std::size_t i = 0; i < p.scales.size(); ++i) {
              if (p.degenerate[i]) continue;
              const double r = b / p.scales[i];
              acc += r * r;
            }
            return unit * acc;
          },
          [&](const BlockHouseholderParams& p) {
            double acc = 0.0;
            for (const auto& g : p.groups) {
              if (g.degenerate) continue;
              if (!g.rotated) {
                acc += g.lambda1 * g.lambda1;
                continue;
              }
              const double n = static_cast<double>(g.size());
              const double term = std::cbrt(g.lambda1 * g.lambda1) / std::cbrt(n) +
                                  std::cbrt(g.lambda2 * g.lambda2) * std::cbrt(n * n);
              acc += term * term * term;
            }
            return unit * acc;
          },
      },
      t.params());
}

double frobenius_variance_bound(const ScaleTransform& t, std::size_t n_rows, std::size_t d) {
  return static_cast<double>(d) / 4.0 * t.inverse_frobenius_sq(n_rows);
}

}  // namespace fqt::quant
