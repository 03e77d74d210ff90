#include <doctest.h>

#include <cmath>
#include <sstream>
#include <stdexcept>

#include "fqt/analysis.hpp"
#include "fqt/quant.hpp"

using fqt::Matrix;
using fqt::Rng;
using namespace fqt::quant;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng) {
  Matrix m(r, c);
  // Rows with very different magnitudes exercise all three variants.
  for (std::size_t i = 0; i < r; ++i) {
    const double scale = std::exp(rng.uniform(-4.0, 1.0));
    for (double& v : m.row(i)) v = scale * rng.normal();
  }
  return m;
}

constexpr Variant kVariants[] = {Variant::PerTensor, Variant::PerSample, Variant::BlockHouseholder};

double max_abs_diff(const Matrix& a, const Matrix& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    worst = std::max(worst, std::abs(a.values()[i] - b.values()[i]));
  return worst;
}

}  // namespace

TEST_CASE("bit widths") {
  CHECK(QuantBits(2).bins() == 3);
  CHECK(QuantBits(8).bins() == 255);
  CHECK_THROWS_AS(QuantBits(1), std::invalid_argument);
  CHECK_THROWS_AS(QuantBits(9), std::invalid_argument);
  CHECK(parse_variant("psq") == Variant::PerSample);
  CHECK(parse_variant(to_string(Variant::BlockHouseholder)) == Variant::BlockHouseholder);
  CHECK_THROWS(parse_variant("nope"));
}

TEST_CASE("stochastic rounding examples") {
  Rng rng(1);
  const int n = 100000;
  double sum = 0, sum2 = 0;
  const Matrix x(1, 1, 0.3);
  for (int i = 0; i < n; ++i) {
    const double v = stochastic_round(x, rng)(0, 0);
    REQUIRE((v == 0.0 || v == 1.0));
    sum += v;
    sum2 += v * v;
  }
  const double mean = sum / n, var = sum2 / n - mean * mean;
  CHECK(std::abs(mean - 0.3) < 4 * std::sqrt(0.21 / n));
  CHECK(std::abs(var - 0.21) < 0.005);
  CHECK(rounding_variance(x)(0, 0) == doctest::Approx(0.21).epsilon(1e-12));

  const Matrix two(1, 1, 2.0);
  for (int i = 0; i < 100; ++i) CHECK(stochastic_round(two, rng)(0, 0) == 2.0);
  CHECK(rounding_variance(two)(0, 0) == 0.0);

  const Matrix half(2, 3, 0.5);
  const Matrix half_var = rounding_variance(half);
  double total = 0;
  for (double v : half_var.values()) total += v;
  CHECK(total == 1.5);
}

TEST_CASE("rounding variance is p(1-p) for negative inputs too") {
  const Matrix m = Matrix::from_rows({{-0.25, -1.75, 3.5}});
  const Matrix v = rounding_variance(m);
  CHECK(v(0, 0) == doctest::Approx(0.1875));
  CHECK(v(0, 1) == doctest::Approx(0.1875));
  CHECK(v(0, 2) == doctest::Approx(0.25));
}

TEST_CASE("deterministic rounding") {
  const Matrix r = deterministic_round(Matrix::from_rows({{0.5, -0.5, 0.49, 1.5, -2.51}}));
  CHECK(r == Matrix::from_rows({{1, -1, 0, 2, -3}}));
}

TEST_CASE("per-tensor fit examples") {
  const auto t = fit_per_tensor(Matrix::from_rows({{0, 3}}), QuantBits(2));
  const auto& p = std::get<PerTensorParams>(t.params());
  CHECK(p.zero == 0.0);
  CHECK(p.scale == 1.0);
  Rng rng(2);
  const auto q = quantize(Matrix::from_rows({{0, 3}}), t, rng);
  CHECK(q.codes(0, 0) == 0);
  CHECK(q.codes(0, 1) == 3);
  CHECK(dequantize(q) == Matrix::from_rows({{0, 3}}));
  CHECK(exact_conditional_variance(Matrix::from_rows({{0, 3}}), t).total == 0.0);

  const auto t2 = fit_per_tensor(Matrix::from_rows({{-1, 1}}), QuantBits(3));
  CHECK(std::get<PerTensorParams>(t2.params()).zero == -1.0);
  CHECK(std::get<PerTensorParams>(t2.params()).scale == 3.5);

  const Matrix c(3, 2, 0.7);
  const auto tc = fit_per_tensor(c, QuantBits(4));
  CHECK(std::get<PerTensorParams>(tc.params()).degenerate);
  CHECK(dequantize(quantize(c, tc, rng)) == c);
  CHECK(exact_conditional_variance(c, tc).total == 0.0);
}

TEST_CASE("per-sample fit examples") {
  const Matrix m = Matrix::from_rows({{0, 1}, {0, 10}});
  const auto t = fit_per_sample(m, QuantBits(3));
  const auto& p = std::get<PerSampleParams>(t.params());
  CHECK(p.scales[0] == doctest::Approx(7.0));
  CHECK(p.scales[1] == doctest::Approx(0.7));
  CHECK(variance_bound(t, 2, 2) == doctest::Approx(2.0 / (4 * 49) * 101).epsilon(1e-12));
  CHECK(variance_bound(fit_per_tensor(m, QuantBits(3)), 2, 2) ==
        doctest::Approx(2.0 * 2.0 / (4 * 49) * 100).epsilon(1e-12));

  Rng rng(3);
  const Matrix single = random_matrix(1, 9, rng);
  Rng a(7), b(7);
  const auto qs = quantize(single, fit_per_sample(single, QuantBits(4)), a);
  const auto qt = quantize(single, fit_per_tensor(single, QuantBits(4)), b);
  CHECK(qs.codes == qt.codes);
}

TEST_CASE("householder scales") {
  const QuantBits bits(8);
  const double B = bits.bins_d();
  auto s = optimal_householder_scales(1.0, 1.0, 1, bits);
  CHECK(s.s1 == doctest::Approx(B / 2));
  CHECK(s.s2 == doctest::Approx(B / 2));

  const double l1 = 1.0, l2 = 0.01;
  const std::size_t n = 64;
  s = optimal_householder_scales(l1, l2, n, bits);
  const double nd = static_cast<double>(n);
  const double d = std::pow(l1, 2.0 / 3) * std::pow(nd, -1.0 / 3) + std::pow(l2, 2.0 / 3) * std::pow(nd, 2.0 / 3);
  CHECK(s.s1 == doctest::Approx(B * std::pow(l1, -1.0 / 3) * std::pow(nd, 1.0 / 6) / d).epsilon(1e-12));
  CHECK(s.s2 == doctest::Approx(B * std::pow(l2, -1.0 / 3) * std::pow(nd, 1.0 / 6) / d).epsilon(1e-12));
  const double residual = l1 * s.s1 / std::sqrt(nd) + l2 * s.s2 * std::sqrt(nd) - B;
  CHECK(std::abs(residual) / B < 1e-10);

  const auto objective = [&](double s1, double s2) { return 1 / (s1 * s1) + nd / (s2 * s2); };
  const double best = objective(s.s1, s.s2);
  for (double delta : {-0.01, -0.001, 0.001, 0.01}) {
    const double s1 = s.s1 * (1 + delta);
    const double s2 = (B - l1 * s1 / std::sqrt(nd)) / (l2 * std::sqrt(nd));
    CHECK(objective(s1, s2) >= best);
  }

  // lambda2 = 0 is clamped rather than producing an infinite scale.
  s = optimal_householder_scales(1.0, 0.0, 16, bits);
  CHECK(std::isfinite(s.s2));
  CHECK(std::isfinite(s.s1));
}

TEST_CASE("householder reflection") {
  const std::vector<double> e1{1, 0, 0, 0};
  const auto q = householder_reflect(e1);
  for (double v : q) CHECK(v == doctest::Approx(0.5).epsilon(1e-14));

  Rng rng(4);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> x(2 + rng.below(30));
    for (double& v : x) v = rng.normal();
    auto y = householder_reflect(x);
    double nx = 0, ny = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      nx += x[i] * x[i];
      ny += y[i] * y[i];
    }
    REQUIRE(std::abs(nx - ny) <= 1e-12 * nx);
    householder_reflect_inplace(y);
    for (std::size_t i = 0; i < x.size(); ++i) REQUIRE(std::abs(y[i] - x[i]) <= 1e-12 * std::sqrt(nx));
  }
}

TEST_CASE("group selection") {
  Matrix sparse(16, 8, 0.0);
  for (std::size_t j = 0; j < 8; ++j) {
    sparse(0, j) = j % 2 ? 1.0 : -1.0;
    for (std::size_t i = 1; i < 16; ++i) sparse(i, j) = 1e-9 * ((i + j) % 3);
  }
  auto g = select_groups(sparse);
  REQUIRE(g.groups.size() == 1);
  CHECK(g.groups[0].large_row == 0);
  CHECK(g.groups[0].small_rows.size() == 15);

  // Brute-force oracle: the chosen G minimizes the score, ties to smaller G.
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const Matrix m = random_matrix(2 + rng.below(20), 4, rng);
    g = select_groups(m);
    REQUIRE(g.scores.size() == m.rows());
    std::size_t best = 0;
    for (std::size_t i = 1; i < g.scores.size(); ++i)
      if (g.scores[i] < g.scores[best]) best = i;
    REQUIRE(g.groups.size() == best + 1);
    std::vector<int> seen(m.rows(), 0);
    for (const auto& grp : g.groups) {
      ++seen[grp.large_row];
      for (auto r : grp.small_rows) ++seen[r];
    }
    for (int s : seen) REQUIRE(s == 1);
    // The winning score is reproducible from the partition itself, and the
    // large rows are the G largest magnitudes.
    double score = 0.0, smallest_large = 1e300, largest_small = 0.0;
    for (const auto& grp : g.groups) {
      const double mi = fqt::sup_norm(m.row(grp.large_row));
      score += mi * mi / static_cast<double>(1 + grp.small_rows.size());
      smallest_large = std::min(smallest_large, mi);
      for (auto r : grp.small_rows) largest_small = std::max(largest_small, fqt::sup_norm(m.row(r)));
    }
    REQUIRE(score == doctest::Approx(g.scores[best]).epsilon(1e-12));
    REQUIRE(smallest_large >= largest_small);
  }

  const Matrix two = Matrix::from_rows({{1, -1}, {2, 0}});
  g = select_groups(two);
  CHECK(g.scores.size() == 2);

  // Equal magnitudes: every candidate is scored and the minimum wins.
  Matrix equal(8, 4);
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t j = 0; j < 4; ++j) equal(i, j) = (i + j) % 2 ? 1.0 : -1.0;
  g = select_groups(equal);
  std::size_t best = 0;
  for (std::size_t i = 1; i < g.scores.size(); ++i)
    if (g.scores[i] < g.scores[best]) best = i;
  CHECK(g.groups.size() == best + 1);

  const Matrix zero(5, 3, 0.0);
  g = select_groups(zero);
  CHECK(g.groups.size() == 1);
  const auto tz = fit_block_householder(zero, QuantBits(4));
  Rng r(1);
  CHECK(dequantize(quantize(zero, tz, r)) == zero);
}

TEST_CASE("block householder fit") {
  Rng rng(6);
  const Matrix one = random_matrix(1, 7, rng);
  const auto t = fit_block_householder(one, QuantBits(5));
  CHECK(t.variant() == Variant::PerSample);
  CHECK(t == fit_per_sample(one, QuantBits(5)));

  // One dominant row over many tiny ones keeps the rotation.
  const Matrix sparse = fqt::analysis::sparse_gradient(32, 1.0, 1e-4, 8, 2);
  const auto ts = fit_block_householder(sparse, QuantBits(8));
  REQUIRE(ts.variant() == Variant::BlockHouseholder);
  const auto& p = std::get<BlockHouseholderParams>(ts.params());
  CHECK(p.groups[0].rotated);

  for (int trial = 0; trial < 300; ++trial) {
    const Matrix m = random_matrix(1 + rng.below(24), 1 + rng.below(10), rng);
    const auto tb = fit_block_householder(m, QuantBits(2 + static_cast<int>(rng.below(7))));
    const Matrix tr = tb.apply(m);
    for (double v : tr.values()) {
      REQUIRE(v >= -1e-9);
      REQUIRE(v <= tb.bits().bins_d() + 1e-9);
    }
    REQUIRE(max_abs_diff(tb.invert(tr), m) <= 1e-9 * (1 + std::sqrt(fqt::frobenius_norm_sq(m))));
  }
}

TEST_CASE("sparse gradient bound scaling") {
  const std::size_t n = 64, d = 64;
  const QuantBits bits(8);
  const double B = bits.bins_d();
  const Matrix m = fqt::analysis::sparse_gradient(n, 1.0, 0.0, d, 3);
  const double unit = static_cast<double>(d) / (4 * B * B);
  const double bhq = variance_bound(fit_block_householder(m, bits), n, d);
  const double psq = variance_bound(fit_per_sample(m, bits), n, d);
  const double ptq = variance_bound(fit_per_tensor(m, bits), n, d);
  CHECK(bhq / (unit / n) == doctest::Approx(1.0).epsilon(0.05));
  CHECK(psq / unit == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(ptq / (unit * n) == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("quantize rejects a transform fitted elsewhere") {
  const auto t = fit_per_tensor(Matrix::from_rows({{0, 1}}), QuantBits(4));
  Rng rng(1);
  CHECK_THROWS_AS(quantize(Matrix::from_rows({{0, 2}}), t, rng), std::domain_error);
}

TEST_CASE("grid-aligned inputs are reproduced exactly and idempotently") {
  Rng rng(7);
  for (Variant v : {Variant::PerTensor, Variant::PerSample}) {
    Matrix m(3, 5);
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 5; ++j) m(i, j) = static_cast<double>((i * 5 + j * 3) % 16) - 4.0;
    m(0, 0) = -4.0;
    m(0, 1) = 11.0;
    for (std::size_t i = 1; i < 3; ++i) {
      m(i, 0) = -4.0;
      m(i, 1) = 11.0;
    }
    const Matrix once = quantize_dequantize(v, m, QuantBits(4), rng);
    CHECK(max_abs_diff(once, m) < 1e-12);
    const Matrix twice = quantize_dequantize(v, once, QuantBits(4), rng);
    CHECK(max_abs_diff(twice, once) < 1e-12);
    CHECK(exact_conditional_variance(m, fit(v, m, QuantBits(4))).total < 1e-20);
  }
  // A quantized output is grid aligned for its own transform.
  const Matrix m = random_matrix(4, 6, rng);
  const auto t = fit_per_tensor(m, QuantBits(3));
  const Matrix q = dequantize(quantize(m, t, rng));
  const Matrix q2 = dequantize(quantize(q, t, rng));
  CHECK(max_abs_diff(q, q2) < 1e-12);
}

TEST_CASE("all-half fractions hit the per-tensor bound with equality") {
  // Self-fitted: the endpoints sit on the grid, every other entry mid-bin.
  Matrix m(3, 4);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 4; ++j) m(i, j) = 0.5 + static_cast<double>((i + j) % 7);
  m(0, 0) = 0.0;
  m(2, 3) = 7.0;
  const auto t = fit_per_tensor(m, QuantBits(3));
  CHECK(std::get<PerTensorParams>(t.params()).scale == 1.0);
  CHECK(exact_conditional_variance(m, t).total == doctest::Approx(10 * 0.25));

  // Every entry mid-bin under a unit-scale transform: N D / (4 s^2).
  Matrix half(3, 4);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 4; ++j) half(i, j) = 0.5 + static_cast<double>((i * 4 + j) % 7);
  const ScaleTransform unit(PerTensorParams{1.0, 0.0, false}, QuantBits(3));
  CHECK(exact_conditional_variance(half, unit).total == doctest::Approx(3 * 4 / 4.0).epsilon(1e-12));
}

TEST_CASE("quantizers are unbiased in closed form") {
  Rng rng(8);
  for (int trial = 0; trial < 1000; ++trial) {
    const Matrix m = random_matrix(1 + rng.below(12), 1 + rng.below(8), rng);
    for (Variant v : kVariants) {
      const auto t = fit(v, m, QuantBits(2 + static_cast<int>(rng.below(7))));
      const Matrix e = expected_dequantize(m, t);
      const double scale = 1 + std::sqrt(fqt::frobenius_norm_sq(m));
      REQUIRE(max_abs_diff(e, m) <= 1e-10 * scale);
    }
  }
}

TEST_CASE("exact variance never exceeds the closed-form bounds") {
  Rng rng(9);
  for (int trial = 0; trial < 1000; ++trial) {
    const Matrix m = random_matrix(1 + rng.below(16), 1 + rng.below(8), rng);
    const QuantBits bits(2 + static_cast<int>(rng.below(7)));
    for (Variant v : kVariants) {
      const auto t = fit(v, m, bits);
      const double exact = exact_conditional_variance(m, t).total;
      REQUIRE(exact >= 0.0);
      REQUIRE(exact <= variance_bound(t, m.rows(), m.cols()) * (1 + 1e-12));
      REQUIRE(exact <= frobenius_variance_bound(t, m.rows(), m.cols()) * (1 + 1e-12));
    }
    REQUIRE(variance_bound(fit_per_sample(m, bits), m.rows(), m.cols()) <=
            variance_bound(fit_per_tensor(m, bits), m.rows(), m.cols()) * (1 + 1e-12));
  }
}

TEST_CASE("bounds scale with the squared bin count") {
  Rng rng(10);
  for (int trial = 0; trial < 100; ++trial) {
    const Matrix m = random_matrix(2 + rng.below(10), 3, rng);
    for (int b = 2; b < 8; ++b) {
      const double want = std::pow(QuantBits(b + 1).bins_d() / QuantBits(b).bins_d(), 2);
      for (Variant v : {Variant::PerTensor, Variant::PerSample}) {
        const double lo = variance_bound(fit(v, m, QuantBits(b)), m.rows(), 3);
        const double hi = variance_bound(fit(v, m, QuantBits(b + 1)), m.rows(), 3);
        REQUIRE(lo / hi == doctest::Approx(want).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("Monte Carlo agrees with the exact mean and variance") {
  Rng data(11);
  const Matrix m = random_matrix(4, 5, data);
  const int draws = 100000;
  for (Variant v : kVariants) {
    const auto t = fit(v, m, QuantBits(3));
    const auto exact = exact_conditional_variance(m, t);
    fqt::analysis::Moments moments(m.size());
    Rng rng(12);
    for (int i = 0; i < draws; ++i) moments.add(dequantize(quantize(m, t, rng)).values());
    const auto var = moments.variance();
    for (std::size_t k = 0; k < m.size(); ++k) {
      const double se = std::sqrt(exact.per_entry.values()[k] / draws);
      if (se == 0.0) {
        CHECK(moments.mean()[k] == doctest::Approx(m.values()[k]).epsilon(1e-12));
      } else {
        CHECK(std::abs(moments.mean()[k] - m.values()[k]) <= 4 * se);
      }
    }
    double total = 0;
    for (double x : var) total += x;
    CHECK(std::abs(total / exact.total - 1.0) < 0.03);
  }
}

TEST_CASE("transform text round trip") {
  Rng rng(13);
  for (int trial = 0; trial < 50; ++trial) {
    const Matrix m = random_matrix(1 + rng.below(20), 1 + rng.below(6), rng);
    for (Variant v : kVariants) {
      const auto t = fit(v, m, QuantBits(2 + static_cast<int>(rng.below(7))));
      std::istringstream in(to_text(t));
      const auto back = read_transform(in);
      REQUIRE(back == t);
      REQUIRE(back.apply(m) == t.apply(m));
    }
  }
  std::istringstream bad("transform nonsense\n");
  CHECK_THROWS(read_transform(bad));
}
