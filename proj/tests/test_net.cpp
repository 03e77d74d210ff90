#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "fqt/analysis.hpp"
#include "fqt/net.hpp"

using fqt::Matrix;
using fqt::Rng;
using namespace fqt::net;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng) {
  Matrix m(r, c);
  for (double& v : m.values()) v = rng.normal();
  return m;
}

Matrix one_hot(std::size_t n, std::size_t classes, Rng& rng) {
  Matrix y(n, classes);
  for (std::size_t i = 0; i < n; ++i) y(i, rng.below(classes)) = 1.0;
  return y;
}

double max_rel_diff(std::span<const double> a, std::span<const double> b) {
  double worst = 0.0, scale = 0.0;
  for (double v : b) scale = std::max(scale, std::abs(v));
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst / std::max(scale, 1e-300);
}

// Sub-network made of layers [0, l] with the matching slice of the tape.
std::pair<Network, Tape> prefix(const Network& net, const Tape& tape, std::size_t l) {
  std::vector<Layer> layers(net.layers().begin(), net.layers().begin() + static_cast<long>(l) + 1);
  Tape t{tape.x, {tape.layers.begin(), tape.layers.begin() + static_cast<long>(l) + 1}};
  return {Network(std::move(layers)), std::move(t)};
}

std::vector<double> vec_times(const Matrix& g, const Matrix& m) {
  std::vector<double> out(m.cols(), 0.0);
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) out[j] += g.values()[i] * m(i, j);
  return out;
}

QuantScheme scheme(GradVariant v, int bits, int forward_bits = 8) {
  QuantScheme s;
  s.forward_bits = forward_bits;
  s.weight_grad = {v, bits};
  s.act_grad = {v, bits};
  return s;
}

}  // namespace

TEST_CASE("network construction and parsing") {
  const auto layers = parse_layers("linear(3,5) relu linear(5,2)", 1);
  const Network net(layers);
  CHECK(net.size() == 3);
  CHECK(net.input_dim() == 3);
  CHECK(net.output_dim() == 2);
  CHECK(net.parameter_count() == 25);
  CHECK(describe(net) == "linear(3,5) relu linear(5,2)");
  CHECK_THROWS_AS(Network(parse_layers("linear(3,5) linear(4,2)", 1)), std::invalid_argument);
  CHECK_THROWS_AS(parse_layers("linear(3,5) tanh", 1), std::invalid_argument);
  CHECK_THROWS_AS(parse_layers("linear(3,0)", 1), std::invalid_argument);
  CHECK_THROWS_AS(Network(parse_layers("relu", 1)), std::invalid_argument);
  CHECK(make_mlp({4, 8, 3}, 7) == make_mlp({4, 8, 3}, 7));
  CHECK_FALSE(make_mlp({4, 8, 3}, 7) == make_mlp({4, 8, 3}, 8));
}

TEST_CASE("forward examples") {
  Rng rng(1);
  const Matrix x = random_matrix(3, 4, rng);
  const Network id({Linear{Matrix::identity(4)}});
  CHECK(forward_exact(id, x).predictions == x);

  const Network r({Linear{Matrix::identity(2)}, Relu{}});
  CHECK(forward_exact(r, Matrix::from_rows({{-1, -2}, {-0.5, -3}})).predictions == Matrix(2, 2, 0.0));
  CHECK_THROWS_AS(forward_exact(id, Matrix(3, 5)), std::invalid_argument);

  const Network net = make_mlp({4, 6, 3}, 2);
  const auto& w0 = std::get<Linear>(net.layers()[0]).weight;
  const auto& w1 = std::get<Linear>(net.layers()[2]).weight;
  Matrix hidden = fqt::matmul(x, w0);
  for (double& v : hidden.values()) v = std::max(v, 0.0);
  const Matrix want = fqt::matmul(hidden, w1);
  CHECK(max_rel_diff(forward_exact(net, x).predictions.values(), want.values()) < 1e-14);
}

TEST_CASE("quantized forward") {
  // Grid-aligned input and weights pass through unchanged.
  const Matrix x = Matrix::from_rows({{0, 1, 2, 3}, {3, 2, 1, 0}});
  const Matrix w = Matrix::from_rows({{-1, 0}, {0, 1}, {1, 2}, {2, -1}});
  const Network net({Linear{w}});
  QuantScheme s;
  s.forward_bits = 2;
  CHECK(forward_quantized(net, x, s).predictions == forward_exact(net, x).predictions);

  Rng rng(3);
  const Network mlp = make_mlp({5, 16, 16, 3}, 4);
  const Matrix xr = random_matrix(10, 5, rng);
  s.forward_bits = 8;
  const auto a = forward_quantized(mlp, xr, s);
  const auto b = forward_quantized(mlp, xr, s);
  CHECK(a.predictions == b.predictions);
  for (std::size_t l = 0; l < a.tape.layers.size(); ++l) {
    CHECK(a.tape.layers[l].input == b.tape.layers[l].input);
    CHECK(a.tape.layers[l].weight == b.tape.layers[l].weight);
  }
  // Loose sanity tolerance: 8-bit forward tracks the float forward to a few
  // percent of the output scale.
  const auto exact = forward_exact(mlp, xr);
  CHECK(max_rel_diff(a.predictions.values(), exact.predictions.values()) < 0.05);
}

TEST_CASE("loss and gradient") {
  const Matrix y = Matrix::from_rows({{1, 0}, {0, 1}});
  auto lg = loss_and_grad(Matrix(2, 2, 0.0), y);
  CHECK(lg.loss == doctest::Approx(2 * std::log(2.0)));
  // Gradient of the loss with respect to the logits: softmax - y.
  CHECK(lg.grad == Matrix::from_rows({{-0.5, 0.5}, {0.5, -0.5}}));

  lg = loss_and_grad(Matrix::from_rows({{700, 0}, {0, 700}}), y);
  CHECK(lg.loss == doctest::Approx(0.0));
  for (double v : lg.grad.values()) CHECK(std::abs(v) < 1e-300);
  CHECK(lg.correct == 2);

  CHECK_THROWS_AS(loss_and_grad(Matrix(1, 2), Matrix::from_rows({{0.5, 0.5}})), std::invalid_argument);
  CHECK_THROWS_AS(loss_and_grad(Matrix(1, 2), Matrix::from_rows({{1, 1}})), std::invalid_argument);
  CHECK_THROWS_AS(loss_and_grad(Matrix(1, 3), Matrix::from_rows({{1, 0}})), std::invalid_argument);

  Rng rng(5);
  for (double smoothing : {0.0, 0.1}) {
    const Matrix logits = random_matrix(4, 5, rng);
    const Matrix yy = one_hot(4, 5, rng);
    const auto base = loss_and_grad(logits, yy, smoothing);
    for (std::size_t k = 0; k < logits.size(); ++k) {
      const double h = 1e-5;
      Matrix plus = logits, minus = logits;
      plus.values()[k] += h;
      minus.values()[k] -= h;
      const double fd = (loss_and_grad(plus, yy, smoothing).loss - loss_and_grad(minus, yy, smoothing).loss) / (2 * h);
      CHECK(std::abs(fd - base.grad.values()[k]) <= 1e-6 * std::max(1.0, std::abs(fd)));
    }
  }
}

TEST_CASE("backward matches finite differences of the float forward") {
  Rng rng(6);
  const Network net = make_mlp({3, 5, 4, 2}, 9);
  const Matrix x = random_matrix(4, 3, rng);
  const Matrix y = one_hot(4, 2, rng);
  const auto fw = forward_exact(net, x);
  const auto g = backward_qat(net, fw.tape, loss_and_grad(fw.predictions, y).grad);
  for (std::size_t l = 0; l < net.size(); ++l) {
    if (!net.is_linear(l)) continue;
    for (std::size_t k = 0; k < g.params[l].size(); ++k) {
      const double h = 1e-6;
      Network plus = net, minus = net;
      std::get<Linear>(plus.layers()[l]).weight.values()[k] += h;
      std::get<Linear>(minus.layers()[l]).weight.values()[k] -= h;
      const double fd = (loss_and_grad(forward_exact(plus, x).predictions, y).loss -
                         loss_and_grad(forward_exact(minus, x).predictions, y).loss) /
                        (2 * h);
      CHECK(std::abs(fd - g.params[l].values()[k]) <= 1e-6 * std::max(1.0, std::abs(fd)));
    }
  }
}

TEST_CASE("straight-through gradient at grid points") {
  // Single linear layer: the quantized forward is a fixed linear map of the
  // quantized weight, so finite differences on that weight give the STE gradient.
  Rng rng(7);
  const Network net({Linear{random_matrix(4, 3, rng)}});
  const Matrix x = random_matrix(5, 4, rng);
  const Matrix y = one_hot(5, 3, rng);
  QuantScheme s;
  s.forward_bits = 4;
  const auto fw = forward_quantized(net, x, s);
  const auto g = backward_qat(net, fw.tape, loss_and_grad(fw.predictions, y).grad);

  const Matrix& xq = fw.tape.layers[0].input;
  const Matrix& wq = fw.tape.layers[0].weight;
  CHECK(g.params[0] == fqt::matmul_tn(xq, loss_and_grad(fw.predictions, y).grad));
  for (std::size_t k = 0; k < wq.size(); ++k) {
    const double h = 1e-6;
    Matrix plus = wq, minus = wq;
    plus.values()[k] += h;
    minus.values()[k] -= h;
    const double fd = (loss_and_grad(fqt::matmul(xq, plus), y).loss - loss_and_grad(fqt::matmul(xq, minus), y).loss) / (2 * h);
    CHECK(std::abs(fd - g.params[0].values()[k]) <= 1e-6 * std::max(1.0, std::abs(fd)));
  }

  const Network id({Linear{Matrix::identity(3)}});
  const Matrix gout = random_matrix(3, 3, rng);
  const auto gi = backward_qat(id, forward_exact(id, Matrix::identity(3)).tape, gout);
  CHECK(gi.params[0] == gout);
}

TEST_CASE("backward passes are deterministic and seed-keyed") {
  Rng rng(8);
  const Network net = make_mlp({4, 8, 8, 3}, 10);
  const Matrix x = random_matrix(6, 4, rng);
  const Matrix y = one_hot(6, 3, rng);
  const auto s = scheme(GradVariant::PerSample, 4);
  const auto fw = forward_quantized(net, x, s);
  const Matrix gout = loss_and_grad(fw.predictions, y).grad;
  CHECK(flatten_params(backward_qat(net, fw.tape, gout)) == flatten_params(backward_qat(net, fw.tape, gout)));
  const auto a = flatten_params(backward_fqt(net, fw.tape, gout, s, {1, 0}));
  CHECK(a == flatten_params(backward_fqt(net, fw.tape, gout, s, {1, 0})));
  CHECK(a != flatten_params(backward_fqt(net, fw.tape, gout, s, {2, 0})));
  CHECK(a != flatten_params(backward_fqt(net, fw.tape, gout, s, {1, 1})));

  std::vector<QuantizerInput> trace;
  backward_fqt(net, fw.tape, gout, s, {1, 0}, &trace);
  REQUIRE(trace.size() == 3);
  CHECK(trace[0].layer == 0);
  CHECK(trace[2].layer == 4);
  CHECK(trace[2].grad == gout);
}

TEST_CASE("identity gradient quantizers reproduce QAT bit-exactly") {
  Rng rng(9);
  const Network net = make_mlp({4, 8, 8, 3}, 11);
  const Matrix x = random_matrix(6, 4, rng);
  const Matrix y = one_hot(6, 3, rng);
  const auto s = QuantScheme::identity_gradients(8);
  const auto fw = forward_quantized(net, x, s);
  const Matrix gout = loss_and_grad(fw.predictions, y).grad;
  const auto qat = backward_qat(net, fw.tape, gout);
  const auto fqt = backward_fqt(net, fw.tape, gout, s, {3, 4});
  CHECK(flatten_params(qat) == flatten_params(fqt));
  for (std::size_t l = 0; l < qat.activations.size(); ++l) CHECK(qat.activations[l] == fqt.activations[l]);
}

TEST_CASE("grid-aligned gradients reproduce QAT") {
  // Integer-valued output gradient with range 5, passed through an identity
  // top layer: every quantizer input has range 5, and 255 / 5 bins per unit
  // put all integers on the 8-bit grid.
  const Network net({Linear{Matrix::from_rows({{1, -1}, {0, 2}})}, Linear{Matrix::identity(2)}});
  const Matrix x = Matrix::from_rows({{1, 0}, {2, 1}, {0, 3}});
  const Matrix gout = Matrix::from_rows({{1, -2}, {0, 3}, {-1, 1}});
  const auto s = scheme(GradVariant::PerTensor, 8, 0);
  const auto fw = forward_quantized(net, x, s);
  const auto qat = backward_qat(net, fw.tape, gout);
  for (std::uint64_t t = 0; t < 20; ++t) {
    const auto fqt = backward_fqt(net, fw.tape, gout, s, {5, t});
    const auto a = flatten_params(qat), b = flatten_params(fqt);
    for (std::size_t i = 0; i < a.size(); ++i) REQUIRE(std::abs(a[i] - b[i]) < 1e-12);
  }
}

TEST_CASE("realized quantizer inputs are reproduced in expectation") {
  // Every quantizer is conditionally unbiased and every backward map is
  // linear, so the closed-form expectation of the FQT gradient is QAT.
  Rng rng(10);
  const Network net = make_mlp({4, 8, 8, 3}, 12);
  const Matrix x = random_matrix(6, 4, rng);
  const Matrix y = one_hot(6, 3, rng);
  for (GradVariant v : {GradVariant::PerTensor, GradVariant::PerSample, GradVariant::BlockHouseholder}) {
    const auto s = scheme(v, 3);
    const auto fw = forward_quantized(net, x, s);
    std::vector<QuantizerInput> trace;
    backward_fqt(net, fw.tape, loss_and_grad(fw.predictions, y).grad, s, {1, 2}, &trace);
    for (const auto& in : trace) {
      const auto t = fit_grad_quantizer(s.weight_grad, in.grad);
      REQUIRE(t);
      const Matrix e = fqt::quant::expected_dequantize(in.grad, *t);
      CHECK(max_rel_diff(e.values(), in.grad.values()) < 1e-10);
    }
  }
}

TEST_CASE("single-layer FQT gradient is unbiased by Monte Carlo") {
  Rng rng(11);
  const Network net({Linear{random_matrix(3, 2, rng)}});
  const Matrix x = random_matrix(4, 3, rng);
  const Matrix y = one_hot(4, 2, rng);
  fqt::analysis::McConfig mc;
  mc.trials = 100000;
  const auto report = fqt::analysis::bias_check(net, {x, y}, scheme(GradVariant::PerTensor, 3), mc);
  CHECK(report.fraction_within == 1.0);
}

TEST_CASE("jacobian examples") {
  const Network scalar({Linear{Matrix(1, 1, 0.7)}});
  const auto tape = forward_exact(scalar, Matrix(1, 1, 2.0)).tape;
  const auto jk = jacobians(scalar, tape, 0);
  CHECK(jk.k == Matrix(1, 1, 2.0));
  CHECK(jk.j == Matrix(1, 1, 0.7));
  CHECK(gamma(scalar, tape, 0, 0) == Matrix(1, 1, 2.0));

  const Network r({Linear{Matrix::identity(3)}, Relu{}});
  const auto rt = forward_exact(r, Matrix::from_rows({{1, -1, 0}, {-2, 3, 4}})).tape;
  const auto rj = jacobians(r, rt, 1);
  CHECK(rj.k.cols() == 0);
  Matrix mask(6, 6);
  mask(0, 0) = mask(4, 4) = mask(5, 5) = 1.0;
  CHECK(rj.j == mask);

  const Network big = make_mlp({64, 65}, 1);
  const auto bt = forward_exact(big, Matrix(2, 64, 1.0)).tape;
  CHECK_THROWS_AS(jacobians(big, bt, 0), std::length_error);
  CHECK_THROWS_AS(gamma(r, rt, 1, 0), std::invalid_argument);
}

TEST_CASE("backward equals vector-Jacobian products") {
  Rng rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    const Network net = make_mlp({2 + rng.below(4), 2 + rng.below(5), 2 + rng.below(5), 2 + rng.below(3)}, 100 + trial);
    const Matrix x = random_matrix(1 + rng.below(4), net.input_dim(), rng);
    QuantScheme s;
    s.forward_bits = trial % 2 ? 8 : 0;
    const auto fw = forward_quantized(net, x, s);
    const Matrix gout = random_matrix(x.rows(), net.output_dim(), rng);
    const auto g = backward_qat(net, fw.tape, gout);
    for (std::size_t l = 0; l < net.size(); ++l) {
      const auto jk = jacobians(net, fw.tape, l);
      CHECK(max_rel_diff(vec_times(g.activations[l + 1], jk.j), g.activations[l].values()) < 1e-8);
      if (net.is_linear(l))
        CHECK(max_rel_diff(vec_times(g.activations[l + 1], jk.k), g.params[l].values()) < 1e-8);
    }
  }
}

TEST_CASE("propagation matrices match the truncated recursion") {
  Rng rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    const Network net = make_mlp({2 + rng.below(4), 2 + rng.below(5), 2 + rng.below(5), 2 + rng.below(3)}, 200 + trial);
    const Matrix x = random_matrix(1 + rng.below(4), net.input_dim(), rng);
    QuantScheme s;
    s.forward_bits = 6;
    const auto fw = forward_quantized(net, x, s);
    for (std::size_t l = 0; l < net.size(); ++l) {
      const Matrix g = random_matrix(x.rows(), net.output_dim(l), rng);
      auto [sub, sub_tape] = prefix(net, fw.tape, l);
      const auto grads = backward_qat(sub, sub_tape, g);
      for (std::size_t k = 0; k <= l; ++k) {
        if (!net.is_linear(k)) continue;
        const auto via_gamma = vec_times(g, gamma(net, fw.tape, k, l));
        CHECK(max_rel_diff(via_gamma, grads.params[k].values()) < 1e-10);
      }
    }
  }
}

TEST_CASE("checkpoint round trip") {
  const auto dir = std::filesystem::temp_directory_path() / "fqt_test_ckpt";
  std::filesystem::create_directories(dir);
  const Network net = make_mlp({5, 7, 3}, 3);
  save_checkpoint(net, dir / "net.bin");
  CHECK(load_checkpoint(dir / "net.bin") == net);
  CHECK(std::filesystem::file_size(dir / "net.bin") == 8 + 8 + 3 * 8 + 2 * 16 + 8 * (35 + 21));

  {
    std::ofstream out(dir / "bad.bin", std::ios::binary);
    out << "NOTANET!";
  }
  CHECK_THROWS_WITH_AS(load_checkpoint(dir / "bad.bin"), doctest::Contains("offset 0"), std::runtime_error);
  {
    std::ifstream in(dir / "net.bin", std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), {});
    std::ofstream out(dir / "short.bin", std::ios::binary);
    out << bytes.substr(0, bytes.size() - 5);
  }
  CHECK_THROWS_AS(load_checkpoint(dir / "short.bin"), std::runtime_error);
  std::filesystem::remove_all(dir);
}

TEST_CASE("gradient variant names") {
  CHECK(parse_grad_variant("none") == GradVariant::None);
  CHECK(parse_grad_variant("identity") == GradVariant::None);
  CHECK(parse_grad_variant("bhq") == GradVariant::BlockHouseholder);
  CHECK(to_string(GradVariant::PerSample) == "psq");
  CHECK_THROWS_AS(parse_grad_variant("fp4"), std::invalid_argument);
  QuantScheme bad;
  bad.weight_grad.bits = 12;
  CHECK_THROWS(bad.validate());
}
