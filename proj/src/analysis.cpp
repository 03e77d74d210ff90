#include "fqt/analysis.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <thread>

namespace fqt::analysis {

namespace {

using net::GradVariant;

std::vector<std::size_t> linear_layers(const net::Network& net) {
  std::vector<std::size_t> out;
  for (std::size_t l = 0; l < net.size(); ++l)
    if (net.is_linear(l)) out.push_back(l);
  return out;
}

double sum(std::span<const double> v) {
  // Pairwise summation keeps the reduction order fixed and the error small.
  if (v.size() <= 8) {
    double acc = 0.0;
    for (double x : v) acc += x;
    return acc;
  }
  const std::size_t half = v.size() / 2;
  return sum(v.subspan(0, half)) + sum(v.subspan(half));
}

net::ForwardResult forward(const net::Network& net, const Batch& batch,
                           const net::QuantScheme& scheme) {
  if (batch.x.rows() != batch.y.rows())
    throw std::invalid_argument("batch features and labels have different row counts");
  return net::forward_quantized(net, batch.x, scheme);
}

// Propagation matrices gamma(k, l) for one quantizer source, reduced to what
// the exact term needs: per output column j the Gram matrix of the gamma rows
// (i, j) over samples i, and the squared operator norm.
struct Propagation {
  std::size_t param = 0;
  std::vector<Matrix> gram;  // one N x N matrix per output column
  double op_norm_sq = 0.0;
};

Propagation make_propagation(const net::Network& net, const net::Tape& tape, std::size_t k,
                             std::size_t l) {
  const Matrix g = net::gamma(net, tape, k, l);
  const std::size_t n = tape.layers[l].output.rows();
  const std::size_t d = tape.layers[l].output.cols();
  Propagation p;
  p.param = k;
  p.op_norm_sq = g.cols() == 0 ? 0.0 : operator_norm_sq(g);
  p.gram.assign(d, Matrix(n, n));
  for (std::size_t j = 0; j < d; ++j)
    for (std::size_t a = 0; a < n; ++a)
      for (std::size_t b = a; b < n; ++b) {
        auto ra = g.row(a * d + j);
        auto rb = g.row(b * d + j);
        double acc = 0.0;
        for (std::size_t c = 0; c < ra.size(); ++c) acc += ra[c] * rb[c];
        p.gram[j](a, b) = acc;
        p.gram[j](b, a) = acc;
      }
  return p;
}

// Conditional rounding noise of one quantizer on its realized input: the
// per-entry rounding variance before the inverse scale and S^-1 itself.
struct Noise {
  Matrix v;     // N x D, p (1 - p)
  Matrix sinv;  // N x N
  bool diagonal = true;
  double quantizer_variance = 0.0;  // total Var[Q(g) | g]
  double range_bound = 0.0;         // N D R^2 / (4 B^2)
};

std::optional<Noise> make_noise(const net::GradQuantizer& q, const Matrix& g) {
  const auto t = net::fit_grad_quantizer(q, g);
  if (!t) return std::nullopt;
  Noise z;
  z.v = quant::rounding_variance(t->apply(g));
  z.sinv = t->inverse_scale_matrix(g.rows());
  z.diagonal = t->variant() != quant::Variant::BlockHouseholder;
  const std::size_t n = g.rows();
  for (std::size_t k = 0; k < n; ++k) {
    double col = 0.0;
    for (std::size_t i = 0; i < n; ++i) col += z.sinv(i, k) * z.sinv(i, k);
    z.quantizer_variance += col * sum(z.v.row(k));
  }
  const double b = t->bits().bins_d();
  const double r = dynamic_range(g);
  z.range_bound = static_cast<double>(g.size()) * r * r / (4.0 * b * b);
  return z;
}

// sum_j sum_k v_kj (S^-T C_j S^-1)_kk
double exact_term(const Noise& z, const Propagation& p) {
  const std::size_t n = z.v.rows();
  double acc = 0.0;
  for (std::size_t j = 0; j < p.gram.size(); ++j) {
    const Matrix& c = p.gram[j];
    for (std::size_t k = 0; k < n; ++k) {
      const double v = z.v(k, j);
      if (v == 0.0) continue;
      double diag;
      if (z.diagonal) {
        diag = c(k, k) * z.sinv(k, k) * z.sinv(k, k);
      } else {
        diag = 0.0;
        for (std::size_t a = 0; a < n; ++a) {
          if (z.sinv(a, k) == 0.0) continue;
          double row = 0.0;
          for (std::size_t b = 0; b < n; ++b) row += c(a, b) * z.sinv(b, k);
          diag += z.sinv(a, k) * row;
        }
      }
      acc += v * diag;
    }
  }
  return acc;
}

}  // namespace

// --- plumbing ----------------------------------------------------------------------

void McConfig::validate() const {
  if (trials < 100) throw std::invalid_argument("mc.trials must be at least 100");
  if (batches < 2) throw std::invalid_argument("mc.batches must be at least 2");
  if (trials < 2 * batches)
    throw std::invalid_argument("mc.trials must be at least twice mc.batches");
  if (threads == 0) throw std::invalid_argument("mc.threads must be positive");
}

void Moments::add(std::span<const double> x) {
  if (x.size() != mean_.size()) throw std::invalid_argument("Moments::add: dimension mismatch");
  ++n_;
  const double inv = 1.0 / static_cast<double>(n_);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double delta = x[i] - mean_[i];
    mean_[i] += delta * inv;
    m2_[i] += delta * (x[i] - mean_[i]);
  }
}

void Moments::merge(const Moments& other) {
  if (other.n_ == 0) return;
  if (n_ == 0) {
    *this = other;
    return;
  }
  if (other.dim() != dim()) throw std::invalid_argument("Moments::merge: dimension mismatch");
  const double na = static_cast<double>(n_);
  const double nb = static_cast<double>(other.n_);
  const double n = na + nb;
  for (std::size_t i = 0; i < mean_.size(); ++i) {
    const double delta = other.mean_[i] - mean_[i];
    mean_[i] += delta * nb / n;
    m2_[i] += other.m2_[i] + delta * delta * na * nb / n;
  }
  n_ += other.n_;
}

std::vector<double> Moments::variance() const {
  std::vector<double> out(m2_.size(), 0.0);
  if (n_ < 2) return out;
  for (std::size_t i = 0; i < m2_.size(); ++i) out[i] = m2_[i] / static_cast<double>(n_ - 1);
  return out;
}

double Moments::total_variance() const { return sum(variance()); }

Estimate batched_mean(std::span<const double> block_values) {
  if (block_values.empty()) return {};
  const double n = static_cast<double>(block_values.size());
  const double mean = sum(block_values) / n;
  if (block_values.size() < 2) return {mean, 0.0};
  std::vector<double> sq(block_values.size());
  for (std::size_t i = 0; i < sq.size(); ++i)
    sq[i] = (block_values[i] - mean) * (block_values[i] - mean);
  return {mean, std::sqrt(sum(sq) / (n - 1.0) / n)};
}

void for_each_block(std::size_t blocks, unsigned threads,
                    const std::function<void(std::size_t)>& f) {
  const unsigned workers =
      static_cast<unsigned>(std::min<std::size_t>(std::max(1u, threads), blocks));
  if (workers <= 1) {
    for (std::size_t b = 0; b < blocks; ++b) f(b);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::atomic<bool> failed{false};
  std::vector<std::thread> pool;
  for (unsigned w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t b = next++; b < blocks && !failed; b = next++) {
        try {
          f(b);
        } catch (...) {
          if (!failed.exchange(true)) error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

std::pair<std::size_t, std::size_t> block_range(const McConfig& mc, std::size_t b) {
  const std::size_t base = mc.trials / mc.batches;
  const std::size_t extra = mc.trials % mc.batches;
  const std::size_t begin = b * base + std::min(b, extra);
  return {begin, begin + base + (b < extra ? 1 : 0)};
}

// --- bias --------------------------------------------------------------------------

BiasReport bias_check(const net::Network& net, const Batch& batch, const net::QuantScheme& scheme,
                      const McConfig& mc, double k_sigma, double required_fraction) {
  mc.validate();
  const auto fwd = forward(net, batch, scheme);
  const auto lg = net::loss_and_grad(fwd.predictions, batch.y);
  BiasReport r;
  r.trials = mc.trials;
  r.k_sigma = k_sigma;
  r.required_fraction = required_fraction;
  r.qat = net::flatten_params(net::backward_qat(net, fwd.tape, lg.grad));
  const std::size_t dim = r.qat.size();

  std::vector<Moments> blocks(mc.batches, Moments(dim));
  for_each_block(mc.batches, mc.threads, [&](std::size_t b) {
    const auto [begin, end] = block_range(mc, b);
    for (std::size_t t = begin; t < end; ++t) {
      const auto g = net::backward_fqt(net, fwd.tape, lg.grad, scheme, {mc.seed, t});
      blocks[b].add(net::flatten_params(g));
    }
  });
  Moments all(dim);
  for (const auto& m : blocks) all.merge(m);

  r.mean = all.mean();
  const auto var = all.variance();
  r.se.resize(dim);
  std::size_t within = 0;
  for (std::size_t i = 0; i < dim; ++i) {
    r.se[i] = std::sqrt(var[i] / static_cast<double>(all.count()));
    const double dev = std::abs(r.mean[i] - r.qat[i]);
    r.max_abs_deviation = std::max(r.max_abs_deviation, dev);
    if (r.se[i] > 0.0) {
      const double z = dev / r.se[i];
      r.max_abs_z = std::max(r.max_abs_z, z);
      if (z <= k_sigma) ++within;
    } else if (dev <= 1e-12 * (1.0 + std::abs(r.qat[i]))) {
      ++within;
    } else {
      r.max_abs_z = std::numeric_limits<double>::infinity();
    }
  }
  r.fraction_within = dim == 0 ? 1.0 : static_cast<double>(within) / static_cast<double>(dim);
  return r;
}

// --- variance decomposition ------------------------------------------------------------

bool VarianceReport::decomposition_holds(double k) const {
  return std::abs(difference.value) <= k * difference.se;
}

VarianceReport variance_decomposition(const net::Network& net, const Batch& batch,
                                      const net::QuantScheme& scheme, const McConfig& mc) {
  mc.validate();
  scheme.validate();
  const auto fwd = forward(net, batch, scheme);
  const auto lg = net::loss_and_grad(fwd.predictions, batch.y);
  const auto lin = linear_layers(net);

  // For each source layer: the weight-gradient propagation (gamma(l, l)) and
  // the activation-gradient propagations (gamma(k, l), k < l).
  struct Source {
    std::size_t layer;
    Propagation weight;
    std::vector<Propagation> act;
  };
  std::vector<Source> sources;
  std::vector<std::pair<std::size_t, std::size_t>> term_keys;
  for (std::size_t l : lin) {
    Source s{l, make_propagation(net, fwd.tape, l, l), {}};
    term_keys.emplace_back(l, l);
    for (std::size_t k : lin) {
      if (k >= l) break;
      s.act.push_back(make_propagation(net, fwd.tape, k, l));
      term_keys.emplace_back(l, k);
    }
    sources.push_back(std::move(s));
  }
  const bool ptq_only = scheme.weight_grad.variant == GradVariant::PerTensor &&
                        scheme.act_grad.variant == GradVariant::PerTensor;

  const std::size_t n_terms = term_keys.size();
  const std::size_t dim = net::flatten_params(net::backward_qat(net, fwd.tape, lg.grad)).size();
  struct BlockAcc {
    double total = 0.0;
    std::vector<double> terms;
    double quantizer_bound = 0.0;
    double range_bound = 0.0;
  };
  std::vector<BlockAcc> acc(mc.batches);

  for_each_block(mc.batches, mc.threads, [&](std::size_t b) {
    const auto [begin, end] = block_range(mc, b);
    Moments moments(dim);
    std::vector<std::vector<double>> term_trials(n_terms);
    std::vector<double> quantizer_bound_trials, range_bound_trials;
    for (std::size_t t = begin; t < end; ++t) {
      std::vector<net::QuantizerInput> trace;
      const auto g = net::backward_fqt(net, fwd.tape, lg.grad, scheme, {mc.seed, t}, &trace);
      moments.add(net::flatten_params(g));

      double quantizer_bound = 0.0, range_bound = 0.0;
      std::size_t key = 0;
      for (std::size_t si = 0; si < sources.size(); ++si) {
        const Source& s = sources[si];
        const Matrix& input = trace.at(si).grad;
        if (const auto z = make_noise(scheme.weight_grad, input)) {
          term_trials[key].push_back(exact_term(*z, s.weight));
          quantizer_bound += z->quantizer_variance * s.weight.op_norm_sq;
          range_bound += z->range_bound * s.weight.op_norm_sq;
        } else {
          term_trials[key].push_back(0.0);
        }
        ++key;
        const auto z2 = s.act.empty() ? std::nullopt : make_noise(scheme.act_grad, input);
        for (const auto& p : s.act) {
          term_trials[key].push_back(z2 ? exact_term(*z2, p) : 0.0);
          if (z2) {
            quantizer_bound += z2->quantizer_variance * p.op_norm_sq;
            range_bound += z2->range_bound * p.op_norm_sq;
          }
          ++key;
        }
      }
      quantizer_bound_trials.push_back(quantizer_bound);
      range_bound_trials.push_back(range_bound);
    }
    const double n = static_cast<double>(end - begin);
    BlockAcc& a = acc[b];
    a.total = moments.total_variance();
    a.terms.resize(n_terms);
    for (std::size_t k = 0; k < n_terms; ++k) a.terms[k] = sum(term_trials[k]) / n;
    a.quantizer_bound = sum(quantizer_bound_trials) / n;
    a.range_bound = sum(range_bound_trials) / n;
  });

  VarianceReport r;
  r.trials = mc.trials;
  std::vector<double> totals, sums, diffs, quantizer_bounds, range_bounds;
  for (const auto& a : acc) {
    totals.push_back(a.total);
    const double s = sum(a.terms);
    sums.push_back(s);
    diffs.push_back(a.total - s);
    quantizer_bounds.push_back(a.quantizer_bound);
    range_bounds.push_back(a.range_bound);
  }
  r.total_mc = batched_mean(totals);
  r.terms_sum = batched_mean(sums);
  r.difference = batched_mean(diffs);
  r.quantizer_bound = batched_mean(quantizer_bounds);
  if (ptq_only) r.range_bound = batched_mean(range_bounds);
  for (std::size_t k = 0; k < n_terms; ++k) {
    std::vector<double> per_block;
    for (const auto& a : acc) per_block.push_back(a.terms[k]);
    r.terms.push_back({term_keys[k].first, term_keys[k].second, batched_mean(per_block)});
  }
  return r;
}

BoundCheck bound_check(const VarianceReport& report, double k_sigma) {
  BoundCheck c;
  c.k_sigma = k_sigma;
  auto holds = [&](const Estimate& bound) {
    const double slack = k_sigma * std::hypot(report.total_mc.se, bound.se);
    return report.total_mc.value <= bound.value + slack;
  };
  c.quantizer_bound = holds(report.quantizer_bound);
  if (report.range_bound) c.range_bound = holds(*report.range_bound);
  return c;
}

// --- bit sweep ---------------------------------------------------------------------

namespace {

std::vector<SweepRow> sweep_matrices(const std::vector<Matrix>& grads, quant::Variant variant,
                                     std::vector<int> bits_list, const McConfig& mc) {
  mc.validate();
  std::sort(bits_list.begin(), bits_list.end(), std::greater<>());
  bits_list.erase(std::unique(bits_list.begin(), bits_list.end()), bits_list.end());
  std::size_t dim = 0;
  for (const auto& g : grads) dim += g.size();

  std::vector<SweepRow> rows;
  for (int bits_value : bits_list) {
    const quant::QuantBits bits(bits_value);
    SweepRow row;
    row.bits = bits_value;
    std::vector<quant::ScaleTransform> transforms;
    for (const auto& g : grads) {
      transforms.push_back(quant::fit(variant, g, bits));
      row.exact += quant::exact_conditional_variance(g, transforms.back()).total;
      row.bound += quant::variance_bound(transforms.back(), g.rows(), g.cols());
    }
    std::vector<double> block_var(mc.batches);
    for_each_block(mc.batches, mc.threads, [&](std::size_t b) {
      const auto [begin, end] = block_range(mc, b);
      Moments m(dim);
      std::vector<double> flat(dim);
      for (std::size_t t = begin; t < end; ++t) {
        std::size_t off = 0;
        for (std::size_t gi = 0; gi < grads.size(); ++gi) {
          Rng rng = Rng::substream(mc.seed, t, gi, static_cast<std::uint64_t>(bits_value));
          const Matrix q = quant::dequantize(quant::quantize(grads[gi], transforms[gi], rng));
          std::copy(q.values().begin(), q.values().end(), flat.begin() + off);
          off += q.size();
        }
        m.add(flat);
      }
      block_var[b] = m.total_variance();
    });
    row.mc = batched_mean(block_var);
    if (!rows.empty()) {
      const SweepRow& wider = rows.back();
      if (wider.exact > 0.0) row.exact_ratio = row.exact / wider.exact;
      if (wider.bound > 0.0) row.bound_ratio = row.bound / wider.bound;
    }
    rows.push_back(row);
  }
  return rows;
}

}  // namespace

std::vector<SweepRow> bit_sweep(const Matrix& grad, quant::Variant variant,
                                const std::vector<int>& bits_list, const McConfig& mc) {
  return sweep_matrices({grad}, variant, bits_list, mc);
}

std::vector<SweepRow> bit_sweep(const net::Network& net, const Batch& batch, int forward_bits,
                                quant::Variant variant, const std::vector<int>& bits_list,
                                const McConfig& mc) {
  net::QuantScheme scheme = net::QuantScheme::identity_gradients(forward_bits);
  const auto fwd = forward(net, batch, scheme);
  const auto lg = net::loss_and_grad(fwd.predictions, batch.y);
  const auto g = net::backward_qat(net, fwd.tape, lg.grad);
  std::vector<Matrix> grads;
  for (std::size_t l : linear_layers(net)) grads.push_back(g.activations[l + 1]);
  return sweep_matrices(grads, variant, bits_list, mc);
}

// --- sparse bench --------------------------------------------------------------------

Matrix sparse_gradient(std::size_t n_rows, double lambda1, double lambda2, std::size_t d,
                       std::uint64_t seed) {
  if (n_rows < 2 || d < 2) throw std::invalid_argument("sparse_gradient: need n_rows, d >= 2");
  if (!(lambda1 > 0.0) || !(lambda2 >= 0.0))
    throw std::invalid_argument("sparse_gradient: need lambda1 > 0 and lambda2 >= 0");
  Rng rng(seed);
  Matrix m(n_rows, d);
  for (std::size_t j = 0; j < d; ++j) m(0, j) = rng.uniform(-0.5 * lambda1, 0.5 * lambda1);
  m(0, 0) = -0.5 * lambda1;
  m(0, 1) = 0.5 * lambda1;
  for (std::size_t i = 1; i < n_rows; ++i)
    for (std::size_t j = 0; j < d; ++j) m(i, j) = rng.uniform(-0.5 * lambda2, 0.5 * lambda2);
  return m;
}

double SparseBench::exact(quant::Variant v) const {
  for (const auto& r : rows)
    if (r.variant == v) return r.exact;
  throw std::out_of_range("SparseBench: variant not present");
}

bool SparseBench::ordered() const {
  using quant::Variant;
  return exact(Variant::BlockHouseholder) < exact(Variant::PerSample) &&
         exact(Variant::PerSample) < exact(Variant::PerTensor);
}

SparseBench sparse_gradient_bench(std::size_t n_rows, double lambda1, double lambda2,
                                  std::size_t d, int bits, std::uint64_t seed) {
  const Matrix g = sparse_gradient(n_rows, lambda1, lambda2, d, seed);
  const quant::QuantBits qb(bits);
  SparseBench bench;
  bench.n_rows = n_rows;
  for (auto v : {quant::Variant::PerTensor, quant::Variant::PerSample,
                 quant::Variant::BlockHouseholder}) {
    const auto t = quant::fit(v, g, qb);
    bench.rows.push_back(
        {v, quant::exact_conditional_variance(g, t).total, quant::variance_bound(t, n_rows, d)});
  }
  return bench;
}

}  // namespace fqt::analysis
