#include "fqt/net.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace fqt::net {

namespace {

const Linear& as_linear(const Layer& layer) { return std::get<Linear>(layer); }

void check_input(const Network& net, const Matrix& x) {
  if (x.cols() != net.input_dim()) {
    throw std::invalid_argument("network expects input width " + std::to_string(net.input_dim()) +
                                ", got " + shape_string(x));
  }
}

Matrix relu(const Matrix& m) {
  Matrix out = m;
  for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
  return out;
}

// ReLU backward with derivative 0 at 0.
Matrix relu_mask(const Matrix& grad, const Matrix& input) {
  Matrix out = grad;
  auto g = out.values();
  auto x = input.values();
  for (std::size_t i = 0; i < g.size(); ++i)
    if (!(x[i] > 0.0)) g[i] = 0.0;
  return out;
}

ForwardResult forward_impl(const Network& net, const Matrix& x, int forward_bits) {
  check_input(net, x);
  std::optional<quant::QuantBits> bits;
  if (forward_bits > 0) bits.emplace(forward_bits);

  ForwardResult result;
  result.tape.x = x;
  Matrix h = x;
  for (const auto& layer : net.layers()) {
    LayerRecord rec;
    if (const auto* lin = std::get_if<Linear>(&layer)) {
      rec.input = bits ? quant::quantize_forward(h, *bits) : h;
      rec.weight = bits ? quant::quantize_forward(lin->weight, *bits) : lin->weight;
      rec.output = matmul(rec.input, rec.weight);
    } else {
      rec.input = h;
      rec.output = relu(h);
    }
    h = rec.output;
    result.tape.layers.push_back(std::move(rec));
  }
  result.predictions = std::move(h);
  return result;
}

void check_tape(const Network& net, const Tape& tape, const Matrix& grad_out) {
  if (tape.layers.size() != net.size())
    throw std::invalid_argument("tape has " + std::to_string(tape.layers.size()) +
                                " layers, network has " + std::to_string(net.size()));
  const auto& last = tape.layers.back().output;
  if (grad_out.rows() != last.rows() || grad_out.cols() != last.cols())
    throw std::invalid_argument("output gradient " + shape_string(grad_out) +
                                " does not match predictions " + shape_string(last));
}

// Shared backward recursion. `q_weight`/`q_act` map the output gradient of a
// linear layer to the operand of the parameter / input-gradient product.
template <class QWeight, class QAct>
Gradients backward_impl(const Network& net, const Tape& tape, const Matrix& grad_out,
                        QWeight&& q_weight, QAct&& q_act) {
  check_tape(net, tape, grad_out);
  const std::size_t n_layers = net.size();
  Gradients g;
  g.params.resize(n_layers);
  g.activations.resize(n_layers + 1);
  g.activations[n_layers] = grad_out;
  for (std::size_t l = n_layers; l-- > 0;) {
    const auto& rec = tape.layers[l];
    const Matrix& upstream = g.activations[l + 1];
    if (net.is_linear(l)) {
      g.params[l] = matmul_tn(rec.input, q_weight(l, upstream));
      g.activations[l] = matmul_nt(q_act(l, upstream), rec.weight);
    } else {
      g.activations[l] = relu_mask(upstream, rec.input);
    }
  }
  return g;
}

void write_u64(std::ostream& out, std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::big) v = __builtin_bswap64(v);
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

std::uint64_t read_u64(std::istream& in, const char* what) {
  std::uint64_t v;
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v))
    throw std::runtime_error(std::string("checkpoint truncated reading ") + what);
  if constexpr (std::endian::native == std::endian::big) v = __builtin_bswap64(v);
  return v;
}

constexpr char kMagic[8] = {'F', 'Q', 'T', 'N', 'E', 'T', '0', '1'};

}  // namespace

// --- Network -------------------------------------------------------------------------

Network::Network(std::vector<Layer> layers) : layers_(std::move(layers)) {
  if (layers_.empty()) throw std::invalid_argument("network has no layers");
  std::optional<std::size_t> width;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    if (const auto* lin = std::get_if<Linear>(&layers_[l])) {
      if (lin->weight.empty()) throw std::invalid_argument("linear layer with empty weight");
      if (width && *width != lin->weight.rows())
        throw std::invalid_argument("layer " + std::to_string(l) + " expects width " +
                                    std::to_string(lin->weight.rows()) + ", previous layer gives " +
                                    std::to_string(*width));
      if (!width) input_dim_ = lin->weight.rows();
      width = lin->weight.cols();
    }
  }
  if (!width) throw std::invalid_argument("network needs at least one linear layer");
  output_dim_ = *width;
}

std::size_t Network::output_dim(std::size_t l) const {
  for (std::size_t i = l + 1; i-- > 0;)
    if (is_linear(i)) return as_linear(layers_[i]).weight.cols();
  return input_dim_;
}

std::size_t Network::parameter_count() const {
  std::size_t n = 0;
  for (const auto& layer : layers_)
    if (const auto* lin = std::get_if<Linear>(&layer)) n += lin->weight.size();
  return n;
}

bool operator==(const Network& a, const Network& b) {
  if (a.layers_.size() != b.layers_.size()) return false;
  for (std::size_t l = 0; l < a.layers_.size(); ++l) {
    if (a.layers_[l].index() != b.layers_[l].index()) return false;
    if (a.is_linear(l) && !(as_linear(a.layers_[l]).weight == as_linear(b.layers_[l]).weight))
      return false;
  }
  return true;
}

Network make_mlp(const std::vector<std::size_t>& dims, std::uint64_t seed) {
  if (dims.size() < 2) throw std::invalid_argument("make_mlp: need input and output dims");
  Rng rng(seed);
  std::vector<Layer> layers;
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    if (i > 0) layers.emplace_back(Relu{});
    Matrix w(dims[i], dims[i + 1]);
    const double sd = std::sqrt(2.0 / static_cast<double>(dims[i]));
    for (double& v : w.values()) v = sd * rng.normal();
    layers.emplace_back(Linear{std::move(w)});
  }
  return Network(std::move(layers));
}

std::vector<Layer> parse_layers(const std::string& text, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Layer> layers;
  std::size_t pos = 0;
  auto skip = [&] {
    while (pos < text.size() && (std::isspace(static_cast<unsigned char>(text[pos])) ||
                                 text[pos] == ',' || text[pos] == ';'))
      ++pos;
  };
  skip();
  while (pos < text.size()) {
    std::size_t end = pos;
    while (end < text.size() && std::isalpha(static_cast<unsigned char>(text[end]))) ++end;
    std::string word = text.substr(pos, end - pos);
    std::transform(word.begin(), word.end(), word.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    pos = end;
    if (word == "relu") {
      layers.emplace_back(Relu{});
    } else if (word == "linear") {
      const auto close = text.find(')', pos);
      if (pos >= text.size() || text[pos] != '(' || close == std::string::npos)
        throw std::invalid_argument("layers: expected linear(in,out) at offset " +
                                    std::to_string(pos));
      std::string args = text.substr(pos + 1, close - pos - 1);
      std::replace(args.begin(), args.end(), ',', ' ');
      std::istringstream is(args);
      long in_dim = 0, out_dim = 0;
      std::string rest;
      if (!(is >> in_dim >> out_dim) || (is >> rest) || in_dim <= 0 || out_dim <= 0)
        throw std::invalid_argument("layers: bad linear dimensions '" + args + "'");
      Matrix w(static_cast<std::size_t>(in_dim), static_cast<std::size_t>(out_dim));
      const double sd = std::sqrt(2.0 / static_cast<double>(in_dim));
      for (double& v : w.values()) v = sd * rng.normal();
      layers.emplace_back(Linear{std::move(w)});
      pos = close + 1;
    } else {
      throw std::invalid_argument("layers: unknown layer '" + word + "' at offset " +
                                  std::to_string(pos));
    }
    skip();
  }
  return layers;
}

std::string describe(const Network& net) {
  std::string out;
  for (const auto& layer : net.layers()) {
    if (!out.empty()) out += ' ';
    if (const auto* lin = std::get_if<Linear>(&layer))
      out += "linear(" + std::to_string(lin->weight.rows()) + "," +
             std::to_string(lin->weight.cols()) + ")";
    else
      out += "relu";
  }
  return out;
}

void save_checkpoint(const Network& net, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open checkpoint for writing: " + path.string());
  out.write(kMagic, sizeof kMagic);
  write_u64(out, net.size());
  for (const auto& layer : net.layers()) {
    if (const auto* lin = std::get_if<Linear>(&layer)) {
      write_u64(out, 0);
      write_u64(out, lin->weight.rows());
      write_u64(out, lin->weight.cols());
      for (double v : lin->weight.values()) write_u64(out, std::bit_cast<std::uint64_t>(v));
    } else {
      write_u64(out, 1);
    }
  }
  if (!out) throw std::runtime_error("failed writing checkpoint: " + path.string());
}

Network load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path.string());
  char magic[8];
  if (!in.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof kMagic) != 0)
    throw std::runtime_error("bad checkpoint magic at offset 0 in " + path.string());
  const auto count = read_u64(in, "layer count");
  std::vector<Layer> layers;
  for (std::uint64_t l = 0; l < count; ++l) {
    const auto kind = read_u64(in, "layer kind");
    if (kind == 1) {
      layers.emplace_back(Relu{});
    } else if (kind == 0) {
      const auto rows = read_u64(in, "rows");
      const auto cols = read_u64(in, "cols");
      if (rows == 0 || cols == 0 || rows * cols > (1ULL << 28))
        throw std::runtime_error("checkpoint: implausible weight shape");
      std::vector<double> values(rows * cols);
      for (double& v : values) v = std::bit_cast<double>(read_u64(in, "weights"));
      layers.emplace_back(Linear{Matrix(rows, cols, std::move(values))});
    } else {
      throw std::runtime_error("checkpoint: unknown layer kind " + std::to_string(kind));
    }
  }
  return Network(std::move(layers));
}

// --- scheme --------------------------------------------------------------------------

std::string to_string(GradVariant v) {
  switch (v) {
    case GradVariant::None: return "none";
    case GradVariant::PerTensor: return "ptq";
    case GradVariant::PerSample: return "psq";
    case GradVariant::BlockHouseholder: return "bhq";
  }
  return "unknown";
}

GradVariant parse_grad_variant(const std::string& text) {
  if (text == "none" || text == "identity") return GradVariant::None;
  switch (quant::parse_variant(text)) {
    case quant::Variant::PerTensor: return GradVariant::PerTensor;
    case quant::Variant::PerSample: return GradVariant::PerSample;
    case quant::Variant::BlockHouseholder: return GradVariant::BlockHouseholder;
  }
  throw std::invalid_argument("unknown gradient quantizer '" + text + "'");
}

QuantScheme QuantScheme::identity_gradients(int forward_bits) {
  QuantScheme s;
  s.forward_bits = forward_bits;
  s.weight_grad.variant = GradVariant::None;
  s.act_grad.variant = GradVariant::None;
  return s;
}

void QuantScheme::validate() const {
  if (forward_bits != 0) quant::QuantBits check(forward_bits);
  if (weight_grad.variant != GradVariant::None) quant::QuantBits check(weight_grad.bits);
  if (act_grad.variant != GradVariant::None) quant::QuantBits check(act_grad.bits);
}

std::optional<quant::ScaleTransform> fit_grad_quantizer(const GradQuantizer& q, const Matrix& g) {
  const quant::QuantBits bits(q.bits);
  switch (q.variant) {
    case GradVariant::None: return std::nullopt;
    case GradVariant::PerTensor: return quant::fit_per_tensor(g, bits);
    case GradVariant::PerSample: return quant::fit_per_sample(g, bits);
    case GradVariant::BlockHouseholder: return quant::fit_block_householder(g, bits);
  }
  return std::nullopt;
}

Matrix apply_grad_quantizer(const GradQuantizer& q, const Matrix& g, Rng& rng) {
  if (q.variant == GradVariant::None) return g;
  const auto t = fit_grad_quantizer(q, g);
  return quant::dequantize(quant::quantize(g, *t, rng, q.rounding));
}

// --- forward / loss / backward --------------------------------------------------

ForwardResult forward_exact(const Network& net, const Matrix& x) { return forward_impl(net, x, 0); }

ForwardResult forward_quantized(const Network& net, const Matrix& x, const QuantScheme& scheme) {
  scheme.validate();
  return forward_impl(net, x, scheme.forward_bits);
}

LossAndGrad loss_and_grad(const Matrix& logits, const Matrix& y, double label_smoothing) {
  if (logits.rows() != y.rows() || logits.cols() != y.cols())
    throw std::invalid_argument("loss_and_grad: logits " + shape_string(logits) + " vs labels " +
                                shape_string(y));
  if (!(label_smoothing >= 0.0 && label_smoothing < 1.0))
    throw std::invalid_argument("loss_and_grad: label_smoothing must be in [0, 1)");
  const std::size_t classes = y.cols();
  LossAndGrad out;
  out.grad = Matrix(logits.rows(), classes);
  std::vector<double> target(classes);
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    auto yi = y.row(i);
    double sum = 0.0;
    for (double v : yi) {
      if (v != 0.0 && v != 1.0)
        throw std::invalid_argument("loss_and_grad: label row " + std::to_string(i) +
                                    " is not one-hot");
      sum += v;
    }
    if (sum != 1.0)
      throw std::invalid_argument("loss_and_grad: label row " + std::to_string(i) +
                                  " is not one-hot");

    auto h = logits.row(i);
    const auto max_it = std::max_element(h.begin(), h.end());
    const double hmax = *max_it;
    double z = 0.0;
    for (double v : h) z += std::exp(v - hmax);
    const double log_z = std::log(z) + hmax;
    const auto label = static_cast<std::size_t>(std::find(yi.begin(), yi.end(), 1.0) - yi.begin());
    if (static_cast<std::size_t>(max_it - h.begin()) == label) ++out.correct;

    for (std::size_t c = 0; c < classes; ++c)
      target[c] = (1.0 - label_smoothing) * yi[c] + label_smoothing / static_cast<double>(classes);
    auto gi = out.grad.row(i);
    for (std::size_t c = 0; c < classes; ++c) {
      const double log_p = h[c] - log_z;
      out.loss -= target[c] * log_p;
      gi[c] = std::exp(log_p) - target[c];
    }
  }
  return out;
}

std::vector<double> flatten_params(const Gradients& g) {
  std::vector<double> out;
  for (const auto& p : g.params) out.insert(out.end(), p.values().begin(), p.values().end());
  return out;
}

Gradients backward_qat(const Network& net, const Tape& tape, const Matrix& grad_out) {
  auto pass = [](std::size_t, const Matrix& g) -> const Matrix& { return g; };
  return backward_impl(net, tape, grad_out, pass, pass);
}

Gradients backward_fqt(const Network& net, const Tape& tape, const Matrix& grad_out,
                       const QuantScheme& scheme, TrialKey key,
                       std::vector<QuantizerInput>* trace) {
  scheme.validate();
  auto q_weight = [&](std::size_t l, const Matrix& g) {
    if (trace) trace->push_back({l, g});
    Rng rng = Rng::substream(key.seed, key.trial, l, 0);
    return apply_grad_quantizer(scheme.weight_grad, g, rng);
  };
  auto q_act = [&](std::size_t l, const Matrix& g) {
    Rng rng = Rng::substream(key.seed, key.trial, l, 1);
    return apply_grad_quantizer(scheme.act_grad, g, rng);
  };
  auto g = backward_impl(net, tape, grad_out, q_weight, q_act);
  if (trace) std::reverse(trace->begin(), trace->end());
  return g;
}

// --- Jacobians ---------------------------------------------------------------------

Jacobians jacobians(const Network& net, const Tape& tape, std::size_t layer) {
  if (layer >= net.size() || tape.layers.size() != net.size())
    throw std::invalid_argument("jacobians: layer index out of range or tape mismatch");
  const auto& rec = tape.layers[layer];
  const std::size_t n = rec.input.rows();
  const std::size_t din = rec.input.cols();
  const std::size_t dout = rec.output.cols();
  const std::size_t params = net.is_linear(layer) ? din * dout : 0;
  if (n * dout > kMaxJacobianDim || n * din > kMaxJacobianDim || params > kMaxJacobianDim)
    throw std::length_error("jacobians: layer " + std::to_string(layer) +
                            " exceeds the explicit Jacobian size cap of " +
                            std::to_string(kMaxJacobianDim));

  Jacobians out{Matrix(n * dout, n * din), Matrix(n * dout, params)};
  if (net.is_linear(layer)) {
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t j = 0; j < dout; ++j) {
        const std::size_t row = s * dout + j;
        for (std::size_t i = 0; i < din; ++i) {
          out.j(row, s * din + i) = rec.weight(i, j);
          out.k(row, i * dout + j) = rec.input(s, i);
        }
      }
  } else {
    for (std::size_t e = 0; e < n * dout; ++e) out.j(e, e) = rec.input.values()[e] > 0.0 ? 1.0 : 0.0;
  }
  return out;
}

Matrix gamma(const Network& net, const Tape& tape, std::size_t k, std::size_t l) {
  if (k > l || l >= net.size()) throw std::invalid_argument("gamma: need k <= l < layers");
  Matrix g = jacobians(net, tape, k).k;
  for (std::size_t i = k + 1; i <= l; ++i) g = matmul(jacobians(net, tape, i).j, g);
  return g;
}

}  // namespace fqt::net
