#include "fqt/train.hpp"

#include <chrono>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

namespace fqt::train {

namespace {

bool finite(const Matrix& m) { return m.all_finite(); }

net::ForwardResult run_forward(const net::Network& net, const Matrix& x, Mode mode,
                               const net::QuantScheme& scheme) {
  return mode == Mode::Exact ? net::forward_exact(net, x) : net::forward_quantized(net, x, scheme);
}

// Quantizer keys for training steps live apart from any analysis stream.
constexpr std::uint64_t kTrainStream = 0x747261696e000000ULL;

}  // namespace

std::string to_string(Mode m) {
  switch (m) {
    case Mode::Exact: return "exact";
    case Mode::Qat: return "qat";
    case Mode::Fqt: return "fqt";
  }
  return "unknown";
}

Mode parse_mode(const std::string& text) {
  if (text == "exact") return Mode::Exact;
  if (text == "qat") return Mode::Qat;
  if (text == "fqt") return Mode::Fqt;
  throw std::invalid_argument("unknown mode '" + text + "' (expected exact, qat or fqt)");
}

std::string to_string(Schedule s) { return s == Schedule::Constant ? "constant" : "cosine"; }

Schedule parse_schedule(const std::string& text) {
  if (text == "constant") return Schedule::Constant;
  if (text == "cosine") return Schedule::Cosine;
  throw std::invalid_argument("unknown schedule '" + text + "' (expected constant or cosine)");
}

void TrainConfig::validate() const {
  if (!(lr > 0.0) || !std::isfinite(lr)) throw std::invalid_argument("train.lr must be > 0");
  if (!(momentum >= 0.0 && momentum < 1.0))
    throw std::invalid_argument("train.momentum must be in [0, 1)");
  if (epochs == 0) throw std::invalid_argument("train.epochs must be positive");
  if (batch_size == 0) throw std::invalid_argument("train.batch_size must be positive");
  if (warmup_epochs > epochs)
    throw std::invalid_argument("train.warmup_epochs must not exceed train.epochs");
  if (!(weight_decay >= 0.0)) throw std::invalid_argument("train.weight_decay must be >= 0");
  if (!(label_smoothing >= 0.0 && label_smoothing < 1.0))
    throw std::invalid_argument("train.label_smoothing must be in [0, 1)");
}

double learning_rate(const TrainConfig& cfg, std::size_t step, std::size_t steps_per_epoch,
                     std::size_t total_steps) {
  const std::size_t warmup = cfg.warmup_epochs * steps_per_epoch;
  if (step < warmup)
    return cfg.lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
  if (cfg.schedule == Schedule::Constant) return cfg.lr;
  const double span = static_cast<double>(total_steps - warmup);
  const double t = span > 0.0 ? static_cast<double>(step - warmup) / span : 0.0;
  return 0.5 * cfg.lr * (1.0 + std::cos(std::numbers::pi * t));
}

Evaluation evaluate(const net::Network& net, const data::Dataset& d, Mode mode,
                    const net::QuantScheme& scheme) {
  if (d.size() == 0) return {};
  const auto fwd = run_forward(net, d.features, mode, scheme);
  if (!finite(fwd.predictions))
    return {std::numeric_limits<double>::infinity(), 0.0};
  const auto lg = net::loss_and_grad(fwd.predictions, d.labels);
  const double n = static_cast<double>(d.size());
  return {lg.loss / n, static_cast<double>(lg.correct) / n};
}

TrainResult train(net::Network net, const data::Dataset& train_set, const data::Dataset& val_set,
                  const net::QuantScheme& scheme, const TrainConfig& cfg,
                  const std::function<void(const EpochMetrics&)>& on_epoch) {
  cfg.validate();
  if (cfg.mode != Mode::Exact) scheme.validate();
  if (train_set.size() == 0) throw std::invalid_argument("training set is empty");

  std::vector<Matrix> velocity;
  for (const auto& layer : net.layers()) {
    if (const auto* lin = std::get_if<net::Linear>(&layer))
      velocity.emplace_back(lin->weight.rows(), lin->weight.cols());
    else
      velocity.emplace_back();
  }

  const std::size_t steps_per_epoch = (train_set.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total_steps = steps_per_epoch * cfg.epochs;
  std::size_t step = 0;
  TrainResult result{net, {}, false, {}, {}};

  for (std::size_t epoch = 1; epoch <= cfg.epochs && !result.diverged; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    EpochMetrics m;
    m.epoch = epoch;
    double loss_sum = 0.0;
    std::size_t correct = 0, seen = 0;

    for (const auto& idx : data::epoch_batches(train_set.size(), cfg.batch_size, cfg.seed, epoch)) {
      const auto batch = train_set.subset(idx);
      const auto fwd = run_forward(net, batch.features, cfg.mode, scheme);
      if (!finite(fwd.predictions)) {
        result.diverged = true;
        break;
      }
      auto lg = net::loss_and_grad(fwd.predictions, batch.labels, cfg.label_smoothing);
      if (!std::isfinite(lg.loss)) {
        result.diverged = true;
        break;
      }
      loss_sum += lg.loss;
      correct += lg.correct;
      seen += batch.size();

      lg.grad *= 1.0 / static_cast<double>(batch.size());
      const auto grads =
          cfg.mode == Mode::Fqt
              ? net::backward_fqt(net, fwd.tape, lg.grad, scheme, {cfg.seed ^ kTrainStream, step})
              : net::backward_qat(net, fwd.tape, lg.grad);

      const double eta = learning_rate(cfg, step, steps_per_epoch, total_steps);
      for (std::size_t l = 0; l < net.size(); ++l) {
        auto* lin = std::get_if<net::Linear>(&net.layers()[l]);
        if (!lin) continue;
        auto w = lin->weight.values();
        auto g = grads.params[l].values();
        auto v = velocity[l].values();
        for (std::size_t i = 0; i < w.size(); ++i) {
          v[i] = cfg.momentum * v[i] + g[i] + cfg.weight_decay * w[i];
          w[i] -= eta * v[i];
        }
        if (!lin->weight.all_finite()) result.diverged = true;
      }
      ++step;
      if (result.diverged) break;
    }

    if (result.diverged) {
      m.status = "diverge";
      m.train_loss = std::numeric_limits<double>::quiet_NaN();
      m.train_acc = seen ? static_cast<double>(correct) / static_cast<double>(seen) : 0.0;
      m.val_acc = 0.0;
    } else {
      m.train_loss = loss_sum / static_cast<double>(seen);
      m.train_acc = static_cast<double>(correct) / static_cast<double>(seen);
      m.val_acc = evaluate(net, val_set, cfg.mode, scheme).accuracy;
    }
    m.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.epochs.push_back(m);
    if (on_epoch) on_epoch(m);
  }

  result.net = net;
  if (result.diverged) {
    result.final_train = {std::numeric_limits<double>::infinity(), 0.0};
    result.final_val = {std::numeric_limits<double>::infinity(), 0.0};
  } else {
    result.final_train = evaluate(net, train_set, cfg.mode, scheme);
    result.final_val = evaluate(net, val_set, cfg.mode, scheme);
  }
  return result;
}

}  // namespace fqt::train
