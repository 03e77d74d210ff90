#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "fqt/data.hpp"
#include "fqt/net.hpp"

namespace fqt::train {

/// exact: float forward and backward. qat: quantized forward, exact backward
/// through the quantizers. fqt: quantized forward and quantized gradients.
enum class Mode { Exact, Qat, Fqt };
enum class Schedule { Constant, Cosine };

std::string to_string(Mode m);
Mode parse_mode(const std::string& text);
std::string to_string(Schedule s);
Schedule parse_schedule(const std::string& text);

struct TrainConfig {
  Mode mode = Mode::Fqt;
  double lr = 0.05;
  Schedule schedule = Schedule::Cosine;
  double momentum = 0.9;
  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  /// Linear warmup length in epochs; 0 disables warmup.
  std::size_t warmup_epochs = 0;
  double weight_decay = 0.0;
  double label_smoothing = 0.0;
  std::uint64_t seed = 1;

  void validate() const;
};

struct EpochMetrics {
  std::size_t epoch = 0;
  /// Mean per-example loss and accuracy over the epoch's mini-batches.
  double train_loss = 0.0;
  double train_acc = 0.0;
  double val_acc = 0.0;
  /// "ok" or "diverge".
  std::string status = "ok";
  double wall_seconds = 0.0;
};

struct Evaluation {
  double loss = 0.0;  // mean per example
  double accuracy = 0.0;
};

struct TrainResult {
  net::Network net;
  std::vector<EpochMetrics> epochs;
  bool diverged = false;
  Evaluation final_train;
  Evaluation final_val;
};

/// Learning rate at `step` out of `total_steps`.
double learning_rate(const TrainConfig& cfg, std::size_t step, std::size_t steps_per_epoch,
                     std::size_t total_steps);

/// Loss and accuracy with the forward pass the mode trains with.
Evaluation evaluate(const net::Network& net, const data::Dataset& d, Mode mode,
                    const net::QuantScheme& scheme);

/// Mini-batch SGD with momentum. Stops early with status "diverge" when the
/// loss, a gradient or a weight stops being finite.
TrainResult train(net::Network net, const data::Dataset& train_set, const data::Dataset& val_set,
                  const net::QuantScheme& scheme, const TrainConfig& cfg,
                  const std::function<void(const EpochMetrics&)>& on_epoch = {});

}  // namespace fqt::train
