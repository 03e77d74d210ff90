#pragma once

// Experiment configuration. Every default lives in the member initializers
// below; the README mirrors this file.

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "fqt/analysis.hpp"
#include "fqt/data.hpp"
#include "fqt/net.hpp"
#include "fqt/train.hpp"

namespace fqt::config {

/// Malformed or invalid configuration; `field()` is "section.key".
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string field, const std::string& message)
      : std::runtime_error(field + ": " + message), field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

struct RunSection {
  std::uint64_t seed = 1;
  unsigned threads = 1;
};

struct NetSection {
  std::string layers = "linear(16,64) relu linear(64,64) relu linear(64,4)";
};

struct DataSection {
  std::string source = "blobs";  // blobs | idx
  std::size_t classes = 4;
  std::size_t dims = 16;
  std::size_t per_class = 300;
  double spread = 1.0;
  /// The synthetic task is fixed independently of run.seed.
  std::uint64_t seed = 11;
  double val_fraction = 0.25;
  std::string images;
  std::string labels;
  std::size_t limit = 0;
};

struct SchemeSection {
  int forward_bits = 8;
  net::GradQuantizer weight_grad{net::GradVariant::PerTensor, 8};
  net::GradQuantizer act_grad{net::GradVariant::PerSample, 8};
};

struct TrainSection {
  train::TrainConfig cfg;
  TrainSection() {
    cfg.mode = train::Mode::Fqt;
    cfg.lr = 0.2;
    cfg.schedule = train::Schedule::Constant;
    cfg.momentum = 0.9;
    cfg.epochs = 20;
    cfg.batch_size = 256;
  }
};

/// Analysis commands run on one fixed batch: the first `size` examples of the
/// epoch-0 shuffle of the training split, on a network initialized from
/// run.seed (training is not run first).
struct BatchSection {
  std::size_t size = 8;
};

struct McSection {
  std::size_t trials = 10000;
  std::size_t batches = 100;
};

struct SweepSection {
  quant::Variant variant = quant::Variant::PerTensor;
  std::vector<int> bits = {8, 7, 6, 5, 4};
};

struct SparseSection {
  std::vector<std::size_t> n_rows = {16, 64, 256};
  double lambda1 = 1.0;
  double lambda2 = 1e-4;
  std::size_t d = 64;
  int bits = 8;
};

struct Config {
  RunSection run;
  NetSection net;
  DataSection data;
  SchemeSection scheme;
  TrainSection train;
  BatchSection batch;
  McSection mc;
  SweepSection sweep;
  SparseSection sparse;

  net::QuantScheme quant_scheme() const;
  analysis::McConfig mc_config() const;
};

/// INI ("key = value" under [section] headers, ';' or '#' comments) or JSON
/// (an object of section objects). Unknown sections or keys are errors.
Config parse(const std::string& text, bool json);
/// Chooses JSON when the file name ends in ".json" or the first
/// non-blank character is '{'.
Config load(const std::filesystem::path& path);

/// Round-trippable INI rendering of every field.
std::string to_ini(const Config& c);

/// Dataset described by the data section, split into train/validation.
data::Split make_dataset(const Config& c);

}  // namespace fqt::config
