#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "fqt/matrix.hpp"

namespace fqt::data {

struct Dataset {
  Matrix features;  // examples x dims
  Matrix labels;    // examples x classes, one-hot
  std::string name;
  std::uint64_t seed = 0;

  std::size_t size() const { return features.rows(); }
  std::size_t dims() const { return features.cols(); }
  std::size_t classes() const { return labels.cols(); }
  std::size_t label(std::size_t i) const;
  /// Rows `indices` of features and labels.
  Dataset subset(const std::vector<std::size_t>& indices) const;
  /// Throws unless shapes agree, labels are one-hot and features finite.
  void validate() const;
};

/// Gaussian clusters: centers drawn from N(0, I), examples from
/// N(center, spread^2 I). Example i belongs to class i % classes, so every
/// class has exactly `per_class` examples.
Dataset make_blobs(std::size_t classes, std::size_t dims, std::size_t per_class, double spread,
                   std::uint64_t seed);

/// Reads an IDX image file (magic 0x00000803) and label file (0x00000801).
/// Pixels are scaled to [0, 1]; at most `limit` examples are read (0 = all).
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                 std::size_t limit = 0, std::size_t classes = 10);

/// Header "f0,...,f{D-1},label"; one example per line, values printed with
/// round-trip precision.
void write_csv(const Dataset& d, std::ostream& out);

struct Split {
  Dataset train;
  Dataset val;
};

/// Seeded shuffle, then the first round(val_fraction * size) examples go to
/// validation.
Split split(const Dataset& d, double val_fraction, std::uint64_t seed);

/// Permutation of [0, n) for one epoch; a pure function of (seed, epoch).
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::uint64_t epoch);

/// Consecutive mini-batches over epoch_order; the final batch may be short.
std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size,
                                                    std::uint64_t seed, std::uint64_t epoch);

}  // namespace fqt::data
