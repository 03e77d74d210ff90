#include "fqt/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <ostream>
#include <stdexcept>

#include "fqt/rng.hpp"

namespace fqt::data {

namespace {

std::string hex(std::uint32_t v) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "0x%08x", v);
  return buf;
}

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

struct IdxReader {
  const std::vector<unsigned char>& bytes;
  const std::filesystem::path& path;

  std::uint32_t u32(std::size_t offset) const {
    if (offset + 4 > bytes.size())
      throw std::runtime_error(path.string() + ": truncated at offset " + std::to_string(offset) +
                               " (file has " + std::to_string(bytes.size()) + " bytes)");
    return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
           (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
  }

  void expect_magic(std::uint32_t magic) const {
    const auto got = u32(0);
    if (got != magic)
      throw std::runtime_error(path.string() + ": bad magic " + hex(got) + " at offset 0, expected " +
                               hex(magic));
  }

  void require(std::size_t end) const {
    if (end > bytes.size())
      throw std::runtime_error(path.string() + ": truncated at offset " +
                               std::to_string(bytes.size()) + ", expected " + std::to_string(end) +
                               " bytes");
  }
};

}  // namespace

std::size_t Dataset::label(std::size_t i) const {
  auto row = labels.row(i);
  return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

Dataset Dataset::subset(const std::vector<std::size_t>& indices) const {
  Dataset out;
  out.name = name;
  out.seed = seed;
  out.features = Matrix(indices.size(), dims());
  out.labels = Matrix(indices.size(), classes());
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const std::size_t i = indices[r];
    if (i >= size()) throw std::out_of_range("Dataset::subset: index out of range");
    std::copy_n(features.row(i).begin(), dims(), out.features.row(r).begin());
    std::copy_n(labels.row(i).begin(), classes(), out.labels.row(r).begin());
  }
  return out;
}

void Dataset::validate() const {
  if (features.rows() != labels.rows())
    throw std::invalid_argument("dataset: features and labels have different row counts");
  if (!features.all_finite()) throw std::invalid_argument("dataset: non-finite feature");
  for (std::size_t i = 0; i < labels.rows(); ++i) {
    double total = 0.0;
    for (double v : labels.row(i)) {
      if (v != 0.0 && v != 1.0)
        throw std::invalid_argument("dataset: label row " + std::to_string(i) + " is not one-hot");
      total += v;
    }
    if (total != 1.0)
      throw std::invalid_argument("dataset: label row " + std::to_string(i) + " is not one-hot");
  }
}

Dataset make_blobs(std::size_t classes, std::size_t dims, std::size_t per_class, double spread,
                   std::uint64_t seed) {
  if (classes == 0 || dims == 0 || per_class == 0)
    throw std::invalid_argument("make_blobs: counts must be positive");
  if (!(spread >= 0.0) || !std::isfinite(spread))
    throw std::invalid_argument("make_blobs: spread must be finite and non-negative");
  Rng rng(seed);
  Matrix centers(classes, dims);
  for (double& v : centers.values()) v = rng.normal();

  Dataset d;
  d.name = "blobs";
  d.seed = seed;
  const std::size_t n = classes * per_class;
  d.features = Matrix(n, dims);
  d.labels = Matrix(n, classes);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = i % classes;
    d.labels(i, c) = 1.0;
    for (std::size_t j = 0; j < dims; ++j) d.features(i, j) = centers(c, j) + spread * rng.normal();
  }
  return d;
}

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                 std::size_t limit, std::size_t classes) {
  if (classes == 0 || classes > 256) throw std::invalid_argument("load_idx: classes must be in [1, 256]");
  const auto img_bytes = read_file(images);
  const auto lbl_bytes = read_file(labels);
  const IdxReader img{img_bytes, images};
  const IdxReader lbl{lbl_bytes, labels};
  img.expect_magic(0x00000803);
  lbl.expect_magic(0x00000801);

  const std::size_t n_img = img.u32(4);
  const std::size_t h = img.u32(8);
  const std::size_t w = img.u32(12);
  const std::size_t n_lbl = lbl.u32(4);
  if (n_img != n_lbl)
    throw std::runtime_error("load_idx: " + std::to_string(n_img) + " images but " +
                             std::to_string(n_lbl) + " labels");
  const std::size_t n = limit == 0 ? n_img : std::min(limit, n_img);
  const std::size_t pixels = h * w;
  img.require(16 + n * pixels);
  lbl.require(8 + n);

  Dataset d;
  d.name = images.filename().string();
  d.features = Matrix(n, pixels);
  d.labels = Matrix(n, classes);
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned char* src = img_bytes.data() + 16 + i * pixels;
    auto row = d.features.row(i);
    for (std::size_t p = 0; p < pixels; ++p) row[p] = static_cast<double>(src[p]) / 255.0;
    const std::size_t label = lbl_bytes[8 + i];
    if (label >= classes)
      throw std::runtime_error(labels.string() + ": label " + std::to_string(label) +
                               " out of range at offset " + std::to_string(8 + i));
    d.labels(i, label) = 1.0;
  }
  return d;
}

void write_csv(const Dataset& d, std::ostream& out) {
  for (std::size_t j = 0; j < d.dims(); ++j) out << 'f' << j << ',';
  out << "label\n";
  char buf[32];
  for (std::size_t i = 0; i < d.size(); ++i) {
    for (double v : d.features.row(i)) {
      std::snprintf(buf, sizeof buf, "%.17g", v);
      out << buf << ',';
    }
    out << d.label(i) << '\n';
  }
}

Split split(const Dataset& d, double val_fraction, std::uint64_t seed) {
  if (!(val_fraction >= 0.0 && val_fraction < 1.0))
    throw std::invalid_argument("split: val_fraction must be in [0, 1)");
  const auto order = epoch_order(d.size(), seed, ~std::uint64_t{0});
  const auto n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(d.size())));
  std::vector<std::size_t> val(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<std::size_t> train(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
  return {d.subset(train), d.subset(val)};
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::uint64_t epoch) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng = Rng::substream(seed, epoch, 0, 3);
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size,
                                                    std::uint64_t seed, std::uint64_t epoch) {
  if (batch_size == 0) throw std::invalid_argument("epoch_batches: batch_size must be positive");
  const auto order = epoch_order(n, seed, epoch);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t i = 0; i < n; i += batch_size)
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + batch_size)));
  return batches;
}

}  // namespace fqt::data
