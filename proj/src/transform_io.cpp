#include <cstdio>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "fqt/quant.hpp"

namespace fqt::quant {

namespace {

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <class T>
T read_field(std::istream& in, const char* name) {
  std::string key;
  T value{};
  if (!(in >> key) || key != name || !(in >> value)) {
    throw std::runtime_error(std::string("read_transform: expected field '") + name + "'");
  }
  return value;
}

void expect_word(std::istream& in, const char* word) {
  std::string got;
  if (!(in >> got) || got != word) {
    throw std::runtime_error(std::string("read_transform: expected '") + word + "', got '" +
                             got + "'");
  }
}

}  // namespace

void write_transform(std::ostream& out, const ScaleTransform& t) {
  out << "fqt-transform 1\n";
  out << "variant " << to_string(t.variant()) << "\n";
  out << "bits " << t.bits().bits() << "\n";
  if (const auto* p = std::get_if<PerTensorParams>(&t.params())) {
    out << "scale " << num(p->scale) << " zero " << num(p->zero) << " degenerate "
        << (p->degenerate ? 1 : 0) << "\n";
  } else if (const auto* p = std::get_if<PerSampleParams>(&t.params())) {
    out << "rows " << p->scales.size() << "\n";
    for (std::size_t i = 0; i < p->scales.size(); ++i) {
      out << "row " << i << " scale " << num(p->scales[i]) << " zero " << num(p->zeros[i])
          << " degenerate " << int(p->degenerate[i]) << "\n";
    }
  } else if (const auto* p = std::get_if<BlockHouseholderParams>(&t.params())) {
    out << "rows " << p->n_rows << "\n";
    out << "groups " << p->groups.size() << "\n";
    for (std::size_t gi = 0; gi < p->groups.size(); ++gi) {
      const auto& g = p->groups[gi];
      out << "group " << gi << " size " << g.size() << " rotated " << (g.rotated ? 1 : 0)
          << " degenerate " << (g.degenerate ? 1 : 0) << " s1 " << num(g.s1) << " s2 "
          << num(g.s2) << " lambda1 " << num(g.lambda1) << " lambda2 " << num(g.lambda2) << "\n";
      for (std::size_t r = 0; r < g.size(); ++r) {
        out << "member " << g.rows[r] << " offset " << num(g.offsets[r]) << "\n";
      }
    }
  }
  out << "end\n";
}

ScaleTransform read_transform(std::istream& in) {
  const int version = read_field<int>(in, "fqt-transform");
  if (version != 1) throw std::runtime_error("read_transform: unsupported version");
  const auto variant = parse_variant(read_field<std::string>(in, "variant"));
  const QuantBits bits(read_field<int>(in, "bits"));

  ScaleTransform::Params params;
  switch (variant) {
    case Variant::PerTensor: {
      PerTensorParams p;
      p.scale = read_field<double>(in, "scale");
      p.zero = read_field<double>(in, "zero");
      p.degenerate = read_field<int>(in, "degenerate") != 0;
      params = p;
      break;
    }
    case Variant::PerSample: {
      PerSampleParams p;
      const auto rows = read_field<std::size_t>(in, "rows");
      for (std::size_t i = 0; i < rows; ++i) {
        if (read_field<std::size_t>(in, "row") != i)
          throw std::runtime_error("read_transform: rows out of order");
        p.scales.push_back(read_field<double>(in, "scale"));
        p.zeros.push_back(read_field<double>(in, "zero"));
        p.degenerate.push_back(read_field<int>(in, "degenerate") != 0 ? 1 : 0);
      }
      params = std::move(p);
      break;
    }
    case Variant::BlockHouseholder: {
      BlockHouseholderParams p;
      p.n_rows = read_field<std::size_t>(in, "rows");
      const auto groups = read_field<std::size_t>(in, "groups");
      for (std::size_t gi = 0; gi < groups; ++gi) {
        if (read_field<std::size_t>(in, "group") != gi)
          throw std::runtime_error("read_transform: groups out of order");
        HouseholderGroup g;
        const auto size = read_field<std::size_t>(in, "size");
        g.rotated = read_field<int>(in, "rotated") != 0;
        g.degenerate = read_field<int>(in, "degenerate") != 0;
        g.s1 = read_field<double>(in, "s1");
        g.s2 = read_field<double>(in, "s2");
        g.lambda1 = read_field<double>(in, "lambda1");
        g.lambda2 = read_field<double>(in, "lambda2");
        for (std::size_t r = 0; r < size; ++r) {
          g.rows.push_back(read_field<std::size_t>(in, "member"));
          g.offsets.push_back(read_field<double>(in, "offset"));
        }
        p.groups.push_back(std::move(g));
      }
      params = std::move(p);
      break;
    }
  }
  expect_word(in, "end");
  return ScaleTransform(std::move(params), bits);
}

std::string to_text(const ScaleTransform& t) {
  std::ostringstream out;
  write_transform(out, t);
  return out.str();
}

}  // namespace fqt::quant
