#include "fqt/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/json_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace fqt::config {

namespace {

namespace pt = boost::property_tree;

using Setter = std::function<void(const std::string&)>;
using Table = std::map<std::string, std::map<std::string, Setter>>;

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

template <class T>
T parse_number(const std::string& field, const std::string& raw) {
  const std::string text = trim(raw);
  T value{};
  const auto* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (text.empty() || ec != std::errc() || ptr != end)
    throw ConfigError(field, "expected a number, got '" + raw + "'");
  if constexpr (std::is_floating_point_v<T>) {
    if (!std::isfinite(value)) throw ConfigError(field, "must be finite");
  }
  return value;
}

std::vector<std::string> split_list(const std::string& raw) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(raw);
  while (std::getline(in, item, ',')) {
    std::istringstream words(item);
    std::string w;
    while (words >> w) out.push_back(w);
  }
  return out;
}

template <class T>
std::vector<T> parse_list(const std::string& field, const std::string& raw) {
  std::vector<T> out;
  for (const auto& item : split_list(raw)) out.push_back(parse_number<T>(field, item));
  if (out.empty()) throw ConfigError(field, "expected a non-empty list");
  return out;
}

int parse_bits(const std::string& field, const std::string& raw) {
  const int b = parse_number<int>(field, raw);
  if (b < 2 || b > 8) throw ConfigError(field, "bit width must be in [2, 8], got " + raw);
  return b;
}

std::size_t parse_positive(const std::string& field, const std::string& raw) {
  const auto v = parse_number<std::size_t>(field, raw);
  if (v == 0) throw ConfigError(field, "must be positive");
  return v;
}

template <class F>
auto wrap(const std::string& field, const std::string& raw, F&& f) {
  try {
    return f(trim(raw));
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(field, e.what());
  }
}

void add_grad_quantizer(std::map<std::string, Setter>& keys, const std::string& name,
                        net::GradQuantizer& q) {
  keys[name] = [&q, name](const std::string& v) {
    q.variant = wrap("scheme." + name, v, net::parse_grad_variant);
  };
  keys[name + "_bits"] = [&q, name](const std::string& v) {
    q.bits = parse_bits("scheme." + name + "_bits", v);
  };
  keys[name + "_rounding"] = [&q, name](const std::string& v) {
    const std::string field = "scheme." + name + "_rounding";
    const std::string t = trim(v);
    if (t == "stochastic")
      q.rounding = quant::Rounding::Stochastic;
    else if (t == "nearest")
      q.rounding = quant::Rounding::Nearest;
    else
      throw ConfigError(field, "expected stochastic or nearest, got '" + v + "'");
  };
}

Table make_table(Config& c) {
  Table t;
  auto& run = t["run"];
  run["seed"] = [&](const std::string& v) { c.run.seed = parse_number<std::uint64_t>("run.seed", v); };
  run["threads"] = [&](const std::string& v) {
    c.run.threads = static_cast<unsigned>(parse_positive("run.threads", v));
  };

  t["net"]["layers"] = [&](const std::string& v) { c.net.layers = trim(v); };

  auto& data = t["data"];
  data["source"] = [&](const std::string& v) {
    const std::string s = trim(v);
    if (s != "blobs" && s != "idx") throw ConfigError("data.source", "expected blobs or idx, got '" + v + "'");
    c.data.source = s;
  };
  data["classes"] = [&](const std::string& v) { c.data.classes = parse_positive("data.classes", v); };
  data["dims"] = [&](const std::string& v) { c.data.dims = parse_positive("data.dims", v); };
  data["per_class"] = [&](const std::string& v) { c.data.per_class = parse_positive("data.per_class", v); };
  data["spread"] = [&](const std::string& v) {
    c.data.spread = parse_number<double>("data.spread", v);
    if (c.data.spread < 0.0) throw ConfigError("data.spread", "must be >= 0");
  };
  data["seed"] = [&](const std::string& v) { c.data.seed = parse_number<std::uint64_t>("data.seed", v); };
  data["val_fraction"] = [&](const std::string& v) {
    c.data.val_fraction = parse_number<double>("data.val_fraction", v);
    if (c.data.val_fraction < 0.0 || c.data.val_fraction >= 1.0)
      throw ConfigError("data.val_fraction", "must be in [0, 1)");
  };
  data["images"] = [&](const std::string& v) { c.data.images = trim(v); };
  data["labels"] = [&](const std::string& v) { c.data.labels = trim(v); };
  data["limit"] = [&](const std::string& v) { c.data.limit = parse_number<std::size_t>("data.limit", v); };

  auto& scheme = t["scheme"];
  scheme["forward_bits"] = [&](const std::string& v) {
    const int b = parse_number<int>("scheme.forward_bits", v);
    if (b != 0 && (b < 2 || b > 8))
      throw ConfigError("scheme.forward_bits", "must be 0 (off) or in [2, 8], got " + v);
    c.scheme.forward_bits = b;
  };
  add_grad_quantizer(scheme, "weight_grad", c.scheme.weight_grad);
  add_grad_quantizer(scheme, "act_grad", c.scheme.act_grad);

  auto& tr = t["train"];
  tr["mode"] = [&](const std::string& v) { c.train.cfg.mode = wrap("train.mode", v, train::parse_mode); };
  tr["lr"] = [&](const std::string& v) {
    c.train.cfg.lr = parse_number<double>("train.lr", v);
    if (!(c.train.cfg.lr > 0.0)) throw ConfigError("train.lr", "must be > 0, got " + v);
  };
  tr["schedule"] = [&](const std::string& v) {
    c.train.cfg.schedule = wrap("train.schedule", v, train::parse_schedule);
  };
  tr["momentum"] = [&](const std::string& v) {
    c.train.cfg.momentum = parse_number<double>("train.momentum", v);
    if (c.train.cfg.momentum < 0.0 || c.train.cfg.momentum >= 1.0)
      throw ConfigError("train.momentum", "must be in [0, 1), got " + v);
  };
  tr["epochs"] = [&](const std::string& v) { c.train.cfg.epochs = parse_positive("train.epochs", v); };
  tr["batch_size"] = [&](const std::string& v) {
    c.train.cfg.batch_size = parse_positive("train.batch_size", v);
  };
  tr["warmup_epochs"] = [&](const std::string& v) {
    c.train.cfg.warmup_epochs = parse_number<std::size_t>("train.warmup_epochs", v);
  };
  tr["weight_decay"] = [&](const std::string& v) {
    c.train.cfg.weight_decay = parse_number<double>("train.weight_decay", v);
    if (c.train.cfg.weight_decay < 0.0) throw ConfigError("train.weight_decay", "must be >= 0");
  };
  tr["label_smoothing"] = [&](const std::string& v) {
    c.train.cfg.label_smoothing = parse_number<double>("train.label_smoothing", v);
    if (c.train.cfg.label_smoothing < 0.0 || c.train.cfg.label_smoothing >= 1.0)
      throw ConfigError("train.label_smoothing", "must be in [0, 1)");
  };

  t["batch"]["size"] = [&](const std::string& v) { c.batch.size = parse_positive("batch.size", v); };

  auto& mc = t["mc"];
  mc["trials"] = [&](const std::string& v) { c.mc.trials = parse_number<std::size_t>("mc.trials", v); };
  mc["batches"] = [&](const std::string& v) { c.mc.batches = parse_number<std::size_t>("mc.batches", v); };

  auto& sweep = t["sweep"];
  sweep["variant"] = [&](const std::string& v) {
    c.sweep.variant = wrap("sweep.variant", v, quant::parse_variant);
  };
  sweep["bits"] = [&](const std::string& v) {
    std::vector<int> bits;
    for (const auto& item : split_list(v)) bits.push_back(parse_bits("sweep.bits", item));
    if (bits.empty()) throw ConfigError("sweep.bits", "expected a non-empty list");
    c.sweep.bits = bits;
  };

  auto& sparse = t["sparse"];
  sparse["n_rows"] = [&](const std::string& v) {
    c.sparse.n_rows = parse_list<std::size_t>("sparse.n_rows", v);
    for (auto n : c.sparse.n_rows)
      if (n < 2) throw ConfigError("sparse.n_rows", "every entry must be >= 2");
  };
  sparse["lambda1"] = [&](const std::string& v) {
    c.sparse.lambda1 = parse_number<double>("sparse.lambda1", v);
    if (!(c.sparse.lambda1 > 0.0)) throw ConfigError("sparse.lambda1", "must be > 0");
  };
  sparse["lambda2"] = [&](const std::string& v) {
    c.sparse.lambda2 = parse_number<double>("sparse.lambda2", v);
    if (c.sparse.lambda2 < 0.0) throw ConfigError("sparse.lambda2", "must be >= 0");
  };
  sparse["d"] = [&](const std::string& v) {
    c.sparse.d = parse_positive("sparse.d", v);
    if (c.sparse.d < 2) throw ConfigError("sparse.d", "must be >= 2");
  };
  sparse["bits"] = [&](const std::string& v) { c.sparse.bits = parse_bits("sparse.bits", v); };
  return t;
}

std::string leaf_value(const pt::ptree& node) {
  if (node.empty()) return node.data();
  // JSON arrays arrive as children with empty keys.
  std::string joined;
  for (const auto& [key, child] : node) {
    if (!key.empty() || !child.empty())
      throw std::runtime_error("nested objects are not supported");
    if (!joined.empty()) joined += ',';
    joined += child.data();
  }
  return joined;
}

void validate(const Config& c) {
  std::vector<net::Layer> layers;
  try {
    layers = net::parse_layers(c.net.layers, 0);
    net::Network check(layers);
    if (c.data.source == "blobs") {
      if (check.input_dim() != c.data.dims)
        throw ConfigError("net.layers", "input width " + std::to_string(check.input_dim()) +
                                            " does not match data.dims = " + std::to_string(c.data.dims));
    }
    if (check.output_dim() != c.data.classes)
      throw ConfigError("net.layers", "output width " + std::to_string(check.output_dim()) +
                                          " does not match data.classes = " +
                                          std::to_string(c.data.classes));
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError("net.layers", e.what());
  }
  if (c.data.source == "idx" && (c.data.images.empty() || c.data.labels.empty()))
    throw ConfigError("data.images", "idx source needs data.images and data.labels");
  if (c.train.cfg.warmup_epochs > c.train.cfg.epochs)
    throw ConfigError("train.warmup_epochs", "must not exceed train.epochs");
  try {
    c.mc_config().validate();
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    throw ConfigError(msg.substr(0, msg.find(' ')), msg);
  }
}

// Shortest text that parses back to v.
std::string num(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return {buf, r.ptr};
}

std::string rounding_name(quant::Rounding r) {
  return r == quant::Rounding::Stochastic ? "stochastic" : "nearest";
}

}  // namespace

net::QuantScheme Config::quant_scheme() const {
  net::QuantScheme s;
  s.forward_bits = scheme.forward_bits;
  s.weight_grad = scheme.weight_grad;
  s.act_grad = scheme.act_grad;
  return s;
}

analysis::McConfig Config::mc_config() const {
  analysis::McConfig m;
  m.trials = mc.trials;
  m.batches = mc.batches;
  m.seed = run.seed;
  m.threads = run.threads;
  return m;
}

Config parse(const std::string& text, bool json) {
  pt::ptree tree;
  std::istringstream in(text);
  try {
    if (json)
      pt::read_json(in, tree);
    else
      pt::read_ini(in, tree);
  } catch (const pt::file_parser_error& e) {
    throw ConfigError("config", std::string("line ") + std::to_string(e.line()) + ": " + e.message());
  }

  Config c;
  const Table table = make_table(c);
  for (const auto& [section, node] : tree) {
    const auto sec = table.find(section);
    if (sec == table.end()) throw ConfigError(section, "unknown section");
    if (node.empty() && !node.data().empty())
      throw ConfigError(section, "expected a section, got a value");
    for (const auto& [key, child] : node) {
      const std::string field = section + "." + key;
      const auto setter = sec->second.find(key);
      if (setter == sec->second.end()) throw ConfigError(field, "unknown key");
      std::string value;
      try {
        value = leaf_value(child);
      } catch (const std::exception& e) {
        throw ConfigError(field, e.what());
      }
      setter->second(value);
    }
  }
  validate(c);
  return c;
}

Config load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config", "cannot open " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  const std::string text = buf.str();
  const auto first = text.find_first_not_of(" \t\r\n");
  const bool json =
      path.extension() == ".json" || (first != std::string::npos && text[first] == '{');
  return parse(text, json);
}

std::string to_ini(const Config& c) {
  std::ostringstream o;
  auto list = [](const auto& v) {
    std::string s;
    for (const auto& x : v) s += (s.empty() ? "" : ",") + std::to_string(x);
    return s;
  };
  o << "[run]\nseed = " << c.run.seed << "\nthreads = " << c.run.threads << "\n\n";
  o << "[net]\nlayers = " << c.net.layers << "\n\n";
  o << "[data]\nsource = " << c.data.source << "\nclasses = " << c.data.classes
    << "\ndims = " << c.data.dims << "\nper_class = " << c.data.per_class
    << "\nspread = " << num(c.data.spread) << "\nseed = " << c.data.seed
    << "\nval_fraction = " << num(c.data.val_fraction) << "\n";
  if (!c.data.images.empty()) o << "images = " << c.data.images << "\n";
  if (!c.data.labels.empty()) o << "labels = " << c.data.labels << "\n";
  o << "limit = " << c.data.limit << "\n\n";
  o << "[scheme]\nforward_bits = " << c.scheme.forward_bits;
  for (const auto& [name, q] : {std::pair{"weight_grad", c.scheme.weight_grad},
                                std::pair{"act_grad", c.scheme.act_grad}}) {
    o << "\n" << name << " = " << net::to_string(q.variant) << "\n" << name << "_bits = " << q.bits
      << "\n" << name << "_rounding = " << rounding_name(q.rounding);
  }
  o << "\n\n";
  const auto& t = c.train.cfg;
  o << "[train]\nmode = " << train::to_string(t.mode) << "\nlr = " << num(t.lr)
    << "\nschedule = " << train::to_string(t.schedule) << "\nmomentum = " << num(t.momentum)
    << "\nepochs = " << t.epochs << "\nbatch_size = " << t.batch_size
    << "\nwarmup_epochs = " << t.warmup_epochs << "\nweight_decay = " << num(t.weight_decay)
    << "\nlabel_smoothing = " << num(t.label_smoothing) << "\n\n";
  o << "[batch]\nsize = " << c.batch.size << "\n\n";
  o << "[mc]\ntrials = " << c.mc.trials << "\nbatches = " << c.mc.batches << "\n\n";
  o << "[sweep]\nvariant = " << quant::to_string(c.sweep.variant) << "\nbits = " << list(c.sweep.bits)
    << "\n\n";
  o << "[sparse]\nn_rows = " << list(c.sparse.n_rows) << "\nlambda1 = " << num(c.sparse.lambda1)
    << "\nlambda2 = " << num(c.sparse.lambda2) << "\nd = " << c.sparse.d << "\nbits = " << c.sparse.bits
    << "\n";
  return o.str();
}

data::Split make_dataset(const Config& c) {
  data::Dataset d;
  if (c.data.source == "idx") {
    d = data::load_idx(c.data.images, c.data.labels, c.data.limit, c.data.classes);
  } else {
    d = data::make_blobs(c.data.classes, c.data.dims, c.data.per_class, c.data.spread, c.data.seed);
  }
  return data::split(d, c.data.val_fraction, c.data.seed);
}

}  // namespace fqt::config
