#include "fqt/cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <ostream>
#include <string>

#include "fqt/analysis.hpp"
#include "fqt/config.hpp"
#include "fqt/data.hpp"
#include "fqt/net.hpp"
#include "fqt/quant.hpp"
#include "fqt/train.hpp"

namespace fqt::cli {

namespace {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

struct Options {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<unsigned> threads;
  std::string out_dir = "fqt-out";
  bool timing = false;
  bool export_data = false;
};

/// Invariant violations detected by a command; reported with exit code 1.
struct Checks {
  std::vector<std::pair<std::string, bool>> items;
  void add(std::string name, bool ok) { items.emplace_back(std::move(name), ok); }
  bool all() const {
    for (const auto& [name, ok] : items)
      if (!ok) return false;
    return true;
  }
  Json to_json() const {
    Json j = Json::object();
    for (const auto& [name, ok] : items) j[name] = ok;
    return j;
  }
};

std::string num(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

Json json_num(double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); }

Json estimate_json(const analysis::Estimate& e) { return {{"value", json_num(e.value)}, {"se", json_num(e.se)}}; }

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

void write_json(const fs::path& path, const Json& j) { write_text(path, j.dump(2) + "\n"); }

config::Config resolve_config(const Options& o) {
  config::Config c = o.config_path.empty() ? config::parse("", false) : config::load(o.config_path);
  if (o.seed) c.run.seed = *o.seed;
  if (o.threads) c.run.threads = *o.threads;
  return c;
}

net::Network make_network(const config::Config& c) {
  return net::Network(net::parse_layers(c.net.layers, c.run.seed));
}

analysis::Batch fixed_batch(const config::Config& c, const data::Split& split) {
  const auto idx = data::epoch_batches(split.train.size(), c.batch.size, c.run.seed, 0).at(0);
  auto b = split.train.subset(idx);
  return {std::move(b.features), std::move(b.labels)};
}

Json header(const std::string& command, const config::Config& c) {
  return {{"command", command}, {"seed", c.run.seed}, {"threads", c.run.threads}};
}

// Transforms fitted on the quantizer inputs of trial 0, for audit.
void dump_transforms(const fs::path& path, const net::Network& net, const analysis::Batch& batch,
                     const net::QuantScheme& scheme, std::uint64_t seed) {
  const auto fwd = net::forward_quantized(net, batch.x, scheme);
  const auto lg = net::loss_and_grad(fwd.predictions, batch.y);
  std::vector<net::QuantizerInput> trace;
  net::backward_fqt(net, fwd.tape, lg.grad, scheme, {seed, 0}, &trace);
  std::ostringstream out;
  for (const auto& in : trace) {
    for (const auto& [name, q] : {std::pair{"weight_grad", scheme.weight_grad},
                                  std::pair{"act_grad", scheme.act_grad}}) {
      const auto t = net::fit_grad_quantizer(q, in.grad);
      out << "# layer " << in.layer << " " << name << "\n";
      if (t)
        quant::write_transform(out, *t);
      else
        out << "identity\n";
    }
  }
  write_text(path, out.str());
}

// --- commands ----------------------------------------------------------------------

int cmd_train(const config::Config& c, const Options& o, const fs::path& dir, std::ostream& out) {
  const auto split = config::make_dataset(c);
  const net::Network net0 = make_network(c);
  const auto scheme = c.quant_scheme();
  auto cfg = c.train.cfg;
  cfg.seed = c.run.seed;

  if (o.export_data) {
    std::ofstream tr(dir / "train.csv"), va(dir / "val.csv");
    data::write_csv(split.train, tr);
    data::write_csv(split.val, va);
  }

  std::string metrics = "epoch,train_loss,train_acc,val_acc,status\n";
  std::string timing = "epoch,wall_seconds\n";
  const auto result = train::train(net0, split.train, split.val, scheme, cfg, [&](const auto& m) {
    metrics += std::to_string(m.epoch) + "," + num(m.train_loss) + "," + num(m.train_acc) + "," +
               num(m.val_acc) + "," + m.status + "\n";
    timing += std::to_string(m.epoch) + "," + num(m.wall_seconds) + "\n";
    out << "epoch " << m.epoch << " loss " << num(m.train_loss) << " train_acc " << num(m.train_acc)
        << " val_acc " << num(m.val_acc) << " " << m.status << "\n";
  });
  write_text(dir / "metrics.csv", metrics);
  if (o.timing) write_text(dir / "timing.csv", timing);
  net::save_checkpoint(result.net, dir / "checkpoint.bin");
  if (cfg.mode == train::Mode::Fqt && !result.diverged)
    dump_transforms(dir / "transforms.txt", result.net, fixed_batch(c, split), scheme, c.run.seed);

  Json j = header("train", c);
  j["mode"] = train::to_string(cfg.mode);
  j["network"] = net::describe(result.net);
  j["epochs_run"] = result.epochs.size();
  j["status"] = result.diverged ? "diverge" : "ok";
  j["final_train_loss"] = json_num(result.final_train.loss);
  j["final_train_acc"] = json_num(result.final_train.accuracy);
  j["final_val_loss"] = json_num(result.final_val.loss);
  j["final_val_acc"] = json_num(result.final_val.accuracy);
  write_json(dir / "report.json", j);
  return kExitOk;
}

int cmd_bias(const config::Config& c, const fs::path& dir, std::ostream& out) {
  const auto split = config::make_dataset(c);
  const auto net = make_network(c);
  const auto batch = fixed_batch(c, split);
  const auto scheme = c.quant_scheme();
  const auto r = analysis::bias_check(net, batch, scheme, c.mc_config());

  std::string csv = "coordinate,qat,mean,se\n";
  for (std::size_t i = 0; i < r.qat.size(); ++i)
    csv += std::to_string(i) + "," + num(r.qat[i]) + "," + num(r.mean[i]) + "," + num(r.se[i]) + "\n";
  write_text(dir / "bias.csv", csv);
  dump_transforms(dir / "transforms.txt", net, batch, scheme, c.run.seed);

  Checks checks;
  checks.add("unbiased", r.passed());
  Json j = header("bias", c);
  j["trials"] = r.trials;
  j["coordinates"] = r.qat.size();
  j["k_sigma"] = r.k_sigma;
  j["required_fraction"] = r.required_fraction;
  j["fraction_within"] = r.fraction_within;
  j["max_abs_z"] = json_num(r.max_abs_z);
  j["max_abs_deviation"] = r.max_abs_deviation;
  j["checks"] = checks.to_json();
  write_json(dir / "report.json", j);
  out << "bias: " << num(100.0 * r.fraction_within) << "% of " << r.qat.size()
      << " coordinates within " << r.k_sigma << " SE -> " << (checks.all() ? "pass" : "FAIL") << "\n";
  return checks.all() ? kExitOk : kExitInvariant;
}

int cmd_variance(const config::Config& c, const fs::path& dir, std::ostream& out) {
  const auto split = config::make_dataset(c);
  const auto net = make_network(c);
  const auto batch = fixed_batch(c, split);
  const auto scheme = c.quant_scheme();
  const auto r = analysis::variance_decomposition(net, batch, scheme, c.mc_config());
  const auto bounds = analysis::bound_check(r);

  std::string csv = "source,param,value,se\n";
  for (const auto& t : r.terms)
    csv += std::to_string(t.source) + "," + std::to_string(t.param) + "," + num(t.value.value) +
           "," + num(t.value.se) + "\n";
  write_text(dir / "terms.csv", csv);
  dump_transforms(dir / "transforms.txt", net, batch, scheme, c.run.seed);

  Checks checks;
  checks.add("decomposition", r.decomposition_holds(3.0));
  checks.add("quantizer_bound", bounds.quantizer_bound);
  if (bounds.range_bound) checks.add("range_bound", *bounds.range_bound);
  Json j = header("variance", c);
  j["trials"] = r.trials;
  j["total_mc"] = estimate_json(r.total_mc);
  j["qat_variance"] = r.qat_variance;
  j["terms_sum"] = estimate_json(r.terms_sum);
  j["difference"] = estimate_json(r.difference);
  j["quantizer_bound"] = estimate_json(r.quantizer_bound);
  j["range_bound"] = r.range_bound ? estimate_json(*r.range_bound) : Json(nullptr);
  Json terms = Json::array();
  for (const auto& t : r.terms)
    terms.push_back({{"source", t.source}, {"param", t.param}, {"value", estimate_json(t.value)}});
  j["terms"] = terms;
  j["checks"] = checks.to_json();
  write_json(dir / "report.json", j);
  out << "variance: total " << num(r.total_mc.value) << " +- " << num(r.total_mc.se) << ", terms "
      << num(r.terms_sum.value) << ", difference " << num(r.difference.value) << " +- "
      << num(r.difference.se) << " -> " << (checks.all() ? "pass" : "FAIL") << "\n";
  return checks.all() ? kExitOk : kExitInvariant;
}

int cmd_sweep(const config::Config& c, const fs::path& dir, std::ostream& out) {
  const auto split = config::make_dataset(c);
  const auto net = make_network(c);
  const auto batch = fixed_batch(c, split);
  const auto rows = analysis::bit_sweep(net, batch, c.scheme.forward_bits, c.sweep.variant,
                                        c.sweep.bits, c.mc_config());

  auto opt = [](const std::optional<double>& v) { return v ? num(*v) : std::string("undefined"); };
  std::string csv = "bits,exact,bound,mc,mc_se,exact_ratio,bound_ratio\n";
  Checks checks;
  bool monotone = true, bounded = true;
  Json table = Json::array();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    csv += std::to_string(r.bits) + "," + num(r.exact) + "," + num(r.bound) + "," + num(r.mc.value) +
           "," + num(r.mc.se) + "," + opt(r.exact_ratio) + "," + opt(r.bound_ratio) + "\n";
    if (i > 0 && r.exact < rows[i - 1].exact) monotone = false;
    if (r.exact > r.bound * (1.0 + 1e-12)) bounded = false;
    table.push_back({{"bits", r.bits},
                     {"exact", r.exact},
                     {"bound", r.bound},
                     {"mc", estimate_json(r.mc)},
                     {"exact_ratio", r.exact_ratio ? Json(*r.exact_ratio) : Json(nullptr)},
                     {"bound_ratio", r.bound_ratio ? Json(*r.bound_ratio) : Json(nullptr)}});
  }
  checks.add("monotone_in_bits", monotone);
  checks.add("exact_within_bound", bounded);
  write_text(dir / "sweep.csv", csv);
  Json j = header("sweep", c);
  j["variant"] = quant::to_string(c.sweep.variant);
  j["rows"] = table;
  j["checks"] = checks.to_json();
  write_json(dir / "report.json", j);
  out << "sweep: " << rows.size() << " bit widths -> " << (checks.all() ? "pass" : "FAIL") << "\n";
  return checks.all() ? kExitOk : kExitInvariant;
}

int cmd_sparse(const config::Config& c, const fs::path& dir, std::ostream& out) {
  std::string csv = "n_rows,variant,exact,bound\n";
  Checks checks;
  bool ordered = true, bounded = true;
  Json table = Json::array();
  std::vector<analysis::SparseBench> benches;
  for (std::size_t n : c.sparse.n_rows) {
    benches.push_back(analysis::sparse_gradient_bench(n, c.sparse.lambda1, c.sparse.lambda2,
                                                      c.sparse.d, c.sparse.bits, c.run.seed));
    const auto& b = benches.back();
    ordered = ordered && b.ordered();
    for (const auto& r : b.rows) {
      bounded = bounded && r.exact <= r.bound * (1.0 + 1e-12);
      csv += std::to_string(n) + "," + quant::to_string(r.variant) + "," + num(r.exact) + "," +
             num(r.bound) + "\n";
      table.push_back({{"n_rows", n}, {"variant", quant::to_string(r.variant)}, {"exact", r.exact},
                       {"bound", r.bound}});
    }
  }
  Json scaling = Json::array();
  for (std::size_t i = 0; i + 1 < benches.size(); ++i) {
    const double bhq_small = benches[i].exact(quant::Variant::BlockHouseholder);
    const double bhq_large = benches[i + 1].exact(quant::Variant::BlockHouseholder);
    scaling.push_back({{"from", benches[i].n_rows},
                       {"to", benches[i + 1].n_rows},
                       {"bhq_reduction", bhq_large > 0.0 ? Json(bhq_small / bhq_large) : Json(nullptr)}});
  }
  checks.add("bhq_lt_psq_lt_ptq", ordered);
  checks.add("exact_within_bound", bounded);
  write_text(dir / "sparse.csv", csv);
  Json j = header("sparse", c);
  j["lambda1"] = c.sparse.lambda1;
  j["lambda2"] = c.sparse.lambda2;
  j["d"] = c.sparse.d;
  j["bits"] = c.sparse.bits;
  j["rows"] = table;
  j["bhq_scaling"] = scaling;
  j["checks"] = checks.to_json();
  write_json(dir / "report.json", j);
  out << "sparse: " << benches.size() << " sizes -> " << (checks.all() ? "pass" : "FAIL") << "\n";
  return checks.all() ? kExitOk : kExitInvariant;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Fully quantized training laboratory"};
  app.require_subcommand(0, 1);
  Options o;
  std::uint64_t seed = 0;
  unsigned threads = 0;
  auto* seed_opt = app.add_option("--seed", seed, "Master seed (overrides run.seed)");
  auto* threads_opt =
      app.add_option("--threads", threads, "Worker threads (overrides run.threads)")
          ->check(CLI::PositiveNumber);
  app.add_option("--config", o.config_path, "INI or JSON configuration file");
  app.add_option("--out", o.out_dir, "Output directory")->envname("FQT_OUT_DIR");
  app.add_flag("--print-config", "Print the effective configuration and exit");

  auto* train = app.add_subcommand("train", "Train a network (exact, qat or fqt)");
  train->add_flag("--timing", o.timing, "Also write per-epoch wall time to timing.csv");
  train->add_flag("--export-data", o.export_data, "Write the train/validation split as CSV");
  app.add_subcommand("bias", "Monte Carlo unbiasedness check");
  app.add_subcommand("variance", "Variance decomposition and bound checks");
  app.add_subcommand("sweep", "Quantizer variance against bit width");
  app.add_subcommand("sparse", "Quantizers on a gradient with one large row");
  for (auto* sub : app.get_subcommands({})) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }
  if (*seed_opt) o.seed = seed;
  if (*threads_opt) o.threads = threads;

  config::Config c;
  try {
    c = resolve_config(o);
  } catch (const config::ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitUsage;
  }
  if (app.count("--print-config") > 0) {
    out << config::to_ini(c);
    return kExitOk;
  }

  if (app.get_subcommands().empty()) {
    err << "A subcommand is required\nRun with --help for more information.\n";
    return kExitUsage;
  }
  const std::string name = app.get_subcommands().front()->get_name();
  try {
    const fs::path dir = o.out_dir;
    fs::create_directories(dir);
    write_text(dir / "config.ini", config::to_ini(c));
    if (name == "train") return cmd_train(c, o, dir, out);
    if (name == "bias") return cmd_bias(c, dir, out);
    if (name == "variance") return cmd_variance(c, dir, out);
    if (name == "sweep") return cmd_sweep(c, dir, out);
    if (name == "sparse") return cmd_sparse(c, dir, out);
  } catch (const config::ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << name << ": " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitUsage;
}

}  // namespace fqt::cli
