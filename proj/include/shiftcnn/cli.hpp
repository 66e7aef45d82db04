#pragma once

// Command-line front end. run_cli() is the whole program; tools/ only wraps
// it in main() so the commands can be driven in-process by tests.
//
// Exit codes: 0 success, 1 usage error, 2 I/O or format error,
// 3 numerical failure (overflow, equivalence violation).

#include <bit>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include <CLI11.hpp>

#include "shiftcnn/analyzer.hpp"
#include "shiftcnn/codebook.hpp"
#include "shiftcnn/engine.hpp"
#include "shiftcnn/error.hpp"
#include "shiftcnn/io.hpp"
#include "shiftcnn/synthetic.hpp"

namespace shiftcnn::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kFormat = 2, kNumerical = 3 };

inline int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::invalid_config:
    case ErrorKind::invalid_argument:
    case ErrorKind::invalid_bits:
      return kUsage;
    case ErrorKind::accumulator_overflow:
    case ErrorKind::equivalence_violation:
    case ErrorKind::input_width_exceeded:
    case ErrorKind::domain_error:
      return kNumerical;
    default:
      return kFormat;
  }
}

struct LayerTrace {
  std::string name;
  double seconds = 0.0;
  OpCounters ops;
};

/// Outcome of an engine-vs-oracle comparison.
struct RunReport {
  std::vector<LayerTrace> layers;
  OpCounters ops;
  double max_abs_error = 0.0;
  std::uint64_t mismatches = 0;
  std::uint64_t elements = 0;
  DivergenceReport divergence;
  int exit_status = kOk;
};

namespace detail {

inline std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline bool same_bits(double a, double b) {
  return std::bit_cast<std::uint64_t>(a) == std::bit_cast<std::uint64_t>(b);
}

inline bool looks_like_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  char magic[4] = {};
  in.read(magic, 4);
  return in.gcount() == 4 && std::string_view(magic, 4) == kTensorMagic;
}

inline bool is_float_manifest(const std::filesystem::path& path) {
  try {
    const auto doc = nlohmann::json::parse(read_file(path));
    return doc.value("kind", "") == "float";
  } catch (const nlohmann::json::exception&) {
    return false;
  }
}

inline FloatTensor as_float(const AnyTensor& t) {
  if (const auto* f = std::get_if<FloatTensor>(&t)) return *f;
  return from_fixed_point(std::get<FixedPointTensor>(t));
}

/// Fixed-point inputs reach the first layer unchanged; float inputs are
/// converted to 8-bit dynamic fixed point.
inline FloatTensor run_any(const Model& model, const AnyTensor& input,
                           const NetworkOptions& options, OpCounters* ops = nullptr) {
  return std::visit([&](const auto& x) { return run_network(model, x, options, ops); }, input);
}

/// Engine network run that records per-layer counters and wall time.
inline FloatTensor traced_engine_run(const Model& model, const AnyTensor& input,
                                     const EngineOptions& engine, RunReport& report) {
  validate(model);
  FloatTensor x = as_float(input);
  shiftcnn::detail::check_chain(model.layers, x.dims());
  const auto* fixed_input = std::get_if<FixedPointTensor>(&input);
  if (fixed_input && fixed_input->bits > 8) {
    throw Error(ErrorKind::input_width_exceeded, "fixed-point input wider than 8 bits");
  }
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const auto& layer = model.layers[i];
    const auto start = std::chrono::steady_clock::now();
    OpCounters ops;
    const FixedPointTensor fx = i == 0 && fixed_input ? *fixed_input : to_fixed_point(x, 8);
    x = conv_layer_shift(fx, layer.weights, layer.bias, layer.spec, engine, &ops);
    if (layer.relu) relu_in_place(x);
    const std::chrono::duration<double> took = std::chrono::steady_clock::now() - start;
    if (report.layers.size() <= i) report.layers.push_back({layer.spec.name, 0.0, {}});
    report.layers[i].seconds += took.count();
    report.layers[i].ops += ops;
    report.ops += ops;
  }
  return x;
}

}  // namespace detail

struct QuantizeArgs {
  std::string input, output;
  int shifts = 2, bits = 4;
};

inline int cmd_quantize(const QuantizeArgs& args, std::ostream& out) {
  const CodebookConfig config(args.shifts, args.bits);
  const FloatModel source = load_float_model(args.input);
  const Model model = quantize_model(source, config);
  save_model(args.output, model);
  out << "codebook N=" << config.stages() << " B=" << config.bits()
      << " M=" << config.stage_size() << " P=" << config.combinations() << "\n";
  for (std::size_t i = 0; i < source.layers.size(); ++i) {
    out << "layer " << source.layers[i].spec.name
        << " scale " << detail::fmt_double(model.layers[i].weights.scale) << " distortion "
        << detail::fmt_double(empirical_distortion(source.layers[i].weights, config)) << "\n";
  }
  return kOk;
}

struct InferArgs {
  std::string model, input, output;
  bool float_oracle = false;
  bool no_requant = false;
  unsigned workers = 1;
};

inline int cmd_infer(const InferArgs& args, std::ostream& out) {
  const Model model = load_model(args.model);
  const AnyTensor input = load_tensor(args.input);
  NetworkOptions options;
  options.float_oracle = args.float_oracle;
  options.requantize = !args.no_requant;
  options.engine.workers = args.workers;
  OpCounters ops;
  const FloatTensor y = detail::run_any(model, input, options, &ops);
  save_tensor(args.output, y);
  out << "output " << format_dims(y.dims()) << " written to " << args.output << "\n";
  if (!args.float_oracle) {
    out << "ops shifts " << ops.shifts << " sign_flips " << ops.sign_flips << " additions "
        << ops.additions << " datapath_multiplies " << ops.datapath_multiplies << "\n";
  }
  return kOk;
}

struct CompareArgs {
  std::string model;
  std::vector<std::string> inputs;
  std::size_t random = 0;
  std::optional<std::uint64_t> seed;
  std::size_t bins = kDefaultHistogramBins;
  unsigned workers = 1;
  bool timing = false;
};

/// Engine against float oracle on every input. Outputs must agree bit for
/// bit; `bins` sizes the divergence histogram.
inline RunReport compare(const Model& model, const std::vector<AnyTensor>& inputs,
                         unsigned workers, std::size_t bins = kDefaultHistogramBins) {
  if (inputs.empty()) throw Error(ErrorKind::invalid_argument, "no inputs");
  RunReport report;
  EngineOptions engine{workers};
  NetworkOptions oracle;
  oracle.float_oracle = true;
  std::vector<FloatTensor> engine_out, oracle_out;
  for (const auto& x : inputs) {
    const FloatTensor a = detail::traced_engine_run(model, x, engine, report);
    const FloatTensor b = detail::run_any(model, x, oracle);
    for (std::size_t i = 0; i < a.size(); ++i) {
      report.max_abs_error = std::max(report.max_abs_error, std::abs(a[i] - b[i]));
      if (!detail::same_bits(a[i], b[i])) ++report.mismatches;
    }
    report.elements += a.size();
    engine_out.push_back(a);
    oracle_out.push_back(b);
  }
  report.divergence = divergence(engine_out, oracle_out, bins);
  if (report.mismatches != 0 || report.ops.datapath_multiplies != 0) {
    report.exit_status = kNumerical;
  }
  return report;
}

inline int cmd_compare(const CompareArgs& args, std::ostream& out) {
  const Model model = load_model(args.model);
  std::vector<AnyTensor> inputs;
  for (const auto& path : args.inputs) inputs.push_back(load_tensor(path));
  if (args.random > 0) {
    if (!args.seed) {
      throw Error(ErrorKind::invalid_argument, "--random requires an explicit --seed");
    }
    if (model.layers.empty()) throw Error(ErrorKind::shape_mismatch, "model has no layers");
    std::mt19937_64 rng(*args.seed);
    for (std::size_t i = 0; i < args.random; ++i) {
      inputs.push_back(random_uniform_tensor(model.layers.front().spec.input_dims(), -1.0,
                                             1.0, rng));
    }
  }
  if (inputs.empty()) throw Error(ErrorKind::invalid_argument, "no inputs");

  const RunReport report = compare(model, inputs, args.workers, args.bins);
  const DivergenceReport& div = report.divergence;

  out << "inputs " << inputs.size() << " elements " << report.elements << "\n";
  for (const auto& layer : report.layers) {
    out << "layer " << layer.name << " shifts " << layer.ops.shifts << " sign_flips "
        << layer.ops.sign_flips << " additions " << layer.ops.additions
        << " datapath_multiplies " << layer.ops.datapath_multiplies;
    if (args.timing) out << " seconds " << detail::fmt_double(layer.seconds);
    out << "\n";
  }
  out << "datapath_multiplies " << report.ops.datapath_multiplies << "\n";
  out << "max_abs_error " << detail::fmt_double(report.max_abs_error) << "\n";
  out << "bitwise_mismatches " << report.mismatches << "\n";
  out << "divergence bias " << detail::fmt_double(div.mean) << " variance "
      << detail::fmt_double(div.variance) << "\n";
  const std::size_t zero_bin = div.histogram.bins() / 2;
  out << "divergence histogram bins " << div.histogram.bins() << " center_bin_count "
      << div.histogram.counts[zero_bin] << " total " << div.histogram.total << "\n";
  out << (report.exit_status == kOk ? "equivalence: bit-exact\n"
                                    : "equivalence: VIOLATED\n");
  return report.exit_status;
}

struct AnalyzeArgs {
  std::string layers;
  int shifts = 2, bits = 4;
};

inline int cmd_analyze(const AnalyzeArgs& args, std::ostream& out) {
  const CodebookConfig config(args.shifts, args.bits);
  std::ifstream in(args.layers);
  if (!in) throw Error(ErrorKind::io_error, "cannot open '" + args.layers + "'");
  const auto records = parse_layer_file(in);
  const ModelCost cost = model_cost(records, config);
  out << "# name conv_mult_cycles shift_product_ops shift_alu_cycles speedup\n";
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& c = cost.layers[i];
    out << records[i].spec.name << ' ' << c.conv_mult_cycles << ' ' << c.shift_product_ops
        << ' ' << c.shift_alu_cycles << ' ' << detail::fmt_double(c.speedup) << "\n";
  }
  char line[256];
  std::snprintf(line, sizeof line,
                "total conv_mult_cycles %llu (%.2fM) shift_alu_cycles %llu (%.3fM) "
                "shift_product_ops %llu speedup %.1f\n",
                static_cast<unsigned long long>(cost.conv_mult_cycles),
                static_cast<double>(cost.conv_mult_cycles) / 1e6,
                static_cast<unsigned long long>(cost.shift_alu_cycles),
                static_cast<double>(cost.shift_alu_cycles) / 1e6,
                static_cast<unsigned long long>(cost.shift_product_ops), cost.speedup);
  out << line;
  return kOk;
}

struct HistArgs {
  std::string input, output;
  std::size_t bins = kDefaultHistogramBins;
  double lo = -1.0, hi = 1.0;
};

/// Histogram of normalized weights (each layer normalized by its own
/// max |w|, all layers pooled) or of a normalized tensor file.
inline int cmd_hist(const HistArgs& args, std::ostream& out) {
  Histogram h = make_histogram(args.bins, args.lo, args.hi);
  auto add_all = [&](std::span<const double> values) {
    const Histogram part = weight_histogram(values, args.bins, args.lo, args.hi);
    for (std::size_t i = 0; i < part.bins(); ++i) h.counts[i] += part.counts[i];
    h.total += part.total;
  };
  if (detail::looks_like_tensor(args.input)) {
    add_all(load_float_tensor(args.input).data());
  } else if (detail::is_float_manifest(args.input)) {
    for (const auto& layer : load_float_model(args.input).layers) add_all(layer.weights.data());
  } else {
    for (const auto& layer : load_model(args.input).layers) {
      add_all(dequantize_tensor(layer.weights).data());
    }
  }
  const std::string text = format_histogram(h);
  if (args.output.empty()) {
    out << text;
  } else {
    write_file(args.output, text);
    out << "histogram " << h.bins() << " bins, " << h.total << " samples written to "
        << args.output << "\n";
  }
  return kOk;
}

struct SynthArgs {
  std::string model, input;
  std::optional<std::uint64_t> seed;
  std::size_t channels = 3, size = 8, kernel = 3;
  std::vector<std::size_t> widths{8, 8, 4};
};

inline int cmd_synth(const SynthArgs& args, std::ostream& out) {
  if (!args.seed) throw Error(ErrorKind::invalid_argument, "synth requires an explicit --seed");
  std::mt19937_64 rng(*args.seed);
  SyntheticGeometry g;
  g.channels = args.channels;
  g.height = g.width = args.size;
  g.kernel = args.kernel;
  g.widths = args.widths;
  const FloatModel model = random_float_model(g, rng);
  save_float_model(args.model, model);
  out << "float model with " << model.layers.size() << " layers written to " << args.model
      << "\n";
  if (!args.input.empty()) {
    save_tensor(args.input, random_uniform_tensor({g.channels, g.height, g.width}, -1.0, 1.0, rng));
    out << "input " << format_dims({g.channels, g.height, g.width}) << " written to "
        << args.input << "\n";
  }
  return kOk;
}

inline int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multiplierless power-of-two CNN inference toolkit", "shiftcnn"};
  app.require_subcommand(1);

  QuantizeArgs q;
  auto* quantize = app.add_subcommand("quantize", "Quantize a float model to index form");
  quantize->add_option("input", q.input, "Float model manifest")->required();
  quantize->add_option("output", q.output, "Quantized model manifest to write")->required();
  quantize->add_option("--shifts,-N", q.shifts, "Number of stages N");
  quantize->add_option("--bits,-B", q.bits, "Index bit-width B");

  InferArgs inf;
  auto* infer = app.add_subcommand("infer", "Run a quantized model on an input tensor");
  infer->add_option("model", inf.model, "Quantized model manifest")->required();
  infer->add_option("input", inf.input, "Input tensor (C, H, W)")->required();
  infer->add_option("output", inf.output, "Output tensor to write")->required();
  infer->add_flag("--float-oracle", inf.float_oracle, "Use the floating-point reference path");
  infer->add_flag("--no-requant", inf.no_requant,
                  "Keep activations in floating point (float oracle only)");
  infer->add_option("--workers", inf.workers, "Engine worker threads (0 = all cores)");

  CompareArgs cmp;
  std::uint64_t cmp_seed = 0;
  auto* compare_cmd = app.add_subcommand("compare", "Check engine/oracle equivalence");
  compare_cmd->add_option("model", cmp.model, "Quantized model manifest")->required();
  compare_cmd->add_option("inputs", cmp.inputs, "Input tensors");
  compare_cmd->add_option("--random", cmp.random, "Add this many random inputs");
  auto* cmp_seed_opt = compare_cmd->add_option("--seed", cmp_seed, "Seed for --random");
  compare_cmd->add_option("--bins", cmp.bins, "Divergence histogram bins");
  compare_cmd->add_option("--workers", cmp.workers, "Engine worker threads (0 = all cores)");
  compare_cmd->add_flag("--timing", cmp.timing, "Report per-layer wall time");

  AnalyzeArgs an;
  auto* analyze = app.add_subcommand("analyze", "Complexity of a layer-geometry file");
  analyze->add_option("layers", an.layers, "Layer-geometry file")->required();
  analyze->add_option("--shifts,-N", an.shifts, "Number of stages N");
  analyze->add_option("--bits,-B", an.bits, "Index bit-width B");

  HistArgs hi;
  std::vector<double> range;
  auto* hist = app.add_subcommand("hist", "Histogram of normalized weights");
  hist->add_option("input", hi.input, "Model manifest or tensor file")->required();
  hist->add_option("--bins", hi.bins, "Number of uniform bins");
  hist->add_option("--out", hi.output, "Output file (default: stdout)");
  hist->add_option("--range", range, "Histogram range lo hi")->expected(2);

  SynthArgs sy;
  std::uint64_t sy_seed = 0;
  auto* synth = app.add_subcommand("synth", "Write a random float model (and input)");
  synth->add_option("model", sy.model, "Float model manifest to write")->required();
  synth->add_option("--input", sy.input, "Also write a random input tensor here");
  auto* sy_seed_opt = synth->add_option("--seed", sy_seed, "Random seed")->required();
  synth->add_option("--channels", sy.channels, "Input channels");
  synth->add_option("--size", sy.size, "Input height and width");
  synth->add_option("--kernel", sy.kernel, "Kernel size (odd)");
  synth->add_option("--widths", sy.widths, "Output channels per layer")->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    std::ostringstream o, r;
    const int code = app.exit(e, o, r);
    out << o.str();
    err << r.str();
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*quantize) return cmd_quantize(q, out);
    if (*infer) return cmd_infer(inf, out);
    if (*compare_cmd) {
      if (*cmp_seed_opt) cmp.seed = cmp_seed;
      return cmd_compare(cmp, out);
    }
    if (*analyze) return cmd_analyze(an, out);
    if (*hist) {
      if (range.size() == 2) {
        hi.lo = range[0];
        hi.hi = range[1];
      }
      return cmd_hist(hi, out);
    }
    if (*synth) {
      if (*sy_seed_opt) sy.seed = sy_seed;
      return cmd_synth(sy, out);
    }
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kFormat;
  }
  return kUsage;
}

}  // namespace shiftcnn::cli
