#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "shiftcnn/codebook.hpp"
#include "shiftcnn/error.hpp"
#include "shiftcnn/tensor.hpp"

namespace shiftcnn {

// ---------------------------------------------------------------------------
// Complexity accounting

struct LayerCost {
  std::uint64_t conv_mult_cycles = 0;   // C~ * H~ * W~ * C * Hf * Wf
  std::uint64_t shift_product_ops = 0;  // P * C * H * W
  std::uint64_t shift_alu_cycles = 0;   // C * H * W
  double speedup = 0.0;                 // conv_mult_cycles / shift_alu_cycles

  friend bool operator==(const LayerCost&, const LayerCost&) = default;
};

inline LayerCost layer_cost(const LayerSpec& spec, const CodebookConfig& config) {
  spec.validate();
  LayerCost cost;
  const std::uint64_t input_volume = spec.in_channels * spec.in_h * spec.in_w;
  cost.conv_mult_cycles = static_cast<std::uint64_t>(spec.out_channels) * spec.out_h() *
                          spec.out_w() * spec.in_channels * spec.kernel_h * spec.kernel_w;
  cost.shift_alu_cycles = input_volume;
  cost.shift_product_ops = static_cast<std::uint64_t>(config.combinations()) * input_volume;
  cost.speedup = static_cast<double>(cost.conv_mult_cycles) /
                 static_cast<double>(cost.shift_alu_cycles);
  return cost;
}

/// One line of a layer-geometry file. Layers naming the same `input`
/// tensor read the same activations and share one precompute pass.
struct LayerRecord {
  LayerSpec spec;
  std::string input;  // empty: the layer has its own input tensor
};

struct ModelCost {
  std::vector<LayerCost> layers;
  std::uint64_t conv_mult_cycles = 0;
  std::uint64_t shift_product_ops = 0;
  std::uint64_t shift_alu_cycles = 0;
  double speedup = 0.0;
};

/// Sums layer costs. ShiftALU cycles are counted once per distinct input
/// tensor, since every consumer of a tensor reads the same precomputed
/// terms.
inline ModelCost model_cost(const std::vector<LayerRecord>& records,
                            const CodebookConfig& config) {
  if (records.empty()) throw Error(ErrorKind::invalid_argument, "empty layer list");
  ModelCost total;
  std::set<std::string> seen;
  for (const auto& record : records) {
    const LayerCost cost = layer_cost(record.spec, config);
    total.layers.push_back(cost);
    total.conv_mult_cycles += cost.conv_mult_cycles;
    if (record.input.empty() || seen.insert(record.input).second) {
      total.shift_alu_cycles += cost.shift_alu_cycles;
    }
  }
  total.shift_product_ops =
      static_cast<std::uint64_t>(config.combinations()) * total.shift_alu_cycles;
  total.speedup = static_cast<double>(total.conv_mult_cycles) /
                  static_cast<double>(total.shift_alu_cycles);
  return total;
}

/// Parses whitespace-delimited records
///   name C C~ Hf Wf H W stride pad [input]
/// Blank lines and text after '#' are ignored. Errors carry line numbers.
inline std::vector<LayerRecord> parse_layer_file(std::istream& in) {
  std::vector<LayerRecord> records;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream fields(line);
    std::vector<std::string> tokens;
    for (std::string tok; fields >> tok;) tokens.push_back(tok);
    if (tokens.empty()) continue;

    auto fail = [&](const std::string& why) {
      throw Error(ErrorKind::parse_error, "line " + std::to_string(line_no) + ": " + why);
    };
    if (tokens.size() != 9 && tokens.size() != 10) {
      fail("expected 9 or 10 fields (name C C~ Hf Wf H W stride pad [input]), got " +
           std::to_string(tokens.size()));
    }
    std::size_t values[8] = {};
    for (std::size_t i = 0; i < 8; ++i) {
      const std::string& tok = tokens[i + 1];
      std::size_t used = 0;
      unsigned long long v = 0;
      try {
        v = std::stoull(tok, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != tok.size() || tok.empty() || tok[0] == '-') {
        fail("field " + std::to_string(i + 2) + " ('" + tok + "') is not a nonnegative integer");
      }
      values[i] = static_cast<std::size_t>(v);
    }
    LayerRecord record;
    record.spec.name = tokens[0];
    record.spec.in_channels = values[0];
    record.spec.out_channels = values[1];
    record.spec.kernel_h = values[2];
    record.spec.kernel_w = values[3];
    record.spec.in_h = values[4];
    record.spec.in_w = values[5];
    record.spec.stride = values[6];
    record.spec.padding = values[7];
    if (tokens.size() == 10) record.input = tokens[9];
    try {
      record.spec.validate();
    } catch (const Error& e) {
      fail(e.what());
    }
    records.push_back(std::move(record));
  }
  if (records.empty()) throw Error(ErrorKind::parse_error, "no layer records");
  return records;
}

// ---------------------------------------------------------------------------
// Histograms

struct Histogram {
  std::vector<double> edges;  // bins + 1, strictly increasing
  std::vector<std::uint64_t> counts;
  std::uint64_t total = 0;

  std::size_t bins() const noexcept { return counts.size(); }
  double center(std::size_t i) const { return 0.5 * (edges[i] + edges[i + 1]); }
};

inline Histogram make_histogram(std::size_t bins, double lo, double hi) {
  if (bins < 2) throw Error(ErrorKind::invalid_argument, "need at least 2 bins");
  if (!(lo < hi) || !std::isfinite(lo) || !std::isfinite(hi)) {
    throw Error(ErrorKind::invalid_argument, "histogram range must satisfy lo < hi");
  }
  Histogram h;
  h.edges.resize(bins + 1);
  const double width = (hi - lo) / static_cast<double>(bins);
  for (std::size_t i = 0; i <= bins; ++i) h.edges[i] = lo + width * static_cast<double>(i);
  h.edges[bins] = hi;
  h.counts.assign(bins, 0);
  return h;
}

/// Adds one sample. Bin i covers [edges[i], edges[i+1]); the last bin also
/// takes hi. Samples outside the range go to the nearest edge bin;
/// non-finite samples are skipped.
inline void histogram_add(Histogram& h, double v) {
  if (!std::isfinite(v)) return;
  const std::size_t bins = h.bins();
  const double lo = h.edges.front(), hi = h.edges.back();
  std::size_t bin = 0;
  if (v >= hi) {
    bin = bins - 1;
  } else if (v > lo) {
    const double guess = std::floor((v - lo) / (hi - lo) * static_cast<double>(bins));
    bin = std::min(static_cast<std::size_t>(std::max(guess, 0.0)), bins - 1);
    // Settle floating-point disagreement against the stored edges.
    while (bin > 0 && v < h.edges[bin]) --bin;
    while (bin + 1 < bins && v >= h.edges[bin + 1]) ++bin;
  }
  ++h.counts[bin];
  ++h.total;
}

inline constexpr std::size_t kDefaultHistogramBins = 101;

/// Histogram of w / max|w|; an all-zero tensor maps every sample to 0.
inline Histogram weight_histogram(std::span<const double> weights,
                                  std::size_t bins = kDefaultHistogramBins, double lo = -1.0,
                                  double hi = 1.0) {
  if (weights.empty()) throw Error(ErrorKind::empty_tensor, "no weights to histogram");
  Histogram h = make_histogram(bins, lo, hi);
  double scale = 0.0;
  for (double w : weights) {
    if (std::isfinite(w)) scale = std::max(scale, std::abs(w));
  }
  for (double w : weights) histogram_add(h, scale == 0.0 ? 0.0 * w : w / scale);
  return h;
}

/// Two-column text: bin center, count.
inline std::string format_histogram(const Histogram& h) {
  std::ostringstream out;
  out.precision(9);
  for (std::size_t i = 0; i < h.bins(); ++i) out << h.center(i) << ' ' << h.counts[i] << '\n';
  return out.str();
}

// ---------------------------------------------------------------------------
// Output divergence

struct DivergenceReport {
  Histogram histogram;
  double mean = 0.0;      // bias of (a - b)
  double variance = 0.0;  // population variance of (a - b)
  double max_abs = 0.0;
  std::uint64_t count = 0;

  double stddev() const { return std::sqrt(variance); }
};

/// Elementwise (a - b) over paired outputs. The histogram range is
/// [-m, m] with m the largest |a - b| (1 when all differences are 0)
/// unless `range` > 0 is given.
inline DivergenceReport divergence(const std::vector<FloatTensor>& outputs_a,
                                   const std::vector<FloatTensor>& outputs_b,
                                   std::size_t bins = kDefaultHistogramBins,
                                   double range = 0.0) {
  if (outputs_a.size() != outputs_b.size()) {
    throw Error(ErrorKind::shape_mismatch, "output sets differ in length");
  }
  std::vector<double> diffs;
  for (std::size_t i = 0; i < outputs_a.size(); ++i) {
    if (outputs_a[i].dims() != outputs_b[i].dims()) {
      throw Error(ErrorKind::shape_mismatch,
                  "shape mismatch: " + format_dims(outputs_a[i].dims()) + " vs " +
                      format_dims(outputs_b[i].dims()));
    }
    for (std::size_t k = 0; k < outputs_a[i].size(); ++k) {
      diffs.push_back(outputs_a[i][k] - outputs_b[i][k]);
    }
  }
  if (diffs.empty()) throw Error(ErrorKind::empty_tensor, "no outputs to compare");

  DivergenceReport report;
  report.count = diffs.size();
  double sum = 0.0;
  for (double d : diffs) {
    sum += d;
    report.max_abs = std::max(report.max_abs, std::abs(d));
  }
  report.mean = sum / static_cast<double>(diffs.size());
  double sq = 0.0;
  for (double d : diffs) sq += (d - report.mean) * (d - report.mean);
  report.variance = sq / static_cast<double>(diffs.size());

  const double m = range > 0.0 ? range : (report.max_abs > 0.0 ? report.max_abs : 1.0);
  report.histogram = make_histogram(bins, -m, m);
  for (double d : diffs) histogram_add(report.histogram, d);
  return report;
}

/// Runs both networks on every input and reports the divergence of their
/// outputs. Networks are callables Input -> FloatTensor.
template <typename NetA, typename NetB, typename Input>
DivergenceReport output_divergence(NetA&& net_a, NetB&& net_b,
                                   const std::vector<Input>& inputs,
                                   std::size_t bins = kDefaultHistogramBins,
                                   double range = 0.0) {
  if (inputs.empty()) throw Error(ErrorKind::invalid_argument, "no inputs");
  std::vector<FloatTensor> a, b;
  a.reserve(inputs.size());
  b.reserve(inputs.size());
  for (const auto& x : inputs) {
    a.push_back(net_a(x));
    b.push_back(net_b(x));
  }
  return divergence(a, b, bins, range);
}

}  // namespace shiftcnn
