#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "shiftcnn/error.hpp"
#include "shiftcnn/tensor.hpp"

namespace shiftcnn {

/// Signed codeword index. 0 selects the zero codeword; the sign selects the
/// codeword sign; the magnitude selects the power of two within a stage.
using CodewordIndex = std::int8_t;

/// (N, B) pair of a power-of-two codebook.
///
/// Stage n (1-based) holds {0} and +-2^(2 - n - k) for k = 1..max_index(),
/// so the union over all stages holds every +-2^(-j) for j = 0..max_shift()
/// plus zero.
class CodebookConfig {
 public:
  static constexpr int kMaxStages = 16;
  static constexpr int kMaxBits = 8;

  CodebookConfig() : CodebookConfig(2, 4) {}

  /// Throws invalid-config for N outside [1, 16] or B outside [2, 8].
  CodebookConfig(int stages, int bits) : stages_(stages), bits_(bits) {
    if (bits < 2) {
      throw Error(ErrorKind::invalid_config,
                  "unsupported bit-width B=" + std::to_string(bits) +
                      " (binary B=1 codebooks are not supported; need B >= 2)");
    }
    if (bits > kMaxBits) {
      throw Error(ErrorKind::invalid_config,
                  "unsupported bit-width B=" + std::to_string(bits) +
                      " (indices are stored as signed bytes; need B <= 8)");
    }
    if (stages < 1 || stages > kMaxStages) {
      throw Error(ErrorKind::invalid_config,
                  "unsupported stage count N=" + std::to_string(stages) +
                      " (need 1 <= N <= 16)");
    }
  }

  int stages() const noexcept { return stages_; }
  int bits() const noexcept { return bits_; }
  /// M = 2^B - 1 codewords per stage.
  int stage_size() const noexcept { return (1 << bits_) - 1; }
  /// floor(M / 2): largest index magnitude.
  int max_index() const noexcept { return stage_size() / 2; }
  /// P = M + 2(N - 1) distinct values across all stages, zero included.
  int combinations() const noexcept { return stage_size() + 2 * (stages_ - 1); }
  /// floor(P / 2) - 1: deepest right shift of any union codeword.
  int max_shift() const noexcept { return combinations() / 2 - 1; }

  friend bool operator==(const CodebookConfig&, const CodebookConfig&) = default;

 private:
  int stages_;
  int bits_;
};

/// Value of codeword `index` at 1-based `stage`.
inline double decode(int stage, int index) {
  if (index == 0) return 0.0;
  const int magnitude = index < 0 ? -index : index;
  const double v = std::ldexp(1.0, 2 - stage - magnitude);
  return index < 0 ? -v : v;
}

struct Codebook {
  CodebookConfig config;
  /// stages[n - 1] lists C_n ordered by index -max_index..max_index.
  std::vector<std::vector<double>> stages;
  /// Sorted ascending union of all stages, zero included.
  std::vector<double> values;
};

inline Codebook build_codebook(const CodebookConfig& config) {
  Codebook book{config, {}, {}};
  const int max_idx = config.max_index();
  for (int n = 1; n <= config.stages(); ++n) {
    std::vector<double> stage;
    stage.reserve(static_cast<std::size_t>(config.stage_size()));
    for (int idx = -max_idx; idx <= max_idx; ++idx) stage.push_back(decode(n, idx));
    book.values.insert(book.values.end(), stage.begin(), stage.end());
    book.stages.push_back(std::move(stage));
  }
  std::sort(book.values.begin(), book.values.end());
  book.values.erase(std::unique(book.values.begin(), book.values.end()),
                    book.values.end());
  return book;
}

struct StageChoice {
  CodewordIndex index = 0;
  double value = 0.0;
};

/// One stage of the greedy power-of-two quantizer.
///
/// Picks the power of two 2^q nearest to |residual| in the log domain with
/// the rounding threshold at 1.5 * 2^floor(log2|r|) (strictly above rounds
/// up), then maps it to a stage index; an index beyond max_index() yields
/// the zero codeword. The comparison is done exactly via frexp/ldexp.
inline StageChoice quantize_stage(double residual, int stage,
                                  const CodebookConfig& config) {
  if (residual == 0.0) return {};
  const double magnitude = std::abs(residual);
  int e = 0;
  std::frexp(magnitude, &e);
  int exponent = e - 1;  // floor(log2 |r|)
  if (magnitude > std::ldexp(1.5, exponent)) ++exponent;

  const int index_magnitude = 2 - stage - exponent;
  if (index_magnitude > config.max_index()) return {};
  if (index_magnitude < 1) {
    throw Error(ErrorKind::domain_error,
                "residual " + std::to_string(residual) +
                    " exceeds the largest codeword of stage " +
                    std::to_string(stage));
  }
  const bool negative = residual < 0.0;
  const double value = std::ldexp(negative ? -1.0 : 1.0, exponent);
  return {static_cast<CodewordIndex>(negative ? -index_magnitude : index_magnitude),
          value};
}

struct ScalarQuantization {
  std::vector<CodewordIndex> indices;  // one per stage
  double reconstruction = 0.0;         // sum of the chosen codewords
};

/// Greedy N-stage quantization of a normalized weight r in [-1, 1].
/// Each stage quantizes the residual left by the previous ones; a zero
/// residual zeroes every remaining stage.
inline void quantize_scalar_into(double r, const CodebookConfig& config,
                                 std::span<CodewordIndex> indices,
                                 double& reconstruction) {
  if (!std::isfinite(r) || std::abs(r) > 1.0) {
    throw Error(ErrorKind::domain_error,
                "normalized weight must be finite and in [-1, 1], got " +
                    std::to_string(r));
  }
  double residual = r;
  double sum = 0.0;
  for (int n = 1; n <= config.stages(); ++n) {
    const StageChoice choice = quantize_stage(residual, n, config);
    indices[static_cast<std::size_t>(n - 1)] = choice.index;
    residual -= choice.value;
    sum += choice.value;
  }
  reconstruction = sum;
}

inline ScalarQuantization quantize_scalar(double r, const CodebookConfig& config) {
  ScalarQuantization out;
  out.indices.assign(static_cast<std::size_t>(config.stages()), 0);
  quantize_scalar_into(r, config, out.indices, out.reconstruction);
  return out;
}

/// Weight tensor in index form. Indices are laid out weight-major with the
/// N stage indices of each weight contiguous.
struct QuantizedWeightTensor {
  std::vector<std::size_t> dims;
  std::vector<CodewordIndex> indices;
  double scale = 0.0;  // max |W| of the source tensor
  CodebookConfig config;

  std::size_t weight_count() const {
    return Tensor<double>::element_count(dims);
  }

  std::span<const CodewordIndex> weight_indices(std::size_t i) const {
    const auto n = static_cast<std::size_t>(config.stages());
    return std::span<const CodewordIndex>(indices).subspan(i * n, n);
  }

  /// Normalized reconstruction: sum over stages of decode(n, idx).
  double normalized(std::size_t i) const {
    double sum = 0.0;
    const auto idx = weight_indices(i);
    for (std::size_t n = 0; n < idx.size(); ++n) {
      sum += decode(static_cast<int>(n) + 1, idx[n]);
    }
    return sum;
  }

  /// Throws index-out-of-range if any index magnitude exceeds max_index(),
  /// shape-mismatch if the index count disagrees with the dims.
  void validate() const {
    if (indices.size() != weight_count() * static_cast<std::size_t>(config.stages())) {
      throw Error(ErrorKind::shape_mismatch,
                  "index count does not match weight shape " + format_dims(dims));
    }
    const int limit = config.max_index();
    for (std::size_t i = 0; i < indices.size(); ++i) {
      const int idx = indices[i];
      if (idx > limit || idx < -limit) {
        throw Error(ErrorKind::index_out_of_range,
                    "index " + std::to_string(idx) + " at position " +
                        std::to_string(i) + " exceeds +-" + std::to_string(limit));
      }
    }
    if (!(scale >= 0.0) || !std::isfinite(scale)) {
      throw Error(ErrorKind::domain_error, "scale must be finite and nonnegative");
    }
  }

  friend bool operator==(const QuantizedWeightTensor&,
                         const QuantizedWeightTensor&) = default;
};

/// Normalizes by max|W| and quantizes every entry.
inline QuantizedWeightTensor quantize_tensor(const FloatTensor& weights,
                                             const CodebookConfig& config) {
  if (weights.empty()) throw Error(ErrorKind::empty_tensor, "weight tensor is empty");
  require_finite(weights.data(), "weight tensor");

  QuantizedWeightTensor q;
  q.dims = weights.dims();
  q.config = config;
  const auto stages = static_cast<std::size_t>(config.stages());
  q.indices.assign(weights.size() * stages, 0);

  double scale = 0.0;
  for (double w : weights.data()) scale = std::max(scale, std::abs(w));
  q.scale = scale;
  if (scale == 0.0) return q;

  double ignored = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    quantize_scalar_into(weights[i] / scale, config,
                         std::span<CodewordIndex>(q.indices).subspan(i * stages, stages),
                         ignored);
  }
  return q;
}

inline FloatTensor dequantize_tensor(const QuantizedWeightTensor& q) {
  std::vector<double> out(q.weight_count());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = q.scale * q.normalized(i);
  return FloatTensor(q.dims, std::move(out));
}

/// Mean squared error between normalized weights and their reconstruction.
inline double empirical_distortion(const FloatTensor& weights,
                                   const CodebookConfig& config) {
  const QuantizedWeightTensor q = quantize_tensor(weights, config);
  if (q.scale == 0.0) return 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const double err = weights[i] / q.scale - q.normalized(i);
    total += err * err;
  }
  return total / static_cast<double>(weights.size());
}

}  // namespace shiftcnn
