#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "shiftcnn/codebook.hpp"
#include "shiftcnn/error.hpp"
#include "shiftcnn/io.hpp"
#include "shiftcnn/tensor.hpp"

namespace shiftcnn {

/// Operation tallies. The shift engine only ever bumps shifts, sign flips
/// and additions; `datapath_multiplies` stays zero by construction and is
/// reported so callers can assert it. The float reference counts its
/// multiplies separately.
struct OpCounters {
  std::uint64_t shifts = 0;
  std::uint64_t sign_flips = 0;
  std::uint64_t additions = 0;
  std::uint64_t datapath_multiplies = 0;
  std::uint64_t reference_multiplies = 0;
  std::uint64_t precompute_builds = 0;

  OpCounters& operator+=(const OpCounters& o) {
    shifts += o.shifts;
    sign_flips += o.sign_flips;
    additions += o.additions;
    datapath_multiplies += o.datapath_multiplies;
    reference_multiplies += o.reference_multiplies;
    precompute_builds += o.precompute_builds;
    return *this;
  }

  friend bool operator==(const OpCounters&, const OpCounters&) = default;
};

/// Largest shift count the 16-bit term width admits for 8-bit inputs.
inline constexpr int kMaxDatapathShift = 8;
inline constexpr int kMaxInputMagnitude = 127;

inline void check_datapath(const CodebookConfig& config) {
  if (config.max_shift() > kMaxDatapathShift) {
    throw Error(ErrorKind::invalid_config,
                "codebook (N=" + std::to_string(config.stages()) +
                    ", B=" + std::to_string(config.bits()) + ") needs " +
                    std::to_string(config.max_shift()) +
                    " shifts; the 16-bit datapath allows at most 8");
  }
}

/// The (P-1) x C matrix of nonzero products of one input column with every
/// union codeword.
///
/// Row k (0 <= k <= K) holds x * 2^(K-k), the term for codeword +2^-k; row
/// K+1+k holds its negation. The real value of an entry is entry * 2^(e_in - K).
class PrecomputeBuffer {
 public:
  PrecomputeBuffer() = default;

  PrecomputeBuffer(const CodebookConfig& config, std::size_t channels)
      : max_shift_(config.max_shift()),
        channels_(channels),
        // One trailing zero slot doubles as the multiplexer's zero input.
        entries_(static_cast<std::size_t>(2 * (config.max_shift() + 1)) * channels + 1, 0) {}

  int max_shift() const noexcept { return max_shift_; }
  std::size_t channels() const noexcept { return channels_; }
  std::size_t rows() const noexcept { return static_cast<std::size_t>(2 * (max_shift_ + 1)); }

  std::span<const std::int16_t> row(std::size_t r) const {
    return std::span<const std::int16_t>(entries_).subspan(r * channels_, channels_);
  }
  std::int16_t term(std::size_t r, std::size_t c) const { return entries_[r * channels_ + c]; }

  /// Row holding the product with codeword `index` of `stage`, or nullopt
  /// for the zero codeword.
  static std::optional<std::size_t> row_for(int stage, int index, int max_shift) {
    if (index == 0) return std::nullopt;
    const int k = stage + (index < 0 ? -index : index) - 2;  // codeword is +-2^-k
    return static_cast<std::size_t>(index > 0 ? k : max_shift + 1 + k);
  }

  /// Offset of the zero slot used for index 0.
  std::size_t zero_slot() const noexcept { return entries_.size() - 1; }

  std::span<const std::int16_t> raw() const noexcept { return entries_; }
  std::span<std::int16_t> raw_mut() noexcept { return entries_; }

 private:
  int max_shift_ = 0;
  std::size_t channels_ = 0;
  std::vector<std::int16_t> entries_;
};

/// ShiftALU: fills `buffer` from one input column using K shift-by-one
/// steps and K+1 sign flips per element.
inline void precompute_terms_into(std::span<const std::int16_t> column,
                                  PrecomputeBuffer& buffer, OpCounters& ops) {
  const int K = buffer.max_shift();
  const std::size_t C = buffer.channels();
  auto entries = buffer.raw_mut();
  for (std::size_t c = 0; c < C; ++c) {
    const int x = column[c];
    if (x > kMaxInputMagnitude || x < -kMaxInputMagnitude) {
      throw Error(ErrorKind::input_width_exceeded,
                  "input value " + std::to_string(x) + " does not fit in 8 bits");
    }
    int v = x;
    entries[static_cast<std::size_t>(K) * C + c] = static_cast<std::int16_t>(v);
    for (int k = K - 1; k >= 0; --k) {
      v <<= 1;
      entries[static_cast<std::size_t>(k) * C + c] = static_cast<std::int16_t>(v);
    }
    for (int k = 0; k <= K; ++k) {
      const std::size_t src = static_cast<std::size_t>(k) * C + c;
      entries[static_cast<std::size_t>(K + 1 + k) * C + c] =
          static_cast<std::int16_t>(-entries[src]);
    }
  }
  ops.shifts += static_cast<std::uint64_t>(K) * C;
  ops.sign_flips += static_cast<std::uint64_t>(K + 1) * C;
  ops.precompute_builds += 1;
}

inline PrecomputeBuffer precompute_terms(std::span<const std::int16_t> column,
                                         const CodebookConfig& config,
                                         OpCounters* ops = nullptr) {
  check_datapath(config);
  PrecomputeBuffer buffer(config, column.size());
  OpCounters local;
  precompute_terms_into(column, buffer, local);
  if (ops) *ops += local;
  return buffer;
}

/// Integer partial sums of a layer, shaped (C~, H~, W~). Real value is
/// value * 2^exponent * weight scale.
struct AccumulatorPlane {
  std::vector<std::size_t> dims;
  std::vector<std::int32_t> values;
  int exponent = 0;

  friend bool operator==(const AccumulatorPlane&, const AccumulatorPlane&) = default;
};

struct EngineOptions {
  /// Worker threads; 0 uses std::thread::hardware_concurrency().
  unsigned workers = 1;
};

namespace detail {

inline unsigned resolve_workers(unsigned requested) {
  if (requested != 0) return requested;
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : hw;
}

/// Runs fn(begin, end, worker) over [0, count) split into contiguous chunks.
template <typename Fn>
void parallel_chunks(unsigned workers, std::size_t count, Fn&& fn) {
  workers = static_cast<unsigned>(std::min<std::size_t>(workers, count));
  if (workers <= 1) {
    if (count) fn(std::size_t{0}, count, 0u);
    return;
  }
  std::vector<std::jthread> pool;
  pool.reserve(workers);
  std::vector<std::exception_ptr> errors(workers);
  for (unsigned t = 0; t < workers; ++t) {
    const std::size_t begin = count * t / workers;
    const std::size_t end = count * (t + 1) / workers;
    pool.emplace_back([&, begin, end, t] {
      try {
        fn(begin, end, t);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  pool.clear();  // joins
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

/// Multiplexer control: for every (c~, n, hf, wf, c) the buffer offset
/// of the selected term (or the zero slot).
struct SelectTable {
  std::size_t taps = 0;  // N * Hf * Wf
  std::size_t channels = 0;
  std::vector<std::uint32_t> offsets;  // [c~][n][hf][wf][c]

  std::span<const std::uint32_t> tap(std::size_t oc, std::size_t n, std::size_t hf,
                                     std::size_t wf, std::size_t kh, std::size_t kw) const {
    const std::size_t t = ((oc * (taps / (kh * kw)) + n) * kh + hf) * kw + wf;
    return std::span<const std::uint32_t>(offsets).subspan(t * channels, channels);
  }
};

inline SelectTable build_select_table(const QuantizedWeightTensor& q, const LayerSpec& spec,
                                      std::size_t zero_slot) {
  const int N = q.config.stages();
  const int K = q.config.max_shift();
  const std::size_t C = spec.in_channels;
  SelectTable table;
  table.taps = static_cast<std::size_t>(N) * spec.kernel_h * spec.kernel_w;
  table.channels = C;
  table.offsets.resize(spec.out_channels * table.taps * C);
  std::size_t out = 0;
  for (std::size_t oc = 0; oc < spec.out_channels; ++oc) {
    for (int n = 0; n < N; ++n) {
      for (std::size_t hf = 0; hf < spec.kernel_h; ++hf) {
        for (std::size_t wf = 0; wf < spec.kernel_w; ++wf) {
          for (std::size_t c = 0; c < C; ++c) {
            const std::size_t weight = ((oc * C + c) * spec.kernel_h + hf) * spec.kernel_w + wf;
            const auto idx = q.weight_indices(weight)[static_cast<std::size_t>(n)];
            const auto row = PrecomputeBuffer::row_for(n + 1, idx, K);
            table.offsets[out++] =
                static_cast<std::uint32_t>(row ? *row * C + c : zero_slot);
          }
        }
      }
    }
  }
  return table;
}

inline std::int64_t select_and_sum(const PrecomputeBuffer& buffer,
                                   std::span<const std::uint32_t> offsets) {
  const auto entries = buffer.raw();
  std::int64_t sum = 0;
  for (std::uint32_t off : offsets) sum += entries[off];
  return sum;
}

inline void checked_accumulate(std::int32_t& acc, std::int64_t value) {
  const std::int64_t next = static_cast<std::int64_t>(acc) + value;
  if (next > std::numeric_limits<std::int32_t>::max() ||
      next < std::numeric_limits<std::int32_t>::min()) {
    throw Error(ErrorKind::accumulator_overflow,
                "partial sum " + std::to_string(next) + " exceeds 32 bits");
  }
  acc = static_cast<std::int32_t>(next);
}

inline void check_layer_operands(const FixedPointTensor& input, const QuantizedWeightTensor& q,
                                 std::span<const double> bias, const LayerSpec& spec) {
  spec.validate();
  if (input.dims() != spec.input_dims()) {
    throw Error(ErrorKind::shape_mismatch,
                "shape mismatch: input " + format_dims(input.dims()) + " vs layer '" +
                    spec.name + "' expecting " + format_dims(spec.input_dims()));
  }
  if (q.dims != spec.weight_dims()) {
    throw Error(ErrorKind::shape_mismatch,
                "shape mismatch: weights " + format_dims(q.dims) + " vs layer '" +
                    spec.name + "' expecting " + format_dims(spec.weight_dims()));
  }
  if (bias.size() != spec.out_channels) {
    throw Error(ErrorKind::shape_mismatch,
                "shape mismatch: bias length " + std::to_string(bias.size()) +
                    " vs output channels " + std::to_string(spec.out_channels));
  }
  q.validate();
  check_datapath(q.config);
}

inline std::vector<std::int16_t> input_column(const FixedPointTensor& x, std::size_t h,
                                              std::size_t w) {
  const std::size_t C = x.dims()[0];
  std::vector<std::int16_t> column(C);
  for (std::size_t c = 0; c < C; ++c) column[c] = x.stored.at(c, h, w);
  return column;
}

}  // namespace detail

/// Input-stationary scheduling: each input column is precomputed once and
/// its selected terms are added into every output position whose receptive
/// field contains it.
inline AccumulatorPlane accumulate_scatter(const FixedPointTensor& input,
                                           const QuantizedWeightTensor& q,
                                           const LayerSpec& spec,
                                           const EngineOptions& options = {},
                                           OpCounters* ops = nullptr) {
  detail::check_layer_operands(input, q, std::vector<double>(spec.out_channels), spec);
  const std::size_t C = spec.in_channels, H = spec.in_h, W = spec.in_w;
  const std::size_t OC = spec.out_channels, OH = spec.out_h(), OW = spec.out_w();
  const std::size_t KH = spec.kernel_h, KW = spec.kernel_w;
  const auto N = static_cast<std::size_t>(q.config.stages());
  const unsigned workers = detail::resolve_workers(options.workers);

  AccumulatorPlane plane{spec.output_dims(), std::vector<std::int32_t>(OC * OH * OW, 0),
                         input.exponent - q.config.max_shift()};

  std::vector<PrecomputeBuffer> row_buffers(W, PrecomputeBuffer(q.config, C));
  const auto select = detail::build_select_table(q, spec, row_buffers[0].zero_slot());
  std::vector<OpCounters> local(workers);

  for (std::size_t h = 0; h < H; ++h) {
    detail::parallel_chunks(workers, W, [&](std::size_t begin, std::size_t end, unsigned t) {
      for (std::size_t w = begin; w < end; ++w) {
        const auto column = detail::input_column(input, h, w);
        precompute_terms_into(column, row_buffers[w], local[t]);
      }
    });

    detail::parallel_chunks(workers, OC, [&](std::size_t oc_begin, std::size_t oc_end, unsigned t) {
      OpCounters& counters = local[t];
      for (std::size_t w = 0; w < W; ++w) {
        const PrecomputeBuffer& buffer = row_buffers[w];
        for (std::size_t hf = 0; hf < KH; ++hf) {
          const std::ptrdiff_t oh_num = static_cast<std::ptrdiff_t>(h + spec.padding) -
                                        static_cast<std::ptrdiff_t>(hf);
          if (oh_num < 0 || oh_num % static_cast<std::ptrdiff_t>(spec.stride) != 0) continue;
          const auto oh = static_cast<std::size_t>(oh_num) / spec.stride;
          if (oh >= OH) continue;
          for (std::size_t wf = 0; wf < KW; ++wf) {
            const std::ptrdiff_t ow_num = static_cast<std::ptrdiff_t>(w + spec.padding) -
                                          static_cast<std::ptrdiff_t>(wf);
            if (ow_num < 0 || ow_num % static_cast<std::ptrdiff_t>(spec.stride) != 0) continue;
            const auto ow = static_cast<std::size_t>(ow_num) / spec.stride;
            if (ow >= OW) continue;
            for (std::size_t oc = oc_begin; oc < oc_end; ++oc) {
              std::int32_t& acc = plane.values[(oc * OH + oh) * OW + ow];
              for (std::size_t n = 0; n < N; ++n) {
                const auto sum = detail::select_and_sum(buffer, select.tap(oc, n, hf, wf, KH, KW));
                detail::checked_accumulate(acc, sum);
                counters.additions += C;
              }
            }
          }
        }
      }
    });
  }

  if (ops) {
    for (const auto& c : local) *ops += c;
  }
  return plane;
}

/// Output-stationary re-derivation of the same accumulators: every input
/// column is precomputed up front, then each output position gathers its
/// receptive field. Used to cross-check the scatter schedule.
inline AccumulatorPlane accumulate_gather(const FixedPointTensor& input,
                                          const QuantizedWeightTensor& q,
                                          const LayerSpec& spec, OpCounters* ops = nullptr) {
  detail::check_layer_operands(input, q, std::vector<double>(spec.out_channels), spec);
  const std::size_t C = spec.in_channels, H = spec.in_h, W = spec.in_w;
  const std::size_t OC = spec.out_channels, OH = spec.out_h(), OW = spec.out_w();
  const std::size_t KH = spec.kernel_h, KW = spec.kernel_w;
  const auto N = static_cast<std::size_t>(q.config.stages());

  OpCounters local;
  std::vector<PrecomputeBuffer> buffers(H * W, PrecomputeBuffer(q.config, C));
  for (std::size_t h = 0; h < H; ++h) {
    for (std::size_t w = 0; w < W; ++w) {
      precompute_terms_into(detail::input_column(input, h, w), buffers[h * W + w], local);
    }
  }
  const auto select = detail::build_select_table(q, spec, buffers[0].zero_slot());

  AccumulatorPlane plane{spec.output_dims(), std::vector<std::int32_t>(OC * OH * OW, 0),
                         input.exponent - q.config.max_shift()};
  for (std::size_t oc = 0; oc < OC; ++oc) {
    for (std::size_t oh = 0; oh < OH; ++oh) {
      for (std::size_t ow = 0; ow < OW; ++ow) {
        std::int32_t& acc = plane.values[(oc * OH + oh) * OW + ow];
        for (std::size_t n = 0; n < N; ++n) {
          for (std::size_t hf = 0; hf < KH; ++hf) {
            const auto ih = static_cast<std::ptrdiff_t>(oh * spec.stride + hf) -
                            static_cast<std::ptrdiff_t>(spec.padding);
            if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) continue;
            for (std::size_t wf = 0; wf < KW; ++wf) {
              const auto iw = static_cast<std::ptrdiff_t>(ow * spec.stride + wf) -
                              static_cast<std::ptrdiff_t>(spec.padding);
              if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(W)) continue;
              const auto& buffer = buffers[static_cast<std::size_t>(ih) * W +
                                           static_cast<std::size_t>(iw)];
              detail::checked_accumulate(
                  acc, detail::select_and_sum(buffer, select.tap(oc, n, hf, wf, KH, KW)));
              local.additions += C;
            }
          }
        }
      }
    }
  }
  if (ops) *ops += local;
  return plane;
}

/// Applies 2^exponent, the weight scale and the bias. Runs after the
/// shift/add datapath, so its multiplies are not datapath operations.
inline FloatTensor finalize(const AccumulatorPlane& plane, double scale,
                            std::span<const double> bias) {
  const std::size_t OC = plane.dims[0];
  const std::size_t plane_size = plane.values.size() / OC;
  std::vector<double> out(plane.values.size());
  for (std::size_t oc = 0; oc < OC; ++oc) {
    for (std::size_t i = 0; i < plane_size; ++i) {
      const std::size_t k = oc * plane_size + i;
      out[k] = std::ldexp(static_cast<double>(plane.values[k]), plane.exponent) * scale +
               bias[oc];
    }
  }
  return FloatTensor(plane.dims, std::move(out));
}

/// Multiplierless convolution of a fixed-point input with index-form
/// weights.
inline FloatTensor conv_layer_shift(const FixedPointTensor& input,
                                    const QuantizedWeightTensor& q,
                                    std::span<const double> bias, const LayerSpec& spec,
                                    const EngineOptions& options = {},
                                    OpCounters* ops = nullptr) {
  detail::check_layer_operands(input, q, bias, spec);
  return finalize(accumulate_scatter(input, q, spec, options, ops), q.scale, bias);
}

/// Direct cross-correlation with zero padding; per output element the
/// products are summed in (c, hf, wf) order starting from 0, then the bias
/// is added.
inline FloatTensor conv_layer_reference(const FloatTensor& input, const FloatTensor& weights,
                                        std::span<const double> bias, const LayerSpec& spec,
                                        OpCounters* ops = nullptr) {
  spec.validate();
  if (input.dims() != spec.input_dims() || weights.dims() != spec.weight_dims() ||
      bias.size() != spec.out_channels) {
    throw Error(ErrorKind::shape_mismatch,
                "shape mismatch: layer '" + spec.name + "' expects input " +
                    format_dims(spec.input_dims()) + " and weights " +
                    format_dims(spec.weight_dims()) + ", got " + format_dims(input.dims()) +
                    " and " + format_dims(weights.dims()));
  }
  const auto H = static_cast<std::ptrdiff_t>(spec.in_h);
  const auto W = static_cast<std::ptrdiff_t>(spec.in_w);
  FloatTensor out(spec.output_dims());
  std::uint64_t multiplies = 0;
  for (std::size_t oc = 0; oc < spec.out_channels; ++oc) {
    for (std::size_t oh = 0; oh < spec.out_h(); ++oh) {
      for (std::size_t ow = 0; ow < spec.out_w(); ++ow) {
        double acc = 0.0;
        for (std::size_t c = 0; c < spec.in_channels; ++c) {
          for (std::size_t hf = 0; hf < spec.kernel_h; ++hf) {
            const auto ih = static_cast<std::ptrdiff_t>(oh * spec.stride + hf) -
                            static_cast<std::ptrdiff_t>(spec.padding);
            if (ih < 0 || ih >= H) continue;
            for (std::size_t wf = 0; wf < spec.kernel_w; ++wf) {
              const auto iw = static_cast<std::ptrdiff_t>(ow * spec.stride + wf) -
                              static_cast<std::ptrdiff_t>(spec.padding);
              if (iw < 0 || iw >= W) continue;
              acc += input.at(c, static_cast<std::size_t>(ih), static_cast<std::size_t>(iw)) *
                     weights.at(oc, c, hf, wf);
              ++multiplies;
            }
          }
        }
        out.at(oc, oh, ow) = acc + bias[oc];
      }
    }
  }
  if (ops) ops->reference_multiplies += multiplies;
  return out;
}

// ---------------------------------------------------------------------------
// Networks

struct NetworkOptions {
  /// Re-quantize activations to `activation_bits` dynamic fixed point
  /// before every layer. Required by the shift engine.
  bool requantize = true;
  /// Run the floating-point reference on dequantized weights instead of
  /// the shift engine.
  bool float_oracle = false;
  int activation_bits = 8;
  EngineOptions engine{};
};

inline void relu_in_place(FloatTensor& t) {
  for (double& v : t.data()) v = v > 0.0 ? v : 0.0;
}

namespace detail {

template <typename Layers>
void check_chain(const Layers& layers, const std::vector<std::size_t>& input_dims) {
  if (layers.empty()) throw Error(ErrorKind::shape_mismatch, "model has no layers");
  std::vector<std::size_t> dims = input_dims;
  for (const auto& layer : layers) {
    if (dims != layer.spec.input_dims()) {
      throw Error(ErrorKind::shape_mismatch,
                  "shape mismatch: layer '" + layer.spec.name + "' expects " +
                      format_dims(layer.spec.input_dims()) + ", receives " +
                      format_dims(dims));
    }
    dims = layer.spec.output_dims();
  }
}

}  // namespace detail

namespace detail {

// `first` overrides the conversion of the input for layer 0 when the caller
// already holds a fixed-point tensor.
inline FloatTensor run_layers(const Model& model, FloatTensor x,
                              const FixedPointTensor* first, const NetworkOptions& options,
                              OpCounters* ops) {
  validate(model);
  detail::check_chain(model.layers, x.dims());
  if (options.requantize && options.activation_bits > 8) {
    throw Error(ErrorKind::invalid_bits, "activations wider than 8 bits exceed the datapath");
  }

  if (options.float_oracle) {
    for (std::size_t i = 0; i < model.layers.size(); ++i) {
      const auto& layer = model.layers[i];
      if (options.requantize && !(i == 0 && first)) {
        x = from_fixed_point(to_fixed_point(x, options.activation_bits));
      }
      x = conv_layer_reference(x, dequantize_tensor(layer.weights), layer.bias, layer.spec, ops);
      if (layer.relu) relu_in_place(x);
    }
    return x;
  }

  if (!options.requantize) {
    throw Error(ErrorKind::invalid_argument,
                "the shift engine consumes 8-bit fixed-point activations; "
                "disable requantization only with the float oracle");
  }
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const auto& layer = model.layers[i];
    const FixedPointTensor fx =
        i == 0 && first ? *first : to_fixed_point(x, options.activation_bits);
    x = conv_layer_shift(fx, layer.weights, layer.bias, layer.spec, options.engine, ops);
    if (layer.relu) relu_in_place(x);
  }
  return x;
}

}  // namespace detail

/// Runs the layers in order with optional ReLU after each layer.
inline FloatTensor run_network(const Model& model, const FloatTensor& input,
                               const NetworkOptions& options = {},
                               OpCounters* ops = nullptr) {
  return detail::run_layers(model, input, nullptr, options, ops);
}

/// As above, but the first layer consumes `input` without re-quantizing it.
inline FloatTensor run_network(const Model& model, const FixedPointTensor& input,
                               const NetworkOptions& options = {},
                               OpCounters* ops = nullptr) {
  if (input.bits > 8) {
    throw Error(ErrorKind::input_width_exceeded,
                "fixed-point input has " + std::to_string(input.bits) + " bits; at most 8");
  }
  return detail::run_layers(model, from_fixed_point(input), &input, options, ops);
}

/// Float network; activations are re-quantized only when requested.
inline FloatTensor run_float_network(const FloatModel& model, const FloatTensor& input,
                                     bool requantize = false, int activation_bits = 8) {
  validate(model);
  detail::check_chain(model.layers, input.dims());
  FloatTensor x = input;
  for (const auto& layer : model.layers) {
    if (requantize) x = from_fixed_point(to_fixed_point(x, activation_bits));
    x = conv_layer_reference(x, layer.weights, layer.bias, layer.spec);
    if (layer.relu) relu_in_place(x);
  }
  return x;
}

}  // namespace shiftcnn
