#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "shiftcnn/error.hpp"

namespace shiftcnn {

inline constexpr std::size_t kMaxRank = 4;

/// Dense row-major tensor of rank 1..4.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> dims, T fill = T{})
      : dims_(std::move(dims)) {
    check_dims(dims_);
    data_.assign(element_count(dims_), fill);
  }

  Tensor(std::vector<std::size_t> dims, std::vector<T> data)
      : dims_(std::move(dims)), data_(std::move(data)) {
    check_dims(dims_);
    if (data_.size() != element_count(dims_)) {
      throw Error(ErrorKind::shape_mismatch,
                  "data length " + std::to_string(data_.size()) +
                      " does not match extents (" +
                      std::to_string(element_count(dims_)) + ")");
    }
  }

  const std::vector<std::size_t>& dims() const noexcept { return dims_; }
  std::size_t rank() const noexcept { return dims_.size(); }
  std::size_t dim(std::size_t axis) const { return dims_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  const std::vector<T>& values() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  // Rank-3 (C, H, W) access.
  T& at(std::size_t c, std::size_t h, std::size_t w) {
    return data_[(c * dims_[1] + h) * dims_[2] + w];
  }
  const T& at(std::size_t c, std::size_t h, std::size_t w) const {
    return data_[(c * dims_[1] + h) * dims_[2] + w];
  }

  // Rank-4 (C~, C, Hf, Wf) access.
  T& at(std::size_t o, std::size_t c, std::size_t h, std::size_t w) {
    return data_[((o * dims_[1] + c) * dims_[2] + h) * dims_[3] + w];
  }
  const T& at(std::size_t o, std::size_t c, std::size_t h,
              std::size_t w) const {
    return data_[((o * dims_[1] + c) * dims_[2] + h) * dims_[3] + w];
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

  static std::size_t element_count(const std::vector<std::size_t>& dims) {
    return std::accumulate(dims.begin(), dims.end(), std::size_t{1},
                           std::multiplies<>());
  }

 private:
  static void check_dims(const std::vector<std::size_t>& dims) {
    if (dims.empty() || dims.size() > kMaxRank) {
      throw Error(ErrorKind::shape_mismatch,
                  "tensor rank must be in [1, 4], got " +
                      std::to_string(dims.size()));
    }
    for (std::size_t d : dims) {
      if (d == 0) throw Error(ErrorKind::shape_mismatch, "zero extent");
    }
  }

  std::vector<std::size_t> dims_;
  std::vector<T> data_;
};

using FloatTensor = Tensor<double>;

inline std::string format_dims(const std::vector<std::size_t>& dims) {
  std::string s = "(";
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(dims[i]);
  }
  return s + ")";
}

inline void require_finite(std::span<const double> values, const char* what) {
  for (double v : values) {
    if (!std::isfinite(v)) {
      throw Error(ErrorKind::domain_error,
                  std::string(what) + " contains a non-finite value");
    }
  }
}

/// Dynamic fixed-point tensor: real value = stored * 2^exponent.
struct FixedPointTensor {
  Tensor<std::int16_t> stored;
  int bits = 8;
  int exponent = 0;

  const std::vector<std::size_t>& dims() const noexcept {
    return stored.dims();
  }

  friend bool operator==(const FixedPointTensor&,
                         const FixedPointTensor&) = default;
};

inline void check_fixed_point_bits(int bits) {
  if (bits < 2 || bits > 16) {
    throw Error(ErrorKind::invalid_bits,
                "fixed-point width must be in [2, 16], got " +
                    std::to_string(bits));
  }
}

namespace detail {

// ceil(log2(v)) for finite v > 0, exact.
inline int ceil_log2(double v) {
  int e = 0;
  const double m = std::frexp(v, &e);  // v = m * 2^e, m in [0.5, 1)
  return m == 0.5 ? e - 1 : e;
}

}  // namespace detail

/// Converts to dynamic fixed point with exponent
/// ceil(log2(max|t|)) - (bits - 1), rounding half away from zero and
/// clamping symmetrically to +-(2^(bits-1) - 1).
///
/// If the largest magnitude rounds onto 2^(bits-2) exactly, the exponent is
/// lowered by one so the representation is a fixed point of the conversion.
inline FixedPointTensor to_fixed_point(const FloatTensor& t, int bits = 8) {
  check_fixed_point_bits(bits);
  require_finite(t.data(), "tensor");

  double max_abs = 0.0;
  for (double v : t.data()) max_abs = std::max(max_abs, std::abs(v));

  int exponent = -(bits - 1);
  if (max_abs > 0.0) {
    exponent = detail::ceil_log2(max_abs) - (bits - 1);
    const double top = std::round(std::ldexp(max_abs, -exponent));
    if (top == std::ldexp(1.0, bits - 2)) --exponent;
  }

  const double limit = std::ldexp(1.0, bits - 1) - 1.0;
  std::vector<std::int16_t> stored(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double q = std::clamp(std::round(std::ldexp(t[i], -exponent)),
                                -limit, limit);
    stored[i] = static_cast<std::int16_t>(q);
  }
  return {Tensor<std::int16_t>(t.dims(), std::move(stored)), bits, exponent};
}

inline FloatTensor from_fixed_point(const FixedPointTensor& t) {
  std::vector<double> out(t.stored.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = std::ldexp(static_cast<double>(t.stored[i]), t.exponent);
  }
  return FloatTensor(t.stored.dims(), std::move(out));
}

/// Convolution geometry. Output extents follow
/// floor((H + 2*padding - Hf) / stride) + 1; trailing input rows/columns
/// that no window reaches are ignored, as in common CNN frameworks.
struct LayerSpec {
  std::string name;
  std::size_t in_channels = 1;   // C
  std::size_t out_channels = 1;  // C~
  std::size_t kernel_h = 1;      // Hf
  std::size_t kernel_w = 1;      // Wf
  std::size_t in_h = 1;          // H
  std::size_t in_w = 1;          // W
  std::size_t stride = 1;
  std::size_t padding = 0;
  bool has_bias = true;

  std::size_t out_h() const { return (in_h + 2 * padding - kernel_h) / stride + 1; }
  std::size_t out_w() const { return (in_w + 2 * padding - kernel_w) / stride + 1; }

  std::vector<std::size_t> input_dims() const { return {in_channels, in_h, in_w}; }
  std::vector<std::size_t> weight_dims() const {
    return {out_channels, in_channels, kernel_h, kernel_w};
  }
  std::vector<std::size_t> output_dims() const {
    return {out_channels, out_h(), out_w()};
  }

  /// Throws shape-mismatch when an extent is zero or the output grid is
  /// empty.
  void validate() const {
    auto fail = [&](const std::string& why) {
      throw Error(ErrorKind::shape_mismatch,
                  "layer '" + name + "': " + why);
    };
    if (in_channels == 0 || out_channels == 0 || kernel_h == 0 ||
        kernel_w == 0 || in_h == 0 || in_w == 0 || stride == 0) {
      fail("all extents and the stride must be >= 1");
    }
    const std::size_t span_h = in_h + 2 * padding;
    const std::size_t span_w = in_w + 2 * padding;
    if (span_h < kernel_h || span_w < kernel_w) fail("kernel larger than padded input");
  }

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

}  // namespace shiftcnn
