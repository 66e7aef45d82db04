#pragma once

// On-disk formats.
//
// Tensor file ("SHCT"), all integers little-endian:
//   0  char[4]  magic "SHCT"
//   4  u8       version (1)
//   5  u8       dtype: 1 = float32, 2 = float64, 3 = fixed-point int16
//   6  u8       rank (1..4)
//   7  u8       fixed-point bit width (0 for float dtypes)
//   8  u32[rank] extents
//   .  i32      exponent (0 for float dtypes)
//   .  payload  row-major elements
//
// Float tensors are written as float32 when every element is exactly
// representable, float64 otherwise.
//
// Model: a JSON manifest plus one blob per layer for weights and biases,
// stored next to the manifest. Quantized weights are raw signed bytes, one
// per codeword index, weight-major with the N stage indices contiguous.

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <sstream>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "shiftcnn/codebook.hpp"
#include "shiftcnn/error.hpp"
#include "shiftcnn/tensor.hpp"

namespace shiftcnn {

inline constexpr std::string_view kTensorMagic = "SHCT";
inline constexpr std::uint8_t kTensorVersion = 1;
inline constexpr int kManifestVersion = 1;

enum class TensorDtype : std::uint8_t { float32 = 1, float64 = 2, fixed16 = 3 };

using AnyTensor = std::variant<FloatTensor, FixedPointTensor>;

namespace detail {

class ByteWriter {
 public:
  void put_u8(std::uint8_t v) { bytes_.push_back(static_cast<char>(v)); }
  void put_u16(std::uint16_t v) {
    for (int i = 0; i < 2; ++i) put_u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void put_u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) put_u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void put_u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) put_u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void put_bytes(std::string_view s) { bytes_.append(s); }
  std::string take() { return std::move(bytes_); }

 private:
  std::string bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view bytes) : bytes_(bytes) {}

  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(bytes_[pos_++]);
  }
  std::uint16_t u16() {
    std::uint16_t v = 0;
    for (int i = 0; i < 2; ++i) v |= static_cast<std::uint16_t>(u8()) << (8 * i);
    return v;
  }
  std::uint32_t u32() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(u8()) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(u8()) << (8 * i);
    return v;
  }
  std::string_view bytes(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) {
      throw Error(ErrorKind::truncated_payload,
                  "needed " + std::to_string(n) + " more bytes at offset " +
                      std::to_string(pos_) + ", file has " +
                      std::to_string(bytes_.size()));
    }
  }

  std::string_view bytes_;
  std::size_t pos_ = 0;
};

inline bool exactly_float32(std::span<const double> values) {
  for (double v : values) {
    if (static_cast<double>(static_cast<float>(v)) != v) return false;
  }
  return true;
}

inline void write_header(ByteWriter& out, TensorDtype dtype,
                         const std::vector<std::size_t>& dims, int bits,
                         int exponent) {
  out.put_bytes(kTensorMagic);
  out.put_u8(kTensorVersion);
  out.put_u8(static_cast<std::uint8_t>(dtype));
  out.put_u8(static_cast<std::uint8_t>(dims.size()));
  out.put_u8(static_cast<std::uint8_t>(bits));
  for (std::size_t d : dims) {
    if (d > std::numeric_limits<std::uint32_t>::max()) {
      throw Error(ErrorKind::shape_mismatch, "extent exceeds 32 bits");
    }
    out.put_u32(static_cast<std::uint32_t>(d));
  }
  out.put_u32(static_cast<std::uint32_t>(static_cast<std::int32_t>(exponent)));
}

}  // namespace detail

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::io_error, "cannot open '" + path.string() + "'");
  return std::string(std::istreambuf_iterator<char>(in), {});
}

inline void write_file(const std::filesystem::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::io_error, "cannot write '" + path.string() + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorKind::io_error, "write failed for '" + path.string() + "'");
}

inline std::string encode_tensor(const FloatTensor& t) {
  detail::ByteWriter out;
  const bool narrow = detail::exactly_float32(t.data());
  detail::write_header(out, narrow ? TensorDtype::float32 : TensorDtype::float64,
                       t.dims(), 0, 0);
  for (double v : t.data()) {
    if (narrow) {
      out.put_u32(std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    } else {
      out.put_u64(std::bit_cast<std::uint64_t>(v));
    }
  }
  return out.take();
}

inline std::string encode_tensor(const FixedPointTensor& t) {
  check_fixed_point_bits(t.bits);
  detail::ByteWriter out;
  detail::write_header(out, TensorDtype::fixed16, t.dims(), t.bits, t.exponent);
  for (std::int16_t v : t.stored.data()) out.put_u16(static_cast<std::uint16_t>(v));
  return out.take();
}

inline AnyTensor decode_tensor(std::string_view bytes) {
  detail::ByteReader in(bytes);
  if (bytes.size() < kTensorMagic.size() ||
      bytes.substr(0, kTensorMagic.size()) != kTensorMagic) {
    throw Error(ErrorKind::bad_magic, "missing SHCT tensor magic");
  }
  in.bytes(kTensorMagic.size());
  const std::uint8_t version = in.u8();
  if (version != kTensorVersion) {
    throw Error(ErrorKind::unsupported_version,
                "tensor version " + std::to_string(version));
  }
  const std::uint8_t dtype = in.u8();
  const std::uint8_t rank = in.u8();
  const std::uint8_t bits = in.u8();
  if (rank < 1 || rank > kMaxRank) {
    throw Error(ErrorKind::bad_magic, "invalid tensor rank " + std::to_string(rank));
  }
  std::vector<std::size_t> dims(rank);
  for (auto& d : dims) {
    d = in.u32();
    if (d == 0) throw Error(ErrorKind::bad_magic, "zero extent in header");
  }
  const auto exponent = static_cast<std::int32_t>(in.u32());
  const std::size_t count = FloatTensor::element_count(dims);

  std::size_t width = 0;
  switch (static_cast<TensorDtype>(dtype)) {
    case TensorDtype::float32: width = 4; break;
    case TensorDtype::float64: width = 8; break;
    case TensorDtype::fixed16: width = 2; break;
    default:
      throw Error(ErrorKind::bad_magic, "unknown dtype code " + std::to_string(dtype));
  }
  if (count > in.remaining() / width) {
    throw Error(ErrorKind::truncated_payload,
                "header declares " + std::to_string(count) + " elements, payload holds " +
                    std::to_string(in.remaining() / width));
  }
  if (in.remaining() != count * width) {
    throw Error(ErrorKind::blob_length_mismatch,
                std::to_string(in.remaining() - count * width) +
                    " trailing bytes after tensor payload");
  }

  if (static_cast<TensorDtype>(dtype) == TensorDtype::fixed16) {
    check_fixed_point_bits(bits);
    std::vector<std::int16_t> data(count);
    const std::int32_t limit = (1 << (bits - 1)) - 1;
    for (auto& v : data) {
      v = static_cast<std::int16_t>(in.u16());
      if (v > limit || v < -limit - 1) {
        throw Error(ErrorKind::index_out_of_range,
                    "stored value " + std::to_string(v) + " exceeds " +
                        std::to_string(bits) + "-bit range");
      }
    }
    return FixedPointTensor{Tensor<std::int16_t>(std::move(dims), std::move(data)),
                            bits, exponent};
  }

  std::vector<double> data(count);
  for (auto& v : data) {
    v = width == 4 ? static_cast<double>(std::bit_cast<float>(in.u32()))
                   : std::bit_cast<double>(in.u64());
  }
  return FloatTensor(std::move(dims), std::move(data));
}

inline void save_tensor(const std::filesystem::path& path, const FloatTensor& t) {
  write_file(path, encode_tensor(t));
}

inline void save_tensor(const std::filesystem::path& path, const FixedPointTensor& t) {
  write_file(path, encode_tensor(t));
}

inline AnyTensor load_tensor(const std::filesystem::path& path) {
  return decode_tensor(read_file(path));
}

/// Loads a tensor as real values; fixed-point files are converted exactly.
inline FloatTensor load_float_tensor(const std::filesystem::path& path) {
  AnyTensor t = load_tensor(path);
  if (auto* f = std::get_if<FloatTensor>(&t)) return std::move(*f);
  return from_fixed_point(std::get<FixedPointTensor>(t));
}

// ---------------------------------------------------------------------------
// Models

struct QuantizedLayer {
  LayerSpec spec;
  QuantizedWeightTensor weights;
  std::vector<double> bias;  // length C~; zeros when !spec.has_bias
  bool relu = false;         // apply ReLU to this layer's output

  friend bool operator==(const QuantizedLayer&, const QuantizedLayer&) = default;
};

struct Model {
  CodebookConfig config;
  std::vector<QuantizedLayer> layers;

  friend bool operator==(const Model&, const Model&) = default;
};

struct FloatLayer {
  LayerSpec spec;
  FloatTensor weights;
  std::vector<double> bias;
  bool relu = false;

  friend bool operator==(const FloatLayer&, const FloatLayer&) = default;
};

struct FloatModel {
  std::vector<FloatLayer> layers;

  friend bool operator==(const FloatModel&, const FloatModel&) = default;
};

namespace detail {

inline void check_bias(const LayerSpec& spec, std::span<const double> bias) {
  if (bias.size() != spec.out_channels) {
    throw Error(ErrorKind::shape_mismatch,
                "layer '" + spec.name + "': bias length " + std::to_string(bias.size()) +
                    " != output channels " + std::to_string(spec.out_channels));
  }
  require_finite(bias, "bias");
  if (!spec.has_bias) {
    for (double b : bias) {
      if (b != 0.0) {
        throw Error(ErrorKind::shape_mismatch,
                    "layer '" + spec.name + "' has no bias but a nonzero bias value");
      }
    }
  }
}

}  // namespace detail

inline void validate(const QuantizedLayer& layer, const CodebookConfig& config) {
  layer.spec.validate();
  if (layer.weights.dims != layer.spec.weight_dims()) {
    throw Error(ErrorKind::shape_mismatch,
                "layer '" + layer.spec.name + "': weight shape " +
                    format_dims(layer.weights.dims) + " != " +
                    format_dims(layer.spec.weight_dims()));
  }
  if (!(layer.weights.config == config)) {
    throw Error(ErrorKind::invalid_config,
                "layer '" + layer.spec.name + "' uses a different codebook");
  }
  layer.weights.validate();
  detail::check_bias(layer.spec, layer.bias);
}

inline void validate(const Model& model) {
  for (const auto& layer : model.layers) validate(layer, model.config);
}

inline void validate(const FloatModel& model) {
  for (const auto& layer : model.layers) {
    layer.spec.validate();
    if (layer.weights.dims() != layer.spec.weight_dims()) {
      throw Error(ErrorKind::shape_mismatch,
                  "layer '" + layer.spec.name + "': weight shape " +
                      format_dims(layer.weights.dims()) + " != " +
                      format_dims(layer.spec.weight_dims()));
    }
    require_finite(layer.weights.data(), "weights");
    detail::check_bias(layer.spec, layer.bias);
  }
}

/// Quantizes every layer of a float model.
inline Model quantize_model(const FloatModel& model, const CodebookConfig& config) {
  validate(model);
  Model out{config, {}};
  for (const auto& layer : model.layers) {
    out.layers.push_back({layer.spec, quantize_tensor(layer.weights, config),
                          layer.bias, layer.relu});
  }
  return out;
}

/// Float model whose weights are the dequantized weights of `model`.
inline FloatModel dequantize_model(const Model& model) {
  FloatModel out;
  for (const auto& layer : model.layers) {
    out.layers.push_back({layer.spec, dequantize_tensor(layer.weights), layer.bias,
                          layer.relu});
  }
  return out;
}

namespace detail {

using nlohmann::json;

inline json spec_to_json(const LayerSpec& s, bool relu) {
  return json{{"name", s.name},         {"in_channels", s.in_channels},
              {"out_channels", s.out_channels}, {"kernel_h", s.kernel_h},
              {"kernel_w", s.kernel_w}, {"in_h", s.in_h},
              {"in_w", s.in_w},         {"stride", s.stride},
              {"padding", s.padding},   {"has_bias", s.has_bias},
              {"relu", relu}};
}

template <typename T>
T manifest_field(const json& j, const char* key) {
  if (!j.is_object() || !j.contains(key)) {
    throw Error(ErrorKind::malformed_manifest, std::string("missing field '") + key + "'");
  }
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw Error(ErrorKind::malformed_manifest,
                std::string("field '") + key + "': " + e.what());
  }
}

inline LayerSpec spec_from_json(const json& j) {
  LayerSpec s;
  s.name = manifest_field<std::string>(j, "name");
  s.in_channels = manifest_field<std::size_t>(j, "in_channels");
  s.out_channels = manifest_field<std::size_t>(j, "out_channels");
  s.kernel_h = manifest_field<std::size_t>(j, "kernel_h");
  s.kernel_w = manifest_field<std::size_t>(j, "kernel_w");
  s.in_h = manifest_field<std::size_t>(j, "in_h");
  s.in_w = manifest_field<std::size_t>(j, "in_w");
  s.stride = manifest_field<std::size_t>(j, "stride");
  s.padding = manifest_field<std::size_t>(j, "padding");
  s.has_bias = manifest_field<bool>(j, "has_bias");
  try {
    s.validate();
  } catch (const Error& e) {
    throw Error(ErrorKind::malformed_manifest, e.what());
  }
  return s;
}

inline std::string blob_name(const std::filesystem::path& manifest, std::size_t layer,
                             std::string_view suffix) {
  return manifest.stem().string() + "." + std::to_string(layer) + std::string(suffix);
}

inline json parse_manifest(const std::filesystem::path& path, std::string_view kind) {
  json doc;
  try {
    doc = json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw Error(ErrorKind::malformed_manifest, e.what());
  }
  if (manifest_field<std::string>(doc, "format") != "shiftcnn-model") {
    throw Error(ErrorKind::malformed_manifest, "not a shiftcnn model manifest");
  }
  const int version = manifest_field<int>(doc, "version");
  if (version != kManifestVersion) {
    throw Error(ErrorKind::unsupported_version,
                "manifest version " + std::to_string(version));
  }
  const auto actual = manifest_field<std::string>(doc, "kind");
  if (actual != kind) {
    throw Error(ErrorKind::malformed_manifest,
                "expected a " + std::string(kind) + " model, found '" + actual + "'");
  }
  if (!doc.contains("layers") || !doc["layers"].is_array()) {
    throw Error(ErrorKind::malformed_manifest, "missing layer list");
  }
  return doc;
}

inline std::vector<double> load_bias(const std::filesystem::path& dir, const json& layer,
                                     const LayerSpec& spec) {
  if (!layer.contains("bias") || layer["bias"].is_null()) {
    if (spec.has_bias) throw Error(ErrorKind::malformed_manifest, "missing bias blob");
    return std::vector<double>(spec.out_channels, 0.0);
  }
  const FloatTensor b = load_float_tensor(dir / manifest_field<std::string>(layer, "bias"));
  if (b.rank() != 1 || b.size() != spec.out_channels) {
    throw Error(ErrorKind::blob_length_mismatch,
                "bias blob of layer '" + spec.name + "' holds " + std::to_string(b.size()) +
                    " values, expected " + std::to_string(spec.out_channels));
  }
  return b.values();
}

inline json write_bias(const std::filesystem::path& path, std::size_t index,
                       const LayerSpec& spec, const std::vector<double>& bias) {
  if (!spec.has_bias) return nullptr;
  const auto name = blob_name(path, index, ".bias.shct");
  save_tensor(path.parent_path() / name, FloatTensor({bias.size()}, bias));
  return name;
}

inline std::filesystem::path manifest_dir(const std::filesystem::path& path) {
  return path.has_parent_path() ? path.parent_path() : std::filesystem::path(".");
}

}  // namespace detail

/// Writes `path` (JSON manifest) and its blobs into the same directory.
inline void save_model(const std::filesystem::path& path, const Model& model) {
  validate(model);
  using nlohmann::json;
  json doc{{"format", "shiftcnn-model"},
           {"version", kManifestVersion},
           {"kind", "quantized"},
           {"codebook", {{"shifts", model.config.stages()}, {"bits", model.config.bits()}}}};
  json layers = json::array();
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const auto& layer = model.layers[i];
    json entry = detail::spec_to_json(layer.spec, layer.relu);
    entry["scale"] = layer.weights.scale;
    const auto idx_name = detail::blob_name(path, i, ".idx");
    const auto* raw = reinterpret_cast<const char*>(layer.weights.indices.data());
    write_file(path.parent_path() / idx_name,
               std::string_view(raw, layer.weights.indices.size()));
    entry["indices"] = idx_name;
    entry["bias"] = detail::write_bias(path, i, layer.spec, layer.bias);
    layers.push_back(std::move(entry));
  }
  doc["layers"] = std::move(layers);
  write_file(path, doc.dump(2) + "\n");
}

inline Model load_model(const std::filesystem::path& path) {
  const auto doc = detail::parse_manifest(path, "quantized");
  const auto dir = detail::manifest_dir(path);
  const auto& book = doc.contains("codebook") ? doc["codebook"] : nlohmann::json();
  Model model{CodebookConfig(detail::manifest_field<int>(book, "shifts"),
                             detail::manifest_field<int>(book, "bits")),
              {}};
  for (const auto& entry : doc["layers"]) {
    QuantizedLayer layer;
    layer.spec = detail::spec_from_json(entry);
    layer.relu = detail::manifest_field<bool>(entry, "relu");
    layer.weights.dims = layer.spec.weight_dims();
    layer.weights.config = model.config;
    layer.weights.scale = detail::manifest_field<double>(entry, "scale");
    const std::string blob = read_file(dir / detail::manifest_field<std::string>(entry, "indices"));
    const std::size_t expected =
        layer.weights.weight_count() * static_cast<std::size_t>(model.config.stages());
    if (blob.size() != expected) {
      throw Error(ErrorKind::blob_length_mismatch,
                  "index blob of layer '" + layer.spec.name + "' has " +
                      std::to_string(blob.size()) + " bytes, expected " +
                      std::to_string(expected));
    }
    layer.weights.indices.resize(blob.size());
    std::memcpy(layer.weights.indices.data(), blob.data(), blob.size());
    layer.bias = detail::load_bias(dir, entry, layer.spec);
    validate(layer, model.config);
    model.layers.push_back(std::move(layer));
  }
  return model;
}

inline void save_float_model(const std::filesystem::path& path, const FloatModel& model) {
  validate(model);
  using nlohmann::json;
  json doc{{"format", "shiftcnn-model"}, {"version", kManifestVersion}, {"kind", "float"}};
  json layers = json::array();
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const auto& layer = model.layers[i];
    json entry = detail::spec_to_json(layer.spec, layer.relu);
    const auto w_name = detail::blob_name(path, i, ".w.shct");
    save_tensor(path.parent_path() / w_name, layer.weights);
    entry["weights"] = w_name;
    entry["bias"] = detail::write_bias(path, i, layer.spec, layer.bias);
    layers.push_back(std::move(entry));
  }
  doc["layers"] = std::move(layers);
  write_file(path, doc.dump(2) + "\n");
}

inline FloatModel load_float_model(const std::filesystem::path& path) {
  const auto doc = detail::parse_manifest(path, "float");
  const auto dir = detail::manifest_dir(path);
  FloatModel model;
  for (const auto& entry : doc["layers"]) {
    FloatLayer layer;
    layer.spec = detail::spec_from_json(entry);
    layer.relu = detail::manifest_field<bool>(entry, "relu");
    layer.weights = load_float_tensor(dir / detail::manifest_field<std::string>(entry, "weights"));
    if (layer.weights.dims() != layer.spec.weight_dims()) {
      throw Error(ErrorKind::blob_length_mismatch,
                  "weight blob of layer '" + layer.spec.name + "' has shape " +
                      format_dims(layer.weights.dims()) + ", expected " +
                      format_dims(layer.spec.weight_dims()));
    }
    layer.bias = detail::load_bias(dir, entry, layer.spec);
    model.layers.push_back(std::move(layer));
  }
  validate(model);
  return model;
}

}  // namespace shiftcnn
