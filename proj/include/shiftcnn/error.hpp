#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace shiftcnn {

enum class ErrorKind {
  invalid_config,
  invalid_argument,
  domain_error,
  invalid_bits,
  input_width_exceeded,
  shape_mismatch,
  index_out_of_range,
  accumulator_overflow,
  equivalence_violation,
  empty_tensor,
  malformed_manifest,
  blob_length_mismatch,
  unsupported_version,
  bad_magic,
  truncated_payload,
  parse_error,
  io_error,
};

constexpr std::string_view to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::invalid_config: return "invalid-config";
    case ErrorKind::invalid_argument: return "invalid-argument";
    case ErrorKind::domain_error: return "domain-error";
    case ErrorKind::invalid_bits: return "invalid-bits";
    case ErrorKind::input_width_exceeded: return "input-width-exceeded";
    case ErrorKind::shape_mismatch: return "shape-mismatch";
    case ErrorKind::index_out_of_range: return "index-out-of-range";
    case ErrorKind::accumulator_overflow: return "accumulator-overflow";
    case ErrorKind::equivalence_violation: return "equivalence-violation";
    case ErrorKind::empty_tensor: return "empty-tensor";
    case ErrorKind::malformed_manifest: return "malformed-manifest";
    case ErrorKind::blob_length_mismatch: return "blob-length-mismatch";
    case ErrorKind::unsupported_version: return "unsupported-version";
    case ErrorKind::bad_magic: return "bad-magic";
    case ErrorKind::truncated_payload: return "truncated-payload";
    case ErrorKind::parse_error: return "parse-error";
    case ErrorKind::io_error: return "io-error";
  }
  return "unknown";
}

/// Exception carrying a machine-checkable error class. what() is
/// "<kind>: <detail>".
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& detail)
      : std::runtime_error(std::string(to_string(kind)) + ": " + detail),
        kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace shiftcnn
