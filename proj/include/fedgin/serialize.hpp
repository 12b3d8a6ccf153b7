#pragma once

#include "fedgin/params.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <vector>

namespace fedgin {

using Bytes = std::vector<std::uint8_t>;

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ChecksumError : public FormatError {
 public:
  using FormatError::FormatError;
};

std::uint32_t crc32(std::span<const std::uint8_t> bytes);

/// Little-endian append/read helpers shared by the binary formats.
class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v);
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f32(float v);
  void f64(double v);
  void raw(std::span<const std::uint8_t> bytes) { buf_.insert(buf_.end(), bytes.begin(), bytes.end()); }
  void str16(const std::string& s);
  [[nodiscard]] const Bytes& bytes() const { return buf_; }
  Bytes take() { return std::move(buf_); }

 private:
  Bytes buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}
  std::uint8_t u8();
  std::uint16_t u16();
  std::uint32_t u32();
  std::uint64_t u64();
  float f32();
  double f64();
  std::span<const std::uint8_t> raw(std::size_t n);
  std::string str16();
  [[nodiscard]] std::size_t remaining() const { return bytes_.size() - pos_; }
  [[nodiscard]] std::size_t position() const { return pos_; }

 private:
  void need(std::size_t n) const;
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

inline constexpr std::uint16_t kParamsFormatVersion = 1;

/// "FGWT" | u16 version | u32 count | per tensor: u16 name length, name,
/// u8 ndim, u32 dims..., little-endian f32 values | CRC32 of everything before.
Bytes serialize_params(const ModelParams& params);
/// Tensors whose name ends in ".running_mean"/".running_var" come back with
/// requires_grad == false, all others trainable.
ModelParams deserialize_params(std::span<const std::uint8_t> bytes);

void save_params(const ModelParams& params, const std::filesystem::path& path);
ModelParams load_params(const std::filesystem::path& path);

bool is_running_stat(std::string_view name);

}  // namespace fedgin
