#include "fedgin/serialize.hpp"

#include <zlib.h>

#include <cmath>
#include <cstring>
#include <fstream>

namespace fedgin {

std::uint32_t crc32(std::span<const std::uint8_t> bytes) {
  uLong c = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks to stay within range.
  std::size_t off = 0;
  while (off < bytes.size()) {
    const auto n = static_cast<uInt>(std::min<std::size_t>(bytes.size() - off, 1u << 30));
    c = ::crc32(c, bytes.data() + off, n);
    off += n;
  }
  return static_cast<std::uint32_t>(c);
}

void ByteWriter::u16(std::uint16_t v) {
  for (int i = 0; i < 2; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
void ByteWriter::u32(std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
void ByteWriter::u64(std::uint64_t v) {
  for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
void ByteWriter::f32(float v) {
  std::uint32_t u;
  std::memcpy(&u, &v, 4);
  u32(u);
}
void ByteWriter::f64(double v) {
  std::uint64_t u;
  std::memcpy(&u, &v, 8);
  u64(u);
}
void ByteWriter::str16(const std::string& s) {
  if (s.size() > 0xFFFF) throw FormatError("string too long for u16 length prefix");
  u16(static_cast<std::uint16_t>(s.size()));
  buf_.insert(buf_.end(), s.begin(), s.end());
}

void ByteReader::need(std::size_t n) const {
  if (bytes_.size() - pos_ < n) throw FormatError("truncated input: need " + std::to_string(n) + " more bytes");
}
std::uint8_t ByteReader::u8() {
  need(1);
  return bytes_[pos_++];
}
std::uint16_t ByteReader::u16() {
  need(2);
  std::uint16_t v = 0;
  for (int i = 0; i < 2; ++i) v |= static_cast<std::uint16_t>(bytes_[pos_++]) << (8 * i);
  return v;
}
std::uint32_t ByteReader::u32() {
  need(4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_++]) << (8 * i);
  return v;
}
std::uint64_t ByteReader::u64() {
  need(8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_++]) << (8 * i);
  return v;
}
float ByteReader::f32() {
  const std::uint32_t u = u32();
  float f;
  std::memcpy(&f, &u, 4);
  return f;
}
double ByteReader::f64() {
  const std::uint64_t u = u64();
  double d;
  std::memcpy(&d, &u, 8);
  return d;
}
std::span<const std::uint8_t> ByteReader::raw(std::size_t n) {
  need(n);
  auto s = bytes_.subspan(pos_, n);
  pos_ += n;
  return s;
}
std::string ByteReader::str16() {
  const auto n = u16();
  auto s = raw(n);
  return {s.begin(), s.end()};
}

bool is_running_stat(std::string_view name) {
  return name.ends_with(".running_mean") || name.ends_with(".running_var");
}

namespace {
constexpr char kMagic[4] = {'F', 'G', 'W', 'T'};
}

Bytes serialize_params(const ModelParams& params) {
  ByteWriter w;
  for (char c : kMagic) w.u8(static_cast<std::uint8_t>(c));
  w.u16(kParamsFormatVersion);
  w.u32(static_cast<std::uint32_t>(params.size()));
  for (const auto& e : params.entries()) {
    for (float v : e.tensor.data()) {
      if (!std::isfinite(v)) throw NonFiniteError("serialize_params: tensor '" + e.name + "' contains a non-finite value");
    }
    w.str16(e.name);
    const auto& shape = e.tensor.shape();
    if (shape.size() > 0xFF) throw FormatError("serialize_params: too many dimensions in '" + e.name + "'");
    w.u8(static_cast<std::uint8_t>(shape.size()));
    for (auto d : shape) w.u32(static_cast<std::uint32_t>(d));
    for (float v : e.tensor.data()) w.f32(v);
  }
  const std::uint32_t crc = crc32(w.bytes());
  w.u32(crc);
  return w.take();
}

ModelParams deserialize_params(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 14) throw FormatError("parameter blob too short (" + std::to_string(bytes.size()) + " bytes)");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("parameter blob has bad magic");
  const auto body = bytes.first(bytes.size() - 4);
  ByteReader tail(bytes.subspan(bytes.size() - 4));
  const std::uint32_t stored = tail.u32();
  if (crc32(body) != stored) throw ChecksumError("parameter blob checksum mismatch");

  ByteReader r(body);
  r.raw(4);
  const auto version = r.u16();
  if (version != kParamsFormatVersion) throw FormatError("unsupported parameter format version " + std::to_string(version));
  const auto count = r.u32();
  ModelParams out;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str16();
    const auto ndim = r.u8();
    Shape shape(ndim);
    for (auto& d : shape) d = r.u32();
    const auto n = static_cast<std::size_t>(shape_numel(shape));
    if (r.remaining() < 4 * n) throw FormatError("parameter blob truncated in tensor '" + name + "'");
    std::vector<float> data(n);
    for (auto& v : data) v = r.f32();
    const bool trainable = !is_running_stat(name);
    out.add(std::move(name), Tensor::from_data(std::move(shape), std::move(data), trainable));
  }
  if (r.remaining() != 0) throw FormatError("parameter blob has trailing bytes");
  return out;
}

void save_params(const ModelParams& params, const std::filesystem::path& path) {
  const Bytes b = serialize_params(params);
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + tmp.string());
    f.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
    if (!f) throw std::runtime_error("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

ModelParams load_params(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  Bytes b((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return deserialize_params(b);
}

}  // namespace fedgin
