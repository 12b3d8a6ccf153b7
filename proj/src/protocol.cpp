#include "fedgin/protocol.hpp"

#include <cstring>

namespace fedgin {

namespace {
constexpr char kMagic[4] = {'F', 'G', 'I', 'N'};

bool known_type(std::uint8_t t) { return t >= 1 && t <= 5; }
}  // namespace

std::string to_string(MessageType t) {
  switch (t) {
    case MessageType::Register: return "Register";
    case MessageType::GlobalModel: return "GlobalModel";
    case MessageType::LocalUpdate: return "LocalUpdate";
    case MessageType::Shutdown: return "Shutdown";
    case MessageType::Decline: return "Decline";
  }
  return "Unknown";
}

Bytes encode_payload(const RoundMessage& m) {
  ByteWriter w;
  switch (m.type) {
    case MessageType::Register:
      w.str16(m.client_id);
      w.u64(m.num_samples);
      break;
    case MessageType::GlobalModel:
      w.f64(m.learning_rate);
      w.u32(m.local_epochs);
      w.raw(m.params);
      break;
    case MessageType::LocalUpdate:
      if (m.num_samples < 1) throw FormatError("LocalUpdate must report num_samples >= 1");
      w.str16(m.client_id);
      w.u64(m.num_samples);
      w.u16(static_cast<std::uint16_t>(m.metrics.size()));
      for (const auto& [k, v] : m.metrics) {
        w.str16(k);
        w.f64(v);
      }
      w.raw(m.params);
      break;
    case MessageType::Decline:
      w.str16(m.client_id);
      w.str16(m.reason);
      break;
    case MessageType::Shutdown:
      break;
  }
  return w.take();
}

void decode_payload(RoundMessage& m, std::span<const std::uint8_t> payload) {
  ByteReader r(payload);
  auto rest = [&] {
    auto s = r.raw(r.remaining());
    return Bytes(s.begin(), s.end());
  };
  switch (m.type) {
    case MessageType::Register:
      m.client_id = r.str16();
      m.num_samples = r.u64();
      break;
    case MessageType::GlobalModel:
      m.learning_rate = r.f64();
      m.local_epochs = r.u32();
      m.params = rest();
      break;
    case MessageType::LocalUpdate: {
      m.client_id = r.str16();
      m.num_samples = r.u64();
      if (m.num_samples < 1) throw FormatError("LocalUpdate with num_samples == 0");
      const auto n = r.u16();
      for (std::uint16_t i = 0; i < n; ++i) {
        std::string k = r.str16();
        m.metrics[k] = r.f64();
      }
      m.params = rest();
      break;
    }
    case MessageType::Decline:
      m.client_id = r.str16();
      m.reason = r.str16();
      break;
    case MessageType::Shutdown:
      break;
  }
  if (r.remaining() != 0) throw FormatError(to_string(m.type) + " payload has trailing bytes");
}

Bytes encode_frame(const RoundMessage& msg) {
  const Bytes payload = encode_payload(msg);
  ByteWriter w;
  for (char c : kMagic) w.u8(static_cast<std::uint8_t>(c));
  w.u16(kWireVersion);
  w.u8(static_cast<std::uint8_t>(msg.type));
  w.u32(msg.round);
  w.u64(payload.size());
  w.raw(payload);
  w.u32(crc32(w.bytes()));
  return w.take();
}

FrameHeader decode_frame_header(std::span<const std::uint8_t> header) {
  if (header.size() < kFrameHeaderSize) throw FormatError("frame header truncated");
  if (std::memcmp(header.data(), kMagic, 4) != 0) throw FormatError("frame has bad magic");
  ByteReader r(header.subspan(4, kFrameHeaderSize - 4));
  const auto version = r.u16();
  if (version != kWireVersion) throw FormatError("unsupported wire version " + std::to_string(version));
  const auto type = r.u8();
  if (!known_type(type)) throw FormatError("unknown message type " + std::to_string(type));
  FrameHeader h{static_cast<MessageType>(type), r.u32(), r.u64()};
  if (h.payload_length > kMaxPayload) throw FormatError("frame payload too large");
  return h;
}

RoundMessage decode_frame(std::span<const std::uint8_t> frame) {
  const FrameHeader h = decode_frame_header(frame);
  const std::size_t total = kFrameHeaderSize + h.payload_length + kFrameTrailerSize;
  if (frame.size() != total) throw FormatError("frame length mismatch");
  const auto body = frame.first(total - kFrameTrailerSize);
  ByteReader tail(frame.subspan(total - kFrameTrailerSize));
  if (crc32(body) != tail.u32()) throw ChecksumError("frame checksum mismatch");
  RoundMessage m;
  m.type = h.type;
  m.round = h.round;
  decode_payload(m, body.subspan(kFrameHeaderSize));
  return m;
}

RoundMessage make_register(const std::string& client_id, std::uint64_t num_samples) {
  RoundMessage m;
  m.type = MessageType::Register;
  m.client_id = client_id;
  m.num_samples = num_samples;
  return m;
}

RoundMessage make_global_model(std::uint32_t round, double lr, std::uint32_t epochs, Bytes params) {
  RoundMessage m;
  m.type = MessageType::GlobalModel;
  m.round = round;
  m.learning_rate = lr;
  m.local_epochs = epochs;
  m.params = std::move(params);
  return m;
}

RoundMessage make_local_update(std::uint32_t round, const std::string& client_id, std::uint64_t num_samples,
                               std::map<std::string, double> metrics, Bytes params) {
  if (num_samples < 1) throw std::invalid_argument("make_local_update: num_samples must be >= 1");
  RoundMessage m;
  m.type = MessageType::LocalUpdate;
  m.round = round;
  m.client_id = client_id;
  m.num_samples = num_samples;
  m.metrics = std::move(metrics);
  m.params = std::move(params);
  return m;
}

RoundMessage make_decline(std::uint32_t round, const std::string& client_id, const std::string& reason) {
  RoundMessage m;
  m.type = MessageType::Decline;
  m.round = round;
  m.client_id = client_id;
  m.reason = reason;
  return m;
}

RoundMessage make_shutdown(std::uint32_t round) {
  RoundMessage m;
  m.type = MessageType::Shutdown;
  m.round = round;
  return m;
}

}  // namespace fedgin
