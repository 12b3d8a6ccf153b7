#pragma once

#include "fedgin/serialize.hpp"

#include <cstdint>
#include <map>
#include <string>

namespace fedgin {

enum class MessageType : std::uint8_t {
  Register = 1,
  GlobalModel = 2,
  LocalUpdate = 3,
  Shutdown = 4,
  /// Reply to GlobalModel from a client that has nothing to train on.
  Decline = 5,
};

std::string to_string(MessageType t);

/// Typed protocol envelope. Which fields are meaningful depends on `type`:
///   Register     client_id, num_samples (local training slices)
///   GlobalModel  learning_rate, local_epochs, params (FGWT blob)
///   LocalUpdate  client_id, num_samples >= 1, metrics, params (FGWT blob)
///   Decline      client_id, reason
///   Shutdown     -
/// Only parameter blobs ever carry bulk data.
struct RoundMessage {
  MessageType type = MessageType::Shutdown;
  std::uint32_t round = 0;
  std::string client_id;
  std::uint64_t num_samples = 0;
  double learning_rate = 0.0;
  std::uint32_t local_epochs = 0;
  std::map<std::string, double> metrics;
  std::string reason;
  Bytes params;
};

inline constexpr std::uint16_t kWireVersion = 1;
/// "FGIN" | u16 version | u8 type | u32 round | u64 payload length
inline constexpr std::size_t kFrameHeaderSize = 19;
inline constexpr std::size_t kFrameTrailerSize = 4;
inline constexpr std::uint64_t kMaxPayload = std::uint64_t{1} << 32;

struct FrameHeader {
  MessageType type;
  std::uint32_t round;
  std::uint64_t payload_length;
};

Bytes encode_payload(const RoundMessage& msg);
void decode_payload(RoundMessage& msg, std::span<const std::uint8_t> payload);

/// Full frame: header, payload, CRC32 over header and payload.
Bytes encode_frame(const RoundMessage& msg);
FrameHeader decode_frame_header(std::span<const std::uint8_t> header);
RoundMessage decode_frame(std::span<const std::uint8_t> frame);

RoundMessage make_register(const std::string& client_id, std::uint64_t num_samples);
RoundMessage make_global_model(std::uint32_t round, double lr, std::uint32_t epochs, Bytes params);
RoundMessage make_local_update(std::uint32_t round, const std::string& client_id, std::uint64_t num_samples,
                               std::map<std::string, double> metrics, Bytes params);
RoundMessage make_decline(std::uint32_t round, const std::string& client_id, const std::string& reason);
RoundMessage make_shutdown(std::uint32_t round);

}  // namespace fedgin
