#pragma once

#include "fedgin/protocol.hpp"

#include <chrono>
#include <condition_variable>
#include <deque>
#include <memory>
#include <mutex>
#include <string>
#include <utility>

namespace fedgin {

/// The peer went away (EOF, reset, timeout or explicit close).
class ConnectionClosed : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Records every frame written by connections it is attached to.
class WireTap {
 public:
  void record(const Bytes& frame);
  [[nodiscard]] std::vector<Bytes> frames() const;
  [[nodiscard]] std::size_t total_bytes() const;

 private:
  mutable std::mutex mutex_;
  std::vector<Bytes> frames_;
};

/// A bidirectional, message-framed link between the server and one client.
class Connection {
 public:
  virtual ~Connection() = default;

  void send(const RoundMessage& msg);
  RoundMessage receive();

  virtual void send_frame(const Bytes& frame) = 0;
  /// Blocks for one complete frame; throws ConnectionClosed.
  virtual Bytes receive_frame() = 0;
  virtual void close() = 0;

  void attach_tap(std::shared_ptr<WireTap> tap) { tap_ = std::move(tap); }

 protected:
  std::shared_ptr<WireTap> tap_;
};

/// Two connected in-memory endpoints; frames are still fully encoded so both
/// transports exercise identical bytes.
std::pair<std::unique_ptr<Connection>, std::unique_ptr<Connection>> make_inprocess_pair();

class SocketConnection : public Connection {
 public:
  explicit SocketConnection(int fd);
  ~SocketConnection() override;
  SocketConnection(const SocketConnection&) = delete;
  SocketConnection& operator=(const SocketConnection&) = delete;

  void send_frame(const Bytes& frame) override;
  Bytes receive_frame() override;
  void close() override;
  void set_receive_timeout(std::chrono::milliseconds timeout);

 private:
  void read_exact(std::uint8_t* dst, std::size_t n);
  int fd_;
};

/// Loopback TCP listener. Port 0 picks an ephemeral port.
class SocketListener {
 public:
  SocketListener(const std::string& host, std::uint16_t port);
  ~SocketListener();
  SocketListener(const SocketListener&) = delete;
  SocketListener& operator=(const SocketListener&) = delete;

  [[nodiscard]] std::uint16_t port() const { return port_; }
  /// Throws ConnectionClosed when nothing connects within `timeout`.
  std::unique_ptr<SocketConnection> accept(std::chrono::milliseconds timeout);

 private:
  int fd_;
  std::uint16_t port_;
};

std::unique_ptr<SocketConnection> connect_socket(const std::string& host, std::uint16_t port,
                                                 std::chrono::milliseconds retry_for = std::chrono::seconds(10));

}  // namespace fedgin
