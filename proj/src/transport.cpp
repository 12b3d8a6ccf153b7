#include "fedgin/transport.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <thread>

namespace fedgin {

void WireTap::record(const Bytes& frame) {
  std::lock_guard lock(mutex_);
  frames_.push_back(frame);
}

std::vector<Bytes> WireTap::frames() const {
  std::lock_guard lock(mutex_);
  return frames_;
}

std::size_t WireTap::total_bytes() const {
  std::lock_guard lock(mutex_);
  std::size_t n = 0;
  for (const auto& f : frames_) n += f.size();
  return n;
}

void Connection::send(const RoundMessage& msg) {
  Bytes frame = encode_frame(msg);
  if (tap_) tap_->record(frame);
  send_frame(frame);
}

RoundMessage Connection::receive() { return decode_frame(receive_frame()); }

// --- in-process -------------------------------------------------------------

namespace {

struct Mailbox {
  std::mutex mutex;
  std::condition_variable cv;
  std::deque<Bytes> queue;
  bool closed = false;
};

class InProcessConnection : public Connection {
 public:
  InProcessConnection(std::shared_ptr<Mailbox> inbox, std::shared_ptr<Mailbox> outbox)
      : inbox_(std::move(inbox)), outbox_(std::move(outbox)) {}
  ~InProcessConnection() override { close(); }

  void send_frame(const Bytes& frame) override {
    std::lock_guard lock(outbox_->mutex);
    if (outbox_->closed) throw ConnectionClosed("in-process peer closed");
    outbox_->queue.push_back(frame);
    outbox_->cv.notify_one();
  }

  Bytes receive_frame() override {
    std::unique_lock lock(inbox_->mutex);
    inbox_->cv.wait(lock, [&] { return !inbox_->queue.empty() || inbox_->closed; });
    if (inbox_->queue.empty()) throw ConnectionClosed("in-process peer closed");
    Bytes f = std::move(inbox_->queue.front());
    inbox_->queue.pop_front();
    return f;
  }

  void close() override {
    for (auto* box : {inbox_.get(), outbox_.get()}) {
      std::lock_guard lock(box->mutex);
      box->closed = true;
      box->cv.notify_all();
    }
  }

 private:
  std::shared_ptr<Mailbox> inbox_, outbox_;
};

}  // namespace

std::pair<std::unique_ptr<Connection>, std::unique_ptr<Connection>> make_inprocess_pair() {
  auto a_to_b = std::make_shared<Mailbox>();
  auto b_to_a = std::make_shared<Mailbox>();
  return {std::make_unique<InProcessConnection>(b_to_a, a_to_b), std::make_unique<InProcessConnection>(a_to_b, b_to_a)};
}

// --- sockets ----------------------------------------------------------------

SocketConnection::SocketConnection(int fd) : fd_(fd) {
  int one = 1;
  ::setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
}

SocketConnection::~SocketConnection() { close(); }

void SocketConnection::close() {
  if (fd_ >= 0) {
    ::shutdown(fd_, SHUT_RDWR);
    ::close(fd_);
    fd_ = -1;
  }
}

void SocketConnection::set_receive_timeout(std::chrono::milliseconds timeout) {
  timeval tv{};
  tv.tv_sec = static_cast<time_t>(timeout.count() / 1000);
  tv.tv_usec = static_cast<suseconds_t>((timeout.count() % 1000) * 1000);
  ::setsockopt(fd_, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof tv);
}

void SocketConnection::send_frame(const Bytes& frame) {
  if (fd_ < 0) throw ConnectionClosed("socket closed");
  std::size_t off = 0;
  while (off < frame.size()) {
    const ssize_t n = ::send(fd_, frame.data() + off, frame.size() - off, MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw ConnectionClosed(std::string("socket send failed: ") + std::strerror(errno));
    }
    off += static_cast<std::size_t>(n);
  }
}

void SocketConnection::read_exact(std::uint8_t* dst, std::size_t n) {
  std::size_t off = 0;
  while (off < n) {
    const ssize_t r = ::recv(fd_, dst + off, n - off, 0);
    if (r == 0) throw ConnectionClosed("peer closed the connection");
    if (r < 0) {
      if (errno == EINTR) continue;
      if (errno == EAGAIN || errno == EWOULDBLOCK) throw ConnectionClosed("receive timed out");
      throw ConnectionClosed(std::string("socket receive failed: ") + std::strerror(errno));
    }
    off += static_cast<std::size_t>(r);
  }
}

Bytes SocketConnection::receive_frame() {
  if (fd_ < 0) throw ConnectionClosed("socket closed");
  Bytes frame(kFrameHeaderSize);
  read_exact(frame.data(), kFrameHeaderSize);
  const FrameHeader h = decode_frame_header(frame);
  frame.resize(kFrameHeaderSize + h.payload_length + kFrameTrailerSize);
  read_exact(frame.data() + kFrameHeaderSize, h.payload_length + kFrameTrailerSize);
  return frame;
}

SocketListener::SocketListener(const std::string& host, std::uint16_t port) {
  fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd_ < 0) throw std::runtime_error(std::string("socket() failed: ") + std::strerror(errno));
  int one = 1;
  ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(port);
  if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) {
    ::close(fd_);
    throw std::invalid_argument("invalid IPv4 address '" + host + "'");
  }
  if (::bind(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 || ::listen(fd_, 16) != 0) {
    const std::string err = std::strerror(errno);
    ::close(fd_);
    throw std::runtime_error("cannot listen on " + host + ":" + std::to_string(port) + ": " + err);
  }
  socklen_t len = sizeof addr;
  ::getsockname(fd_, reinterpret_cast<sockaddr*>(&addr), &len);
  port_ = ntohs(addr.sin_port);
}

SocketListener::~SocketListener() {
  if (fd_ >= 0) ::close(fd_);
}

std::unique_ptr<SocketConnection> SocketListener::accept(std::chrono::milliseconds timeout) {
  pollfd p{fd_, POLLIN, 0};
  const int r = ::poll(&p, 1, static_cast<int>(timeout.count()));
  if (r <= 0) throw ConnectionClosed("no client connected within the accept timeout");
  const int fd = ::accept(fd_, nullptr, nullptr);
  if (fd < 0) throw ConnectionClosed(std::string("accept failed: ") + std::strerror(errno));
  return std::make_unique<SocketConnection>(fd);
}

std::unique_ptr<SocketConnection> connect_socket(const std::string& host, std::uint16_t port,
                                                 std::chrono::milliseconds retry_for) {
  const auto deadline = std::chrono::steady_clock::now() + retry_for;
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(port);
  if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) {
    throw std::invalid_argument("invalid IPv4 address '" + host + "'");
  }
  for (;;) {
    const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0) throw std::runtime_error(std::string("socket() failed: ") + std::strerror(errno));
    if (::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) == 0) {
      return std::make_unique<SocketConnection>(fd);
    }
    const std::string err = std::strerror(errno);
    ::close(fd);
    if (std::chrono::steady_clock::now() >= deadline) {
      throw ConnectionClosed("cannot connect to " + host + ":" + std::to_string(port) + ": " + err);
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(50));
  }
}

}  // namespace fedgin
