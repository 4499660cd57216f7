#pragma once

// Device transport: frames over a TCP byte stream. Frames are
// self-delimiting (payload_len), so a FrameAssembler reassembles them from
// arbitrary read boundaries. The gateway acks every decodable telemetry
// frame; devices ack every command frame.

#include "swimps/gateway.hpp"
#include "swimps/protocol.hpp"

#include <algorithm>
#include <atomic>
#include <cerrno>
#include <charconv>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <cstring>
#include <deque>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <system_error>
#include <thread>
#include <vector>

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

namespace swimps {

struct Endpoint {
  std::string host = "127.0.0.1";
  std::uint16_t port = 0;
};

/// "host:port" or ":port" (loopback).
inline Endpoint parse_endpoint(std::string_view text) {
  const auto colon = text.rfind(':');
  if (colon == std::string_view::npos) throw std::invalid_argument("expected host:port, got '" + std::string(text) + "'");
  Endpoint ep;
  if (colon > 0) ep.host = std::string(text.substr(0, colon));
  const auto port = text.substr(colon + 1);
  unsigned value = 0;
  const auto [ptr, ec] = std::from_chars(port.data(), port.data() + port.size(), value);
  if (ec != std::errc{} || ptr != port.data() + port.size() || value > 65535)
    throw std::invalid_argument("bad port in '" + std::string(text) + "'");
  ep.port = static_cast<std::uint16_t>(value);
  return ep;
}

class Socket {
public:
  Socket() = default;
  explicit Socket(int fd) : fd_(fd) {}
  Socket(Socket&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
  Socket& operator=(Socket&& o) noexcept {
    if (this != &o) {
      close();
      fd_ = std::exchange(o.fd_, -1);
    }
    return *this;
  }
  ~Socket() { close(); }

  int fd() const noexcept { return fd_; }
  bool valid() const noexcept { return fd_ >= 0; }

  void close() noexcept {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
  }

  /// Wakes any thread blocked on this socket without releasing the fd.
  void shutdown() noexcept {
    if (fd_ >= 0) ::shutdown(fd_, SHUT_RDWR);
  }

  bool send_all(std::span<const std::uint8_t> bytes) noexcept {
    while (!bytes.empty()) {
      const auto n = ::send(fd_, bytes.data(), bytes.size(), MSG_NOSIGNAL);
      if (n < 0) {
        if (errno == EINTR) continue;
        return false;
      }
      bytes = bytes.subspan(static_cast<std::size_t>(n));
    }
    return true;
  }

  /// Returns bytes read; 0 on orderly close or error.
  std::size_t recv_some(std::span<std::uint8_t> buf) noexcept {
    for (;;) {
      const auto n = ::recv(fd_, buf.data(), buf.size(), 0);
      if (n < 0 && errno == EINTR) continue;
      return n > 0 ? static_cast<std::size_t>(n) : 0;
    }
  }

private:
  int fd_ = -1;
};

namespace detail {

inline sockaddr_in resolve_ipv4(const Endpoint& ep) {
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(ep.port);
  if (ep.host.empty() || ep.host == "0.0.0.0") {
    addr.sin_addr.s_addr = htonl(INADDR_ANY);
  } else if (ep.host == "localhost") {
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  } else if (::inet_pton(AF_INET, ep.host.c_str(), &addr.sin_addr) != 1) {
    addrinfo hints{};
    hints.ai_family = AF_INET;
    addrinfo* res = nullptr;
    if (::getaddrinfo(ep.host.c_str(), nullptr, &hints, &res) != 0 || !res)
      throw std::runtime_error("cannot resolve host '" + ep.host + "'");
    addr.sin_addr = reinterpret_cast<sockaddr_in*>(res->ai_addr)->sin_addr;
    ::freeaddrinfo(res);
  }
  return addr;
}

[[noreturn]] inline void throw_errno(const std::string& what) {
  throw std::system_error(errno, std::generic_category(), what);
}

} // namespace detail

inline Socket tcp_listen(const Endpoint& ep) {
  Socket s(::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0));
  if (!s.valid()) detail::throw_errno("socket");
  int one = 1;
  ::setsockopt(s.fd(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  const auto addr = detail::resolve_ipv4(ep);
  if (::bind(s.fd(), reinterpret_cast<const sockaddr*>(&addr), sizeof addr) != 0)
    detail::throw_errno("bind " + ep.host + ":" + std::to_string(ep.port));
  if (::listen(s.fd(), 64) != 0) detail::throw_errno("listen");
  return s;
}

inline std::uint16_t local_port(const Socket& s) {
  sockaddr_in addr{};
  socklen_t len = sizeof addr;
  if (::getsockname(s.fd(), reinterpret_cast<sockaddr*>(&addr), &len) != 0) detail::throw_errno("getsockname");
  return ntohs(addr.sin_port);
}

inline Socket tcp_connect(const Endpoint& ep) {
  Socket s(::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0));
  if (!s.valid()) detail::throw_errno("socket");
  const auto addr = detail::resolve_ipv4(ep);
  if (::connect(s.fd(), reinterpret_cast<const sockaddr*>(&addr), sizeof addr) != 0)
    detail::throw_errno("connect " + ep.host + ":" + std::to_string(ep.port));
  int one = 1;
  ::setsockopt(s.fd(), IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
  return s;
}

/// Splits a byte stream into candidate frames. Bytes that cannot start a
/// frame are skipped one at a time until the magic lines up again.
class FrameAssembler {
public:
  void feed(std::span<const std::uint8_t> bytes) { buf_.insert(buf_.end(), bytes.begin(), bytes.end()); }

  std::optional<std::vector<std::uint8_t>> next() {
    for (;;) {
      const auto ext = frame_extent(buf_);
      switch (ext.kind) {
      case FrameExtent::Kind::Garbage:
        buf_.erase(buf_.begin());
        ++skipped_;
        continue;
      case FrameExtent::Kind::NeedMore:
        return std::nullopt;
      case FrameExtent::Kind::Complete: {
        std::vector<std::uint8_t> frame(buf_.begin(), buf_.begin() + static_cast<std::ptrdiff_t>(ext.size));
        buf_.erase(buf_.begin(), buf_.begin() + static_cast<std::ptrdiff_t>(ext.size));
        return frame;
      }
      }
    }
  }

  std::size_t buffered() const noexcept { return buf_.size(); }
  std::uint64_t skipped_bytes() const noexcept { return skipped_; }

private:
  std::vector<std::uint8_t> buf_;
  std::uint64_t skipped_ = 0;
};

/// A framed connection with a mailbox for incoming acks, shared by both
/// ends of the transport.
class FrameChannel {
public:
  explicit FrameChannel(Socket sock) : sock_(std::move(sock)) {}

  bool send(std::span<const std::uint8_t> frame) {
    std::lock_guard lock(write_mutex_);
    return sock_.send_all(frame);
  }

  void post_ack(const AckPayload& ack, std::vector<std::uint8_t> raw) {
    {
      std::lock_guard lock(ack_mutex_);
      acks_[ack.acked_seq] = std::move(raw);
    }
    ack_cv_.notify_all();
  }

  /// Waits for the raw ack frame acknowledging `seq`.
  std::optional<std::vector<std::uint8_t>> wait_ack(std::uint32_t seq, std::chrono::milliseconds timeout) {
    std::unique_lock lock(ack_mutex_);
    const bool got = ack_cv_.wait_for(lock, timeout, [&] { return closed_ || acks_.contains(seq); });
    if (!got || !acks_.contains(seq)) return std::nullopt;
    auto node = acks_.extract(seq);
    return std::move(node.mapped());
  }

  void mark_closed() {
    {
      std::lock_guard lock(ack_mutex_);
      closed_ = true;
    }
    ack_cv_.notify_all();
  }

  void shutdown() noexcept { sock_.shutdown(); }
  std::size_t recv_some(std::span<std::uint8_t> buf) noexcept { return sock_.recv_some(buf); }

private:
  Socket sock_;
  std::mutex write_mutex_;
  std::mutex ack_mutex_;
  std::condition_variable ack_cv_;
  std::map<std::uint32_t, std::vector<std::uint8_t>> acks_;
  bool closed_ = false;
};

/// Gateway side of the device transport: accepts device connections,
/// ingests their telemetry, acks it, and exposes each connection to the
/// gateway as the DeviceLink for the device id it reports.
class DeviceServer {
public:
  explicit DeviceServer(Gateway& gw, std::chrono::milliseconds ack_timeout = std::chrono::seconds(2))
      : gw_(gw), ack_timeout_(ack_timeout) {}

  DeviceServer(const DeviceServer&) = delete;
  DeviceServer& operator=(const DeviceServer&) = delete;

  ~DeviceServer() { stop(); }

  /// Binds and starts serving. Port 0 picks a free port; see port().
  void start(const Endpoint& ep) {
    listener_ = tcp_listen(ep);
    port_ = local_port(listener_);
    running_ = true;
    accept_thread_ = std::thread([this] { accept_loop(); });
    flush_thread_ = std::thread([this] { flush_loop(); });
  }

  std::uint16_t port() const noexcept { return port_; }

  void stop() {
    if (!running_.exchange(false)) return;
    flush_cv_.notify_all();
    if (accept_thread_.joinable()) accept_thread_.join();
    if (flush_thread_.joinable()) flush_thread_.join();
    std::vector<std::thread> threads;
    {
      std::lock_guard lock(conns_mutex_);
      for (auto& c : conns_) {
        c->channel.shutdown();
        c->channel.mark_closed();
      }
      threads.swap(threads_);
    }
    for (auto& t : threads)
      if (t.joinable()) t.join();
    listener_.close();
  }

private:
  struct Connection : DeviceLink {
    Connection(Socket s, std::chrono::milliseconds timeout) : channel(std::move(s)), timeout(timeout) {}

    std::optional<std::vector<std::uint8_t>> exchange(std::span<const std::uint8_t> frame,
                                                      std::uint32_t seq) override {
      if (!channel.send(frame)) return std::nullopt;
      return channel.wait_ack(seq, timeout);
    }

    FrameChannel channel;
    std::chrono::milliseconds timeout;
  };

  void accept_loop() {
    while (running_) {
      pollfd pfd{listener_.fd(), POLLIN, 0};
      if (::poll(&pfd, 1, 100) <= 0) continue;
      Socket s(::accept4(listener_.fd(), nullptr, nullptr, SOCK_CLOEXEC));
      if (!s.valid()) continue;
      int one = 1;
      ::setsockopt(s.fd(), IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
      auto conn = std::make_shared<Connection>(std::move(s), ack_timeout_);
      std::lock_guard lock(conns_mutex_);
      conns_.push_back(conn);
      threads_.emplace_back([this, conn] { serve(conn); });
    }
  }

  void serve(const std::shared_ptr<Connection>& conn) {
    FrameAssembler assembler;
    std::vector<std::uint32_t> bound_devices;
    std::uint8_t buf[4096];
    for (;;) {
      const auto n = conn->channel.recv_some(buf);
      if (n == 0) break;
      assembler.feed(std::span(buf, n));
      while (auto frame = assembler.next()) handle_frame(conn, *frame, bound_devices);
    }
    conn->channel.mark_closed();
    for (auto id : bound_devices) gw_.detach_link(id, conn.get());
    std::lock_guard lock(conns_mutex_);
    std::erase(conns_, conn);
  }

  void handle_frame(const std::shared_ptr<Connection>& conn, const std::vector<std::uint8_t>& frame,
                    std::vector<std::uint32_t>& bound) {
    if (frame.size() > 3 && frame[3] == static_cast<std::uint8_t>(MsgType::Ack)) {
      if (auto f = decode_frame(frame); f && f->msg_type() == MsgType::Ack)
        conn->channel.post_ack(std::get<AckPayload>(f->payload), frame);
      return;
    }

    IngestOutcome outcome;
    try {
      outcome = gw_.ingest_frame(frame, gw_.now_ms());
    } catch (const std::exception& e) {
      std::cerr << "swimps: ingest failed: " << e.what() << '\n';
      if (auto f = decode_frame(frame)) send_ack(*conn, *f, AckStatus::Rejected);
      return;
    }
    if (!outcome.frame || outcome.frame->msg_type() != MsgType::Telemetry) return;

    const auto id = outcome.frame->device_id;
    if (outcome.accepted() && std::find(bound.begin(), bound.end(), id) == bound.end()) {
      gw_.attach_link(id, conn);
      bound.push_back(id);
      request_flush(id);
    }
    send_ack(*conn, *outcome.frame, outcome.accepted() ? AckStatus::Ok : AckStatus::Rejected);
    if (outcome.commands_pending) request_flush(id);
  }

  void send_ack(Connection& conn, const Frame& f, AckStatus status) {
    const auto ack = encode_frame(Frame{protocol_version, f.device_id, f.seq,
                                        static_cast<std::uint64_t>(gw_.now_ms()), AckPayload{f.seq, status}});
    conn.channel.send(ack);
  }

  void request_flush(std::uint32_t device_id) {
    {
      std::lock_guard lock(flush_mutex_);
      flush_queue_.push_back(device_id);
    }
    flush_cv_.notify_one();
  }

  // Queued commands wait for their ack, which arrives on the connection
  // thread; so they are flushed from here instead.
  void flush_loop() {
    std::unique_lock lock(flush_mutex_);
    while (running_) {
      flush_cv_.wait(lock, [&] { return !running_ || !flush_queue_.empty(); });
      while (running_ && !flush_queue_.empty()) {
        const auto id = flush_queue_.front();
        flush_queue_.pop_front();
        lock.unlock();
        gw_.flush_pending(id);
        lock.lock();
      }
    }
  }

  Gateway& gw_;
  std::chrono::milliseconds ack_timeout_;
  Socket listener_;
  std::uint16_t port_ = 0;
  std::atomic<bool> running_{false};
  std::thread accept_thread_;

  std::mutex conns_mutex_;
  std::vector<std::shared_ptr<Connection>> conns_;
  std::vector<std::thread> threads_;

  std::mutex flush_mutex_;
  std::condition_variable flush_cv_;
  std::deque<std::uint32_t> flush_queue_;
  std::thread flush_thread_;
};

/// Device side of the transport. Telemetry is sent synchronously (waits
/// for the gateway's ack); command frames are handled on a reader thread
/// by `on_command`, whose return value is acked back.
class DeviceClient {
public:
  using CommandHandler = std::function<AckStatus(const Frame&, const CommandPayload&)>;

  DeviceClient(const Endpoint& gateway, CommandHandler on_command,
               std::chrono::milliseconds ack_timeout = std::chrono::seconds(5))
      : channel_(tcp_connect(gateway)), on_command_(std::move(on_command)), ack_timeout_(ack_timeout) {
    reader_ = std::thread([this] { read_loop(); });
  }

  DeviceClient(const DeviceClient&) = delete;
  DeviceClient& operator=(const DeviceClient&) = delete;

  ~DeviceClient() {
    channel_.shutdown();
    channel_.mark_closed();
    if (reader_.joinable()) reader_.join();
  }

  /// Sends raw frame bytes and waits for the ack of `seq`.
  std::optional<AckPayload> send_frame(std::span<const std::uint8_t> bytes, std::uint32_t seq) {
    if (!channel_.send(bytes)) return std::nullopt;
    auto raw = channel_.wait_ack(seq, ack_timeout_);
    if (!raw) return std::nullopt;
    auto f = decode_frame(*raw);
    if (!f || f->msg_type() != MsgType::Ack) return std::nullopt;
    return std::get<AckPayload>(f->payload);
  }

  std::optional<AckPayload> send(const Frame& f) { return send_frame(encode_frame(f), f.seq); }

private:
  void read_loop() {
    FrameAssembler assembler;
    std::uint8_t buf[4096];
    for (;;) {
      const auto n = channel_.recv_some(buf);
      if (n == 0) break;
      assembler.feed(std::span(buf, n));
      while (auto raw = assembler.next()) {
        auto f = decode_frame(*raw);
        if (!f) continue;
        if (f->msg_type() == MsgType::Ack) {
          channel_.post_ack(std::get<AckPayload>(f->payload), *raw);
        } else if (f->msg_type() == MsgType::Command) {
          const auto status = on_command_(*f, std::get<CommandPayload>(f->payload));
          channel_.send(encode_frame(Frame{protocol_version, f->device_id, f->seq, f->timestamp_ms,
                                           AckPayload{f->seq, status}}));
        }
      }
    }
    channel_.mark_closed();
  }

  FrameChannel channel_;
  CommandHandler on_command_;
  std::chrono::milliseconds ack_timeout_;
  std::thread reader_;
};

} // namespace swimps
