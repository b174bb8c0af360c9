#pragma once

#include <opes/wire.hpp>

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <cerrno>
#include <chrono>
#include <cstring>
#include <deque>
#include <list>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

namespace opes {

class TransportError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Per-connection state visible to a service.
struct Session {
  std::optional<std::uint32_t> client_id;
};

class Service {
 public:
  virtual ~Service() = default;
  virtual wire::Frame handle(const wire::Frame& request, Session& session) = 0;
  /// Called when a connection ends; `clean` is false for a mid-frame drop.
  virtual void on_disconnect(const Session&, bool /*clean*/) {}
};

/// Runs a handler, turning any failure into an ERROR frame so that no input
/// can take the server down.
inline wire::Frame dispatch(Service& service, const wire::Frame& request, Session& session) {
  try {
    return service.handle(request, session);
  } catch (const wire::WireError& e) {
    return wire::error_frame(e.code, e.what());
  } catch (const std::exception& e) {
    return wire::error_frame(wire::ErrorCode::malformed, e.what());
  }
}

class Channel {
 public:
  virtual ~Channel() = default;
  virtual void send(const wire::Frame& frame) = 0;
  virtual wire::Frame receive() = 0;

  wire::Frame call(const wire::Frame& frame) {
    send(frame);
    return receive();
  }
};

/// Sends every request before reading responses, keeping at most
/// `max_inflight` unanswered frames. Responses come back in request order.
inline std::vector<wire::Frame> pipeline(Channel& ch, const std::vector<wire::Frame>& requests,
                                         std::size_t max_inflight = 64) {
  std::vector<wire::Frame> responses;
  responses.reserve(requests.size());
  std::size_t sent = 0;
  while (responses.size() < requests.size()) {
    while (sent < requests.size() && sent - responses.size() < max_inflight) ch.send(requests[sent++]);
    responses.push_back(ch.receive());
  }
  return responses;
}

/// Same-process transport. Frames still pass through the byte encoding so
/// both transports exercise one message contract.
class InprocChannel final : public Channel {
 public:
  explicit InprocChannel(Service& service) : service_(service) {}
  ~InprocChannel() override { service_.on_disconnect(session_, true); }

  void send(const wire::Frame& frame) override {
    const auto request = wire::decode(wire::encode(frame));
    pending_.push_back(wire::decode(wire::encode(dispatch(service_, request, session_))));
  }

  wire::Frame receive() override {
    if (pending_.empty()) throw TransportError("receive without a pending request");
    auto f = std::move(pending_.front());
    pending_.pop_front();
    return f;
  }

 private:
  Service& service_;
  Session session_;
  std::deque<wire::Frame> pending_;
};

namespace detail {

/// Reads exactly n bytes; returns false on orderly EOF before the first byte
/// and throws on EOF in the middle.
inline bool read_exact(int fd, std::uint8_t* buf, std::size_t n) {
  std::size_t got = 0;
  while (got < n) {
    const auto r = ::recv(fd, buf + got, n - got, 0);
    if (r == 0) {
      if (got == 0) return false;
      throw TransportError("connection closed mid-frame");
    }
    if (r < 0) {
      if (errno == EINTR) continue;
      throw TransportError(std::string("recv: ") + std::strerror(errno));
    }
    got += static_cast<std::size_t>(r);
  }
  return true;
}

inline void write_all(int fd, const std::uint8_t* buf, std::size_t n) {
  std::size_t sent = 0;
  while (sent < n) {
    const auto r = ::send(fd, buf + sent, n - sent, MSG_NOSIGNAL);
    if (r < 0) {
      if (errno == EINTR) continue;
      throw TransportError(std::string("send: ") + std::strerror(errno));
    }
    sent += static_cast<std::size_t>(r);
  }
}

/// Reads one frame. Returns nullopt on clean EOF at a frame boundary.
/// An oversized declared length is reported via WireError before the payload
/// is read.
inline std::optional<wire::Frame> read_frame(int fd) {
  std::uint8_t header[wire::header_size];
  if (!read_exact(fd, header, sizeof header)) return std::nullopt;
  wire::Frame f;
  const auto len = wire::decode_header(std::span<const std::uint8_t, wire::header_size>(header), f.opcode);
  if (len > wire::max_payload) throw wire::WireError(wire::ErrorCode::frame_too_large, "declared payload too large");
  f.payload.resize(len);
  if (len > 0 && !read_exact(fd, f.payload.data(), len)) throw TransportError("connection closed mid-frame");
  return f;
}

inline void write_frame(int fd, const wire::Frame& f) {
  const auto bytes = wire::encode(f);
  write_all(fd, bytes.data(), bytes.size());
}

inline void set_nodelay(int fd) {
  int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
}

}  // namespace detail

/// Thread-per-connection TCP front end for a Service.
class TcpServer {
 public:
  explicit TcpServer(Service& service, std::uint16_t port = 0, const std::string& host = "127.0.0.1")
      : service_(service) {
    listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (listen_fd_ < 0) throw TransportError("socket failed");
    int one = 1;
    ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(port);
    if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) throw TransportError("bad listen address: " + host);
    if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 || ::listen(listen_fd_, 64) != 0) {
      ::close(listen_fd_);
      throw TransportError("cannot listen on " + host + ":" + std::to_string(port) + ": " + std::strerror(errno));
    }
    socklen_t len = sizeof addr;
    ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);
    acceptor_ = std::thread([this] { accept_loop(); });
  }

  TcpServer(const TcpServer&) = delete;
  TcpServer& operator=(const TcpServer&) = delete;
  ~TcpServer() { stop(); }

  std::uint16_t port() const noexcept { return port_; }

  void stop() {
    if (stopping_.exchange(true)) return;
    ::shutdown(listen_fd_, SHUT_RDWR);
    ::close(listen_fd_);
    if (acceptor_.joinable()) acceptor_.join();
    std::list<Connection> conns;
    {
      std::lock_guard lock(mu_);
      for (auto& c : connections_) ::shutdown(c.fd, SHUT_RDWR);
      conns.splice(conns.end(), connections_);
    }
    for (auto& c : conns) {
      if (c.worker.joinable()) c.worker.join();
      ::close(c.fd);
    }
  }

 private:
  struct Connection {
    int fd;
    std::thread worker;
    std::shared_ptr<std::atomic<bool>> done = std::make_shared<std::atomic<bool>>(false);
  };

  // Joins finished workers so long-lived servers do not accumulate fds.
  void reap_locked() {
    for (auto it = connections_.begin(); it != connections_.end();) {
      if (*it->done) {
        it->worker.join();
        ::close(it->fd);
        it = connections_.erase(it);
      } else {
        ++it;
      }
    }
  }

  void accept_loop() {
    while (!stopping_) {
      const int fd = ::accept(listen_fd_, nullptr, nullptr);
      if (fd < 0) {
        if (stopping_) return;
        if (errno == EINTR || errno == ECONNABORTED) continue;
        return;
      }
      detail::set_nodelay(fd);
      std::lock_guard lock(mu_);
      if (stopping_) {
        ::close(fd);
        return;
      }
      reap_locked();
      connections_.push_back({fd, {}});
      auto& conn = connections_.back();
      conn.worker = std::thread([this, fd, done = conn.done] {
        serve(fd);
        *done = true;
      });
    }
  }

  void serve(int fd) {
    Session session;
    bool clean = true;
    try {
      while (true) {
        std::optional<wire::Frame> request;
        try {
          request = detail::read_frame(fd);
        } catch (const wire::WireError& e) {
          // The stream cannot be resynchronised after a bad length prefix.
          detail::write_frame(fd, wire::error_frame(e.code, e.what()));
          clean = false;
          break;
        }
        if (!request) break;
        detail::write_frame(fd, dispatch(service_, *request, session));
      }
    } catch (const std::exception&) {
      clean = false;
    }
    ::shutdown(fd, SHUT_RDWR);
    service_.on_disconnect(session, clean && !stopping_);
  }

  Service& service_;
  int listen_fd_ = -1;
  std::uint16_t port_ = 0;
  std::atomic<bool> stopping_{false};
  std::thread acceptor_;
  std::mutex mu_;
  std::list<Connection> connections_;
};

/// Client end of a TCP connection. `send_delay` is slept before every frame
/// to emulate link latency.
class TcpChannel final : public Channel {
 public:
  TcpChannel(const std::string& host, std::uint16_t port,
             std::chrono::microseconds send_delay = std::chrono::microseconds{0},
             std::chrono::milliseconds connect_timeout = std::chrono::milliseconds{10000})
      : delay_(send_delay) {
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(port);
    if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) throw TransportError("bad address: " + host);
    const auto deadline = std::chrono::steady_clock::now() + connect_timeout;
    while (true) {
      fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
      if (fd_ < 0) throw TransportError("socket failed");
      if (::connect(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) == 0) break;
      ::close(fd_);
      fd_ = -1;
      if (std::chrono::steady_clock::now() >= deadline)
        throw TransportError("cannot connect to " + host + ":" + std::to_string(port));
      std::this_thread::sleep_for(std::chrono::milliseconds(20));
    }
    detail::set_nodelay(fd_);
  }

  TcpChannel(const TcpChannel&) = delete;
  TcpChannel& operator=(const TcpChannel&) = delete;
  ~TcpChannel() override {
    if (fd_ >= 0) ::close(fd_);
  }

  void send(const wire::Frame& frame) override {
    if (delay_.count() > 0) std::this_thread::sleep_for(delay_);
    detail::write_frame(fd_, frame);
  }

  wire::Frame receive() override {
    auto f = detail::read_frame(fd_);
    if (!f) throw TransportError("server closed the connection");
    return std::move(*f);
  }

  /// Writes raw bytes, bypassing framing (fuzzing).
  void send_raw(std::span<const std::uint8_t> bytes) { detail::write_all(fd_, bytes.data(), bytes.size()); }
  void shutdown_write() { ::shutdown(fd_, SHUT_WR); }

 private:
  int fd_ = -1;
  std::chrono::microseconds delay_;
};

}  // namespace opes
