#pragma once

#include <cerrno>
#include <cstdint>
#include <cstring>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>

#include <arpa/inet.h>
#include <fcntl.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/eventfd.h>
#include <sys/socket.h>
#include <unistd.h>

namespace taillab {

class NetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// "host:port" pair. Host may be a name or dotted quad.
struct Addr {
  std::string host;
  uint16_t port = 0;

  std::string str() const { return host + ":" + std::to_string(port); }

  static Addr parse(const std::string& s) {
    auto pos = s.rfind(':');
    if (pos == std::string::npos || pos == 0 || pos + 1 == s.size()) {
      throw NetError("bad address '" + s + "', expected host:port");
    }
    Addr a;
    a.host = s.substr(0, pos);
    long port = 0;
    try {
      port = std::stol(s.substr(pos + 1));
    } catch (const std::exception&) {
      port = -1;
    }
    if (port < 0 || port > 65535) {
      throw NetError("bad port in address '" + s + "'");
    }
    a.port = static_cast<uint16_t>(port);
    return a;
  }
};

namespace detail {

inline sockaddr_in resolve_ipv4(const Addr& addr) {
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  int rc = getaddrinfo(addr.host.c_str(), nullptr, &hints, &res);
  if (rc != 0 || res == nullptr) {
    throw NetError("cannot resolve host '" + addr.host +
                   "': " + gai_strerror(rc));
  }
  sockaddr_in sa = *reinterpret_cast<sockaddr_in*>(res->ai_addr);
  freeaddrinfo(res);
  sa.sin_port = htons(addr.port);
  return sa;
}

inline std::string errno_str() { return std::strerror(errno); }

}  // namespace detail

/// Owning wrapper for a connected TCP socket.
class TcpConn {
 public:
  TcpConn() = default;
  explicit TcpConn(int fd) : fd_(fd) {}
  ~TcpConn() { close(); }

  TcpConn(TcpConn&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
  TcpConn& operator=(TcpConn&& o) noexcept {
    if (this != &o) {
      close();
      fd_ = std::exchange(o.fd_, -1);
    }
    return *this;
  }
  TcpConn(const TcpConn&) = delete;
  TcpConn& operator=(const TcpConn&) = delete;

  static TcpConn dial(const Addr& addr) {
    sockaddr_in sa = detail::resolve_ipv4(addr);
    int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0) throw NetError("socket: " + detail::errno_str());
    if (::connect(fd, reinterpret_cast<sockaddr*>(&sa), sizeof(sa)) != 0) {
      std::string msg = "connect to " + addr.str() + ": " + detail::errno_str();
      ::close(fd);
      throw NetError(msg);
    }
    TcpConn c(fd);
    c.set_nodelay();
    return c;
  }

  bool valid() const { return fd_ >= 0; }
  int fd() const { return fd_; }

  void set_nodelay() {
    int one = 1;
    setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
  }

  /// Writes the whole buffer; throws on connection failure.
  void write_all(std::span<const uint8_t> data) {
    size_t off = 0;
    while (off < data.size()) {
      ssize_t n = ::send(fd_, data.data() + off, data.size() - off,
                         MSG_NOSIGNAL);
      if (n < 0) {
        if (errno == EINTR) continue;
        throw NetError("send: " + detail::errno_str());
      }
      off += static_cast<size_t>(n);
    }
  }

  /// One read. Returns bytes read, 0 on orderly peer close, -1 when the
  /// socket is non-blocking and no data is ready.
  ssize_t read_some(std::span<uint8_t> buf) {
    for (;;) {
      ssize_t n = ::recv(fd_, buf.data(), buf.size(), 0);
      if (n >= 0) return n;
      if (errno == EINTR) continue;
      if (errno == EAGAIN || errno == EWOULDBLOCK) return -1;
      return 0;  // reset and friends count as closed
    }
  }

  void set_nonblocking(bool on) {
    int flags = fcntl(fd_, F_GETFL, 0);
    if (on) flags |= O_NONBLOCK;
    else flags &= ~O_NONBLOCK;
    fcntl(fd_, F_SETFL, flags);
  }

  void shutdown_both() {
    if (fd_ >= 0) ::shutdown(fd_, SHUT_RDWR);
  }

  void close() {
    if (fd_ >= 0) {
      ::close(fd_);
      fd_ = -1;
    }
  }

 private:
  int fd_ = -1;
};

/// Owning wrapper for a listening TCP socket.
class TcpListener {
 public:
  TcpListener() = default;
  ~TcpListener() { close(); }

  TcpListener(TcpListener&& o) noexcept
      : fd_(std::exchange(o.fd_, -1)), bound_(std::move(o.bound_)) {}
  TcpListener& operator=(TcpListener&& o) noexcept {
    if (this != &o) {
      close();
      fd_ = std::exchange(o.fd_, -1);
      bound_ = std::move(o.bound_);
    }
    return *this;
  }
  TcpListener(const TcpListener&) = delete;
  TcpListener& operator=(const TcpListener&) = delete;

  /// Binds and listens. Port 0 picks an ephemeral port; the actual one
  /// is available from bound_address().
  static TcpListener listen(const Addr& addr, int backlog = 256) {
    sockaddr_in sa = detail::resolve_ipv4(addr);
    int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0) throw NetError("socket: " + detail::errno_str());
    int one = 1;
    setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    if (::bind(fd, reinterpret_cast<sockaddr*>(&sa), sizeof(sa)) != 0) {
      std::string msg = "cannot bind " + addr.str() + ": " + detail::errno_str();
      ::close(fd);
      throw NetError(msg);
    }
    if (::listen(fd, backlog) != 0) {
      std::string msg = "listen on " + addr.str() + ": " + detail::errno_str();
      ::close(fd);
      throw NetError(msg);
    }
    TcpListener l;
    l.fd_ = fd;
    sockaddr_in actual{};
    socklen_t len = sizeof(actual);
    getsockname(fd, reinterpret_cast<sockaddr*>(&actual), &len);
    char buf[INET_ADDRSTRLEN];
    inet_ntop(AF_INET, &actual.sin_addr, buf, sizeof(buf));
    l.bound_ = Addr{buf, ntohs(actual.sin_port)};
    int flags = fcntl(fd, F_GETFL, 0);
    fcntl(fd, F_SETFL, flags | O_NONBLOCK);
    return l;
  }

  bool valid() const { return fd_ >= 0; }
  int fd() const { return fd_; }
  const Addr& bound_address() const { return bound_; }

  /// Non-blocking accept. Empty connection when nothing is pending.
  TcpConn accept() {
    int cfd = ::accept(fd_, nullptr, nullptr);
    if (cfd < 0) return TcpConn();
    TcpConn c(cfd);
    c.set_nodelay();
    return c;
  }

  void close() {
    if (fd_ >= 0) {
      ::close(fd_);
      fd_ = -1;
    }
  }

 private:
  int fd_ = -1;
  Addr bound_;
};

/// eventfd-based wakeup for poll loops (stop signals, cross-thread nudges).
class Wakeup {
 public:
  Wakeup() : fd_(eventfd(0, EFD_NONBLOCK)) {
    if (fd_ < 0) throw NetError("eventfd: " + detail::errno_str());
  }
  ~Wakeup() {
    if (fd_ >= 0) ::close(fd_);
  }
  Wakeup(const Wakeup&) = delete;
  Wakeup& operator=(const Wakeup&) = delete;

  int fd() const { return fd_; }

  void signal() {
    uint64_t one = 1;
    [[maybe_unused]] ssize_t n = ::write(fd_, &one, sizeof(one));
  }

  void drain() {
    uint64_t v;
    while (::read(fd_, &v, sizeof(v)) > 0) {
    }
  }

 private:
  int fd_ = -1;
};

}  // namespace taillab
