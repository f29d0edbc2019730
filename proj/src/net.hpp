#pragma once

// Thin POSIX socket helpers shared by the wire server and client.

#include <chrono>
#include <optional>
#include <string>
#include <string_view>
#include <utility>

namespace spacefarm::net {

class Socket {
 public:
  Socket() = default;
  explicit Socket(int fd) : fd_(fd) {}
  ~Socket() { reset(); }
  Socket(Socket&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
  Socket& operator=(Socket&& o) noexcept {
    if (this != &o) {
      reset();
      fd_ = std::exchange(o.fd_, -1);
    }
    return *this;
  }
  Socket(const Socket&) = delete;
  Socket& operator=(const Socket&) = delete;

  int fd() const { return fd_; }
  bool valid() const { return fd_ >= 0; }
  void reset();
  /// Wakes any thread blocked reading this socket.
  void shutdown_both() const;

 private:
  int fd_ = -1;
};

struct HostPort {
  std::string host;
  std::uint16_t port = 0;
};

/// "host:port"; throws Error{kBadRequest}.
HostPort parse_address(std::string_view address);

/// Throws Error{kConnectionFailed}.
Socket connect_to(const HostPort& address, std::chrono::milliseconds timeout);

/// Throws Error{kConnectionFailed} with a "bind" message when the port is taken.
Socket listen_on(const HostPort& address, int backlog = 128);
std::uint16_t local_port(const Socket& s);

bool send_all(const Socket& s, std::string_view bytes);
/// Reads exactly n bytes; false on EOF or error.
bool recv_exact(const Socket& s, char* out, std::size_t n);

/// One length-prefixed frame; nullopt on EOF or error. Throws
/// Error{kFrameTooLarge} for an oversize length prefix.
std::optional<std::string> recv_frame(const Socket& s);

}  // namespace spacefarm::net
