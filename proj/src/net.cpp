#include "net.hpp"

#include <arpa/inet.h>
#include <fcntl.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <charconv>
#include <cstring>

#include "spacefarm/error.hpp"
#include "spacefarm/wire.hpp"

namespace spacefarm::net {

void Socket::reset() {
  if (fd_ >= 0) {
    ::close(fd_);
    fd_ = -1;
  }
}

void Socket::shutdown_both() const {
  if (fd_ >= 0) ::shutdown(fd_, SHUT_RDWR);
}

HostPort parse_address(std::string_view address) {
  const auto colon = address.rfind(':');
  if (colon == std::string_view::npos || colon == 0 || colon + 1 == address.size()) {
    fail(ErrorCode::kBadRequest, "address must be host:port, got '" + std::string(address) + "'");
  }
  unsigned port = 0;
  const auto digits = address.substr(colon + 1);
  auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), port);
  if (ec != std::errc() || ptr != digits.data() + digits.size() || port > 65535) {
    fail(ErrorCode::kBadRequest, "bad port in '" + std::string(address) + "'");
  }
  return {std::string(address.substr(0, colon)), static_cast<std::uint16_t>(port)};
}

namespace {

struct AddrInfo {
  addrinfo* head = nullptr;
  ~AddrInfo() {
    if (head) freeaddrinfo(head);
  }
};

void resolve(const HostPort& hp, bool passive, AddrInfo& out) {
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  if (passive) hints.ai_flags = AI_PASSIVE;
  const auto port = std::to_string(hp.port);
  const char* host = hp.host.empty() ? nullptr : hp.host.c_str();
  if (int rc = getaddrinfo(host, port.c_str(), &hints, &out.head); rc != 0) {
    fail(ErrorCode::kConnectionFailed,
         "cannot resolve " + hp.host + ": " + std::string(gai_strerror(rc)));
  }
}

}  // namespace

Socket connect_to(const HostPort& hp, std::chrono::milliseconds timeout) {
  AddrInfo ai;
  resolve(hp, false, ai);
  std::string last_error = "no address";
  for (auto* p = ai.head; p; p = p->ai_next) {
    Socket s(::socket(p->ai_family, p->ai_socktype | SOCK_CLOEXEC, p->ai_protocol));
    if (!s.valid()) continue;
    const int flags = fcntl(s.fd(), F_GETFL, 0);
    fcntl(s.fd(), F_SETFL, flags | O_NONBLOCK);
    int rc = ::connect(s.fd(), p->ai_addr, p->ai_addrlen);
    if (rc != 0 && errno == EINPROGRESS) {
      pollfd pfd{s.fd(), POLLOUT, 0};
      rc = ::poll(&pfd, 1, static_cast<int>(timeout.count()));
      if (rc == 1) {
        int err = 0;
        socklen_t len = sizeof(err);
        getsockopt(s.fd(), SOL_SOCKET, SO_ERROR, &err, &len);
        rc = err == 0 ? 0 : -1;
        errno = err;
      } else {
        if (rc == 0) errno = ETIMEDOUT;
        rc = -1;
      }
    }
    if (rc != 0) {
      last_error = std::strerror(errno);
      continue;
    }
    fcntl(s.fd(), F_SETFL, flags);
    int one = 1;
    setsockopt(s.fd(), IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
    return s;
  }
  fail(ErrorCode::kConnectionFailed,
       "cannot connect to " + hp.host + ":" + std::to_string(hp.port) + ": " + last_error);
}

Socket listen_on(const HostPort& hp, int backlog) {
  AddrInfo ai;
  resolve(hp, true, ai);
  for (auto* p = ai.head; p; p = p->ai_next) {
    Socket s(::socket(p->ai_family, p->ai_socktype | SOCK_CLOEXEC, p->ai_protocol));
    if (!s.valid()) continue;
    int one = 1;
    setsockopt(s.fd(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    if (::bind(s.fd(), p->ai_addr, p->ai_addrlen) != 0) {
      fail(ErrorCode::kConnectionFailed, "bind " + hp.host + ":" + std::to_string(hp.port) +
                                             " failed: " + std::strerror(errno));
    }
    if (::listen(s.fd(), backlog) != 0) {
      fail(ErrorCode::kConnectionFailed, std::string("listen failed: ") + std::strerror(errno));
    }
    return s;
  }
  fail(ErrorCode::kConnectionFailed, "no bindable address for " + hp.host);
}

std::uint16_t local_port(const Socket& s) {
  sockaddr_in addr{};
  socklen_t len = sizeof(addr);
  getsockname(s.fd(), reinterpret_cast<sockaddr*>(&addr), &len);
  return ntohs(addr.sin_port);
}

bool send_all(const Socket& s, std::string_view bytes) {
  while (!bytes.empty()) {
    const auto n = ::send(s.fd(), bytes.data(), bytes.size(), MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR) continue;
      return false;
    }
    bytes.remove_prefix(static_cast<std::size_t>(n));
  }
  return true;
}

bool recv_exact(const Socket& s, char* out, std::size_t n) {
  while (n > 0) {
    const auto got = ::recv(s.fd(), out, n, 0);
    if (got < 0 && errno == EINTR) continue;
    if (got <= 0) return false;
    out += got;
    n -= static_cast<std::size_t>(got);
  }
  return true;
}

std::optional<std::string> recv_frame(const Socket& s) {
  unsigned char header[4];
  if (!recv_exact(s, reinterpret_cast<char*>(header), 4)) return std::nullopt;
  const std::uint32_t len = (std::uint32_t{header[0]} << 24) | (std::uint32_t{header[1]} << 16) |
                            (std::uint32_t{header[2]} << 8) | header[3];
  if (len > wire::kMaxFrameBytes) {
    fail(ErrorCode::kFrameTooLarge, "frame of " + std::to_string(len) + " bytes exceeds cap");
  }
  std::string body(len, '\0');
  if (len > 0 && !recv_exact(s, body.data(), len)) return std::nullopt;
  return body;
}

}  // namespace spacefarm::net
