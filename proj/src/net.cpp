#include "podwatch/net.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <fcntl.h>

namespace podwatch::net {

namespace {
std::string errnoText() { return std::strerror(errno); }
}  // namespace

Socket& Socket::operator=(Socket&& other) noexcept {
  if (this != &other) {
    close();
    fd_ = std::exchange(other.fd_, -1);
  }
  return *this;
}

void Socket::close() {
  if (fd_ >= 0) ::close(fd_);
  fd_ = -1;
}

void Socket::shutdown() {
  if (fd_ >= 0) ::shutdown(fd_, SHUT_RDWR);
}

void Socket::setTimeout(std::chrono::milliseconds timeout) {
  timeval tv{};
  tv.tv_sec = static_cast<time_t>(timeout.count() / 1000);
  tv.tv_usec = static_cast<suseconds_t>((timeout.count() % 1000) * 1000);
  ::setsockopt(fd_, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof tv);
  ::setsockopt(fd_, SOL_SOCKET, SO_SNDTIMEO, &tv, sizeof tv);
}

void Socket::writeAll(std::span<const std::uint8_t> data) {
  std::size_t sent = 0;
  while (sent < data.size()) {
    ssize_t n = ::send(fd_, data.data() + sent, data.size() - sent, MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw ConnectionFailed("send: " + errnoText());
    }
    sent += static_cast<std::size_t>(n);
  }
}

void Socket::writeAll(std::string_view data) {
  writeAll(std::span(reinterpret_cast<const std::uint8_t*>(data.data()), data.size()));
}

void Socket::readExact(std::span<std::uint8_t> data) {
  std::size_t got = 0;
  while (got < data.size()) {
    std::size_t n = readSome(data.subspan(got));
    if (n == 0) throw ConnectionFailed("peer closed connection");
    got += n;
  }
}

std::size_t Socket::readSome(std::span<std::uint8_t> data) {
  for (;;) {
    ssize_t n = ::recv(fd_, data.data(), data.size(), 0);
    if (n >= 0) return static_cast<std::size_t>(n);
    if (errno == EINTR) continue;
    throw ConnectionFailed("recv: " + errnoText());
  }
}

Socket connectTcp(const std::string& host, std::uint16_t port, std::chrono::milliseconds timeout) {
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  if (int rc = ::getaddrinfo(host.c_str(), std::to_string(port).c_str(), &hints, &res); rc != 0)
    throw ConnectionFailed("resolve " + host + ": " + ::gai_strerror(rc));
  Socket sock(::socket(res->ai_family, res->ai_socktype, res->ai_protocol));
  if (!sock.valid()) {
    ::freeaddrinfo(res);
    throw ConnectionFailed("socket: " + errnoText());
  }

  // Non-blocking connect so the timeout applies to the handshake as well.
  int flags = ::fcntl(sock.fd(), F_GETFL, 0);
  ::fcntl(sock.fd(), F_SETFL, flags | O_NONBLOCK);
  int rc = ::connect(sock.fd(), res->ai_addr, res->ai_addrlen);
  ::freeaddrinfo(res);
  if (rc < 0 && errno != EINPROGRESS)
    throw ConnectionFailed("connect " + host + ":" + std::to_string(port) + ": " + errnoText());
  if (rc < 0) {
    pollfd pfd{sock.fd(), POLLOUT, 0};
    int ready = ::poll(&pfd, 1, static_cast<int>(timeout.count()));
    int err = 0;
    socklen_t len = sizeof err;
    ::getsockopt(sock.fd(), SOL_SOCKET, SO_ERROR, &err, &len);
    if (ready <= 0 || err != 0)
      throw ConnectionFailed("connect " + host + ":" + std::to_string(port) + ": " +
                             (ready <= 0 ? std::string("timed out") : std::strerror(err)));
  }
  ::fcntl(sock.fd(), F_SETFL, flags);
  int one = 1;
  ::setsockopt(sock.fd(), IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
  sock.setTimeout(timeout);
  return sock;
}

Listener::Listener(const std::string& host, std::uint16_t port) {
  sock_ = Socket(::socket(AF_INET, SOCK_STREAM, 0));
  if (!sock_.valid()) throw BindFailed("socket: " + errnoText());
  int one = 1;
  ::setsockopt(sock_.fd(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(port);
  if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) throw BindFailed("bad bind address " + host);
  if (::bind(sock_.fd(), reinterpret_cast<sockaddr*>(&addr), sizeof addr) < 0)
    throw BindFailed("bind " + host + ":" + std::to_string(port) + ": " + errnoText());
  if (::listen(sock_.fd(), 64) < 0) throw BindFailed("listen: " + errnoText());
  socklen_t len = sizeof addr;
  ::getsockname(sock_.fd(), reinterpret_cast<sockaddr*>(&addr), &len);
  port_ = ntohs(addr.sin_port);
}

Socket Listener::accept() {
  for (;;) {
    int fd = ::accept(sock_.fd(), nullptr, nullptr);
    if (fd >= 0) {
      int one = 1;
      ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
      return Socket(fd);
    }
    if (errno == EINTR) continue;
    return Socket();
  }
}

void Listener::close() {
  sock_.shutdown();
  sock_.close();
}

bool LineReader::readLine(std::string& line, std::size_t maxLen) {
  for (;;) {
    auto pos = buf_.find('\n');
    if (pos != std::string::npos) {
      line.assign(buf_, 0, pos);
      buf_.erase(0, pos + 1);
      if (!line.empty() && line.back() == '\r') line.pop_back();
      return true;
    }
    if (buf_.size() > maxLen) throw ConnectionFailed("line exceeds limit");
    std::uint8_t chunk[4096];
    std::size_t n = sock_.readSome(chunk);
    if (n == 0) return false;
    buf_.append(reinterpret_cast<const char*>(chunk), n);
  }
}

std::string LineReader::takeBuffered() { return std::exchange(buf_, {}); }

}  // namespace podwatch::net
