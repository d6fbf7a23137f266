#pragma once

#include <chrono>
#include <cstdint>
#include <span>
#include <string>
#include <utility>

#include "podwatch/error.hpp"

namespace podwatch::net {

PODWATCH_DEFINE_ERROR(ConnectionFailed);
PODWATCH_DEFINE_ERROR(BindFailed);

/// Owning TCP socket descriptor.
class Socket {
 public:
  Socket() = default;
  explicit Socket(int fd) : fd_(fd) {}
  Socket(Socket&& other) noexcept : fd_(std::exchange(other.fd_, -1)) {}
  Socket& operator=(Socket&& other) noexcept;
  Socket(const Socket&) = delete;
  Socket& operator=(const Socket&) = delete;
  ~Socket() { close(); }

  int fd() const { return fd_; }
  bool valid() const { return fd_ >= 0; }
  void close();
  /// Wakes any thread blocked in read on this socket.
  void shutdown();

  void setTimeout(std::chrono::milliseconds timeout);

  /// Throws ConnectionFailed on error or peer close.
  void writeAll(std::span<const std::uint8_t> data);
  void writeAll(std::string_view data);
  /// Reads exactly data.size() bytes; throws ConnectionFailed on short read.
  void readExact(std::span<std::uint8_t> data);
  /// Returns 0 on orderly close.
  std::size_t readSome(std::span<std::uint8_t> data);

 private:
  int fd_ = -1;
};

Socket connectTcp(const std::string& host, std::uint16_t port,
                  std::chrono::milliseconds timeout = std::chrono::milliseconds(2000));

/// Listening socket bound to host:port; port 0 picks an ephemeral port.
class Listener {
 public:
  Listener(const std::string& host, std::uint16_t port);
  std::uint16_t port() const { return port_; }
  /// Blocks until a client connects; returns an invalid socket once closed.
  Socket accept();
  void close();

 private:
  Socket sock_;
  std::uint16_t port_ = 0;
};

/// Buffered line reader over a socket ('\n' terminated, '\r' stripped).
class LineReader {
 public:
  explicit LineReader(Socket& sock) : sock_(sock) {}
  /// False on orderly close before a full line.
  bool readLine(std::string& line, std::size_t maxLen = 16 << 20);
  /// Bytes already buffered past the last line.
  std::string takeBuffered();

 private:
  Socket& sock_;
  std::string buf_;
};

}  // namespace podwatch::net
