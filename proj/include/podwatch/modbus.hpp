#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "podwatch/error.hpp"
#include "podwatch/net.hpp"
#include "podwatch/records.hpp"

namespace podwatch::modbus {

// Modbus TCP read-only client codec (MBAP header + PDU, all fields
// big-endian). Only function codes 0x01 and 0x03 are supported.

enum class Function : std::uint8_t {
  ReadCoils = 0x01,
  ReadHoldingRegisters = 0x03,
};

enum class ExceptionCode : std::uint8_t {
  IllegalFunction = 0x01,
  IllegalDataAddress = 0x02,
  IllegalDataValue = 0x03,
  ServerDeviceFailure = 0x04,
  Acknowledge = 0x05,
  ServerDeviceBusy = 0x06,
  MemoryParityError = 0x08,
  GatewayPathUnavailable = 0x0A,
  GatewayTargetFailedToRespond = 0x0B,
};

const char* exceptionName(ExceptionCode code);

PODWATCH_DEFINE_ERROR(QuantityOutOfRange);
PODWATCH_DEFINE_ERROR(TransactionMismatch);
PODWATCH_DEFINE_ERROR(TruncatedFrame);
PODWATCH_DEFINE_ERROR(MalformedFrame);

class ExceptionResponse : public Error {
 public:
  explicit ExceptionResponse(ExceptionCode code);
  ExceptionCode code() const { return code_; }

 private:
  ExceptionCode code_;
};

inline constexpr std::uint16_t kMaxRegisters = 125;
inline constexpr std::uint16_t kMaxCoils = 2000;
inline constexpr std::size_t kRequestSize = 12;
inline constexpr std::size_t kHeaderSize = 7;
inline constexpr std::uint16_t kDefaultPort = 1502;

struct Request {
  std::uint16_t transactionId = 0;
  std::uint8_t unitId = 0;
  Function function = Function::ReadHoldingRegisters;
  std::uint16_t startAddress = 0;
  std::uint16_t quantity = 1;

  friend bool operator==(const Request&, const Request&) = default;
};

/// Throws QuantityOutOfRange unless quantity is within protocol limits.
void checkQuantity(Function function, std::uint16_t quantity);

std::array<std::uint8_t, kRequestSize> encodeRequest(const Request& req);

using Registers = std::vector<std::uint16_t>;
using Coils = std::vector<bool>;
using Payload = std::variant<Registers, Coils>;

/// Decodes a complete response frame for `expected`.
/// Throws TransactionMismatch, ExceptionResponse, TruncatedFrame or
/// MalformedFrame.
Payload decodeResponse(std::span<const std::uint8_t> frame, const Request& expected);

// Server side of the codec, used by the simulator endpoint.

/// Parses a 12-byte request. Unsupported function codes are returned
/// verbatim in `rawFunction` so the server can answer IllegalFunction.
struct ParsedRequest {
  Request request;
  std::uint8_t rawFunction = 0;
};
ParsedRequest decodeRequest(std::span<const std::uint8_t> frame);

std::vector<std::uint8_t> encodeRegisterResponse(const Request& req, std::span<const std::uint16_t> values);
std::vector<std::uint8_t> encodeCoilResponse(const Request& req, const Coils& values);
std::vector<std::uint8_t> encodeException(std::uint16_t transactionId, std::uint8_t unitId,
                                          std::uint8_t function, ExceptionCode code);

/// Reads one MBAP-framed message (header + declared length) from a socket.
std::vector<std::uint8_t> readFrame(net::Socket& sock);

// ---------------------------------------------------------------------------
// Register maps

struct U16Scaled {
  double scale = 1.0;
  friend bool operator==(const U16Scaled&, const U16Scaled&) = default;
};
struct BitField {
  int bit = 0;
  friend bool operator==(const BitField&, const BitField&) = default;
};
using Encoding = std::variant<U16Scaled, BitField>;

struct RegisterPoint {
  std::string pointId;
  std::uint16_t address = 0;
  Encoding encoding;
  std::string unit;
  std::string zone;

  friend bool operator==(const RegisterPoint&, const RegisterPoint&) = default;
};

double decodePoint(const RegisterPoint& point, std::uint16_t raw);

PODWATCH_DEFINE_ERROR(InvalidRegisterMap);

/// Ordered list of points. Validates: unique pointIds, scale > 0,
/// bit <= 15, and no register shared between a scaled point and anything
/// else (bit-field points may share a register on distinct bits).
class RegisterMap {
 public:
  RegisterMap() = default;
  explicit RegisterMap(std::vector<RegisterPoint> points);

  const std::vector<RegisterPoint>& points() const { return points_; }
  std::size_t size() const { return points_.size(); }
  bool empty() const { return points_.empty(); }

  /// TSV: pointId, address, encoding (u16|bit), scale-or-bit, unit, zone.
  static RegisterMap load(std::istream& in);
  static RegisterMap loadFile(const std::string& path);
  void save(std::ostream& out) const;

 private:
  std::vector<RegisterPoint> points_;
};

// ---------------------------------------------------------------------------
// Client

/// Blocking Modbus TCP client; one outstanding transaction at a time.
class Client {
 public:
  Client(std::string host, std::uint16_t port, std::uint8_t unitId = 1,
         std::chrono::milliseconds timeout = std::chrono::milliseconds(2000));

  Registers readHoldingRegisters(std::uint16_t start, std::uint16_t quantity);
  Coils readCoils(std::uint16_t start, std::uint16_t quantity);
  void close() { sock_.close(); }

 private:
  Payload transact(Function function, std::uint16_t start, std::uint16_t quantity);

  std::string host_;
  std::uint16_t port_;
  std::uint8_t unitId_;
  std::chrono::milliseconds timeout_;
  net::Socket sock_;
  std::uint16_t nextTransaction_ = 1;
};

enum class Batching { Coalesce, PerPoint };

struct PollResult {
  std::vector<SensorReading> readings;  // in map order
  std::vector<std::string> failed;      // pointIds that could not be read
  std::size_t requests = 0;
  bool partial() const { return !failed.empty(); }
};

/// Contiguous register runs of at most `maxRun` registers. Each entry is
/// (start address, quantity).
std::vector<std::pair<std::uint16_t, std::uint16_t>> planBatches(const RegisterMap& map,
                                                                 std::uint16_t maxRun = kMaxRegisters);

/// Polls every point once. All readings carry `cycleTime`. A batch that
/// fails with an exception response is retried register by register so
/// `failed` names exactly the unreadable points. Throws
/// net::ConnectionFailed when the endpoint cannot be reached.
PollResult pollMap(Client& client, const RegisterMap& map, Timestamp cycleTime,
                   const std::string& source = "ecopod", Batching batching = Batching::Coalesce);

}  // namespace podwatch::modbus
