#include "podwatch/modbus.hpp"

#include <algorithm>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <set>

#include "podwatch/text.hpp"

namespace podwatch::modbus {

namespace {

void putU16(std::uint8_t* p, std::uint16_t v) {
  p[0] = static_cast<std::uint8_t>(v >> 8);
  p[1] = static_cast<std::uint8_t>(v & 0xFF);
}

std::uint16_t getU16(const std::uint8_t* p) {
  return static_cast<std::uint16_t>((p[0] << 8) | p[1]);
}

std::vector<std::uint8_t> frameWithPdu(std::uint16_t tx, std::uint8_t unit, std::span<const std::uint8_t> pdu) {
  std::vector<std::uint8_t> out(kHeaderSize + pdu.size());
  putU16(&out[0], tx);
  putU16(&out[2], 0);
  putU16(&out[4], static_cast<std::uint16_t>(pdu.size() + 1));
  out[6] = unit;
  std::copy(pdu.begin(), pdu.end(), out.begin() + kHeaderSize);
  return out;
}

}  // namespace

const char* exceptionName(ExceptionCode code) {
  switch (code) {
    case ExceptionCode::IllegalFunction: return "IllegalFunction";
    case ExceptionCode::IllegalDataAddress: return "IllegalDataAddress";
    case ExceptionCode::IllegalDataValue: return "IllegalDataValue";
    case ExceptionCode::ServerDeviceFailure: return "ServerDeviceFailure";
    case ExceptionCode::Acknowledge: return "Acknowledge";
    case ExceptionCode::ServerDeviceBusy: return "ServerDeviceBusy";
    case ExceptionCode::MemoryParityError: return "MemoryParityError";
    case ExceptionCode::GatewayPathUnavailable: return "GatewayPathUnavailable";
    case ExceptionCode::GatewayTargetFailedToRespond: return "GatewayTargetFailedToRespond";
  }
  return "Unknown";
}

ExceptionResponse::ExceptionResponse(ExceptionCode code)
    : Error("ExceptionResponse", std::string("modbus exception ") + exceptionName(code)), code_(code) {}

void checkQuantity(Function function, std::uint16_t quantity) {
  std::uint16_t limit = function == Function::ReadCoils ? kMaxCoils : kMaxRegisters;
  if (quantity < 1 || quantity > limit)
    throw QuantityOutOfRange("quantity " + std::to_string(quantity) + " outside [1, " + std::to_string(limit) + "]");
}

std::array<std::uint8_t, kRequestSize> encodeRequest(const Request& req) {
  checkQuantity(req.function, req.quantity);
  std::array<std::uint8_t, kRequestSize> out{};
  putU16(&out[0], req.transactionId);
  putU16(&out[2], 0);  // protocol id
  putU16(&out[4], 6);  // unit + function + address + quantity
  out[6] = req.unitId;
  out[7] = static_cast<std::uint8_t>(req.function);
  putU16(&out[8], req.startAddress);
  putU16(&out[10], req.quantity);
  return out;
}

Payload decodeResponse(std::span<const std::uint8_t> frame, const Request& expected) {
  if (frame.size() < kHeaderSize + 1) throw TruncatedFrame("frame shorter than MBAP header + function");
  if (getU16(&frame[0]) != expected.transactionId)
    throw TransactionMismatch("response transaction " + std::to_string(getU16(&frame[0])) + " != request " +
                              std::to_string(expected.transactionId));
  if (getU16(&frame[2]) != 0) throw MalformedFrame("non-zero protocol id");
  std::size_t declared = getU16(&frame[4]);
  if (frame.size() < 6 + declared) throw TruncatedFrame("frame shorter than declared length");
  if (frame.size() > 6 + declared) throw MalformedFrame("trailing bytes after declared length");
  if (frame[6] != expected.unitId) throw MalformedFrame("unit id mismatch");

  std::uint8_t fn = frame[7];
  auto expectedFn = static_cast<std::uint8_t>(expected.function);
  if (fn == (expectedFn | 0x80)) {
    if (frame.size() < kHeaderSize + 2) throw TruncatedFrame("exception frame without code");
    throw ExceptionResponse(static_cast<ExceptionCode>(frame[8]));
  }
  if (fn != expectedFn) throw MalformedFrame("unexpected function code " + std::to_string(fn));
  if (frame.size() < kHeaderSize + 2) throw TruncatedFrame("missing byte count");
  std::size_t byteCount = frame[8];
  auto data = frame.subspan(kHeaderSize + 2);
  if (data.size() < byteCount) throw TruncatedFrame("payload shorter than byte count");

  if (expected.function == Function::ReadHoldingRegisters) {
    if (byteCount != 2u * expected.quantity) throw MalformedFrame("register byte count mismatch");
    Registers regs(expected.quantity);
    for (std::size_t i = 0; i < regs.size(); ++i) regs[i] = getU16(&data[2 * i]);
    return regs;
  }
  if (byteCount != (expected.quantity + 7u) / 8u) throw MalformedFrame("coil byte count mismatch");
  Coils coils(expected.quantity);
  for (std::size_t i = 0; i < coils.size(); ++i) coils[i] = (data[i / 8] >> (i % 8)) & 1;
  return coils;
}

ParsedRequest decodeRequest(std::span<const std::uint8_t> frame) {
  if (frame.size() < kRequestSize) throw TruncatedFrame("request shorter than 12 bytes");
  if (getU16(&frame[2]) != 0) throw MalformedFrame("non-zero protocol id");
  if (getU16(&frame[4]) != 6) throw MalformedFrame("unexpected request length");
  ParsedRequest out;
  out.rawFunction = frame[7];
  out.request.transactionId = getU16(&frame[0]);
  out.request.unitId = frame[6];
  out.request.function = static_cast<Function>(frame[7]);
  out.request.startAddress = getU16(&frame[8]);
  out.request.quantity = getU16(&frame[10]);
  return out;
}

std::vector<std::uint8_t> encodeRegisterResponse(const Request& req, std::span<const std::uint16_t> values) {
  std::vector<std::uint8_t> pdu(2 + 2 * values.size());
  pdu[0] = static_cast<std::uint8_t>(Function::ReadHoldingRegisters);
  pdu[1] = static_cast<std::uint8_t>(2 * values.size());
  for (std::size_t i = 0; i < values.size(); ++i) putU16(&pdu[2 + 2 * i], values[i]);
  return frameWithPdu(req.transactionId, req.unitId, pdu);
}

std::vector<std::uint8_t> encodeCoilResponse(const Request& req, const Coils& values) {
  std::size_t bytes = (values.size() + 7) / 8;
  std::vector<std::uint8_t> pdu(2 + bytes, 0);
  pdu[0] = static_cast<std::uint8_t>(Function::ReadCoils);
  pdu[1] = static_cast<std::uint8_t>(bytes);
  for (std::size_t i = 0; i < values.size(); ++i)
    if (values[i]) pdu[2 + i / 8] |= static_cast<std::uint8_t>(1u << (i % 8));
  return frameWithPdu(req.transactionId, req.unitId, pdu);
}

std::vector<std::uint8_t> encodeException(std::uint16_t transactionId, std::uint8_t unitId, std::uint8_t function,
                                          ExceptionCode code) {
  std::uint8_t pdu[2] = {static_cast<std::uint8_t>(function | 0x80), static_cast<std::uint8_t>(code)};
  return frameWithPdu(transactionId, unitId, pdu);
}

std::vector<std::uint8_t> readFrame(net::Socket& sock) {
  std::vector<std::uint8_t> frame(6);
  sock.readExact(frame);
  std::size_t rest = getU16(&frame[4]);
  if (rest == 0 || rest > 254) throw MalformedFrame("bad MBAP length " + std::to_string(rest));
  frame.resize(6 + rest);
  sock.readExact(std::span(frame).subspan(6));
  return frame;
}

// ---------------------------------------------------------------------------

double decodePoint(const RegisterPoint& point, std::uint16_t raw) {
  if (const auto* s = std::get_if<U16Scaled>(&point.encoding)) return raw * s->scale;
  const auto& b = std::get<BitField>(point.encoding);
  return ((raw >> b.bit) & 1u) ? 1.0 : 0.0;
}

RegisterMap::RegisterMap(std::vector<RegisterPoint> points) : points_(std::move(points)) {
  std::set<std::string> ids;
  std::map<std::uint16_t, int> scaledAt;          // address -> count of scaled points
  std::map<std::uint16_t, std::uint16_t> bitsAt;  // address -> used bit mask
  for (const auto& p : points_) {
    if (p.pointId.empty()) throw InvalidRegisterMap("empty pointId");
    if (!ids.insert(p.pointId).second) throw InvalidRegisterMap("duplicate pointId " + p.pointId);
    if (const auto* s = std::get_if<U16Scaled>(&p.encoding)) {
      if (!(s->scale > 0)) throw InvalidRegisterMap(p.pointId + ": scale must be > 0");
      if (++scaledAt[p.address] > 1 || bitsAt.count(p.address))
        throw InvalidRegisterMap(p.pointId + ": register " + std::to_string(p.address) + " already in use");
    } else {
      int bit = std::get<BitField>(p.encoding).bit;
      if (bit < 0 || bit > 15) throw InvalidRegisterMap(p.pointId + ": bit must be in 0..15");
      if (scaledAt.count(p.address))
        throw InvalidRegisterMap(p.pointId + ": register " + std::to_string(p.address) + " already in use");
      auto& mask = bitsAt[p.address];
      if (mask & (1u << bit)) throw InvalidRegisterMap(p.pointId + ": bit already mapped");
      mask = static_cast<std::uint16_t>(mask | (1u << bit));
    }
  }
}

RegisterMap RegisterMap::load(std::istream& in) {
  std::vector<RegisterPoint> points;
  std::string line;
  int lineNo = 0;
  while (std::getline(in, line)) {
    ++lineNo;
    auto body = trim(line);
    if (body.empty() || body.front() == '#') continue;
    auto f = split(body, '\t');
    if (f.size() != 6)
      throw InvalidRegisterMap("line " + std::to_string(lineNo) + ": expected 6 tab-separated fields");
    try {
      RegisterPoint p;
      p.pointId = std::string(f[0]);
      auto addr = parseInteger(f[1]);
      if (addr < 0 || addr > 0xFFFF) throw InvalidRegisterMap("address out of range");
      p.address = static_cast<std::uint16_t>(addr);
      if (f[2] == "u16")
        p.encoding = U16Scaled{parseNumber(f[3])};
      else if (f[2] == "bit")
        p.encoding = BitField{static_cast<int>(parseInteger(f[3]))};
      else
        throw InvalidRegisterMap("unknown encoding '" + std::string(f[2]) + "'");
      p.unit = std::string(f[4]);
      p.zone = std::string(f[5]);
      points.push_back(std::move(p));
    } catch (const Error& e) {
      throw InvalidRegisterMap("line " + std::to_string(lineNo) + ": " + e.what());
    }
  }
  return RegisterMap(std::move(points));
}

RegisterMap RegisterMap::loadFile(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidRegisterMap("cannot open " + path);
  return load(in);
}

void RegisterMap::save(std::ostream& out) const {
  out << "# pointId\taddress\tencoding\tscale|bit\tunit\tzone\n";
  for (const auto& p : points_) {
    out << p.pointId << '\t' << p.address << '\t';
    if (const auto* s = std::get_if<U16Scaled>(&p.encoding))
      out << "u16\t" << formatNumber(s->scale);
    else
      out << "bit\t" << std::get<BitField>(p.encoding).bit;
    out << '\t' << p.unit << '\t' << p.zone << '\n';
  }
}

// ---------------------------------------------------------------------------

Client::Client(std::string host, std::uint16_t port, std::uint8_t unitId, std::chrono::milliseconds timeout)
    : host_(std::move(host)), port_(port), unitId_(unitId), timeout_(timeout) {}

Payload Client::transact(Function function, std::uint16_t start, std::uint16_t quantity) {
  Request req{nextTransaction_++, unitId_, function, start, quantity};
  auto bytes = encodeRequest(req);
  if (!sock_.valid()) sock_ = net::connectTcp(host_, port_, timeout_);
  try {
    sock_.writeAll(bytes);
    auto frame = readFrame(sock_);
    return decodeResponse(frame, req);
  } catch (const net::ConnectionFailed&) {
    sock_.close();
    throw;
  } catch (const TruncatedFrame&) {
    sock_.close();
    throw;
  }
}

Registers Client::readHoldingRegisters(std::uint16_t start, std::uint16_t quantity) {
  return std::get<Registers>(transact(Function::ReadHoldingRegisters, start, quantity));
}

Coils Client::readCoils(std::uint16_t start, std::uint16_t quantity) {
  return std::get<Coils>(transact(Function::ReadCoils, start, quantity));
}

std::vector<std::pair<std::uint16_t, std::uint16_t>> planBatches(const RegisterMap& map, std::uint16_t maxRun) {
  std::set<std::uint16_t> addresses;
  for (const auto& p : map.points()) addresses.insert(p.address);
  std::vector<std::pair<std::uint16_t, std::uint16_t>> out;
  for (auto a : addresses) {
    if (!out.empty()) {
      auto& [start, qty] = out.back();
      if (static_cast<std::uint32_t>(start) + qty == a && qty < maxRun) {
        ++qty;
        continue;
      }
    }
    out.emplace_back(a, 1);
  }
  return out;
}

PollResult pollMap(Client& client, const RegisterMap& map, Timestamp cycleTime, const std::string& source,
                   Batching batching) {
  PollResult result;
  std::map<std::uint16_t, std::uint16_t> raw;
  std::set<std::uint16_t> dead;

  auto readRun = [&](std::uint16_t start, std::uint16_t qty) {
    ++result.requests;
    auto regs = client.readHoldingRegisters(start, qty);
    for (std::uint16_t i = 0; i < qty; ++i) raw[static_cast<std::uint16_t>(start + i)] = regs[i];
  };

  std::vector<std::pair<std::uint16_t, std::uint16_t>> runs;
  if (batching == Batching::Coalesce) {
    runs = planBatches(map);
  } else {
    for (const auto& p : map.points()) runs.emplace_back(p.address, 1);
  }

  for (auto [start, qty] : runs) {
    try {
      readRun(start, qty);
    } catch (const ExceptionResponse&) {
      if (qty == 1) {
        dead.insert(start);
        continue;
      }
      for (std::uint16_t i = 0; i < qty; ++i) {
        auto addr = static_cast<std::uint16_t>(start + i);
        try {
          readRun(addr, 1);
        } catch (const ExceptionResponse&) {
          dead.insert(addr);
        }
      }
    }
  }

  for (const auto& p : map.points()) {
    auto it = raw.find(p.address);
    if (it == raw.end()) {
      result.failed.push_back(p.pointId);
      continue;
    }
    result.readings.push_back({source, p.pointId, cycleTime, decodePoint(p, it->second), p.unit, p.zone});
  }
  return result;
}

}  // namespace podwatch::modbus
