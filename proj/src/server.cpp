#include "podwatch/server.hpp"

#include <openssl/evp.h>
#include <openssl/sha.h>

#include <algorithm>
#include <ctime>
#include <fstream>
#include <iostream>
#include <random>

#include "podwatch/sim.hpp"
#include "podwatch/text.hpp"

namespace podwatch {

namespace {
const char* const kTierNames[] = {"Viewer", "Operator", "Admin"};
const char* const kVerbNames[] = {"Reboot", "Reimage", "RemoveFromScheduler", "ReturnToService", "Comment"};
const char* const kOutcomeNames[] = {"Executed", "Denied", "Failed"};

template <class E, std::size_t N>
E parseName(std::string_view s, const char* const (&names)[N], const char* what) {
  for (std::size_t i = 0; i < N; ++i)
    if (s == names[i]) return static_cast<E>(i);
  throw Error("ParseError", std::string("unknown ") + what + " '" + std::string(s) + "'");
}
}  // namespace

const char* name(Tier t) { return kTierNames[static_cast<int>(t)]; }
const char* name(Verb v) { return kVerbNames[static_cast<int>(v)]; }
const char* name(Outcome o) { return kOutcomeNames[static_cast<int>(o)]; }
Tier tierFromName(std::string_view s) { return parseName<Tier>(s, kTierNames, "tier"); }
Verb verbFromName(std::string_view s) { return parseName<Verb>(s, kVerbNames, "verb"); }

bool allowed(Tier tier, Verb verb) {
  switch (tier) {
    case Tier::Viewer: return false;
    case Tier::Operator: return verb != Verb::Reimage;
    case Tier::Admin: return true;
  }
  return false;
}

// ---------------------------------------------------------------------------
// Auth

AuthTable AuthTable::load(std::istream& in) {
  AuthTable t;
  std::string line;
  int lineNo = 0;
  while (std::getline(in, line)) {
    ++lineNo;
    auto text = trim(line);
    if (text.empty() || text[0] == '#') continue;
    auto f = split(text, '\t');
    if (f.size() != 3) throw Error("ParseError", "token file line " + std::to_string(lineNo) + ": expected token, principal, tier");
    t.add(std::string(trim(f[0])), {std::string(trim(f[1])), tierFromName(trim(f[2]))});
  }
  return t;
}

AuthTable AuthTable::loadFile(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("ParseError", "cannot open token file " + path);
  return load(in);
}

void AuthTable::add(std::string token, Principal p) { tokens_[std::move(token)] = std::move(p); }

Principal AuthTable::authenticate(std::string_view principal, std::string_view token) const {
  auto it = tokens_.find(token);
  if (it == tokens_.end() || it->second.name != principal) throw AuthFailed("bad credential for " + std::string(principal));
  return it->second;
}

// ---------------------------------------------------------------------------
// Audit

nlohmann::json toJson(const AuditEntry& e) {
  return {{"actionId", e.actionId}, {"actor", e.actor},     {"tier", name(e.tier)},         {"verb", name(e.verb)},
          {"target", e.target},     {"comment", e.comment}, {"nodeSnapshot", e.nodeSnapshot}, {"outcome", name(e.outcome)},
          {"reason", e.reason},     {"timestamp", e.timestamp}};
}

AuditLog::AuditLog(std::string path) : path_(std::move(path)) {
  std::ifstream in(path_);
  std::string line;
  while (std::getline(in, line))
    if (!trim(line).empty()) ++count_;
  std::ofstream touch(path_, std::ios::app);
  if (!touch) throw Error("AuditUnavailable", "cannot open audit log " + path_);
}

void AuditLog::append(const AuditEntry& e) {
  std::lock_guard lock(mu_);
  std::ofstream out(path_, std::ios::app);
  out << toJson(e).dump() << '\n';
  out.flush();
  if (!out) throw Error("AuditUnavailable", "audit write failed on " + path_);
  ++count_;
}

std::size_t AuditLog::size() const {
  std::lock_guard lock(mu_);
  return count_;
}

std::vector<nlohmann::json> AuditLog::read(const std::string& path) {
  std::ifstream in(path);
  std::vector<nlohmann::json> out;
  std::string line;
  while (std::getline(in, line))
    if (!trim(line).empty()) out.push_back(nlohmann::json::parse(line));
  return out;
}

// ---------------------------------------------------------------------------
// Simulator adapter

bool SimulatorAdapter::hasHost(const std::string& host) const {
  return sim_.withCluster([&](sim::Cluster& c, double) { return c.hasHost(host); });
}

std::optional<NodeRecord> SimulatorAdapter::snapshot(const std::string& host) const {
  return sim_.withCluster([&](sim::Cluster& c, double clock) -> std::optional<NodeRecord> {
    if (!c.hasHost(host)) return std::nullopt;
    for (auto& r : c.emitTelemetry(static_cast<Timestamp>(clock)))
      if (r.hostname == host) return std::move(r);
    return std::nullopt;
  });
}

void SimulatorAdapter::execute(Verb verb, const std::string& host) {
  sim_.withCluster([&](sim::Cluster& c, double clock) {
    if (!c.hasHost(host)) throw AdapterFailure("simulator has no host " + host);
    switch (verb) {
      case Verb::Reboot: c.reboot(host, clock); break;
      case Verb::Reimage: c.reimage(host, clock); break;
      case Verb::RemoveFromScheduler: c.removeFromScheduler(host); break;
      case Verb::ReturnToService: c.returnToService(host); break;
      case Verb::Comment: break;
    }
  });
}

// ---------------------------------------------------------------------------
// Pull

PullSelector selectorFromJson(const nlohmann::json& j) {
  PullSelector s;
  auto kind = j.at("kind").get<std::string>();
  if (kind == "User") {
    s.kind = SelectorKind::User;
    s.text = j.at("value").get<std::string>();
  } else if (kind == "Job") {
    s.kind = SelectorKind::Job;
    s.text = j.at("value").get<std::string>();
  } else if (kind == "LoadAbove") {
    s.kind = SelectorKind::LoadAbove;
    s.load = j.at("value").get<double>();
  } else if (kind == "Status") {
    s.kind = SelectorKind::Status;
    s.color = colorFromName(j.at("value").get<std::string>());
  } else {
    throw ProtocolViolation("unknown selector kind '" + kind + "'");
  }
  return s;
}

PullResult evaluatePull(const PullSelector& sel, const std::vector<NodeRecord>& records,
                        const std::vector<NodeStatus>& statuses) {
  std::map<std::string_view, Color> color;
  for (const auto& s : statuses) color[s.hostname] = s.color;
  PullResult out;
  std::map<std::string, JobSlice> co;
  for (const auto& r : records) {
    bool match = false;
    switch (sel.kind) {
      case SelectorKind::User:
        match = std::any_of(r.jobs.begin(), r.jobs.end(), [&](const JobSlice& j) { return j.user == sel.text; });
        break;
      case SelectorKind::Job:
        match = std::any_of(r.jobs.begin(), r.jobs.end(), [&](const JobSlice& j) { return j.jobId == sel.text; });
        break;
      case SelectorKind::LoadAbove: match = r.cpuLoad > sel.load; break;
      case SelectorKind::Status: {
        auto it = color.find(r.hostname);
        match = it != color.end() && it->second == sel.color;
        break;
      }
    }
    if (!match) continue;
    out.hosts.push_back(r.hostname);
    for (const auto& j : r.jobs) {
      if (sel.kind == SelectorKind::User && j.user == sel.text) continue;
      if (sel.kind == SelectorKind::Job && j.jobId == sel.text) continue;
      auto& slot = co[j.jobId];
      slot.jobId = j.jobId;
      slot.user = j.user;
      slot.cores += j.cores;
    }
  }
  std::sort(out.hosts.begin(), out.hosts.end());
  out.hosts.erase(std::unique(out.hosts.begin(), out.hosts.end()), out.hosts.end());
  for (auto& [id, j] : co) out.coScheduled.push_back(std::move(j));
  return out;
}

// ---------------------------------------------------------------------------
// Messages

std::string frameMessage(const std::string& frameBytes, bool replay) {
  std::string_view body(frameBytes);
  if (!body.empty() && body.back() == '\n') body.remove_suffix(1);
  std::string out = "{\"frame\":";
  out += body;
  out += replay ? ",\"replay\":true" : ",\"replay\":false";
  out += ",\"type\":\"frame\",\"v\":" + std::to_string(kProtocolVersion) + "}";
  return out;
}

std::string alertMessage(const Alert& a) {
  return canonicalJson({{"type", "alert"}, {"v", kProtocolVersion}, {"alert", toJson(a)}, {"message", a.message()}});
}

std::string errorMessage(const std::string& reason) {
  return canonicalJson({{"type", "error"}, {"v", kProtocolVersion}, {"reason", reason}});
}

// ---------------------------------------------------------------------------
// State owner

StateServer::StateServer(Baseline baseline, AuthTable auth, NodeControl& control, AuditLog& audit,
                         std::size_t queueLimit)
    : baseline_(std::move(baseline)), auth_(std::move(auth)), control_(control), audit_(audit), queueLimit_(queueLimit) {}

StateServer::Outbox& StateServer::sessionLocked(std::uint64_t id) {
  auto it = sessions_.find(id);
  if (it == sessions_.end() || it->second.closed) throw UnknownSession("no open session " + std::to_string(id));
  return it->second;
}

const StateServer::Outbox& StateServer::sessionLocked(std::uint64_t id) const {
  auto it = sessions_.find(id);
  if (it == sessions_.end() || it->second.closed) throw UnknownSession("no open session " + std::to_string(id));
  return it->second;
}

Session StateServer::open(std::string_view principal, std::string_view token) {
  auto p = auth_.authenticate(principal, token);
  std::lock_guard lock(mu_);
  Session s{nextSession_++, p.name, p.tier, clock_ ? clock_() : static_cast<Timestamp>(std::time(nullptr))};
  sessions_[s.id].session = s;
  // A late joiner starts from the current frame.
  if (frame_) sessions_[s.id].queue.push_back(frameMessage(frameBytes_, false));
  return s;
}

void StateServer::close(std::uint64_t id) {
  std::lock_guard lock(mu_);
  if (auto it = sessions_.find(id); it != sessions_.end()) it->second.closed = true;
  cv_.notify_all();
}

bool StateServer::isOpen(std::uint64_t id) const {
  std::lock_guard lock(mu_);
  auto it = sessions_.find(id);
  return it != sessions_.end() && !it->second.closed;
}

std::size_t StateServer::sessionCount() const {
  std::lock_guard lock(mu_);
  return static_cast<std::size_t>(
      std::count_if(sessions_.begin(), sessions_.end(), [](const auto& kv) { return !kv.second.closed; }));
}

bool StateServer::enqueueLocked(Outbox& box, std::string message) {
  if (box.closed) return false;
  if (box.queue.size() >= queueLimit_) {
    box.closed = true;  // slow consumer: drop it rather than stall everyone
    box.queue.clear();
    return false;
  }
  box.queue.push_back(std::move(message));
  return true;
}

DeliveryReport StateServer::publish(const VizFrame& frame, const std::string& frameBytes, std::vector<NodeRecord> records,
                                    std::vector<NodeStatus> statuses, const std::vector<Alert>& raised) {
  DeliveryReport rep;
  std::lock_guard lock(mu_);
  frame_ = frame;
  frameBytes_ = frameBytes;
  records_ = std::move(records);
  statuses_ = std::move(statuses);
  auto msg = frameMessage(frameBytes_, false);
  for (auto& [id, box] : sessions_) {
    if (box.closed) continue;
    bool ok = enqueueLocked(box, msg);
    for (const auto& a : raised) ok = ok && enqueueLocked(box, alertMessage(a));
    (ok ? rep.delivered : rep.disconnected).push_back(id);
  }
  cv_.notify_all();
  return rep;
}

ActionResult StateServer::handleAction(std::uint64_t sessionId, ActionCommand cmd) {
  std::lock_guard lock(mu_);
  const auto& box = sessionLocked(sessionId);
  cmd.actor = box.session.principal;
  if (cmd.actionId.empty()) cmd.actionId = "act" + zeroPad(static_cast<std::int64_t>(nextAction_), 6);
  ++nextAction_;
  Timestamp now = clock_ ? clock_() : static_cast<Timestamp>(std::time(nullptr));
  if (cmd.issuedAt == 0) cmd.issuedAt = now;

  AuditEntry e;
  e.actionId = cmd.actionId;
  e.actor = cmd.actor;
  e.tier = box.session.tier;
  e.verb = cmd.verb;
  e.target = cmd.target;
  e.comment = cmd.comment;
  e.timestamp = cmd.issuedAt;

  // State at issue time: live from the adapter when it can see the host,
  // otherwise the record behind the latest frame.
  std::optional<NodeRecord> rec;
  try {
    rec = control_.snapshot(cmd.target);
  } catch (const Error&) {
  }
  if (!rec)
    for (const auto& r : records_)
      if (r.hostname == cmd.target) rec = r;
  if (rec) e.nodeSnapshot = {{"record", toJson(*rec)}, {"status", toJson(classify(*rec, baseline_))}};

  ActionResult res{cmd.actionId, Outcome::Executed, ""};
  if (!allowed(e.tier, cmd.verb)) {
    res.outcome = Outcome::Denied;
    res.reason = std::string("Denied(") + name(e.tier) + ")";
  } else if (!rec && !control_.hasHost(cmd.target) && !baseline_.host(cmd.target)) {
    res.outcome = Outcome::Failed;
    res.reason = "UnknownTarget";
  } else {
    try {
      control_.execute(cmd.verb, cmd.target);
    } catch (const Error& err) {
      res.outcome = Outcome::Failed;
      res.reason = std::string("AdapterFailure: ") + err.what();
    }
  }
  e.outcome = res.outcome;
  e.reason = res.reason;
  audit_.append(e);
  return res;
}

PullResult StateServer::pullQuery(std::uint64_t sessionId, const PullSelector& sel) const {
  std::lock_guard lock(mu_);
  sessionLocked(sessionId);
  return evaluatePull(sel, records_, statuses_);
}

std::size_t StateServer::requestReplay(std::uint64_t sessionId, Timestamp at, Timestamp before, Timestamp after) {
  if (!isOpen(sessionId)) throw UnknownSession("no open session " + std::to_string(sessionId));
  if (!replay_) throw ProtocolViolation("replay is not available on this server");
  auto frames = replay_(at, before, after);
  std::lock_guard lock(mu_);
  auto& box = sessionLocked(sessionId);
  for (const auto& f : frames) enqueueLocked(box, frameMessage(serializeFrame(f), true));
  cv_.notify_all();
  return frames.size();
}

bool StateServer::next(std::uint64_t sessionId, std::string& message, std::chrono::milliseconds timeout) {
  std::unique_lock lock(mu_);
  auto ready = [&] {
    auto it = sessions_.find(sessionId);
    return it == sessions_.end() || it->second.closed || !it->second.queue.empty();
  };
  cv_.wait_for(lock, timeout, ready);
  auto it = sessions_.find(sessionId);
  if (it == sessions_.end()) return false;
  auto& box = it->second;
  if (!box.queue.empty()) {
    message = std::move(box.queue.front());
    box.queue.pop_front();
    return true;
  }
  if (box.closed) sessions_.erase(it);
  return false;
}

bool StateServer::send(std::uint64_t sessionId, std::string message) {
  std::lock_guard lock(mu_);
  auto it = sessions_.find(sessionId);
  if (it == sessions_.end()) return false;
  bool ok = enqueueLocked(it->second, std::move(message));
  cv_.notify_all();
  return ok;
}

std::optional<VizFrame> StateServer::latestFrame() const {
  std::lock_guard lock(mu_);
  return frame_;
}

// ---------------------------------------------------------------------------
// WebSocket

namespace websocket {

std::string acceptKey(std::string_view clientKey) {
  std::string input(clientKey);
  input += "258EAFA5-E914-47DA-95CA-C5AB0DC85B11";
  unsigned char digest[SHA_DIGEST_LENGTH];
  SHA1(reinterpret_cast<const unsigned char*>(input.data()), input.size(), digest);
  unsigned char out[4 * ((SHA_DIGEST_LENGTH + 2) / 3) + 1];
  int n = EVP_EncodeBlock(out, digest, SHA_DIGEST_LENGTH);
  return std::string(reinterpret_cast<char*>(out), static_cast<std::size_t>(n));
}

namespace {
std::string encode(std::uint8_t opcode, std::string_view payload, bool mask) {
  std::string out;
  out += static_cast<char>(0x80 | opcode);
  std::uint8_t maskBit = mask ? 0x80 : 0;
  auto n = payload.size();
  if (n < 126) {
    out += static_cast<char>(maskBit | n);
  } else if (n <= 0xFFFF) {
    out += static_cast<char>(maskBit | 126);
    out += static_cast<char>(n >> 8);
    out += static_cast<char>(n & 0xFF);
  } else {
    out += static_cast<char>(maskBit | 127);
    for (int i = 7; i >= 0; --i) out += static_cast<char>((static_cast<std::uint64_t>(n) >> (8 * i)) & 0xFF);
  }
  if (!mask) {
    out += payload;
    return out;
  }
  static thread_local std::mt19937 rng{std::random_device{}()};
  std::uint8_t key[4];
  for (auto& k : key) k = static_cast<std::uint8_t>(rng());
  out.append(reinterpret_cast<char*>(key), 4);
  for (std::size_t i = 0; i < n; ++i) out += static_cast<char>(payload[i] ^ key[i % 4]);
  return out;
}
}  // namespace

std::string encodeText(std::string_view payload, bool mask) { return encode(0x1, payload, mask); }
std::string encodeClose() { return encode(0x8, {}, false); }

std::optional<Frame> readFrame(net::Socket& sock, std::string& buf) {
  std::size_t pos = 0;
  auto need = [&](std::size_t n) {
    while (buf.size() < pos + n) {
      std::uint8_t chunk[4096];
      auto got = sock.readSome(chunk);
      if (got == 0) return false;
      buf.append(reinterpret_cast<char*>(chunk), got);
    }
    return true;
  };
  Frame out;
  bool fin = false;
  while (!fin) {
    if (!need(2)) {
      if (pos == 0 && buf.empty()) return std::nullopt;
      throw net::ConnectionFailed("websocket frame truncated");
    }
    auto b0 = static_cast<std::uint8_t>(buf[pos]);
    auto b1 = static_cast<std::uint8_t>(buf[pos + 1]);
    pos += 2;
    fin = b0 & 0x80;
    std::uint8_t opcode = b0 & 0x0F;
    if (opcode != 0) out.opcode = opcode;
    std::uint64_t len = b1 & 0x7F;
    if (len == 126 || len == 127) {
      std::size_t bytes = len == 126 ? 2 : 8;
      if (!need(bytes)) throw net::ConnectionFailed("websocket frame truncated");
      len = 0;
      for (std::size_t i = 0; i < bytes; ++i) len = (len << 8) | static_cast<std::uint8_t>(buf[pos + i]);
      pos += bytes;
    }
    if (len > (64u << 20)) throw ProtocolViolation("websocket frame too large");
    std::uint8_t key[4] = {0, 0, 0, 0};
    bool masked = b1 & 0x80;
    if (masked) {
      if (!need(4)) throw net::ConnectionFailed("websocket frame truncated");
      for (int i = 0; i < 4; ++i) key[i] = static_cast<std::uint8_t>(buf[pos + i]);
      pos += 4;
    }
    if (!need(len)) throw net::ConnectionFailed("websocket frame truncated");
    for (std::uint64_t i = 0; i < len; ++i) out.payload += static_cast<char>(buf[pos + i] ^ (masked ? key[i % 4] : 0));
    pos += len;
  }
  buf.erase(0, pos);
  return out;
}

}  // namespace websocket

// ---------------------------------------------------------------------------
// Protocol server

struct ProtocolServer::Conn {
  net::Socket sock;
  std::thread thread;
};

ProtocolServer::ProtocolServer(StateServer& state, const std::string& host, std::uint16_t port)
    : state_(state), listener_(host, port) {
  acceptor_ = std::thread([this] { acceptLoop(); });
}

ProtocolServer::~ProtocolServer() { stop(); }

void ProtocolServer::stop() {
  if (stopping_.exchange(true)) return;
  listener_.close();
  if (acceptor_.joinable()) acceptor_.join();
  std::vector<std::shared_ptr<Conn>> conns;
  {
    std::lock_guard lock(mu_);
    conns.swap(conns_);
  }
  for (auto& c : conns) c->sock.shutdown();
  for (auto& c : conns)
    if (c->thread.joinable()) c->thread.join();
}

void ProtocolServer::acceptLoop() {
  while (!stopping_) {
    net::Socket sock;
    try {
      sock = listener_.accept();
    } catch (const Error&) {
      if (stopping_) return;
      continue;
    }
    if (!sock.valid()) return;
    auto conn = std::make_shared<Conn>();
    conn->sock = std::move(sock);
    std::lock_guard lock(mu_);
    if (stopping_) return;
    conn->thread = std::thread([this, conn] { serve(conn); });
    conns_.push_back(conn);
  }
}

namespace {

std::string headerValue(const std::vector<std::string>& headers, std::string_view name) {
  for (const auto& h : headers) {
    auto colon = h.find(':');
    if (colon == std::string::npos || colon != name.size()) continue;
    bool same = std::equal(name.begin(), name.end(), h.begin(),
                           [](char a, char b) { return std::tolower(a) == std::tolower(b); });
    if (same) return std::string(trim(std::string_view(h).substr(colon + 1)));
  }
  return {};
}

nlohmann::json reply(std::string_view type, const nlohmann::json& request) {
  nlohmann::json j{{"type", type}, {"v", kProtocolVersion}};
  if (request.contains("id")) j["id"] = request["id"];
  return j;
}

}  // namespace

void ProtocolServer::serve(std::shared_ptr<Conn> conn) {
  auto& sock = conn->sock;
  bool ws = false;
  std::string wsBuf;
  std::mutex writeMu;
  net::LineReader lines(sock);

  auto write = [&](const std::string& msg) {
    std::lock_guard lock(writeMu);
    if (ws) sock.writeAll(websocket::encodeText(msg, false));
    else sock.writeAll(msg + "\n");
  };

  std::optional<std::string> first;
  auto receive = [&]() -> std::optional<std::string> {
    if (first) return std::exchange(first, std::nullopt);
    if (ws) {
      while (true) {
        auto f = websocket::readFrame(sock, wsBuf);
        if (!f || f->opcode == 0x8) return std::nullopt;
        if (f->opcode == 0x9) {
          std::lock_guard lock(writeMu);
          std::string pong;
          pong += static_cast<char>(0x8A);
          pong += static_cast<char>(0);
          sock.writeAll(pong);
          continue;
        }
        if (f->opcode == 0x1) return f->payload;
      }
    }
    std::string line;
    if (!lines.readLine(line)) return std::nullopt;
    return line;
  };

  std::uint64_t session = 0;
  std::thread writer;
  try {
    std::string line;
    if (!lines.readLine(line)) return;
    if (startsWith(line, "GET ")) {
      std::vector<std::string> headers;
      std::string h;
      while (lines.readLine(h) && !h.empty()) headers.push_back(h);
      auto key = headerValue(headers, "Sec-WebSocket-Key");
      if (key.empty()) {
        sock.writeAll(std::string_view("HTTP/1.1 400 Bad Request\r\nConnection: close\r\n\r\n"));
        return;
      }
      sock.writeAll("HTTP/1.1 101 Switching Protocols\r\nUpgrade: websocket\r\nConnection: Upgrade\r\n"
                    "Sec-WebSocket-Accept: " + websocket::acceptKey(key) + "\r\n\r\n");
      ws = true;
      wsBuf = lines.takeBuffered();
    } else {
      first = line;
    }

    auto helloText = receive();
    if (!helloText) return;
    nlohmann::json hello;
    try {
      hello = nlohmann::json::parse(*helloText);
    } catch (const nlohmann::json::exception&) {
      write(errorMessage("ProtocolViolation: first message is not JSON"));
      return;
    }
    if (hello.value("type", "") != "hello") {
      write(errorMessage("ProtocolViolation: expected hello"));
      return;
    }
    Session s;
    try {
      auto cred = hello.contains("token") ? hello["token"] : hello.value("credential", nlohmann::json(""));
      s = state_.open(hello.value("principal", ""), cred.is_string() ? cred.get<std::string>() : "");
    } catch (const AuthFailed& e) {
      write(canonicalJson({{"type", "auth_result"}, {"v", kProtocolVersion}, {"ok", false}, {"reason", "AuthFailed"}}));
      return;
    }
    session = s.id;
    write(canonicalJson({{"type", "auth_result"},
                         {"v", kProtocolVersion},
                         {"ok", true},
                         {"tier", name(s.tier)},
                         {"principal", s.principal},
                         {"sessionId", s.id}}));

    writer = std::thread([&, session] {
      std::string msg;
      while (true) {
        if (state_.next(session, msg, std::chrono::milliseconds(200))) {
          try {
            write(msg);
          } catch (const Error&) {
            state_.close(session);
          }
        } else if (!state_.isOpen(session)) {
          // drained after close, or dropped for overflow
          sock.shutdown();
          return;
        }
      }
    });

    while (auto text = receive()) {
      nlohmann::json req;
      try {
        req = nlohmann::json::parse(*text);
      } catch (const nlohmann::json::exception&) {
        state_.send(session, errorMessage("ProtocolViolation: message is not JSON"));
        break;
      }
      auto type = req.value("type", "");
      try {
        if (type == "action") {
          ActionCommand cmd;
          cmd.actionId = req.value("actionId", "");
          cmd.verb = verbFromName(req.at("verb").get<std::string>());
          cmd.target = req.at("target").get<std::string>();
          cmd.comment = req.value("comment", "");
          auto res = state_.handleAction(session, cmd);
          auto out = reply("action_result", req);
          out["actionId"] = res.actionId;
          out["outcome"] = name(res.outcome);
          out["reason"] = res.reason;
          state_.send(session, canonicalJson(out));
        } else if (type == "pull") {
          auto res = state_.pullQuery(session, selectorFromJson(req.at("selector")));
          auto out = reply("pull_result", req);
          out["hosts"] = res.hosts;
          nlohmann::json jobs = nlohmann::json::array();
          for (const auto& j : res.coScheduled) jobs.push_back({{"jobId", j.jobId}, {"user", j.user}, {"cores", j.cores}});
          out["coScheduled"] = jobs;
          state_.send(session, canonicalJson(out));
        } else if (type == "replay") {
          auto n = state_.requestReplay(session, req.at("at").get<Timestamp>(), req.value("before", Timestamp{0}),
                                        req.value("after", Timestamp{0}));
          auto out = reply("replay", req);
          out["frames"] = n;
          state_.send(session, canonicalJson(out));
        } else if (type == "bye") {
          break;
        } else {
          state_.send(session, errorMessage("ProtocolViolation: unknown message type '" + type + "'"));
          break;
        }
      } catch (const nlohmann::json::exception& e) {
        state_.send(session, errorMessage(std::string("ProtocolViolation: ") + e.what()));
        break;
      } catch (const ProtocolViolation& e) {
        state_.send(session, errorMessage(std::string("ProtocolViolation: ") + e.what()));
        break;
      } catch (const UnknownSession&) {
        break;
      } catch (const Error& e) {
        // recoverable: report and keep the session
        auto out = reply("error", req);
        out["reason"] = e.kind() + ": " + e.what();
        state_.send(session, canonicalJson(out));
      }
    }
  } catch (const Error& e) {
    if (!stopping_) std::cerr << "podwatch: connection error: " << e.what() << '\n';
  }
  if (session) state_.close(session);
  if (writer.joinable()) writer.join();
  if (ws) {
    try {
      sock.writeAll(websocket::encodeClose());
    } catch (const Error&) {
    }
  }
  sock.shutdown();
}

// ---------------------------------------------------------------------------
// Client

ProtocolClient::ProtocolClient(const std::string& host, std::uint16_t port)
    : sock_(net::connectTcp(host, port, std::chrono::milliseconds(5000))) {}

void ProtocolClient::send(const nlohmann::json& message) { sock_.writeAll(message.dump() + "\n"); }

std::optional<nlohmann::json> ProtocolClient::receive(std::chrono::milliseconds timeout) {
  auto deadline = std::chrono::steady_clock::now() + timeout;
  while (true) {
    auto nl = buffer_.find('\n');
    if (nl != std::string::npos) {
      auto line = buffer_.substr(0, nl);
      buffer_.erase(0, nl + 1);
      return nlohmann::json::parse(line);
    }
    auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
    if (left.count() <= 0) return std::nullopt;
    sock_.setTimeout(left);
    std::uint8_t chunk[65536];
    std::size_t got;
    try {
      got = sock_.readSome(chunk);
    } catch (const net::ConnectionFailed&) {
      return std::nullopt;  // timeout
    }
    if (got == 0) return std::nullopt;
    buffer_.append(reinterpret_cast<char*>(chunk), got);
  }
}

std::optional<nlohmann::json> ProtocolClient::expect(std::string_view type, std::chrono::milliseconds timeout) {
  auto deadline = std::chrono::steady_clock::now() + timeout;
  while (true) {
    auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
    if (left.count() <= 0) return std::nullopt;
    auto m = receive(left);
    if (!m) return std::nullopt;
    if ((*m).value("type", "") == type) return m;
  }
}

}  // namespace podwatch
