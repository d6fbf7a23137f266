#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <iosfwd>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "podwatch/baseline.hpp"
#include "podwatch/net.hpp"
#include "podwatch/records.hpp"
#include "podwatch/vizgen.hpp"

namespace podwatch::sim {
class Simulation;
}

namespace podwatch {

PODWATCH_DEFINE_ERROR(AuthFailed);
PODWATCH_DEFINE_ERROR(ProtocolViolation);
PODWATCH_DEFINE_ERROR(UnknownSession);
PODWATCH_DEFINE_ERROR(AdapterFailure);

inline constexpr int kProtocolVersion = 1;

enum class Tier { Viewer, Operator, Admin };
enum class Verb { Reboot, Reimage, RemoveFromScheduler, ReturnToService, Comment };
enum class Outcome { Executed, Denied, Failed };

const char* name(Tier t);
const char* name(Verb v);
const char* name(Outcome o);
Tier tierFromName(std::string_view s);
Verb verbFromName(std::string_view s);

/// Viewer: nothing. Operator: everything but Reimage. Admin: everything.
bool allowed(Tier tier, Verb verb);

struct Principal {
  std::string name;
  Tier tier = Tier::Viewer;
};

/// Static tokens: `token<TAB>principal<TAB>tier` per line, '#' comments.
class AuthTable {
 public:
  static AuthTable load(std::istream& in);
  static AuthTable loadFile(const std::string& path);
  void add(std::string token, Principal p);
  /// The principal name must match the token's owner. Throws AuthFailed.
  Principal authenticate(std::string_view principal, std::string_view token) const;

 private:
  std::map<std::string, Principal, std::less<>> tokens_;
};

struct ActionCommand {
  std::string actionId;  // assigned by the server when empty
  std::string actor;
  Verb verb = Verb::Comment;
  std::string target;
  std::string comment;
  Timestamp issuedAt = 0;
};

struct ActionResult {
  std::string actionId;
  Outcome outcome = Outcome::Failed;
  std::string reason;  // Denied(tier), UnknownTarget, AdapterFailure: ...
};

struct AuditEntry {
  std::string actionId;
  std::string actor;
  Tier tier = Tier::Viewer;
  Verb verb = Verb::Comment;
  std::string target;
  std::string comment;
  nlohmann::json nodeSnapshot;  // {"record": NodeRecord, "status": NodeStatus} or null
  Outcome outcome = Outcome::Failed;
  std::string reason;
  Timestamp timestamp = 0;
};

nlohmann::json toJson(const AuditEntry& e);

/// Append-only JSONL file with a single appender.
class AuditLog {
 public:
  explicit AuditLog(std::string path);
  void append(const AuditEntry& e);
  std::size_t size() const;
  const std::string& path() const { return path_; }
  static std::vector<nlohmann::json> read(const std::string& path);

 private:
  std::string path_;
  mutable std::mutex mu_;
  std::size_t count_ = 0;
};

/// Executes actions in the physical (or simulated) world.
class NodeControl {
 public:
  virtual ~NodeControl() = default;
  virtual bool hasHost(const std::string& host) const = 0;
  /// Live state of a host when the adapter can observe it.
  virtual std::optional<NodeRecord> snapshot(const std::string& host) const = 0;
  /// Throws AdapterFailure.
  virtual void execute(Verb verb, const std::string& host) = 0;
};

class SimulatorAdapter : public NodeControl {
 public:
  explicit SimulatorAdapter(sim::Simulation& sim) : sim_(sim) {}
  bool hasHost(const std::string& host) const override;
  std::optional<NodeRecord> snapshot(const std::string& host) const override;
  void execute(Verb verb, const std::string& host) override;

 private:
  sim::Simulation& sim_;
};

/// Placeholder for real node management; refuses every action.
class ShellAdapter : public NodeControl {
 public:
  bool hasHost(const std::string&) const override { return false; }
  std::optional<NodeRecord> snapshot(const std::string&) const override { return std::nullopt; }
  void execute(Verb, const std::string& host) override {
    throw AdapterFailure("shell adapter is disabled; refusing to act on " + host);
  }
};

enum class SelectorKind { User, Job, LoadAbove, Status };
struct PullSelector {
  SelectorKind kind = SelectorKind::User;
  std::string text;    // user name or job id
  double load = 0;     // LoadAbove: cpuLoad > load
  Color color = Color::Red;
};
PullSelector selectorFromJson(const nlohmann::json& j);

struct PullResult {
  std::vector<std::string> hosts;  // sorted
  /// Jobs on the matched hosts other than the one queried, for notifying
  /// their owners.
  std::vector<JobSlice> coScheduled;  // jobId, user, cores summed over matched hosts
};

/// Pure selector evaluation over one frame's records and statuses.
PullResult evaluatePull(const PullSelector& sel, const std::vector<NodeRecord>& records,
                        const std::vector<NodeStatus>& statuses);

struct DeliveryReport {
  std::vector<std::uint64_t> delivered;     // session ids
  std::vector<std::uint64_t> disconnected;  // dropped for overflow
};

struct Session {
  std::uint64_t id = 0;
  std::string principal;
  Tier tier = Tier::Viewer;
  Timestamp connectedAt = 0;
};

/// Single owner of the authoritative state: latest frame, its backing
/// records, sessions and their outbound queues. Every mutation happens
/// under one lock, so actions and frame publication are totally ordered.
class StateServer {
 public:
  using Clock = std::function<Timestamp()>;
  /// Replays stored frames for a window (eventTime, before, after).
  using ReplaySource = std::function<std::vector<VizFrame>(Timestamp, Timestamp, Timestamp)>;

  StateServer(Baseline baseline, AuthTable auth, NodeControl& control, AuditLog& audit,
              std::size_t queueLimit = 256);

  void setClock(Clock clock) { clock_ = std::move(clock); }
  void setReplaySource(ReplaySource source) { replay_ = std::move(source); }

  /// Throws AuthFailed.
  Session open(std::string_view principal, std::string_view token);
  void close(std::uint64_t sessionId);
  bool isOpen(std::uint64_t sessionId) const;
  std::size_t sessionCount() const;

  /// Queues the frame (and any newly raised alerts) for every session.
  DeliveryReport publish(const VizFrame& frame, const std::string& frameBytes, std::vector<NodeRecord> records,
                         std::vector<NodeStatus> statuses, const std::vector<Alert>& raised = {});

  ActionResult handleAction(std::uint64_t sessionId, ActionCommand cmd);
  PullResult pullQuery(std::uint64_t sessionId, const PullSelector& sel) const;
  /// Queues replay frames to one session. Returns how many.
  std::size_t requestReplay(std::uint64_t sessionId, Timestamp at, Timestamp before, Timestamp after);

  /// Pops the next outbound message; false on timeout or when the session
  /// is closed and drained.
  bool next(std::uint64_t sessionId, std::string& message, std::chrono::milliseconds timeout);
  /// Queues a direct reply (e.g. action_result). False when the session is gone.
  bool send(std::uint64_t sessionId, std::string message);

  std::optional<VizFrame> latestFrame() const;
  const Baseline& baseline() const { return baseline_; }

 private:
  struct Outbox {
    Session session;
    std::deque<std::string> queue;
    bool closed = false;
  };
  bool enqueueLocked(Outbox& box, std::string message);
  Outbox& sessionLocked(std::uint64_t id);
  const Outbox& sessionLocked(std::uint64_t id) const;

  Baseline baseline_;
  AuthTable auth_;
  NodeControl& control_;
  AuditLog& audit_;
  std::size_t queueLimit_;
  Clock clock_;
  ReplaySource replay_;

  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::map<std::uint64_t, Outbox> sessions_;
  std::uint64_t nextSession_ = 1;
  std::uint64_t nextAction_ = 1;
  std::optional<VizFrame> frame_;
  std::string frameBytes_;
  std::vector<NodeRecord> records_;
  std::vector<NodeStatus> statuses_;
};

// Wire messages: one JSON object per line (or per WebSocket text frame),
// each with "type" and "v".
std::string frameMessage(const std::string& frameBytes, bool replay);
std::string alertMessage(const Alert& a);
std::string errorMessage(const std::string& reason);

namespace websocket {
/// Sec-WebSocket-Accept for a client key.
std::string acceptKey(std::string_view clientKey);
/// Server-to-client (unmasked) or client-to-server (masked) text frame.
std::string encodeText(std::string_view payload, bool mask);
std::string encodeClose();
struct Frame {
  std::uint8_t opcode = 0;
  std::string payload;
};
/// Reads one frame, unmasking as needed. Returns nullopt on a clean EOF.
std::optional<Frame> readFrame(net::Socket& sock, std::string& buffered);
}  // namespace websocket

/// Serves the JSON protocol on TCP. A connection whose first line is an
/// HTTP GET is upgraded to WebSocket; otherwise messages are newline
/// delimited.
class ProtocolServer {
 public:
  ProtocolServer(StateServer& state, const std::string& host, std::uint16_t port);
  ~ProtocolServer();
  ProtocolServer(const ProtocolServer&) = delete;
  ProtocolServer& operator=(const ProtocolServer&) = delete;

  std::uint16_t port() const { return listener_.port(); }
  void stop();

 private:
  struct Conn;
  void acceptLoop();
  void serve(std::shared_ptr<Conn> conn);

  StateServer& state_;
  net::Listener listener_;
  std::thread acceptor_;
  std::atomic<bool> stopping_{false};
  std::mutex mu_;
  std::vector<std::shared_ptr<Conn>> conns_;
};

/// Line-delimited client used by tests and the CLI.
class ProtocolClient {
 public:
  ProtocolClient(const std::string& host, std::uint16_t port);
  void send(const nlohmann::json& message);
  /// Next message, or nullopt on timeout/EOF.
  std::optional<nlohmann::json> receive(std::chrono::milliseconds timeout = std::chrono::milliseconds(5000));
  /// Receives until a message of `type` arrives, skipping others.
  std::optional<nlohmann::json> expect(std::string_view type,
                                       std::chrono::milliseconds timeout = std::chrono::milliseconds(5000));
  void close() { sock_.close(); }

 private:
  net::Socket sock_;
  std::string buffer_;
};

}  // namespace podwatch
