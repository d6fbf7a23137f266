#pragma once

#include <functional>
#include <iosfwd>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "podwatch/assoc.hpp"
#include "podwatch/error.hpp"
#include "podwatch/records.hpp"

namespace podwatch {

PODWATCH_DEFINE_ERROR(DuplicatePointId);
PODWATCH_DEFINE_ERROR(SinkUnavailable);

enum class AlertKind { Min, Max, Binary, Missing };
enum class Severity { Info, Warning, Critical };
enum class CueClass { MechanicalCooling, Economizer, Water, Power, Temperature, Fire, NodeHealth };
enum class Color { Colorless, Blue, Green, Red };

const char* name(AlertKind k);
const char* name(Severity s);
const char* name(CueClass c);
const char* name(Color c);
// Inverses throw Error("ParseError").
AlertKind alertKindFromName(std::string_view s);
Severity severityFromName(std::string_view s);
CueClass cueFromName(std::string_view s);
Color colorFromName(std::string_view s);

struct BaselineEntry {
  std::string pointId;
  AlertKind kind = AlertKind::Max;  // never Missing
  double limit = 0;                 // threshold, or expected bit for Binary
  Severity severity = Severity::Warning;
  CueClass cue = CueClass::Temperature;
  std::string zone;

  friend bool operator==(const BaselineEntry&, const BaselineEntry&) = default;
};

/// Expected host: physical layout plus how its absence is reported.
struct HostEntry {
  std::string hostname;
  std::string rack;
  int slotIndex = 0;
  Severity severity = Severity::Critical;
  std::string zone;

  friend bool operator==(const HostEntry&, const HostEntry&) = default;
};

struct Baseline {
  std::vector<BaselineEntry> entries;  // file order
  std::vector<HostEntry> hosts;        // sorted by hostname
  std::string imageVersion;            // empty: image not checked
  double memoryThresholdPct = 95.0;

  const BaselineEntry* find(std::string_view pointId) const;
  const HostEntry* host(std::string_view hostname) const;
  /// Every expected host and sensor point.
  std::set<std::string> inventory() const;

  /// Must be called after editing entries/hosts by hand. Sorts hosts and
  /// throws DuplicatePointId.
  void reindex();

 private:
  std::map<std::string, std::size_t, std::less<>> index_;
  std::map<std::string, std::size_t, std::less<>> hostIndex_;
};

/// TSV `pointId kind param severity cueClass zone`. Kinds: MIN, MAX, BINARY,
/// HOST (param rack:slot), plus `*` rows IMAGE and MEMORY.
/// Throws Error("ParseError") naming the line, or DuplicatePointId.
Baseline loadBaseline(std::istream& in);
Baseline loadBaselineFile(const std::string& path);

struct Alert {
  std::string pointId;  // hostname for Missing
  AlertKind kind = AlertKind::Max;
  double observed = 0;
  double limit = 0;
  Severity severity = Severity::Warning;
  CueClass cue = CueClass::Temperature;
  Timestamp timestamp = 0;
  std::string zone;

  /// True when `observed` violates kind/limit (Missing always does).
  bool violates() const;
  std::string message() const;

  friend bool operator==(const Alert&, const Alert&) = default;
  friend auto operator<=>(const Alert& a, const Alert& b) { return a.pointId <=> b.pointId; }
};

nlohmann::json toJson(const Alert& a);
Alert alertFromJson(const nlohmann::json& j);

/// Frame rows are record keys (time|source|pointId) or bare point ids. A
/// point is present when its row has any entry; a present point without a
/// "value" entry reads as 0. Points without a baseline entry are ignored.
/// Result sorted by pointId.
std::vector<Alert> detectDeviations(const AssociativeArray& frame, const Baseline& baseline, Timestamp now);

/// Violation counts per "zone|CueClass" for the same frame.
std::map<std::string, double> cueCounts(const AssociativeArray& frame, const Baseline& baseline);

/// Missing alerts for inventory hosts absent from `present`.
std::vector<Alert> missingHosts(const std::set<std::string, std::less<>>& present, const Baseline& baseline,
                                Timestamp now);

struct NodeStatus {
  std::string hostname;
  Color color = Color::Colorless;
  double heightScale = 0;
  std::vector<std::string> reasons;

  friend bool operator==(const NodeStatus&, const NodeStatus&) = default;
};

inline constexpr std::string_view kReasonImage = "image out of sync";
inline constexpr std::string_view kReasonMemory = "memory threshold exhausted";
inline constexpr std::string_view kReasonStale = "not responding";
inline constexpr std::string_view kReasonFailed = "failed component";  // suffixed ": <component>"
inline constexpr std::string_view kReasonMissing = "missing from telemetry";

NodeStatus classify(const NodeRecord& record, const Baseline& baseline);

nlohmann::json toJson(const NodeStatus& s);

/// Holds alerts active across cycles. An alert clears only once its value
/// is back inside the limit by 2% of the limit's magnitude; until then it
/// stays active with its last violating observation.
class AlertLatch {
 public:
  struct Update {
    std::vector<Alert> raised;
    std::vector<Alert> cleared;
  };
  /// Current value of a point, nullopt when absent this cycle.
  using Lookup = std::function<std::optional<double>(const std::string&)>;

  Update apply(const std::vector<Alert>& detected, const Lookup& current);

  /// Active alerts sorted by pointId; timestamp is when each was raised.
  std::vector<Alert> active() const;
  void restore(std::vector<Alert> alerts);
  void clear() { active_.clear(); }

 private:
  std::map<std::string, Alert> active_;
};

bool clearedBy(const Alert& latched, double value);

enum class Channel { Frame, EventLog, Email };
const char* name(Channel c);
/// Delivery channels for a severity.
std::vector<Channel> routesFor(Severity s);

class AlertSink {
 public:
  virtual ~AlertSink() = default;
  /// Throws SinkUnavailable.
  virtual void deliver(const Alert& alert) = 0;
};

/// Appends one JSON object per line.
class JsonlSink : public AlertSink {
 public:
  explicit JsonlSink(std::string path) : path_(std::move(path)) {}
  void deliver(const Alert& alert) override;
  const std::string& path() const { return path_; }

 private:
  std::string path_;
};

/// Routes alerts by severity. Sink failures are logged and counted, never
/// thrown. Deliveries are serialized.
class AlertRouter {
 public:
  AlertRouter(std::shared_ptr<AlertSink> eventLog, std::shared_ptr<AlertSink> email);
  /// Channels that accepted the alert.
  std::vector<Channel> route(const Alert& alert);
  std::size_t failures() const;

 private:
  std::shared_ptr<AlertSink> eventLog_, email_;
  mutable std::mutex mu_;
  std::size_t failures_ = 0;
};

}  // namespace podwatch
