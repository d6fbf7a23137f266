#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "podwatch/baseline.hpp"
#include "podwatch/ingest.hpp"
#include "podwatch/modbus.hpp"
#include "podwatch/vizgen.hpp"

namespace podwatch {

PODWATCH_DEFINE_ERROR(ConfigError);

// Bookkeeping rows stored next to the data so a cycle can be rebuilt
// exactly: time|pipeline|cycle (frameId, period, totalKW) and
// time|latch|<pointId> (alerts held after that cycle).
inline constexpr std::string_view kPipelineSource = "pipeline";
inline constexpr std::string_view kLatchSource = "latch";

struct Endpoint {
  std::string host = "127.0.0.1";
  std::uint16_t port = 0;
};
/// "host:port" or ":port". Throws ConfigError.
Endpoint parseEndpoint(std::string_view text);

struct PipelineConfig {
  Endpoint modbus{"127.0.0.1", 1502};
  std::string registerMap;
  Endpoint telemetry{"127.0.0.1", 1503};
  std::string baseline;
  std::string store = "podwatch-store";
  double periodS = 15.0;
  Endpoint server{"127.0.0.1", 8765};
  std::string spool;     // email sink; empty disables
  std::string eventLog;  // empty disables
  std::string framesDir;
  std::string auditLog = "audit.jsonl";
  std::string tokens;

  /// `key = value` lines, '#' comments. Unknown keys throw ConfigError.
  static PipelineConfig parse(std::istream& in);
  static PipelineConfig loadFile(const std::string& path);
  void set(std::string_view key, std::string_view value);
  /// Period > 0 and every configured input file exists.
  void validate() const;
};

struct StageTimings {
  double poll = 0;
  double correlate = 0;
  double ingest = 0;
  double frame = 0;
  double total() const { return poll + correlate + ingest + frame; }
};

/// Everything derived from one cycle's triples. Shared by the live
/// pipeline and replay so both produce the same frame.
struct Correlation {
  std::vector<NodeRecord> records;
  std::vector<NodeStatus> statuses;
  AlertLatch::Update update;
  std::vector<Alert> active;
  PodSummary pod;
};

/// `edge` and `raw` hold (at least) the cycle's Tedge and Traw rows.
Correlation correlate(const AssociativeArray& edge, const AssociativeArray& raw, Timestamp t,
                      const Baseline& baseline, AlertLatch& latch);

std::vector<Triple> metaTriples(Timestamp t, std::uint64_t frameId, double periodS, double totalKw);
std::vector<Triple> latchTriples(Timestamp t, const std::vector<Alert>& active);
/// Alerts held after cycle `t`, rebuilt from its latch rows.
std::vector<Alert> latchFromRaw(const AssociativeArray& raw, Timestamp t, const Baseline& baseline);

struct CycleMeta {
  std::uint64_t frameId = 0;
  double periodS = 0;
  double totalKw = 0;
};
std::optional<CycleMeta> cycleMeta(const AssociativeArray& raw, Timestamp t);

/// Rebuilds the frame of a stored cycle; `latch` must hold the state after
/// the previous cycle and is advanced.
VizFrame reconstructFrame(const Store& store, const Baseline& baseline, Timestamp t, AlertLatch& latch);
/// Latch state persisted after the newest cycle strictly before `t`.
std::vector<Alert> latchBefore(const Store& store, const Baseline& baseline, Timestamp t);

struct CycleReport {
  std::uint64_t frameId = 0;
  Timestamp time = 0;
  StageTimings timings;
  std::size_t readings = 0;
  std::size_t nodes = 0;
  std::size_t triples = 0;
  std::vector<std::string> failedPoints;
  std::vector<Alert> raised;
  VizFrame frame;
  std::string frameBytes;
};

/// TSV timing report.
std::string timingHeader();
std::string timingRow(const CycleReport& r);

/// poll -> correlate -> ingest -> frame, once per call.
class Pipeline {
 public:
  using SensorSource = std::function<modbus::PollResult(Timestamp)>;
  using NodeSource = std::function<std::vector<NodeRecord>(Timestamp)>;
  /// Receives each finished frame with its bytes, backing records, statuses
  /// and newly raised alerts.
  using FrameSink = std::function<void(const VizFrame&, const std::string&, const std::vector<NodeRecord>&,
                                       const std::vector<NodeStatus>&, const std::vector<Alert>&)>;

  /// Resumes frame numbering and the alert latch from the store.
  Pipeline(Baseline baseline, Store& store, SensorSource sensors, NodeSource nodes, double periodS);

  void setRouter(AlertRouter* router) { router_ = router; }
  void setFramesDir(std::filesystem::path dir);
  void setFrameSink(FrameSink sink) { sink_ = std::move(sink); }

  CycleReport runCycle(Timestamp t);
  std::uint64_t nextFrameId() const { return nextFrameId_; }
  const Baseline& baseline() const { return baseline_; }

 private:
  Baseline baseline_;
  Store& store_;
  SensorSource sensors_;
  NodeSource nodes_;
  double periodS_;
  AlertRouter* router_ = nullptr;
  std::filesystem::path framesDir_;
  FrameSink sink_;
  AlertLatch latch_;
  std::uint64_t nextFrameId_ = 1;
};

}  // namespace podwatch
