#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "podwatch/baseline.hpp"
#include "podwatch/records.hpp"

namespace podwatch {

inline constexpr int kFrameVersion = 1;

struct PodCue {
  std::string zone;
  CueClass cue = CueClass::Temperature;
  bool active = false;

  friend bool operator==(const PodCue&, const PodCue&) = default;
};

struct Entity {
  std::string entityId;
  std::string rack;
  int slotIndex = 0;
  Color color = Color::Colorless;
  double heightScale = 0;
  std::vector<std::string> badges;

  friend bool operator==(const Entity&, const Entity&) = default;
};

struct FrameStats {
  int nodesTotal = 0;
  int nodesRed = 0;
  int jobsRunning = 0;
  double totalKW = 0;
  double pue = 0;  // totalKW / IT kW, 0 when IT kW is unknown

  friend bool operator==(const FrameStats&, const FrameStats&) = default;
};

struct VizFrame {
  std::uint64_t frameId = 0;
  Timestamp timestamp = 0;
  std::vector<PodCue> podCues;      // sorted by (zone, cue)
  std::vector<Entity> entities;     // one per inventory host, sorted by id
  std::vector<Alert> activeAlerts;  // sorted by pointId
  FrameStats stats;

  friend bool operator==(const VizFrame&, const VizFrame&) = default;
};

struct PodSummary {
  double totalKw = 0;  // facility draw (sum of feeds)
  double itKw = 0;
};

/// Deterministic frame. Entities come from the baseline inventory; hosts
/// without a status render Red with reason "missing from telemetry".
VizFrame buildFrame(std::uint64_t frameId, Timestamp timestamp, const std::vector<NodeStatus>& statuses,
                    const std::vector<NodeRecord>& records, const std::vector<Alert>& alerts,
                    const Baseline& baseline, const PodSummary& pod);

/// Canonical JSON: sorted keys, 6 significant digits, trailing newline.
std::string serializeFrame(const VizFrame& frame);
/// Throws Error("ParseError") on malformed input or an unsupported "v".
VizFrame deserializeFrame(std::string_view bytes);

/// Canonical writer shared with the server protocol.
std::string canonicalJson(const nlohmann::json& j);

/// frames/<frameId>.json under `dir`.
std::string frameFileName(std::uint64_t frameId);

}  // namespace podwatch
