#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

namespace podwatch {

/// UTC seconds since the epoch.
using Timestamp = std::int64_t;

/// One environmental data point from a poll cycle.
struct SensorReading {
  std::string source;   // e.g. "ecopod"
  std::string pointId;  // e.g. "zone03.supply_temp"
  Timestamp timestamp = 0;
  double value = 0;
  std::string unit;
  std::string zone;

  friend bool operator==(const SensorReading&, const SensorReading&) = default;
};

struct JobSlice {
  std::string jobId;
  std::string user;
  int cores = 0;

  friend bool operator==(const JobSlice&, const JobSlice&) = default;
};

/// One node's IT and scheduler state as collected in a cycle.
/// `timestamp` is the collection cycle; `lastSeen` is when the node last
/// answered its collector.
struct NodeRecord {
  std::string hostname;
  Timestamp timestamp = 0;
  Timestamp lastSeen = 0;
  std::string rack;
  int slotIndex = 0;
  std::string imageVersion;
  std::string kernelVersion;
  double cpuLoad = 0;
  double memUsedPct = 0;
  double diskUsedPct = 0;
  int totalCores = 0;
  int scheduledCores = 0;
  std::vector<JobSlice> jobs;
  std::string ip;
  std::string mac;
  std::string failedComponent;  // empty when healthy
  bool stale = false;

  friend bool operator==(const NodeRecord&, const NodeRecord&) = default;
};

nlohmann::json toJson(const NodeRecord& r);
NodeRecord nodeRecordFromJson(const nlohmann::json& j);

}  // namespace podwatch
