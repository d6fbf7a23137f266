#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "podwatch/baseline.hpp"
#include "podwatch/ingest.hpp"
#include "podwatch/vizgen.hpp"

namespace podwatch {

PODWATCH_DEFINE_ERROR(WindowOutOfRange);

struct ReplayWindow {
  Timestamp eventTime = 0;
  Timestamp before = 0;
  Timestamp after = 0;
};

/// Frames of every stored cycle in [eventTime - before, eventTime + after],
/// rebuilt from the store. Throws WindowOutOfRange when no stored cycle falls
/// inside the window, or InvalidRange for negative before/after.
std::vector<VizFrame> replay(const Store& store, const Baseline& baseline, const ReplayWindow& window);

enum class Bucketing { DayOfWeek, HourOfDay, User, Rack };
/// "dow", "hour", "user", "rack". Throws Error("ParseError").
Bucketing bucketingFromName(std::string_view s);

struct UsageRow {
  std::string bucket;
  double jobsSubmitted = 0;
  double coreHours = 0;
  double peakKW = 0;

  friend bool operator==(const UsageRow&, const UsageRow&) = default;
};

struct UsageReport {
  Bucketing bucketing = Bucketing::DayOfWeek;
  std::vector<UsageRow> rows;
};

/// Weekday name (UTC), Mon..Sun.
std::string dayOfWeek(Timestamp t);

/// A job counts as submitted in the first cycle it appears in; its rack is
/// that of its lowest-sorted host then. coreHours sums scheduled cores times
/// the cycle period. peakKW is the highest facility draw over the cycles the
/// bucket was active in. Throws NoData for a period without cycles.
UsageReport usageReport(const Store& store, const Baseline& baseline, Timestamp t0, Timestamp t1, Bucketing bucketing);

struct HotspotRow {
  std::string rack;
  std::string zone;
  double meanTempDelta = 0;  // rack mean minus mean over racks
  double peakTemp = 0;
};

/// Per-rack inlet temperature deviation, sorted descending. Throws NoData.
std::vector<HotspotRow> hotspotReport(const Store& store, const Baseline& baseline, Timestamp t0, Timestamp t1);

struct FailureRow {
  std::string component;  // Red reason
  int failureCount = 0;
  std::vector<std::string> hostnames;  // sorted, unique
};

/// Transitions into each Red reason over the period. Throws NoData.
std::vector<FailureRow> failureInventory(const Store& store, const Baseline& baseline, Timestamp t0, Timestamp t1);

void writeTsv(std::ostream& out, const UsageReport& r);
void writeTsv(std::ostream& out, const std::vector<HotspotRow>& rows);
void writeTsv(std::ostream& out, const std::vector<FailureRow>& rows);
nlohmann::json toJson(const UsageReport& r);
nlohmann::json toJson(const std::vector<HotspotRow>& rows);
nlohmann::json toJson(const std::vector<FailureRow>& rows);

}  // namespace podwatch
