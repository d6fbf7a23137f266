#include "podwatch/history.hpp"

#include <algorithm>
#include <map>
#include <ostream>
#include <set>

#include "podwatch/pipeline.hpp"
#include "podwatch/text.hpp"

namespace podwatch {

namespace {

std::vector<Timestamp> cyclesIn(const Store& store, Timestamp t0, Timestamp t1) {
  if (t1 < t0) throw InvalidRange("period end precedes its start");
  return store.cycleTimes(kPipelineSource, std::max<Timestamp>(t0, 0), std::max<Timestamp>(t1, 0));
}

std::vector<Timestamp> requireCycles(const Store& store, Timestamp t0, Timestamp t1) {
  auto cycles = cyclesIn(store, t0, t1);
  if (cycles.empty()) throw NoData("no stored cycles in [" + std::to_string(t0) + ", " + std::to_string(t1) + "]");
  return cycles;
}

const char* const kDays[] = {"Mon", "Tue", "Wed", "Thu", "Fri", "Sat", "Sun"};

Timestamp floorDiv(Timestamp a, Timestamp b) { return a / b - ((a % b != 0) && ((a < 0) != (b < 0))); }

int hourOf(Timestamp t) { return static_cast<int>((t - floorDiv(t, 86400) * 86400) / 3600); }

std::string hourName(int h) { return (h < 10 ? "0" : "") + std::to_string(h); }

std::string rackOf(const Baseline& baseline, std::string_view host) {
  const auto* h = baseline.host(host);
  return h ? h->rack : "unknown";
}

}  // namespace

std::string dayOfWeek(Timestamp t) {
  // 1970-01-01 was a Thursday.
  auto days = floorDiv(t, 86400);
  return kDays[static_cast<int>(((days + 3) % 7 + 7) % 7)];
}

Bucketing bucketingFromName(std::string_view s) {
  if (s == "dow" || s == "day") return Bucketing::DayOfWeek;
  if (s == "hour") return Bucketing::HourOfDay;
  if (s == "user") return Bucketing::User;
  if (s == "rack") return Bucketing::Rack;
  throw Error("ParseError", "unknown bucketing '" + std::string(s) + "' (dow, hour, user, rack)");
}

std::vector<VizFrame> replay(const Store& store, const Baseline& baseline, const ReplayWindow& w) {
  if (w.before < 0 || w.after < 0) throw InvalidRange("replay before/after must be >= 0");
  auto cycles = cyclesIn(store, w.eventTime - w.before, w.eventTime + w.after);
  if (cycles.empty())
    throw WindowOutOfRange("no stored cycles within " + std::to_string(w.before) + " s before and " +
                           std::to_string(w.after) + " s after " + std::to_string(w.eventTime));
  AlertLatch latch;
  latch.restore(latchBefore(store, baseline, cycles.front()));
  std::vector<VizFrame> out;
  for (auto t : cycles) out.push_back(reconstructFrame(store, baseline, t, latch));
  return out;
}

UsageReport usageReport(const Store& store, const Baseline& baseline, Timestamp t0, Timestamp t1, Bucketing bucketing) {
  auto cycles = requireCycles(store, t0, t1);

  std::vector<std::string> metaKeys;
  for (auto t : cycles) metaKeys.push_back(recordKey(t, kPipelineSource, "cycle"));
  auto meta = store.queryRange(Table::Traw, KeySelector::set(metaKeys));
  std::map<Timestamp, CycleMeta> metaOf;
  for (auto t : cycles)
    if (auto m = cycleMeta(meta, t)) metaOf[t] = *m;

  // Job owner from the jobowner|<job>|<user> columns.
  std::map<std::string, std::string, std::less<>> owner;
  for (const auto& row : store.queryRange(Table::TedgeT, KeySelector::prefix("jobowner|")).rows()) {
    auto [jobId, user] = splitExploded(splitExploded(row).second);
    owner.emplace(std::string(jobId), std::string(user));
  }
  auto ownerOf = [&](std::string_view job) {
    auto it = owner.find(job);
    return it == owner.end() ? std::string("unknown") : it->second;
  };

  auto timeBucket = [&](Timestamp t) {
    return bucketing == Bucketing::DayOfWeek ? dayOfWeek(t) : hourName(hourOf(t));
  };
  auto recordBucket = [&](std::string_view recordKeyText, std::string_view jobId) {
    auto k = parseRecordKey(recordKeyText);
    switch (bucketing) {
      case Bucketing::User: return ownerOf(jobId);
      case Bucketing::Rack: return rackOf(baseline, k.id);
      default: return timeBucket(k.time);
    }
  };

  // Submissions: first column (earliest record) of each job| row in TedgeT.
  std::vector<Triple> submitted;
  auto appearances = store.queryRange(Table::TedgeT, KeySelector::prefix("job|"));
  {
    std::string current;
    for (const auto& [key, v] : appearances.entries()) {
      if (key.first == current) continue;
      current = key.first;
      auto first = parseRecordKey(key.second);
      if (first.time < t0 || first.time > t1) continue;
      auto jobId = splitExploded(key.first).second;
      std::string bucket;
      if (bucketing == Bucketing::Rack) {
        // lowest-sorted host of the job in that cycle
        std::string prefix = zeroPad(first.time) + "|";
        for (auto it = appearances.entries().lower_bound({key.first, prefix});
             it != appearances.entries().end() && it->first.first == key.first && startsWith(it->first.second, prefix);
             ++it) {
          auto k = parseRecordKey(it->first.second);
          if (k.source == kClusterSource) {
            bucket = rackOf(baseline, k.id);
            break;
          }
        }
      } else {
        bucket = recordBucket(key.second, jobId);
      }
      submitted.push_back({bucket, "jobs", 1.0});
    }
  }

  // Core-hours and activity from the jobcores:<job> raw fields.
  std::vector<Triple> coreHours;
  std::map<std::string, std::set<Timestamp>> activeCycles;
  auto cores = store.queryRange(Table::Traw, timeRange(std::max<Timestamp>(t0, 0), t1), KeySelector::prefix("jobcores:"));
  for (const auto& [key, n] : cores.entries()) {
    auto k = parseRecordKey(key.first);
    if (k.source != kClusterSource) continue;
    auto m = metaOf.find(k.time);
    double period = m == metaOf.end() ? 0.0 : m->second.periodS;
    std::string_view jobId = std::string_view(key.second).substr(9);
    auto bucket = recordBucket(key.first, jobId);
    coreHours.push_back({bucket, "coreHours", n * period / 3600.0});
    activeCycles[bucket].insert(k.time);
  }

  auto jobs = AssociativeArray::fromTriples(submitted).sumCols("jobs");
  auto hours = AssociativeArray::fromTriples(coreHours).sumCols("coreHours");

  std::vector<std::string> buckets;
  switch (bucketing) {
    case Bucketing::DayOfWeek: buckets.assign(std::begin(kDays), std::end(kDays)); break;
    case Bucketing::HourOfDay:
      for (int h = 0; h < 24; ++h) buckets.push_back(hourName(h));
      break;
    case Bucketing::Rack:
      for (const auto& h : baseline.hosts) buckets.push_back(h.rack);
      [[fallthrough]];
    case Bucketing::User:
      for (const auto& r : jobs.rows()) buckets.push_back(r);
      for (const auto& r : hours.rows()) buckets.push_back(r);
      std::sort(buckets.begin(), buckets.end());
      buckets.erase(std::unique(buckets.begin(), buckets.end()), buckets.end());
      break;
  }

  UsageReport rep;
  rep.bucketing = bucketing;
  for (const auto& b : buckets) {
    UsageRow row{b, jobs.at(b, "jobs"), hours.at(b, "coreHours"), 0};
    if (bucketing == Bucketing::DayOfWeek || bucketing == Bucketing::HourOfDay) {
      for (const auto& [t, m] : metaOf)
        if (timeBucket(t) == b) row.peakKW = std::max(row.peakKW, m.totalKw);
    } else if (auto it = activeCycles.find(b); it != activeCycles.end()) {
      for (auto t : it->second)
        if (auto m = metaOf.find(t); m != metaOf.end()) row.peakKW = std::max(row.peakKW, m->second.totalKw);
    }
    rep.rows.push_back(row);
  }
  return rep;
}

std::vector<HotspotRow> hotspotReport(const Store& store, const Baseline& baseline, Timestamp t0, Timestamp t1) {
  if (t1 < t0) throw InvalidRange("period end precedes its start");
  static constexpr std::string_view kSuffix = ".inlet_temp";
  auto raw = store.queryRange(Table::Traw, timeRange(std::max<Timestamp>(t0, 0), t1), KeySelector::set({"time", "value"}));
  struct Acc {
    double sum = 0;
    double peak = -1e300;
    int n = 0;
    std::string zone;
  };
  std::map<std::string, Acc> racks;
  for (const auto& [key, v] : raw.entries()) {
    if (key.second != "time" || !std::string_view(key.first).ends_with(kSuffix)) continue;
    auto k = parseRecordKey(key.first);
    if (k.source != kPodSource) continue;
    double value = raw.at(key.first, "value");  // absent value reads as 0
    auto& a = racks[k.id.substr(0, k.id.size() - kSuffix.size())];
    a.sum += value;
    a.peak = std::max(a.peak, value);
    ++a.n;
    if (const auto* e = baseline.find(k.id)) a.zone = e->zone;
  }
  if (racks.empty()) throw NoData("no inlet temperature readings in period");
  double podMean = 0;
  for (const auto& [rack, a] : racks) podMean += a.sum / a.n;
  podMean /= static_cast<double>(racks.size());
  std::vector<HotspotRow> out;
  for (const auto& [rack, a] : racks) out.push_back({rack, a.zone, a.sum / a.n - podMean, a.peak});
  std::stable_sort(out.begin(), out.end(),
                   [](const HotspotRow& a, const HotspotRow& b) { return a.meanTempDelta > b.meanTempDelta; });
  return out;
}

namespace {

std::map<std::string, std::set<std::string>> redReasons(const Store& store, const Baseline& baseline, Timestamp t) {
  auto rows = cycleRows(t, kClusterSource);
  auto records = nodeRecordsFrom(store.queryRange(Table::Tedge, rows), store.queryRange(Table::Traw, rows));
  std::map<std::string, std::set<std::string>> out;
  std::set<std::string, std::less<>> present;
  for (const auto& r : records) {
    present.insert(r.hostname);
    auto s = classify(r, baseline);
    if (!s.reasons.empty()) out[r.hostname].insert(s.reasons.begin(), s.reasons.end());
  }
  for (const auto& h : baseline.hosts)
    if (!present.count(h.hostname)) out[h.hostname].insert(std::string(kReasonMissing));
  return out;
}

}  // namespace

std::vector<FailureRow> failureInventory(const Store& store, const Baseline& baseline, Timestamp t0, Timestamp t1) {
  auto cycles = requireCycles(store, t0, t1);
  std::map<std::string, std::set<std::string>> prev;
  if (cycles.front() > 0) {
    auto before = store.cycleTimes(kPipelineSource, 0, cycles.front() - 1);
    if (!before.empty()) prev = redReasons(store, baseline, before.back());
  }
  std::map<std::string, FailureRow> rows;
  for (auto t : cycles) {
    auto now = redReasons(store, baseline, t);
    for (const auto& [host, reasons] : now) {
      auto p = prev.find(host);
      for (const auto& reason : reasons) {
        if (p != prev.end() && p->second.count(reason)) continue;
        auto& row = rows[reason];
        row.component = reason;
        ++row.failureCount;
        row.hostnames.push_back(host);
      }
    }
    prev = std::move(now);
  }
  std::vector<FailureRow> out;
  for (auto& [reason, row] : rows) {
    std::sort(row.hostnames.begin(), row.hostnames.end());
    row.hostnames.erase(std::unique(row.hostnames.begin(), row.hostnames.end()), row.hostnames.end());
    out.push_back(std::move(row));
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {
const char* bucketingName(Bucketing b) {
  switch (b) {
    case Bucketing::DayOfWeek: return "dow";
    case Bucketing::HourOfDay: return "hour";
    case Bucketing::User: return "user";
    case Bucketing::Rack: return "rack";
  }
  return "?";
}
}  // namespace

void writeTsv(std::ostream& out, const UsageReport& r) {
  out << "bucket\tjobsSubmitted\tcoreHours\tpeakKW\n";
  for (const auto& row : r.rows)
    out << row.bucket << '\t' << formatNumber(row.jobsSubmitted) << '\t' << formatSignificant(row.coreHours, 10) << '\t'
        << formatSignificant(row.peakKW, 10) << '\n';
}

void writeTsv(std::ostream& out, const std::vector<HotspotRow>& rows) {
  out << "rack\tzone\tmeanTempDelta\tpeakTemp\n";
  for (const auto& r : rows)
    out << r.rack << '\t' << r.zone << '\t' << formatSignificant(r.meanTempDelta, 6) << '\t'
        << formatSignificant(r.peakTemp, 6) << '\n';
}

void writeTsv(std::ostream& out, const std::vector<FailureRow>& rows) {
  out << "component\tfailureCount\thostnames\n";
  for (const auto& r : rows) {
    out << r.component << '\t' << r.failureCount << '\t';
    for (std::size_t i = 0; i < r.hostnames.size(); ++i) out << (i ? "," : "") << r.hostnames[i];
    out << '\n';
  }
}

nlohmann::json toJson(const UsageReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : r.rows)
    rows.push_back({{"bucket", row.bucket}, {"jobsSubmitted", row.jobsSubmitted}, {"coreHours", row.coreHours},
                    {"peakKW", row.peakKW}});
  return {{"bucketing", bucketingName(r.bucketing)}, {"rows", rows}};
}

nlohmann::json toJson(const std::vector<HotspotRow>& rows) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& r : rows)
    out.push_back({{"rack", r.rack}, {"zone", r.zone}, {"meanTempDelta", r.meanTempDelta}, {"peakTemp", r.peakTemp}});
  return out;
}

nlohmann::json toJson(const std::vector<FailureRow>& rows) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& r : rows)
    out.push_back({{"component", r.component}, {"failureCount", r.failureCount}, {"hostnames", r.hostnames}});
  return out;
}

}  // namespace podwatch
