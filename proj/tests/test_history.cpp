#include <gtest/gtest.h>

#include <ctime>
#include <numeric>
#include <sstream>

#include "podwatch/history.hpp"
#include "podwatch/rig.hpp"
#include "podwatch/text.hpp"
#include "support.hpp"

using namespace podwatch;
using podwatch::testing::TempDir;

namespace {

constexpr double kPeriod = 900;

struct LiveCycle {
  Timestamp t = 0;
  std::string bytes;
  std::vector<NodeRecord> records;
  double totalKw = 0;
};

// One 100-cycle run shared by the tests below: jobs come and go, and the
// pod sees a water event, a power spike and a fire alarm.
class HistoryRun : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir("history");
    Rig::Options o;
    o.sim.cluster.nodes = 64;
    o.sim.maxStepS = 30;
    o.points = 600;
    o.periodS = kPeriod;
    o.storeDir = dir_->path() / "store";
    o.network = false;
    rig_ = new Rig(o);
    live_ = new std::vector<LiveCycle>();
    rig_->sim().schedule({{20 * kPeriod, sim::WaterEvent{"zone02"}},
                          {30 * kPeriod, sim::PowerSpike{"feedA", 200}},
                          {45 * kPeriod, sim::FireBit{true}},
                          {70 * kPeriod, sim::FireBit{false}}});
    rig_->pipeline().setFrameSink([](const VizFrame& f, const std::string& bytes, const std::vector<NodeRecord>& recs,
                                     const std::vector<NodeStatus>&, const std::vector<Alert>&) {
      live_->push_back({f.timestamp, bytes, recs, f.stats.totalKW});
    });
    auto place = [](const std::string& job, const std::string& user, std::vector<std::string> hosts, int cores) {
      rig_->sim().withCluster([&](sim::Cluster& c, double) { c.placeJob(job, user, hosts, cores); });
    };
    auto end = [](const std::string& job) { rig_->sim().withCluster([&](sim::Cluster& c, double) { c.endJob(job); }); };
    for (int i = 0; i < 100; ++i) {
      if (i == 3) place("j1", "ann", {"node0040", "node0002"}, 16);
      if (i == 10) place("j2", "bob", {"node0010"}, 8);
      if (i == 12) place("j3", "ann", {"node0050", "node0051", "node0052"}, 4);
      if (i == 40) end("j1");
      if (i == 55) place("j4", "cy", {"node0033"}, 32);
      if (i == 80) end("j2");
      if (i == 90) place("j5", "bob", {"node0001"}, 2);
      rig_->step();
    }
  }
  static void TearDownTestSuite() {
    delete rig_;
    delete live_;
    delete dir_;
  }

  static TempDir* dir_;
  static Rig* rig_;
  static std::vector<LiveCycle>* live_;
};

TempDir* HistoryRun::dir_ = nullptr;
Rig* HistoryRun::rig_ = nullptr;
std::vector<LiveCycle>* HistoryRun::live_ = nullptr;

std::string weekday(Timestamp t) {
  static const char* names[] = {"Sun", "Mon", "Tue", "Wed", "Thu", "Fri", "Sat"};
  std::time_t tt = t;
  std::tm tm{};
  gmtime_r(&tt, &tm);
  return names[tm.tm_wday];
}

int hourUtc(Timestamp t) {
  std::time_t tt = t;
  std::tm tm{};
  gmtime_r(&tt, &tm);
  return tm.tm_hour;
}

// Group-by over the live cycles, independent of the store.
std::map<std::string, UsageRow> usageOracle(const std::vector<LiveCycle>& live, const Baseline& b, Bucketing k,
                                            Timestamp t0, Timestamp t1) {
  std::map<std::string, UsageRow> rows;
  auto timeBucket = [&](Timestamp t) {
    return k == Bucketing::DayOfWeek ? weekday(t) : zeroPad(hourUtc(t), 2);
  };
  std::set<std::string> seenJobs;
  std::map<std::string, std::set<Timestamp>> active;
  for (const auto& c : live) {
    if (c.t < t0 || c.t > t1) {
      for (const auto& r : c.records)
        for (const auto& j : r.jobs) seenJobs.insert(j.jobId);
      continue;
    }
    std::map<std::string, std::string> firstHost;
    for (const auto& r : c.records)
      for (const auto& j : r.jobs) {
        std::string bucket = k == Bucketing::User ? j.user : k == Bucketing::Rack ? b.host(r.hostname)->rack
                                                                                   : timeBucket(c.t);
        rows[bucket].bucket = bucket;
        rows[bucket].coreHours += j.cores * kPeriod / 3600.0;
        active[bucket].insert(c.t);
        if (!seenJobs.count(j.jobId)) {
          auto& h = firstHost[j.jobId];
          if (h.empty() || r.hostname < h) h = r.hostname;
        }
      }
    for (const auto& [job, host] : firstHost) {
      seenJobs.insert(job);
      std::string bucket;
      if (k == Bucketing::Rack) bucket = b.host(host)->rack;
      else if (k == Bucketing::User) {
        for (const auto& r : c.records)
          for (const auto& j : r.jobs)
            if (j.jobId == job) bucket = j.user;
      } else bucket = timeBucket(c.t);
      rows[bucket].bucket = bucket;
      rows[bucket].jobsSubmitted += 1;
    }
  }
  if (k == Bucketing::DayOfWeek || k == Bucketing::HourOfDay) {
    for (const auto& c : live)
      if (c.t >= t0 && c.t <= t1) {
        auto bucket = timeBucket(c.t);
        rows[bucket].bucket = bucket;
        rows[bucket].peakKW = std::max(rows[bucket].peakKW, c.totalKw);
      }
  } else {
    for (const auto& [bucket, times] : active)
      for (const auto& c : live)
        if (times.count(c.t)) rows[bucket].peakKW = std::max(rows[bucket].peakKW, c.totalKw);
  }
  return rows;
}

void expectMatchesOracle(const UsageReport& rep, const std::map<std::string, UsageRow>& oracle) {
  for (const auto& row : rep.rows) {
    auto it = oracle.find(row.bucket);
    UsageRow expect = it == oracle.end() ? UsageRow{row.bucket, 0, 0, 0} : it->second;
    EXPECT_EQ(row.jobsSubmitted, expect.jobsSubmitted) << row.bucket;
    EXPECT_NEAR(row.coreHours, expect.coreHours, 1e-9 * std::max(1.0, expect.coreHours)) << row.bucket;
    EXPECT_EQ(row.peakKW, expect.peakKW) << row.bucket;
  }
  for (const auto& [bucket, row] : oracle) {
    bool listed = std::any_of(rep.rows.begin(), rep.rows.end(), [&](const UsageRow& r) { return r.bucket == bucket; });
    EXPECT_TRUE(listed) << bucket;
  }
}

}  // namespace

TEST_F(HistoryRun, ReplayReproducesLiveFramesByteForByte) {
  ASSERT_EQ(live_->size(), 100u);
  const auto& mid = (*live_)[50];
  auto frames = replay(rig_->store(), rig_->baseline(), {mid.t, static_cast<Timestamp>(10 * kPeriod),
                                                        static_cast<Timestamp>(10 * kPeriod)});
  ASSERT_EQ(frames.size(), 21u);
  for (std::size_t i = 0; i < frames.size(); ++i)
    EXPECT_EQ(serializeFrame(frames[i]), (*live_)[40 + i].bytes) << "cycle " << 40 + i;

  // The whole run, including cycles before and after every fault.
  auto all = replay(rig_->store(), rig_->baseline(), {(*live_)[0].t, 0, static_cast<Timestamp>(200 * kPeriod)});
  ASSERT_EQ(all.size(), 100u);
  for (std::size_t i = 0; i < all.size(); ++i) ASSERT_EQ(serializeFrame(all[i]), (*live_)[i].bytes) << i;
}

TEST_F(HistoryRun, ReplayWindowEdges) {
  const auto& c = (*live_)[47];
  auto one = replay(rig_->store(), rig_->baseline(), {c.t, 0, 0});
  ASSERT_EQ(one.size(), 1u);
  EXPECT_EQ(serializeFrame(one[0]), c.bytes);

  EXPECT_THROW(replay(rig_->store(), rig_->baseline(), {c.t + 1, 0, 0}), WindowOutOfRange);
  EXPECT_THROW(replay(rig_->store(), rig_->baseline(), {(*live_)[99].t + 100000, 50, 50}), WindowOutOfRange);
  EXPECT_THROW(replay(rig_->store(), rig_->baseline(), {c.t, -1, 0}), InvalidRange);
  // A window reaching past the end is clipped to what exists.
  auto tail = replay(rig_->store(), rig_->baseline(), {(*live_)[99].t, static_cast<Timestamp>(kPeriod), 100000});
  EXPECT_EQ(tail.size(), 2u);
}

TEST_F(HistoryRun, FaultsAppearInReplayedFrames) {
  auto frames = replay(rig_->store(), rig_->baseline(), {(*live_)[0].t, 0, static_cast<Timestamp>(100 * kPeriod)});
  auto has = [](const VizFrame& f, const std::string& id) {
    return std::any_of(f.activeAlerts.begin(), f.activeAlerts.end(), [&](const Alert& a) { return a.pointId == id; });
  };
  EXPECT_FALSE(has(frames[10], "pod.water_alarm"));
  EXPECT_TRUE(has(frames[25], "pod.water_alarm"));
  EXPECT_FALSE(has(frames[29], "feedA.kw"));
  EXPECT_TRUE(has(frames[35], "feedA.kw"));
  EXPECT_FALSE(has(frames[44], "pod.fire_alarm"));
  EXPECT_TRUE(has(frames[50], "pod.fire_alarm"));
  EXPECT_FALSE(has(frames[75], "pod.fire_alarm"));
}

TEST_F(HistoryRun, UsageMatchesGroupByOracle) {
  Timestamp t0 = (*live_)[0].t, t1 = (*live_)[99].t;
  for (auto k : {Bucketing::DayOfWeek, Bucketing::HourOfDay, Bucketing::User, Bucketing::Rack}) {
    SCOPED_TRACE(static_cast<int>(k));
    expectMatchesOracle(usageReport(rig_->store(), rig_->baseline(), t0, t1, k),
                        usageOracle(*live_, rig_->baseline(), k, t0, t1));
  }
  // A later sub-period: j1..j3 were submitted before it and are not counted again.
  Timestamp s0 = (*live_)[50].t, s1 = (*live_)[95].t;
  for (auto k : {Bucketing::DayOfWeek, Bucketing::User, Bucketing::Rack}) {
    auto rep = usageReport(rig_->store(), rig_->baseline(), s0, s1, k);
    expectMatchesOracle(rep, usageOracle(*live_, rig_->baseline(), k, s0, s1));
    double jobs = 0;
    for (const auto& r : rep.rows) jobs += r.jobsSubmitted;
    EXPECT_EQ(jobs, 2);  // j4, j5
  }
}

TEST_F(HistoryRun, UsageTotalsInvariantAcrossBucketings) {
  Timestamp t0 = (*live_)[0].t, t1 = (*live_)[99].t;
  std::vector<std::pair<double, double>> totals;
  for (auto k : {Bucketing::DayOfWeek, Bucketing::HourOfDay, Bucketing::User, Bucketing::Rack}) {
    auto rep = usageReport(rig_->store(), rig_->baseline(), t0, t1, k);
    double jobs = 0, hours = 0;
    for (const auto& r : rep.rows) {
      jobs += r.jobsSubmitted;
      hours += r.coreHours;
    }
    totals.emplace_back(jobs, hours);
    if (k == Bucketing::DayOfWeek) EXPECT_EQ(rep.rows.size(), 7u);
    if (k == Bucketing::HourOfDay) EXPECT_EQ(rep.rows.size(), 24u);
  }
  for (const auto& [jobs, hours] : totals) {
    EXPECT_EQ(jobs, 5);
    EXPECT_NEAR(hours, totals[0].second, 1e-9 * totals[0].second);
  }
}

TEST_F(HistoryRun, UsageOutsideStoredPeriodIsNoData) {
  EXPECT_THROW(usageReport(rig_->store(), rig_->baseline(), 100, 200, Bucketing::User), NoData);
  EXPECT_THROW(usageReport(rig_->store(), rig_->baseline(), 200, 100, Bucketing::User), InvalidRange);
  EXPECT_THROW(failureInventory(rig_->store(), rig_->baseline(), 100, 200), NoData);
}

TEST(Calendar, DayOfWeekMatchesGmtime) {
  for (Timestamp t = -86400 * 10; t < 86400 * 4000; t += 3607 * 5) EXPECT_EQ(dayOfWeek(t), weekday(t)) << t;
  EXPECT_EQ(dayOfWeek(0), "Thu");
  EXPECT_EQ(bucketingFromName("dow"), Bucketing::DayOfWeek);
  EXPECT_EQ(bucketingFromName("rack"), Bucketing::Rack);
  EXPECT_THROW(bucketingFromName("moon"), Error);
}

TEST(Hotspot, SingleHotRackStandsOutByFiveTimesOneMinusOneOverN) {
  TempDir dir("hotspot");
  Store store(dir.path());
  std::stringstream text;
  const int n = 44;
  for (int r = 0; r < n; ++r)
    text << "rack" << zeroPad(r + 1, 2) << ".inlet_temp\tMAX\t35\tWarning\tTemperature\tzone" << zeroPad(r / 4 + 1, 2)
         << '\n';
  auto baseline = loadBaseline(text);
  for (Timestamp t = 1000; t < 1000 + 15 * 20; t += 15) {
    std::vector<Triple> batch;
    for (int r = 0; r < n; ++r) {
      std::string id = "rack" + zeroPad(r + 1, 2) + ".inlet_temp";
      double v = r == 6 ? 25.0 : 20.0;
      auto ts = toTriples(SensorReading{"ecopod", id, t, v, "°C", "zone" + zeroPad(r / 4 + 1, 2)});
      batch.insert(batch.end(), ts.begin(), ts.end());
    }
    store.ingestBatch(batch);
  }
  auto rows = hotspotReport(store, baseline, 0, 5000);
  ASSERT_EQ(rows.size(), static_cast<std::size_t>(n));
  EXPECT_EQ(rows[0].rack, "rack07");
  EXPECT_EQ(rows[0].zone, "zone02");
  EXPECT_NEAR(rows[0].meanTempDelta, 5.0 * (1.0 - 1.0 / n), 1e-9);
  EXPECT_EQ(rows[0].peakTemp, 25.0);
  for (std::size_t i = 1; i < rows.size(); ++i) EXPECT_NEAR(rows[i].meanTempDelta, -5.0 / n, 1e-9);
  double sum = 0;
  for (const auto& r : rows) sum += r.meanTempDelta;
  EXPECT_NEAR(sum, 0, 1e-9);
  EXPECT_THROW(hotspotReport(store, baseline, 6000, 7000), NoData);
}

TEST(Failures, ThreeImageDriftsAreThreeFailures) {
  TempDir dir("failures");
  Rig::Options o;
  o.sim.cluster.nodes = 64;
  o.points = 200;
  o.storeDir = dir.path() / "store";
  o.network = false;
  Rig rig(o);
  rig.sim().schedule({{100, sim::ImageDrift{"node0005"}},
                      {200, sim::ImageDrift{"node0017"}},
                      {300, sim::ImageDrift{"node0063"}},
                      {400, sim::ImageDrift{"node0005"}}});  // already drifted: no new transition
  Timestamp first = rig.nextTime();
  for (int i = 0; i < 40; ++i) rig.step();
  auto rows = failureInventory(rig.store(), rig.baseline(), first, rig.nextTime());
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].component, "image out of sync");
  EXPECT_EQ(rows[0].failureCount, 3);
  EXPECT_EQ(rows[0].hostnames, (std::vector<std::string>{"node0005", "node0017", "node0063"}));

  // Starting mid-run seeds from the previous cycle: drifts before the start do not count.
  auto later = failureInventory(rig.store(), rig.baseline(), first + 250, rig.nextTime());
  ASSERT_EQ(later.size(), 1u);
  EXPECT_EQ(later[0].hostnames, std::vector<std::string>{"node0063"});

  std::stringstream tsv;
  writeTsv(tsv, rows);
  EXPECT_EQ(tsv.str(), "component\tfailureCount\thostnames\nimage out of sync\t3\tnode0005,node0017,node0063\n");
  EXPECT_EQ(toJson(rows)[0]["failureCount"], 3);
}
