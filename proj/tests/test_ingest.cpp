#include <gtest/gtest.h>

#include <random>
#include <sstream>
#include <thread>

#include "podwatch/ingest.hpp"
#include "podwatch/text.hpp"
#include "support.hpp"

using namespace podwatch;
using podwatch::testing::TempDir;

namespace {

NodeRecord sampleNode(Timestamp t, int i) {
  NodeRecord r;
  r.hostname = "node" + zeroPad(i, 4);
  r.timestamp = t;
  r.lastSeen = t - (i % 3);
  r.rack = "rack" + zeroPad(i / 32 + 1, 2);
  r.slotIndex = i % 32;
  r.imageVersion = "img-1";
  r.kernelVersion = "5.14";
  r.cpuLoad = 0.25 * i;
  r.memUsedPct = 10 + i % 50;
  r.diskUsedPct = 33.5;
  r.totalCores = 32;
  if (i % 2) {
    r.jobs = {{"job" + std::to_string(i % 5), "user" + std::to_string(i % 3), 8}};
    if (i % 4 == 1) r.jobs.push_back({"jobx", "ann", 4});
  }
  for (const auto& j : r.jobs) r.scheduledCores += j.cores;
  r.ip = "10.0.0." + std::to_string(i);
  r.mac = "02:00:00:00:00:" + zeroPad(i, 2);
  if (i % 7 == 0) r.failedComponent = "psu";
  r.stale = i % 11 == 0;
  return r;
}

SensorReading sampleReading(Timestamp t, int i) {
  return {"ecopod", "zone0" + std::to_string(i % 9 + 1) + ".p" + std::to_string(i), t, (i % 4) * 1.25, "°C",
          "zone0" + std::to_string(i % 9 + 1)};
}

// Independent in-memory model of the four tables.
struct TableModel {
  std::map<std::pair<std::string, std::string>, double> edge, edgeT, raw;
  std::map<std::string, double> deg;

  void apply(const std::vector<Triple>& batch) {
    for (const auto& t : batch) {
      if (t.col.find('|') != std::string::npos) {
        if (edge.emplace(std::make_pair(t.row, t.col), 1.0).second) {
          edgeT[{t.col, t.row}] = 1.0;
          deg[t.col] += 1;
        }
      } else {
        raw[{t.row, t.col}] = t.val;
      }
    }
  }
};

std::map<std::pair<std::string, std::string>, double> asMap(const AssociativeArray& a) {
  return {a.entries().begin(), a.entries().end()};
}

}  // namespace

TEST(RecordKeys, FormatAndParse) {
  auto k = recordKey(1700000000, "ecopod", "zone01.humidity");
  EXPECT_EQ(k, "1700000000|ecopod|zone01.humidity");
  auto p = parseRecordKey(k);
  EXPECT_EQ(p.time, 1700000000);
  EXPECT_EQ(p.source, "ecopod");
  EXPECT_EQ(p.id, "zone01.humidity");
  EXPECT_EQ(parseRecordKey(recordKey(5, "latch", "a|b")).id, "a|b");
  EXPECT_THROW(parseRecordKey("garbage"), Error);
  EXPECT_THROW(parseRecordKey("12x|a|b"), Error);
}

TEST(RecordKeys, TimeRangeAndCycleRows) {
  auto r = timeRange(100, 200);
  EXPECT_TRUE(r.contains(recordKey(100, "ecopod", "a")));
  EXPECT_TRUE(r.contains(recordKey(200, "zzz", "zzz")));
  EXPECT_FALSE(r.contains(recordKey(99, "zzz", "z")));
  EXPECT_FALSE(r.contains(recordKey(201, "a", "a")));
  auto c = cycleRows(100, "cluster");
  EXPECT_TRUE(c.contains(recordKey(100, "cluster", "node1")));
  EXPECT_FALSE(c.contains(recordKey(100, "clusterx", "node1")));
  EXPECT_FALSE(c.contains(recordKey(100, "ecopod", "a")));
  EXPECT_TRUE(cycleRows(100).contains(recordKey(100, "ecopod", "a")));
}

TEST(Triples, ReadingExplodesCategoricalFields) {
  SensorReading r{"ecopod", "zone03.humidity", 1700000015, 71.5, "%RH", "zone03"};
  auto ts = toTriples(r);
  std::set<std::string> cols;
  for (const auto& t : ts) {
    EXPECT_EQ(t.row, "1700000015|ecopod|zone03.humidity");
    cols.insert(t.col);
    if (isExplodedColumn(t.col)) EXPECT_EQ(t.val, 1.0);
  }
  EXPECT_EQ(cols, (std::set<std::string>{"source|ecopod", "unit|%RH", "zone|zone03", "value", "time"}));
  r.value = 0;
  for (const auto& t : toTriples(r)) EXPECT_NE(t.col, "value");
}

TEST(Triples, NodeRecordRoundTrip) {
  for (int i = 0; i < 60; ++i) {
    auto rec = sampleNode(1700000000, i);
    auto ts = toTriples(rec);
    std::vector<std::string> exploded;
    std::map<std::string, double, std::less<>> raw;
    for (const auto& t : ts) {
      if (isExplodedColumn(t.col)) {
        EXPECT_EQ(t.val, 1.0);
        exploded.push_back(t.col);
      } else {
        raw[t.col] = t.val;
      }
    }
    EXPECT_EQ(nodeRecordFromColumns(ts.front().row, exploded, raw), rec) << i;
  }
}

TEST(Triples, NodeRecordsFromArrays) {
  std::vector<Triple> all;
  std::vector<NodeRecord> recs;
  for (int i = 0; i < 20; ++i) {
    recs.push_back(sampleNode(1700000000, i));
    auto ts = toTriples(recs.back());
    all.insert(all.end(), ts.begin(), ts.end());
  }
  auto reading = toTriples(sampleReading(1700000000, 3));
  all.insert(all.end(), reading.begin(), reading.end());
  std::vector<Triple> edge, raw;
  for (const auto& t : all) (isExplodedColumn(t.col) ? edge : raw).push_back(t);
  auto back = nodeRecordsFrom(AssociativeArray::fromTriples(edge), AssociativeArray::fromTriples(raw));
  EXPECT_EQ(back, recs);
}

TEST(Triples, SplitExploded) {
  auto [f, v] = splitExploded("jobowner|job3|ann");
  EXPECT_EQ(f, "jobowner");
  EXPECT_EQ(v, "job3|ann");
  EXPECT_FALSE(isExplodedColumn("value"));
  EXPECT_TRUE(isExplodedColumn("user|"));
}

TEST(Tables, Names) {
  for (auto t : {Table::Tedge, Table::TedgeT, Table::Tdeg, Table::Traw}) EXPECT_EQ(tableFromName(tableName(t)), t);
  EXPECT_THROW(tableFromName("Tfoo"), Error);
}

TEST(StoreTest, BatchesMatchTableModel) {
  TempDir dir("store");
  Store store(dir.path());
  TableModel model;
  std::mt19937 rng(8);
  for (Timestamp t = 1700000000; t < 1700000000 + 15 * 12; t += 15) {
    std::vector<Triple> batch;
    for (int i = 0; i < 25; ++i) {
      auto ts = toTriples(sampleReading(t, static_cast<int>(rng() % 40)));
      batch.insert(batch.end(), ts.begin(), ts.end());
    }
    for (int i = 0; i < 10; ++i) {
      auto ts = toTriples(sampleNode(t, static_cast<int>(rng() % 30)));
      batch.insert(batch.end(), ts.begin(), ts.end());
    }
    // Re-sending part of a batch must not double count degrees.
    std::vector<Triple> again(batch.begin(), batch.begin() + 10);
    batch.insert(batch.end(), again.begin(), again.end());
    auto receipt = store.ingestBatch(batch);
    EXPECT_EQ(receipt.count, batch.size());
    model.apply(batch);
  }
  EXPECT_EQ(asMap(store.queryRange(Table::Tedge, KeySelector::all())), model.edge);
  EXPECT_EQ(asMap(store.queryRange(Table::TedgeT, KeySelector::all())), model.edgeT);
  EXPECT_EQ(asMap(store.queryRange(Table::Traw, KeySelector::all())), model.raw);
  std::map<std::pair<std::string, std::string>, double> deg;
  for (const auto& [col, n] : model.deg) deg[{col, "degree"}] = n;
  EXPECT_EQ(asMap(store.queryRange(Table::Tdeg, KeySelector::all())), deg);
  EXPECT_EQ(store.count(Table::Tedge), model.edge.size());
  EXPECT_EQ(store.count(Table::Traw), model.raw.size());

  // Tdeg equals the column sums of Tedge.
  auto sums = store.queryRange(Table::Tedge, KeySelector::all()).sumRows("degree").transpose();
  EXPECT_EQ(sums, store.queryRange(Table::Tdeg, KeySelector::all()));
}

TEST(StoreTest, RangeQueriesMatchLinearScan) {
  TempDir dir("range");
  Store store(dir.path());
  std::vector<Triple> everything;
  for (Timestamp t = 1000; t < 1000 + 60 * 30; t += 30) {
    std::vector<Triple> batch;
    for (int i = 0; i < 8; ++i) {
      auto ts = toTriples(sampleReading(t, i));
      batch.insert(batch.end(), ts.begin(), ts.end());
      auto ns = toTriples(sampleNode(t, i));
      batch.insert(batch.end(), ns.begin(), ns.end());
    }
    store.ingestBatch(batch);
    everything.insert(everything.end(), batch.begin(), batch.end());
  }
  std::mt19937 rng(1);
  for (int q = 0; q < 50; ++q) {
    Timestamp a = 990 + static_cast<Timestamp>(rng() % 1900), b = a + static_cast<Timestamp>(rng() % 400);
    std::vector<std::string> cols = {"value", "cpuLoad", "time"};
    cols.resize(1 + rng() % 3);
    auto got = store.queryRange(Table::Traw, timeRange(a, b), KeySelector::set(cols));
    std::map<std::pair<std::string, std::string>, double> expect;
    for (const auto& t : everything) {
      if (isExplodedColumn(t.col) || t.val == 0) continue;
      auto time = parseRecordKey(t.row).time;
      if (time < a || time > b) continue;
      if (std::find(cols.begin(), cols.end(), t.col) == cols.end()) continue;
      expect[{t.row, t.col}] = t.val;
    }
    ASSERT_EQ(asMap(got), expect) << a << ".." << b;
  }
  auto users = store.queryRange(Table::TedgeT, KeySelector::prefix("user|"));
  for (const auto& r : users.rows()) EXPECT_TRUE(startsWith(r, "user|"));
  EXPECT_FALSE(users.empty());

  EXPECT_EQ(store.latestTime("ecopod"), 1000 + 59 * 30);
  EXPECT_FALSE(store.latestTime("nothing"));
  auto latest = store.latestFrame("ecopod");
  for (const auto& r : latest.rows()) EXPECT_EQ(parseRecordKey(r).time, 1000 + 59 * 30);
  EXPECT_THROW(store.latestFrame("nothing"), NoData);
  auto times = store.cycleTimes("cluster", 1100, 1200);
  EXPECT_EQ(times, (std::vector<Timestamp>{1120, 1150, 1180}));
}

TEST(StoreTest, ExplodedColumnMustCarryOne) {
  TempDir dir("bad");
  Store store(dir.path());
  std::vector<Triple> batch = {{"1|ecopod|a", "value", 3}, {"1|ecopod|a", "zone|z1", 2}};
  EXPECT_THROW(store.ingestBatch(batch), InvalidTriple);
  std::vector<Triple> nan = {{"1|ecopod|a", "value", std::nan("")}};
  EXPECT_THROW(store.ingestBatch(nan), InvalidTriple);
  EXPECT_EQ(store.count(Table::Traw), 0u);
  EXPECT_EQ(store.count(Table::Tedge), 0u);
}

TEST(StoreTest, PersistsAcrossReopenAndDumpIsSorted) {
  TempDir dir("reopen");
  std::string before;
  {
    Store store(dir.path());
    auto ts = toTriples(sampleNode(50, 3));
    store.ingestBatch(ts);
    std::stringstream out;
    store.dump(out, Table::Traw);
    before = out.str();
  }
  Store again(dir.path());
  std::stringstream out;
  again.dump(out, Table::Traw);
  EXPECT_EQ(out.str(), before);
  auto parsed = readTsv(out);
  EXPECT_TRUE(std::is_sorted(parsed.begin(), parsed.end()));
  EXPECT_FALSE(parsed.empty());
}

TEST(StoreTest, ClosedStoreThrows) {
  TempDir dir("closed");
  Store store(dir.path());
  store.close();
  std::vector<Triple> ts = {{"1|a|b", "value", 1}};
  EXPECT_THROW(store.ingestBatch(ts), StoreUnavailable);
  EXPECT_THROW(store.queryRange(Table::Traw, KeySelector::all()), StoreUnavailable);
}

TEST(StoreTest, ReadersSeeWholeBatchesOnly) {
  TempDir dir("concurrent");
  Store store(dir.path());
  std::atomic<bool> done{false};
  std::atomic<int> torn{0};
  std::thread reader([&] {
    while (!done) {
      auto a = store.queryRange(Table::Traw, KeySelector::all(), KeySelector::set({"value"}));
      // Each batch writes exactly 50 rows.
      if (a.nnz() % 50 != 0) ++torn;
    }
  });
  for (int b = 0; b < 40; ++b) {
    std::vector<Triple> batch;
    for (int i = 0; i < 50; ++i) batch.push_back({recordKey(b, "ecopod", "p" + std::to_string(i)), "value", 1.0 + i});
    store.ingestBatch(batch);
  }
  done = true;
  reader.join();
  EXPECT_EQ(torn, 0);
}
