#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <random>
#include <sstream>

#include "podwatch/rig.hpp"
#include "podwatch/vizgen.hpp"
#include "support.hpp"

using namespace podwatch;
using podwatch::testing::TempDir;

namespace {

Baseline smallBaseline() {
  std::stringstream in(
      "*\tIMAGE\timg\t-\tNodeHealth\t-\n"
      "pod.mechanical_cooling\tBINARY\t0\tInfo\tMechanicalCooling\tpod\n"
      "pod.water_alarm\tBINARY\t0\tCritical\tWater\tpod\n"
      "zone01.supply_temp\tMAX\t30\tWarning\tTemperature\tzone01\n"
      "zone02.humidity\tMAX\t70\tCritical\tWater\tzone02\n"
      "h1\tHOST\tr1:0\tCritical\tNodeHealth\tzone01\n"
      "h2\tHOST\tr1:1\tCritical\tNodeHealth\tzone01\n"
      "h3\tHOST\tr2:0\tWarning\tNodeHealth\tzone02\n");
  return loadBaseline(in);
}

std::vector<NodeRecord> records() {
  std::vector<NodeRecord> out(2);
  out[0].hostname = "h1";
  out[0].totalCores = 32;
  out[0].scheduledCores = 16;
  out[0].cpuLoad = 15.5;
  out[0].imageVersion = "img";
  out[0].jobs = {{"j1", "ann", 16}};
  out[1].hostname = "h2";
  out[1].totalCores = 32;
  out[1].scheduledCores = 8;
  out[1].cpuLoad = 1.0 / 3.0;
  out[1].imageVersion = "old";
  out[1].jobs = {{"j1", "ann", 4}, {"j2", "bob", 4}};
  return out;
}

std::string readFile(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST(Frame, EntitiesCuesAndStats) {
  auto b = smallBaseline();
  auto recs = records();
  std::vector<NodeStatus> st;
  for (const auto& r : recs) st.push_back(classify(r, b));
  std::vector<Alert> alerts = {
      {"h3", AlertKind::Missing, 0, 0, Severity::Warning, CueClass::NodeHealth, 5, "zone02"},
      {"pod.mechanical_cooling", AlertKind::Binary, 1, 0, Severity::Info, CueClass::MechanicalCooling, 5, "pod"},
  };
  auto f = buildFrame(9, 1700000000, st, recs, alerts, b, {126, 105});
  EXPECT_EQ(f.frameId, 9u);
  ASSERT_EQ(f.entities.size(), 3u);
  EXPECT_EQ(f.entities[0].color, Color::Blue);
  EXPECT_EQ(f.entities[1].color, Color::Red);
  EXPECT_EQ(f.entities[1].badges, std::vector<std::string>{"image out of sync"});
  EXPECT_EQ(f.entities[2].color, Color::Red);
  EXPECT_EQ(f.entities[2].badges, (std::vector<std::string>{"missing from telemetry", "NodeHealth"}));
  EXPECT_EQ(f.entities[2].rack, "r2");
  EXPECT_EQ(f.stats.nodesTotal, 3);
  EXPECT_EQ(f.stats.nodesRed, 2);
  EXPECT_EQ(f.stats.jobsRunning, 2);
  EXPECT_DOUBLE_EQ(f.stats.pue, 1.2);

  // The snowflake: mechanical cooling lit, every other listed cue dark.
  std::vector<PodCue> cues = {{"pod", CueClass::MechanicalCooling, true},
                              {"pod", CueClass::Water, false},
                              {"zone01", CueClass::Temperature, false},
                              {"zone02", CueClass::Water, false}};
  EXPECT_EQ(f.podCues, cues);

  auto quiet = buildFrame(10, 1700000015, st, recs, {}, b, {0, 0});
  for (const auto& c : quiet.podCues) EXPECT_FALSE(c.active);
  EXPECT_EQ(quiet.stats.pue, 0);
}

TEST(Frame, DeterministicAndOrderIndependent) {
  auto b = smallBaseline();
  auto recs = records();
  std::vector<NodeStatus> st;
  for (const auto& r : recs) st.push_back(classify(r, b));
  std::vector<Alert> alerts = {
      {"zone02.humidity", AlertKind::Max, 81.5, 70, Severity::Critical, CueClass::Water, 5, "zone02"},
      {"pod.water_alarm", AlertKind::Binary, 1, 0, Severity::Critical, CueClass::Water, 5, "pod"},
      {"zone01.supply_temp", AlertKind::Max, 31, 30, Severity::Warning, CueClass::Temperature, 5, "zone01"},
  };
  auto bytes = serializeFrame(buildFrame(3, 100, st, recs, alerts, b, {10, 9}));
  std::mt19937 rng(4);
  for (int i = 0; i < 20; ++i) {
    std::shuffle(alerts.begin(), alerts.end(), rng);
    std::shuffle(st.begin(), st.end(), rng);
    std::shuffle(recs.begin(), recs.end(), rng);
    EXPECT_EQ(serializeFrame(buildFrame(3, 100, st, recs, alerts, b, {10, 9})), bytes);
  }
}

TEST(Frame, SerializationRoundTrip) {
  auto b = smallBaseline();
  auto recs = records();
  std::vector<NodeStatus> st;
  for (const auto& r : recs) st.push_back(classify(r, b));
  auto f = buildFrame(42, 1700000000, st, recs, {}, b, {12.5, 10});
  auto bytes = serializeFrame(f);
  EXPECT_EQ(bytes.back(), '\n');
  auto back = deserializeFrame(bytes);
  EXPECT_EQ(serializeFrame(back), bytes);
  // 1/3 is written with six significant digits.
  EXPECT_NE(bytes.find("\"heightScale\":0.0104167"), std::string::npos);
  back.entities[1].heightScale = f.entities[1].heightScale;
  EXPECT_EQ(back, f);
  EXPECT_NE(bytes.find("\"v\":1"), std::string::npos);
}

TEST(Frame, DeserializeRejectsBadInput) {
  EXPECT_THROW(deserializeFrame("{"), Error);
  EXPECT_THROW(deserializeFrame("{\"v\":2}"), Error);
  EXPECT_THROW(deserializeFrame("{\"v\":1,\"frameId\":1}"), Error);
  try {
    deserializeFrame("[]");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), "ParseError");
  }
}

TEST(Frame, CanonicalJson) {
  nlohmann::json j = {{"b", 1}, {"a", {{"z", 0.1234567}, {"y", std::nan("")}}}, {"c", {1.0, "x", true}}};
  EXPECT_EQ(canonicalJson(j), R"({"a":{"y":null,"z":0.123457},"b":1,"c":[1,"x",true]})");
  EXPECT_EQ(frameFileName(17), "0000000017.json");
}

// A water event in zone03 of a small simulated pod, frozen as bytes. Set
// PODWATCH_UPDATE_FIXTURES=1 to rewrite the file after an intended change.
TEST(Frame, GoldenWaterEvent) {
  TempDir dir("golden");
  Rig::Options o;
  o.sim.cluster.nodes = 64;
  o.points = 400;
  o.storeDir = dir.path() / "store";
  o.network = false;
  Rig rig(o);
  rig.sim().withCluster([](sim::Cluster& c, double) { c.placeJob("job1", "ann", {"node0001", "node0002"}, 16); });
  rig.sim().schedule({{30, sim::WaterEvent{"zone03"}}});
  CycleReport last;
  for (int i = 0; i < 8; ++i) last = rig.step();

  auto frame = deserializeFrame(last.frameBytes);
  bool water = false;
  for (const auto& c : frame.podCues)
    if (c.cue == CueClass::Water && c.zone == "pod") water = c.active;
  EXPECT_TRUE(water);

  std::string path = std::string(PODWATCH_FIXTURES) + "/water_event_frame.json";
  if (std::getenv("PODWATCH_UPDATE_FIXTURES")) {
    std::ofstream(path, std::ios::binary) << last.frameBytes;
  }
  auto golden = readFile(path);
  ASSERT_FALSE(golden.empty()) << "missing fixture " << path;
  EXPECT_EQ(last.frameBytes, golden);
}
