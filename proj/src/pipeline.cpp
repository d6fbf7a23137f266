#include "podwatch/pipeline.hpp"

#include <chrono>
#include <fstream>
#include <sstream>

#include "podwatch/text.hpp"

namespace podwatch {

Endpoint parseEndpoint(std::string_view text) {
  auto colon = text.rfind(':');
  if (colon == std::string_view::npos) throw ConfigError("endpoint must be host:port, got '" + std::string(text) + "'");
  Endpoint e;
  if (colon > 0) e.host = text.substr(0, colon);
  try {
    auto port = parseInteger(text.substr(colon + 1));
    if (port < 0 || port > 65535) throw ConfigError("port out of range");
    e.port = static_cast<std::uint16_t>(port);
  } catch (const ConfigError&) {
    throw;
  } catch (const Error&) {
    throw ConfigError("bad port in '" + std::string(text) + "'");
  }
  return e;
}

void PipelineConfig::set(std::string_view key, std::string_view value) {
  std::string v(value);
  if (key == "modbus") modbus = parseEndpoint(v);
  else if (key == "register_map") registerMap = v;
  else if (key == "telemetry") telemetry = parseEndpoint(v);
  else if (key == "baseline") baseline = v;
  else if (key == "store") store = v;
  else if (key == "period") {
    try {
      periodS = parseNumber(v);
    } catch (const Error&) {
      throw ConfigError("period must be a number, got '" + v + "'");
    }
  } else if (key == "server") server = parseEndpoint(v);
  else if (key == "spool") spool = v;
  else if (key == "event_log") eventLog = v;
  else if (key == "frames_dir") framesDir = v;
  else if (key == "audit_log") auditLog = v;
  else if (key == "tokens") tokens = v;
  else throw ConfigError("unknown config key '" + std::string(key) + "'");
}

PipelineConfig PipelineConfig::parse(std::istream& in) {
  PipelineConfig cfg;
  std::string line;
  int lineNo = 0;
  while (std::getline(in, line)) {
    ++lineNo;
    auto text = trim(line);
    if (text.empty() || text[0] == '#') continue;
    auto eq = text.find('=');
    if (eq == std::string_view::npos) throw ConfigError("config line " + std::to_string(lineNo) + ": expected key = value");
    cfg.set(trim(text.substr(0, eq)), trim(text.substr(eq + 1)));
  }
  return cfg;
}

PipelineConfig PipelineConfig::loadFile(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  return parse(in);
}

void PipelineConfig::validate() const {
  if (!(periodS > 0)) throw ConfigError("period must be > 0");
  for (const auto* p : {&registerMap, &baseline, &tokens})
    if (!p->empty() && !std::filesystem::exists(*p)) throw ConfigError("missing file " + *p);
}

// ---------------------------------------------------------------------------

namespace {

std::string_view pointOf(std::string_view row) {
  auto p2 = row.find('|', row.find('|') + 1);
  return row.substr(p2 + 1);
}

}  // namespace

Correlation correlate(const AssociativeArray& edge, const AssociativeArray& raw, Timestamp t,
                      const Baseline& baseline, AlertLatch& latch) {
  Correlation c;
  auto sensors = raw.subsref(cycleRows(t, kPodSource), KeySelector::all());
  auto nodeRows = cycleRows(t, kClusterSource);
  c.records = nodeRecordsFrom(edge.subsref(nodeRows, KeySelector::all()), raw.subsref(nodeRows, KeySelector::all()));

  std::set<std::string, std::less<>> present;
  for (const auto& r : c.records) {
    c.statuses.push_back(classify(r, baseline));
    present.insert(r.hostname);
  }

  auto detected = detectDeviations(sensors, baseline, t);
  auto missing = missingHosts(present, baseline, t);
  detected.insert(detected.end(), missing.begin(), missing.end());

  std::map<std::string, double, std::less<>> values;
  for (const auto& [key, v] : sensors.entries()) {
    auto id = pointOf(key.first);
    auto& slot = values[std::string(id)];
    if (key.second == "value") {
      slot = v;
      if (id == "pod.it_kw") c.pod.itKw = v;
      else if (startsWith(id, "feed") && id.ends_with(".kw")) c.pod.totalKw += v;
    }
  }
  c.update = latch.apply(detected, [&](const std::string& id) -> std::optional<double> {
    auto it = values.find(id);
    if (it == values.end()) return std::nullopt;
    return it->second;
  });
  c.active = latch.active();
  return c;
}

std::vector<Triple> metaTriples(Timestamp t, std::uint64_t frameId, double periodS, double totalKw) {
  auto key = recordKey(t, kPipelineSource, "cycle");
  std::vector<Triple> out{{key, "source|" + std::string(kPipelineSource), 1.0},
                          {key, "frameId", static_cast<double>(frameId)},
                          {key, "period", periodS},
                          {key, "time", static_cast<double>(t)}};
  if (totalKw != 0) out.push_back({key, "totalKW", totalKw});
  return out;
}

std::vector<Triple> latchTriples(Timestamp t, const std::vector<Alert>& active) {
  std::vector<Triple> out;
  for (const auto& a : active) {
    auto key = recordKey(t, kLatchSource, a.pointId);
    out.push_back({key, "source|" + std::string(kLatchSource), 1.0});
    out.push_back({key, "kind", static_cast<double>(static_cast<int>(a.kind) + 1)});
    out.push_back({key, "since", static_cast<double>(a.timestamp)});
    if (a.observed != 0) out.push_back({key, "observed", a.observed});
    if (a.limit != 0) out.push_back({key, "limit", a.limit});
  }
  return out;
}

std::vector<Alert> latchFromRaw(const AssociativeArray& raw, Timestamp t, const Baseline& baseline) {
  std::map<std::string, Alert> byPoint;
  auto rows = raw.subsref(cycleRows(t, kLatchSource), KeySelector::all());
  for (const auto& [key, v] : rows.entries()) {
    auto& a = byPoint[std::string(pointOf(key.first))];
    if (key.second == "kind") a.kind = static_cast<AlertKind>(static_cast<int>(v) - 1);
    else if (key.second == "since") a.timestamp = static_cast<Timestamp>(v);
    else if (key.second == "observed") a.observed = v;
    else if (key.second == "limit") a.limit = v;
  }
  std::vector<Alert> out;
  for (auto& [id, a] : byPoint) {
    a.pointId = id;
    if (const auto* e = baseline.find(id)) {
      a.severity = e->severity;
      a.cue = e->cue;
      a.zone = e->zone;
    } else if (const auto* h = baseline.host(id)) {
      a.severity = h->severity;
      a.cue = CueClass::NodeHealth;
      a.zone = h->zone;
    } else {
      continue;  // no longer in the baseline
    }
    out.push_back(std::move(a));
  }
  return out;
}

std::optional<CycleMeta> cycleMeta(const AssociativeArray& raw, Timestamp t) {
  auto key = recordKey(t, kPipelineSource, "cycle");
  if (!raw.find(key, "time")) return std::nullopt;
  return CycleMeta{static_cast<std::uint64_t>(raw.at(key, "frameId")), raw.at(key, "period"), raw.at(key, "totalKW")};
}

VizFrame reconstructFrame(const Store& store, const Baseline& baseline, Timestamp t, AlertLatch& latch) {
  auto rows = cycleRows(t);
  auto edge = store.queryRange(Table::Tedge, rows);
  auto raw = store.queryRange(Table::Traw, rows);
  auto meta = cycleMeta(raw, t);
  if (!meta) throw NoData("no pipeline cycle at " + std::to_string(t));
  auto c = correlate(edge, raw, t, baseline, latch);
  return buildFrame(meta->frameId, t, c.statuses, c.records, c.active, baseline, c.pod);
}

std::vector<Alert> latchBefore(const Store& store, const Baseline& baseline, Timestamp t) {
  if (t <= 0) return {};
  auto times = store.cycleTimes(kPipelineSource, 0, t - 1);
  if (times.empty()) return {};
  auto raw = store.queryRange(Table::Traw, cycleRows(times.back(), kLatchSource));
  return latchFromRaw(raw, times.back(), baseline);
}

std::string timingHeader() {
  return "frameId\ttime\tpoll_s\tcorrelate_s\tingest_s\tframe_s\ttotal_s\treadings\tnodes\ttriples\tfailed_points";
}

std::string timingRow(const CycleReport& r) {
  std::ostringstream out;
  auto s = [](double v) { return formatSignificant(v, 4); };
  out << r.frameId << '\t' << r.time << '\t' << s(r.timings.poll) << '\t' << s(r.timings.correlate) << '\t'
      << s(r.timings.ingest) << '\t' << s(r.timings.frame) << '\t' << s(r.timings.total()) << '\t' << r.readings
      << '\t' << r.nodes << '\t' << r.triples << '\t' << r.failedPoints.size();
  return out.str();
}

// ---------------------------------------------------------------------------

Pipeline::Pipeline(Baseline baseline, Store& store, SensorSource sensors, NodeSource nodes, double periodS)
    : baseline_(std::move(baseline)),
      store_(store),
      sensors_(std::move(sensors)),
      nodes_(std::move(nodes)),
      periodS_(periodS) {
  if (!(periodS_ > 0)) throw ConfigError("period must be > 0");
  if (auto last = store_.latestTime(kPipelineSource)) {
    auto raw = store_.queryRange(Table::Traw, cycleRows(*last, kPipelineSource));
    if (auto meta = cycleMeta(raw, *last)) nextFrameId_ = meta->frameId + 1;
    latch_.restore(latchFromRaw(store_.queryRange(Table::Traw, cycleRows(*last, kLatchSource)), *last, baseline_));
  }
}

void Pipeline::setFramesDir(std::filesystem::path dir) {
  std::filesystem::create_directories(dir);
  framesDir_ = std::move(dir);
}

CycleReport Pipeline::runCycle(Timestamp t) {
  using Clock = std::chrono::steady_clock;
  auto seconds = [](Clock::time_point a, Clock::time_point b) { return std::chrono::duration<double>(b - a).count(); };
  CycleReport rep;
  rep.time = t;
  rep.frameId = nextFrameId_;

  auto t0 = Clock::now();
  auto polled = sensors_ ? sensors_(t) : modbus::PollResult{};
  auto nodes = nodes_ ? nodes_(t) : std::vector<NodeRecord>{};
  rep.readings = polled.readings.size();
  rep.nodes = nodes.size();
  rep.failedPoints = std::move(polled.failed);

  auto t1 = Clock::now();
  std::vector<Triple> triples, edge, raw;
  triples.reserve(polled.readings.size() * 5 + nodes.size() * 24);
  for (auto r : polled.readings) {
    r.timestamp = t;
    auto tr = toTriples(r);
    triples.insert(triples.end(), tr.begin(), tr.end());
  }
  for (auto n : nodes) {
    n.timestamp = t;
    auto tr = toTriples(n);
    triples.insert(triples.end(), tr.begin(), tr.end());
  }
  for (const auto& tr : triples) (isExplodedColumn(tr.col) ? edge : raw).push_back(tr);
  auto c = correlate(AssociativeArray::fromTriples(edge, Collision::Last),
                     AssociativeArray::fromTriples(raw, Collision::Last), t, baseline_, latch_);
  if (router_)
    for (const auto& a : c.update.raised) router_->route(a);
  rep.raised = c.update.raised;

  auto t2 = Clock::now();
  auto meta = metaTriples(t, rep.frameId, periodS_, c.pod.totalKw);
  auto held = latchTriples(t, c.active);
  triples.insert(triples.end(), meta.begin(), meta.end());
  triples.insert(triples.end(), held.begin(), held.end());
  rep.triples = store_.ingestBatch(triples).count;

  auto t3 = Clock::now();
  rep.frame = buildFrame(rep.frameId, t, c.statuses, c.records, c.active, baseline_, c.pod);
  rep.frameBytes = serializeFrame(rep.frame);
  if (!framesDir_.empty()) {
    std::ofstream out(framesDir_ / frameFileName(rep.frameId), std::ios::binary);
    out << rep.frameBytes;
  }
  if (sink_) sink_(rep.frame, rep.frameBytes, c.records, c.statuses, c.update.raised);
  auto t4 = Clock::now();

  rep.timings = {seconds(t0, t1), seconds(t1, t2), seconds(t2, t3), seconds(t3, t4)};
  ++nextFrameId_;
  return rep;
}

}  // namespace podwatch
