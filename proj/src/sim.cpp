#include "podwatch/sim.hpp"

#include <sys/socket.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <ostream>

#include "podwatch/text.hpp"

namespace podwatch::sim {

namespace {

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

/// Deterministic uniform in [0, 1) from a tuple of integers.
double unitHash(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  std::uint64_t h = splitmix(splitmix(splitmix(a) ^ b) ^ c);
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

double relax(double value, double target, double dt, double tau) {
  return target + (value - target) * std::exp(-dt / tau);
}

double round2(double v) { return std::round(v * 100.0) / 100.0; }
double round1(double v) { return std::round(v * 10.0) / 10.0; }

int parseIndexed(std::string_view name, std::string_view prefix) {
  if (!startsWith(name, prefix)) return -1;
  try {
    return static_cast<int>(parseInteger(name.substr(prefix.size()))) - 1;
  } catch (const Error&) {
    return -1;
  }
}

}  // namespace

std::string zoneName(int index) { return "zone" + zeroPad(index + 1, 2); }
std::string rackName(int index) { return "rack" + zeroPad(index + 1, 2); }
std::string feedName(int index) { return std::string("feed") + static_cast<char>('A' + index); }

// ---------------------------------------------------------------------------
// Pod

PodState PodState::initial(const PodConfig& cfg, double clock) {
  PodState s;
  auto n = static_cast<std::size_t>(cfg.zones);
  s.zoneTempC.assign(n, cfg.ambientC);
  s.zoneHumidityPct.assign(n, cfg.baseHumidityPct);
  s.zonePressurePa.assign(n, cfg.basePressurePa);
  s.zoneAirflowM3h.assign(n, cfg.baseAirflowM3h);
  s.zoneItKw.assign(n, 0.0);
  s.zoneRampCps.assign(n, 0.0);
  s.zoneWet.assign(n, false);
  s.simClock = clock;
  return s;
}

PodState step(const PodState& state, double dt, const PodConfig& cfg) {
  PodState s = state;
  double itKw = 0;
  for (std::size_t z = 0; z < s.zoneTempC.size(); ++z) {
    double target = cfg.ambientC + cfg.heatCPerKw * s.zoneItKw[z] + s.zoneRampCps[z] * cfg.thermalTauS -
                    (s.mechanicalCooling ? cfg.coolingDeltaC : 0.0);
    s.zoneTempC[z] = std::clamp(relax(s.zoneTempC[z], target, dt, cfg.thermalTauS), -20.0, 80.0);

    double humidTarget = cfg.baseHumidityPct + (s.zoneWet[z] ? cfg.waterHumidityPct : 0.0);
    s.zoneHumidityPct[z] = std::clamp(relax(s.zoneHumidityPct[z], humidTarget, dt, cfg.humidityTauS), 0.0, 100.0);
    s.zonePressurePa[z] =
        relax(s.zonePressurePa[z], cfg.basePressurePa + 0.01 * s.zoneItKw[z], dt, cfg.humidityTauS);
    s.zoneAirflowM3h[z] =
        relax(s.zoneAirflowM3h[z], cfg.baseAirflowM3h + 15.0 * s.zoneItKw[z], dt, cfg.humidityTauS);
    itKw += s.zoneItKw[z];
  }
  s.itKw = itKw;

  bool anyAbove = std::any_of(s.zoneTempC.begin(), s.zoneTempC.end(), [&](double t) { return t > cfg.setpointC; });
  bool allBelow = std::all_of(s.zoneTempC.begin(), s.zoneTempC.end(),
                              [&](double t) { return t < cfg.setpointC - cfg.hysteresisC; });
  if (anyAbove)
    s.mechanicalCooling = true;
  else if (allBelow)
    s.mechanicalCooling = false;
  s.economizerMode = !s.mechanicalCooling;

  double overhead = s.mechanicalCooling ? cfg.mechanicalOverhead : cfg.economizerOverhead;
  for (int f = 0; f < kFeeds; ++f) s.feedKw[f] = s.itKw * overhead / kFeeds + s.feedSpikeKw[f];
  s.simClock += dt;
  return s;
}

// ---------------------------------------------------------------------------
// Cluster

int SimNode::scheduledCores() const {
  int n = 0;
  for (const auto& j : jobs) n += j.cores;
  return n;
}

double SimNode::powerKw(const ClusterConfig& cfg) const { return cfg.idleKw + cfg.kwPerLoad * cpuLoad; }

Cluster::Cluster(ClusterConfig cfg, int racks, std::uint64_t seed, double clock) : cfg_(std::move(cfg)) {
  if (cfg_.nodes > racks * cfg_.nodesPerRack)
    throw Error("InvalidConfig", std::to_string(cfg_.nodes) + " nodes do not fit in " + std::to_string(racks) +
                                     " racks of " + std::to_string(cfg_.nodesPerRack));
  nodes_.reserve(static_cast<std::size_t>(cfg_.nodes));
  for (int i = 0; i < cfg_.nodes; ++i) {
    SimNode n;
    n.hostname = "node" + zeroPad(i + 1, 4);
    n.rackIndex = i / cfg_.nodesPerRack;
    n.rack = rackName(n.rackIndex);
    n.slotIndex = i % cfg_.nodesPerRack;
    n.totalCores = cfg_.coresPerNode;
    n.memUsedPct = cfg_.baseMemPct;
    n.diskUsedPct = 20.0 + (i % 7) * 5.0;
    n.imageVersion = cfg_.imageVersion;
    n.kernelVersion = cfg_.kernelVersion;
    n.ip = "10.1." + std::to_string(n.rackIndex + 1) + "." + std::to_string(n.slotIndex + 1);
    char mac[32];
    std::snprintf(mac, sizeof mac, "02:00:00:00:%02x:%02x", (i >> 8) & 0xFF, i & 0xFF);
    n.mac = mac;
    n.lastSeen = clock;
    n.leakFactor = 0.6 + 0.8 * unitHash(seed, 0x1eaf, static_cast<std::uint64_t>(i));
    index_.emplace(n.hostname, nodes_.size());
    nodes_.push_back(std::move(n));
  }
}

const SimNode& Cluster::node(const std::string& host) const {
  auto it = index_.find(host);
  if (it == index_.end()) throw UnknownHost("unknown host " + host);
  return nodes_[it->second];
}

SimNode& Cluster::node(const std::string& host) {
  auto it = index_.find(host);
  if (it == index_.end()) throw UnknownHost("unknown host " + host);
  return nodes_[it->second];
}

void Cluster::step(double dt, double now) {
  for (auto& n : nodes_) {
    if (!n.responding) continue;
    n.cpuLoad = relax(n.cpuLoad, n.scheduledCores(), dt, cfg_.loadTauS);
    n.leakPct += n.leakRate * dt;
    double mem = cfg_.baseMemPct + cfg_.memPctPerCore * n.scheduledCores() + n.leakPct;
    n.memUsedPct = std::min(100.0, mem);
    n.lastSeen = now;
    if (mem >= 100.0) n.responding = false;  // out of memory: collector stops answering
  }
}

void Cluster::placeJob(const std::string& jobId, const std::string& user, const std::vector<std::string>& hosts,
                       int coresPerNode) {
  for (const auto& h : hosts) {
    const auto& n = node(h);
    if (n.drained) throw Error("HostDrained", h + " is removed from the scheduler");
    if (n.scheduledCores() + coresPerNode > n.totalCores)
      throw Error("InsufficientCores", h + " cannot fit " + std::to_string(coresPerNode) + " more cores");
  }
  for (const auto& h : hosts) node(h).jobs.push_back({jobId, user, coresPerNode});
}

void Cluster::endJob(const std::string& jobId) {
  for (auto& n : nodes_)
    std::erase_if(n.jobs, [&](const JobSlice& j) { return j.jobId == jobId; });
}

std::vector<std::string> Cluster::hostsOfJob(const std::string& jobId) const {
  std::vector<std::string> out;
  for (const auto& n : nodes_)
    if (std::any_of(n.jobs.begin(), n.jobs.end(), [&](const JobSlice& j) { return j.jobId == jobId; }))
      out.push_back(n.hostname);
  return out;
}

void Cluster::startMemoryLeak(const std::string& jobId) {
  auto hosts = hostsOfJob(jobId);
  if (hosts.empty()) throw UnknownJob("no node runs job " + jobId);
  for (const auto& h : hosts) {
    auto& n = node(h);
    n.leakRate = cfg_.leakPctPerS * n.leakFactor;
  }
}

void Cluster::driftImage(const std::string& host, const std::string& version) { node(host).imageVersion = version; }

void Cluster::reboot(const std::string& host, double now) {
  auto& n = node(host);
  n.jobs.clear();
  n.cpuLoad = 0;
  n.leakPct = 0;
  n.leakRate = 0;
  n.memUsedPct = cfg_.baseMemPct;
  n.failedComponent.clear();
  n.responding = true;
  n.lastSeen = now;
}

void Cluster::reimage(const std::string& host, double now) {
  node(host).imageVersion = cfg_.imageVersion;
  reboot(host, now);
}

void Cluster::removeFromScheduler(const std::string& host) { node(host).drained = true; }
void Cluster::returnToService(const std::string& host) { node(host).drained = false; }

std::vector<NodeRecord> Cluster::emitTelemetry(Timestamp now) const {
  std::vector<NodeRecord> out;
  out.reserve(nodes_.size());
  for (const auto& n : nodes_) {
    NodeRecord r;
    r.hostname = n.hostname;
    r.timestamp = now;
    r.lastSeen = static_cast<Timestamp>(std::floor(n.lastSeen));
    r.rack = n.rack;
    r.slotIndex = n.slotIndex;
    r.imageVersion = n.imageVersion;
    r.kernelVersion = n.kernelVersion;
    r.cpuLoad = round2(n.cpuLoad);
    r.memUsedPct = round1(n.memUsedPct);
    r.diskUsedPct = round1(n.diskUsedPct);
    r.totalCores = n.totalCores;
    r.scheduledCores = n.scheduledCores();
    r.jobs = n.jobs;
    r.ip = n.ip;
    r.mac = n.mac;
    r.failedComponent = n.failedComponent;
    r.stale = !n.responding && static_cast<double>(now) - n.lastSeen > cfg_.staleAfterS;
    out.push_back(std::move(r));
  }
  return out;
}

double Cluster::itKw() const {
  double total = 0;
  for (const auto& n : nodes_) total += n.powerKw(cfg_);
  return total;
}

std::vector<double> Cluster::rackKw() const {
  std::vector<double> out;
  for (const auto& n : nodes_) {
    if (static_cast<std::size_t>(n.rackIndex) >= out.size()) out.resize(static_cast<std::size_t>(n.rackIndex) + 1, 0.0);
    out[static_cast<std::size_t>(n.rackIndex)] += n.powerKw(cfg_);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Fault scripts

namespace {

Fault parseFault(std::string_view name, std::string_view args) {
  auto a = split(args, ',');
  for (auto& s : a) s = trim(s);
  auto need = [&](std::size_t n) {
    if (a.size() < n || (n > 0 && a[0].empty()))
      throw InvalidFaultScript(std::string(name) + " needs " + std::to_string(n) + " argument(s)");
  };
  if (name == "WaterEvent") {
    need(1);
    return WaterEvent{std::string(a[0])};
  }
  if (name == "PowerSpike") {
    need(2);
    return PowerSpike{std::string(a[0]), parseNumber(a[1])};
  }
  if (name == "FireBit") {
    bool on = a.empty() || a[0].empty() || !(a[0] == "0" || a[0] == "off");
    return FireBit{on};
  }
  if (name == "TempRamp") {
    need(2);
    return TempRamp{std::string(a[0]), parseNumber(a[1])};
  }
  if (name == "MemoryLeak") {
    need(1);
    return MemoryLeak{std::string(a[0])};
  }
  if (name == "ImageDrift") {
    need(1);
    return ImageDrift{std::string(a[0])};
  }
  throw InvalidFaultScript("unknown fault '" + std::string(name) + "'");
}

}  // namespace

std::vector<ScheduledFault> parseFaultScript(std::istream& in) {
  std::vector<ScheduledFault> out;
  std::string line;
  int lineNo = 0;
  while (std::getline(in, line)) {
    ++lineNo;
    auto body = trim(line);
    if (body.empty() || body.front() == '#') continue;
    auto f = split(body, '\t');
    if (f.size() < 2 || f.size() > 3)
      throw InvalidFaultScript("line " + std::to_string(lineNo) + ": expected time<TAB>fault<TAB>args");
    try {
      ScheduledFault sf{parseNumber(f[0]), parseFault(trim(f[1]), f.size() == 3 ? f[2] : std::string_view())};
      if (!out.empty() && sf.atTime < out.back().atTime)
        throw InvalidFaultScript("times must be non-decreasing");
      out.push_back(std::move(sf));
    } catch (const Error& e) {
      throw InvalidFaultScript("line " + std::to_string(lineNo) + ": " + e.what());
    }
  }
  return out;
}

std::vector<ScheduledFault> loadFaultScript(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidFaultScript("cannot open " + path);
  return parseFaultScript(in);
}

std::string describe(const Fault& fault) {
  struct V {
    std::string operator()(const WaterEvent& f) const { return "WaterEvent(" + f.zone + ")"; }
    std::string operator()(const PowerSpike& f) const { return "PowerSpike(" + f.feed + "," + formatNumber(f.kw) + ")"; }
    std::string operator()(const FireBit& f) const { return f.on ? "FireBit(on)" : "FireBit(off)"; }
    std::string operator()(const TempRamp& f) const { return "TempRamp(" + f.zone + "," + formatNumber(f.rateCps) + ")"; }
    std::string operator()(const MemoryLeak& f) const { return "MemoryLeak(" + f.jobId + ")"; }
    std::string operator()(const ImageDrift& f) const { return "ImageDrift(" + f.host + ")"; }
  };
  return std::visit(V{}, fault);
}

// ---------------------------------------------------------------------------
// Register map and baseline

modbus::RegisterMap defaultRegisterMap(const PodConfig& cfg, int points) {
  using modbus::BitField;
  using modbus::RegisterPoint;
  using modbus::U16Scaled;
  std::vector<RegisterPoint> out;
  auto add = [&](std::string id, std::uint16_t addr, modbus::Encoding enc, std::string unit, std::string zone) {
    if (static_cast<int>(out.size()) < points)
      out.push_back({std::move(id), addr, enc, std::move(unit), std::move(zone)});
  };

  add("pod.mechanical_cooling", 0, BitField{0}, "bool", "pod");
  add("pod.economizer", 0, BitField{1}, "bool", "pod");
  add("pod.water_alarm", 0, BitField{2}, "bool", "pod");
  add("pod.fire_alarm", 0, BitField{3}, "bool", "pod");
  add("pod.it_kw", 1, U16Scaled{0.1}, "kW", "pod");
  for (int f = 0; f < kFeeds; ++f) {
    auto base = static_cast<std::uint16_t>(2 + 3 * f);
    add(feedName(f) + ".kw", base, U16Scaled{0.1}, "kW", feedName(f));
    add(feedName(f) + ".volts", base + 1, U16Scaled{0.1}, "V", feedName(f));
    add(feedName(f) + ".amps", base + 2, U16Scaled{0.1}, "A", feedName(f));
  }
  static const char* zoneFields[] = {"supply_temp", "return_temp", "humidity", "pressure", "airflow", "dewpoint"};
  for (int z = 0; z < cfg.zones; ++z) {
    auto base = static_cast<std::uint16_t>(100 + 10 * z);
    for (int k = 0; k < 6; ++k) {
      std::string field = zoneFields[k];
      std::string unit = k == 2 ? "%RH" : k == 3 ? "Pa" : k == 4 ? "m3/h" : "°C";
      double scale = k == 4 ? 1.0 : 0.1;
      add(zoneName(z) + "." + field, static_cast<std::uint16_t>(base + k), U16Scaled{scale}, unit, zoneName(z));
    }
  }
  static const char* rackFields[] = {"inlet_temp", "outlet_temp", "humidity", "kw"};
  for (int r = 0; r < cfg.racks; ++r) {
    auto base = static_cast<std::uint16_t>(1000 + 8 * r);
    std::string zone = zoneName(r / cfg.racksPerZone());
    for (int k = 0; k < 4; ++k) {
      std::string unit = k == 2 ? "%RH" : k == 3 ? "kW" : "°C";
      double scale = k == 3 ? 0.01 : 0.1;
      add(rackName(r) + "." + rackFields[k], static_cast<std::uint16_t>(base + k), U16Scaled{scale}, unit, zone);
    }
  }
  // PDU outlet currents fill the remainder, racks round-robin.
  std::uint16_t addr = 2000;
  for (int i = 0; static_cast<int>(out.size()) < points; ++i) {
    int r = i % cfg.racks;
    int outlet = i / cfg.racks;
    add(rackName(r) + ".outlet" + zeroPad(outlet + 1, 3) + ".amps", addr++, U16Scaled{0.01}, "A",
        zoneName(r / cfg.racksPerZone()));
  }
  return modbus::RegisterMap(std::move(out));
}

void writeDefaultBaseline(std::ostream& out, const SimConfig& cfg, const modbus::RegisterMap& map) {
  out << "# pointId\tkind\tparam\tseverity\tcueClass\tzone\n";
  out << "*\tIMAGE\t" << cfg.cluster.imageVersion << "\t-\tNodeHealth\t-\n";
  out << "*\tMEMORY\t95\t-\tNodeHealth\t-\n";
  for (const auto& p : map.points()) {
    const auto& id = p.pointId;
    auto line = [&](const char* kind, const std::string& param, const char* sev, const char* cue) {
      out << id << '\t' << kind << '\t' << param << '\t' << sev << '\t' << cue << '\t' << p.zone << '\n';
    };
    if (id == "pod.mechanical_cooling") line("BINARY", "0", "Info", "MechanicalCooling");
    else if (id == "pod.economizer") line("BINARY", "0", "Info", "Economizer");
    else if (id == "pod.water_alarm") line("BINARY", "0", "Critical", "Water");
    else if (id == "pod.fire_alarm") line("BINARY", "0", "Critical", "Fire");
    else if (id == "pod.it_kw") line("MAX", "320", "Warning", "Power");
    else if (id.ends_with(".kw") && startsWith(id, "feed")) line("MAX", "160", "Critical", "Power");
    else if (id.ends_with(".supply_temp")) line("MAX", formatNumber(cfg.pod.setpointC + 3), "Warning", "Temperature");
    else if (startsWith(id, "zone") && id.ends_with(".humidity")) line("MAX", "70", "Critical", "Water");
    else if (id.ends_with(".inlet_temp")) line("MAX", "35", "Warning", "Temperature");
    else if (id.ends_with(".pressure")) line("MIN", "2", "Warning", "Temperature");
  }
  Cluster cluster(cfg.cluster, cfg.pod.racks, cfg.pod.seed, cfg.startTime);
  for (const auto& n : cluster.nodes())
    out << n.hostname << "\tHOST\t" << n.rack << ':' << n.slotIndex << "\tCritical\tNodeHealth\t"
        << zoneName(n.rackIndex / cfg.pod.racksPerZone()) << '\n';
}

// ---------------------------------------------------------------------------
// Simulation

struct Simulation::Binding {
  enum class Kind {
    Unknown, Mechanical, Economizer, Water, Fire, ItKw, FeedKw, FeedVolts, FeedAmps,
    ZoneSupply, ZoneReturn, ZoneHumidity, ZonePressure, ZoneAirflow, ZoneDewpoint,
    RackInlet, RackOutlet, RackHumidity, RackKw, OutletAmps,
  };
  Kind kind = Kind::Unknown;
  int index = 0;
  int outlets = 1;  // outlets sharing the rack's load
};

Simulation::Simulation(SimConfig cfg, modbus::RegisterMap map)
    : cfg_(std::move(cfg)),
      map_(std::move(map)),
      pod_(PodState::initial(cfg_.pod, cfg_.startTime)),
      cluster_(cfg_.cluster, cfg_.pod.racks, cfg_.pod.seed, cfg_.startTime) {
  using K = Binding::Kind;
  std::map<int, int> outletsPerRack;
  for (const auto& p : map_.points()) {
    Binding b;
    std::string_view id = p.pointId;
    auto dot = id.find('.');
    std::string_view head = id.substr(0, dot);
    std::string_view tail = dot == std::string_view::npos ? std::string_view() : id.substr(dot + 1);
    if (head == "pod") {
      if (tail == "mechanical_cooling") b.kind = K::Mechanical;
      else if (tail == "economizer") b.kind = K::Economizer;
      else if (tail == "water_alarm") b.kind = K::Water;
      else if (tail == "fire_alarm") b.kind = K::Fire;
      else if (tail == "it_kw") b.kind = K::ItKw;
    } else if (startsWith(head, "feed") && head.size() == 5) {
      b.index = head[4] - 'A';
      if (b.index >= 0 && b.index < kFeeds) {
        if (tail == "kw") b.kind = K::FeedKw;
        else if (tail == "volts") b.kind = K::FeedVolts;
        else if (tail == "amps") b.kind = K::FeedAmps;
      }
    } else if (int z = parseIndexed(head, "zone"); z >= 0 && z < cfg_.pod.zones) {
      b.index = z;
      if (tail == "supply_temp") b.kind = K::ZoneSupply;
      else if (tail == "return_temp") b.kind = K::ZoneReturn;
      else if (tail == "humidity") b.kind = K::ZoneHumidity;
      else if (tail == "pressure") b.kind = K::ZonePressure;
      else if (tail == "airflow") b.kind = K::ZoneAirflow;
      else if (tail == "dewpoint") b.kind = K::ZoneDewpoint;
    } else if (int r = parseIndexed(head, "rack"); r >= 0 && r < cfg_.pod.racks) {
      b.index = r;
      if (tail == "inlet_temp") b.kind = K::RackInlet;
      else if (tail == "outlet_temp") b.kind = K::RackOutlet;
      else if (tail == "humidity") b.kind = K::RackHumidity;
      else if (tail == "kw") b.kind = K::RackKw;
      else if (startsWith(tail, "outlet") && tail.ends_with(".amps")) {
        b.kind = K::OutletAmps;
        ++outletsPerRack[r];
      }
    }
    bindings_.push_back(b);
  }
  for (auto& b : bindings_)
    if (b.kind == K::OutletAmps) b.outlets = outletsPerRack[b.index];
  couplePowerLocked();
  pod_ = step(pod_, 1e-9, cfg_.pod);  // settle derived fields (feeds, cooling bit)
  pod_.simClock = cfg_.startTime;
}

Simulation::~Simulation() = default;

void Simulation::schedule(std::vector<ScheduledFault> script) {
  std::lock_guard lock(mu_);
  pending_ = std::move(script);
  std::stable_sort(pending_.begin(), pending_.end(),
                   [](const ScheduledFault& a, const ScheduledFault& b) { return a.atTime < b.atTime; });
  nextFault_ = 0;
}

void Simulation::injectFault(const Fault& fault) {
  std::lock_guard lock(mu_);
  applyLocked(fault);
}

void Simulation::applyLocked(const Fault& fault) {
  auto zoneIndex = [&](const std::string& zone) {
    int z = parseIndexed(zone, "zone");
    if (z < 0 || z >= cfg_.pod.zones) throw UnknownZone("unknown zone " + zone);
    return static_cast<std::size_t>(z);
  };
  if (const auto* f = std::get_if<WaterEvent>(&fault)) {
    pod_.zoneWet[zoneIndex(f->zone)] = true;
    pod_.waterAlarm = true;
  } else if (const auto* f = std::get_if<PowerSpike>(&fault)) {
    int idx = -1;
    for (int i = 0; i < kFeeds; ++i)
      if (f->feed == feedName(i)) idx = i;
    if (idx < 0) throw UnknownFeed("unknown feed " + f->feed);
    pod_.feedSpikeKw[static_cast<std::size_t>(idx)] = f->kw;
    double overhead = pod_.mechanicalCooling ? cfg_.pod.mechanicalOverhead : cfg_.pod.economizerOverhead;
    pod_.feedKw[static_cast<std::size_t>(idx)] = pod_.itKw * overhead / kFeeds + f->kw;
  } else if (const auto* f = std::get_if<FireBit>(&fault)) {
    pod_.fireAlarm = f->on;
  } else if (const auto* f = std::get_if<TempRamp>(&fault)) {
    pod_.zoneRampCps[zoneIndex(f->zone)] = f->rateCps;
  } else if (const auto* f = std::get_if<MemoryLeak>(&fault)) {
    cluster_.startMemoryLeak(f->jobId);
  } else if (const auto* f = std::get_if<ImageDrift>(&fault)) {
    cluster_.driftImage(f->host, cfg_.cluster.imageVersion + "-drift");
  }
}

void Simulation::couplePowerLocked() {
  auto racks = cluster_.rackKw();
  std::fill(pod_.zoneItKw.begin(), pod_.zoneItKw.end(), 0.0);
  int perZone = cfg_.pod.racksPerZone();
  for (std::size_t r = 0; r < racks.size(); ++r)
    pod_.zoneItKw[std::min<std::size_t>(r / static_cast<std::size_t>(perZone), pod_.zoneItKw.size() - 1)] += racks[r];
}

void Simulation::stepLocked(double dt) {
  cluster_.step(dt, pod_.simClock + dt);
  couplePowerLocked();
  pod_ = step(pod_, dt, cfg_.pod);
  ++tick_;
}

void Simulation::advanceTo(double clock) {
  std::lock_guard lock(mu_);
  for (;;) {
    while (nextFault_ < pending_.size() && cfg_.startTime + pending_[nextFault_].atTime <= pod_.simClock)
      applyLocked(pending_[nextFault_++].fault);
    if (pod_.simClock >= clock) break;
    double target = clock;
    if (nextFault_ < pending_.size()) target = std::min(target, cfg_.startTime + pending_[nextFault_].atTime);
    double dt = std::min(target - pod_.simClock, cfg_.maxStepS);
    if (dt <= 0) break;
    stepLocked(dt);
    // Snap to the target to keep the clock free of accumulated rounding.
    if (std::abs(pod_.simClock - target) < 1e-6) pod_.simClock = target;
  }
}

double Simulation::clock() const {
  std::lock_guard lock(mu_);
  return pod_.simClock;
}

PodState Simulation::pod() const {
  std::lock_guard lock(mu_);
  return pod_;
}

std::vector<NodeRecord> Simulation::emitTelemetry() const {
  std::lock_guard lock(mu_);
  return cluster_.emitTelemetry(static_cast<Timestamp>(std::floor(pod_.simClock)));
}

double Simulation::valueLocked(const Binding& b) const {
  using K = Binding::Kind;
  auto z = static_cast<std::size_t>(b.index);
  auto rackZone = [&](int r) {
    return std::min<std::size_t>(static_cast<std::size_t>(r / cfg_.pod.racksPerZone()), pod_.zoneTempC.size() - 1);
  };
  auto rackKw = [&](int r) {
    double kw = 0;
    for (const auto& n : cluster_.nodes())
      if (n.rackIndex == r) kw += n.powerKw(cluster_.config());
    return kw;
  };
  constexpr double kVolts = 480.0;
  switch (b.kind) {
    case K::Unknown: return 0;
    case K::Mechanical: return pod_.mechanicalCooling;
    case K::Economizer: return pod_.economizerMode;
    case K::Water: return pod_.waterAlarm;
    case K::Fire: return pod_.fireAlarm;
    case K::ItKw: return pod_.itKw;
    case K::FeedKw: return pod_.feedKw[z];
    case K::FeedVolts: return kVolts;
    case K::FeedAmps: return pod_.feedKw[z] * 1000.0 / (std::sqrt(3.0) * kVolts);
    case K::ZoneSupply: return pod_.zoneTempC[z];
    case K::ZoneReturn: return pod_.zoneTempC[z] + 0.05 * pod_.zoneItKw[z];
    case K::ZoneHumidity: return pod_.zoneHumidityPct[z];
    case K::ZonePressure: return pod_.zonePressurePa[z];
    case K::ZoneAirflow: return pod_.zoneAirflowM3h[z];
    case K::ZoneDewpoint: {
      constexpr double b1 = 17.62, c1 = 243.12;
      double t = pod_.zoneTempC[z];
      double g = std::log(std::max(1.0, pod_.zoneHumidityPct[z]) / 100.0) + b1 * t / (c1 + t);
      return c1 * g / (b1 - g);
    }
    case K::RackInlet: return pod_.zoneTempC[rackZone(b.index)] + 0.02 * rackKw(b.index);
    case K::RackOutlet: return pod_.zoneTempC[rackZone(b.index)] + 0.17 * rackKw(b.index);
    case K::RackHumidity: return pod_.zoneHumidityPct[rackZone(b.index)];
    case K::RackKw: return rackKw(b.index);
    case K::OutletAmps: return rackKw(b.index) * 1000.0 / 230.0 / b.outlets;
  }
  return 0;
}

double Simulation::pointValue(const std::string& pointId) const {
  std::lock_guard lock(mu_);
  const auto& pts = map_.points();
  for (std::size_t i = 0; i < pts.size(); ++i)
    if (pts[i].pointId == pointId) return valueLocked(bindings_[i]);
  throw Error("UnknownPoint", "no point " + pointId);
}

std::shared_ptr<const RegisterImage> Simulation::image() const {
  std::lock_guard lock(mu_);
  auto img = std::make_shared<RegisterImage>();
  // Per-rack power once per image instead of once per point.
  std::vector<double> racks = cluster_.rackKw();
  racks.resize(static_cast<std::size_t>(cfg_.pod.racks), 0.0);
  const auto& pts = map_.points();
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const auto& p = pts[i];
    const auto& b = bindings_[i];
    double v;
    using K = Binding::Kind;
    auto r = static_cast<std::size_t>(b.index);
    auto zoneOf = std::min<std::size_t>(r / static_cast<std::size_t>(cfg_.pod.racksPerZone()), pod_.zoneTempC.size() - 1);
    switch (b.kind) {
      case K::RackInlet: v = pod_.zoneTempC[zoneOf] + 0.02 * racks[r]; break;
      case K::RackOutlet: v = pod_.zoneTempC[zoneOf] + 0.17 * racks[r]; break;
      case K::RackKw: v = racks[r]; break;
      case K::OutletAmps: v = racks[r] * 1000.0 / 230.0 / b.outlets; break;
      default: v = valueLocked(b);
    }
    img->mapped[p.address] = true;
    if (const auto* s = std::get_if<modbus::U16Scaled>(&p.encoding)) {
      if (cfg_.pod.sensorNoise > 0)
        v += cfg_.pod.sensorNoise * (2.0 * unitHash(cfg_.pod.seed, tick_, i) - 1.0);
      img->values[p.address] = static_cast<std::uint16_t>(std::clamp<long long>(std::llround(v / s->scale), 0, 65535));
    } else {
      int bit = std::get<modbus::BitField>(p.encoding).bit;
      if (v != 0) img->values[p.address] = static_cast<std::uint16_t>(img->values[p.address] | (1u << bit));
    }
  }
  if (dead_)
    for (std::uint32_t a = dead_->first; a <= dead_->second; ++a) img->mapped[a] = false;
  return img;
}

void Simulation::setDeadRange(std::uint16_t first, std::uint16_t last) {
  std::lock_guard lock(mu_);
  dead_ = std::make_pair(first, last);
}

// ---------------------------------------------------------------------------
// Modbus endpoint

ModbusServer::ModbusServer(const std::string& host, std::uint16_t port) : listener_(host, port) {
  acceptor_ = std::thread([this] { acceptLoop(); });
}

ModbusServer::~ModbusServer() { stop(); }

void ModbusServer::publish(std::shared_ptr<const RegisterImage> image) {
  std::lock_guard lock(mu_);
  image_ = std::move(image);
}

std::shared_ptr<const RegisterImage> ModbusServer::snapshot() const {
  std::lock_guard lock(mu_);
  return image_;
}

void ModbusServer::stop() {
  if (stopping_.exchange(true)) return;
  listener_.close();
  if (acceptor_.joinable()) acceptor_.join();
  {
    std::lock_guard lock(mu_);
    for (int fd : clientFds_) ::shutdown(fd, SHUT_RDWR);
  }
  for (auto& t : workers_)
    if (t.joinable()) t.join();
}

void ModbusServer::acceptLoop() {
  while (!stopping_) {
    net::Socket sock = listener_.accept();
    if (!sock.valid()) break;
    std::lock_guard lock(mu_);
    if (stopping_) break;
    clientFds_.push_back(sock.fd());
    workers_.emplace_back([this, s = std::move(sock)]() mutable { serve(s); });
  }
}

void ModbusServer::serve(net::Socket& sock) {
  using modbus::ExceptionCode;
  try {
    for (;;) {
      auto frame = modbus::readFrame(sock);
      auto parsed = modbus::decodeRequest(frame);
      const auto& req = parsed.request;
      auto fail = [&](ExceptionCode code) {
        sock.writeAll(modbus::encodeException(req.transactionId, req.unitId, parsed.rawFunction, code));
      };
      ++served_;
      if (parsed.rawFunction != 0x01 && parsed.rawFunction != 0x03) {
        fail(ExceptionCode::IllegalFunction);
        continue;
      }
      try {
        modbus::checkQuantity(req.function, req.quantity);
      } catch (const modbus::QuantityOutOfRange&) {
        fail(ExceptionCode::IllegalDataValue);
        continue;
      }
      auto img = snapshot();
      if (!img) {
        fail(ExceptionCode::ServerDeviceBusy);
        continue;
      }
      if (req.function == modbus::Function::ReadHoldingRegisters) {
        if (static_cast<std::uint32_t>(req.startAddress) + req.quantity > 65536) {
          fail(ExceptionCode::IllegalDataAddress);
          continue;
        }
        std::vector<std::uint16_t> values(req.quantity);
        bool ok = true;
        for (std::uint16_t i = 0; i < req.quantity && ok; ++i) {
          std::size_t a = static_cast<std::size_t>(req.startAddress) + i;
          ok = img->mapped[a];
          values[i] = img->values[a];
        }
        if (!ok) {
          fail(ExceptionCode::IllegalDataAddress);
          continue;
        }
        sock.writeAll(modbus::encodeRegisterResponse(req, values));
      } else {
        // Coil c reads bit (c % 16) of register (c / 16).
        if (static_cast<std::uint32_t>(req.startAddress) + req.quantity > 65536u * 16u) {
          fail(ExceptionCode::IllegalDataAddress);
          continue;
        }
        modbus::Coils coils(req.quantity);
        bool ok = true;
        for (std::uint32_t i = 0; i < req.quantity && ok; ++i) {
          std::uint32_t c = req.startAddress + i;
          ok = img->mapped[c / 16];
          coils[i] = (img->values[c / 16] >> (c % 16)) & 1u;
        }
        if (!ok) {
          fail(ExceptionCode::IllegalDataAddress);
          continue;
        }
        sock.writeAll(modbus::encodeCoilResponse(req, coils));
      }
    }
  } catch (const Error&) {
    // Client went away or sent garbage; drop the connection.
  }
  std::lock_guard lock(mu_);
  std::erase(clientFds_, sock.fd());
}

// ---------------------------------------------------------------------------
// Telemetry endpoint

TelemetryServer::TelemetryServer(const std::string& host, std::uint16_t port, Simulation& sim)
    : listener_(host, port), sim_(sim) {
  thread_ = std::thread([this] {
    while (!stopping_) {
      net::Socket sock = listener_.accept();
      if (!sock.valid()) break;
      try {
        sock.setTimeout(std::chrono::milliseconds(5000));
        net::LineReader reader(sock);
        std::string line;
        while (reader.readLine(line)) {
          if (line != "GET") {
            sock.writeAll(std::string_view("ERR unknown command\n"));
            continue;
          }
          std::string body;
          for (const auto& r : sim_.emitTelemetry()) body += toJson(r).dump() + "\n";
          body += "END\n";
          sock.writeAll(body);
        }
      } catch (const Error&) {
      }
    }
  });
}

TelemetryServer::~TelemetryServer() { stop(); }

void TelemetryServer::stop() {
  if (stopping_.exchange(true)) return;
  listener_.close();
  if (thread_.joinable()) thread_.join();
}

std::vector<NodeRecord> fetchTelemetry(const std::string& host, std::uint16_t port) {
  auto sock = net::connectTcp(host, port, std::chrono::milliseconds(5000));
  sock.writeAll(std::string_view("GET\n"));
  net::LineReader reader(sock);
  std::vector<NodeRecord> out;
  std::string line;
  while (reader.readLine(line)) {
    if (line == "END") return out;
    try {
      out.push_back(nodeRecordFromJson(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw net::ConnectionFailed(std::string("bad telemetry line: ") + e.what());
    }
  }
  throw net::ConnectionFailed("telemetry stream ended without END");
}

}  // namespace podwatch::sim
