#pragma once

#include <array>
#include <atomic>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <variant>
#include <vector>

#include "podwatch/error.hpp"
#include "podwatch/modbus.hpp"
#include "podwatch/net.hpp"
#include "podwatch/records.hpp"

namespace podwatch::sim {

PODWATCH_DEFINE_ERROR(UnknownZone);
PODWATCH_DEFINE_ERROR(UnknownFeed);
PODWATCH_DEFINE_ERROR(UnknownHost);
PODWATCH_DEFINE_ERROR(UnknownJob);

inline constexpr int kFeeds = 2;

struct PodConfig {
  int zones = 11;
  int racks = 44;
  double ambientC = 20.0;
  double setpointC = 27.0;
  double hysteresisC = 2.0;
  double thermalTauS = 600.0;
  double heatCPerKw = 0.08;     // zone target rise per kW of IT load in the zone
  double coolingDeltaC = 10.0;  // target drop while mechanical cooling runs
  double baseHumidityPct = 45.0;
  double waterHumidityPct = 40.0;  // added to the humidity target of a wet zone
  double humidityTauS = 300.0;
  double basePressurePa = 12.0;
  double baseAirflowM3h = 8000.0;
  double mechanicalOverhead = 1.20;  // facility kW / IT kW with chillers running
  double economizerOverhead = 1.05;
  double sensorNoise = 0.0;  // uniform half-width added to served scaled values
  std::uint64_t seed = 42;

  int racksPerZone() const { return (racks + zones - 1) / zones; }
};

/// Environmental state of the pod. Pure data; advanced by step().
struct PodState {
  std::vector<double> zoneTempC;
  std::vector<double> zoneHumidityPct;
  std::vector<double> zonePressurePa;
  std::vector<double> zoneAirflowM3h;
  std::vector<double> zoneItKw;     // heat input, set from the cluster
  std::vector<double> zoneRampCps;  // active TempRamp heating, °C/s
  std::vector<bool> zoneWet;
  std::array<double, kFeeds> feedKw{};
  std::array<double, kFeeds> feedSpikeKw{};
  double itKw = 0;
  bool mechanicalCooling = false;
  bool economizerMode = true;
  bool waterAlarm = false;
  bool fireAlarm = false;
  double simClock = 0;  // UTC seconds

  static PodState initial(const PodConfig& cfg, double clock);
};

/// First-order relaxation of every zone toward ambient + IT heat, with
/// cooling hysteresis evaluated at the end of the step. dt must be > 0.
PodState step(const PodState& state, double dt, const PodConfig& cfg);

// ---------------------------------------------------------------------------

struct ClusterConfig {
  int nodes = 900;
  int nodesPerRack = 32;
  int coresPerNode = 32;
  std::string imageVersion = "txg-2024.09";
  std::string kernelVersion = "5.14.0-427";
  double idleKw = 0.12;
  double kwPerLoad = 0.008;
  double loadTauS = 60.0;
  double baseMemPct = 8.0;
  double memPctPerCore = 2.0;
  double leakPctPerS = 0.25;  // mean leak rate; per-node rate varies +-40%
  double staleAfterS = 45.0;  // 3 collection periods of 15 s
};

struct SimNode {
  std::string hostname;
  std::string rack;
  int rackIndex = 0;
  int slotIndex = 0;
  int totalCores = 32;
  double cpuLoad = 0;
  double memUsedPct = 0;
  double diskUsedPct = 20;
  std::string imageVersion;
  std::string kernelVersion;
  std::string ip;
  std::string mac;
  std::vector<JobSlice> jobs;
  std::string failedComponent;
  bool responding = true;
  bool drained = false;
  double lastSeen = 0;
  double leakPct = 0;   // memory consumed by an active leak
  double leakRate = 0;  // %/s, 0 when no leak
  double leakFactor = 1;

  int scheduledCores() const;
  double powerKw(const ClusterConfig& cfg) const;
};

class Cluster {
 public:
  Cluster(ClusterConfig cfg, int racks, std::uint64_t seed, double clock);

  const ClusterConfig& config() const { return cfg_; }
  const std::vector<SimNode>& nodes() const { return nodes_; }
  const SimNode& node(const std::string& host) const;
  SimNode& node(const std::string& host);
  bool hasHost(const std::string& host) const { return index_.count(host) != 0; }

  void step(double dt, double now);

  /// Places cores-per-node slices of `jobId` on `hosts`.
  void placeJob(const std::string& jobId, const std::string& user, const std::vector<std::string>& hosts,
                int coresPerNode);
  void endJob(const std::string& jobId);
  std::vector<std::string> hostsOfJob(const std::string& jobId) const;

  void startMemoryLeak(const std::string& jobId);
  void driftImage(const std::string& host, const std::string& version);

  // Node-control actions.
  void reboot(const std::string& host, double now);
  void reimage(const std::string& host, double now);
  void removeFromScheduler(const std::string& host);
  void returnToService(const std::string& host);

  std::vector<NodeRecord> emitTelemetry(Timestamp now) const;
  double itKw() const;
  /// IT kW per rack index.
  std::vector<double> rackKw() const;

 private:
  ClusterConfig cfg_;
  std::vector<SimNode> nodes_;
  std::map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------

struct WaterEvent { std::string zone; };
struct PowerSpike { std::string feed; double kw = 0; };
struct FireBit { bool on = true; };
struct TempRamp { std::string zone; double rateCps = 0; };
struct MemoryLeak { std::string jobId; };
struct ImageDrift { std::string host; };
using Fault = std::variant<WaterEvent, PowerSpike, FireBit, TempRamp, MemoryLeak, ImageDrift>;

struct ScheduledFault {
  double atTime = 0;  // seconds relative to simulation start
  Fault fault;
};

PODWATCH_DEFINE_ERROR(InvalidFaultScript);

/// TSV `time<TAB>fault<TAB>args`, args comma-separated. Times must be
/// non-decreasing.
std::vector<ScheduledFault> parseFaultScript(std::istream& in);
std::vector<ScheduledFault> loadFaultScript(const std::string& path);
std::string describe(const Fault& fault);

// ---------------------------------------------------------------------------

/// Register values served to Modbus clients; unmapped registers answer
/// IllegalDataAddress.
struct RegisterImage {
  std::vector<std::uint16_t> values = std::vector<std::uint16_t>(65536, 0);
  std::vector<bool> mapped = std::vector<bool>(65536, false);
};

struct SimConfig {
  PodConfig pod;
  ClusterConfig cluster;
  double startTime = 1700000000;  // UTC seconds
  double maxStepS = 5.0;
};

/// Zone label for zone index (1-based names: zone01...).
std::string zoneName(int index);
std::string rackName(int index);
std::string feedName(int index);  // feedA, feedB

/// Representative EcoPOD map with exactly `points` entries.
modbus::RegisterMap defaultRegisterMap(const PodConfig& cfg, int points = 5325);

/// Baseline file matching defaultRegisterMap and the cluster inventory.
void writeDefaultBaseline(std::ostream& out, const SimConfig& cfg, const modbus::RegisterMap& map);

/// Digital twin: pod + cluster + scheduled faults on one clock. All public
/// members are thread-safe.
class Simulation {
 public:
  Simulation(SimConfig cfg, modbus::RegisterMap map);
  ~Simulation();

  const SimConfig& config() const { return cfg_; }
  const modbus::RegisterMap& registerMap() const { return map_; }

  void schedule(std::vector<ScheduledFault> script);
  /// Applies a fault immediately. Throws UnknownZone/UnknownFeed/UnknownHost/UnknownJob.
  void injectFault(const Fault& fault);

  /// Advances the clock, firing scheduled faults at their times.
  void advanceTo(double clock);
  double clock() const;

  PodState pod() const;
  std::vector<NodeRecord> emitTelemetry() const;
  /// Current state encoded through the register map.
  std::shared_ptr<const RegisterImage> image() const;
  /// Unencoded value a point would report (before scaling and noise).
  double pointValue(const std::string& pointId) const;

  /// Runs `fn` with exclusive access to the cluster.
  template <class Fn>
  auto withCluster(Fn&& fn) {
    std::lock_guard lock(mu_);
    return fn(cluster_, pod_.simClock);
  }

  /// Removes registers from the served image (fault injection for pollers).
  void setDeadRange(std::uint16_t first, std::uint16_t last);

 private:
  struct Binding;
  void stepLocked(double dt);
  void applyLocked(const Fault& fault);
  void couplePowerLocked();
  double valueLocked(const Binding& b) const;

  SimConfig cfg_;
  modbus::RegisterMap map_;
  std::vector<Binding> bindings_;
  mutable std::mutex mu_;
  PodState pod_;
  Cluster cluster_;
  std::vector<ScheduledFault> pending_;
  std::size_t nextFault_ = 0;
  std::uint64_t tick_ = 0;
  std::optional<std::pair<std::uint16_t, std::uint16_t>> dead_;
};

/// Modbus TCP endpoint serving the latest published image. Each request
/// reads one immutable snapshot.
class ModbusServer {
 public:
  ModbusServer(const std::string& host, std::uint16_t port);
  ~ModbusServer();
  ModbusServer(const ModbusServer&) = delete;
  ModbusServer& operator=(const ModbusServer&) = delete;

  std::uint16_t port() const { return listener_.port(); }
  void publish(std::shared_ptr<const RegisterImage> image);
  std::uint64_t requestsServed() const { return served_.load(); }
  void stop();

 private:
  void acceptLoop();
  void serve(net::Socket& sock);
  std::shared_ptr<const RegisterImage> snapshot() const;

  net::Listener listener_;
  mutable std::mutex mu_;
  std::shared_ptr<const RegisterImage> image_;
  std::vector<std::thread> workers_;
  std::vector<int> clientFds_;
  std::thread acceptor_;
  std::atomic<bool> stopping_{false};
  std::atomic<std::uint64_t> served_{0};
};

/// Line protocol for node telemetry: a client sends "GET\n" and receives
/// one JSON NodeRecord per line followed by "END\n".
class TelemetryServer {
 public:
  TelemetryServer(const std::string& host, std::uint16_t port, Simulation& sim);
  ~TelemetryServer();
  std::uint16_t port() const { return listener_.port(); }
  void stop();

 private:
  net::Listener listener_;
  Simulation& sim_;
  std::thread thread_;
  std::atomic<bool> stopping_{false};
};

std::vector<NodeRecord> fetchTelemetry(const std::string& host, std::uint16_t port);

}  // namespace podwatch::sim
