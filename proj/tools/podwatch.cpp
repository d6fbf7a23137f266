// podwatch command-line front end.
#include <atomic>
#include <chrono>
#include <cmath>
#include <csignal>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <thread>

#include "CLI11.hpp"
#include "podwatch/history.hpp"
#include "podwatch/pipeline.hpp"
#include "podwatch/rig.hpp"
#include "podwatch/server.hpp"
#include "podwatch/sim.hpp"
#include "podwatch/text.hpp"

using namespace podwatch;
namespace fs = std::filesystem;

namespace {

std::atomic<bool> interrupted{false};
void onSignal(int) { interrupted = true; }

Timestamp wallNow() { return static_cast<Timestamp>(std::time(nullptr)); }

void sleepUntil(std::chrono::steady_clock::time_point t) {
  while (!interrupted && std::chrono::steady_clock::now() < t)
    std::this_thread::sleep_for(std::min<std::chrono::steady_clock::duration>(
        t - std::chrono::steady_clock::now(), std::chrono::milliseconds(100)));
}

struct Common {
  std::string config;
  PipelineConfig cfg;
  std::vector<std::string> sets;

  void load() {
    std::string path = config;
    if (path.empty())
      if (const char* env = std::getenv("PODWATCH_CONFIG")) path = env;
    if (!path.empty()) cfg = PipelineConfig::loadFile(path);
    for (const auto& kv : sets) {
      auto eq = kv.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
      cfg.set(trim(std::string_view(kv).substr(0, eq)), trim(std::string_view(kv).substr(eq + 1)));
    }
  }
};

void addCommon(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "key=value config file (default: $PODWATCH_CONFIG)");
  app->add_option("--set", c.sets, "override one config key, e.g. --set store=data/store");
}

sim::SimConfig simConfig(int nodes, std::uint64_t seed) {
  sim::SimConfig cfg;
  cfg.cluster.nodes = nodes;
  cfg.pod.seed = seed;
  return cfg;
}

Baseline requireBaseline(const PipelineConfig& cfg) {
  if (cfg.baseline.empty()) throw ConfigError("no baseline configured (set baseline=...)");
  return loadBaselineFile(cfg.baseline);
}

std::ofstream openOut(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("IoError", "cannot write " + path);
  return out;
}

// --- simulate -------------------------------------------------------------

struct SimulateArgs {
  int points = 5325;
  int nodes = 900;
  std::uint64_t seed = 42;
  std::string faults;
  std::string writeMap, writeBaseline, writeTokens;
  double speed = 1.0;
  double duration = 0;
  bool exitAfterWrite = false;
};

int runSimulate(Common& c, const SimulateArgs& a) {
  c.load();
  auto cfg = simConfig(a.nodes, a.seed);
  cfg.startTime = static_cast<double>(wallNow());
  auto map = sim::defaultRegisterMap(cfg.pod, a.points);
  if (!a.writeMap.empty()) {
    auto out = openOut(a.writeMap);
    map.save(out);
  }
  if (!a.writeBaseline.empty()) {
    auto out = openOut(a.writeBaseline);
    sim::writeDefaultBaseline(out, cfg, map);
  }
  if (!a.writeTokens.empty()) {
    auto out = openOut(a.writeTokens);
    out << "# token\tprincipal\ttier\nviewer-token\tvera\tViewer\noperator-token\toscar\tOperator\n"
           "admin-token\tada\tAdmin\n";
  }
  if (a.exitAfterWrite) return 0;

  sim::Simulation simulation(cfg, std::move(map));
  if (!a.faults.empty()) simulation.schedule(sim::loadFaultScript(a.faults));
  sim::ModbusServer modbusServer(c.cfg.modbus.host, c.cfg.modbus.port);
  sim::TelemetryServer telemetry(c.cfg.telemetry.host, c.cfg.telemetry.port, simulation);
  modbusServer.publish(simulation.image());
  std::cerr << "simulating " << a.points << " points, " << a.nodes << " nodes; modbus on port " << modbusServer.port()
            << ", telemetry on port " << telemetry.port() << '\n';

  auto start = std::chrono::steady_clock::now();
  while (!interrupted) {
    double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (a.duration > 0 && elapsed * a.speed >= a.duration) break;
    simulation.advanceTo(cfg.startTime + elapsed * a.speed);
    modbusServer.publish(simulation.image());
    std::this_thread::sleep_for(std::chrono::milliseconds(250));
  }
  telemetry.stop();
  modbusServer.stop();
  return 0;
}

// --- pipeline -------------------------------------------------------------

int runPipeline(Common& c, long cycles, bool serve) {
  c.load();
  c.cfg.validate();
  if (c.cfg.registerMap.empty()) throw ConfigError("no register map configured (set register_map=...)");
  auto baseline = requireBaseline(c.cfg);
  auto map = modbus::RegisterMap::loadFile(c.cfg.registerMap);
  Store store(c.cfg.store);
  modbus::Client client(c.cfg.modbus.host, c.cfg.modbus.port);
  const auto& cfg = c.cfg;
  Pipeline pipeline(
      baseline, store, [&](Timestamp t) { return modbus::pollMap(client, map, t); },
      [&](Timestamp) { return sim::fetchTelemetry(cfg.telemetry.host, cfg.telemetry.port); }, cfg.periodS);

  std::shared_ptr<AlertSink> log, mail;
  if (!cfg.eventLog.empty()) log = std::make_shared<JsonlSink>(cfg.eventLog);
  if (!cfg.spool.empty()) mail = std::make_shared<JsonlSink>(cfg.spool);
  AlertRouter router(log, mail);
  pipeline.setRouter(&router);
  if (!cfg.framesDir.empty()) pipeline.setFramesDir(cfg.framesDir);

  std::unique_ptr<AuditLog> audit;
  std::unique_ptr<ShellAdapter> adapter;
  std::unique_ptr<StateServer> state;
  std::unique_ptr<ProtocolServer> proto;
  if (serve) {
    audit = std::make_unique<AuditLog>(cfg.auditLog);
    adapter = std::make_unique<ShellAdapter>();
    auto auth = cfg.tokens.empty() ? AuthTable{} : AuthTable::loadFile(cfg.tokens);
    state = std::make_unique<StateServer>(baseline, std::move(auth), *adapter, *audit);
    state->setReplaySource([&](Timestamp at, Timestamp before, Timestamp after) {
      return replay(store, baseline, {at, before, after});
    });
    proto = std::make_unique<ProtocolServer>(*state, cfg.server.host, cfg.server.port);
    pipeline.setFrameSink([&](const VizFrame& f, const std::string& bytes, const std::vector<NodeRecord>& records,
                              const std::vector<NodeStatus>& statuses, const std::vector<Alert>& raised) {
      state->publish(f, bytes, records, statuses, raised);
    });
    std::cerr << "serving on port " << proto->port() << '\n';
  }

  std::cout << timingHeader() << '\n';
  int failures = 0;
  const int retryBudget = 3;
  auto period = std::chrono::duration_cast<std::chrono::steady_clock::duration>(std::chrono::duration<double>(cfg.periodS));
  auto next = std::chrono::steady_clock::now();
  for (long i = 0; (cycles < 0 || i < cycles) && !interrupted; ++i) {
    try {
      auto rep = pipeline.runCycle(wallNow());
      std::cout << timingRow(rep) << std::endl;
      failures = 0;
    } catch (const Error& e) {
      std::cerr << "podwatch: cycle failed: " << e.kind() << ": " << e.what() << '\n';
      client.close();
      if (++failures >= retryBudget) {
        std::cerr << "podwatch: giving up after " << failures << " consecutive failed cycles\n";
        return 1;
      }
    }
    if (cycles < 0 || i + 1 < cycles) {
      next += period;
      sleepUntil(next);
    }
  }
  return 0;
}

// --- serve ----------------------------------------------------------------

int runServe(Common& c, long seconds) {
  c.load();
  c.cfg.validate();
  auto baseline = requireBaseline(c.cfg);
  Store store(c.cfg.store);
  AuditLog audit(c.cfg.auditLog);
  ShellAdapter adapter;
  auto auth = c.cfg.tokens.empty() ? AuthTable{} : AuthTable::loadFile(c.cfg.tokens);
  StateServer state(baseline, std::move(auth), adapter, audit);
  state.setReplaySource(
      [&](Timestamp at, Timestamp before, Timestamp after) { return replay(store, baseline, {at, before, after}); });
  ProtocolServer proto(state, c.cfg.server.host, c.cfg.server.port);
  std::cerr << "serving on port " << proto.port() << '\n';

  // Frames come from the store: each new cycle is rebuilt and published.
  std::optional<Timestamp> shown;
  AlertLatch latch;
  auto start = std::chrono::steady_clock::now();
  while (!interrupted) {
    if (seconds >= 0 && std::chrono::steady_clock::now() - start >= std::chrono::seconds(seconds)) break;
    auto latest = store.latestTime(kPipelineSource);
    if (latest && latest != shown) {
      auto times = store.cycleTimes(kPipelineSource, shown ? *shown + 1 : *latest, *latest);
      if (!shown) latch.restore(latchBefore(store, baseline, times.front()));
      for (auto t : times) {
        auto frame = reconstructFrame(store, baseline, t, latch);
        auto rows = cycleRows(t, kClusterSource);
        auto records = nodeRecordsFrom(store.queryRange(Table::Tedge, rows), store.queryRange(Table::Traw, rows));
        std::vector<NodeStatus> statuses;
        for (const auto& r : records) statuses.push_back(classify(r, baseline));
        state.publish(frame, serializeFrame(frame), records, statuses);
      }
      shown = latest;
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(500));
  }
  proto.stop();
  return 0;
}

// --- replay / report / dump -------------------------------------------------

int runReplay(Common& c, Timestamp at, Timestamp before, Timestamp after, const std::string& outDir) {
  c.load();
  auto baseline = requireBaseline(c.cfg);
  Store store(c.cfg.store);
  auto frames = replay(store, baseline, {at, before, after});
  if (!outDir.empty()) fs::create_directories(outDir);
  for (const auto& f : frames) {
    auto bytes = serializeFrame(f);
    if (outDir.empty()) {
      std::cout << bytes;
    } else {
      auto out = openOut((fs::path(outDir) / frameFileName(f.frameId)).string());
      out << bytes;
    }
  }
  std::cerr << frames.size() << " frames\n";
  return 0;
}

Timestamp defaultFrom(const Store& store) {
  auto times = store.cycleTimes(kPipelineSource, 0, std::numeric_limits<Timestamp>::max() / 2);
  return times.empty() ? 0 : times.front();
}

int runReport(Common& c, const std::string& kind, std::optional<Timestamp> from, std::optional<Timestamp> to,
              const std::string& bucket, bool json) {
  c.load();
  auto baseline = requireBaseline(c.cfg);
  Store store(c.cfg.store);
  Timestamp t0 = from ? *from : defaultFrom(store);
  Timestamp t1 = to ? *to : store.latestTime(kPipelineSource).value_or(0);
  if (kind == "usage") {
    auto r = usageReport(store, baseline, t0, t1, bucketingFromName(bucket));
    json ? void(std::cout << toJson(r).dump(2) << '\n') : writeTsv(std::cout, r);
  } else if (kind == "hotspot") {
    auto r = hotspotReport(store, baseline, t0, t1);
    json ? void(std::cout << toJson(r).dump(2) << '\n') : writeTsv(std::cout, r);
  } else {
    auto r = failureInventory(store, baseline, t0, t1);
    json ? void(std::cout << toJson(r).dump(2) << '\n') : writeTsv(std::cout, r);
  }
  return 0;
}

int runDump(Common& c, const std::string& table) {
  c.load();
  Store store(c.cfg.store);
  store.dump(std::cout, tableFromName(table));
  return 0;
}

// --- bench ----------------------------------------------------------------

int runBench(int points, int nodes, int cycles, const std::string& storeDir, bool network) {
  fs::path dir = storeDir.empty() ? fs::temp_directory_path() / ("podwatch-bench-" + std::to_string(::getpid())) : fs::path(storeDir);
  if (storeDir.empty()) fs::remove_all(dir);
  Rig::Options opts;
  opts.sim = simConfig(nodes, 42);
  opts.points = points;
  opts.storeDir = dir;
  opts.network = network;
  int code = 0;
  {
    Rig rig(opts);
    std::cout << timingHeader() << '\n';
    StageTimings sum;
    double worst = 0;
    for (int i = 0; i < cycles; ++i) {
      auto rep = rig.step();
      std::cout << timingRow(rep) << '\n';
      sum.poll += rep.timings.poll;
      sum.correlate += rep.timings.correlate;
      sum.ingest += rep.timings.ingest;
      sum.frame += rep.timings.frame;
      worst = std::max(worst, rep.timings.total());
    }
    if (cycles > 0) {
      double n = cycles;
      std::cout << "# mean\tpoll " << formatSignificant(sum.poll / n, 4) << "\tcorrelate "
                << formatSignificant(sum.correlate / n, 4) << "\tingest " << formatSignificant(sum.ingest / n, 4)
                << "\tframe " << formatSignificant(sum.frame / n, 4) << "\ttotal " << formatSignificant(sum.total() / n, 4)
                << "\n# worst total " << formatSignificant(worst, 4) << " s against an 11.9 s budget: "
                << (worst <= 11.9 ? "within" : "OVER") << '\n';
      if (worst > 11.9) code = 1;
    }
  }
  if (storeDir.empty()) fs::remove_all(dir);
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  std::signal(SIGINT, onSignal);
  std::signal(SIGTERM, onSignal);

  CLI::App app{"podwatch: converged pod and cluster monitoring"};
  app.require_subcommand(1);
  Common common;

  auto* simulate = app.add_subcommand("simulate", "run the pod and cluster simulator with Modbus and telemetry endpoints");
  SimulateArgs sa;
  addCommon(simulate, common);
  simulate->add_option("--points", sa.points, "register map size")->check(CLI::Range(100, 60000));
  simulate->add_option("--nodes", sa.nodes, "simulated nodes")->check(CLI::Range(1, 100000));
  simulate->add_option("--seed", sa.seed, "noise seed");
  simulate->add_option("--faults", sa.faults, "fault script (TSV: time, fault, args)")->check(CLI::ExistingFile);
  simulate->add_option("--speed", sa.speed, "simulated seconds per wall second")->check(CLI::PositiveNumber);
  simulate->add_option("--duration", sa.duration, "simulated seconds to run (0 = until interrupted)");
  simulate->add_option("--write-map", sa.writeMap, "write the register map TSV");
  simulate->add_option("--write-baseline", sa.writeBaseline, "write the matching baseline TSV");
  simulate->add_option("--write-tokens", sa.writeTokens, "write a sample token file");
  simulate->add_flag("--write-only", sa.exitAfterWrite, "write the files and exit");

  auto* pipeline = app.add_subcommand("pipeline", "poll, correlate, ingest and build frames every period");
  long cycles = -1;
  bool serve = false;
  addCommon(pipeline, common);
  pipeline->add_option("--cycles", cycles, "number of cycles (default: until interrupted)")->check(CLI::NonNegativeNumber);
  pipeline->add_flag("--serve", serve, "also run the state server in this process");

  auto* serveCmd = app.add_subcommand("serve", "state server publishing frames from the store");
  long serveSeconds = -1;
  addCommon(serveCmd, common);
  serveCmd->add_option("--seconds", serveSeconds, "stop after this many seconds");

  auto* replayCmd = app.add_subcommand("replay", "rebuild stored frames around an event");
  Timestamp at = 0, before = 300, after = 300;
  std::string replayOut;
  addCommon(replayCmd, common);
  replayCmd->add_option("--at", at, "event time (UTC seconds)")->required();
  replayCmd->add_option("--before", before, "seconds before the event")->check(CLI::NonNegativeNumber);
  replayCmd->add_option("--after", after, "seconds after the event")->check(CLI::NonNegativeNumber);
  replayCmd->add_option("--out", replayOut, "write <frameId>.json files here instead of stdout");

  auto* report = app.add_subcommand("report", "usage, hotspot and failure reports");
  std::string reportKind;
  std::optional<Timestamp> from, to;
  std::string bucket = "dow";
  bool json = false;
  addCommon(report, common);
  report->add_option("kind", reportKind, "usage | hotspot | failures")
      ->required()
      ->check(CLI::IsMember({"usage", "hotspot", "failures"}));
  report->add_option("--from", from, "period start (default: first stored cycle)");
  report->add_option("--to", to, "period end (default: last stored cycle)");
  report->add_option("--bucket", bucket, "usage bucketing")->check(CLI::IsMember({"dow", "hour", "user", "rack"}));
  report->add_flag("--json", json, "JSON instead of TSV");

  auto* dump = app.add_subcommand("dump", "write one store table as sorted TSV");
  std::string table = "Traw";
  addCommon(dump, common);
  dump->add_option("--table", table, "Tedge | TedgeT | Tdeg | Traw")
      ->check(CLI::IsMember({"Tedge", "TedgeT", "Tdeg", "Traw"}));

  auto* bench = app.add_subcommand("bench", "time full pipeline cycles against a local simulator");
  int benchPoints = 5325, benchNodes = 900, benchCycles = 3;
  std::string benchStore;
  bool inProcess = false;
  bench->add_option("--points", benchPoints, "register map size")->check(CLI::Range(100, 60000));
  bench->add_option("--nodes", benchNodes, "simulated nodes")->check(CLI::Range(1, 100000));
  bench->add_option("--cycles", benchCycles, "cycles to time")->check(CLI::NonNegativeNumber);
  bench->add_option("--store", benchStore, "keep the store here (default: temporary)");
  bench->add_flag("--in-process", inProcess, "skip the loopback sockets");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*simulate) return runSimulate(common, sa);
    if (*pipeline) return runPipeline(common, cycles, serve);
    if (*serveCmd) return runServe(common, serveSeconds);
    if (*replayCmd) return runReplay(common, at, before, after, replayOut);
    if (*report) return runReport(common, reportKind, from, to, bucket, json);
    if (*dump) return runDump(common, table);
    if (*bench) return runBench(benchPoints, benchNodes, benchCycles, benchStore, !inProcess);
  } catch (const ConfigError& e) {
    std::cerr << "podwatch: " << e.what() << '\n';
    return 2;
  } catch (const Error& e) {
    std::cerr << "podwatch: " << e.kind() << ": " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "podwatch: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
