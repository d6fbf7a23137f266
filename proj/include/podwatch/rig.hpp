#pragma once

#include <filesystem>
#include <memory>
#include <string>

#include "podwatch/baseline.hpp"
#include "podwatch/ingest.hpp"
#include "podwatch/pipeline.hpp"
#include "podwatch/sim.hpp"

namespace podwatch {

/// A complete simulated site wired to a pipeline: simulator, its Modbus and
/// telemetry endpoints, the default baseline, a store and the pipeline.
/// Used by `podwatch bench`, the demo commands and the tests.
class Rig {
 public:
  struct Options {
    sim::SimConfig sim;
    int points = 5325;
    std::filesystem::path storeDir;
    double periodS = 15.0;
    /// Poll over loopback TCP. Off: read the register image and telemetry
    /// in-process (same decoding, no sockets).
    bool network = true;
  };

  explicit Rig(Options opts);
  ~Rig();

  sim::Simulation& sim() { return *sim_; }
  Store& store() { return *store_; }
  Pipeline& pipeline() { return *pipeline_; }
  const Baseline& baseline() const { return baseline_; }
  const modbus::RegisterMap& registerMap() const { return sim_->registerMap(); }
  std::uint16_t modbusPort() const;
  std::uint16_t telemetryPort() const;
  /// Sim time of the next cycle.
  Timestamp nextTime() const { return next_; }

  /// Advances the simulator to the next cycle time and runs one cycle.
  CycleReport step();

 private:
  Options opts_;
  std::unique_ptr<sim::Simulation> sim_;
  Baseline baseline_;
  std::unique_ptr<sim::ModbusServer> modbus_;
  std::unique_ptr<sim::TelemetryServer> telemetry_;
  std::unique_ptr<modbus::Client> client_;
  std::unique_ptr<Store> store_;
  std::unique_ptr<Pipeline> pipeline_;
  Timestamp next_ = 0;
};

/// Default baseline text for a simulator configuration and map.
Baseline defaultBaseline(const sim::SimConfig& cfg, const modbus::RegisterMap& map);

/// Reads every map point straight from a register image.
modbus::PollResult readImage(const sim::RegisterImage& image, const modbus::RegisterMap& map, Timestamp t);

}  // namespace podwatch
