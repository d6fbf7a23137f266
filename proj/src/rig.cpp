#include "podwatch/rig.hpp"

#include <cmath>
#include <sstream>

namespace podwatch {

Baseline defaultBaseline(const sim::SimConfig& cfg, const modbus::RegisterMap& map) {
  std::stringstream text;
  sim::writeDefaultBaseline(text, cfg, map);
  return loadBaseline(text);
}

modbus::PollResult readImage(const sim::RegisterImage& image, const modbus::RegisterMap& map, Timestamp t) {
  modbus::PollResult out;
  for (const auto& p : map.points()) {
    if (!image.mapped[p.address]) {
      out.failed.push_back(p.pointId);
      continue;
    }
    out.readings.push_back({std::string(kPodSource), p.pointId, t, modbus::decodePoint(p, image.values[p.address]),
                            p.unit, p.zone});
  }
  return out;
}

Rig::Rig(Options opts) : opts_(std::move(opts)) {
  auto map = sim::defaultRegisterMap(opts_.sim.pod, opts_.points);
  baseline_ = defaultBaseline(opts_.sim, map);
  sim_ = std::make_unique<sim::Simulation>(opts_.sim, std::move(map));
  next_ = static_cast<Timestamp>(std::floor(opts_.sim.startTime));

  Pipeline::SensorSource sensors;
  Pipeline::NodeSource nodes;
  if (opts_.network) {
    modbus_ = std::make_unique<sim::ModbusServer>("127.0.0.1", 0);
    telemetry_ = std::make_unique<sim::TelemetryServer>("127.0.0.1", 0, *sim_);
    client_ = std::make_unique<modbus::Client>("127.0.0.1", modbus_->port());
    sensors = [this](Timestamp t) { return modbus::pollMap(*client_, sim_->registerMap(), t); };
    nodes = [this](Timestamp) { return sim::fetchTelemetry("127.0.0.1", telemetry_->port()); };
  } else {
    sensors = [this](Timestamp t) { return readImage(*sim_->image(), sim_->registerMap(), t); };
    nodes = [this](Timestamp) { return sim_->emitTelemetry(); };
  }
  store_ = std::make_unique<Store>(opts_.storeDir);
  pipeline_ = std::make_unique<Pipeline>(baseline_, *store_, std::move(sensors), std::move(nodes), opts_.periodS);
  if (auto last = store_->latestTime(kPipelineSource))
    next_ = *last + static_cast<Timestamp>(std::llround(opts_.periodS));
}

Rig::~Rig() {
  pipeline_.reset();
  client_.reset();
  if (telemetry_) telemetry_->stop();
  if (modbus_) modbus_->stop();
}

std::uint16_t Rig::modbusPort() const { return modbus_ ? modbus_->port() : 0; }
std::uint16_t Rig::telemetryPort() const { return telemetry_ ? telemetry_->port() : 0; }

CycleReport Rig::step() {
  Timestamp t = next_;
  sim_->advanceTo(static_cast<double>(t));
  if (modbus_) modbus_->publish(sim_->image());
  auto rep = pipeline_->runCycle(t);
  next_ = t + static_cast<Timestamp>(std::llround(opts_.periodS));
  return rep;
}

}  // namespace podwatch
