#include "podwatch/records.hpp"

namespace podwatch {

nlohmann::json toJson(const NodeRecord& r) {
  nlohmann::json jobs = nlohmann::json::array();
  for (const auto& j : r.jobs) jobs.push_back({{"jobId", j.jobId}, {"user", j.user}, {"cores", j.cores}});
  return {
      {"hostname", r.hostname},
      {"timestamp", r.timestamp},
      {"lastSeen", r.lastSeen},
      {"rack", r.rack},
      {"slotIndex", r.slotIndex},
      {"imageVersion", r.imageVersion},
      {"kernelVersion", r.kernelVersion},
      {"cpuLoad", r.cpuLoad},
      {"memUsedPct", r.memUsedPct},
      {"diskUsedPct", r.diskUsedPct},
      {"totalCores", r.totalCores},
      {"scheduledCores", r.scheduledCores},
      {"jobs", std::move(jobs)},
      {"ip", r.ip},
      {"mac", r.mac},
      {"failedComponent", r.failedComponent},
      {"stale", r.stale},
  };
}

NodeRecord nodeRecordFromJson(const nlohmann::json& j) {
  NodeRecord r;
  r.hostname = j.at("hostname").get<std::string>();
  r.timestamp = j.at("timestamp").get<Timestamp>();
  r.lastSeen = j.value("lastSeen", r.timestamp);
  r.rack = j.value("rack", "");
  r.slotIndex = j.value("slotIndex", 0);
  r.imageVersion = j.value("imageVersion", "");
  r.kernelVersion = j.value("kernelVersion", "");
  r.cpuLoad = j.value("cpuLoad", 0.0);
  r.memUsedPct = j.value("memUsedPct", 0.0);
  r.diskUsedPct = j.value("diskUsedPct", 0.0);
  r.totalCores = j.value("totalCores", 0);
  r.scheduledCores = j.value("scheduledCores", 0);
  if (j.contains("jobs"))
    for (const auto& jj : j.at("jobs"))
      r.jobs.push_back({jj.at("jobId").get<std::string>(), jj.at("user").get<std::string>(), jj.at("cores").get<int>()});
  r.ip = j.value("ip", "");
  r.mac = j.value("mac", "");
  r.failedComponent = j.value("failedComponent", "");
  r.stale = j.value("stale", false);
  return r;
}

}  // namespace podwatch
