#include "podwatch/vizgen.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "podwatch/text.hpp"

namespace podwatch {

VizFrame buildFrame(std::uint64_t frameId, Timestamp timestamp, const std::vector<NodeStatus>& statuses,
                    const std::vector<NodeRecord>& records, const std::vector<Alert>& alerts,
                    const Baseline& baseline, const PodSummary& pod) {
  VizFrame f;
  f.frameId = frameId;
  f.timestamp = timestamp;
  f.activeAlerts = alerts;
  std::stable_sort(f.activeAlerts.begin(), f.activeAlerts.end(),
                   [](const Alert& a, const Alert& b) { return a.pointId < b.pointId; });

  std::map<std::string_view, const NodeStatus*> byHost;
  for (const auto& s : statuses) byHost[s.hostname] = &s;
  std::map<std::string_view, std::vector<std::string>> hostBadges;
  std::set<std::pair<std::string, CueClass>> cues, hot;
  for (const auto& e : baseline.entries) cues.emplace(e.zone, e.cue);
  for (const auto& a : f.activeAlerts) {
    if (baseline.host(a.pointId)) {
      hostBadges[a.pointId].push_back(name(a.cue));
    } else {
      cues.emplace(a.zone, a.cue);
      hot.emplace(a.zone, a.cue);
    }
  }
  for (const auto& c : cues) f.podCues.push_back({c.first, c.second, hot.count(c) != 0});

  for (const auto& h : baseline.hosts) {
    Entity e{h.hostname, h.rack, h.slotIndex, Color::Red, 0, {}};
    if (auto it = byHost.find(h.hostname); it != byHost.end()) {
      e.color = it->second->color;
      e.heightScale = it->second->heightScale;
      e.badges = it->second->reasons;
    } else {
      e.badges.emplace_back(kReasonMissing);
    }
    if (auto it = hostBadges.find(h.hostname); it != hostBadges.end())
      e.badges.insert(e.badges.end(), it->second.begin(), it->second.end());
    f.stats.nodesRed += e.color == Color::Red;
    f.entities.push_back(std::move(e));
  }
  f.stats.nodesTotal = static_cast<int>(f.entities.size());

  std::set<std::string_view> jobs;
  for (const auto& r : records)
    for (const auto& j : r.jobs) jobs.insert(j.jobId);
  f.stats.jobsRunning = static_cast<int>(jobs.size());
  f.stats.totalKW = pod.totalKw;
  f.stats.pue = pod.itKw > 0 ? pod.totalKw / pod.itKw : 0.0;
  return f;
}

// ---------------------------------------------------------------------------

namespace {

void writeCanonical(std::string& out, const nlohmann::json& j) {
  using T = nlohmann::json::value_t;
  switch (j.type()) {
    case T::object: {
      out += '{';
      bool first = true;
      for (const auto& [k, v] : j.items()) {  // object_t is an ordered std::map
        if (!first) out += ',';
        first = false;
        out += nlohmann::json(k).dump();
        out += ':';
        writeCanonical(out, v);
      }
      out += '}';
      break;
    }
    case T::array: {
      out += '[';
      for (std::size_t i = 0; i < j.size(); ++i) {
        if (i) out += ',';
        writeCanonical(out, j[i]);
      }
      out += ']';
      break;
    }
    case T::number_float: {
      double v = j.get<double>();
      out += std::isfinite(v) ? formatSignificant(v, 6) : "null";
      break;
    }
    default:
      out += j.dump();
  }
}

nlohmann::json frameJson(const VizFrame& f) {
  nlohmann::json cues = nlohmann::json::array();
  for (const auto& c : f.podCues) cues.push_back({{"zone", c.zone}, {"cueClass", name(c.cue)}, {"active", c.active}});
  nlohmann::json ents = nlohmann::json::array();
  for (const auto& e : f.entities)
    ents.push_back({{"entityId", e.entityId},
                    {"rack", e.rack},
                    {"slotIndex", e.slotIndex},
                    {"color", name(e.color)},
                    {"heightScale", e.heightScale},
                    {"badges", e.badges}});
  nlohmann::json alerts = nlohmann::json::array();
  for (const auto& a : f.activeAlerts) alerts.push_back(toJson(a));
  return {{"v", kFrameVersion},
          {"frameId", f.frameId},
          {"timestamp", f.timestamp},
          {"podCues", cues},
          {"entities", ents},
          {"activeAlerts", alerts},
          {"stats",
           {{"nodesTotal", f.stats.nodesTotal},
            {"nodesRed", f.stats.nodesRed},
            {"jobsRunning", f.stats.jobsRunning},
            {"totalKW", f.stats.totalKW},
            {"pue", f.stats.pue}}}};
}

}  // namespace

std::string canonicalJson(const nlohmann::json& j) {
  std::string out;
  writeCanonical(out, j);
  return out;
}

std::string serializeFrame(const VizFrame& frame) { return canonicalJson(frameJson(frame)) + "\n"; }

VizFrame deserializeFrame(std::string_view bytes) {
  try {
    auto j = nlohmann::json::parse(bytes);
    if (j.at("v").get<int>() != kFrameVersion) throw Error("ParseError", "unsupported frame version");
    VizFrame f;
    f.frameId = j.at("frameId").get<std::uint64_t>();
    f.timestamp = j.at("timestamp").get<Timestamp>();
    for (const auto& c : j.at("podCues"))
      f.podCues.push_back({c.at("zone").get<std::string>(), cueFromName(c.at("cueClass").get<std::string>()),
                           c.at("active").get<bool>()});
    for (const auto& e : j.at("entities"))
      f.entities.push_back({e.at("entityId").get<std::string>(), e.at("rack").get<std::string>(),
                            e.at("slotIndex").get<int>(), colorFromName(e.at("color").get<std::string>()),
                            e.at("heightScale").get<double>(), e.at("badges").get<std::vector<std::string>>()});
    for (const auto& a : j.at("activeAlerts")) f.activeAlerts.push_back(alertFromJson(a));
    const auto& s = j.at("stats");
    f.stats = {s.at("nodesTotal").get<int>(), s.at("nodesRed").get<int>(), s.at("jobsRunning").get<int>(),
               s.at("totalKW").get<double>(), s.at("pue").get<double>()};
    return f;
  } catch (const nlohmann::json::exception& e) {
    throw Error("ParseError", std::string("bad frame: ") + e.what());
  }
}

std::string frameFileName(std::uint64_t frameId) { return zeroPad(static_cast<std::int64_t>(frameId), 10) + ".json"; }

}  // namespace podwatch
