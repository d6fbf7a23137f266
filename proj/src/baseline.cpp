#include "podwatch/baseline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <sstream>

#include "podwatch/text.hpp"

namespace podwatch {

namespace {

template <class E, std::size_t N>
E fromName(std::string_view s, const char* const (&names)[N], const char* what) {
  for (std::size_t i = 0; i < N; ++i)
    if (s == names[i]) return static_cast<E>(i);
  throw Error("ParseError", std::string("unknown ") + what + " '" + std::string(s) + "'");
}

const char* const kKindNames[] = {"MIN", "MAX", "BINARY", "MISSING"};
const char* const kSeverityNames[] = {"Info", "Warning", "Critical"};
const char* const kCueNames[] = {"MechanicalCooling", "Economizer", "Water", "Power", "Temperature", "Fire", "NodeHealth"};
const char* const kColorNames[] = {"Colorless", "Blue", "Green", "Red"};
const char* const kChannelNames[] = {"frame", "eventlog", "email"};

}  // namespace

const char* name(AlertKind k) { return kKindNames[static_cast<int>(k)]; }
const char* name(Severity s) { return kSeverityNames[static_cast<int>(s)]; }
const char* name(CueClass c) { return kCueNames[static_cast<int>(c)]; }
const char* name(Color c) { return kColorNames[static_cast<int>(c)]; }
const char* name(Channel c) { return kChannelNames[static_cast<int>(c)]; }
AlertKind alertKindFromName(std::string_view s) { return fromName<AlertKind>(s, kKindNames, "alert kind"); }
Severity severityFromName(std::string_view s) { return fromName<Severity>(s, kSeverityNames, "severity"); }
CueClass cueFromName(std::string_view s) { return fromName<CueClass>(s, kCueNames, "cue class"); }
Color colorFromName(std::string_view s) { return fromName<Color>(s, kColorNames, "color"); }

// ---------------------------------------------------------------------------
// Baseline

const BaselineEntry* Baseline::find(std::string_view pointId) const {
  auto it = index_.find(pointId);
  return it == index_.end() ? nullptr : &entries[it->second];
}

const HostEntry* Baseline::host(std::string_view hostname) const {
  auto it = hostIndex_.find(hostname);
  return it == hostIndex_.end() ? nullptr : &hosts[it->second];
}

std::set<std::string> Baseline::inventory() const {
  std::set<std::string> out;
  for (const auto& e : entries) out.insert(e.pointId);
  for (const auto& h : hosts) out.insert(h.hostname);
  return out;
}

void Baseline::reindex() {
  std::sort(hosts.begin(), hosts.end(), [](const HostEntry& a, const HostEntry& b) { return a.hostname < b.hostname; });
  index_.clear();
  hostIndex_.clear();
  for (std::size_t i = 0; i < entries.size(); ++i)
    if (!index_.emplace(entries[i].pointId, i).second) throw DuplicatePointId("duplicate pointId " + entries[i].pointId);
  for (std::size_t i = 0; i < hosts.size(); ++i) {
    if (index_.count(hosts[i].hostname) || !hostIndex_.emplace(hosts[i].hostname, i).second)
      throw DuplicatePointId("duplicate pointId " + hosts[i].hostname);
  }
}

Baseline loadBaseline(std::istream& in) {
  Baseline b;
  std::map<std::string, int, std::less<>> seen;
  std::string line;
  int lineNo = 0;
  while (std::getline(in, line)) {
    ++lineNo;
    auto text = trim(line);
    if (text.empty() || text[0] == '#') continue;
    auto fail = [&](const std::string& why) -> Error {
      return Error("ParseError", "baseline line " + std::to_string(lineNo) + ": " + why);
    };
    auto f = split(line, '\t');
    if (f.size() != 6) throw fail("expected 6 tab-separated fields, got " + std::to_string(f.size()));
    for (auto& x : f) x = trim(x);
    std::string id(f[0]);
    std::string_view kind = f[1], param = f[2];
    try {
      if (kind == "IMAGE" || kind == "MEMORY") {
        if (id != "*") throw fail(std::string(kind) + " rows use pointId '*'");
        if (kind == "IMAGE") {
          b.imageVersion = param;
        } else {
          b.memoryThresholdPct = parseNumber(param);
          if (!std::isfinite(b.memoryThresholdPct)) throw fail("memory threshold must be finite");
        }
        continue;
      }
      if (id.empty() || id.find_first_of("|\t") != std::string::npos) throw fail("bad pointId '" + id + "'");
      auto [prev, fresh] = seen.emplace(id, lineNo);
      if (!fresh)
        throw DuplicatePointId("baseline line " + std::to_string(lineNo) + ": duplicate pointId " + id +
                               " (first on line " + std::to_string(prev->second) + ")");
      Severity sev = severityFromName(f[3]);
      CueClass cue = cueFromName(f[4]);
      if (kind == "HOST") {
        auto colon = param.rfind(':');
        if (colon == std::string_view::npos) throw fail("HOST param must be rack:slot");
        b.hosts.push_back({id, std::string(param.substr(0, colon)),
                           static_cast<int>(parseInteger(param.substr(colon + 1))), sev, std::string(f[5])});
        continue;
      }
      BaselineEntry e{id, alertKindFromName(kind), parseNumber(param), sev, cue, std::string(f[5])};
      if (e.kind == AlertKind::Missing) throw fail("MISSING is not a baseline kind");
      if (!std::isfinite(e.limit)) throw fail("threshold must be finite");
      if (e.kind == AlertKind::Binary && e.limit != 0 && e.limit != 1) throw fail("BINARY expects 0 or 1");
      b.entries.push_back(std::move(e));
    } catch (const DuplicatePointId&) {
      throw;
    } catch (const Error& e) {
      if (startsWith(e.what(), "baseline line")) throw;
      throw fail(e.what());
    }
  }
  b.reindex();
  return b;
}

Baseline loadBaselineFile(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("ParseError", "cannot open baseline " + path);
  return loadBaseline(in);
}

// ---------------------------------------------------------------------------
// Alerts

bool Alert::violates() const {
  switch (kind) {
    case AlertKind::Min: return observed < limit;
    case AlertKind::Max: return observed > limit;
    case AlertKind::Binary: return observed != limit;
    case AlertKind::Missing: return true;
  }
  return false;
}

std::string Alert::message() const {
  if (kind == AlertKind::Missing) return pointId + " " + std::string(kReasonMissing);
  return pointId + " " + name(kind) + ": observed " + formatNumber(observed) + " limit " + formatNumber(limit);
}

nlohmann::json toJson(const Alert& a) {
  return {{"pointId", a.pointId}, {"kind", name(a.kind)},   {"observed", a.observed},
          {"limit", a.limit},     {"severity", name(a.severity)}, {"cueClass", name(a.cue)},
          {"timestamp", a.timestamp}, {"zone", a.zone}};
}

Alert alertFromJson(const nlohmann::json& j) {
  Alert a;
  a.pointId = j.at("pointId").get<std::string>();
  a.kind = alertKindFromName(j.at("kind").get<std::string>());
  a.observed = j.at("observed").get<double>();
  a.limit = j.at("limit").get<double>();
  a.severity = severityFromName(j.at("severity").get<std::string>());
  a.cue = cueFromName(j.at("cueClass").get<std::string>());
  a.timestamp = j.at("timestamp").get<Timestamp>();
  a.zone = j.at("zone").get<std::string>();
  return a;
}

namespace {

std::string_view pointOf(std::string_view row) {
  auto p1 = row.find('|');
  if (p1 == std::string_view::npos) return row;
  auto p2 = row.find('|', p1 + 1);
  return p2 == std::string_view::npos ? row : row.substr(p2 + 1);
}

struct Violations {
  AssociativeArray values;  // point x "v"
  std::vector<AssociativeArray> perKind;  // Min, Max, Binary: point x "v"
};

// D_K = P_K * (V - L_K), then a sign test against 0. P_K is the diagonal
// indicator of present points carrying kind K.
Violations violations(const AssociativeArray& frame, const Baseline& baseline) {
  std::vector<Triple> v;
  std::set<std::string, std::less<>> present;
  for (const auto& [key, val] : frame.entries()) {
    auto id = pointOf(key.first);
    if (!baseline.find(id)) continue;
    present.emplace(id);
    if (key.second == "value") v.push_back({std::string(id), "v", val});
  }
  Violations out;
  out.values = AssociativeArray::fromTriples(v, Collision::Last);
  for (auto kind : {AlertKind::Min, AlertKind::Max, AlertKind::Binary}) {
    std::vector<Triple> pi, lim;
    for (const auto& id : present) {
      const auto* e = baseline.find(id);
      if (e->kind != kind) continue;
      pi.push_back({id, id, 1.0});
      lim.push_back({id, "v", e->limit});
    }
    auto d = AssociativeArray::fromTriples(pi) * out.values.minus(AssociativeArray::fromTriples(lim));
    Compare op = kind == AlertKind::Min ? Compare::LT : kind == AlertKind::Max ? Compare::GT : Compare::NE;
    out.perKind.push_back(d.compareScalar(op, 0.0));
  }
  return out;
}

}  // namespace

std::vector<Alert> detectDeviations(const AssociativeArray& frame, const Baseline& baseline, Timestamp now) {
  auto viol = violations(frame, baseline);
  std::vector<Alert> out;
  for (const auto& x : viol.perKind) {
    for (const auto& [key, d] : x.entries()) {
      const auto* e = baseline.find(key.first);
      out.push_back({e->pointId, e->kind, viol.values.at(key.first, "v"), e->limit, e->severity, e->cue, now, e->zone});
    }
  }
  std::sort(out.begin(), out.end(), [](const Alert& a, const Alert& b) { return a.pointId < b.pointId; });
  return out;
}

std::map<std::string, double> cueCounts(const AssociativeArray& frame, const Baseline& baseline) {
  auto viol = violations(frame, baseline);
  AssociativeArray x;
  for (const auto& k : viol.perKind) x = x.plus(k.logical());
  std::vector<Triple> g;
  for (const auto& e : baseline.entries) g.push_back({e.pointId, e.zone + "|" + name(e.cue), 1.0});
  auto counts = x.transpose() * AssociativeArray::fromTriples(g);
  std::map<std::string, double> out;
  for (const auto& [key, n] : counts.entries()) out[key.second] = n;
  return out;
}

std::vector<Alert> missingHosts(const std::set<std::string, std::less<>>& present, const Baseline& baseline,
                                Timestamp now) {
  std::vector<Alert> out;
  for (const auto& h : baseline.hosts)
    if (!present.count(h.hostname))
      out.push_back({h.hostname, AlertKind::Missing, 0, 0, h.severity, CueClass::NodeHealth, now, h.zone});
  return out;
}

// ---------------------------------------------------------------------------
// Node status

NodeStatus classify(const NodeRecord& r, const Baseline& baseline) {
  NodeStatus s;
  s.hostname = r.hostname;
  if (!baseline.imageVersion.empty() && r.imageVersion != baseline.imageVersion) s.reasons.emplace_back(kReasonImage);
  if (r.memUsedPct > baseline.memoryThresholdPct) s.reasons.emplace_back(kReasonMemory);
  if (r.stale) s.reasons.emplace_back(kReasonStale);
  if (!r.failedComponent.empty()) s.reasons.push_back(std::string(kReasonFailed) + ": " + r.failedComponent);

  // Exactly half the cores counts as Blue.
  if (!s.reasons.empty()) s.color = Color::Red;
  else if (r.scheduledCores > 0 && 2 * r.scheduledCores >= r.totalCores) s.color = Color::Blue;
  else if (r.scheduledCores > 0) s.color = Color::Green;
  else s.color = Color::Colorless;

  s.heightScale = r.totalCores > 0 ? std::clamp(r.cpuLoad / r.totalCores, 0.0, 2.0) : 0.0;
  return s;
}

nlohmann::json toJson(const NodeStatus& s) {
  return {{"hostname", s.hostname}, {"color", name(s.color)}, {"heightScale", s.heightScale}, {"reasons", s.reasons}};
}

// ---------------------------------------------------------------------------
// Latch

bool clearedBy(const Alert& a, double v) {
  double band = 0.02 * std::abs(a.limit);
  switch (a.kind) {
    case AlertKind::Max: return v <= a.limit - band;
    case AlertKind::Min: return v >= a.limit + band;
    case AlertKind::Binary: return v == a.limit;
    case AlertKind::Missing: return true;
  }
  return true;
}

AlertLatch::Update AlertLatch::apply(const std::vector<Alert>& detected, const Lookup& current) {
  Update u;
  std::map<std::string, const Alert*, std::less<>> now;
  for (const auto& a : detected) now[a.pointId] = &a;

  for (auto it = active_.begin(); it != active_.end();) {
    auto& held = it->second;
    if (auto d = now.find(held.pointId); d != now.end() && d->second->kind == held.kind) {
      held.observed = d->second->observed;
      held.limit = d->second->limit;
      ++it;
      continue;
    }
    bool clear;
    if (held.kind == AlertKind::Missing || now.count(held.pointId)) {
      clear = true;  // asset is back, or the point now violates a different kind
    } else {
      auto v = current(held.pointId);
      clear = v && clearedBy(held, *v);
    }
    if (clear) {
      u.cleared.push_back(held);
      it = active_.erase(it);
    } else {
      ++it;
    }
  }
  for (const auto& a : detected) {
    if (active_.count(a.pointId)) continue;
    active_.emplace(a.pointId, a);
    u.raised.push_back(a);
  }
  return u;
}

std::vector<Alert> AlertLatch::active() const {
  std::vector<Alert> out;
  for (const auto& [id, a] : active_) out.push_back(a);
  return out;
}

void AlertLatch::restore(std::vector<Alert> alerts) {
  active_.clear();
  for (auto& a : alerts) {
    auto id = a.pointId;
    active_.emplace(std::move(id), std::move(a));
  }
}

// ---------------------------------------------------------------------------
// Routing

std::vector<Channel> routesFor(Severity s) {
  switch (s) {
    case Severity::Info: return {Channel::Frame};
    case Severity::Warning: return {Channel::Frame, Channel::EventLog};
    case Severity::Critical: return {Channel::Frame, Channel::EventLog, Channel::Email};
  }
  return {Channel::Frame};
}

void JsonlSink::deliver(const Alert& a) {
  std::ofstream out(path_, std::ios::app);
  if (!out) throw SinkUnavailable("cannot open " + path_);
  auto j = toJson(a);
  j["message"] = a.message();
  out << j.dump() << '\n';
  out.flush();
  if (!out) throw SinkUnavailable("write failed on " + path_);
}

AlertRouter::AlertRouter(std::shared_ptr<AlertSink> eventLog, std::shared_ptr<AlertSink> email)
    : eventLog_(std::move(eventLog)), email_(std::move(email)) {}

std::vector<Channel> AlertRouter::route(const Alert& alert) {
  std::lock_guard lock(mu_);
  std::vector<Channel> out;
  for (auto ch : routesFor(alert.severity)) {
    AlertSink* sink = ch == Channel::EventLog ? eventLog_.get() : ch == Channel::Email ? email_.get() : nullptr;
    if (ch != Channel::Frame && !sink) continue;
    try {
      if (sink) sink->deliver(alert);
      out.push_back(ch);
    } catch (const SinkUnavailable& e) {
      ++failures_;
      std::cerr << "podwatch: alert sink " << name(ch) << " unavailable: " << e.what() << '\n';
    }
  }
  return out;
}

std::size_t AlertRouter::failures() const {
  std::lock_guard lock(mu_);
  return failures_;
}

}  // namespace podwatch
