#include "podwatch/ingest.hpp"

#include <sqlite3.h>

#include <algorithm>
#include <chrono>
#include <ostream>
#include <set>

#include "podwatch/text.hpp"

namespace podwatch {

// ---------------------------------------------------------------------------
// Schema conventions

std::string recordKey(Timestamp time, std::string_view source, std::string_view id) {
  std::string key = zeroPad(time);
  key += '|';
  key += source;
  key += '|';
  key += id;
  return key;
}

RecordKey parseRecordKey(std::string_view key) {
  auto p1 = key.find('|');
  auto p2 = p1 == std::string_view::npos ? p1 : key.find('|', p1 + 1);
  if (p2 == std::string_view::npos) throw Error("ParseError", "not a record key: " + std::string(key));
  return {parseInteger(key.substr(0, p1)), std::string(key.substr(p1 + 1, p2 - p1 - 1)),
          std::string(key.substr(p2 + 1))};
}

KeySelector timeRange(Timestamp t0, Timestamp t1) {
  return KeySelector::interval(zeroPad(t0), zeroPad(t1) + "|\xff");
}

KeySelector cycleRows(Timestamp t, std::string_view source) {
  std::string prefix = zeroPad(t) + "|";
  if (!source.empty()) {
    prefix += source;
    prefix += '|';
  }
  return KeySelector::prefix(prefix);
}

bool isExplodedColumn(std::string_view col) { return col.find('|') != std::string_view::npos; }

std::pair<std::string_view, std::string_view> splitExploded(std::string_view col) {
  auto p = col.find('|');
  if (p == std::string_view::npos) return {col, {}};
  return {col.substr(0, p), col.substr(p + 1)};
}

namespace {

void pushRaw(std::vector<Triple>& out, const std::string& key, std::string col, double v) {
  if (v != 0) out.push_back({key, std::move(col), v});
}

void pushEdge(std::vector<Triple>& out, const std::string& key, std::string_view field, std::string_view value) {
  if (value.empty()) return;
  std::string col(field);
  col += '|';
  col += value;
  out.push_back({key, std::move(col), 1.0});
}

}  // namespace

std::vector<Triple> toTriples(const SensorReading& r) {
  std::string key = recordKey(r.timestamp, r.source, r.pointId);
  std::vector<Triple> out;
  pushEdge(out, key, "source", r.source);
  pushEdge(out, key, "unit", r.unit);
  pushEdge(out, key, "zone", r.zone);
  pushRaw(out, key, "time", static_cast<double>(r.timestamp));
  pushRaw(out, key, "value", r.value);
  return out;
}

std::vector<Triple> toTriples(const NodeRecord& r) {
  std::string key = recordKey(r.timestamp, kClusterSource, r.hostname);
  std::vector<Triple> out;
  pushEdge(out, key, "source", kClusterSource);
  pushEdge(out, key, "host", r.hostname);
  pushEdge(out, key, "rack", r.rack);
  pushEdge(out, key, "image", r.imageVersion);
  pushEdge(out, key, "kernel", r.kernelVersion);
  pushEdge(out, key, "ip", r.ip);
  pushEdge(out, key, "mac", r.mac);
  pushEdge(out, key, "failed", r.failedComponent);
  pushEdge(out, key, "stale", r.stale ? "1" : "0");

  auto jobs = r.jobs;
  std::sort(jobs.begin(), jobs.end(), [](const JobSlice& a, const JobSlice& b) { return a.jobId < b.jobId; });
  std::set<std::string> users;
  for (const auto& j : jobs) {
    users.insert(j.user);
    pushEdge(out, key, "job", j.jobId);
    pushEdge(out, key, "jobowner", j.jobId + "|" + j.user);
    pushRaw(out, key, "jobcores:" + j.jobId, j.cores);
  }
  for (const auto& u : users) pushEdge(out, key, "user", u);

  pushRaw(out, key, "time", static_cast<double>(r.timestamp));
  pushRaw(out, key, "lastSeen", static_cast<double>(r.lastSeen));
  pushRaw(out, key, "slot", r.slotIndex);
  pushRaw(out, key, "cpuLoad", r.cpuLoad);
  pushRaw(out, key, "memUsedPct", r.memUsedPct);
  pushRaw(out, key, "diskUsedPct", r.diskUsedPct);
  pushRaw(out, key, "totalCores", r.totalCores);
  pushRaw(out, key, "scheduledCores", r.scheduledCores);
  return out;
}

NodeRecord nodeRecordFromColumns(std::string_view rowKey, std::span<const std::string> exploded,
                                 const std::map<std::string, double, std::less<>>& raw) {
  auto key = parseRecordKey(rowKey);
  NodeRecord r;
  r.hostname = key.id;
  r.timestamp = key.time;
  auto rawAt = [&](std::string_view f) {
    auto it = raw.find(f);
    return it == raw.end() ? 0.0 : it->second;
  };
  r.lastSeen = static_cast<Timestamp>(rawAt("lastSeen"));
  r.slotIndex = static_cast<int>(rawAt("slot"));
  r.cpuLoad = rawAt("cpuLoad");
  r.memUsedPct = rawAt("memUsedPct");
  r.diskUsedPct = rawAt("diskUsedPct");
  r.totalCores = static_cast<int>(rawAt("totalCores"));
  r.scheduledCores = static_cast<int>(rawAt("scheduledCores"));
  for (const auto& col : exploded) {
    auto [field, value] = splitExploded(col);
    if (field == "rack") r.rack = value;
    else if (field == "image") r.imageVersion = value;
    else if (field == "kernel") r.kernelVersion = value;
    else if (field == "ip") r.ip = value;
    else if (field == "mac") r.mac = value;
    else if (field == "failed") r.failedComponent = value;
    else if (field == "stale") r.stale = value == "1";
    else if (field == "jobowner") {
      auto [jobId, user] = splitExploded(value);
      r.jobs.push_back({std::string(jobId), std::string(user), static_cast<int>(rawAt("jobcores:" + std::string(jobId)))});
    }
  }
  std::sort(r.jobs.begin(), r.jobs.end(), [](const JobSlice& a, const JobSlice& b) { return a.jobId < b.jobId; });
  return r;
}

std::vector<NodeRecord> nodeRecordsFrom(const AssociativeArray& edge, const AssociativeArray& raw) {
  std::map<std::string, std::vector<std::string>, std::less<>> exploded;
  std::map<std::string, std::map<std::string, double, std::less<>>, std::less<>> raws;
  auto isNode = [](std::string_view row) {
    auto p1 = row.find('|');
    return p1 != std::string_view::npos && row.substr(p1 + 1, kClusterSource.size() + 1) == std::string(kClusterSource) + "|";
  };
  for (const auto& [key, v] : edge.entries())
    if (isNode(key.first)) exploded[key.first].push_back(key.second);
  for (const auto& [key, v] : raw.entries())
    if (isNode(key.first)) raws[key.first][key.second] = v;
  std::set<std::string> rows;
  for (const auto& [row, cols] : exploded) rows.insert(row);
  for (const auto& [row, cols] : raws) rows.insert(row);

  std::vector<NodeRecord> out;
  static const std::map<std::string, double, std::less<>> kEmpty;
  static const std::vector<std::string> kNone;
  for (const auto& row : rows) {
    auto e = exploded.find(row);
    auto r = raws.find(row);
    out.push_back(nodeRecordFromColumns(row, e == exploded.end() ? kNone : e->second, r == raws.end() ? kEmpty : r->second));
  }
  return out;
}

const char* tableName(Table t) {
  switch (t) {
    case Table::Tedge: return "Tedge";
    case Table::TedgeT: return "TedgeT";
    case Table::Tdeg: return "Tdeg";
    case Table::Traw: return "Traw";
  }
  return "?";
}

Table tableFromName(std::string_view name) {
  for (auto t : {Table::Tedge, Table::TedgeT, Table::Tdeg, Table::Traw})
    if (name == tableName(t)) return t;
  throw Error("UnknownTable", "unknown table " + std::string(name));
}

// ---------------------------------------------------------------------------
// SQLite helpers

namespace {

class Stmt {
 public:
  Stmt(sqlite3* db, const std::string& sql) : db_(db) {
    if (sqlite3_prepare_v2(db, sql.c_str(), -1, &stmt_, nullptr) != SQLITE_OK)
      throw StoreUnavailable(std::string("prepare: ") + sqlite3_errmsg(db));
  }
  ~Stmt() { sqlite3_finalize(stmt_); }
  Stmt(const Stmt&) = delete;
  Stmt& operator=(const Stmt&) = delete;

  Stmt& bind(int i, std::string_view s) {
    sqlite3_bind_text(stmt_, i, s.data(), static_cast<int>(s.size()), SQLITE_TRANSIENT);
    return *this;
  }
  /// True while rows remain.
  bool step() {
    int rc = sqlite3_step(stmt_);
    if (rc == SQLITE_ROW) return true;
    if (rc == SQLITE_DONE) return false;
    throw StoreUnavailable(std::string("step: ") + sqlite3_errmsg(db_));
  }
  void reset() {
    sqlite3_reset(stmt_);
    sqlite3_clear_bindings(stmt_);
  }
  std::string_view text(int col) const {
    auto p = reinterpret_cast<const char*>(sqlite3_column_text(stmt_, col));
    return p ? std::string_view(p, static_cast<std::size_t>(sqlite3_column_bytes(stmt_, col))) : std::string_view();
  }
  std::int64_t integer(int col) const { return sqlite3_column_int64(stmt_, col); }

 private:
  sqlite3* db_;
  sqlite3_stmt* stmt_ = nullptr;
};

void exec(sqlite3* db, const char* sql) {
  char* err = nullptr;
  if (sqlite3_exec(db, sql, nullptr, nullptr, &err) != SQLITE_OK) {
    std::string msg = err ? err : "unknown error";
    sqlite3_free(err);
    throw StoreUnavailable(std::string(sql).substr(0, 40) + ": " + msg);
  }
}

sqlite3* openDb(const std::filesystem::path& file, bool readOnly) {
  sqlite3* db = nullptr;
  int flags = readOnly ? SQLITE_OPEN_READONLY : (SQLITE_OPEN_READWRITE | SQLITE_OPEN_CREATE);
  flags |= SQLITE_OPEN_NOMUTEX;
  if (sqlite3_open_v2(file.c_str(), &db, flags, nullptr) != SQLITE_OK) {
    std::string msg = db ? sqlite3_errmsg(db) : "out of memory";
    sqlite3_close(db);
    throw StoreUnavailable("open " + file.string() + ": " + msg);
  }
  sqlite3_busy_timeout(db, 10000);
  return db;
}

}  // namespace

class Store::Reader {
 public:
  Reader(const Store& store, sqlite3* db) : store_(store), db_(db) { exec(db_, "BEGIN"); }
  ~Reader() {
    sqlite3_exec(db_, "COMMIT", nullptr, nullptr, nullptr);
    std::lock_guard lock(store_.poolMu_);
    store_.readers_.push_back(db_);
  }
  Reader(const Reader&) = delete;
  Reader& operator=(const Reader&) = delete;
  sqlite3* db() const { return db_; }

 private:
  const Store& store_;
  sqlite3* db_;
};

Store::Reader Store::acquire() const {
  if (closed_) throw StoreUnavailable("store is closed");
  sqlite3* db = nullptr;
  {
    std::lock_guard lock(poolMu_);
    if (!readers_.empty()) {
      db = readers_.back();
      readers_.pop_back();
    }
  }
  if (!db) {
    db = openDb(dir_ / "store.db", true);
    exec(db, "PRAGMA cache_size=-32768");
  }
  return Reader(*this, db);
}

Store::Store(const std::filesystem::path& dir) : dir_(dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir_, ec);
  if (ec) throw StoreUnavailable("cannot create " + dir_.string() + ": " + ec.message());
  writer_ = openDb(dir_ / "store.db", false);
  exec(writer_, "PRAGMA journal_mode=WAL");
  exec(writer_, "PRAGMA synchronous=NORMAL");
  exec(writer_, "PRAGMA cache_size=-131072");
  for (auto t : {Table::Tedge, Table::TedgeT, Table::Tdeg, Table::Traw}) {
    std::string sql = std::string("CREATE TABLE IF NOT EXISTS ") + tableName(t) +
                      " (row TEXT NOT NULL, col TEXT NOT NULL, val TEXT NOT NULL, PRIMARY KEY (row, col)) WITHOUT ROWID";
    exec(writer_, sql.c_str());
  }
}

Store::~Store() { close(); }

void Store::close() {
  std::lock_guard wlock(writeMu_);
  std::lock_guard plock(poolMu_);
  for (auto* db : readers_) sqlite3_close(db);
  readers_.clear();
  if (writer_) sqlite3_close(writer_);
  writer_ = nullptr;
  closed_ = true;
}

IngestReceipt Store::ingestBatch(std::span<const Triple> triples) {
  auto start = std::chrono::steady_clock::now();
  for (const auto& t : triples) {
    validate(t);
    if (isExplodedColumn(t.col) && t.val != 1.0)
      throw InvalidTriple("exploded column " + t.col + " must carry 1, got " + formatNumber(t.val));
  }
  IngestReceipt receipt;
  if (triples.empty()) return receipt;

  std::lock_guard lock(writeMu_);
  if (!writer_) throw StoreUnavailable("store is closed");
  exec(writer_, "BEGIN IMMEDIATE");
  try {
    Stmt edge(writer_, "INSERT OR IGNORE INTO Tedge (row, col, val) VALUES (?, ?, '1')");
    Stmt edgeT(writer_, "INSERT OR IGNORE INTO TedgeT (row, col, val) VALUES (?, ?, '1')");
    Stmt raw(writer_, "INSERT OR REPLACE INTO Traw (row, col, val) VALUES (?, ?, ?)");
    std::map<std::string, double, std::less<>> degree;
    for (const auto& t : triples) {
      if (isExplodedColumn(t.col)) {
        edge.bind(1, t.row).bind(2, t.col);
        edge.step();
        edge.reset();
        if (sqlite3_changes(writer_) > 0) {
          edgeT.bind(1, t.col).bind(2, t.row);
          edgeT.step();
          edgeT.reset();
          degree[t.col] += 1;
        }
      } else {
        std::string v = formatNumber(t.val);
        raw.bind(1, t.row).bind(2, t.col).bind(3, v);
        raw.step();
        raw.reset();
      }
      ++receipt.count;
    }
    Stmt getDeg(writer_, "SELECT val FROM Tdeg WHERE row = ? AND col = 'degree'");
    Stmt putDeg(writer_, "INSERT OR REPLACE INTO Tdeg (row, col, val) VALUES (?, 'degree', ?)");
    for (const auto& [col, inc] : degree) {
      getDeg.bind(1, col);
      double current = getDeg.step() ? parseNumber(getDeg.text(0)) : 0.0;
      getDeg.reset();
      std::string v = formatNumber(current + inc);
      putDeg.bind(1, col).bind(2, v);
      putDeg.step();
      putDeg.reset();
    }
    exec(writer_, "COMMIT");
  } catch (...) {
    sqlite3_exec(writer_, "ROLLBACK", nullptr, nullptr, nullptr);
    throw;
  }
  receipt.elapsedS = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return receipt;
}

AssociativeArray Store::queryRange(Table table, const KeySelector& rows, const KeySelector& cols) const {
  auto reader = acquire();
  std::string base = std::string("SELECT row, col, val FROM ") + tableName(table);
  std::vector<Triple> out;
  auto collect = [&](Stmt& st) {
    while (st.step()) {
      auto col = st.text(1);
      if (!cols.contains(col)) continue;
      out.push_back({std::string(st.text(0)), std::string(col), parseNumber(st.text(2))});
    }
  };
  if (rows.isAll()) {
    Stmt st(reader.db(), base);
    collect(st);
  } else if (rows.isSet()) {
    Stmt st(reader.db(), base + " WHERE row = ?");
    for (const auto& k : rows.keys()) {
      st.bind(1, k);
      collect(st);
      st.reset();
    }
  } else {
    Stmt st(reader.db(), base + " WHERE row >= ? AND row <= ?");
    st.bind(1, rows.low()).bind(2, rows.high());
    collect(st);
  }
  return AssociativeArray::fromTriples(out, Collision::Last);
}

std::optional<Timestamp> Store::latestTime(std::string_view source) const {
  auto reader = acquire();
  Stmt st(reader.db(), "SELECT col FROM TedgeT WHERE row = ? ORDER BY col DESC LIMIT 1");
  st.bind(1, "source|" + std::string(source));
  if (!st.step()) return std::nullopt;
  return parseRecordKey(st.text(0)).time;
}

AssociativeArray Store::latestFrame(std::string_view source) const {
  auto t = latestTime(source);
  if (!t) throw NoData("no cycles ingested for source " + std::string(source));
  return queryRange(Table::Traw, cycleRows(*t, source));
}

std::vector<Timestamp> Store::cycleTimes(std::string_view source, Timestamp t0, Timestamp t1) const {
  auto reader = acquire();
  Stmt st(reader.db(), "SELECT col FROM TedgeT WHERE row = ? AND col >= ? AND col <= ?");
  auto range = timeRange(t0, t1);
  st.bind(1, "source|" + std::string(source)).bind(2, range.low()).bind(3, range.high());
  std::vector<Timestamp> out;
  while (st.step()) {
    auto col = st.text(0);
    Timestamp t = parseInteger(col.substr(0, col.find('|')));
    if (out.empty() || out.back() != t) out.push_back(t);
  }
  return out;
}

std::size_t Store::count(Table table) const {
  auto reader = acquire();
  Stmt st(reader.db(), std::string("SELECT COUNT(*) FROM ") + tableName(table));
  st.step();
  return static_cast<std::size_t>(st.integer(0));
}

void Store::dump(std::ostream& out, Table table) const {
  auto reader = acquire();
  Stmt st(reader.db(), std::string("SELECT row, col, val FROM ") + tableName(table) + " ORDER BY row, col");
  while (st.step()) out << st.text(0) << '\t' << st.text(1) << '\t' << st.text(2) << '\n';
}

}  // namespace podwatch
