#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "podwatch/assoc.hpp"
#include "podwatch/error.hpp"
#include "podwatch/records.hpp"

struct sqlite3;

namespace podwatch {

PODWATCH_DEFINE_ERROR(StoreUnavailable);
PODWATCH_DEFINE_ERROR(NoData);

inline constexpr std::string_view kPodSource = "ecopod";
inline constexpr std::string_view kClusterSource = "cluster";

// Exploded-schema conventions. A column containing '|' is an exploded
// "field|value" column carrying 1; anything else is a raw numeric field.

/// zeropad10(time) + "|" + source + "|" + id
std::string recordKey(Timestamp time, std::string_view source, std::string_view id);

struct RecordKey {
  Timestamp time = 0;
  std::string source;
  std::string id;
};
/// Throws Error("ParseError") when the key is not time|source|id.
RecordKey parseRecordKey(std::string_view key);

/// Row-key interval covering every record in [t0, t1] (closed).
KeySelector timeRange(Timestamp t0, Timestamp t1);
/// Row-key interval covering every record of one cycle and source.
KeySelector cycleRows(Timestamp t, std::string_view source = {});

bool isExplodedColumn(std::string_view col);
/// "field|value" -> {field, value}; value may itself contain '|'.
std::pair<std::string_view, std::string_view> splitExploded(std::string_view col);

/// Raw: value (omitted when 0), time. Exploded: source, unit, zone.
std::vector<Triple> toTriples(const SensorReading& reading);
/// Raw numeric fields plus jobcores:<jobId>; exploded categorical fields
/// including one user|, job| and jobowner|<jobId>|<user> column per job.
std::vector<Triple> toTriples(const NodeRecord& record);

/// Inverse of toTriples(NodeRecord) for one record row.
/// `exploded` and `raw` hold that row's entries keyed by column.
NodeRecord nodeRecordFromColumns(std::string_view rowKey, std::span<const std::string> exploded,
                                 const std::map<std::string, double, std::less<>>& raw);

/// Splits Tedge/Traw slices into per-record NodeRecords (cluster source only).
std::vector<NodeRecord> nodeRecordsFrom(const AssociativeArray& edge, const AssociativeArray& raw);

enum class Table { Tedge, TedgeT, Tdeg, Traw };
const char* tableName(Table t);
Table tableFromName(std::string_view name);

struct IngestReceipt {
  std::size_t count = 0;
  double elapsedS = 0;
};

/// Embedded sorted key-value store holding the four schema tables.
/// One writer; concurrent readers see whole batches only.
class Store {
 public:
  /// Opens or creates the store in directory `dir`.
  explicit Store(const std::filesystem::path& dir);
  ~Store();
  Store(const Store&) = delete;
  Store& operator=(const Store&) = delete;

  const std::filesystem::path& dir() const { return dir_; }

  /// Atomically applies one batch: exploded triples to Tedge/TedgeT/Tdeg,
  /// raw triples to Traw. Invalid triples reject the whole batch.
  IngestReceipt ingestBatch(std::span<const Triple> triples);

  AssociativeArray queryRange(Table table, const KeySelector& rows, const KeySelector& cols = KeySelector::all()) const;

  /// Traw entries of the newest cycle for `source`. Throws NoData.
  AssociativeArray latestFrame(std::string_view source) const;
  std::optional<Timestamp> latestTime(std::string_view source) const;
  /// Distinct record timestamps for `source` within [t0, t1].
  std::vector<Timestamp> cycleTimes(std::string_view source, Timestamp t0, Timestamp t1) const;

  std::size_t count(Table table) const;
  /// Canonical sorted TSV of one table.
  void dump(std::ostream& out, Table table) const;

  /// Closes the store; later calls throw StoreUnavailable.
  void close();

 private:
  class Reader;
  Reader acquire() const;

  std::filesystem::path dir_;
  sqlite3* writer_ = nullptr;
  mutable std::mutex writeMu_;
  mutable std::mutex poolMu_;
  mutable std::vector<sqlite3*> readers_;
  bool closed_ = false;
};

}  // namespace podwatch
