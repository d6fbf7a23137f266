#pragma once

#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "podwatch/error.hpp"

namespace podwatch {

PODWATCH_DEFINE_ERROR(InvalidTriple);
PODWATCH_DEFINE_ERROR(InvalidRange);

struct Triple {
  std::string row;
  std::string col;
  double val = 0;

  friend bool operator==(const Triple&, const Triple&) = default;
  friend auto operator<=>(const Triple&, const Triple&) = default;
};

/// Throws InvalidTriple for an empty key or a non-finite value.
void validate(const Triple& t);

enum class Collision { Sum, Last };
enum class Compare { LT, GT, NE };

/// Key selection for range queries: everything, a closed interval
/// [low, high], or an explicit set of keys.
class KeySelector {
 public:
  static KeySelector all();
  /// Throws InvalidRange when low > high.
  static KeySelector interval(std::string low, std::string high);
  /// All keys starting with `prefix`.
  static KeySelector prefix(std::string_view prefix);
  static KeySelector set(std::vector<std::string> keys);

  bool contains(std::string_view key) const;

  bool isAll() const { return kind_ == Kind::All; }
  bool isSet() const { return kind_ == Kind::Set; }
  const std::string& low() const { return low_; }
  const std::string& high() const { return high_; }
  const std::vector<std::string>& keys() const { return keys_; }

 private:
  enum class Kind { All, Interval, Set };
  Kind kind_ = Kind::All;
  std::string low_, high_;
  std::vector<std::string> keys_;  // sorted, unique
};

/// Sparse matrix with string row and column keys. Immutable value type:
/// every operation returns a new array and no stored entry is ever 0.
class AssociativeArray {
 public:
  using Key = std::pair<std::string, std::string>;
  using Entries = std::map<Key, double>;

  AssociativeArray() = default;

  static AssociativeArray fromTriples(std::span<const Triple> triples,
                                      Collision collision = Collision::Sum);
  /// Square identity over `keys`.
  static AssociativeArray identity(std::span<const std::string> keys);

  std::size_t nnz() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }

  /// Lexicographically ordered, exactly the keys with at least one entry.
  std::vector<std::string> rows() const;
  std::vector<std::string> cols() const;

  /// Stored value or 0 when absent.
  double at(std::string_view row, std::string_view col) const;
  std::optional<double> find(std::string_view row, std::string_view col) const;

  const Entries& entries() const { return entries_; }
  std::vector<Triple> triples() const;

  AssociativeArray transpose() const;
  AssociativeArray subsref(const KeySelector& rows, const KeySelector& cols) const;
  AssociativeArray compareScalar(Compare op, double threshold) const;

  /// Element-wise sum over the union of keys.
  AssociativeArray plus(const AssociativeArray& other) const;
  AssociativeArray minus(const AssociativeArray& other) const;
  AssociativeArray scale(double factor) const;
  /// Every stored value replaced by 1.
  AssociativeArray logical() const;

  /// Sum across columns: one entry (row, colName) per row.
  AssociativeArray sumCols(const std::string& colName = "sum") const;
  /// Sum across rows: one entry (rowName, col) per column.
  AssociativeArray sumRows(const std::string& rowName = "sum") const;

  friend AssociativeArray multiply(const AssociativeArray& a, const AssociativeArray& b);
  friend AssociativeArray operator*(const AssociativeArray& a, const AssociativeArray& b) {
    return multiply(a, b);
  }
  friend bool operator==(const AssociativeArray&, const AssociativeArray&) = default;

 private:
  explicit AssociativeArray(Entries entries);
  Entries entries_;
};

/// Plus-times product over the shared inner keys. Inner sums run in
/// lexicographic inner-key order.
AssociativeArray multiply(const AssociativeArray& a, const AssociativeArray& b);

/// TSV triples: `row<TAB>col<TAB>value<LF>`, no header.
void writeTsv(std::ostream& out, std::span<const Triple> triples);
void writeTsv(std::ostream& out, const AssociativeArray& a);
std::vector<Triple> readTsv(std::istream& in);

}  // namespace podwatch
