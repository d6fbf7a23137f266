#include "podwatch/assoc.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>
#include <set>
#include <unordered_map>

#include "podwatch/text.hpp"

namespace podwatch {

void validate(const Triple& t) {
  if (t.row.empty() || t.col.empty())
    throw InvalidTriple("empty key in triple (" + t.row + ", " + t.col + ")");
  if (!std::isfinite(t.val))
    throw InvalidTriple("non-finite value for (" + t.row + ", " + t.col + ")");
}

KeySelector KeySelector::all() { return {}; }

KeySelector KeySelector::interval(std::string low, std::string high) {
  if (low > high) throw InvalidRange("interval low '" + low + "' > high '" + high + "'");
  KeySelector s;
  s.kind_ = Kind::Interval;
  s.low_ = std::move(low);
  s.high_ = std::move(high);
  return s;
}

KeySelector KeySelector::prefix(std::string_view prefix) {
  // Every key with the prefix sorts within [prefix, prefix + 0xFF...].
  return interval(std::string(prefix), std::string(prefix) + std::string(4, '\xff'));
}

KeySelector KeySelector::set(std::vector<std::string> keys) {
  std::sort(keys.begin(), keys.end());
  keys.erase(std::unique(keys.begin(), keys.end()), keys.end());
  KeySelector s;
  s.kind_ = Kind::Set;
  s.keys_ = std::move(keys);
  return s;
}

bool KeySelector::contains(std::string_view key) const {
  switch (kind_) {
    case Kind::All:
      return true;
    case Kind::Interval:
      return key >= low_ && key <= high_;
    case Kind::Set:
      return std::binary_search(keys_.begin(), keys_.end(), key,
                                [](std::string_view a, std::string_view b) { return a < b; });
  }
  return false;
}

AssociativeArray::AssociativeArray(Entries entries) : entries_(std::move(entries)) {
  std::erase_if(entries_, [](const auto& e) { return e.second == 0; });
}

AssociativeArray AssociativeArray::fromTriples(std::span<const Triple> triples, Collision collision) {
  Entries entries;
  for (const auto& t : triples) {
    validate(t);
    auto [it, inserted] = entries.try_emplace(Key{t.row, t.col}, t.val);
    if (!inserted) {
      if (collision == Collision::Sum)
        it->second += t.val;
      else
        it->second = t.val;
    }
  }
  return AssociativeArray(std::move(entries));
}

AssociativeArray AssociativeArray::identity(std::span<const std::string> keys) {
  Entries entries;
  for (const auto& k : keys) entries.emplace(Key{k, k}, 1.0);
  return AssociativeArray(std::move(entries));
}

std::vector<std::string> AssociativeArray::rows() const {
  std::vector<std::string> out;
  for (const auto& [key, v] : entries_)
    if (out.empty() || out.back() != key.first) out.push_back(key.first);
  return out;
}

std::vector<std::string> AssociativeArray::cols() const {
  std::set<std::string> s;
  for (const auto& [key, v] : entries_) s.insert(key.second);
  return {s.begin(), s.end()};
}

std::optional<double> AssociativeArray::find(std::string_view row, std::string_view col) const {
  auto it = entries_.find(Key{std::string(row), std::string(col)});
  if (it == entries_.end()) return std::nullopt;
  return it->second;
}

double AssociativeArray::at(std::string_view row, std::string_view col) const {
  return find(row, col).value_or(0.0);
}

std::vector<Triple> AssociativeArray::triples() const {
  std::vector<Triple> out;
  out.reserve(entries_.size());
  for (const auto& [key, v] : entries_) out.push_back({key.first, key.second, v});
  return out;
}

AssociativeArray AssociativeArray::transpose() const {
  Entries out;
  for (const auto& [key, v] : entries_) out.emplace(Key{key.second, key.first}, v);
  return AssociativeArray(std::move(out));
}

AssociativeArray AssociativeArray::subsref(const KeySelector& rowSel, const KeySelector& colSel) const {
  Entries out;
  auto begin = entries_.begin();
  auto end = entries_.end();
  if (!rowSel.isAll() && !rowSel.isSet()) {
    begin = entries_.lower_bound(Key{rowSel.low(), std::string()});
    // high + '\0' is the smallest key greater than high.
    end = entries_.lower_bound(Key{rowSel.high() + '\0', std::string()});
  }
  for (auto it = begin; it != end; ++it) {
    const auto& [key, v] = *it;
    if (rowSel.contains(key.first) && colSel.contains(key.second)) out.emplace_hint(out.end(), key, v);
  }
  return AssociativeArray(std::move(out));
}

AssociativeArray AssociativeArray::compareScalar(Compare op, double threshold) const {
  Entries out;
  for (const auto& [key, v] : entries_) {
    bool keep = false;
    switch (op) {
      case Compare::LT: keep = v < threshold; break;
      case Compare::GT: keep = v > threshold; break;
      case Compare::NE: keep = v != threshold; break;
    }
    if (keep) out.emplace_hint(out.end(), key, v);
  }
  return AssociativeArray(std::move(out));
}

AssociativeArray AssociativeArray::plus(const AssociativeArray& other) const {
  Entries out = entries_;
  for (const auto& [key, v] : other.entries_) out[key] += v;
  return AssociativeArray(std::move(out));
}

AssociativeArray AssociativeArray::minus(const AssociativeArray& other) const {
  Entries out = entries_;
  for (const auto& [key, v] : other.entries_) out[key] -= v;
  return AssociativeArray(std::move(out));
}

AssociativeArray AssociativeArray::scale(double factor) const {
  Entries out;
  for (const auto& [key, v] : entries_) out.emplace_hint(out.end(), key, v * factor);
  return AssociativeArray(std::move(out));
}

AssociativeArray AssociativeArray::logical() const {
  Entries out;
  for (const auto& [key, v] : entries_) out.emplace_hint(out.end(), key, 1.0);
  return AssociativeArray(std::move(out));
}

AssociativeArray AssociativeArray::sumCols(const std::string& colName) const {
  Entries out;
  for (const auto& [key, v] : entries_) out[Key{key.first, colName}] += v;
  return AssociativeArray(std::move(out));
}

AssociativeArray AssociativeArray::sumRows(const std::string& rowName) const {
  Entries out;
  for (const auto& [key, v] : entries_) out[Key{rowName, key.second}] += v;
  return AssociativeArray(std::move(out));
}

AssociativeArray multiply(const AssociativeArray& a, const AssociativeArray& b) {
  // Row index of b: inner key -> (col, value), in col order.
  std::unordered_map<std::string_view, std::vector<std::pair<const std::string*, double>>> bRows;
  for (const auto& [key, v] : b.entries_) bRows[key.first].emplace_back(&key.second, v);

  AssociativeArray::Entries out;
  std::map<std::string_view, double> acc;
  auto it = a.entries_.begin();
  while (it != a.entries_.end()) {
    const std::string& row = it->first.first;
    acc.clear();
    // a's row entries arrive in inner-key order, fixing the summation order.
    for (; it != a.entries_.end() && it->first.first == row; ++it) {
      auto found = bRows.find(it->first.second);
      if (found == bRows.end()) continue;
      for (const auto& [col, bv] : found->second) acc[*col] += it->second * bv;
    }
    for (const auto& [col, v] : acc)
      if (v != 0) out.emplace_hint(out.end(), AssociativeArray::Key{row, std::string(col)}, v);
  }
  return AssociativeArray(std::move(out));
}

void writeTsv(std::ostream& out, std::span<const Triple> triples) {
  for (const auto& t : triples) out << t.row << '\t' << t.col << '\t' << formatNumber(t.val) << '\n';
}

void writeTsv(std::ostream& out, const AssociativeArray& a) {
  for (const auto& [key, v] : a.entries()) out << key.first << '\t' << key.second << '\t' << formatNumber(v) << '\n';
}

std::vector<Triple> readTsv(std::istream& in) {
  std::vector<Triple> out;
  std::string line;
  std::size_t lineNo = 0;
  while (std::getline(in, line)) {
    ++lineNo;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto fields = split(line, '\t');
    if (fields.size() != 3)
      throw Error("ParseError", "line " + std::to_string(lineNo) + ": expected 3 tab-separated fields");
    Triple t{std::string(fields[0]), std::string(fields[1]), parseNumber(fields[2])};
    validate(t);
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace podwatch
