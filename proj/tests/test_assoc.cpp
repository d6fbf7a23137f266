#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <sstream>
#include <unordered_map>

#include "podwatch/assoc.hpp"

using namespace podwatch;

namespace {

// Keys with awkward orderings: prefixes of each other, digits vs letters,
// separators.
std::vector<std::string> keyPool(std::mt19937& rng, int n) {
  static const std::vector<std::string> stems = {"a", "ab", "b", "node1", "node10", "node2", "x|y", "Z", "z0", "zz"};
  std::vector<std::string> out;
  std::uniform_int_distribution<int> stem(0, static_cast<int>(stems.size()) - 1);
  while (static_cast<int>(out.size()) < n) {
    auto k = stems[stem(rng)] + std::to_string(rng() % 100);
    if (std::find(out.begin(), out.end(), k) == out.end()) out.push_back(k);
  }
  return out;
}

// Small multiples of 0.5 keep every sum exact, so oracles compare with ==.
double exactValue(std::mt19937& rng) {
  static const double vals[] = {-3, -2, -1.5, -1, -0.5, 0.5, 1, 1.5, 2, 3, 4};
  return vals[rng() % std::size(vals)];
}

std::vector<Triple> randomTriples(std::mt19937& rng, const std::vector<std::string>& rows,
                                  const std::vector<std::string>& cols, double density) {
  std::vector<Triple> out;
  std::bernoulli_distribution keep(density);
  for (const auto& r : rows)
    for (const auto& c : cols)
      if (keep(rng)) out.push_back({r, c, exactValue(rng)});
  std::shuffle(out.begin(), out.end(), rng);
  return out;
}

using Dense = std::vector<std::vector<double>>;

// Dense reference: index keys lexicographically, then plain loops.
struct DenseOracle {
  std::vector<std::string> rows, cols;
  Dense m;

  static DenseOracle from(const std::vector<Triple>& ts) {
    DenseOracle d;
    for (const auto& t : ts) {
      d.rows.push_back(t.row);
      d.cols.push_back(t.col);
    }
    for (auto* v : {&d.rows, &d.cols}) {
      std::sort(v->begin(), v->end());
      v->erase(std::unique(v->begin(), v->end()), v->end());
    }
    d.m.assign(d.rows.size(), std::vector<double>(d.cols.size(), 0.0));
    for (const auto& t : ts) d.at(t.row, t.col) += t.val;
    return d;
  }
  double& at(const std::string& r, const std::string& c) {
    auto i = std::lower_bound(rows.begin(), rows.end(), r) - rows.begin();
    auto j = std::lower_bound(cols.begin(), cols.end(), c) - cols.begin();
    return m[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
  }
  double get(const std::string& r, const std::string& c) const {
    auto i = std::lower_bound(rows.begin(), rows.end(), r);
    auto j = std::lower_bound(cols.begin(), cols.end(), c);
    if (i == rows.end() || *i != r || j == cols.end() || *j != c) return 0.0;
    return m[static_cast<std::size_t>(i - rows.begin())][static_cast<std::size_t>(j - cols.begin())];
  }
  std::map<std::pair<std::string, std::string>, double> nonzero() const {
    std::map<std::pair<std::string, std::string>, double> out;
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t j = 0; j < cols.size(); ++j)
        if (m[i][j] != 0) out[{rows[i], cols[j]}] = m[i][j];
    return out;
  }
};

std::map<std::pair<std::string, std::string>, double> denseProduct(const DenseOracle& a, const DenseOracle& b) {
  std::vector<std::string> inner;
  std::set_union(a.cols.begin(), a.cols.end(), b.rows.begin(), b.rows.end(), std::back_inserter(inner));
  std::map<std::pair<std::string, std::string>, double> out;
  for (const auto& r : a.rows)
    for (const auto& c : b.cols) {
      double acc = 0;
      for (const auto& k : inner) acc += a.get(r, k) * b.get(k, c);
      if (acc != 0) out[{r, c}] = acc;
    }
  return out;
}

std::map<std::pair<std::string, std::string>, double> asMap(const AssociativeArray& a) {
  return {a.entries().begin(), a.entries().end()};
}

bool inInterval(const std::string& k, const std::string& lo, const std::string& hi) { return lo <= k && k <= hi; }

}  // namespace

TEST(Assoc, FromTriplesSumsCollisionsAndDropsZeros) {
  std::vector<Triple> ts = {{"r", "c", 2}, {"r", "c", -2}, {"r", "d", 1}, {"r", "d", 1.5}, {"s", "c", 0}};
  auto a = AssociativeArray::fromTriples(ts);
  EXPECT_EQ(a.nnz(), 1u);
  EXPECT_EQ(a.at("r", "d"), 2.5);
  EXPECT_FALSE(a.find("r", "c"));
  EXPECT_EQ(a.rows(), std::vector<std::string>{"r"});

  auto last = AssociativeArray::fromTriples(ts, Collision::Last);
  EXPECT_EQ(last.at("r", "c"), -2);
  EXPECT_EQ(last.at("r", "d"), 1.5);
}

TEST(Assoc, FromTriplesMatchesHashMapAccumulation) {
  std::mt19937 rng(7);
  for (int iter = 0; iter < 200; ++iter) {
    auto rows = keyPool(rng, 1 + static_cast<int>(rng() % 10));
    auto cols = keyPool(rng, 1 + static_cast<int>(rng() % 10));
    auto ts = randomTriples(rng, rows, cols, 0.6);
    auto dup = randomTriples(rng, rows, cols, 0.4);
    ts.insert(ts.end(), dup.begin(), dup.end());
    std::unordered_map<std::string, double> acc;
    for (const auto& t : ts) acc[t.row + '\t' + t.col] += t.val;
    auto a = AssociativeArray::fromTriples(ts);
    std::size_t nonzero = 0;
    for (const auto& [k, v] : acc) {
      auto tab = k.find('\t');
      EXPECT_EQ(a.at(k.substr(0, tab), k.substr(tab + 1)), v);
      nonzero += v != 0;
    }
    EXPECT_EQ(a.nnz(), nonzero);
  }
}

TEST(Assoc, InvalidTriplesAreRejected) {
  EXPECT_THROW(validate({"", "c", 1}), InvalidTriple);
  EXPECT_THROW(validate({"r", "", 1}), InvalidTriple);
  EXPECT_THROW(validate({"r", "c", std::nan("")}), InvalidTriple);
  EXPECT_THROW(validate({"r", "c", std::numeric_limits<double>::infinity()}), InvalidTriple);
  std::vector<Triple> bad = {{"r", "c", 1}, {"", "c", 1}};
  EXPECT_THROW(AssociativeArray::fromTriples(bad), InvalidTriple);
}

TEST(Assoc, MultiplyTransposeSubsrefMatchOracles) {
  std::mt19937 rng(2024);
  for (int iter = 0; iter < 500; ++iter) {
    int n = 1 + static_cast<int>(rng() % 32), k = 1 + static_cast<int>(rng() % 32), m = 1 + static_cast<int>(rng() % 32);
    auto rows = keyPool(rng, n), inner = keyPool(rng, k), cols = keyPool(rng, m);
    double density = std::uniform_real_distribution<double>(0.05, 0.9)(rng);
    auto ta = randomTriples(rng, rows, inner, density);
    auto tb = randomTriples(rng, inner, cols, density);
    auto a = AssociativeArray::fromTriples(ta);
    auto b = AssociativeArray::fromTriples(tb);
    auto da = DenseOracle::from(ta), db = DenseOracle::from(tb);

    // multiply
    auto ab = a * b;
    ASSERT_EQ(asMap(ab), denseProduct(da, db)) << "iteration " << iter;

    // transpose
    std::map<std::pair<std::string, std::string>, double> t;
    for (const auto& x : ta) t[{x.col, x.row}] += x.val;
    std::erase_if(t, [](const auto& kv) { return kv.second == 0; });
    ASSERT_EQ(asMap(a.transpose()), t);

    // subsref: interval on rows, explicit set on columns
    auto lo = rows[rng() % rows.size()], hi = rows[rng() % rows.size()];
    if (hi < lo) std::swap(lo, hi);
    std::vector<std::string> pick;
    for (const auto& c : inner)
      if (rng() % 2) pick.push_back(c);
    auto sub = a.subsref(KeySelector::interval(lo, hi), KeySelector::set(pick));
    std::map<std::pair<std::string, std::string>, double> expect;
    for (const auto& [key, v] : da.nonzero())
      if (inInterval(key.first, lo, hi) && std::find(pick.begin(), pick.end(), key.second) != pick.end())
        expect[key] = v;
    ASSERT_EQ(asMap(sub), expect);

    // prefix selector on columns
    std::string prefix = inner[rng() % inner.size()].substr(0, 1 + rng() % 2);
    auto byPrefix = a.subsref(KeySelector::all(), KeySelector::prefix(prefix));
    expect.clear();
    for (const auto& [key, v] : da.nonzero())
      if (key.second.compare(0, prefix.size(), prefix) == 0) expect[key] = v;
    ASSERT_EQ(asMap(byPrefix), expect);

    // identities
    ASSERT_EQ(ab.transpose(), b.transpose() * a.transpose());
    auto acols = a.cols(), arows = a.rows();
    ASSERT_EQ(a * AssociativeArray::identity(acols), a);
    ASSERT_EQ(AssociativeArray::identity(arows) * a, a);
  }
}

TEST(Assoc, ElementwiseAndReductionsMatchScalarLoops) {
  std::mt19937 rng(99);
  for (int iter = 0; iter < 200; ++iter) {
    auto rows = keyPool(rng, 1 + static_cast<int>(rng() % 12));
    auto cols = keyPool(rng, 1 + static_cast<int>(rng() % 12));
    auto ta = randomTriples(rng, rows, cols, 0.5), tb = randomTriples(rng, rows, cols, 0.5);
    auto a = AssociativeArray::fromTriples(ta), b = AssociativeArray::fromTriples(tb);
    auto da = DenseOracle::from(ta), db = DenseOracle::from(tb);

    auto sum = a.plus(b), diff = a.minus(b);
    for (const auto& r : rows)
      for (const auto& c : cols) {
        ASSERT_EQ(sum.at(r, c), da.get(r, c) + db.get(r, c));
        ASSERT_EQ(diff.at(r, c), da.get(r, c) - db.get(r, c));
      }
    for (const auto& [key, v] : sum.entries()) ASSERT_NE(v, 0.0);
    for (const auto& [key, v] : diff.entries()) ASSERT_NE(v, 0.0);
    ASSERT_TRUE(a.minus(a).empty());

    double threshold = exactValue(rng);
    for (auto op : {Compare::LT, Compare::GT, Compare::NE}) {
      auto kept = a.compareScalar(op, threshold);
      std::size_t expected = 0;
      for (const auto& [key, v] : da.nonzero()) {
        bool keep = op == Compare::LT ? v < threshold : op == Compare::GT ? v > threshold : v != threshold;
        expected += keep;
        if (keep) ASSERT_EQ(kept.at(key.first, key.second), v);
      }
      ASSERT_EQ(kept.nnz(), expected);
    }

    auto rs = a.sumCols("total");
    for (const auto& r : da.rows) {
      double acc = 0;
      for (const auto& c : da.cols) acc += da.get(r, c);
      ASSERT_EQ(rs.at(r, "total"), acc);
    }
    auto cs = a.sumRows("total");
    for (const auto& c : da.cols) {
      double acc = 0;
      for (const auto& r : da.rows) acc += da.get(r, c);
      ASSERT_EQ(cs.at("total", c), acc);
    }
    auto ones = a.logical();
    for (const auto& [key, v] : ones.entries()) ASSERT_EQ(v, 1.0);
    ASSERT_EQ(a.scale(2).scale(0.5), a);
    ASSERT_TRUE(a.scale(0).empty());
  }
}

TEST(Assoc, KeySelectors) {
  EXPECT_THROW(KeySelector::interval("b", "a"), InvalidRange);
  auto p = KeySelector::prefix("0000000100|");
  EXPECT_TRUE(p.contains("0000000100|ecopod|zone01.humidity"));
  EXPECT_FALSE(p.contains("0000000101|ecopod|x"));
  EXPECT_FALSE(p.contains("0000000100"));
  auto s = KeySelector::set({"b", "a", "b"});
  EXPECT_EQ(s.keys(), (std::vector<std::string>{"a", "b"}));
  EXPECT_TRUE(KeySelector::all().contains("anything"));
  EXPECT_TRUE(KeySelector::interval("a", "a").contains("a"));
}

TEST(Assoc, SubsrefIntervalIsClosedAtBothEnds) {
  std::vector<Triple> ts = {{"a", "x", 1}, {"b", "x", 2}, {"b\x01", "x", 3}, {"c", "x", 4}, {"ca", "x", 5}};
  auto a = AssociativeArray::fromTriples(ts);
  auto sub = a.subsref(KeySelector::interval("b", "c"), KeySelector::all());
  EXPECT_EQ(sub.rows(), (std::vector<std::string>{"b", "b\x01", "c"}));
}

TEST(Assoc, TsvRoundTripIsExact) {
  std::mt19937 rng(5);
  std::vector<Triple> ts;
  std::uniform_real_distribution<double> u(-1e6, 1e6);
  for (int i = 0; i < 200; ++i) ts.push_back({"row" + std::to_string(i % 17), "col|" + std::to_string(i), u(rng)});
  ts.push_back({"tiny", "v", 5e-324});
  ts.push_back({"huge", "v", 1.7976931348623157e308});
  auto a = AssociativeArray::fromTriples(ts);
  std::stringstream buf;
  writeTsv(buf, a);
  auto back = readTsv(buf);
  EXPECT_EQ(AssociativeArray::fromTriples(back), a);
}

TEST(Assoc, ReadTsvRejectsMalformedLines) {
  std::stringstream missing("r\tc\n");
  EXPECT_THROW(readTsv(missing), Error);
  std::stringstream junk("r\tc\t1.5x\n");
  EXPECT_THROW(readTsv(junk), Error);
  std::stringstream empty("");
  EXPECT_TRUE(readTsv(empty).empty());
}
