#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <regex>

#include "kstl/core/rng.hpp"
#include "kstl/metrics/table.hpp"
#include "kstl/metrics/votes.hpp"

using namespace kstl;
using namespace kstl::metrics;

namespace {

std::vector<std::string> keys(std::size_t n) {
  std::vector<std::string> k;
  for (std::size_t i = 0; i < n; ++i) k.push_back("k" + std::to_string(i));
  return k;
}

ConfusionMatrix from_counts(std::vector<std::vector<std::size_t>> counts) {
  return {keys(counts.size()), std::move(counts)};
}

// Per-sample reference: counts true/false positives straight from the
// prediction and label lists, without a confusion matrix.
std::array<double, 4> brute_force(const std::vector<int>& pred, const std::vector<int>& truth, int classes) {
  double correct = 0, p = 0, r = 0, f = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == truth[i];
  for (int c = 0; c < classes; ++c) {
    double tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      if (pred[i] == c && truth[i] == c) tp += 1;
      if (pred[i] == c && truth[i] != c) fp += 1;
      if (pred[i] != c && truth[i] == c) fn += 1;
    }
    const double pc = tp + fp > 0 ? tp / (tp + fp) : 0;
    const double rc = tp + fn > 0 ? tp / (tp + fn) : 0;
    p += pc;
    r += rc;
    f += pc + rc > 0 ? 2 * pc * rc / (pc + rc) : 0;
  }
  return {correct / double(pred.size()), p / classes, r / classes, f / classes};
}

}  // namespace

TEST(Confusion, PerfectPredictionsAreDiagonal) {
  std::vector<int> y{0, 1, 2, 2, 1, 0, 0};
  const auto cm = confusion(y, y, keys(3));
  EXPECT_EQ(cm.counts, (std::vector<std::vector<std::size_t>>{{3, 0, 0}, {0, 2, 0}, {0, 0, 2}}));
  EXPECT_EQ(cm.total(), 7u);
}

TEST(Confusion, OrderInvariantAndPermutationConjugates) {
  Rng rng(3);
  std::vector<int> p(200), t(200);
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = int(rng.index(4));
    t[i] = int(rng.index(4));
  }
  const auto cm = confusion(p, t, keys(4));
  std::vector<std::size_t> order(p.size());
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  std::vector<int> p2, t2;
  for (auto i : order) {
    p2.push_back(p[i]);
    t2.push_back(t[i]);
  }
  EXPECT_EQ(confusion(p2, t2, keys(4)), cm);

  const std::vector<int> pi{2, 0, 3, 1};
  std::vector<int> p3, t3;
  for (std::size_t i = 0; i < p.size(); ++i) {
    p3.push_back(pi[p[i]]);
    t3.push_back(pi[t[i]]);
  }
  const auto cp = confusion(p3, t3, keys(4));
  for (int a = 0; a < 4; ++a)
    for (int b = 0; b < 4; ++b) EXPECT_EQ(cp.at(pi[a], pi[b]), cm.at(a, b));
  // Macro metrics do not care which index a class has.
  const auto m1 = compute_metrics(cm), m2 = compute_metrics(cp);
  for (int k = 0; k < 4; ++k) EXPECT_NEAR(m1.as_array()[k], m2.as_array()[k], 1e-15);
}

TEST(Confusion, Errors) {
  std::vector<int> a{0, 1}, b{0};
  EXPECT_THROW(confusion(a, b, keys(2)), DataError);
  std::vector<int> bad{0, 5};
  EXPECT_THROW(confusion(bad, a, keys(2)), DataError);
  EXPECT_THROW(compute_metrics(from_counts({{0, 0}, {0, 0}})), DataError);
  EXPECT_THROW(compute_metrics(ConfusionMatrix{}), DataError);
}

TEST(Metrics, IdentityIsPerfect) {
  std::vector<std::vector<std::size_t>> c(6, std::vector<std::size_t>(6, 0));
  for (int i = 0; i < 6; ++i) c[i][i] = 10;
  const auto m = compute_metrics(from_counts(c));
  for (double v : m.as_array()) EXPECT_DOUBLE_EQ(v, 1.0);
  EXPECT_TRUE(m.flags.empty());
}

TEST(Metrics, TwoClassHandFixture) {
  const auto m = compute_metrics(from_counts({{8, 2}, {3, 7}}));
  EXPECT_DOUBLE_EQ(m.accuracy, 0.75);
  EXPECT_DOUBLE_EQ(m.per_class[0].precision, 8.0 / 11);
  EXPECT_DOUBLE_EQ(m.per_class[0].recall, 0.8);
  EXPECT_DOUBLE_EQ(m.per_class[1].precision, 7.0 / 9);
  EXPECT_DOUBLE_EQ(m.per_class[1].recall, 0.7);
  EXPECT_NEAR(m.precision, (8.0 / 11 + 7.0 / 9) / 2, 1e-15);
  EXPECT_NEAR(m.precision, 0.7525, 5e-5);
  EXPECT_NEAR(m.recall, 0.75, 1e-15);
}

TEST(Metrics, NeverPredictedClassIsZeroAndFlagged) {
  const auto m = compute_metrics(from_counts({{5, 0, 1}, {2, 0, 2}, {0, 0, 4}}));
  EXPECT_EQ(m.per_class[1].precision, 0.0);
  EXPECT_EQ(m.per_class[1].f1, 0.0);
  for (double v : m.as_array()) EXPECT_FALSE(std::isnan(v));
  ASSERT_EQ(m.flags.size(), 1u);
  EXPECT_NE(m.flags[0].find("never predicted"), std::string::npos);
}

TEST(Metrics, AbsentClassCountsAsZero) {
  const auto m = compute_metrics(from_counts({{4, 0, 0}, {0, 4, 0}, {0, 0, 0}}));
  EXPECT_DOUBLE_EQ(m.precision, 2.0 / 3);
  EXPECT_NE(m.flags.at(0).find("absent"), std::string::npos);
}

TEST(Metrics, OracleEquivalenceOnRandomDraws) {
  Rng rng(2024);
  double worst = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const int c = 2 + int(rng.index(6));
    const std::size_t n = 1 + rng.index(60);
    std::vector<int> p(n), t(n);
    for (std::size_t i = 0; i < n; ++i) {
      t[i] = int(rng.index(c));
      p[i] = rng.bernoulli(0.5) ? t[i] : int(rng.index(c));
    }
    const auto got = compute_metrics(confusion(p, t, keys(c))).as_array();
    const auto want = brute_force(p, t, c);
    for (int k = 0; k < 4; ++k) worst = std::max(worst, std::abs(got[k] - want[k]));
  }
  EXPECT_LE(worst, 1e-12);
}

TEST(Metrics, BalancedBinaryMacroRecallEqualsAccuracy) {
  for (std::size_t n = 1; n <= 8; ++n)
    for (std::size_t a = 0; a <= n; ++a)
      for (std::size_t b = 0; b <= n; ++b) {
        const auto m = compute_metrics(from_counts({{a, n - a}, {n - b, b}}));
        EXPECT_NEAR(m.recall, m.accuracy, 1e-15) << n << ' ' << a << ' ' << b;
      }
}

TEST(Aggregate, FormatsMeanAndSampleStd) {
  auto run = [](double acc) {
    MetricValues m;
    m.accuracy = m.precision = m.recall = m.f1 = acc;
    return m;
  };
  EXPECT_EQ(aggregate({run(0.8), run(0.8), run(0.8)}).formatted(0), "0.800±0.000");
  const auto r = aggregate({run(0.7), run(0.9)});
  EXPECT_EQ(r.formatted(0), "0.800±0.141");
  EXPECT_NEAR(r.summary[0].stddev, std::sqrt(0.02), 1e-15);
  EXPECT_EQ(format_pm(0.832, 0.012), "0.832±0.012");
  EXPECT_TRUE(std::regex_match(format_pm(0.9041, 0.0478), std::regex("[01]\\.[0-9]{3}±[01]\\.[0-9]{3}")));
  const auto single = aggregate({run(0.6)});
  EXPECT_EQ(single.summary[0].stddev, 0.0);
  ASSERT_FALSE(single.flags.empty());
  EXPECT_NE(single.flags[0].find("single run"), std::string::npos);
  EXPECT_THROW(aggregate({}), DataError);
}

TEST(Table, CsvAndTextShape) {
  MetricValues m;
  m.accuracy = m.precision = m.recall = m.f1 = 0.5;
  std::vector<TableCell> cells;
  for (const char* subset : {"surface", "section", "mixed"})
    for (const char* s : {"No TL", "No TL", "HeTL only", "HeTL only", "HeTL+HoTL"})
      cells.push_back({subset, s, "A", aggregate({m, m}), ""});
  cells.back().report.reset();
  cells.back().error = "boom, failed";
  const auto csv = table_csv(cells);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 16);
  EXPECT_NE(csv.find("mixed,HeTL+HoTL,A,failed,failed,failed,failed,0,boom  failed"), std::string::npos);
  const auto text = table_text(cells);
  EXPECT_NE(text.find("0.500±0.000"), std::string::npos);
  EXPECT_EQ(table_json(cells)["cells"].size(), 15u);
}

TEST(ImageVote, MajorityTieBreakAndDuplicates) {
  std::vector<PatchVote> v{
      {"img1", "p1", 0, 0, {0.9, 0.1}},
      {"img1", "p2", 0, 1, {0.4, 0.6}},
      {"img1", "p3", 0, 0, {0.8, 0.2}},
      // p4 and its upsampled copy count once, leaving a 1-1 tie broken by score.
      {"img2", "p4", 1, 1, {0.45, 0.55}},
      {"img2", "p4", 1, 1, {0.45, 0.55}},
      {"img2", "p5", 1, 0, {0.9, 0.1}},
  };
  const auto r = vote_by_image(v, 2);
  ASSERT_EQ(r.size(), 2u);
  EXPECT_EQ(r[0].image_id, "img1");
  EXPECT_EQ(r[0].predicted, 0);
  EXPECT_EQ(r[0].patches, 3u);
  EXPECT_EQ(r[1].predicted, 0);
  EXPECT_EQ(r[1].patches, 2u);
  v.push_back({"img2", "p6", 0, 0, {1, 0}});
  EXPECT_THROW(vote_by_image(v, 2), DataError);
}
