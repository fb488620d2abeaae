#include <cmath>
#include <set>

#include <gtest/gtest.h>

#include "attnexit/metrics.hpp"
#include "attnexit/random.hpp"
#include "oracles.hpp"

using namespace attnexit;

namespace {

struct Instance {
  std::vector<std::vector<double>> scores;
  std::vector<Label> labels;
  std::vector<std::set<int>> sets;
};

Instance random_instance(Rng& rng, std::size_t items, std::size_t classes, bool coarse) {
  Instance in;
  for (std::size_t i = 0; i < items; ++i) {
    std::vector<double> s(classes);
    // coarse scores produce many ties
    for (auto& v : s) v = coarse ? static_cast<double>(rng.below(5)) / 4.0 : rng.uniform();
    Label l;
    for (std::size_t c = 0; c < classes; ++c)
      if (rng.bernoulli(0.35)) l.push_back(static_cast<int>(c));
    in.scores.push_back(s);
    in.sets.emplace_back(l.begin(), l.end());
    in.labels.push_back(l);
  }
  if (std::all_of(in.labels.begin(), in.labels.end(), [](const Label& l) { return l.empty(); })) {
    in.labels[0] = {0};
    in.sets[0] = {0};
  }
  return in;
}

}  // namespace

TEST(F1Max, PerfectPredictor) {
  std::vector<std::vector<double>> s = {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
  std::vector<Label> l = {{0}, {1}, {2}};
  EXPECT_DOUBLE_EQ(f1_max(s, l), 1.0);
}

TEST(F1Max, SeparableSingleItem) {
  auto r = f1_max_detail({{0.9, 0.1}}, {{0}});
  EXPECT_DOUBLE_EQ(r.f1, 1.0);
  EXPECT_GT(r.threshold, 0.1);
  EXPECT_LE(r.threshold, 0.9);
}

TEST(F1Max, SeededTenByFourMatchesOracle) {
  Rng rng(2024);
  auto in = random_instance(rng, 10, 4, false);
  std::set<double> taus = {0.0, 1.0};
  for (const auto& s : in.scores) taus.insert(s.begin(), s.end());
  EXPECT_EQ(taus.size(), 42u);  // 40 distinct scores plus 0 and 1
  EXPECT_EQ(f1_max(in.scores, in.labels), oracle::f1_max_brute(in.scores, in.sets));
}

TEST(F1Max, ExactlyEqualsOracleOnSmallInstances) {
  Rng rng(7);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t items = 1 + rng.below(12);
    const std::size_t classes = 2 + rng.below(4);
    auto in = random_instance(rng, items, classes, trial % 2 == 0);
    EXPECT_EQ(f1_max(in.scores, in.labels), oracle::f1_max_brute(in.scores, in.sets)) << "trial " << trial;
  }
}

TEST(F1Max, InvariantUnderMonotoneTransform) {
  Rng rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    auto in = random_instance(rng, 12, 3, trial % 2 == 0);
    auto t = in.scores;
    for (auto& row : t)
      for (auto& v : row) v = std::pow(v, 3.0) * 0.5 + 0.25;
    EXPECT_NEAR(f1_max(in.scores, in.labels), f1_max(t, in.labels), 1e-12);
  }
}

TEST(F1Max, Errors) {
  EXPECT_THROW(f1_max({{0.2, 0.3}}, {{}}), Error);
  EXPECT_THROW(f1_max({}, {}), Error);
  EXPECT_THROW(f1_max({{0.2, 0.3}}, {{0}, {1}}), Error);
}

TEST(Accuracy, Basics) {
  std::vector<int> a = {1, 2, 3};
  std::vector<int> b = {4, 5, 6};
  EXPECT_DOUBLE_EQ(accuracy(a, a), 1.0);
  EXPECT_DOUBLE_EQ(accuracy(a, b), 0.0);
  std::vector<int> c = {1, 2};
  EXPECT_THROW(accuracy(a, c), Error);
}

TEST(Accuracy, SeededMatchesCounting) {
  Rng rng(3);
  std::vector<int> p(500), l(500);
  int hits = 0;
  for (std::size_t i = 0; i < 500; ++i) {
    p[i] = static_cast<int>(rng.below(4));
    l[i] = static_cast<int>(rng.below(4));
    hits += p[i] == l[i];
  }
  EXPECT_DOUBLE_EQ(accuracy(p, l), hits / 500.0);
}

TEST(Accuracy, PerTokenPoolsAllPositions) {
  std::vector<std::vector<int>> p = {{0, 1, 1}, {1}};
  std::vector<std::vector<int>> l = {{0, 1, 0}, {0}};
  EXPECT_DOUBLE_EQ(per_token_accuracy(p, l), 2.0 / 4.0);
  EXPECT_THROW(per_token_accuracy({{0}}, {{0, 1}}), Error);
}

TEST(ExcessAurc, HandEnumeratedFourItems) {
  std::vector<double> conf = {0.9, 0.8, 0.2, 0.1};
  std::vector<double> loss = {1, 0, 0, 1};
  // confidence order keeps losses 1,0,0,1: prefix risks 1, 1/2, 1/3, 1/2
  const double aurc = (1.0 + 0.5 + 1.0 / 3.0 + 0.5) / 4.0;
  // ascending losses 0,0,1,1: prefix risks 0, 0, 1/3, 1/2
  const double opt = (0.0 + 0.0 + 1.0 / 3.0 + 0.5) / 4.0;
  auto r = aurc_detail(conf, loss);
  EXPECT_NEAR(r.aurc, aurc, 1e-12);
  EXPECT_NEAR(r.optimal, opt, 1e-12);
  EXPECT_EQ(r.excess, 0.375);
}

TEST(ExcessAurc, DegenerateCases) {
  std::vector<double> conf = {0.9, 0.7, 0.5, 0.1};
  std::vector<double> inv = {0.0, 0.2, 0.5, 1.0};
  EXPECT_DOUBLE_EQ(excess_aurc(conf, inv), 0.0);
  std::vector<double> flat = {0.3, 0.3, 0.3, 0.3};
  EXPECT_DOUBLE_EQ(excess_aurc(conf, flat), 0.0);
  std::vector<double> shorter = {0.1};
  EXPECT_THROW(excess_aurc(conf, shorter), Error);
}

TEST(ExcessAurc, MatchesPrefixOracleAndMonotoneInvariance) {
  Rng rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng.below(30);
    std::vector<double> conf(n), loss(n);
    for (std::size_t i = 0; i < n; ++i) {
      conf[i] = static_cast<double>(rng.below(6)) / 5.0;
      loss[i] = rng.uniform();
    }
    std::vector<std::size_t> order(n), ideal(n);
    std::iota(order.begin(), order.end(), 0);
    std::iota(ideal.begin(), ideal.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return conf[a] > conf[b]; });
    std::stable_sort(ideal.begin(), ideal.end(), [&](auto a, auto b) { return loss[a] < loss[b]; });
    const double expect = std::max(0.0, oracle::aurc_of_order(loss, order) - oracle::aurc_of_order(loss, ideal));
    EXPECT_NEAR(excess_aurc(conf, loss), expect, 1e-12);
    EXPECT_GE(excess_aurc(conf, loss), 0.0);
    std::vector<double> t(n);
    for (std::size_t i = 0; i < n; ++i) t[i] = std::exp(3 * conf[i]) - 7;
    EXPECT_DOUBLE_EQ(excess_aurc(conf, loss), excess_aurc(t, loss));
  }
}

TEST(ExcessAurc, ZeroWhenConfidenceOrderHasNondecreasingLoss) {
  std::vector<double> conf = {0.1, 0.9, 0.5, 0.5};
  std::vector<double> loss = {0.8, 0.1, 0.3, 0.3};
  EXPECT_DOUBLE_EQ(excess_aurc(conf, loss), 0.0);
}

TEST(TaskMetric, DispatchesByKind) {
  ClassProbs a{{0.9, 0.1, 0.2}};
  ClassProbs b{{0.1, 0.8, 0.7}};
  TaskSpec ml{TaskKind::multi_label, 3, "m"};
  EXPECT_DOUBLE_EQ(task_metric(ml, {a, b}, {{0}, {1, 2}}), 1.0);
  TaskSpec mc{TaskKind::multi_class, 3, "c"};
  EXPECT_DOUBLE_EQ(task_metric(mc, {a, b}, {{0}, {2}}), 0.5);
  TaskSpec pt{TaskKind::per_token, 2, "p"};
  ClassProbs seq{{0.9, 0.1}, {0.4, 0.6}};
  EXPECT_DOUBLE_EQ(task_metric(pt, {seq}, {{0, 0}}), 0.5);
  EXPECT_DOUBLE_EQ(item_loss(mc, a, {0}), 0.0);
  EXPECT_DOUBLE_EQ(item_loss(mc, a, {1}), 1.0);
  EXPECT_DOUBLE_EQ(item_loss(pt, seq, {0, 0}), 0.5);
  ClassProbs half{{0.5, 0.5}};
  EXPECT_NEAR(item_loss({TaskKind::multi_label, 2, "m"}, half, {1}), std::log(2.0), 1e-12);
}
