// Copyright (c) 2026 The caspr Authors.
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "caspr/metrics.hpp"

using namespace caspr;

namespace {

// O(n^2) pair counting, independent of the rank formulation.
double auroc_pairs(const std::vector<double>& s, const std::vector<double>& y) {
  double num = 0, den = 0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (y[i] == 1 && y[j] == 0) {
        num += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
        den += 1;
      }
  return num / den;
}

RankingCase ranked(std::vector<std::string> ids, std::set<std::string> rel) {
  RankingCase c;
  c.entity = "e";
  double s = static_cast<double>(ids.size());
  for (auto& id : ids) c.scored.emplace_back(id, s--);
  c.relevant = std::move(rel);
  return c;
}

}  // namespace

TEST(Auroc, Fixtures) {
  EXPECT_NEAR(auroc(std::vector<double>{0.1, 0.4, 0.35, 0.8}, std::vector<double>{0, 0, 1, 1}), 0.75, 1e-12);
  EXPECT_EQ(auroc(std::vector<double>{0.1, 0.2, 0.8, 0.9}, std::vector<double>{0, 0, 1, 1}), 1.0);
  EXPECT_EQ(auroc(std::vector<double>{0.3, 0.3, 0.3}, std::vector<double>{0, 1, 1}), 0.5);
}

TEST(Auroc, SingleClassIsLabelError) {
  EXPECT_THROW(auroc(std::vector<double>{0.1, 0.2}, std::vector<double>{1, 1}), LabelError);
  EXPECT_THROW(auroc(std::vector<double>{0.1, 0.2}, std::vector<double>{0, 2}), LabelError);
}

TEST(Auroc, MatchesPairOracleWithTies) {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> score(0, 6);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + rng() % 30;
    std::vector<double> s(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = score(rng) / 3.0;
      y[i] = static_cast<double>(rng() % 2);
    }
    y[0] = 0;
    y[1] = 1;
    EXPECT_NEAR(auroc(s, y), auroc_pairs(s, y), 1e-12);
  }
}

TEST(Auroc, MonotoneInvarianceAndComplement) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n(0, 1);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> s(40), y(40), t(40), neg(40);
    for (std::size_t i = 0; i < 40; ++i) {
      s[i] = n(rng);
      y[i] = i % 2;
      t[i] = std::exp(3 * s[i]) + 7;
      neg[i] = -s[i];
    }
    EXPECT_NEAR(auroc(s, y), auroc(t, y), 1e-12);
    EXPECT_NEAR(auroc(s, y) + auroc(neg, y), 1.0, 1e-12);
  }
}

TEST(F1, Fixtures) {
  std::vector<double> y{1, 0, 1, 0};
  EXPECT_EQ(f1_positive(std::vector<double>{0.9, 0.1, 0.8, 0.2}, y), 1.0);
  EXPECT_EQ(f1_positive(std::vector<double>{0.1, 0.1, 0.1, 0.1}, y), 0.0);
  // P = 0.5, R = 1
  EXPECT_NEAR(f1_positive(std::vector<double>{0.9, 0.9, 0.9, 0.9}, y), 2.0 / 3.0, 1e-12);
}

TEST(Rmse, Fixtures) {
  EXPECT_EQ(rmse(std::vector<double>{1, 2}, std::vector<double>{1, 2}), 0.0);
  EXPECT_NEAR(rmse(std::vector<double>{3, 5, 7}, std::vector<double>{1, 3, 5}), 2.0, 1e-12);
  EXPECT_NEAR(rmse(std::vector<double>{1, 2}, std::vector<double>{3, 2}), std::sqrt(2.0), 1e-12);
}

TEST(Ranking, SingleRelevantAtTop) {
  auto r = ranking_metrics({ranked({"a", "b", "c"}, {"a"})});
  EXPECT_EQ(r.map, 1.0);
  EXPECT_EQ(r.prec1, 1.0);
  EXPECT_EQ(r.success5_count, 1.0);
  EXPECT_EQ(r.success5_hit, 1.0);
  EXPECT_EQ(r.ndcg3, 1.0);
}

TEST(Ranking, NdcgHandExample) {
  auto r = ranking_metrics({ranked({"a", "b", "c", "d"}, {"a", "c"})});
  EXPECT_NEAR(r.ndcg3, (1.0 + 0.5) / (1.0 + 1.0 / std::log2(3.0)), 1e-12);
  EXPECT_NEAR(r.ndcg3, 0.9197, 5e-5);
  EXPECT_NEAR(r.map, (1.0 + 2.0 / 3.0) / 2.0, 1e-12);
  EXPECT_EQ(r.success5_count, 2.0);
  EXPECT_EQ(r.success5_hit, 1.0);
}

TEST(Ranking, SuccessCountCanExceedOne) {
  auto r = ranking_metrics({ranked({"a", "b", "c"}, {"a", "b", "c"}), ranked({"a", "b"}, {"z"})});
  EXPECT_EQ(r.success5_count, 1.5);
  EXPECT_EQ(r.success5_hit, 0.5);
  EXPECT_EQ(r.map, 0.5);
}

TEST(Ranking, EmptyRelevantIsCaseError) {
  EXPECT_THROW(ranking_metrics({ranked({"a"}, {})}), CaseError);
  EXPECT_THROW(ranking_metrics({}), CaseError);
}

TEST(Ranking, BoundsAndReversal) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 3 + rng() % 10, k = 1 + rng() % n;
    std::vector<std::string> ids;
    for (std::size_t i = 0; i < n; ++i) ids.push_back("i" + std::to_string(i));
    std::set<std::string> rel(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(k));
    auto top = ranking_metrics({ranked(ids, rel)});
    std::reverse(ids.begin(), ids.end());
    auto rev = ranking_metrics({ranked(ids, rel)});
    for (double v : {top.map, top.prec1, top.ndcg3, rev.map, rev.prec1, rev.ndcg3}) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
    EXPECT_LE(top.success5_count, 5.0);
    EXPECT_LE(rev.map, top.map);
    EXPECT_LE(rev.ndcg3, top.ndcg3);
    EXPECT_LE(rev.prec1, top.prec1);
    EXPECT_LE(rev.success5_count, top.success5_count);
  }
}

TEST(RankItems, OrthonormalItems) {
  std::vector<ItemVector> items{{"x", {1, 0, 0}}, {"y", {0, 1, 0}}, {"z", {0, 0, 1}}};
  auto cases = rank_items({{"e", {0, 1, 0}}}, items);
  EXPECT_EQ(cases[0].scored[0].first, "y");
}

TEST(RankItems, IdenticalItemsFallBackToIdOrder) {
  std::vector<ItemVector> items{{"c", {1, 1}}, {"a", {1, 1}}, {"b", {1, 1}}};
  auto cases = rank_items({{"e", {0.3, -2}}}, items);
  EXPECT_EQ(cases[0].scored[0].first, "a");
  EXPECT_EQ(cases[0].scored[1].first, "b");
  EXPECT_EQ(cases[0].scored[2].first, "c");
}

TEST(RankItems, HandDotProducts) {
  // scores: p = 1*2 + 2*0.5 = 3, q = -1*2 + 4*0.5 = 0, r = 0.5*2 + 5*0.5 = 3.5
  std::vector<ItemVector> items{{"p", {1, 2}}, {"q", {-1, 4}}, {"r", {0.5, 5}}};
  auto c = rank_items({{"e", {2, 0.5}}}, items)[0];
  ASSERT_EQ(c.scored.size(), 3u);
  EXPECT_EQ(c.scored[0], (std::pair<std::string, double>{"r", 3.5}));
  EXPECT_EQ(c.scored[1], (std::pair<std::string, double>{"p", 3.0}));
  EXPECT_EQ(c.scored[2], (std::pair<std::string, double>{"q", 0.0}));
}

TEST(RankItems, WidthMismatchNeedsProjection) {
  std::vector<ItemVector> items{{"a", {1, 0}}};
  EXPECT_THROW(rank_items({{"e", {1, 0, 0}}}, items), SchemaMismatch);
  // exact linear relation is recovered by the projection
  std::vector<std::pair<std::vector<double>, std::vector<double>>> pairs;
  for (double u : {1.0, 2.0, -1.0})
    for (double v : {0.5, -3.0}) pairs.push_back({{u, v}, {u, v, u + v}});
  auto P = fit_item_projection(pairs, 0.0 + 1e-12);
  auto mapped = P.apply(std::vector<double>{2.0, 1.0});
  EXPECT_NEAR(mapped[0], 2.0, 1e-9);
  EXPECT_NEAR(mapped[2], 3.0, 1e-9);
  EXPECT_NO_THROW(rank_items({{"e", {1, 0, 0}}}, items, &P));
}

TEST(Probe, SeparableTwoPoints) {
  FeatureMatrix X{{-1.0}, {1.0}};
  std::vector<double> y{0, 1};
  auto p = train_linear_probe(X, y, ProbeTask::binary, 1);
  EXPECT_LT(p.predict(X[0]), 0.5);
  EXPECT_GT(p.predict(X[1]), 0.5);
}

TEST(Probe, UninformativeFeaturePredictsBaseRate) {
  FeatureMatrix X(8, std::vector<double>{3.0});
  std::vector<double> y{1, 0, 0, 0, 1, 0, 0, 0};
  auto p = train_linear_probe(X, y, ProbeTask::binary, 1);
  EXPECT_NEAR(p.predict(X[0]), 0.25, 1e-6);
  std::vector<double> c(8, 4.5);
  auto r = train_linear_probe(X, c, ProbeTask::regression, 1);
  EXPECT_NEAR(r.predict(X[0]), 4.5, 1e-6);
}

TEST(Probe, RegressionRecoversLine) {
  FeatureMatrix X;
  std::vector<double> y;
  for (int i = -10; i <= 10; ++i) {
    X.push_back({i * 0.3});
    y.push_back(2 * i * 0.3 + 1);
  }
  auto p = train_linear_probe(X, y, ProbeTask::regression, 3);
  auto [w, b] = p.raw_weights();
  EXPECT_NEAR(w[0], 2.0, 1e-3);
  EXPECT_NEAR(b, 1.0, 1e-3);
}

TEST(Probe, DeterministicAndValidated) {
  FeatureMatrix X{{0.1, 2}, {0.4, 1}, {0.9, -1}, {0.2, 0.5}};
  std::vector<double> y{0, 0, 1, 1};
  auto a = train_linear_probe(X, y, ProbeTask::binary, 9), b = train_linear_probe(X, y, ProbeTask::binary, 9);
  EXPECT_EQ(a.w, b.w);
  EXPECT_THROW(train_linear_probe(X, std::vector<double>{1, 1, 1, 1}, ProbeTask::binary, 9), LabelError);
  EXPECT_THROW(train_linear_probe({{1.0}}, std::vector<double>{1}, ProbeTask::regression, 9), LabelError);
}

TEST(Evaluate, SplitIsStratifiedAndReportIsCsv) {
  LabeledSet s;
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n(0, 1);
  for (int i = 0; i < 100; ++i) {
    s.entities.push_back("e" + std::to_string(i));
    const double y = i % 2;
    s.features.push_back({y * 2 + n(rng)});
    s.labels.push_back(y);
  }
  auto [tr, te] = train_test_split(s, ProbeTask::binary, 0.3, 1);
  EXPECT_EQ(tr.size() + te.size(), 100u);
  EXPECT_EQ(te.size(), 30u);
  auto report = evaluate_probe(s, ProbeTask::binary, 1);
  EXPECT_GT(report.at("auroc"), 0.8);
  EXPECT_EQ(report.to_csv().rfind("metric,value\nn_train,70\nn_test,30\nauroc,", 0), 0u);
}

TEST(Evaluate, JoinLabels) {
  CsvTable f{{"entity", "a", "b"}, {{"x", "1", "2"}, {"y", "3", "4"}}};
  CsvTable l{{"entity", "label"}, {{"y", "1"}, {"x", "0"}}};
  auto s = join_labels(f, l);
  EXPECT_EQ(s.labels, (std::vector<double>{0, 1}));
  EXPECT_EQ(s.features[1], (std::vector<double>{3, 4}));
  l.rows.pop_back();
  EXPECT_THROW(join_labels(f, l), LabelError);
}
