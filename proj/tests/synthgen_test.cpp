// Copyright (c) 2026 The caspr Authors.
// SPDX-License-Identifier: Apache-2.0

#include <map>

#include <gtest/gtest.h>

#include "caspr/rfm.hpp"
#include "caspr/synthgen.hpp"

using namespace caspr;

TEST(Synth, FixedSeedIsByteIdentical) {
  SynthConfig c;
  c.n_entities = 200;
  auto a = generate(c), b = generate(c);
  EXPECT_EQ(format_csv(a.data), format_csv(b.data));
  EXPECT_EQ(format_csv(a.labels), format_csv(b.labels));
  c.seed = 8;
  EXPECT_NE(format_csv(generate(c).data), format_csv(a.data));
}

TEST(Synth, LabelBalance) {
  for (int n : {2, 3, 101, 2000}) {
    SynthConfig c;
    c.n_entities = n;
    auto ds = generate(c);
    ASSERT_EQ(ds.labels.rows.size(), static_cast<std::size_t>(n));
    int pos = 0;
    for (const auto& r : ds.labels.rows) pos += r[1] == "1";
    EXPECT_LE(std::abs(2 * pos - n), 2) << n;
  }
}

TEST(Synth, AmountOrderFollowsLabel) {
  SynthConfig c;
  c.n_entities = 50;
  auto ds = generate(c);
  std::map<std::string, std::vector<double>> amounts;
  for (const auto& r : ds.data.rows) amounts[r[0]].push_back(std::stod(r[2]));
  for (const auto& r : ds.labels.rows) {
    const auto& a = amounts.at(r[0]);
    if (r[1] == "1")
      EXPECT_TRUE(std::is_sorted(a.rbegin(), a.rend()));
    else
      EXPECT_TRUE(std::is_sorted(a.begin(), a.end()));
  }
}

TEST(Synth, MonetaryStatisticsCarryNoLabelInformation) {
  SynthConfig c;
  c.n_entities = 2000;
  auto ds = generate(c);
  auto rows = rfm_table(ds.data, SchemaSpec::from_json(ds.schema));
  std::map<std::string, int> label;
  for (const auto& r : ds.labels.rows) label[r[0]] = std::stoi(r[1]);
  for (std::size_t k = 11; k <= 14; ++k) {  // per-activity amount min, max, mean, std
    double sum[2] = {0, 0}, n[2] = {0, 0}, all = 0, all2 = 0;
    for (const auto& r : rows) {
      const int y = label.at(r.entity);
      sum[y] += r.features[k];
      n[y] += 1;
      all += r.features[k];
      all2 += r.features[k] * r.features[k];
    }
    const double N = n[0] + n[1], mean = all / N, sd = std::sqrt(all2 / N - mean * mean);
    EXPECT_LT(std::abs(sum[1] / n[1] - sum[0] / n[0]), 0.05 * sd) << rfm_feature_names()[k];
  }
}

TEST(Synth, NoSignalKeepsDrawOrder) {
  SynthConfig c;
  c.n_entities = 40;
  c.signal = SignalKind::none;
  auto ds = generate(c);
  std::map<std::string, std::vector<double>> amounts;
  for (const auto& r : ds.data.rows) amounts[r[0]].push_back(std::stod(r[2]));
  int monotone = 0;
  for (const auto& [id, a] : amounts)
    monotone += std::is_sorted(a.begin(), a.end()) || std::is_sorted(a.rbegin(), a.rend());
  EXPECT_LT(monotone, 20);
}

TEST(Synth, SchemaRoundTripsThroughIngest) {
  auto ds = generate(SynthConfig{});
  auto spec = SchemaSpec::from_json(ds.schema);
  ASSERT_TRUE(spec.monetary);
  EXPECT_EQ(*spec.monetary, "amount");
  EXPECT_EQ(spec.columns.size(), ds.data.header.size());
  EXPECT_THROW(SynthConfig::from_json({{"n_entities", 1}}), ConfigError);
  EXPECT_THROW(SynthConfig::from_json({{"signal", "loud"}}), ConfigError);
}
