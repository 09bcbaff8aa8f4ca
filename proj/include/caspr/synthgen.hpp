// Copyright (c) 2026 The caspr Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Synthetic activity logs with a planted order-only signal.
//
// Entities are generated in pairs sharing one multiset of purchase amounts;
// one member of each pair is a churner (label 1) whose amounts decrease over
// time, the other a retainer whose amounts increase. Per-activity amount
// statistics are therefore identical across the two classes, and
// timestamps, items, channels and statics are drawn independently of the
// label, so any order-invariant aggregate carries no label information.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "caspr/csv.hpp"
#include "caspr/error.hpp"

namespace caspr {

enum class SignalKind { trend_churn, none };

struct SynthConfig {
  int n_entities = 2000;
  int t_mean = 10;
  std::uint64_t seed = 7;
  SignalKind signal = SignalKind::trend_churn;
  int item_vocab = 20;
  int channel_vocab = 4;
  double amount_log_mean = 3.0;
  double amount_log_sd = 0.5;
  double mean_gap_days = 7.0;
  std::int64_t start_ts = 1672531200;  // 2023-01-01T00:00:00Z

  void validate() const {
    if (n_entities < 2) throw ConfigError("n_entities must be >= 2");
    if (t_mean < 2) throw ConfigError("t_mean must be >= 2");
    if (item_vocab < 1 || channel_vocab < 1 || channel_vocab > 8) throw ConfigError("vocab sizes out of range");
    if (!(amount_log_sd >= 0.0) || !(mean_gap_days > 0.0)) throw ConfigError("distribution parameters out of range");
  }

  static SynthConfig from_json(const nlohmann::ordered_json& j) {
    SynthConfig c;
    c.n_entities = j.value("n_entities", c.n_entities);
    c.t_mean = j.value("t_mean", c.t_mean);
    c.seed = j.value("seed", c.seed);
    if (j.contains("signal")) {
      auto s = j.at("signal").get<std::string>();
      if (s == "trend_churn")
        c.signal = SignalKind::trend_churn;
      else if (s == "none")
        c.signal = SignalKind::none;
      else
        throw ConfigError("signal must be trend_churn or none, got '" + s + "'");
    }
    c.item_vocab = j.value("item_vocab", c.item_vocab);
    c.channel_vocab = j.value("channel_vocab", c.channel_vocab);
    c.amount_log_mean = j.value("amount_log_mean", c.amount_log_mean);
    c.amount_log_sd = j.value("amount_log_sd", c.amount_log_sd);
    c.mean_gap_days = j.value("mean_gap_days", c.mean_gap_days);
    c.start_ts = j.value("start_ts", c.start_ts);
    c.validate();
    return c;
  }
};

struct SynthDataset {
  CsvTable data;
  nlohmann::ordered_json schema;
  CsvTable labels;
};

/// Increasing for retainers (label 0), decreasing for churners (label 1).
inline std::vector<double> arrange_amounts(std::vector<double> amounts, int label) {
  std::sort(amounts.begin(), amounts.end());
  if (label == 1) std::reverse(amounts.begin(), amounts.end());
  return amounts;
}

inline std::string format_amount(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

inline SynthDataset generate(const SynthConfig& cfg) {
  cfg.validate();
  static const char* kChannels[] = {"web", "store", "app", "phone", "mail", "kiosk", "partner", "social"};
  static const char* kTiers[] = {"basic", "silver", "gold"};

  std::mt19937_64 rng(cfg.seed);
  std::uniform_int_distribution<int> n_events(std::max(2, cfg.t_mean / 2), std::max(2, cfg.t_mean * 3 / 2));
  std::lognormal_distribution<double> amount(cfg.amount_log_mean, cfg.amount_log_sd);
  std::exponential_distribution<double> gap_days(1.0 / cfg.mean_gap_days);
  std::uniform_real_distribution<double> start_offset_days(0.0, 180.0);
  std::uniform_int_distribution<int> item(1, cfg.item_vocab);
  std::uniform_int_distribution<int> channel(0, cfg.channel_vocab - 1);
  std::uniform_int_distribution<int> age(18, 80);
  std::uniform_int_distribution<int> tier(0, 2);
  std::bernoulli_distribution coin(0.5);

  SynthDataset out;
  out.data.header = {"customer_id", "ts", "amount", "item_id", "channel", "age", "tier"};
  out.labels.header = {"entity", "label"};
  out.schema = {{"columns",
                 {{"customer_id", "entity_id"},
                  {"ts", "timestamp"},
                  {"amount", "numerical"},
                  {"item_id", "categorical"},
                  {"channel", "categorical"},
                  {"age", "static_numerical"},
                  {"tier", "static_categorical"}}},
                {"monetary", "amount"}};

  auto emit_entity = [&](int index, const std::vector<double>& multiset, int label) {
    char id[32];
    std::snprintf(id, sizeof(id), "c%05d", index);
    const auto amounts = cfg.signal == SignalKind::trend_churn ? arrange_amounts(multiset, label) : multiset;
    const std::string age_s = std::to_string(age(rng));
    const std::string tier_s = kTiers[tier(rng)];
    double t_days = start_offset_days(rng);
    for (std::size_t k = 0; k < amounts.size(); ++k) {
      if (k > 0) t_days += gap_days(rng);
      char item_s[32];
      std::snprintf(item_s, sizeof(item_s), "item_%03d", item(rng));
      const auto ts = cfg.start_ts + static_cast<std::int64_t>(std::llround(t_days * 86400.0));
      out.data.rows.push_back(
          {id, std::to_string(ts), format_amount(amounts[k]), item_s, kChannels[channel(rng)], age_s, tier_s});
    }
    out.labels.rows.push_back({id, std::to_string(label)});
  };

  for (int i = 0; i < cfg.n_entities; i += 2) {
    std::vector<double> multiset(static_cast<std::size_t>(n_events(rng)));
    for (auto& a : multiset) a = std::stod(format_amount(amount(rng)));
    const int first_label = coin(rng) ? 1 : 0;
    emit_entity(i, multiset, first_label);
    if (i + 1 < cfg.n_entities) emit_entity(i + 1, multiset, 1 - first_label);
  }
  return out;
}

}  // namespace caspr
