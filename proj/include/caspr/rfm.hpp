// Copyright (c) 2026 The caspr Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Recency / frequency / monetary baseline features, 19 per entity, in a
// fixed order. Durations are fractional days. Standard deviations divide by
// n. Weekly buckets are ISO weeks (Monday start, UTC) and monthly buckets
// calendar months, spanning the entity's first activity to the reference
// time; empty buckets count as zero.

#pragma once

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "caspr/csv.hpp"
#include "caspr/error.hpp"
#include "caspr/ingest.hpp"

namespace caspr {

inline constexpr std::size_t kRfmWidth = 19;

inline const std::array<std::string, kRfmWidth>& rfm_feature_names() {
  static const std::array<std::string, kRfmWidth> names = {
      "days_since_last",    "days_since_first",   "active_span_days",  "gap_min",           "gap_max",
      "gap_mean",           "gap_std",            "weekly_count_mean", "weekly_count_std",  "monthly_count_mean",
      "monthly_count_std",  "amount_min",         "amount_max",        "amount_mean",       "amount_std",
      "weekly_spend_mean",  "weekly_spend_std",   "monthly_spend_mean", "monthly_spend_std"};
  return names;
}

using RfmVector = std::array<double, kRfmWidth>;

struct Activity {
  std::int64_t ts = 0;
  double amount = 0.0;
  auto operator<=>(const Activity&) const = default;
};

namespace detail {

struct MeanStd {
  double mean = 0, std = 0;
};

inline MeanStd mean_std(std::span<const double> v) {
  if (v.empty()) return {};
  double m = 0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double s = 0;
  for (double x : v) s += (x - m) * (x - m);
  return {m, std::sqrt(s / static_cast<double>(v.size()))};
}

inline std::int64_t floor_div(std::int64_t a, std::int64_t b) { return a / b - ((a % b != 0) && ((a < 0) != (b < 0))); }

// Day 0 (1970-01-01) is a Thursday; ISO weeks start on Monday.
inline std::int64_t iso_week_index(std::int64_t ts) { return floor_div(floor_div(ts, 86400) + 3, 7); }

inline std::int64_t month_index(std::int64_t ts) {
  using namespace std::chrono;
  const year_month_day ymd{sys_days{days{floor_div(ts, 86400)}}};
  return static_cast<std::int64_t>(static_cast<int>(ymd.year())) * 12 + static_cast<unsigned>(ymd.month()) - 1;
}

inline void bucket_stats(std::span<const Activity> acts, std::int64_t reference_ts, std::int64_t (*index)(std::int64_t),
                         MeanStd& counts, MeanStd& spend) {
  const std::int64_t first = index(acts.front().ts), last = index(reference_ts);
  const auto n = static_cast<std::size_t>(last - first + 1);
  std::vector<double> c(n, 0.0), s(n, 0.0);
  for (const auto& a : acts) {
    const auto k = static_cast<std::size_t>(index(a.ts) - first);
    c[k] += 1.0;
    s[k] += a.amount;
  }
  counts = mean_std(c);
  spend = mean_std(s);
}

}  // namespace detail

/// Features of one entity. `acts` may be in any order.
inline RfmVector rfm_features(std::vector<Activity> acts, std::int64_t reference_ts) {
  if (acts.empty()) throw EmptyEntity("entity has no activity rows");
  std::sort(acts.begin(), acts.end());
  if (reference_ts < acts.back().ts) throw ContractViolation("reference time precedes the latest activity");
  constexpr double kDay = 86400.0;
  RfmVector f{};
  const double first = static_cast<double>(acts.front().ts), last = static_cast<double>(acts.back().ts);
  const double ref = static_cast<double>(reference_ts);
  f[0] = (ref - last) / kDay;
  f[1] = (ref - first) / kDay;
  f[2] = (last - first) / kDay;

  std::vector<double> gaps;
  for (std::size_t i = 1; i < acts.size(); ++i) gaps.push_back(static_cast<double>(acts[i].ts - acts[i - 1].ts) / kDay);
  if (!gaps.empty()) {
    f[3] = *std::min_element(gaps.begin(), gaps.end());
    f[4] = *std::max_element(gaps.begin(), gaps.end());
    auto g = detail::mean_std(gaps);
    f[5] = g.mean;
    f[6] = g.std;
  }

  detail::MeanStd wc, ws, mc, ms;
  detail::bucket_stats(acts, reference_ts, detail::iso_week_index, wc, ws);
  detail::bucket_stats(acts, reference_ts, detail::month_index, mc, ms);
  f[7] = wc.mean;
  f[8] = wc.std;
  f[9] = mc.mean;
  f[10] = mc.std;

  std::vector<double> amounts;
  for (const auto& a : acts) amounts.push_back(a.amount);
  f[11] = *std::min_element(amounts.begin(), amounts.end());
  f[12] = *std::max_element(amounts.begin(), amounts.end());
  auto am = detail::mean_std(amounts);
  f[13] = am.mean;
  f[14] = am.std;
  f[15] = ws.mean;
  f[16] = ws.std;
  f[17] = ms.mean;
  f[18] = ms.std;
  return f;
}

struct RfmRow {
  std::string entity;
  RfmVector features;
};

/// One row per entity (sorted by id); reference time = latest ts + 1 day.
inline std::vector<RfmRow> rfm_table(const CsvTable& data, const SchemaSpec& spec) {
  spec.validate();
  if (!spec.monetary) throw SchemaMismatch("RFM features need a monetary column (role \"monetary\")");
  std::string entity_name, ts_name;
  for (const auto& c : spec.columns) {
    if (c.kind == ColumnKind::entity_id) entity_name = c.name;
    if (c.kind == ColumnKind::timestamp) ts_name = c.name;
  }
  const auto ec = data.column(entity_name), tc = data.column(ts_name), mc = data.column(*spec.monetary);
  if (data.rows.empty()) throw EmptyDataset("no activity rows");

  std::map<std::string, std::vector<Activity>> by_entity;
  std::int64_t max_ts = std::numeric_limits<std::int64_t>::min();
  for (std::size_t r = 0; r < data.rows.size(); ++r) {
    const auto& row = data.rows[r];
    Activity a{parse_timestamp(row.at(tc), r), parse_number(row.at(mc), r)};
    max_ts = std::max(max_ts, a.ts);
    by_entity[row.at(ec)].push_back(a);
  }
  const std::int64_t reference = max_ts + 86400;
  std::vector<RfmRow> out;
  out.reserve(by_entity.size());
  for (auto& [id, acts] : by_entity) out.push_back({id, rfm_features(std::move(acts), reference)});
  return out;
}

inline CsvTable rfm_csv(const std::vector<RfmRow>& rows, const std::string& entity_header = "entity") {
  CsvTable t;
  t.header.push_back(entity_header);
  for (const auto& n : rfm_feature_names()) t.header.push_back(n);
  for (const auto& r : rows) {
    std::vector<std::string> row{r.entity};
    for (double v : r.features) row.push_back(format_real(v));
    t.rows.push_back(std::move(row));
  }
  return t;
}

}  // namespace caspr
