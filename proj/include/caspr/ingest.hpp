// Copyright (c) 2026 The caspr Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "caspr/csv.hpp"
#include "caspr/error.hpp"

namespace caspr {

enum class ColumnKind { entity_id, timestamp, numerical, categorical, static_numerical, static_categorical };

inline std::string_view to_string(ColumnKind kind) {
  switch (kind) {
    case ColumnKind::entity_id: return "entity_id";
    case ColumnKind::timestamp: return "timestamp";
    case ColumnKind::numerical: return "numerical";
    case ColumnKind::categorical: return "categorical";
    case ColumnKind::static_numerical: return "static_numerical";
    case ColumnKind::static_categorical: return "static_categorical";
  }
  return "?";
}

inline ColumnKind column_kind_from_string(std::string_view s) {
  for (auto k : {ColumnKind::entity_id, ColumnKind::timestamp, ColumnKind::numerical, ColumnKind::categorical,
                 ColumnKind::static_numerical, ColumnKind::static_categorical})
    if (to_string(k) == s) return k;
  throw ParseError("unknown column kind '" + std::string(s) + "'");
}

struct ColumnSpec {
  std::string name;
  ColumnKind kind;
  bool operator==(const ColumnSpec&) const = default;
};

/// Declared schema: ordered columns plus an optional monetary column used by
/// the RFM features.
struct SchemaSpec {
  std::vector<ColumnSpec> columns;
  std::optional<std::string> monetary;

  void validate() const {
    std::set<std::string> seen;
    int entity = 0, timestamp = 0;
    for (const auto& c : columns) {
      if (!seen.insert(c.name).second) throw SchemaMismatch("duplicate column name '" + c.name + "'");
      entity += c.kind == ColumnKind::entity_id;
      timestamp += c.kind == ColumnKind::timestamp;
    }
    if (entity != 1) throw SchemaMismatch("schema needs exactly one entity_id column, found " + std::to_string(entity));
    if (timestamp != 1)
      throw SchemaMismatch("schema needs exactly one timestamp column, found " + std::to_string(timestamp));
    if (monetary) {
      auto it = std::find_if(columns.begin(), columns.end(), [&](const ColumnSpec& c) { return c.name == *monetary; });
      if (it == columns.end()) throw SchemaMismatch("monetary column '" + *monetary + "' is not in the schema");
      if (it->kind != ColumnKind::numerical)
        throw SchemaMismatch("monetary column '" + *monetary + "' must be numerical");
    }
  }

  /// Accepts `{"columns": {name: kind | {"kind": k, "role": "monetary"}}, "monetary": name}`
  /// or a bare `{name: kind}` mapping. Key order is column order.
  static SchemaSpec from_json(const nlohmann::ordered_json& doc) {
    const auto& cols = doc.contains("columns") ? doc.at("columns") : doc;
    if (!cols.is_object()) throw ParseError("schema 'columns' must be an object mapping name to kind");
    SchemaSpec spec;
    for (auto it = cols.begin(); it != cols.end(); ++it) {
      const auto& v = it.value();
      if (v.is_string()) {
        spec.columns.push_back({it.key(), column_kind_from_string(v.get<std::string>())});
      } else if (v.is_object() && v.contains("kind")) {
        spec.columns.push_back({it.key(), column_kind_from_string(v.at("kind").get<std::string>())});
        if (v.value("role", std::string{}) == "monetary") spec.monetary = it.key();
      } else {
        throw ParseError("schema entry for '" + it.key() + "' must be a kind string or {\"kind\": ...}");
      }
    }
    if (doc.contains("columns") && doc.contains("monetary")) spec.monetary = doc.at("monetary").get<std::string>();
    spec.validate();
    return spec;
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json cols = nlohmann::ordered_json::object();
    for (const auto& c : columns) cols[c.name] = std::string(to_string(c.kind));
    nlohmann::ordered_json doc{{"columns", cols}};
    if (monetary) doc["monetary"] = *monetary;
    return doc;
  }
};

/// Distinct values of one categorical column. Codes start at 1; 0 is the
/// shared out-of-vocabulary / padding code.
class Vocab {
 public:
  Vocab() = default;
  explicit Vocab(std::vector<std::string> values) {
    for (auto& v : values) add(v);
  }

  void add(const std::string& value) {
    if (index_.emplace(value, static_cast<int>(values_.size()) + 1).second) values_.push_back(value);
  }
  int code(const std::string& value) const {
    auto it = index_.find(value);
    return it == index_.end() ? 0 : it->second;
  }
  const std::vector<std::string>& values() const { return values_; }
  std::size_t size() const { return values_.size(); }

 private:
  std::vector<std::string> values_;
  std::unordered_map<std::string, int> index_;
};

struct NumericStats {
  double mean = 0.0;
  double std = 1.0;
};

/// ceil(sqrt(cardinality)), floored at 1.
inline int embed_dim_for(std::size_t cardinality) {
  if (cardinality <= 1) return 1;
  auto d = static_cast<std::size_t>(std::sqrt(static_cast<double>(cardinality)));
  while (d * d > cardinality) --d;
  while (d * d < cardinality) ++d;
  return static_cast<int>(d);
}

struct FittedSchema {
  std::vector<ColumnSpec> columns;
  std::optional<std::string> monetary;
  std::map<std::string, Vocab> vocab;
  std::map<std::string, NumericStats> stats;
  std::map<std::string, int> embed_dim;

  std::vector<std::string> names_of(ColumnKind kind) const {
    std::vector<std::string> out;
    for (const auto& c : columns)
      if (c.kind == kind) out.push_back(c.name);
    return out;
  }
  std::string name_of(ColumnKind kind) const { return names_of(kind).at(0); }
  std::vector<std::string> numeric_columns() const { return names_of(ColumnKind::numerical); }
  std::vector<std::string> categorical_columns() const { return names_of(ColumnKind::categorical); }
  std::vector<std::string> static_numeric_columns() const { return names_of(ColumnKind::static_numerical); }
  std::vector<std::string> static_categorical_columns() const { return names_of(ColumnKind::static_categorical); }

  /// 1 (position) + numerics + categorical embedding widths.
  int step_width() const {
    int w = 1 + static_cast<int>(numeric_columns().size());
    for (const auto& c : categorical_columns()) w += embed_dim.at(c);
    return w;
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["schema"] = SchemaSpec{columns, monetary}.to_json();
    nlohmann::ordered_json v = nlohmann::ordered_json::object(), s = nlohmann::ordered_json::object(),
                           e = nlohmann::ordered_json::object();
    for (const auto& [name, vocab] : this->vocab) v[name] = vocab.values();
    for (const auto& [name, st] : stats) s[name] = {{"mean", st.mean}, {"std", st.std}};
    for (const auto& [name, d] : embed_dim) e[name] = d;
    j["vocab"] = v;
    j["stats"] = s;
    j["embed_dim"] = e;
    return j;
  }

  static FittedSchema from_json(const nlohmann::ordered_json& j) {
    FittedSchema f;
    auto spec = SchemaSpec::from_json(j.at("schema"));
    f.columns = spec.columns;
    f.monetary = spec.monetary;
    for (auto it = j.at("vocab").begin(); it != j.at("vocab").end(); ++it)
      f.vocab[it.key()] = Vocab(it.value().get<std::vector<std::string>>());
    for (auto it = j.at("stats").begin(); it != j.at("stats").end(); ++it)
      f.stats[it.key()] = {it.value().at("mean").get<double>(), it.value().at("std").get<double>()};
    for (auto it = j.at("embed_dim").begin(); it != j.at("embed_dim").end(); ++it)
      f.embed_dim[it.key()] = it.value().get<int>();
    return f;
  }
};

// ---------------------------------------------------------------------------
// Field parsing

inline double parse_number(std::string_view s, std::size_t row) {
  while (!s.empty() && s.front() == ' ') s.remove_prefix(1);
  while (!s.empty() && s.back() == ' ') s.remove_suffix(1);
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || res.ec != std::errc{} || res.ptr != s.data() + s.size() || !std::isfinite(v))
    throw ParseError("cannot parse number '" + std::string(s) + "'", row);
  return v;
}

/// Integer epoch seconds, or ISO-8601 `YYYY-MM-DD[THH:MM[:SS]][Z]` (UTC).
inline std::int64_t parse_timestamp(std::string_view s, std::size_t row) {
  std::int64_t v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (!s.empty() && res.ec == std::errc{} && res.ptr == s.data() + s.size()) return v;

  auto bad = [&]() -> std::int64_t { throw ParseError("cannot parse timestamp '" + std::string(s) + "'", row); };
  auto num = [&](std::size_t pos, std::size_t len) {
    int out = 0;
    if (pos + len > s.size()) bad();
    auto r = std::from_chars(s.data() + pos, s.data() + pos + len, out);
    if (r.ec != std::errc{} || r.ptr != s.data() + pos + len) bad();
    return out;
  };
  if (s.size() < 10 || s[4] != '-' || s[7] != '-') return bad();
  using namespace std::chrono;
  year_month_day ymd{year{num(0, 4)}, month{static_cast<unsigned>(num(5, 2))}, day{static_cast<unsigned>(num(8, 2))}};
  if (!ymd.ok()) return bad();
  std::int64_t secs = sys_days{ymd}.time_since_epoch().count() * 86400LL;
  std::size_t pos = 10;
  if (pos < s.size() && (s[pos] == 'T' || s[pos] == ' ')) {
    int hh = num(pos + 1, 2);
    if (pos + 3 >= s.size() || s[pos + 3] != ':') return bad();
    int mm = num(pos + 4, 2);
    int ss = 0;
    pos += 6;
    if (pos < s.size() && s[pos] == ':') {
      ss = num(pos + 1, 2);
      pos += 3;
    }
    if (hh > 23 || mm > 59 || ss > 60) return bad();
    secs += hh * 3600LL + mm * 60LL + ss;
  }
  if (pos < s.size() && s[pos] == 'Z') ++pos;
  if (pos != s.size()) return bad();
  return secs;
}

// ---------------------------------------------------------------------------
// Fitting

/// Incremental fitter. Shards may be observed by separate accumulators and
/// merged in file order; the result equals a single pass over the
/// concatenated input (vocab exactly, moments up to rounding).
class SchemaAccumulator {
 public:
  explicit SchemaAccumulator(SchemaSpec spec) : spec_(std::move(spec)) {
    spec_.validate();
    for (const auto& c : spec_.columns) {
      if (c.kind == ColumnKind::categorical || c.kind == ColumnKind::static_categorical) vocab_[c.name];
      if (c.kind == ColumnKind::numerical || c.kind == ColumnKind::static_numerical) moments_[c.name];
    }
  }

  /// Observe every row of `table`. `row_offset` shifts reported row indices.
  void observe(const CsvTable& table, std::size_t row_offset = 0) {
    std::vector<std::size_t> idx;
    for (const auto& c : spec_.columns) idx.push_back(table.column(c.name));
    for (std::size_t r = 0; r < table.rows.size(); ++r) {
      const auto& row = table.rows[r];
      if (row.size() != table.header.size())
        throw ParseError("expected " + std::to_string(table.header.size()) + " fields, got " +
                             std::to_string(row.size()),
                         row_offset + r);
      for (std::size_t k = 0; k < spec_.columns.size(); ++k) {
        const auto& c = spec_.columns[k];
        const auto& field = row[idx[k]];
        switch (c.kind) {
          case ColumnKind::entity_id:
            if (field.empty()) throw ParseError("empty entity id", row_offset + r);
            break;
          case ColumnKind::timestamp: parse_timestamp(field, row_offset + r); break;
          case ColumnKind::numerical:
          case ColumnKind::static_numerical: moments_[c.name].push(parse_number(field, row_offset + r)); break;
          case ColumnKind::categorical:
          case ColumnKind::static_categorical: vocab_[c.name].add(field); break;
        }
      }
    }
    rows_ += table.rows.size();
  }

  void merge(const SchemaAccumulator& later) {
    if (!(later.spec_.columns == spec_.columns)) throw SchemaMismatch("cannot merge accumulators of different schemas");
    for (auto& [name, v] : vocab_)
      for (const auto& value : later.vocab_.at(name).values()) v.add(value);
    for (auto& [name, m] : moments_) m.merge(later.moments_.at(name));
    rows_ += later.rows_;
  }

  FittedSchema finish() const {
    if (rows_ == 0) throw EmptyDataset("no data rows to fit the schema on");
    FittedSchema f;
    f.columns = spec_.columns;
    f.monetary = spec_.monetary;
    for (const auto& [name, v] : vocab_) {
      f.vocab[name] = v;
      f.embed_dim[name] = embed_dim_for(v.size());
    }
    for (const auto& [name, m] : moments_) {
      double sd = std::sqrt(m.m2 / static_cast<double>(m.n));
      f.stats[name] = {m.mean, sd > 0.0 ? sd : 1.0};
    }
    return f;
  }

 private:
  // Welford / Chan running moments, population convention.
  struct Moments {
    double n = 0, mean = 0, m2 = 0;
    void push(double x) {
      n += 1;
      double d = x - mean;
      mean += d / n;
      m2 += d * (x - mean);
    }
    void merge(const Moments& o) {
      if (o.n == 0) return;
      double total = n + o.n;
      double d = o.mean - mean;
      mean += d * o.n / total;
      m2 += o.m2 + d * d * n * o.n / total;
      n = total;
    }
  };

  SchemaSpec spec_;
  std::map<std::string, Vocab> vocab_;
  std::map<std::string, Moments> moments_;
  std::size_t rows_ = 0;
};

inline FittedSchema fit_schema(const CsvTable& table, const SchemaSpec& spec) {
  SchemaAccumulator acc(spec);
  acc.observe(table);
  return acc.finish();
}

// ---------------------------------------------------------------------------
// Encoding

struct ActivityRow {
  std::string entity;
  std::int64_t ts = 0;
  std::vector<double> numeric;  // z-scored
  std::vector<int> codes;
  std::vector<double> static_numeric;  // z-scored
  std::vector<int> static_codes;
};

inline std::vector<ActivityRow> encode_rows(const CsvTable& table, const FittedSchema& fitted) {
  auto col = [&](const std::string& name) { return table.column(name); };
  auto cols = [&](const std::vector<std::string>& names) {
    std::vector<std::size_t> out;
    for (const auto& n : names) out.push_back(col(n));
    return out;
  };
  const auto num_names = fitted.numeric_columns(), cat_names = fitted.categorical_columns();
  const auto snum_names = fitted.static_numeric_columns(), scat_names = fitted.static_categorical_columns();
  const std::size_t entity_col = col(fitted.name_of(ColumnKind::entity_id));
  const std::size_t ts_col = col(fitted.name_of(ColumnKind::timestamp));
  const auto num = cols(num_names), cat = cols(cat_names), snum = cols(snum_names), scat = cols(scat_names);

  std::vector<ActivityRow> out;
  out.reserve(table.rows.size());
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const auto& row = table.rows[r];
    if (row.size() != table.header.size())
      throw ParseError("expected " + std::to_string(table.header.size()) + " fields, got " + std::to_string(row.size()),
                       r);
    ActivityRow a;
    a.entity = row[entity_col];
    if (a.entity.empty()) throw ParseError("empty entity id", r);
    a.ts = parse_timestamp(row[ts_col], r);
    auto zscore = [&](const std::string& name, std::size_t c) {
      const auto& st = fitted.stats.at(name);
      return (parse_number(row[c], r) - st.mean) / st.std;
    };
    for (std::size_t k = 0; k < num.size(); ++k) a.numeric.push_back(zscore(num_names[k], num[k]));
    for (std::size_t k = 0; k < cat.size(); ++k) a.codes.push_back(fitted.vocab.at(cat_names[k]).code(row[cat[k]]));
    for (std::size_t k = 0; k < snum.size(); ++k) a.static_numeric.push_back(zscore(snum_names[k], snum[k]));
    for (std::size_t k = 0; k < scat.size(); ++k)
      a.static_codes.push_back(fitted.vocab.at(scat_names[k]).code(row[scat[k]]));
    out.push_back(std::move(a));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sequences

/// One entity's activity, oldest first, at most `t` steps, left-padded.
struct EntitySequence {
  std::string entity;
  std::vector<ActivityRow> steps;
  int pad_len = 0;
  std::vector<double> static_numeric;
  std::vector<int> static_codes;

  int length() const { return pad_len + static_cast<int>(steps.size()); }
};

/// Groups rows by entity (output sorted by entity id), orders each group by
/// timestamp with ties kept in input order, keeps the latest `t` rows and
/// takes statics from the most recent row.
inline std::vector<EntitySequence> build_sequences(const std::vector<ActivityRow>& rows, int t) {
  if (t < 1) throw ConfigError("sequence length t must be >= 1, got " + std::to_string(t));
  std::map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < rows.size(); ++i) groups[rows[i].entity].push_back(i);

  std::vector<EntitySequence> out;
  out.reserve(groups.size());
  for (auto& [entity, idx] : groups) {
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return rows[a].ts < rows[b].ts; });
    EntitySequence seq;
    seq.entity = entity;
    std::size_t keep = std::min<std::size_t>(idx.size(), static_cast<std::size_t>(t));
    for (std::size_t k = idx.size() - keep; k < idx.size(); ++k) seq.steps.push_back(rows[idx[k]]);
    seq.pad_len = t - static_cast<int>(keep);
    const auto& latest = rows[idx.back()];
    seq.static_numeric = latest.static_numeric;
    seq.static_codes = latest.static_codes;
    out.push_back(std::move(seq));
  }
  return out;
}

}  // namespace caspr
