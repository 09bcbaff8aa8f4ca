// Copyright (c) 2026 The caspr Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Downstream evaluation: a linear probe fitted with the autodiff core,
// classification and regression metrics, and dot-product item ranking.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <map>
#include <numbers>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "caspr/autodiff.hpp"
#include "caspr/csv.hpp"
#include "caspr/error.hpp"
#include "caspr/transformer.hpp"

namespace caspr {

using FeatureMatrix = std::vector<std::vector<double>>;

struct LabeledSet {
  std::vector<std::string> entities;
  std::vector<std::string> feature_names;
  FeatureMatrix features;
  std::vector<double> labels;

  std::size_t size() const { return entities.size(); }
  LabeledSet subset(const std::vector<std::size_t>& idx) const {
    LabeledSet s;
    s.feature_names = feature_names;
    for (auto i : idx) {
      s.entities.push_back(entities[i]);
      s.features.push_back(features[i]);
      s.labels.push_back(labels[i]);
    }
    return s;
  }
};

enum class ProbeTask { binary, regression };

inline ProbeTask probe_task_from_string(const std::string& s) {
  if (s == "binary") return ProbeTask::binary;
  if (s == "regression") return ProbeTask::regression;
  throw ConfigError("task must be binary or regression, got '" + s + "'");
}

namespace detail {

inline void check_binary_labels(std::span<const double> labels) {
  bool pos = false, neg = false;
  for (double y : labels) {
    if (y == 1.0)
      pos = true;
    else if (y == 0.0)
      neg = true;
    else
      throw LabelError("binary labels must be 0 or 1, got " + format_real(y));
  }
  if (!pos || !neg) throw LabelError("binary labels need both classes present");
}

inline void check_aligned(std::size_t a, std::size_t b, const char* what) {
  if (a != b) throw ShapeMismatch(std::string(what) + ": " + std::to_string(a) + " scores vs " + std::to_string(b) + " labels");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear probe

struct ProbeOptions {
  double l2 = 1e-4;
  int iterations = 2000;
  double lr = 0.05;
};

/// Weights live in standardized feature space.
struct LinearProbe {
  ProbeTask task = ProbeTask::binary;
  std::vector<double> mean, scale, w;
  double b = 0.0;

  /// Probability of class 1 (binary) or the predicted value (regression).
  double predict(std::span<const double> x) const {
    if (x.size() != w.size())
      throw ShapeMismatch("probe expects " + std::to_string(w.size()) + " features, got " + std::to_string(x.size()));
    double z = b;
    for (std::size_t j = 0; j < w.size(); ++j) z += w[j] * (x[j] - mean[j]) / scale[j];
    return task == ProbeTask::binary ? 1.0 / (1.0 + std::exp(-z)) : z;
  }
  std::vector<double> predict(const FeatureMatrix& X) const {
    std::vector<double> out;
    out.reserve(X.size());
    for (const auto& x : X) out.push_back(predict(x));
    return out;
  }
  /// Weights and intercept in the original feature units.
  std::pair<std::vector<double>, double> raw_weights() const {
    std::vector<double> raw(w.size());
    double icpt = b;
    for (std::size_t j = 0; j < w.size(); ++j) {
      raw[j] = w[j] / scale[j];
      icpt -= raw[j] * mean[j];
    }
    return {raw, icpt};
  }
};

/// Logistic or least-squares fit with penalty (l2/2)|w|^2, by full-batch
/// Adam with cosine-decayed step size on standardized features.
inline LinearProbe train_linear_probe(const FeatureMatrix& X, std::span<const double> y, ProbeTask task,
                                      std::uint64_t seed, const ProbeOptions& opts = {}) {
  detail::check_aligned(X.size(), y.size(), "probe");
  if (X.size() < 2) throw LabelError("probe needs at least 2 examples");
  if (task == ProbeTask::binary) detail::check_binary_labels(y);
  const std::size_t n = X.size(), d = X[0].size();
  for (const auto& row : X)
    if (row.size() != d) throw ShapeMismatch("ragged feature matrix");

  LinearProbe p;
  p.task = task;
  p.mean.assign(d, 0.0);
  p.scale.assign(d, 0.0);
  for (const auto& row : X)
    for (std::size_t j = 0; j < d; ++j) p.mean[j] += row[j] / static_cast<double>(n);
  for (const auto& row : X)
    for (std::size_t j = 0; j < d; ++j) p.scale[j] += (row[j] - p.mean[j]) * (row[j] - p.mean[j]) / static_cast<double>(n);
  for (auto& s : p.scale) s = s > 1e-24 ? std::sqrt(s) : 1.0;

  std::vector<double> xs(n * d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) xs[i * d + j] = (X[i][j] - p.mean[j]) / p.scale[j];
  const double ybar = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(n);

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> init(-0.01, 0.01);
  std::vector<double> w0(d);
  for (auto& v : w0) v = init(rng);
  const double b0 = task == ProbeTask::binary ? std::log(ybar / (1.0 - ybar)) : ybar;

  using Tn = ad::Tensor<double>;
  Tn Xt = Tn::from({n, d}, std::move(xs));
  Tn w = Tn::from({d, 1}, w0, true);
  Tn b = Tn::from({1}, {b0}, true);
  const std::vector<double> targets(y.begin(), y.end());
  const std::vector<double> weights(n, 1.0 / static_cast<double>(n));

  std::vector<double> mw(d, 0.0), vw(d, 0.0), mb(1, 0.0), vb(1, 0.0);
  const double b1 = 0.9, b2 = 0.999, eps = 1e-12;
  for (int it = 1; it <= opts.iterations; ++it) {
    w.zero_grad();
    b.zero_grad();
    auto z = ad::add(ad::matmul(Xt, w), b);
    auto fit = task == ProbeTask::binary ? ad::weighted_bce_with_logits(z, targets, weights)
                                         : ad::weighted_squared_error(z, targets, weights);
    auto loss = ad::add(fit, ad::scale(ad::sum(ad::mul(w, w)), 0.5 * opts.l2));
    ad::backward(loss);
    const double lr =
        opts.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(it - 1) / opts.iterations));
    auto update = [&](Tn& param, std::vector<double>& m, std::vector<double>& v) {
      auto theta = param.mutable_data();
      auto g = param.grad();
      const double c1 = 1.0 - std::pow(b1, it), c2 = 1.0 - std::pow(b2, it);
      for (std::size_t i = 0; i < theta.size(); ++i) {
        m[i] = b1 * m[i] + (1 - b1) * g[i];
        v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i];
        theta[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
      }
    };
    update(w, mw, vw);
    update(b, mb, vb);
  }
  p.w.assign(w.data().begin(), w.data().end());
  p.b = b.data()[0];
  for (double v : p.w)
    if (!std::isfinite(v)) throw NumericError("linear probe diverged");
  return p;
}

// ---------------------------------------------------------------------------
// Classification / regression metrics

/// Mann-Whitney AUROC; tied scores count one half.
inline double auroc(std::span<const double> scores, std::span<const double> labels) {
  detail::check_aligned(scores.size(), labels.size(), "auroc");
  detail::check_binary_labels(labels);
  for (double s : scores)
    if (std::isnan(s)) throw NumericError("auroc: NaN score");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] < scores[b]; });
  // midranks (1-based) over tie groups
  double pos_rank_sum = 0.0, n_pos = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double mid = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t k = i; k < j; ++k)
      if (labels[order[k]] == 1.0) {
        pos_rank_sum += mid;
        n_pos += 1.0;
      }
    i = j;
  }
  const double n_neg = static_cast<double>(n) - n_pos;
  return (pos_rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg);
}

/// F1 of class 1, predicting positive when score >= threshold.
inline double f1_positive(std::span<const double> scores, std::span<const double> labels, double threshold = 0.5) {
  detail::check_aligned(scores.size(), labels.size(), "f1");
  double tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool pred = scores[i] >= threshold, truth = labels[i] == 1.0;
    tp += pred && truth;
    fp += pred && !truth;
    fn += !pred && truth;
  }
  const double precision = tp + fp > 0 ? tp / (tp + fp) : 0.0;
  const double recall = tp + fn > 0 ? tp / (tp + fn) : 0.0;
  return precision + recall > 0 ? 2 * precision * recall / (precision + recall) : 0.0;
}

inline double rmse(std::span<const double> preds, std::span<const double> targets) {
  detail::check_aligned(preds.size(), targets.size(), "rmse");
  if (preds.empty()) throw ContractViolation("rmse of an empty set");
  double s = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) s += (preds[i] - targets[i]) * (preds[i] - targets[i]);
  return std::sqrt(s / static_cast<double>(preds.size()));
}

// ---------------------------------------------------------------------------
// Ranking

struct RankingCase {
  std::string entity;
  std::vector<std::pair<std::string, double>> scored;  // descending
  std::set<std::string> relevant;
};

struct RankingReport {
  double map = 0, prec1 = 0, success5_count = 0, success5_hit = 0, ndcg3 = 0;
};

/// AP over the full ranking; Success@5 as mean count of hits in the top 5
/// (and as hit rate); NDCG@3 with binary gains.
inline RankingReport ranking_metrics(const std::vector<RankingCase>& cases) {
  if (cases.empty()) throw CaseError("ranking_metrics needs at least one case");
  RankingReport r;
  for (const auto& c : cases) {
    if (c.relevant.empty()) throw CaseError("entity '" + c.entity + "' has no relevant items");
    double hits = 0, ap = 0, dcg = 0, top5 = 0;
    for (std::size_t k = 0; k < c.scored.size(); ++k) {
      if (!c.relevant.count(c.scored[k].first)) continue;
      hits += 1;
      ap += hits / static_cast<double>(k + 1);
      if (k < 5) top5 += 1;
      if (k < 3) dcg += 1.0 / std::log2(static_cast<double>(k) + 2.0);
    }
    double ideal = 0;
    for (std::size_t k = 0; k < std::min<std::size_t>(3, c.relevant.size()); ++k)
      ideal += 1.0 / std::log2(static_cast<double>(k) + 2.0);
    r.map += ap / static_cast<double>(c.relevant.size());
    r.prec1 += !c.scored.empty() && c.relevant.count(c.scored[0].first) ? 1.0 : 0.0;
    r.success5_count += top5;
    r.success5_hit += top5 > 0 ? 1.0 : 0.0;
    r.ndcg3 += dcg / ideal;
  }
  const double n = static_cast<double>(cases.size());
  r.map /= n;
  r.prec1 /= n;
  r.success5_count /= n;
  r.success5_hit /= n;
  r.ndcg3 /= n;
  return r;
}

struct ItemVector {
  std::string id;
  std::vector<double> vector;
};

/// Linear map from item space to embedding space: v -> v P, P is [d_item, d_emb].
struct ItemProjection {
  std::size_t rows = 0, cols = 0;
  std::vector<double> p;

  std::vector<double> apply(std::span<const double> v) const {
    if (v.size() != rows) throw SchemaMismatch("item vector width " + std::to_string(v.size()) + " != " + std::to_string(rows));
    std::vector<double> out(cols, 0.0);
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) out[j] += v[i] * p[i * cols + j];
    return out;
  }
};

namespace detail {

// Solves A X = B for symmetric positive definite A [n,n], B [n,m] (Cholesky).
inline std::vector<double> spd_solve(std::vector<double> A, std::vector<double> B, std::size_t n, std::size_t m) {
  for (std::size_t j = 0; j < n; ++j) {
    double d = A[j * n + j];
    for (std::size_t k = 0; k < j; ++k) d -= A[j * n + k] * A[j * n + k];
    if (!(d > 0)) throw NumericError("least-squares system is not positive definite");
    A[j * n + j] = std::sqrt(d);
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = A[i * n + j];
      for (std::size_t k = 0; k < j; ++k) s -= A[i * n + k] * A[j * n + k];
      A[i * n + j] = s / A[j * n + j];
    }
  }
  for (std::size_t c = 0; c < m; ++c) {
    for (std::size_t i = 0; i < n; ++i) {
      double s = B[i * m + c];
      for (std::size_t k = 0; k < i; ++k) s -= A[i * n + k] * B[k * m + c];
      B[i * m + c] = s / A[i * n + i];
    }
    for (std::size_t i = n; i-- > 0;) {
      double s = B[i * m + c];
      for (std::size_t k = i + 1; k < n; ++k) s -= A[k * n + i] * B[k * m + c];
      B[i * m + c] = s / A[i * n + i];
    }
  }
  return B;
}

}  // namespace detail

/// Ridge least squares from item vectors to the embeddings of entities that
/// interacted with them: min sum |item P - nu_E|^2 + l2 |P|^2.
inline ItemProjection fit_item_projection(const std::vector<std::pair<std::vector<double>, std::vector<double>>>& pairs,
                                          double l2 = 1e-4) {
  if (pairs.empty()) throw ContractViolation("item projection needs at least one (item, entity) pair");
  ItemProjection P;
  P.rows = pairs[0].first.size();
  P.cols = pairs[0].second.size();
  std::vector<double> A(P.rows * P.rows, 0.0), B(P.rows * P.cols, 0.0);
  for (const auto& [x, e] : pairs) {
    if (x.size() != P.rows || e.size() != P.cols) throw ShapeMismatch("inconsistent widths in item projection data");
    for (std::size_t i = 0; i < P.rows; ++i) {
      for (std::size_t k = 0; k < P.rows; ++k) A[i * P.rows + k] += x[i] * x[k];
      for (std::size_t j = 0; j < P.cols; ++j) B[i * P.cols + j] += x[i] * e[j];
    }
  }
  for (std::size_t i = 0; i < P.rows; ++i) A[i * P.rows + i] += l2;
  P.p = detail::spd_solve(std::move(A), std::move(B), P.rows, P.cols);
  return P;
}

/// Dot-product scores, descending, ties broken by ascending item id.
inline std::vector<RankingCase> rank_items(const std::vector<EmbeddingRecord>& entities,
                                           const std::vector<ItemVector>& items,
                                           const ItemProjection* projection = nullptr) {
  std::vector<ItemVector> mapped = items;
  if (projection)
    for (auto& it : mapped) it.vector = projection->apply(it.vector);
  std::vector<RankingCase> out;
  out.reserve(entities.size());
  for (const auto& e : entities) {
    RankingCase c;
    c.entity = e.entity;
    for (const auto& it : mapped) {
      if (it.vector.size() != e.vector.size())
        throw SchemaMismatch("item '" + it.id + "' has width " + std::to_string(it.vector.size()) +
                             ", embeddings have " + std::to_string(e.vector.size()) + "; fit a projection");
      c.scored.emplace_back(it.id, std::inner_product(it.vector.begin(), it.vector.end(), e.vector.begin(), 0.0));
    }
    std::sort(c.scored.begin(), c.scored.end(), [](const auto& a, const auto& b) {
      return a.second != b.second ? a.second > b.second : a.first < b.first;
    });
    out.push_back(std::move(c));
  }
  return out;
}

inline std::string join_ids(const std::vector<std::string>& ids) {
  std::string s;
  for (std::size_t i = 0; i < ids.size(); ++i) s += (i ? "|" : "") + ids[i];
  return s;
}

inline std::vector<std::string> split_ids(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, '|'))
    if (!cur.empty()) out.push_back(cur);
  return out;
}

/// `entity,ranked,relevant` with pipe-separated ids.
inline std::string format_rankings(const std::vector<RankingCase>& cases) {
  std::string out = "entity,ranked,relevant\n";
  for (const auto& c : cases) {
    std::vector<std::string> ranked;
    for (const auto& [id, s] : c.scored) ranked.push_back(id);
    append_csv_row(out, {c.entity, join_ids(ranked), join_ids({c.relevant.begin(), c.relevant.end()})});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reports and evaluation

struct MetricsReport {
  std::vector<std::pair<std::string, double>> values;

  void add(const std::string& name, double v) { values.emplace_back(name, v); }
  double at(const std::string& name) const {
    for (const auto& [k, v] : values)
      if (k == name) return v;
    throw ContractViolation("report has no metric '" + name + "'");
  }
  std::string to_csv() const {
    std::string out = "metric,value\n";
    for (const auto& [k, v] : values) append_csv_row(out, {k, format_real(v)});
    return out;
  }
  std::string to_table() const {
    std::size_t w = 6;
    for (const auto& [k, v] : values) w = std::max(w, k.size());
    std::ostringstream os;
    os << std::left << std::setw(static_cast<int>(w)) << "metric" << "  value\n";
    for (const auto& [k, v] : values) os << std::left << std::setw(static_cast<int>(w)) << k << "  " << format_real(v) << "\n";
    return os.str();
  }
};

inline MetricsReport ranking_report(const RankingReport& r) {
  MetricsReport m;
  m.add("map", r.map);
  m.add("prec_at_1", r.prec1);
  m.add("success5_count", r.success5_count);
  m.add("success5_hit", r.success5_hit);
  m.add("ndcg_at_3", r.ndcg3);
  return m;
}

/// Joins a features CSV (first column = entity id) with `entity,label`.
inline LabeledSet join_labels(const CsvTable& features, const CsvTable& labels) {
  if (features.header.size() < 2) throw SchemaMismatch("features CSV needs an entity column and at least one feature");
  const auto entity_col = labels.column("entity");
  const auto label_col = labels.column("label");
  std::map<std::string, double> by_entity;
  for (std::size_t r = 0; r < labels.rows.size(); ++r) {
    const auto& row = labels.rows[r];
    by_entity[row.at(entity_col)] = parse_number(row.at(label_col), r);
  }
  LabeledSet s;
  s.feature_names.assign(features.header.begin() + 1, features.header.end());
  for (std::size_t r = 0; r < features.rows.size(); ++r) {
    const auto& row = features.rows[r];
    auto it = by_entity.find(row.at(0));
    if (it == by_entity.end()) throw LabelError("no label for entity '" + row.at(0) + "'");
    std::vector<double> x;
    for (std::size_t c = 1; c < row.size(); ++c) x.push_back(parse_number(row[c], r));
    s.entities.push_back(row[0]);
    s.features.push_back(std::move(x));
    s.labels.push_back(it->second);
  }
  if (s.size() == 0) throw EmptyDataset("no labeled feature rows");
  return s;
}

/// Seeded stratified split (binary) or plain split (regression).
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> train_test_split(const LabeledSet& s, ProbeTask task,
                                                                                    double test_fraction,
                                                                                    std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::vector<std::size_t>> groups(task == ProbeTask::binary ? 2 : 1);
  for (std::size_t i = 0; i < s.size(); ++i)
    groups[task == ProbeTask::binary ? static_cast<std::size_t>(s.labels[i] == 1.0) : 0].push_back(i);
  std::vector<std::size_t> train, test;
  for (auto& g : groups) {
    std::shuffle(g.begin(), g.end(), rng);
    const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(g.size())));
    test.insert(test.end(), g.begin(), g.begin() + static_cast<std::ptrdiff_t>(n_test));
    train.insert(train.end(), g.begin() + static_cast<std::ptrdiff_t>(n_test), g.end());
  }
  std::sort(train.begin(), train.end());
  std::sort(test.begin(), test.end());
  return {train, test};
}

/// Probe fitted on a seeded split and scored on the held-out part.
inline MetricsReport evaluate_probe(const LabeledSet& s, ProbeTask task, std::uint64_t seed,
                                    double test_fraction = 0.3, const ProbeOptions& opts = {}) {
  if (task == ProbeTask::binary) detail::check_binary_labels(s.labels);
  auto [tr, te] = train_test_split(s, task, test_fraction, seed);
  const auto train_set = s.subset(tr), test_set = s.subset(te);
  auto probe = train_linear_probe(train_set.features, train_set.labels, task, seed, opts);
  const auto pred = probe.predict(test_set.features);
  MetricsReport m;
  m.add("n_train", static_cast<double>(train_set.size()));
  m.add("n_test", static_cast<double>(test_set.size()));
  if (task == ProbeTask::binary) {
    m.add("auroc", auroc(pred, test_set.labels));
    m.add("f1_positive", f1_positive(pred, test_set.labels));
  } else {
    m.add("rmse", rmse(pred, test_set.labels));
  }
  return m;
}

}  // namespace caspr
