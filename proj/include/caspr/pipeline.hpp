// Copyright (c) 2026 The caspr Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Glue shared by the command-line tool and the acceptance runner.

#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "caspr/checkpoint.hpp"
#include "caspr/csv.hpp"
#include "caspr/ingest.hpp"
#include "caspr/metrics.hpp"
#include "caspr/pretrain.hpp"
#include "caspr/rfm.hpp"
#include "caspr/transformer.hpp"

namespace caspr {

/// Inference over a whole dataset in fixed-size batches.
template <typename T>
std::vector<EmbeddingRecord> embed_all(const Model<T>& model, const std::vector<EntitySequence>& seqs,
                                       std::size_t batch_size = 256) {
  std::vector<EmbeddingRecord> out;
  out.reserve(seqs.size());
  for (std::size_t b = 0; b < seqs.size(); b += batch_size) {
    std::span<const EntitySequence> chunk(seqs.data() + b, std::min(batch_size, seqs.size() - b));
    for (auto& r : model.embed(make_batch(chunk, model.schema()))) out.push_back(std::move(r));
  }
  return out;
}

inline CsvTable embeddings_csv(const std::vector<EmbeddingRecord>& records) {
  CsvTable t;
  t.header.push_back("entity");
  const std::size_t width = records.empty() ? 0 : records[0].vector.size();
  for (std::size_t k = 0; k < width; ++k) t.header.push_back("e" + std::to_string(k));
  for (const auto& r : records) {
    std::vector<std::string> row{r.entity};
    for (double v : r.vector) row.push_back(format_real(v));
    t.rows.push_back(std::move(row));
  }
  return t;
}

/// Rows of the item-id embedding table (code 0 excluded) as rankable items.
template <typename T>
std::vector<ItemVector> item_vectors(const Model<T>& model, const std::string& column) {
  const auto& schema = model.schema();
  auto it = schema.vocab.find(column);
  if (it == schema.vocab.end()) throw SchemaMismatch("'" + column + "' is not a categorical column of the model");
  const auto& table = model.param("emb." + column);
  const std::size_t d = table.dim(1);
  std::vector<ItemVector> items;
  for (std::size_t code = 1; code < table.dim(0); ++code) {
    ItemVector v;
    v.id = it->second.values().at(code - 1);
    for (std::size_t k = 0; k < d; ++k) v.vector.push_back(static_cast<double>(table.data()[code * d + k]));
    items.push_back(std::move(v));
  }
  return items;
}

/// Least-squares item-to-embedding projection fitted on the (item, entity)
/// pairs observed in the activity rows.
inline ItemProjection fit_projection_from_history(const std::vector<ItemVector>& items,
                                                  const std::vector<EmbeddingRecord>& embeddings,
                                                  const std::vector<std::pair<std::string, std::string>>& history) {
  std::map<std::string, const std::vector<double>*> item_of, emb_of;
  for (const auto& i : items) item_of[i.id] = &i.vector;
  for (const auto& e : embeddings) emb_of[e.entity] = &e.vector;
  std::vector<std::pair<std::vector<double>, std::vector<double>>> pairs;
  for (const auto& [entity, item] : history) {
    auto a = item_of.find(item);
    auto b = emb_of.find(entity);
    if (a != item_of.end() && b != emb_of.end()) pairs.emplace_back(*a->second, *b->second);
  }
  return fit_item_projection(pairs);
}

/// Relevance CSV `entity,relevant` (pipe-separated ids) attached to ranked cases.
inline std::vector<RankingCase> attach_relevance(std::vector<RankingCase> cases, const CsvTable& relevance) {
  const auto ec = relevance.column("entity"), rc = relevance.column("relevant");
  std::map<std::string, std::set<std::string>> rel;
  for (const auto& row : relevance.rows) {
    auto ids = split_ids(row.at(rc));
    rel[row.at(ec)].insert(ids.begin(), ids.end());
  }
  std::vector<RankingCase> out;
  for (auto& c : cases) {
    auto it = rel.find(c.entity);
    if (it == rel.end()) continue;
    c.relevant = it->second;
    out.push_back(std::move(c));
  }
  if (out.empty()) throw CaseError("no entity in the relevance file has an embedding");
  return out;
}

inline CsvTable rfm_features_csv(const CsvTable& data, const SchemaSpec& spec) {
  std::string entity = "entity";
  for (const auto& c : spec.columns)
    if (c.kind == ColumnKind::entity_id) entity = c.name;
  return rfm_csv(rfm_table(data, spec), entity);
}

struct BenchRow {
  int workers = 0;
  double epoch_time_s = 0, total_worker_time_s = 0, mean_loss = 0;
};

/// One training epoch per worker count, each from the same initial weights.
template <typename T>
std::vector<BenchRow> bench_workers(const std::vector<EntitySequence>& data, const FittedSchema& schema,
                                    const ModelConfig& model_cfg, TrainConfig cfg, const std::vector<int>& workers) {
  std::vector<BenchRow> rows;
  for (int w : workers) {
    cfg.workers = w;
    Trainer<T> trainer(model_cfg, schema, cfg);
    auto log = trainer.run_epoch(data);
    rows.push_back({w, log.wall_seconds, log.worker_seconds, log.mean_loss});
  }
  return rows;
}

inline std::string format_bench(const std::vector<BenchRow>& rows) {
  std::string out = "workers,epoch_time_s,total_worker_time_s\n";
  for (const auto& r : rows)
    append_csv_row(out, {std::to_string(r.workers), format_real(r.epoch_time_s), format_real(r.total_worker_time_s)});
  return out;
}

}  // namespace caspr
