// Copyright (c) 2026 The caspr Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <vector>

#include "caspr/ingest.hpp"
#include "caspr/synthgen.hpp"
#include "caspr/transformer.hpp"

namespace caspr::fixtures {

struct SmallData {
  FittedSchema schema;
  std::vector<EntitySequence> sequences;
  CsvTable raw;
  CsvTable labels;
};

/// Synthetic trend-churn data, fitted, encoded and sequenced.
inline SmallData small_data(int n_entities, int t, std::uint64_t seed = 1, int t_mean = 6, int item_vocab = 5) {
  SynthConfig cfg;
  cfg.n_entities = n_entities;
  cfg.t_mean = t_mean;
  cfg.seed = seed;
  cfg.item_vocab = item_vocab;
  cfg.channel_vocab = 3;
  auto ds = generate(cfg);
  SmallData out;
  out.schema = fit_schema(ds.data, SchemaSpec::from_json(ds.schema));
  out.sequences = build_sequences(encode_rows(ds.data, out.schema), t);
  out.raw = std::move(ds.data);
  out.labels = std::move(ds.labels);
  return out;
}

inline ModelConfig tiny_config(int t, int layers = 2, int hidden = 4, int heads = 2) {
  ModelConfig c;
  c.hidden = hidden;
  c.ff_dim = 2 * hidden;
  c.layers = layers;
  c.heads = heads;
  c.dropout = 0.0;
  c.t = t;
  c.emb_out = 3;
  c.precision = Precision::f64;
  return c;
}

}  // namespace caspr::fixtures
