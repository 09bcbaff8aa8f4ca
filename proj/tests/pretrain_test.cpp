// Copyright (c) 2026 The caspr Authors.
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <filesystem>
#include <limits>
#include <random>

#include <gtest/gtest.h>

#include "caspr/pretrain.hpp"
#include "fd_oracle.hpp"
#include "fixtures.hpp"

using namespace caspr;
using T64 = ad::Tensor<double>;

namespace {

Batch dense_batch(std::size_t size, std::size_t t, std::size_t pad_every = 0) {
  Batch b;
  b.size = size;
  b.t = t;
  b.real.assign(size * t, 1);
  if (pad_every)
    for (std::size_t r = 0; r < b.real.size(); r += pad_every) b.real[r] = 0;
  return b;
}

// 1 numeric column "x" and one categorical "c" with 3 values (4 logits).
FittedSchema loss_schema(bool with_numeric, bool with_categorical) {
  FittedSchema f;
  f.columns = {{"id", ColumnKind::entity_id}, {"ts", ColumnKind::timestamp}};
  if (with_numeric) {
    f.columns.push_back({"x", ColumnKind::numerical});
    f.stats["x"] = {};
  }
  if (with_categorical) {
    f.columns.push_back({"c", ColumnKind::categorical});
    f.vocab["c"] = Vocab({"a", "b", "c"});
    f.embed_dim["c"] = 2;
  }
  return f;
}

Batch single_position(double x, int code, bool with_numeric, bool with_categorical) {
  Batch b = dense_batch(1, 1);
  if (with_numeric) {
    b.n_num = 1;
    b.numeric = {x};
  }
  if (with_categorical) {
    b.n_cat = 1;
    b.codes = {code};
  }
  return b;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

TrainConfig small_train(int epochs, int batch = 4) {
  TrainConfig c;
  c.epochs = epochs;
  c.batch_size = batch;
  c.seed = 11;
  c.lr = 1e-2;
  return c;
}

}  // namespace

TEST(Mask, ZeroProbabilityMarksNothing) {
  std::mt19937_64 rng(1);
  auto plan = apply_mask(dense_batch(10, 7), 0.0, rng);
  EXPECT_EQ(plan.count(), 0u);
}

TEST(Mask, FullProbabilityMarksEveryRealPosition) {
  std::mt19937_64 rng(1);
  auto batch = dense_batch(10, 7, 3);
  auto plan = apply_mask(batch, 1.0, rng);
  for (std::size_t r = 0; r < batch.real.size(); ++r) EXPECT_EQ(plan.masked[r], batch.real[r]);
}

TEST(Mask, EmpiricalRateBeforeForcing) {
  std::mt19937_64 rng(2026);
  auto plan = apply_mask(dense_batch(1000, 100), 0.3, rng, MaskMode::bernoulli, false);
  const double rate = static_cast<double>(plan.count()) / 1e5;
  EXPECT_GE(rate, 0.29);
  EXPECT_LE(rate, 0.31);
}

TEST(Mask, PadsNeverMarkedAndAtLeastOnePerSequence) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    std::mt19937_64 rng(seed);
    auto batch = dense_batch(20, 3, 2);
    for (auto mode : {MaskMode::bernoulli, MaskMode::exact}) {
      auto plan = apply_mask(batch, 0.05, rng, mode);
      for (std::size_t b = 0; b < batch.size; ++b) {
        std::size_t marked = 0;
        for (std::size_t i = 0; i < batch.t; ++i) {
          if (!batch.is_real(b, i)) EXPECT_FALSE(plan.at(b, i));
          marked += plan.at(b, i);
        }
        EXPECT_GE(marked, 1u);
      }
    }
  }
}

TEST(Mask, ExactModeCount) {
  std::mt19937_64 rng(3);
  auto plan = apply_mask(dense_batch(5, 10), 0.3, rng, MaskMode::exact);
  EXPECT_EQ(plan.count(), 15u);
}

TEST(Mask, RejectsOutOfRangeProbability) {
  std::mt19937_64 rng(3);
  EXPECT_THROW(apply_mask(dense_batch(1, 1), 1.2, rng), ConfigError);
}

TEST(Loss, PerfectNumericIsZero) {
  auto schema = loss_schema(true, false);
  auto batch = single_position(0.7, 0, true, false);
  Reconstruction<double> pred;
  pred.numeric.push_back(T64::from({1, 1, 1}, {0.7}));
  EXPECT_EQ(reconstruction_loss(pred, batch, MaskPlan{}, schema).item(), 0.0);
}

TEST(Loss, UniformLogitsGiveLogOfClassCount) {
  auto schema = loss_schema(false, true);
  auto batch = single_position(0, 2, false, true);
  Reconstruction<double> pred;
  pred.categorical.push_back(T64::zeros({1, 1, 4}));
  EXPECT_NEAR(reconstruction_loss(pred, batch, MaskPlan{}, schema).item(), std::log(4.0), 1e-12);
}

TEST(Loss, NumericPlusCategoricalHandExample) {
  auto schema = loss_schema(true, true);
  auto batch = single_position(1.0, 1, true, true);
  Reconstruction<double> pred;
  pred.numeric.push_back(T64::from({1, 1, 1}, {1.5}));
  pred.categorical.push_back(T64::zeros({1, 1, 4}));
  const double loss = reconstruction_loss(pred, batch, MaskPlan{}, schema).item();
  EXPECT_NEAR(loss, 0.25 + std::log(4.0), 1e-12);
  EXPECT_NEAR(loss, 1.6363, 5e-5);
}

TEST(Loss, PadsExcludedAndMaskedOnlyOption) {
  auto schema = loss_schema(true, false);
  Batch b = dense_batch(1, 3);
  b.n_num = 1;
  b.numeric = {0.0, 0.0, 0.0};
  b.real = {0, 1, 1};
  Reconstruction<double> pred;
  pred.numeric.push_back(T64::from({1, 3, 1}, {100.0, 1.0, 3.0}));
  EXPECT_NEAR(reconstruction_loss(pred, b, MaskPlan{}, schema).item(), 5.0, 1e-12);
  MaskPlan plan{1, 3, {0, 0, 1}};
  EXPECT_NEAR(reconstruction_loss(pred, b, plan, schema, {true}).item(), 9.0, 1e-12);
}

TEST(Loss, NonFiniteNamesTheHead) {
  auto schema = loss_schema(true, false);
  auto batch = single_position(0.0, 0, true, false);
  Reconstruction<double> pred;
  pred.numeric.push_back(T64::from({1, 1, 1}, {std::numeric_limits<double>::quiet_NaN()}));
  try {
    reconstruction_loss(pred, batch, MaskPlan{}, schema);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("'x'"), std::string::npos);
  }
}

TEST(Loss, NonNegativeOnRandomPredictions) {
  auto data = fixtures::small_data(8, 5);
  std::mt19937_64 rng(4);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Model<double> model(fixtures::tiny_config(5), data.schema, seed);
    auto batch = make_batch(data.sequences, data.schema);
    auto plan = apply_mask(batch, 0.3, rng);
    auto pred = model.reconstruct(batch, &plan, false, rng);
    EXPECT_GE(reconstruction_loss(pred, batch, plan, data.schema).item(), 0.0);
  }
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  std::vector<double> theta{0.5, -1.0}, g{0, 0}, m{0, 0}, v{0, 0};
  adam_update<double>(theta, g, m, v, TrainConfig{}, 1);
  EXPECT_EQ(theta, (std::vector<double>{0.5, -1.0}));
}

TEST(Adam, FirstStepClosedForm) {
  std::vector<double> theta{0.0}, g{0.1}, m{0}, v{0};
  adam_update<double>(theta, g, m, v, TrainConfig{}, 1);
  EXPECT_NEAR(theta[0], -1e-3 * 0.1 / (0.1 + 1e-8), 1e-15);
  EXPECT_NEAR(theta[0], -9.99999e-4, 1e-9);
  EXPECT_DOUBLE_EQ(TrainConfig{}.lr, 1e-3);
}

TEST(Adam, StepMustBePositive) {
  std::vector<double> theta{0.0}, g{0.1}, m{0}, v{0};
  EXPECT_THROW(adam_update<double>(theta, g, m, v, TrainConfig{}, 0), ContractViolation);
}

TEST(TrainConfigTest, ShardStarvationIsConfigError) {
  TrainConfig c;
  c.workers = 4;
  c.batch_size = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  auto data = fixtures::small_data(4, 5);
  EXPECT_THROW(train<double>(data.sequences, data.schema, fixtures::tiny_config(5), c), ConfigError);
  c.workers = 1;
  c.batch_size = 4;
  EXPECT_THROW(train_data_parallel<double>(data.sequences, data.schema, fixtures::tiny_config(5), c), ConfigError);
}

TEST(ShardRange, CoversBatchContiguously) {
  for (std::size_t n = 1; n < 40; ++n)
    for (std::size_t W = 1; W <= std::min<std::size_t>(n, 6); ++W) {
      std::size_t next = 0;
      for (std::size_t k = 0; k < W; ++k) {
        auto [b, e] = shard_range(n, W, k);
        EXPECT_EQ(b, next);
        EXPECT_LE(e - b, n / W + 1);
        EXPECT_GE(e - b, n / W);
        next = e;
      }
      EXPECT_EQ(next, n);
    }
}

TEST(Gradient, FullModelMatchesFiniteDifferences) {
  auto data = fixtures::small_data(8, 5);
  Model<double> model(fixtures::tiny_config(5, 2, 4, 2), data.schema, 5);
  auto batch = make_batch(data.sequences, data.schema);
  std::mt19937_64 rng(6);
  auto plan = apply_mask(batch, 0.3, rng);
  std::vector<T64> leaves;
  for (const auto& n : model.names()) leaves.push_back(model.param(n));
  auto loss_fn = [&] {
    std::mt19937_64 r(0);
    return reconstruction_loss(model.reconstruct(batch, &plan, false, r), batch, plan, data.schema);
  };
  auto res = oracle::check_gradients(loss_fn, leaves);
  EXPECT_EQ(res.checked, model.parameter_count());
  EXPECT_LT(res.max_rel_error, 1e-4);
}

class DataParallel : public ::testing::TestWithParam<int> {};

TEST_P(DataParallel, AveragedShardGradientEqualsFullBatch) {
  const auto W = static_cast<std::size_t>(GetParam());
  auto data = fixtures::small_data(11, 6, 3);
  auto cfg = fixtures::tiny_config(6, 2, 8, 2);
  cfg.dropout = 0.2;  // identical noise per worker is not required when train=false
  Model<double> master(cfg, data.schema, 9);
  auto batch = make_batch(data.sequences, data.schema);
  std::mt19937_64 rng(7);
  for (bool masked_only : {false, true}) {
    auto plan = apply_mask(batch, 0.3, rng);
    std::vector<Model<double>> one{master.clone()};
    std::vector<double> g1, gW;
    const double l1 = data_parallel_gradient(one, batch, plan, masked_only, 1, false, g1);
    std::vector<Model<double>> many;
    for (std::size_t k = 0; k < W; ++k) many.push_back(master.clone());
    const double lW = data_parallel_gradient(many, batch, plan, masked_only, 1, false, gW);
    EXPECT_NEAR(l1, lW, 1e-12);
    ASSERT_EQ(g1.size(), gW.size());
    EXPECT_LT(max_abs_diff(g1, gW), 1e-9);

    // single worker equals a direct full-batch backward pass
    auto direct = master.clone();
    direct.zero_grad();
    std::mt19937_64 r(0);
    auto loss = reconstruction_loss(direct.reconstruct(batch, &plan, false, r), batch, plan, data.schema,
                                    {masked_only});
    ad::backward(loss);
    EXPECT_EQ(max_abs_diff(direct.flat_grad(), g1), 0.0);
  }
}

INSTANTIATE_TEST_SUITE_P(Workers, DataParallel, ::testing::Values(2, 4));

TEST(Train, ZeroEpochsReturnsInitialWeights) {
  auto data = fixtures::small_data(6, 5);
  auto cfg = small_train(0);
  auto res = train<double>(data.sequences, data.schema, fixtures::tiny_config(5), cfg);
  EXPECT_TRUE(res.log.empty());
  EXPECT_EQ(res.checkpoint.epoch, 0);
  Model<double> fresh(fixtures::tiny_config(5), data.schema, cfg.seed);
  auto loaded = load_model<double>(res.checkpoint);
  for (const auto& n : fresh.names()) {
    auto a = fresh.param(n).data(), b = loaded.param(n).data();
    ASSERT_TRUE(std::equal(a.begin(), a.end(), b.begin(), b.end())) << n;
  }
}

TEST(Train, EmptyDatasetRejected) {
  auto data = fixtures::small_data(2, 5);
  EXPECT_THROW(train<double>({}, data.schema, fixtures::tiny_config(5), small_train(1)), EmptyDataset);
}

TEST(Train, SameSeedSameLog) {
  auto data = fixtures::small_data(12, 6);
  auto cfg = fixtures::tiny_config(6);
  cfg.dropout = 0.1;
  cfg.precision = Precision::f32;
  auto a = train<float>(data.sequences, data.schema, cfg, small_train(3));
  auto b = train<float>(data.sequences, data.schema, cfg, small_train(3));
  ASSERT_EQ(a.log.size(), 3u);
  for (std::size_t e = 0; e < 3; ++e) EXPECT_EQ(a.log[e].mean_loss, b.log[e].mean_loss);
  EXPECT_EQ(serialize_checkpoint(a.checkpoint), serialize_checkpoint(b.checkpoint));
}

TEST(Train, DataParallelTracksSingleWorker) {
  auto data = fixtures::small_data(16, 6);
  auto cfg = fixtures::tiny_config(6);
  auto tc = small_train(3, 8);
  auto one = train<double>(data.sequences, data.schema, cfg, tc);
  tc.workers = 2;
  auto two = train_data_parallel<double>(data.sequences, data.schema, cfg, tc);
  ASSERT_EQ(two.log.size(), 3u);
  for (std::size_t e = 0; e < 3; ++e) {
    EXPECT_NEAR(one.log[e].mean_loss, two.log[e].mean_loss, 1e-9);
    EXPECT_DOUBLE_EQ(two.log[e].worker_seconds, 2 * two.log[e].wall_seconds);
  }
}

namespace {

double window_mean(const std::vector<EpochLog>& log, std::size_t from, std::size_t n) {
  double s = 0;
  for (std::size_t i = from; i < from + n; ++i) s += log[i].mean_loss;
  return s / static_cast<double>(n);
}

}  // namespace

// Default architecture and optimizer on one repeated batch.
TEST(Train, RepeatedBatchHalvesLoss) {
  auto data = fixtures::small_data(8, 15, 5, 10);
  TrainConfig tc;
  tc.batch_size = 8;
  tc.seed = 3;
  Trainer<float> trainer(ModelConfig{}, data.schema, tc);
  auto log = trainer.run(data.sequences, 200);
  EXPECT_LT(log.back().mean_loss, 0.5 * log.front().mean_loss);
  for (std::size_t w = 0; w + 80 < log.size(); w += 40) EXPECT_LT(window_mean(log, w + 40, 40), window_mean(log, w, 40));
}

// Two post-norm layers converge within a unit-test budget; six need ~1200 steps.
TEST(Train, RepeatedBatchRecoversUnmaskedCodes) {
  auto data = fixtures::small_data(8, 15, 5, 10);
  ModelConfig cfg;
  cfg.layers = 2;
  TrainConfig tc;
  tc.batch_size = 8;
  tc.seed = 3;
  tc.lr = 1e-2;
  Trainer<float> trainer(cfg, data.schema, tc);
  trainer.run(data.sequences, 300);

  auto batch = make_batch(data.sequences, data.schema);
  std::mt19937_64 rng(8);
  auto plan = apply_mask(batch, cfg.mask_p, rng);
  auto pred = trainer.model().reconstruct(batch, &plan, false, rng);
  std::size_t hit = 0, total = 0;
  for (std::size_t k = 0; k < batch.n_cat; ++k) {
    const auto& logits = pred.categorical[k];
    const std::size_t V = logits.dim(2);
    for (std::size_t r = 0; r < batch.size * batch.t; ++r) {
      if (!batch.real[r] || plan.masked[r]) continue;
      auto row = logits.data().subspan(r * V, V);
      const auto best = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
      hit += best == batch.codes[r * batch.n_cat + k];
      ++total;
    }
  }
  ASSERT_GT(total, 0u);
  EXPECT_GE(static_cast<double>(hit) / static_cast<double>(total), 0.95) << hit << "/" << total;
}

TEST(Train, DivergenceCarriesLastGoodCheckpoint) {
  auto data = fixtures::small_data(6, 5);
  Trainer<double> trainer(fixtures::tiny_config(5), data.schema, small_train(1));
  trainer.run(data.sequences, 1);
  const auto step = trainer.step();
  trainer.model().param("in_proj").mutable_data()[0] = std::numeric_limits<double>::quiet_NaN();
  try {
    trainer.run(data.sequences, 1);
    FAIL() << "expected DivergenceError";
  } catch (const DivergenceError& e) {
    EXPECT_EQ(e.last_good().step, step);
    EXPECT_TRUE(e.last_good().has_tensor("in_proj"));
    EXPECT_EQ(e.exit_code(), 4);
  }
}

TEST(Checkpoint, RoundTripIsBitwise) {
  auto data = fixtures::small_data(6, 5);
  for (auto precision : {Precision::f32, Precision::f64}) {
    auto cfg = fixtures::tiny_config(5);
    cfg.precision = precision;
    Checkpoint ck = precision == Precision::f32
                        ? train<float>(data.sequences, data.schema, cfg, small_train(1)).checkpoint
                        : train<double>(data.sequences, data.schema, cfg, small_train(1)).checkpoint;
    const auto path = std::filesystem::temp_directory_path() / "caspr_ck_test.bin";
    save_checkpoint(ck, path);
    auto back = load_checkpoint(path);
    std::filesystem::remove(path);
    ASSERT_EQ(back.tensors.size(), ck.tensors.size());
    for (std::size_t i = 0; i < ck.tensors.size(); ++i) {
      EXPECT_EQ(back.tensors[i].name, ck.tensors[i].name);
      EXPECT_EQ(back.tensors[i].dims, ck.tensors[i].dims);
      EXPECT_EQ(back.tensors[i].data, ck.tensors[i].data);  // NaN-free, so == is bitwise
    }
    EXPECT_EQ(back.rng_state, ck.rng_state);
    EXPECT_EQ(back.step, ck.step);
    EXPECT_EQ(back.schema.to_json(), ck.schema.to_json());
    EXPECT_EQ(serialize_checkpoint(back), serialize_checkpoint(ck));
  }
}

TEST(Checkpoint, CorruptionIsDetected) {
  auto data = fixtures::small_data(4, 5);
  auto bytes = serialize_checkpoint(train<double>(data.sequences, data.schema, fixtures::tiny_config(5),
                                                  small_train(0)).checkpoint);
  for (std::size_t cut : {std::size_t{3}, std::size_t{7}, std::size_t{20}, bytes.size() - 1})
    EXPECT_THROW(deserialize_checkpoint(std::string_view(bytes).substr(0, cut)), TruncatedFile) << cut;
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(deserialize_checkpoint(bad), BadMagic);
  auto newer = bytes;
  newer[5] = 2;
  EXPECT_THROW(deserialize_checkpoint(newer), VersionMismatch);
  EXPECT_THROW(load_checkpoint("/nonexistent/ck.bin"), IoError);
}

TEST(Checkpoint, ResumeContinuesUninterruptedLog) {
  auto data = fixtures::small_data(10, 6);
  auto cfg = fixtures::tiny_config(6);
  cfg.dropout = 0.1;
  auto tc = small_train(4, 3);
  auto full = train<double>(data.sequences, data.schema, cfg, tc);

  Trainer<double> first(cfg, data.schema, tc);
  auto log = first.run(data.sequences, 2);
  const auto path = std::filesystem::temp_directory_path() / "caspr_resume_test.bin";
  save_checkpoint(first.checkpoint(), path);
  Trainer<double> second(load_checkpoint(path), tc);
  std::filesystem::remove(path);
  for (auto& e : second.run(data.sequences, 2)) log.push_back(e);

  ASSERT_EQ(log.size(), full.log.size());
  for (std::size_t e = 0; e < log.size(); ++e) {
    EXPECT_EQ(log[e].epoch, full.log[e].epoch);
    EXPECT_EQ(log[e].mean_loss, full.log[e].mean_loss) << "epoch " << e;
  }
  EXPECT_EQ(serialize_checkpoint(second.checkpoint()), serialize_checkpoint(full.checkpoint));
}

TEST(LossLog, CsvFormat) {
  std::vector<EpochLog> log{{1, 0.5, 0.25, 0.25}, {2, 0.125, 1.0, 1.0}};
  EXPECT_EQ(format_loss_log(log), "epoch,mean_loss,wall_seconds\n1,0.5,0.25\n2,0.125,1\n");
}
