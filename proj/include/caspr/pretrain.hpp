// Copyright (c) 2026 The caspr Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Masked entity recovery pretraining. A random subset of real positions is
// zeroed at the model input, the decoder reconstructs the original step
// values, and the loss (squared error for numerics, cross-entropy for
// categoricals, averaged over non-pad positions) is minimized with Adam.
// Training may be spread over W synchronous workers: every step each worker
// differentiates its shard against identical weights, the shard gradients
// are averaged in worker order, and a single Adam update is broadcast.

#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <exception>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "caspr/autodiff.hpp"
#include "caspr/checkpoint.hpp"
#include "caspr/error.hpp"
#include "caspr/ingest.hpp"
#include "caspr/transformer.hpp"

namespace caspr {

enum class MaskMode { bernoulli, exact };

struct TrainConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int batch_size = 256;
  int epochs = 1;
  std::uint64_t seed = 0;
  int workers = 1;
  MaskMode mask_mode = MaskMode::bernoulli;
  bool masked_only_loss = false;

  void validate() const {
    if (!(lr > 0.0)) throw ConfigError("lr must be > 0");
    if (workers < 1) throw ConfigError("workers must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (batch_size < workers)
      throw ConfigError("batch_size (" + std::to_string(batch_size) + ") smaller than workers (" +
                        std::to_string(workers) + ") would starve shards");
    if (epochs < 0) throw ConfigError("epochs must be >= 0");
  }

  nlohmann::ordered_json to_json() const {
    return {{"lr", lr},
            {"beta1", beta1},
            {"beta2", beta2},
            {"eps", eps},
            {"batch_size", batch_size},
            {"epochs", epochs},
            {"seed", seed},
            {"workers", workers},
            {"mask_mode", mask_mode == MaskMode::bernoulli ? "bernoulli" : "exact"},
            {"masked_only_loss", masked_only_loss}};
  }

  static TrainConfig from_json(const nlohmann::ordered_json& j) {
    TrainConfig c;
    c.lr = j.value("lr", c.lr);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.eps = j.value("eps", c.eps);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.epochs = j.value("epochs", c.epochs);
    c.seed = j.value("seed", c.seed);
    c.workers = j.value("workers", c.workers);
    if (j.contains("mask_mode")) {
      auto m = j.at("mask_mode").get<std::string>();
      if (m == "bernoulli")
        c.mask_mode = MaskMode::bernoulli;
      else if (m == "exact")
        c.mask_mode = MaskMode::exact;
      else
        throw ConfigError("mask_mode must be bernoulli or exact, got '" + m + "'");
    }
    c.masked_only_loss = j.value("masked_only_loss", c.masked_only_loss);
    return c;
  }
};

// ---------------------------------------------------------------------------
// Masking

/// Bernoulli(mask_p) per real position; when nothing was drawn for a
/// sequence with real steps and mask_p > 0, one uniformly chosen real
/// position is forced. `exact` mode masks round(mask_p * n_real) positions
/// (at least one). Pad positions are never masked.
template <typename Rng>
MaskPlan apply_mask(const Batch& batch, double mask_p, Rng& rng, MaskMode mode = MaskMode::bernoulli,
                    bool force_one = true) {
  if (!(mask_p >= 0.0 && mask_p <= 1.0)) throw ConfigError("mask_p must lie in [0, 1]");
  MaskPlan plan;
  plan.size = batch.size;
  plan.t = batch.t;
  plan.masked.assign(batch.size * batch.t, 0);
  if (mask_p == 0.0) return plan;
  std::bernoulli_distribution coin(mask_p);
  std::vector<std::size_t> real;
  for (std::size_t b = 0; b < batch.size; ++b) {
    real.clear();
    for (std::size_t i = 0; i < batch.t; ++i)
      if (batch.is_real(b, i)) real.push_back(i);
    if (real.empty()) continue;
    if (mode == MaskMode::bernoulli) {
      bool any = false;
      for (auto i : real) any |= (plan.masked[b * batch.t + i] = coin(rng) ? 1 : 0);
      if (!any && force_one) {
        std::uniform_int_distribution<std::size_t> pick(0, real.size() - 1);
        plan.masked[b * batch.t + real[pick(rng)]] = 1;
      }
    } else {
      auto k = static_cast<std::size_t>(std::llround(mask_p * static_cast<double>(real.size())));
      k = std::clamp<std::size_t>(k, 1, real.size());
      for (std::size_t j = 0; j < k; ++j) {
        std::uniform_int_distribution<std::size_t> pick(j, real.size() - 1);
        std::swap(real[j], real[pick(rng)]);
        plan.masked[b * batch.t + real[j]] = 1;
      }
    }
  }
  return plan;
}

// ---------------------------------------------------------------------------
// Loss

struct LossOptions {
  bool masked_only = false;
  /// Divisor of the summed per-position loss. 0 means "number of scored
  /// positions in this batch"; data-parallel shards pass the global count.
  double normalizer = 0.0;
  /// Extra multiplier (W for data-parallel shards, so averaging recovers
  /// the full-batch gradient).
  double multiplier = 1.0;
};

/// Positions that contribute to the loss.
inline std::vector<std::uint8_t> scored_positions(const Batch& batch, const MaskPlan& plan, bool masked_only) {
  std::vector<std::uint8_t> s(batch.size * batch.t, 0);
  for (std::size_t b = 0; b < batch.size; ++b)
    for (std::size_t i = 0; i < batch.t; ++i)
      s[b * batch.t + i] = batch.is_real(b, i) && (!masked_only || plan.at(b, i));
  return s;
}

/// mean over scored positions of [sum_numeric (pred - x)^2 + sum_categorical CE].
template <typename T>
ad::Tensor<T> reconstruction_loss(const Reconstruction<T>& pred, const Batch& batch, const MaskPlan& plan,
                                  const FittedSchema& schema, const LossOptions& opts = {}) {
  if (pred.numeric.size() != batch.n_num || pred.categorical.size() != batch.n_cat)
    throw ShapeMismatch("reconstruction heads do not match the batch column layout");
  const auto scored = scored_positions(batch, plan, opts.masked_only);
  const double count = std::accumulate(scored.begin(), scored.end(), 0.0);
  const double norm = opts.normalizer > 0.0 ? opts.normalizer : count;
  const std::size_t P = batch.size * batch.t;
  if (count == 0.0 || norm == 0.0) return ad::Tensor<T>::scalar(T(0));

  std::vector<T> w(P);
  for (std::size_t r = 0; r < P; ++r) w[r] = scored[r] ? static_cast<T>(opts.multiplier / norm) : T(0);

  ad::Tensor<T> total;
  auto accumulate_term = [&](const ad::Tensor<T>& term, const std::string& head) {
    if (!std::isfinite(static_cast<double>(term.item())))
      throw NumericError("non-finite reconstruction loss in head '" + head + "'");
    total = total.defined() ? ad::add(total, term) : term;
  };
  const auto nums = schema.numeric_columns();
  for (std::size_t k = 0; k < batch.n_num; ++k) {
    std::vector<T> target(P);
    for (std::size_t r = 0; r < P; ++r) target[r] = static_cast<T>(batch.numeric[r * batch.n_num + k]);
    accumulate_term(ad::weighted_squared_error(pred.numeric[k], target, w), nums.at(k));
  }
  const auto cats = schema.categorical_columns();
  for (std::size_t k = 0; k < batch.n_cat; ++k) {
    std::vector<int> target(P);
    for (std::size_t r = 0; r < P; ++r) target[r] = batch.codes[r * batch.n_cat + k];
    accumulate_term(ad::weighted_cross_entropy(pred.categorical[k], target, w), cats.at(k));
  }
  return total.defined() ? total : ad::Tensor<T>::scalar(T(0));
}

// ---------------------------------------------------------------------------
// Adam

template <typename T>
struct AdamState {
  std::vector<std::vector<T>> m, v;  // per parameter, names() order
  std::int64_t step = 0;

  template <typename M>
  static AdamState zeros_like(const M& model) {
    AdamState s;
    for (const auto& name : model.names()) {
      s.m.emplace_back(model.param(name).size(), T(0));
      s.v.emplace_back(model.param(name).size(), T(0));
    }
    return s;
  }
};

/// One bias-corrected Adam update of `theta` in place (`step` >= 1).
template <typename T>
void adam_update(std::span<T> theta, std::span<const T> grad, std::span<T> m, std::span<T> v, const TrainConfig& cfg,
                 std::int64_t step) {
  if (step < 1) throw ContractViolation("adam step must be >= 1");
  const T b1 = T(cfg.beta1), b2 = T(cfg.beta2), lr = T(cfg.lr), eps = T(cfg.eps);
  const T c1 = T(1) - static_cast<T>(std::pow(cfg.beta1, static_cast<double>(step)));
  const T c2 = T(1) - static_cast<T>(std::pow(cfg.beta2, static_cast<double>(step)));
  for (std::size_t i = 0; i < theta.size(); ++i) {
    m[i] = b1 * m[i] + (T(1) - b1) * grad[i];
    v[i] = b2 * v[i] + (T(1) - b2) * grad[i] * grad[i];
    const T mhat = m[i] / c1, vhat = v[i] / c2;
    theta[i] -= lr * mhat / (std::sqrt(vhat) + eps);
  }
}

/// Applies a flat gradient (names() order) to every model parameter.
template <typename T>
void adam_step(Model<T>& model, std::span<const T> flat_grad, AdamState<T>& state, const TrainConfig& cfg) {
  if (flat_grad.size() != model.parameter_count())
    throw ShapeMismatch("gradient has " + std::to_string(flat_grad.size()) + " entries, model has " +
                        std::to_string(model.parameter_count()));
  ++state.step;
  std::size_t off = 0;
  const auto& names = model.names();
  for (std::size_t k = 0; k < names.size(); ++k) {
    auto theta = model.param(names[k]).mutable_data();
    adam_update<T>(theta, flat_grad.subspan(off, theta.size()), state.m[k], state.v[k], cfg, state.step);
    off += theta.size();
  }
}

// ---------------------------------------------------------------------------
// Gradients

inline Batch slice_batch(const Batch& src, std::size_t begin, std::size_t end) {
  Batch b;
  b.size = end - begin;
  b.t = src.t;
  b.n_num = src.n_num;
  b.n_cat = src.n_cat;
  b.n_snum = src.n_snum;
  b.n_scat = src.n_scat;
  auto cut = [&](const auto& v, std::size_t per) {
    using V = std::decay_t<decltype(v)>;
    return V(v.begin() + begin * per, v.begin() + end * per);
  };
  if (!src.entities.empty()) b.entities = cut(src.entities, 1);
  b.numeric = cut(src.numeric, src.t * src.n_num);
  b.codes = cut(src.codes, src.t * src.n_cat);
  b.real = cut(src.real, src.t);
  b.static_numeric = cut(src.static_numeric, src.n_snum);
  b.static_codes = cut(src.static_codes, src.n_scat);
  return b;
}

inline MaskPlan slice_plan(const MaskPlan& src, std::size_t begin, std::size_t end) {
  MaskPlan p;
  p.size = end - begin;
  p.t = src.t;
  p.masked.assign(src.masked.begin() + begin * src.t, src.masked.begin() + end * src.t);
  return p;
}

/// Shard k of W over n entities: contiguous, sizes differ by at most one.
inline std::pair<std::size_t, std::size_t> shard_range(std::size_t n, std::size_t W, std::size_t k) {
  const std::size_t base = n / W, extra = n % W;
  const std::size_t begin = k * base + std::min(k, extra);
  return {begin, begin + base + (k < extra ? 1 : 0)};
}

/// Loss and averaged gradient of one global batch computed by
/// replicas.size() synchronous workers. Every replica must hold identical
/// weights. Returns the batch loss; `grad_out` receives the flat gradient.
/// Worker k draws dropout noise from Rng(step_seed + k).
template <typename T>
double data_parallel_gradient(std::vector<Model<T>>& replicas, const Batch& batch, const MaskPlan& plan,
                              bool masked_only, std::uint64_t step_seed, bool train, std::vector<T>& grad_out) {
  const std::size_t W = replicas.size();
  if (W == 0) throw ConfigError("need at least one worker");
  const auto scored = scored_positions(batch, plan, masked_only);
  const double global = std::accumulate(scored.begin(), scored.end(), 0.0);

  std::vector<std::vector<T>> grads(W);
  std::vector<double> losses(W, 0.0);
  std::vector<std::exception_ptr> errors(W);
  auto work = [&](std::size_t k) {
    try {
      auto& model = replicas[k];
      model.zero_grad();
      auto [begin, end] = shard_range(batch.size, W, k);
      if (begin == end) {
        grads[k].assign(model.parameter_count(), T(0));
        return;
      }
      const Batch shard = slice_batch(batch, begin, end);
      const MaskPlan shard_plan = slice_plan(plan, begin, end);
      std::mt19937_64 rng(step_seed + k);
      auto pred = model.reconstruct(shard, &shard_plan, train, rng);
      LossOptions opts{masked_only, global, static_cast<double>(W)};
      auto loss = reconstruction_loss(pred, shard, shard_plan, model.schema(), opts);
      ad::backward(loss);
      losses[k] = static_cast<double>(loss.item()) / static_cast<double>(W);
      grads[k] = model.flat_grad();
    } catch (...) {
      errors[k] = std::current_exception();
    }
  };
  {
    std::vector<std::jthread> pool;
    for (std::size_t k = 1; k < W; ++k) pool.emplace_back(work, k);
    work(0);
  }  // barrier: all shards done
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);

  // fixed worker-order reduction
  grad_out = std::move(grads[0]);
  double loss = losses[0];
  for (std::size_t k = 1; k < W; ++k) {
    for (std::size_t i = 0; i < grad_out.size(); ++i) grad_out[i] += grads[k][i];
    loss += losses[k];
  }
  const T inv = T(1) / static_cast<T>(W);
  if (W > 1)
    for (auto& g : grad_out) g *= inv;
  return loss;
}

// ---------------------------------------------------------------------------
// Training

struct EpochLog {
  int epoch = 0;
  double mean_loss = 0.0;
  double wall_seconds = 0.0;
  double worker_seconds = 0.0;  // workers x wall
};

inline std::string format_loss_log(const std::vector<EpochLog>& log) {
  std::string out = "epoch,mean_loss,wall_seconds\n";
  for (const auto& e : log)
    out += std::to_string(e.epoch) + "," + format_real(e.mean_loss) + "," + format_real(e.wall_seconds) + "\n";
  return out;
}

class DivergenceError : public NumericError {
 public:
  DivergenceError(const std::string& what, Checkpoint last_good)
      : NumericError(what), last_good_(std::move(last_good)) {}
  const char* kind() const noexcept override { return "DivergenceError"; }
  const Checkpoint& last_good() const { return last_good_; }

 private:
  Checkpoint last_good_;
};

inline std::string rng_to_string(const std::mt19937_64& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}
inline std::mt19937_64 rng_from_string(const std::string& s) {
  std::mt19937_64 rng;
  std::istringstream is(s);
  is >> rng;
  if (!is) throw ParseError("malformed RNG state in checkpoint");
  return rng;
}

/// Owns the model replicas, optimizer state and RNG of one training run.
template <typename T>
class Trainer {
 public:
  Trainer(const ModelConfig& model_cfg, const FittedSchema& schema, const TrainConfig& cfg)
      : cfg_(cfg), master_(model_cfg, schema, cfg.seed), rng_(cfg.seed ^ 0x5DEECE66DULL) {
    cfg_.validate();
    adam_ = AdamState<T>::zeros_like(master_);
  }

  /// Resumes from a checkpoint. `cfg` supplies the run settings (workers,
  /// epochs); optimizer, RNG and counters come from the checkpoint.
  Trainer(const Checkpoint& ck, const TrainConfig& cfg)
      : cfg_(cfg), master_(load_model<T>(ck)), rng_(rng_from_string(ck.rng_state)), epoch_(ck.epoch) {
    cfg_.validate();
    adam_ = AdamState<T>::zeros_like(master_);
    adam_.step = ck.step;
    const auto& names = master_.names();
    for (std::size_t k = 0; k < names.size(); ++k) {
      if (ck.has_tensor("adam.m." + names[k])) {
        from_record<T>(ck.tensor("adam.m." + names[k]), std::span<T>(adam_.m[k]));
        from_record<T>(ck.tensor("adam.v." + names[k]), std::span<T>(adam_.v[k]));
      }
    }
  }

  const Model<T>& model() const { return master_; }
  Model<T>& model() { return master_; }
  int epoch() const { return epoch_; }
  std::int64_t step() const { return adam_.step; }
  const TrainConfig& config() const { return cfg_; }

  /// One pass over `data` in a seeded random order.
  EpochLog run_epoch(const std::vector<EntitySequence>& data) {
    if (data.empty()) throw EmptyDataset("cannot train on an empty dataset");
    const auto W = static_cast<std::size_t>(cfg_.workers);
    ensure_replicas(W);
    const auto start = std::chrono::steady_clock::now();

    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng_);

    double loss_sum = 0.0;
    std::size_t batches = 0;
    const auto B = static_cast<std::size_t>(cfg_.batch_size);
    std::vector<EntitySequence> chunk;
    std::vector<T> grad;
    for (std::size_t begin = 0; begin < order.size(); begin += B) {
      const std::size_t end = std::min(order.size(), begin + B);
      chunk.clear();
      for (std::size_t i = begin; i < end; ++i) chunk.push_back(data[order[i]]);
      const Batch batch = make_batch(chunk, master_.schema());
      const MaskPlan plan = apply_mask(batch, master_.config().mask_p, rng_, cfg_.mask_mode);
      const std::uint64_t step_seed = rng_();

      double loss = 0.0;
      try {
        loss = data_parallel_gradient(replicas_, batch, plan, cfg_.masked_only_loss, step_seed, true, grad);
      } catch (const NumericError& e) {
        throw DivergenceError(std::string("training diverged: ") + e.what(), checkpoint());
      }
      if (!std::isfinite(loss))
        throw DivergenceError("training diverged: loss is " + std::to_string(loss) + " at step " +
                                  std::to_string(adam_.step + 1),
                              checkpoint());
      adam_step<T>(master_, grad, adam_, cfg_);
      for (std::size_t k = 1; k < replicas_.size(); ++k) replicas_[k].copy_values_from(master_);
      loss_sum += loss;
      ++batches;
    }
    ++epoch_;
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return {epoch_, loss_sum / static_cast<double>(batches), wall, wall * static_cast<double>(W)};
  }

  std::vector<EpochLog> run(const std::vector<EntitySequence>& data, int epochs) {
    std::vector<EpochLog> log;
    for (int e = 0; e < epochs; ++e) log.push_back(run_epoch(data));
    return log;
  }

  Checkpoint checkpoint() const {
    Checkpoint ck;
    ck.model = master_.config();
    ck.schema = master_.schema();
    ck.train = cfg_.to_json();
    ck.rng_state = rng_to_string(rng_);
    ck.epoch = epoch_;
    ck.step = adam_.step;
    const auto& names = master_.names();
    for (const auto& name : names) {
      const auto& p = master_.param(name);
      ck.tensors.push_back(to_record<T>(name, p.shape(), p.data()));
    }
    for (std::size_t k = 0; k < names.size(); ++k) {
      const ad::Shape shape = master_.param(names[k]).shape();
      ck.tensors.push_back(to_record<T>("adam.m." + names[k], shape, std::span<const T>(adam_.m[k])));
      ck.tensors.push_back(to_record<T>("adam.v." + names[k], shape, std::span<const T>(adam_.v[k])));
    }
    return ck;
  }

 private:
  void ensure_replicas(std::size_t W) {
    if (replicas_.size() == W) return;
    replicas_.clear();
    replicas_.push_back(master_);  // shares parameter storage with master_
    for (std::size_t k = 1; k < W; ++k) replicas_.push_back(master_.clone());
  }

  TrainConfig cfg_;
  Model<T> master_;
  std::vector<Model<T>> replicas_;
  AdamState<T> adam_;
  std::mt19937_64 rng_;
  int epoch_ = 0;
};

template <typename T>
struct TrainResult {
  Checkpoint checkpoint;
  std::vector<EpochLog> log;
};

/// Single- or multi-worker pretraining (cfg.workers). Deterministic given
/// the seed for a fixed worker count.
template <typename T>
TrainResult<T> train(const std::vector<EntitySequence>& data, const FittedSchema& schema, const ModelConfig& model_cfg,
                     const TrainConfig& cfg) {
  if (data.empty()) throw EmptyDataset("cannot train on an empty dataset");
  Trainer<T> trainer(model_cfg, schema, cfg);
  auto log = trainer.run(data, cfg.epochs);
  return {trainer.checkpoint(), std::move(log)};
}

/// train() with W >= 2 synchronous workers.
template <typename T>
TrainResult<T> train_data_parallel(const std::vector<EntitySequence>& data, const FittedSchema& schema,
                                   const ModelConfig& model_cfg, const TrainConfig& cfg) {
  if (cfg.workers < 2) throw ConfigError("data-parallel training needs workers >= 2");
  return train<T>(data, schema, model_cfg, cfg);
}

}  // namespace caspr
