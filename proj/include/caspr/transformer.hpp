// Copyright (c) 2026 The caspr Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Encoder-decoder transformer over per-entity activity sequences.
//
// Each position is the vector [i/t, numerics..., categorical embeddings...],
// projected to the hidden width. Blocks are post-norm: x = LN(x + Drop(F(x))).
// The encoder self-attends over real positions; the decoder adds a causal
// mask to its self-attention and cross-attends over the encoder output. The
// entity embedding pools encoder outputs, appends the static attributes and
// runs two dense layers.

#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "caspr/autodiff.hpp"
#include "caspr/error.hpp"
#include "caspr/ingest.hpp"

namespace caspr {

enum class Precision { f32, f64 };
enum class Pooling { mean, last, max };

inline std::string_view to_string(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }
inline Precision precision_from_string(std::string_view s) {
  if (s == "f32") return Precision::f32;
  if (s == "f64") return Precision::f64;
  throw ConfigError("precision must be f32 or f64, got '" + std::string(s) + "'");
}
inline std::string_view to_string(Pooling p) {
  switch (p) {
    case Pooling::mean: return "mean";
    case Pooling::last: return "last";
    case Pooling::max: return "max";
  }
  return "?";
}
inline Pooling pooling_from_string(std::string_view s) {
  for (auto p : {Pooling::mean, Pooling::last, Pooling::max})
    if (to_string(p) == s) return p;
  throw ConfigError("pooling must be mean, last or max, got '" + std::string(s) + "'");
}

struct ModelConfig {
  int hidden = 16;
  int ff_dim = 32;
  int layers = 6;
  int heads = 8;
  double dropout = 0.1;
  int t = 15;
  double mask_p = 0.3;
  int emb_out = 16;
  Precision precision = Precision::f32;
  Pooling pooling = Pooling::mean;

  int d_k() const { return hidden / heads; }

  void validate() const {
    if (hidden < 1 || heads < 1 || hidden % heads != 0)
      throw ConfigError("hidden (" + std::to_string(hidden) + ") must be a positive multiple of heads (" +
                        std::to_string(heads) + ")");
    if (ff_dim < 1 || layers < 0 || t < 1 || emb_out < 1) throw ConfigError("model dimensions must be positive");
    if (!(mask_p >= 0.0 && mask_p <= 1.0)) throw ConfigError("mask_p must lie in [0, 1]");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
  }

  nlohmann::ordered_json to_json() const {
    return {{"hidden", hidden},   {"ff_dim", ff_dim},   {"layers", layers},
            {"heads", heads},     {"dropout", dropout}, {"t", t},
            {"mask_p", mask_p},   {"emb_out", emb_out}, {"precision", std::string(to_string(precision))},
            {"pooling", std::string(to_string(pooling))}};
  }

  /// Missing keys keep their defaults.
  static ModelConfig from_json(const nlohmann::ordered_json& j) {
    ModelConfig c;
    c.hidden = j.value("hidden", c.hidden);
    c.ff_dim = j.value("ff_dim", c.ff_dim);
    c.layers = j.value("layers", c.layers);
    c.heads = j.value("heads", c.heads);
    c.dropout = j.value("dropout", c.dropout);
    c.t = j.value("t", c.t);
    c.mask_p = j.value("mask_p", c.mask_p);
    c.emb_out = j.value("emb_out", c.emb_out);
    if (j.contains("precision")) c.precision = precision_from_string(j.at("precision").get<std::string>());
    if (j.contains("pooling")) c.pooling = pooling_from_string(j.at("pooling").get<std::string>());
    c.validate();
    return c;
  }
};

/// Encoded sequences laid out densely. Slot t-1 is the most recent step;
/// pad slots have real == 0 and zero payload.
struct Batch {
  std::size_t size = 0, t = 0, n_num = 0, n_cat = 0, n_snum = 0, n_scat = 0;
  std::vector<std::string> entities;
  std::vector<double> numeric;          // [B, t, n_num]
  std::vector<int> codes;               // [B, t, n_cat]
  std::vector<std::uint8_t> real;       // [B, t]
  std::vector<double> static_numeric;   // [B, n_snum]
  std::vector<int> static_codes;        // [B, n_scat]

  bool is_real(std::size_t b, std::size_t i) const { return real[b * t + i] != 0; }
  std::size_t real_count() const {
    std::size_t n = 0;
    for (auto r : real) n += r;
    return n;
  }
};

inline Batch make_batch(std::span<const EntitySequence> seqs, const FittedSchema& fitted) {
  Batch b;
  b.size = seqs.size();
  b.n_num = fitted.numeric_columns().size();
  b.n_cat = fitted.categorical_columns().size();
  b.n_snum = fitted.static_numeric_columns().size();
  b.n_scat = fitted.static_categorical_columns().size();
  if (seqs.empty()) return b;
  b.t = static_cast<std::size_t>(seqs[0].length());
  b.numeric.assign(b.size * b.t * b.n_num, 0.0);
  b.codes.assign(b.size * b.t * b.n_cat, 0);
  b.real.assign(b.size * b.t, 0);
  b.static_numeric.assign(b.size * b.n_snum, 0.0);
  b.static_codes.assign(b.size * b.n_scat, 0);
  for (std::size_t e = 0; e < seqs.size(); ++e) {
    const auto& s = seqs[e];
    if (static_cast<std::size_t>(s.length()) != b.t)
      throw SchemaMismatch("sequences in one batch must share length t (" + std::to_string(b.t) + " vs " +
                           std::to_string(s.length()) + ")");
    if (s.static_numeric.size() != b.n_snum || s.static_codes.size() != b.n_scat)
      throw SchemaMismatch("entity '" + s.entity + "' statics do not match the fitted schema");
    b.entities.push_back(s.entity);
    for (std::size_t k = 0; k < s.steps.size(); ++k) {
      const auto& row = s.steps[k];
      if (row.numeric.size() != b.n_num || row.codes.size() != b.n_cat)
        throw SchemaMismatch("entity '" + s.entity + "' step width does not match the fitted schema");
      const std::size_t slot = static_cast<std::size_t>(s.pad_len) + k;
      b.real[e * b.t + slot] = 1;
      std::copy(row.numeric.begin(), row.numeric.end(), b.numeric.begin() + (e * b.t + slot) * b.n_num);
      std::copy(row.codes.begin(), row.codes.end(), b.codes.begin() + (e * b.t + slot) * b.n_cat);
    }
    std::copy(s.static_numeric.begin(), s.static_numeric.end(), b.static_numeric.begin() + e * b.n_snum);
    std::copy(s.static_codes.begin(), s.static_codes.end(), b.static_codes.begin() + e * b.n_scat);
  }
  return b;
}

/// Positions replaced by zero vectors at the model input. [B, t]; pad never set.
struct MaskPlan {
  std::size_t size = 0, t = 0;
  std::vector<std::uint8_t> masked;

  bool at(std::size_t b, std::size_t i) const { return !masked.empty() && masked[b * t + i] != 0; }
  std::size_t count() const {
    std::size_t n = 0;
    for (auto m : masked) n += m;
    return n;
  }
};

struct EmbeddingRecord {
  std::string entity;
  std::vector<double> vector;
};

inline constexpr double kMaskedLogit = -1e9;

/// Additive mask value that marks a disallowed (query, key) pair.
template <typename T>
bool is_disallowed(T v) {
  return v <= T(kMaskedLogit / 2);
}

/// softmax(Q K^T / sqrt(d_k) + mask) V for Q [N, tq, dk], K [N, tk, dk],
/// V [N, tk, dv] and an additive mask [N, tq, tk]. A query row with no
/// allowed key raises NumericError. `weights_out`, when given, receives the
/// post-softmax attention weights.
template <typename T>
ad::Tensor<T> scaled_dot_attention(const ad::Tensor<T>& q, const ad::Tensor<T>& k, const ad::Tensor<T>& v,
                                   const ad::Tensor<T>& mask, ad::Tensor<T>* weights_out = nullptr) {
  if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3 || q.dim(2) != k.dim(2) || k.dim(1) != v.dim(1) ||
      q.dim(0) != k.dim(0) || k.dim(0) != v.dim(0))
    ad::shape_error("scaled_dot_attention", q.shape(), k.shape());
  const std::size_t N = q.dim(0), tq = q.dim(1), tk = k.dim(1);
  ad::Tensor<T> logits = ad::scale(ad::bmm(q, ad::transpose(k)), T(1) / std::sqrt(static_cast<T>(q.dim(2))));
  if (mask.defined()) {
    if (mask.shape() != ad::Shape{N, tq, tk}) ad::shape_error("attention mask", logits.shape(), mask.shape());
    std::vector<T> clean(mask.data().begin(), mask.data().end());
    for (std::size_t r = 0; r < N * tq; ++r) {
      bool any = false;
      for (std::size_t j = 0; j < tk; ++j) {
        T& m = clean[r * tk + j];
        if (is_disallowed(m))
          m = T(kMaskedLogit);
        else
          any = true;
      }
      if (!any) throw NumericError("attention row " + std::to_string(r) + " has no attendable position");
    }
    logits = ad::add(logits, ad::Tensor<T>::from(mask.shape(), std::move(clean)));
  }
  ad::Tensor<T> weights = ad::softmax(logits, 2);
  if (weights_out) *weights_out = weights;
  return ad::bmm(weights, v);
}

/// Additive masks for one batch, repeated per head: [B*H, t, t].
template <typename T>
struct AttentionMasks {
  ad::Tensor<T> encoder;       // key must be real
  ad::Tensor<T> decoder_self;  // key real and key <= query
  ad::Tensor<T> cross;         // key (encoder position) must be real
};

/// Pad query rows attend only to themselves, so no row is empty; their
/// outputs never reach real positions, the loss or the pooled embedding.
template <typename T>
AttentionMasks<T> make_attention_masks(const Batch& batch, std::size_t heads) {
  const std::size_t B = batch.size, t = batch.t;
  auto build = [&](bool causal) {
    std::vector<T> m(B * heads * t * t, T(kMaskedLogit));
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t h = 0; h < heads; ++h) {
        T* base = m.data() + (b * heads + h) * t * t;
        for (std::size_t i = 0; i < t; ++i) {
          if (!batch.is_real(b, i)) {
            base[i * t + i] = T(0);
            continue;
          }
          for (std::size_t j = 0; j < t; ++j)
            if (batch.is_real(b, j) && (!causal || j <= i)) base[i * t + j] = T(0);
        }
      }
    return ad::Tensor<T>::from({B * heads, t, t}, std::move(m));
  };
  AttentionMasks<T> out;
  out.encoder = build(false);
  out.decoder_self = build(true);
  out.cross = out.encoder;
  return out;
}

template <typename T>
struct Reconstruction {
  std::vector<ad::Tensor<T>> numeric;      // per numeric column [B, t, 1]
  std::vector<ad::Tensor<T>> categorical;  // per categorical column [B, t, V+1]
};

template <typename T>
class Model {
 public:
  using Tensor = ad::Tensor<T>;
  using Rng = std::mt19937_64;

  Model(ModelConfig config, FittedSchema schema, std::uint64_t seed)
      : config_(std::move(config)), schema_(std::move(schema)) {
    config_.validate();
    declare_parameters();
    Rng rng(seed);
    initialize(rng);
  }

  const ModelConfig& config() const { return config_; }
  const FittedSchema& schema() const { return schema_; }

  /// Parameters in a fixed, deterministic order.
  const std::vector<std::string>& names() const { return names_; }
  Tensor& param(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw SchemaMismatch("model has no parameter '" + name + "'");
    return it->second;
  }
  const Tensor& param(const std::string& name) const { return const_cast<Model*>(this)->param(name); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& name : names_) n += params_.at(name).size();
    return n;
  }

  void zero_grad() {
    for (auto& [_, p] : params_) p.zero_grad();
  }

  /// All gradients concatenated in names() order (zeros where absent).
  std::vector<T> flat_grad() const {
    std::vector<T> out;
    out.reserve(parameter_count());
    for (const auto& name : names_) {
      const auto& p = params_.at(name);
      if (p.has_grad())
        out.insert(out.end(), p.grad().begin(), p.grad().end());
      else
        out.insert(out.end(), p.size(), T(0));
    }
    return out;
  }

  /// Deep copy with independent parameter storage.
  Model clone() const {
    Model m(*this);
    for (auto& [name, p] : m.params_) {
      p = Tensor::from(p.shape(), std::vector<T>(p.data().begin(), p.data().end()), true);
    }
    return m;
  }

  void copy_values_from(const Model& other) {
    for (const auto& name : names_) {
      auto src = other.param(name).data();
      auto dst = param(name).mutable_data();
      std::copy(src.begin(), src.end(), dst.begin());
    }
  }

  // -------------------------------------------------------------------------
  // Forward pieces

  /// [B, t, hidden]. Pad slots and slots masked by `plan` enter as zero
  /// vectors; the position feature of slot i (0-based) is (i+1)/t.
  Tensor project_inputs(const Batch& batch, const MaskPlan* plan = nullptr) const {
    check_batch(batch);
    const std::size_t B = batch.size, t = batch.t, nn = batch.n_num;
    const auto cats = schema_.categorical_columns();
    std::vector<std::uint8_t> visible(B * t);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < t; ++i) visible[b * t + i] = batch.is_real(b, i) && !(plan && plan->at(b, i));

    std::vector<T> dense(B * t * (1 + nn), T(0));
    for (std::size_t r = 0; r < B * t; ++r) {
      if (!visible[r]) continue;
      dense[r * (1 + nn)] = static_cast<T>(static_cast<double>(r % t + 1) / static_cast<double>(t));
      for (std::size_t k = 0; k < nn; ++k) dense[r * (1 + nn) + 1 + k] = static_cast<T>(batch.numeric[r * nn + k]);
    }
    std::vector<Tensor> parts{Tensor::from({B, t, 1 + nn}, std::move(dense))};
    for (std::size_t c = 0; c < cats.size(); ++c) {
      std::vector<int> codes(B * t);
      for (std::size_t r = 0; r < B * t; ++r) codes[r] = visible[r] ? batch.codes[r * batch.n_cat + c] : 0;
      parts.push_back(ad::embedding(param("emb." + cats[c]), codes, {B, t}));
    }
    Tensor x = parts.size() == 1 ? parts[0] : ad::concat(parts, 2);
    const std::size_t W = x.dim(2);
    std::vector<T> vis(B * t * W);
    for (std::size_t r = 0; r < B * t; ++r) std::fill_n(vis.begin() + r * W, W, visible[r] ? T(1) : T(0));
    x = ad::mul(x, Tensor::from(x.shape(), std::move(vis)));
    return ad::matmul(x, param("in_proj"));
  }

  /// Multi-head attention of `h` over `context`, including the output
  /// projection W^O. Heads are column blocks of the combined W^Q/W^K/W^V.
  Tensor multi_head(const Tensor& h, const Tensor& context, const Tensor& mask, const std::string& prefix) const {
    const auto H = static_cast<std::size_t>(config_.heads);
    Tensor q = ad::split_heads(ad::matmul(h, param(prefix + ".wq")), H);
    Tensor k = ad::split_heads(ad::matmul(context, param(prefix + ".wk")), H);
    Tensor v = ad::split_heads(ad::matmul(context, param(prefix + ".wv")), H);
    Tensor heads = scaled_dot_attention(q, k, v, mask);
    return ad::matmul(ad::merge_heads(heads, H), param(prefix + ".wo"));
  }

  Tensor feed_forward(const Tensor& h, const std::string& prefix) const {
    Tensor a = ad::relu(ad::add(ad::matmul(h, param(prefix + ".w1")), param(prefix + ".b1")));
    return ad::add(ad::matmul(a, param(prefix + ".w2")), param(prefix + ".b2"));
  }

  Tensor encoder_forward(Tensor x, const AttentionMasks<T>& masks, bool train, Rng& rng) const {
    for (int l = 0; l < config_.layers; ++l) {
      const std::string p = "enc." + std::to_string(l);
      x = residual_norm(x, multi_head(x, x, masks.encoder, p + ".self"), p + ".ln1", train, rng);
      x = residual_norm(x, feed_forward(x, p + ".ffn"), p + ".ln2", train, rng);
    }
    return x;
  }

  Tensor decoder_forward(Tensor x, const Tensor& encoder_out, const AttentionMasks<T>& masks, bool train,
                         Rng& rng) const {
    for (int l = 0; l < config_.layers; ++l) {
      const std::string p = "dec." + std::to_string(l);
      x = residual_norm(x, multi_head(x, x, masks.decoder_self, p + ".self"), p + ".ln1", train, rng);
      x = residual_norm(x, multi_head(x, encoder_out, masks.cross, p + ".cross"), p + ".ln2", train, rng);
      x = residual_norm(x, feed_forward(x, p + ".ffn"), p + ".ln3", train, rng);
    }
    return x;
  }

  Reconstruction<T> reconstruction_heads(const Tensor& decoder_out) const {
    Reconstruction<T> r;
    for (const auto& c : schema_.numeric_columns())
      r.numeric.push_back(ad::add(ad::matmul(decoder_out, param("head.num." + c + ".w")), param("head.num." + c + ".b")));
    for (const auto& c : schema_.categorical_columns())
      r.categorical.push_back(
          ad::add(ad::matmul(decoder_out, param("head.cat." + c + ".w")), param("head.cat." + c + ".b")));
    return r;
  }

  /// Full pretraining forward: masked input through encoder and decoder.
  Reconstruction<T> reconstruct(const Batch& batch, const MaskPlan* plan, bool train, Rng& rng) const {
    auto masks = make_attention_masks<T>(batch, static_cast<std::size_t>(config_.heads));
    Tensor x = project_inputs(batch, plan);
    Tensor enc = encoder_forward(x, masks, train, rng);
    Tensor dec = decoder_forward(x, enc, masks, train, rng);
    return reconstruction_heads(dec);
  }

  /// Pooled encoder output [B, hidden] over real positions; zeros for an
  /// all-pad entity.
  std::vector<T> pool(const Batch& batch, const Tensor& encoder_out) const {
    const std::size_t B = batch.size, t = batch.t, D = encoder_out.dim(2);
    std::vector<T> out(B * D, T(0));
    const T* h = encoder_out.data().data();
    for (std::size_t b = 0; b < B; ++b) {
      T* o = out.data() + b * D;
      std::size_t n = 0;
      for (std::size_t i = 0; i < t; ++i) {
        if (!batch.is_real(b, i)) continue;
        const T* hi = h + (b * t + i) * D;
        for (std::size_t d = 0; d < D; ++d) {
          switch (config_.pooling) {
            case Pooling::mean: o[d] += hi[d]; break;
            case Pooling::last: o[d] = hi[d]; break;
            case Pooling::max: o[d] = n == 0 ? hi[d] : std::max(o[d], hi[d]); break;
          }
        }
        ++n;
      }
      if (config_.pooling == Pooling::mean && n > 0)
        for (std::size_t d = 0; d < D; ++d) o[d] /= static_cast<T>(n);
    }
    return out;
  }

  /// Embedding head applied to an already computed encoder output.
  std::vector<EmbeddingRecord> embed_from_encoder(const Batch& batch, const Tensor& encoder_out) const {
    ad::NoGradGuard guard;
    const std::size_t B = batch.size;
    const auto D = static_cast<std::size_t>(config_.hidden);
    std::vector<Tensor> parts{Tensor::from({B, D}, pool(batch, encoder_out))};
    if (batch.n_snum > 0) {
      std::vector<T> s(batch.static_numeric.begin(), batch.static_numeric.end());
      parts.push_back(Tensor::from({B, batch.n_snum}, std::move(s)));
    }
    const auto scats = schema_.static_categorical_columns();
    for (std::size_t c = 0; c < scats.size(); ++c) {
      std::vector<int> codes(B);
      for (std::size_t b = 0; b < B; ++b) codes[b] = batch.static_codes[b * batch.n_scat + c];
      parts.push_back(ad::embedding(param("emb." + scats[c]), codes, {B}));
    }
    Tensor z = parts.size() == 1 ? parts[0] : ad::concat(parts, 1);
    z = ad::relu(ad::add(ad::matmul(z, param("embed.w1")), param("embed.b1")));
    z = ad::add(ad::matmul(z, param("embed.w2")), param("embed.b2"));
    const auto E = static_cast<std::size_t>(config_.emb_out);
    std::vector<EmbeddingRecord> out(B);
    for (std::size_t b = 0; b < B; ++b) {
      out[b].entity = batch.entities.empty() ? std::string{} : batch.entities[b];
      out[b].vector.assign(z.data().begin() + b * E, z.data().begin() + (b + 1) * E);
      for (double v : out[b].vector)
        if (!std::isfinite(v)) throw NumericError("non-finite embedding for entity '" + out[b].entity + "'");
    }
    return out;
  }

  /// Inference-mode entity embeddings (no masking, no dropout).
  std::vector<EmbeddingRecord> embed(const Batch& batch) const {
    ad::NoGradGuard guard;
    Rng unused(0);
    auto masks = make_attention_masks<T>(batch, static_cast<std::size_t>(config_.heads));
    Tensor enc = encoder_forward(project_inputs(batch), masks, false, unused);
    return embed_from_encoder(batch, enc);
  }

  int statics_width() const {
    int w = static_cast<int>(schema_.static_numeric_columns().size());
    for (const auto& c : schema_.static_categorical_columns()) w += schema_.embed_dim.at(c);
    return w;
  }

 private:
  Tensor residual_norm(const Tensor& x, const Tensor& sub, const std::string& ln, bool train, Rng& rng) const {
    Tensor y = ad::add(x, ad::dropout(sub, config_.dropout, rng, train));
    return ad::layer_norm(y, param(ln + ".g"), param(ln + ".b"));
  }

  void check_batch(const Batch& batch) const {
    if (batch.n_num != schema_.numeric_columns().size() || batch.n_cat != schema_.categorical_columns().size() ||
        batch.n_snum != schema_.static_numeric_columns().size() ||
        batch.n_scat != schema_.static_categorical_columns().size())
      throw SchemaMismatch("batch column layout does not match the model's fitted schema");
    const auto cats = schema_.categorical_columns();
    for (std::size_t r = 0; r < batch.size * batch.t; ++r)
      for (std::size_t c = 0; c < batch.n_cat; ++c)
        if (static_cast<std::size_t>(batch.codes[r * batch.n_cat + c]) > schema_.vocab.at(cats[c]).size())
          throw SchemaMismatch("code outside the vocabulary of column '" + cats[c] + "'");
  }

  enum class Init { xavier, embedding, zeros, ones };

  void declare(const std::string& name, ad::Shape shape, Init init) {
    names_.push_back(name);
    inits_.push_back(init);
    params_.emplace(name, Tensor::zeros(std::move(shape), true));
  }

  void declare_attention(const std::string& p) {
    const auto D = static_cast<std::size_t>(config_.hidden);
    for (const char* w : {".wq", ".wk", ".wv", ".wo"}) declare(p + w, {D, D}, Init::xavier);
  }
  void declare_norm(const std::string& p) {
    const auto D = static_cast<std::size_t>(config_.hidden);
    declare(p + ".g", {D}, Init::ones);
    declare(p + ".b", {D}, Init::zeros);
  }
  void declare_ffn(const std::string& p) {
    const auto D = static_cast<std::size_t>(config_.hidden), F = static_cast<std::size_t>(config_.ff_dim);
    declare(p + ".w1", {D, F}, Init::xavier);
    declare(p + ".b1", {F}, Init::zeros);
    declare(p + ".w2", {F, D}, Init::xavier);
    declare(p + ".b2", {D}, Init::zeros);
  }

  void declare_parameters() {
    const auto D = static_cast<std::size_t>(config_.hidden);
    auto table = [&](const std::string& c) {
      declare("emb." + c, {schema_.vocab.at(c).size() + 1, static_cast<std::size_t>(schema_.embed_dim.at(c))},
              Init::embedding);
    };
    for (const auto& c : schema_.categorical_columns()) table(c);
    for (const auto& c : schema_.static_categorical_columns()) table(c);
    declare("in_proj", {static_cast<std::size_t>(schema_.step_width()), D}, Init::xavier);
    for (int l = 0; l < config_.layers; ++l) {
      const std::string p = "enc." + std::to_string(l);
      declare_attention(p + ".self");
      declare_norm(p + ".ln1");
      declare_ffn(p + ".ffn");
      declare_norm(p + ".ln2");
    }
    for (int l = 0; l < config_.layers; ++l) {
      const std::string p = "dec." + std::to_string(l);
      declare_attention(p + ".self");
      declare_norm(p + ".ln1");
      declare_attention(p + ".cross");
      declare_norm(p + ".ln2");
      declare_ffn(p + ".ffn");
      declare_norm(p + ".ln3");
    }
    for (const auto& c : schema_.numeric_columns()) {
      declare("head.num." + c + ".w", {D, 1}, Init::xavier);
      declare("head.num." + c + ".b", {1}, Init::zeros);
    }
    for (const auto& c : schema_.categorical_columns()) {
      const std::size_t V = schema_.vocab.at(c).size() + 1;
      declare("head.cat." + c + ".w", {D, V}, Init::xavier);
      declare("head.cat." + c + ".b", {V}, Init::zeros);
    }
    const auto E = static_cast<std::size_t>(config_.emb_out);
    declare("embed.w1", {D + static_cast<std::size_t>(statics_width()), E}, Init::xavier);
    declare("embed.b1", {E}, Init::zeros);
    declare("embed.w2", {E, E}, Init::xavier);
    declare("embed.b2", {E}, Init::zeros);
  }

  void initialize(Rng& rng) {
    for (std::size_t k = 0; k < names_.size(); ++k) {
      auto& p = params_.at(names_[k]);
      auto data = p.mutable_data();
      switch (inits_[k]) {
        case Init::zeros: std::fill(data.begin(), data.end(), T(0)); break;
        case Init::ones: std::fill(data.begin(), data.end(), T(1)); break;
        case Init::xavier: {
          const double bound = std::sqrt(6.0 / static_cast<double>(p.dim(0) + p.dim(1)));
          std::uniform_real_distribution<double> u(-bound, bound);
          for (auto& v : data) v = static_cast<T>(u(rng));
          break;
        }
        case Init::embedding: {
          std::uniform_real_distribution<double> u(-0.05, 0.05);
          for (auto& v : data) v = static_cast<T>(u(rng));
          // row 0 (OOV / padding) starts at zero
          std::fill_n(data.begin(), p.dim(1), T(0));
          break;
        }
      }
    }
  }

  ModelConfig config_;
  FittedSchema schema_;
  std::vector<std::string> names_;
  std::vector<Init> inits_;
  std::map<std::string, Tensor> params_;
};

}  // namespace caspr
