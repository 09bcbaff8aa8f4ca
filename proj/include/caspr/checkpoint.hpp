// Copyright (c) 2026 The caspr Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint container, binary layout (all integers little-endian):
//
//   "CSPR1"                      5 magic bytes
//   u32 version                  currently 1
//   u64 n, n bytes               UTF-8 JSON: model config, fitted schema,
//                                train config, RNG state, epoch, step
//   repeated until EOF:
//     u16 n, n bytes             tensor name
//     u8 rank, rank x u64        dims
//     u8 dtype                   0 = f32, 1 = f64
//     payload                    prod(dims) little-endian values

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <json.hpp>

#include "caspr/csv.hpp"
#include "caspr/error.hpp"
#include "caspr/ingest.hpp"
#include "caspr/transformer.hpp"

namespace caspr {

inline constexpr std::string_view kCheckpointMagic = "CSPR1";
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TensorRecord {
  std::string name;
  std::vector<std::uint64_t> dims;
  std::variant<std::vector<float>, std::vector<double>> data;

  std::size_t size() const {
    return std::visit([](const auto& v) { return v.size(); }, data);
  }
  bool operator==(const TensorRecord&) const = default;
};

struct Checkpoint {
  ModelConfig model;
  FittedSchema schema;
  nlohmann::ordered_json train;  // TrainConfig as JSON
  std::string rng_state;
  int epoch = 0;
  std::int64_t step = 0;
  std::vector<TensorRecord> tensors;

  const TensorRecord& tensor(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return t;
    throw SchemaMismatch("checkpoint has no tensor '" + name + "'");
  }
  bool has_tensor(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return true;
    return false;
  }
};

namespace detail {

template <typename U>
void put_le(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <typename U>
  U get_le(const char* what) {
    need(sizeof(U), what);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return static_cast<U>(v);
  }
  std::string_view take(std::size_t n, const char* what) {
    need(n, what);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) throw TruncatedFile(std::string("checkpoint truncated while reading ") + what);
  }
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  std::string out(kCheckpointMagic);
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  nlohmann::ordered_json meta;
  meta["model"] = ck.model.to_json();
  meta["schema"] = ck.schema.to_json();
  meta["train"] = ck.train;
  meta["rng"] = ck.rng_state;
  meta["epoch"] = ck.epoch;
  meta["step"] = ck.step;
  const std::string blob = meta.dump();
  detail::put_le<std::uint64_t>(out, blob.size());
  out += blob;
  for (const auto& t : ck.tensors) {
    if (t.name.size() > 0xFFFF) throw ContractViolation("tensor name too long: " + t.name.substr(0, 32));
    if (t.dims.size() > 0xFF) throw ContractViolation("tensor rank too large: " + t.name);
    detail::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(t.name.size()));
    out += t.name;
    detail::put_le<std::uint8_t>(out, static_cast<std::uint8_t>(t.dims.size()));
    std::uint64_t count = 1;
    for (auto d : t.dims) {
      detail::put_le<std::uint64_t>(out, d);
      count *= d;
    }
    if (count != t.size()) throw ContractViolation("tensor '" + t.name + "' payload does not match its dims");
    if (const auto* f = std::get_if<std::vector<float>>(&t.data)) {
      detail::put_le<std::uint8_t>(out, 0);
      for (float v : *f) detail::put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
    } else {
      detail::put_le<std::uint8_t>(out, 1);
      for (double v : std::get<std::vector<double>>(t.data)) detail::put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
    }
  }
  return out;
}

inline Checkpoint deserialize_checkpoint(std::string_view bytes) {
  detail::Reader in(bytes);
  if (bytes.size() >= kCheckpointMagic.size() && bytes.substr(0, kCheckpointMagic.size()) != kCheckpointMagic)
    throw BadMagic("not a checkpoint (bad magic bytes)");
  in.take(kCheckpointMagic.size(), "magic");
  const auto version = in.get_le<std::uint32_t>("version");
  if (version != kCheckpointVersion)
    throw VersionMismatch("checkpoint version " + std::to_string(version) + ", expected " +
                          std::to_string(kCheckpointVersion));
  const auto blob_len = in.get_le<std::uint64_t>("metadata length");
  const auto blob = in.take(blob_len, "metadata");
  nlohmann::ordered_json meta;
  try {
    meta = nlohmann::ordered_json::parse(blob);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("checkpoint metadata: ") + e.what());
  }
  Checkpoint ck;
  ck.model = ModelConfig::from_json(meta.at("model"));
  ck.schema = FittedSchema::from_json(meta.at("schema"));
  ck.train = meta.value("train", nlohmann::ordered_json::object());
  ck.rng_state = meta.value("rng", std::string{});
  ck.epoch = meta.value("epoch", 0);
  ck.step = meta.value("step", std::int64_t{0});
  while (!in.done()) {
    TensorRecord t;
    const auto name_len = in.get_le<std::uint16_t>("tensor name length");
    t.name = std::string(in.take(name_len, "tensor name"));
    const auto rank = in.get_le<std::uint8_t>("tensor rank");
    std::uint64_t count = 1;
    for (int i = 0; i < rank; ++i) {
      t.dims.push_back(in.get_le<std::uint64_t>("tensor dims"));
      count *= t.dims.back();
    }
    const auto dtype = in.get_le<std::uint8_t>("tensor dtype");
    if (dtype == 0) {
      std::vector<float> v(count);
      for (auto& x : v) x = std::bit_cast<float>(in.get_le<std::uint32_t>("tensor payload"));
      t.data = std::move(v);
    } else if (dtype == 1) {
      std::vector<double> v(count);
      for (auto& x : v) x = std::bit_cast<double>(in.get_le<std::uint64_t>("tensor payload"));
      t.data = std::move(v);
    } else {
      throw ParseError("tensor '" + t.name + "' has unknown dtype tag " + std::to_string(dtype));
    }
    ck.tensors.push_back(std::move(t));
  }
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint(read_text_file(path));
}

template <typename T>
TensorRecord to_record(const std::string& name, const ad::Shape& shape, std::span<const T> values) {
  TensorRecord r;
  r.name = name;
  r.dims.assign(shape.begin(), shape.end());
  r.data = std::vector<T>(values.begin(), values.end());
  return r;
}

/// Copies a record into `dst`; dtype and element count must match.
template <typename T>
void from_record(const TensorRecord& r, std::span<T> dst) {
  const auto* v = std::get_if<std::vector<T>>(&r.data);
  if (!v) throw SchemaMismatch("tensor '" + r.name + "' has a different precision than the model");
  if (v->size() != dst.size())
    throw SchemaMismatch("tensor '" + r.name + "' has " + std::to_string(v->size()) + " values, model expects " +
                         std::to_string(dst.size()));
  std::copy(v->begin(), v->end(), dst.begin());
}

/// Weights of a model, e.g. for inference from a loaded checkpoint.
template <typename T>
Model<T> load_model(const Checkpoint& ck) {
  Model<T> m(ck.model, ck.schema, 0);
  for (const auto& name : m.names()) from_record<T>(ck.tensor(name), m.param(name).mutable_data());
  return m;
}

}  // namespace caspr
