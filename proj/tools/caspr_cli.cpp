// Copyright (c) 2026 The caspr Authors.
// SPDX-License-Identifier: Apache-2.0
//
// caspr: command-line pipelines over the library.
//
//   caspr synth    --out DIR                      -> data.csv labels.csv schema.json
//   caspr fit      --config RUN.json              -> fitted_schema.json
//   caspr pretrain --config RUN.json              -> checkpoint.bin loss_log.csv
//   caspr embed    --config RUN.json              -> embeddings.csv
//   caspr rfm      --config RUN.json              -> rfm.csv
//   caspr eval     --config RUN.json              -> metrics.csv
//   caspr rank     --config RUN.json              -> rankings.csv rank_metrics.csv
//   caspr bench    --config RUN.json --workers 1,2,4 -> bench.csv
//
// On failure a single line `error kind=<Kind> exit=<code> message="<text>"`
// goes to stderr and the process exits with the error's code.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "caspr/caspr.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace caspr;

namespace {

enum class LogLevel { error = 0, info = 1, debug = 2 };

LogLevel log_level() {
  const char* env = std::getenv("CASPR_LOG");
  if (!env) return LogLevel::info;
  const std::string v = env;
  if (v == "error") return LogLevel::error;
  if (v == "debug") return LogLevel::debug;
  if (v == "info") return LogLevel::info;
  throw ConfigError("CASPR_LOG must be error, info or debug, got '" + v + "'");
}

void log(LogLevel level, const std::string& msg) {
  static const LogLevel current = log_level();
  if (level <= current) std::cerr << (level == LogLevel::debug ? "[debug] " : "[info] ") << msg << "\n";
}

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> epochs, batch_size;
  std::string workers;
  std::string out;
  std::string precision;
};

/// RunConfig: one JSON document; relative paths resolve against its directory.
/// Command-line flags override file values.
struct RunConfig {
  json doc = json::object();
  fs::path base = ".";

  static RunConfig load(const Flags& f) {
    RunConfig rc;
    if (!f.config.empty()) {
      if (!fs::exists(f.config)) throw IoError("config file '" + f.config + "' does not exist");
      try {
        rc.doc = json::parse(read_text_file(f.config));
      } catch (const json::exception& e) {
        throw ParseError("config '" + f.config + "': " + e.what());
      }
      if (!rc.doc.is_object()) throw ParseError("config '" + f.config + "' must be a JSON object");
      rc.base = fs::path(f.config).parent_path();
    }
    if (f.seed) rc.doc["seed"] = *f.seed;
    if (f.epochs) rc.doc["train"]["epochs"] = *f.epochs;
    if (f.batch_size) rc.doc["train"]["batch_size"] = *f.batch_size;
    if (!f.out.empty()) rc.doc["out"] = fs::absolute(f.out).string();
    if (!f.precision.empty()) rc.doc["model"]["precision"] = f.precision;
    return rc;
  }

  std::optional<fs::path> path(const std::string& key) const {
    if (!doc.contains(key)) return std::nullopt;
    fs::path p = doc.at(key).get<std::string>();
    return p.is_absolute() ? p : base / p;
  }
  fs::path out_dir() const {
    auto p = path("out");
    return p ? *p : fs::path(".");
  }
  fs::path output(const std::string& key, const std::string& default_name) const {
    auto p = path(key);
    return p ? *p : out_dir() / default_name;
  }
  /// Input path: explicit key, else `fallback` inside the out dir; must exist.
  fs::path input(const std::string& key, const std::string& fallback = "") const {
    auto p = path(key);
    if (!p && !fallback.empty()) p = out_dir() / fallback;
    if (!p) throw ConfigError("run config is missing '" + key + "'");
    if (!fs::exists(*p)) throw IoError("input '" + key + "' not found at '" + p->string() + "'");
    return *p;
  }
  std::uint64_t seed() const { return doc.value("seed", std::uint64_t{0}); }
  json section(const std::string& key) const { return doc.contains(key) ? doc.at(key) : json::object(); }

  ModelConfig model() const {
    auto m = ModelConfig::from_json(section("model"));
    m.validate();
    return m;
  }
  TrainConfig train() const {
    auto t = TrainConfig::from_json(section("train"));
    if (doc.contains("seed")) t.seed = seed();
    return t;
  }
};

void write_out(const fs::path& path, std::string_view bytes) {
  write_file_atomic(path, bytes);
  log(LogLevel::info, "wrote " + path.string());
}

SchemaSpec read_spec(const fs::path& p) {
  try {
    return SchemaSpec::from_json(json::parse(read_text_file(p)));
  } catch (const json::exception& e) {
    throw ParseError("schema '" + p.string() + "': " + e.what());
  }
}

FittedSchema read_fitted(const fs::path& p) {
  try {
    return FittedSchema::from_json(json::parse(read_text_file(p)));
  } catch (const json::exception& e) {
    throw ParseError("fitted schema '" + p.string() + "': " + e.what());
  }
}

std::vector<int> parse_worker_list(const std::string& s) {
  std::vector<int> out;
  std::stringstream in(s);
  std::string tok;
  while (std::getline(in, tok, ',')) {
    try {
      std::size_t used = 0;
      const int w = std::stoi(tok, &used);
      if (used != tok.size() || w < 1) throw std::invalid_argument(tok);
      out.push_back(w);
    } catch (const std::exception&) {
      throw ConfigError("workers must be positive integers separated by commas, got '" + s + "'");
    }
  }
  if (out.empty()) throw ConfigError("empty worker list");
  return out;
}

template <typename F>
auto with_precision(Precision p, F&& f) {
  return p == Precision::f64 ? f(double{}) : f(float{});
}

// ---------------------------------------------------------------------------

void cmd_synth(const RunConfig& rc) {
  auto cfg = SynthConfig::from_json(rc.section("synth"));
  if (rc.doc.contains("seed")) cfg.seed = rc.seed();
  const auto ds = generate(cfg);
  const auto out = rc.out_dir();
  write_out(out / "data.csv", format_csv(ds.data));
  write_out(out / "labels.csv", format_csv(ds.labels));
  write_out(out / "schema.json", ds.schema.dump(2) + "\n");
}

void cmd_fit(const RunConfig& rc) {
  const auto spec = read_spec(rc.input("schema", "schema.json"));
  const auto fitted = fit_schema(read_csv(rc.input("data", "data.csv")), spec);
  write_out(rc.output("fitted_schema", "fitted_schema.json"), fitted.to_json().dump(2) + "\n");
}

FittedSchema fitted_for(const RunConfig& rc, const CsvTable& data) {
  if (auto p = rc.path("fitted_schema"); p && fs::exists(*p)) return read_fitted(*p);
  return fit_schema(data, read_spec(rc.input("schema", "schema.json")));
}

void cmd_pretrain(const RunConfig& rc, const std::string& workers_flag) {
  const auto data = read_csv(rc.input("data", "data.csv"));
  const auto fitted = fitted_for(rc, data);
  const auto mc = rc.model();
  auto tc = rc.train();
  if (!workers_flag.empty()) {
    const auto w = parse_worker_list(workers_flag);
    if (w.size() != 1) throw ConfigError("pretrain takes a single worker count");
    tc.workers = w[0];
  }
  tc.validate();
  const auto seqs = build_sequences(encode_rows(data, fitted), mc.t);
  log(LogLevel::info, "pretraining on " + std::to_string(seqs.size()) + " entities, " + std::to_string(tc.epochs) +
                          " epochs, " + std::to_string(tc.workers) + " worker(s)");
  auto [ck, epochs] = with_precision(mc.precision, [&](auto tag) {
    using T = decltype(tag);
    Trainer<T> trainer(mc, fitted, tc);
    std::vector<EpochLog> log_rows;
    for (int e = 0; e < tc.epochs; ++e) {
      log_rows.push_back(trainer.run_epoch(seqs));
      log(LogLevel::debug, "epoch " + std::to_string(log_rows.back().epoch) +
                               " loss=" + format_real(log_rows.back().mean_loss));
    }
    return std::pair{trainer.checkpoint(), log_rows};
  });
  save_checkpoint(ck, rc.output("checkpoint", "checkpoint.bin"));
  log(LogLevel::info, "wrote checkpoint (step " + std::to_string(ck.step) + ")");
  write_out(rc.output("loss_log", "loss_log.csv"), format_loss_log(epochs));
}

template <typename T>
std::vector<EmbeddingRecord> embeddings_from(const Checkpoint& ck, const CsvTable& data) {
  auto model = load_model<T>(ck);
  return embed_all(model, build_sequences(encode_rows(data, ck.schema), ck.model.t));
}

void cmd_embed(const RunConfig& rc) {
  const auto ck = load_checkpoint(rc.input("checkpoint", "checkpoint.bin"));
  const auto data = read_csv(rc.input("data", "data.csv"));
  const auto records = with_precision(ck.model.precision, [&](auto tag) { return embeddings_from<decltype(tag)>(ck, data); });
  write_out(rc.output("embeddings", "embeddings.csv"), format_csv(embeddings_csv(records)));
}

void cmd_rfm(const RunConfig& rc) {
  const auto spec = read_spec(rc.input("schema", "schema.json"));
  write_out(rc.output("rfm", "rfm.csv"), format_csv(rfm_features_csv(read_csv(rc.input("data", "data.csv")), spec)));
}

void cmd_eval(const RunConfig& rc) {
  const auto ev = rc.section("eval");
  const auto task = probe_task_from_string(ev.value("task", std::string("binary")));
  const auto features_key = ev.contains("features") ? "eval_features" : "features";
  RunConfig view = rc;
  if (ev.contains("features")) view.doc["eval_features"] = ev.at("features");
  const auto set = join_labels(read_csv(view.input(features_key, "embeddings.csv")),
                               read_csv(rc.input("labels", "labels.csv")));
  const auto report = evaluate_probe(set, task, rc.seed(), ev.value("test_fraction", 0.3));
  std::cout << report.to_table();
  write_out(rc.output("metrics", "metrics.csv"), report.to_csv());
}

template <typename T>
std::vector<RankingCase> rank_with(const Checkpoint& ck, const CsvTable& data, const std::string& item_column) {
  auto model = load_model<T>(ck);
  const auto records = embed_all(model, build_sequences(encode_rows(data, ck.schema), ck.model.t));
  const auto items = item_vectors(model, item_column);
  std::string entity_col;
  for (const auto& c : ck.schema.columns)
    if (c.kind == ColumnKind::entity_id) entity_col = c.name;
  const auto ec = data.column(entity_col), ic = data.column(item_column);
  std::vector<std::pair<std::string, std::string>> history;
  for (const auto& row : data.rows) history.emplace_back(row.at(ec), row.at(ic));
  const auto projection = fit_projection_from_history(items, records, history);
  return rank_items(records, items, &projection);
}

void cmd_rank(const RunConfig& rc) {
  const auto ck = load_checkpoint(rc.input("checkpoint", "checkpoint.bin"));
  const auto data = read_csv(rc.input("data", "data.csv"));
  const auto relevance = read_csv(rc.input("relevance"));
  const auto item_column = rc.section("rank").value("item_column", std::string("item_id"));
  auto cases = with_precision(ck.model.precision, [&](auto tag) { return rank_with<decltype(tag)>(ck, data, item_column); });
  cases = attach_relevance(std::move(cases), relevance);
  const auto report = ranking_report(ranking_metrics(cases));
  std::cout << report.to_table();
  write_out(rc.output("rankings", "rankings.csv"), format_rankings(cases));
  write_out(rc.output("rank_metrics", "rank_metrics.csv"), report.to_csv());
}

void cmd_bench(const RunConfig& rc, const std::string& workers_flag) {
  const auto data = read_csv(rc.input("data", "data.csv"));
  const auto fitted = fitted_for(rc, data);
  const auto mc = rc.model();
  const auto tc = rc.train();
  std::vector<int> workers = {1, 2, 4};
  if (!workers_flag.empty())
    workers = parse_worker_list(workers_flag);
  else if (rc.section("bench").contains("workers"))
    workers = rc.section("bench").at("workers").get<std::vector<int>>();
  for (int w : workers) {
    auto t = tc;
    t.workers = w;
    t.validate();
  }
  const auto seqs = build_sequences(encode_rows(data, fitted), mc.t);
  const auto rows = with_precision(mc.precision, [&](auto tag) {
    return bench_workers<decltype(tag)>(seqs, fitted, mc, tc, workers);
  });
  for (const auto& r : rows)
    log(LogLevel::info, std::to_string(r.workers) + " worker(s): " + format_real(r.epoch_time_s) + " s/epoch");
  write_out(rc.output("bench", "bench.csv"), format_bench(rows));
}

std::string quote(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    out += c == '\n' ? ' ' : c;
  }
  return out + "\"";
}

int report_error(const char* kind, int code, const std::string& message) {
  std::cerr << "error kind=" << kind << " exit=" << code << " message=" << quote(message) << std::endl;
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"caspr: sequence pretraining and evaluation for tabular activity logs"};
  app.require_subcommand(1);
  Flags flags;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", flags.config, "RunConfig JSON file");
    sub->add_option("--seed", flags.seed, "RNG seed (overrides config)");
    sub->add_option("--epochs", flags.epochs, "training epochs");
    sub->add_option("--batch-size", flags.batch_size, "mini-batch size");
    sub->add_option("--workers", flags.workers, "worker count, or a comma list for bench");
    sub->add_option("--out", flags.out, "output directory");
    sub->add_option("--precision", flags.precision, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));
  };
  std::map<std::string, CLI::App*> subs;
  for (const char* name : {"synth", "fit", "pretrain", "embed", "rfm", "eval", "rank", "bench"}) {
    subs[name] = app.add_subcommand(name);
    add_common(subs[name]);
  }
  subs["synth"]->description("generate a synthetic activity log with labels");
  subs["fit"]->description("fit vocabularies and normalization statistics");
  subs["pretrain"]->description("masked-reconstruction pretraining");
  subs["embed"]->description("entity embeddings from a checkpoint");
  subs["rfm"]->description("recency/frequency/monetary features");
  subs["eval"]->description("linear-probe evaluation of a feature CSV");
  subs["rank"]->description("dot-product item ranking metrics");
  subs["bench"]->description("epoch time across worker counts");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return report_error("UsageError", 2, e.what());
  }

  try {
    const auto rc = RunConfig::load(flags);
    fs::create_directories(rc.out_dir());
    log(LogLevel::debug, "run config: " + rc.doc.dump());
    if (subs["synth"]->parsed()) cmd_synth(rc);
    if (subs["fit"]->parsed()) cmd_fit(rc);
    if (subs["pretrain"]->parsed()) cmd_pretrain(rc, flags.workers);
    if (subs["embed"]->parsed()) cmd_embed(rc);
    if (subs["rfm"]->parsed()) cmd_rfm(rc);
    if (subs["eval"]->parsed()) cmd_eval(rc);
    if (subs["rank"]->parsed()) cmd_rank(rc);
    if (subs["bench"]->parsed()) cmd_bench(rc, flags.workers);
  } catch (const Error& e) {
    return report_error(e.kind(), e.exit_code(), e.what());
  } catch (const json::exception& e) {
    return report_error("ParseError", 2, e.what());
  } catch (const fs::filesystem_error& e) {
    return report_error("IoError", 5, e.what());
  } catch (const std::exception& e) {
    return report_error("InternalError", 1, e.what());
  }
  return 0;
}
