#pragma once

// Command implementations behind the `esrs` executable. Each command writes
// into its own output directory, including `config.txt` (the effective
// configuration) and `run.json` (command, flags and configuration).

#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <optional>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include "esrs/config.hpp"
#include "esrs/embeddings.hpp"
#include "esrs/pipeline.hpp"
#include "esrs/synthetic.hpp"

namespace esrs::app {

namespace fs = std::filesystem;

using AnyModel = std::variant<EsimModel<float>, SentEncModel<float>>;

inline SequenceOptions sequence_options(const RunConfig& c) {
  SequenceOptions s;
  s.max_context = c.size("max_context");
  s.max_response = c.size("max_response");
  if (s.max_context == 0 || s.max_response == 0) throw ConfigError("max lengths must be at least 1");
  const auto& dir = c.str("context_truncation");
  if (dir == "keep_tail") s.context_truncation = Truncation::KeepTail;
  else if (dir == "keep_head") s.context_truncation = Truncation::KeepHead;
  else throw ConfigError("context_truncation must be keep_tail or keep_head");
  return s;
}

inline EsimConfig esim_config(const RunConfig& c) {
  EsimConfig e;
  e.hidden = c.size("hidden");
  e.mlp_hidden = c.size("mlp_hidden");
  e.embed_dim = c.size("embed_dim");
  e.variant = esim_variant_from(c.str("variant"));
  e.embeddings_trainable = c.flag("embeddings_trainable");
  e.dropout = c.real("dropout");
  e.sequence = sequence_options(c);
  e.validate();
  return e;
}

inline SentEncConfig sentenc_config(const RunConfig& c) {
  SentEncConfig s;
  s.hidden = c.size("hidden");
  s.heads = c.size("heads");
  s.attention_dim = c.size("attention_dim");
  s.mlp_hidden = c.size("mlp_hidden");
  s.embed_dim = c.size("embed_dim");
  s.embeddings_trainable = c.flag("embeddings_trainable");
  s.dropout = c.real("dropout");
  s.sequence = sequence_options(c);
  s.validate();
  return s;
}

inline TrainConfig train_config(const RunConfig& c, std::size_t workers) {
  TrainConfig t;
  t.learning_rate = c.real("learning_rate");
  t.batch_size = c.size("batch_size");
  t.max_epochs = c.size("max_epochs");
  t.seed = c.u64("seed");
  t.lr_decay = c.real("lr_decay");
  t.clip_norm = c.real("clip_norm");
  t.selection = selection_metric_from(c.str("selection_metric"));
  t.eval_chunk = c.size("eval_chunk");
  t.workers = workers;
  t.validate();
  return t;
}

inline SyntheticConfig synthetic_config(const RunConfig& c) {
  SyntheticConfig s;
  s.train_dialogues = c.size("synthetic_train_dialogues");
  s.dev_cases = c.size("synthetic_dev_cases");
  s.test_cases = c.size("synthetic_test_cases");
  s.filler_vocab = c.size("synthetic_filler_vocab");
  s.keywords = c.size("synthetic_keywords");
  s.min_turns = c.size("synthetic_min_turns");
  s.max_turns = c.size("synthetic_max_turns");
  s.min_len = c.size("synthetic_min_len");
  s.max_len = c.size("synthetic_max_len");
  s.link_strength = c.real("synthetic_link_strength");
  s.candidates = c.size("synthetic_candidates");
  s.none_fraction = c.real("synthetic_none_fraction");
  s.validate();
  return s;
}

inline EmbeddingSet embedding_set(const RunConfig& c) {
  EmbeddingSet set;
  set.seed = c.u64("seed");
  set.trainable = c.flag("embeddings_trainable");
  const auto& oov = c.str("oov");
  if (oov == "random") set.oov = OovPolicy::SeededRandom;
  else if (oov == "zero") set.oov = OovPolicy::Zero;
  else throw ConfigError("oov must be random or zero");
  for (const auto& path : c.list("embedding_files")) set.tables.push_back(parse_embedding_file(path).table);
  return set;
}

/// Creates the directory and writes the configuration echo.
inline void begin_output(const fs::path& dir, const std::string& command, const RunConfig& cfg,
                         const nlohmann::json& flags) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory '" + dir.string() + "': " + ec.message());
  std::ofstream echo(dir / "config.txt", std::ios::binary);
  if (!echo) throw IoError("cannot write '" + (dir / "config.txt").string() + "'");
  cfg.echo(echo);
  std::ofstream run(dir / "run.json", std::ios::binary);
  run << nlohmann::json{{"command", command}, {"flags", flags}, {"config", cfg.to_json()}}.dump(2) << '\n';
}

inline void write_json_file(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << j.dump(2) << '\n';
}

inline void write_rankings(const fs::path& path, const std::vector<Ranking>& rankings) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  for (const auto& r : rankings) out << ranking_json(r).dump() << '\n';
}

inline std::vector<Ranking> read_rankings(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read '" + path + "'");
  std::vector<Ranking> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      Ranking r;
      r.id = j.at("id").get<std::string>();
      for (const auto& o : j.at("order"))
        r.order.push_back(o.is_string() && o.get<std::string>() == "NONE" ? Ranking::kNone : o.get<std::size_t>());
      r.scores = j.at("scores").get<std::vector<double>>();
      if (r.scores.size() != r.order.size()) throw ContractError("order and scores differ in length");
      out.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path + ": " + e.what(), lineno);
    } catch (const ContractError& e) {
      throw ParseError(path + ": " + e.what(), lineno);
    }
  }
  return out;
}

inline AnyModel load_model(const std::string& path) {
  const auto ckpt = load_checkpoint(path);
  if (ckpt.model_kind == EsimModel<float>::kKind) return EsimModel<float>::from_checkpoint(ckpt);
  if (ckpt.model_kind == SentEncModel<float>::kKind) return SentEncModel<float>::from_checkpoint(ckpt);
  throw FormatError("'" + path + "' holds unknown model kind '" + ckpt.model_kind + "'", 0);
}

template <typename M>
M load_model_as(const std::string& path) {
  auto any = load_model(path);
  if (auto* m = std::get_if<M>(&any)) return std::move(*m);
  throw ContractError("'" + path + "' does not hold a " + std::string(M::kKind) + " model");
}

// ---------------------------------------------------------------------------

inline void cmd_generate(const RunConfig& cfg, const fs::path& out) {
  const auto sc = synthetic_config(cfg);
  begin_output(out, "generate", cfg, nlohmann::json::object());
  const auto corpus = generate_synthetic_corpus(sc, cfg.u64("seed"));
  write_jsonl_file((out / "train.jsonl").string(), corpus.train);
  write_jsonl_file((out / "dev.jsonl").string(), corpus.dev);
  write_jsonl_file((out / "test.jsonl").string(), corpus.test);
  write_jsonl_file((out / "dev_sets.jsonl").string(), corpus.dev_sets);
  write_jsonl_file((out / "test_sets.jsonl").string(), corpus.test_sets);
}

inline nlohmann::json cmd_prepare(const RunConfig& cfg, const fs::path& out) {
  const auto& train_file = cfg.str("train_file");
  if (train_file.empty()) throw ConfigError("prepare needs train_file");
  const double ratio = cfg.real("negative_ratio");
  begin_output(out, "prepare", cfg, nlohmann::json::object());
  const auto dialogues = read_jsonl_file<Dialogue>(train_file);
  const auto split = prepare_examples(dialogues, ratio, cfg.u64("seed"));
  write_jsonl_file((out / "examples.jsonl").string(), split.examples);
  nlohmann::json manifest{{"dialogues", dialogues.size()},
                          {"positives", split.positives},
                          {"negatives", split.negatives},
                          {"total", split.examples.size()},
                          {"ratio_requested", ratio},
                          {"ratio_achieved", split.positives ? static_cast<double>(split.negatives) /
                                                                   static_cast<double>(split.positives)
                                                             : 0.0}};
  write_json_file(out / "manifest.json", manifest);
  return manifest;
}

inline void cmd_train(const RunConfig& cfg, const fs::path& out, std::size_t workers = 1) {
  const auto& examples_file = cfg.str("examples_file");
  if (examples_file.empty()) throw ConfigError("train needs examples_file");
  const auto tc = train_config(cfg, workers);
  const auto& kind = cfg.str("model");
  if (kind != "esim" && kind != "sentenc") throw ConfigError("model must be esim or sentenc");
  const auto examples = read_jsonl_file<Example>(examples_file);
  std::vector<CandidateSet> dev;
  if (!cfg.str("dev_file").empty()) dev = read_jsonl_file<CandidateSet>(cfg.str("dev_file"));
  const auto vocab = build_vocabulary(examples, cfg.size("vocab_max_size"));
  const auto embeddings = embedding_set(cfg);
  const auto table = initial_embeddings(vocab, &embeddings, cfg.size("embed_dim"), cfg.u64("seed"));
  begin_output(out, "train", cfg, {{"workers", workers}});

  std::ofstream history(out / "history.jsonl", std::ios::binary);
  auto log = [&](const EpochRecord& r) { history << r.to_json().dump() << '\n' << std::flush; };
  auto run = [&](auto model) {
    auto result = train(model, tc, examples, dev, log);
    save_checkpoint(result.best, (out / "model.ckpt").string());
  };
  if (kind == "esim") run(EsimModel<float>(esim_config(cfg), vocab, table, cfg.u64("seed")));
  else run(SentEncModel<float>(sentenc_config(cfg), vocab, table, cfg.u64("seed")));
}

struct RankFlags {
  std::string checkpoint;
  std::string candidates;
  std::size_t workers = 1;
  std::size_t chunk = 64;
};

inline void cmd_rank(const RunConfig& cfg, const RankFlags& f, const fs::path& out) {
  const auto sets = read_jsonl_file<CandidateSet>(f.candidates);
  auto model = load_model(f.checkpoint);
  begin_output(out, "rank", cfg,
               {{"checkpoint", f.checkpoint}, {"candidates", f.candidates}, {"workers", f.workers}, {"chunk", f.chunk}});
  std::visit(
      [&](const auto& m) {
        const auto scores = score_sets(m, sets, f.chunk, f.workers);
        ScoreTable table;
        std::vector<Ranking> rankings;
        for (std::size_t i = 0; i < sets.size(); ++i) {
          table.add(sets[i].id, scores[i]);
          rankings.push_back(rank(sets[i], scores[i]));
        }
        write_score_table_file((out / "scores.tsv").string(), table);
        write_rankings(out / "rankings.jsonl", rankings);
      },
      model);
}

struct RetrieveFlags {
  std::string checkpoint;
  std::string pool;
  std::size_t k = 100;
  std::size_t workers = 1;
  std::size_t chunk = 256;
  std::string cache;  // optional encoding cache file, read if present and rewritten
};

/// Encodes every distinct pool sentence once, in input order.
inline Tensor<float> warm_cache(const SentEncModel<float>& m, const std::vector<CandidateSet>& sets,
                                EncodingCache& cache, std::size_t chunk) {
  std::vector<Tokens> unique;
  std::set<std::string> seen;
  for (const auto& s : sets)
    for (const auto& c : s.candidates) {
      const auto t = truncate(c, m.sequence().max_response, Truncation::KeepHead);
      if (seen.insert(EncodingCache::key(t)).second) unique.push_back(t);
    }
  return m.encode_responses(unique, chunk, &cache);
}

inline void cmd_retrieve(const RunConfig& cfg, const RetrieveFlags& f, const fs::path& out) {
  const auto sets = read_jsonl_file<CandidateSet>(f.pool);
  const auto model = load_model_as<SentEncModel<float>>(f.checkpoint);
  EncodingCache cache;
  if (!f.cache.empty() && fs::exists(f.cache)) cache = EncodingCache::load(f.cache);
  begin_output(out, "retrieve", cfg,
               {{"checkpoint", f.checkpoint}, {"pool", f.pool}, {"k", f.k}, {"workers", f.workers},
                {"chunk", f.chunk}, {"cache", f.cache}});
  warm_cache(model, sets, cache, f.chunk);
  std::vector<std::vector<Retrieved>> hits(sets.size());
  parallel_for(sets.size(), f.workers, [&](std::size_t i) {
    hits[i] = retrieve_topk(model, sets[i].context, sets[i].candidates, f.k, f.chunk, &cache);
  });
  ScoreTable table;
  std::vector<Ranking> rankings;
  for (std::size_t i = 0; i < sets.size(); ++i) {
    Ranking r{sets[i].id, {}, {}};
    for (const auto& h : hits[i]) {
      table.rows.push_back({sets[i].id, h.index, h.score});
      r.order.push_back(h.index);
      r.scores.push_back(h.score);
    }
    rankings.push_back(std::move(r));
  }
  write_score_table_file((out / "topk.tsv").string(), table);
  write_rankings(out / "rankings.jsonl", rankings);
  if (!f.cache.empty()) cache.save(f.cache);
}

struct RerankFlags {
  std::string sentenc;
  std::string esim;
  std::string pool;
  std::size_t k = 100;
  std::size_t workers = 1;
  std::size_t chunk = 64;
};

inline void cmd_rerank(const RunConfig& cfg, const RerankFlags& f, const fs::path& out) {
  const auto sets = read_jsonl_file<CandidateSet>(f.pool);
  const auto retriever = load_model_as<SentEncModel<float>>(f.sentenc);
  const auto reranker = load_model_as<EsimModel<float>>(f.esim);
  begin_output(out, "rerank", cfg,
               {{"sentenc", f.sentenc}, {"esim", f.esim}, {"pool", f.pool}, {"k", f.k},
                {"workers", f.workers}, {"chunk", f.chunk}});
  EncodingCache cache;
  warm_cache(retriever, sets, cache, f.chunk);
  std::vector<Ranking> rankings(sets.size());
  parallel_for(sets.size(), f.workers, [&](std::size_t i) {
    const auto enc = retriever.encode_responses(sets[i].candidates, f.chunk, &cache);
    rankings[i] = retrieve_rerank(retriever, reranker, sets[i], f.k, f.chunk, &enc);
  });
  write_rankings(out / "rankings.jsonl", rankings);
}

struct EvaluateFlags {
  std::string gold;
  std::string scores;    // score table, or
  std::string rankings;  // rankings JSONL
  std::optional<double> threshold;
  bool select_threshold = false;
  std::string dev_scores;  // with select_threshold
  std::string dev_gold;
};

inline std::vector<Ranking> load_rankings_for(const std::string& scores, const std::string& rankings) {
  if (!scores.empty() == !rankings.empty()) throw ConfigError("give exactly one of --scores or --rankings");
  return scores.empty() ? read_rankings(rankings) : rankings_from(read_score_table_file(scores));
}

inline EvalReport cmd_evaluate(const EvaluateFlags& f, const fs::path& out) {
  if (f.threshold && f.select_threshold) throw ConfigError("--threshold and --select-threshold are exclusive");
  const auto gold_sets = read_jsonl_file<CandidateSet>(f.gold);
  const auto rankings = load_rankings_for(f.scores, f.rankings);
  const auto gold = gold_for(rankings, gold_sets);
  std::optional<double> theta = f.threshold;
  if (f.select_threshold) {
    if (f.dev_scores.empty() || f.dev_gold.empty())
      throw ConfigError("--select-threshold needs --dev-scores and --dev-gold");
    const auto dev = rankings_from(read_score_table_file(f.dev_scores));
    theta = select_threshold(dev, gold_for(dev, read_jsonl_file<CandidateSet>(f.dev_gold)));
  }
  nlohmann::json flags{{"gold", f.gold}, {"scores", f.scores}, {"rankings", f.rankings},
                       {"select_threshold", f.select_threshold}, {"dev_scores", f.dev_scores},
                       {"dev_gold", f.dev_gold}};
  flags["threshold"] = f.threshold ? nlohmann::json(*f.threshold) : nlohmann::json(nullptr);
  begin_output(out, "evaluate", RunConfig{}, flags);
  const auto report = evaluate(rankings, gold, theta);
  auto j = report.to_json();
  j["config"] = flags;
  write_json_file(out / "report.json", j);
  return report;
}

inline ScoreTable cmd_ensemble(const std::vector<std::string>& tables, const fs::path& out) {
  std::vector<ScoreTable> loaded;
  for (const auto& t : tables) loaded.push_back(read_score_table_file(t));
  begin_output(out, "ensemble", RunConfig{}, {{"tables", tables}});
  auto avg = ensemble(loaded);
  write_score_table_file((out / "scores.tsv").string(), avg);
  return avg;
}

}  // namespace esrs::app
