#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <nlohmann/json.hpp>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "esrs/error.hpp"
#include "esrs/numcore/tensor.hpp"
#include "esrs/random.hpp"
#include "esrs/vocabulary.hpp"

namespace esrs {

using Tokens = std::vector<std::string>;

struct Utterance {
  std::string speaker;
  Tokens tokens;

  bool operator==(const Utterance&) const = default;
};

struct Dialogue {
  std::string id;
  std::vector<Utterance> utterances;

  void validate() const {
    if (utterances.size() < 2) {
      throw ContractError("dialogue '" + id + "' has fewer than 2 utterances");
    }
    for (const auto& u : utterances)
      if (u.tokens.empty()) throw ContractError("dialogue '" + id + "' has an empty utterance");
  }

  bool operator==(const Dialogue&) const = default;
};

struct Example {
  Tokens context;
  Tokens response;
  int label = 1;
  std::size_t group = 0;

  bool operator==(const Example&) const = default;
};

/// One evaluation case. `correct` may be empty (no answer in the pool) or
/// hold several indices (paraphrases).
struct CandidateSet {
  std::string id;
  std::vector<Utterance> context;
  std::vector<Tokens> candidates;
  std::vector<std::size_t> correct;

  bool operator==(const CandidateSet&) const = default;
};

enum class Truncation { KeepTail, KeepHead };

/// Token limits and truncation directions shared by training and scoring.
struct SequenceOptions {
  std::size_t max_context = 300;
  std::size_t max_response = 30;
  Truncation context_truncation = Truncation::KeepTail;
};

/// Utterances in order, `__eou__` after each, plus `__eot__` after the last
/// utterance of every maximal same-speaker run.
inline Tokens concat_context(const std::vector<Utterance>& utterances) {
  if (utterances.empty()) throw ContractError("concat_context on an empty utterance list");
  Tokens out;
  for (std::size_t i = 0; i < utterances.size(); ++i) {
    const auto& u = utterances[i];
    out.insert(out.end(), u.tokens.begin(), u.tokens.end());
    out.emplace_back(tokens::kEndOfUtterance);
    if (i + 1 == utterances.size() || utterances[i + 1].speaker != u.speaker)
      out.emplace_back(tokens::kEndOfTurn);
  }
  return out;
}

/// Every utterance from the second on becomes a positive response to the
/// utterances before it: L - 1 examples for a dialogue of length L.
inline std::vector<Example> augment(const Dialogue& d, std::size_t first_group = 0) {
  d.validate();
  std::vector<Example> out;
  out.reserve(d.utterances.size() - 1);
  for (std::size_t t = 1; t < d.utterances.size(); ++t) {
    std::vector<Utterance> ctx(d.utterances.begin(),
                               d.utterances.begin() + static_cast<std::ptrdiff_t>(t));
    out.push_back({concat_context(ctx), d.utterances[t].tokens, 1, first_group + t - 1});
  }
  return out;
}

/// Draws label-0 responses per positive from `pool`, without replacement and
/// never equal to the positive's own response. A fractional ratio yields
/// floor(ratio) negatives plus one more with probability frac(ratio).
inline std::vector<Example> sample_negatives(const std::vector<Example>& positives,
                                             const std::vector<Tokens>& pool, double ratio,
                                             std::uint64_t seed) {
  if (!(ratio >= 1.0)) throw ContractError("negative ratio must be at least 1");
  Rng rng(seed);
  const auto whole = static_cast<std::size_t>(std::floor(ratio));
  const double frac = ratio - static_cast<double>(whole);
  std::vector<Example> out;
  std::vector<std::size_t> eligible;
  for (const auto& pos : positives) {
    const std::size_t count = whole + (frac > 0.0 && rng.bernoulli(frac) ? 1 : 0);
    eligible.clear();
    for (std::size_t i = 0; i < pool.size(); ++i)
      if (pool[i] != pos.response) eligible.push_back(i);
    if (eligible.size() < count) {
      throw InsufficientPoolError("need " + std::to_string(count) + " negatives but pool has " +
                                  std::to_string(eligible.size()) + " eligible responses");
    }
    // Partial Fisher-Yates.
    for (std::size_t k = 0; k < count; ++k) {
      const std::size_t j = k + rng.below(eligible.size() - k);
      std::swap(eligible[k], eligible[j]);
      out.push_back({pos.context, pool[eligible[k]], 0, pos.group});
    }
  }
  return out;
}

inline Tokens truncate(const Tokens& seq, std::size_t max_len, Truncation direction) {
  if (max_len == 0) throw ContractError("truncate: max_len must be at least 1");
  if (seq.size() <= max_len) return seq;
  if (direction == Truncation::KeepTail)
    return Tokens(seq.end() - static_cast<std::ptrdiff_t>(max_len), seq.end());
  return Tokens(seq.begin(), seq.begin() + static_cast<std::ptrdiff_t>(max_len));
}

/// Right-padded id matrix with a left-aligned {0,1} mask.
struct PaddedIds {
  std::vector<int> ids;
  std::vector<std::uint8_t> mask;
  std::vector<std::size_t> lengths;
  std::size_t rows = 0;
  std::size_t width = 0;

  template <Scalar T>
  Tensor<T> mask_tensor() const {
    std::vector<T> m(mask.begin(), mask.end());
    return Tensor<T>::from({rows, width}, std::move(m));
  }
};

inline PaddedIds pad_sequences(const std::vector<Tokens>& seqs, const Vocabulary& vocab) {
  PaddedIds p;
  p.rows = seqs.size();
  for (const auto& s : seqs) p.width = std::max(p.width, s.size());
  p.ids.assign(p.rows * p.width, Vocabulary::kPadId);
  p.mask.assign(p.rows * p.width, 0);
  for (std::size_t r = 0; r < p.rows; ++r) {
    if (seqs[r].empty()) throw ContractError("cannot batch an empty sequence");
    p.lengths.push_back(seqs[r].size());
    for (std::size_t t = 0; t < seqs[r].size(); ++t) {
      p.ids[r * p.width + t] = vocab.id(seqs[r][t]);
      p.mask[r * p.width + t] = 1;
    }
  }
  return p;
}

struct Batch {
  PaddedIds context;
  PaddedIds response;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
};

inline Batch make_batch(const std::vector<const Example*>& rows, const Vocabulary& vocab,
                        const SequenceOptions& opts) {
  std::vector<Tokens> ctx, rsp;
  Batch b;
  for (const Example* e : rows) {
    ctx.push_back(truncate(e->context, opts.max_context, opts.context_truncation));
    rsp.push_back(truncate(e->response, opts.max_response, Truncation::KeepHead));
    b.labels.push_back(e->label);
  }
  b.context = pad_sequences(ctx, vocab);
  b.response = pad_sequences(rsp, vocab);
  return b;
}

/// Shuffles under `seed`, truncates, maps ids and pads each batch to its
/// own maxima. Every example appears exactly once.
inline std::vector<Batch> make_batches(const std::vector<Example>& examples,
                                       std::size_t batch_size, const Vocabulary& vocab,
                                       const SequenceOptions& opts, std::uint64_t seed) {
  if (batch_size == 0) throw ContractError("batch size must be at least 1");
  std::vector<std::size_t> order(examples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);
  std::vector<Batch> out;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    std::vector<const Example*> rows;
    for (std::size_t i = start; i < std::min(order.size(), start + batch_size); ++i)
      rows.push_back(&examples[order[i]]);
    out.push_back(make_batch(rows, vocab, opts));
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSON Lines I/O

inline void to_json(nlohmann::json& j, const Utterance& u) {
  j = nlohmann::json{{"speaker", u.speaker}, {"tokens", u.tokens}};
}
inline void from_json(const nlohmann::json& j, Utterance& u) {
  j.at("speaker").get_to(u.speaker);
  j.at("tokens").get_to(u.tokens);
}
inline void to_json(nlohmann::json& j, const Dialogue& d) {
  j = nlohmann::json{{"id", d.id}, {"utterances", d.utterances}};
}
inline void from_json(const nlohmann::json& j, Dialogue& d) {
  j.at("id").get_to(d.id);
  j.at("utterances").get_to(d.utterances);
}
inline void to_json(nlohmann::json& j, const CandidateSet& c) {
  j = nlohmann::json{
      {"id", c.id}, {"context", c.context}, {"candidates", c.candidates}, {"correct", c.correct}};
}
inline void from_json(const nlohmann::json& j, CandidateSet& c) {
  j.at("id").get_to(c.id);
  j.at("context").get_to(c.context);
  j.at("candidates").get_to(c.candidates);
  j.at("correct").get_to(c.correct);
  for (auto i : c.correct)
    if (i >= c.candidates.size())
      throw ContractError("correct index " + std::to_string(i) + " outside candidate list");
}
inline void to_json(nlohmann::json& j, const Example& e) {
  j = nlohmann::json{
      {"context", e.context}, {"response", e.response}, {"label", e.label}, {"group", e.group}};
}
inline void from_json(const nlohmann::json& j, Example& e) {
  j.at("context").get_to(e.context);
  j.at("response").get_to(e.response);
  j.at("label").get_to(e.label);
  j.at("group").get_to(e.group);
  if (e.label != 0 && e.label != 1) throw ContractError("label must be 0 or 1");
}

template <typename Record>
std::vector<Record> read_jsonl(std::istream& in, const std::string& source = "input") {
  std::vector<Record> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    try {
      out.push_back(nlohmann::json::parse(line).get<Record>());
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(source + ": " + e.what(), lineno);
    } catch (const ContractError& e) {
      throw ParseError(source + ": " + e.what(), lineno);
    }
  }
  return out;
}

template <typename Record>
std::vector<Record> read_jsonl_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read '" + path + "'");
  return read_jsonl<Record>(in, path);
}

template <typename Record>
void write_jsonl(std::ostream& out, const std::vector<Record>& records) {
  for (const auto& r : records) out << nlohmann::json(r).dump() << '\n';
}

template <typename Record>
void write_jsonl_file(const std::string& path, const std::vector<Record>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path + "'");
  write_jsonl(out, records);
}

}  // namespace esrs
