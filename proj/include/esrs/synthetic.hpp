#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "esrs/datapipe.hpp"
#include "esrs/error.hpp"
#include "esrs/random.hpp"

namespace esrs {

/// Keyword-linked dialogues: every dialogue owns one planted keyword that
/// appears in its first utterance and (with probability `link_strength`) in
/// each later one. Evaluation distractors always carry a different keyword,
/// so keyword overlap alone identifies the correct candidate.
struct SyntheticConfig {
  std::size_t train_dialogues = 32;
  std::size_t dev_cases = 50;
  std::size_t test_cases = 100;
  std::size_t filler_vocab = 60;
  std::size_t keywords = 20;
  std::size_t min_turns = 2;
  std::size_t max_turns = 4;
  std::size_t min_len = 3;
  std::size_t max_len = 6;
  double link_strength = 1.0;
  std::size_t candidates = 10;
  double none_fraction = 0.0;
  double same_speaker_prob = 0.2;

  void validate() const {
    if (keywords < 2) throw ConfigError("synthetic corpus needs at least 2 keywords");
    if (filler_vocab < 1) throw ConfigError("synthetic corpus needs a filler vocabulary");
    if (min_turns < 2 || max_turns < min_turns) throw ConfigError("turn range must satisfy 2 <= min <= max");
    if (min_len < 1 || max_len < min_len) throw ConfigError("length range must satisfy 1 <= min <= max");
    if (candidates < 1) throw ConfigError("need at least one candidate per case");
    if (link_strength < 0 || link_strength > 1) throw ConfigError("link_strength must lie in [0,1]");
    if (none_fraction < 0 || none_fraction > 1) throw ConfigError("none_fraction must lie in [0,1]");
  }
};

struct SyntheticCorpus {
  std::vector<Dialogue> train, dev, test;
  std::vector<CandidateSet> dev_sets, test_sets;
};

inline std::string synthetic_keyword(std::size_t k) { return "kw" + std::to_string(k); }

namespace detail {

class SyntheticWriter {
 public:
  SyntheticWriter(const SyntheticConfig& cfg, Rng& rng) : cfg_(cfg), rng_(rng) {}

  Tokens utterance(std::optional<std::size_t> keyword) {
    const std::size_t len = cfg_.min_len + rng_.below(cfg_.max_len - cfg_.min_len + 1);
    Tokens t(len);
    for (auto& tok : t) tok = "w" + std::to_string(rng_.below(cfg_.filler_vocab));
    if (keyword) t[rng_.below(len)] = synthetic_keyword(*keyword);
    return t;
  }

  Dialogue dialogue(const std::string& id, std::size_t keyword, bool force_last) {
    Dialogue d{id, {}};
    const std::size_t turns = cfg_.min_turns + rng_.below(cfg_.max_turns - cfg_.min_turns + 1);
    std::string speaker = "A";
    for (std::size_t t = 0; t < turns; ++t) {
      if (t > 0 && !rng_.bernoulli(cfg_.same_speaker_prob)) speaker = speaker == "A" ? "B" : "A";
      const bool linked = t == 0 || (force_last && t + 1 == turns) || rng_.bernoulli(cfg_.link_strength);
      d.utterances.push_back({speaker, utterance(linked ? std::optional(keyword) : std::nullopt)});
    }
    return d;
  }

  std::size_t other_keyword(std::size_t keyword) {
    const std::size_t k = rng_.below(cfg_.keywords - 1);
    return k >= keyword ? k + 1 : k;
  }

  CandidateSet eval_case(const std::string& id, Dialogue& source) {
    const std::size_t keyword = rng_.below(cfg_.keywords);
    source = dialogue(id, keyword, true);
    CandidateSet cs;
    cs.id = id;
    cs.context.assign(source.utterances.begin(), source.utterances.end() - 1);
    const bool none = rng_.bernoulli(cfg_.none_fraction);
    const std::size_t slot = rng_.below(cfg_.candidates);
    for (std::size_t i = 0; i < cfg_.candidates; ++i) {
      if (i == slot && !none) {
        cs.candidates.push_back(source.utterances.back().tokens);
        cs.correct.push_back(i);
      } else {
        cs.candidates.push_back(utterance(other_keyword(keyword)));
      }
    }
    return cs;
  }

 private:
  const SyntheticConfig& cfg_;
  Rng& rng_;
};

inline std::string padded_id(const char* prefix, std::size_t i) {
  std::string n = std::to_string(i);
  return std::string(prefix) + std::string(n.size() < 5 ? 5 - n.size() : 0, '0') + n;
}

}  // namespace detail

inline SyntheticCorpus generate_synthetic_corpus(const SyntheticConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  detail::SyntheticWriter w(cfg, rng);
  SyntheticCorpus c;
  for (std::size_t i = 0; i < cfg.train_dialogues; ++i)
    c.train.push_back(w.dialogue(detail::padded_id("train-", i), rng.below(cfg.keywords), false));
  for (std::size_t i = 0; i < cfg.dev_cases; ++i) {
    Dialogue d;
    c.dev_sets.push_back(w.eval_case(detail::padded_id("dev-", i), d));
    c.dev.push_back(std::move(d));
  }
  for (std::size_t i = 0; i < cfg.test_cases; ++i) {
    Dialogue d;
    c.test_sets.push_back(w.eval_case(detail::padded_id("test-", i), d));
    c.test.push_back(std::move(d));
  }
  return c;
}

}  // namespace esrs
