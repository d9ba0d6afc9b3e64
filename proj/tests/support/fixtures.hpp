#pragma once

#include <unistd.h>

#include <atomic>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "esrs/esim.hpp"
#include "esrs/numcore/tensor.hpp"
#include "esrs/random.hpp"
#include "esrs/sentenc.hpp"

namespace esrs::testing {

inline Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor<double>::from(std::move(shape), std::move(v));
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("esrs_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::string file(const std::string& name) const { return (path_ / name).string(); }

 private:
  std::filesystem::path path_;
};

inline std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void spit(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
}

/// Vocabulary over a few letters: ids 4.. are "a", "b", ...
inline Vocabulary letter_vocab(std::size_t n = 8) {
  std::vector<std::string> toks;
  for (std::size_t i = 0; i < n; ++i) toks.push_back(std::string(1, static_cast<char>('a' + i)));
  return Vocabulary::build({toks});
}

inline Tokens random_tokens(Rng& rng, std::size_t len, std::size_t letters = 8) {
  Tokens t(len);
  for (auto& s : t) s = std::string(1, static_cast<char>('a' + rng.below(letters)));
  return t;
}

template <Scalar T>
EsimModel<T> tiny_esim(EsimVariant v = EsimVariant::Full, std::uint64_t seed = 1, std::size_t h = 4,
                       std::size_t de = 3) {
  EsimConfig cfg;
  cfg.hidden = h;
  cfg.embed_dim = de;
  cfg.variant = v;
  const auto vocab = letter_vocab();
  return EsimModel<T>(cfg, vocab, initial_embeddings(vocab, nullptr, de, seed), seed);
}

template <Scalar T>
SentEncModel<T> tiny_sentenc(std::uint64_t seed = 1, std::size_t h = 4, std::size_t heads = 2,
                             std::size_t de = 3) {
  SentEncConfig cfg;
  cfg.hidden = h;
  cfg.heads = heads;
  cfg.embed_dim = de;
  const auto vocab = letter_vocab();
  return SentEncModel<T>(cfg, vocab, initial_embeddings(vocab, nullptr, de, seed), seed);
}

template <Scalar T>
std::vector<std::pair<std::string, Tensor<T>>> named_pairs(const std::vector<NamedTensor<T>>& params) {
  std::vector<std::pair<std::string, Tensor<T>>> out;
  for (const auto& p : params) out.emplace_back(p.name, p.tensor);
  return out;
}

/// One batch from explicit (context, response, label) rows.
inline Batch batch_of(const std::vector<Example>& rows, const Vocabulary& vocab, const SequenceOptions& opts = {}) {
  std::vector<const Example*> ptrs;
  for (const auto& r : rows) ptrs.push_back(&r);
  return make_batch(ptrs, vocab, opts);
}

inline CandidateSet random_candidate_set(Rng& rng, std::size_t candidates, const std::string& id = "case") {
  CandidateSet s;
  s.id = id;
  const std::size_t turns = 1 + rng.below(3);
  for (std::size_t t = 0; t < turns; ++t)
    s.context.push_back({t % 2 ? "B" : "A", random_tokens(rng, 1 + rng.below(4))});
  for (std::size_t i = 0; i < candidates; ++i) s.candidates.push_back(random_tokens(rng, 1 + rng.below(5)));
  s.correct = {rng.below(candidates)};
  return s;
}

}  // namespace esrs::testing
