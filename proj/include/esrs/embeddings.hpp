#pragma once

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "esrs/error.hpp"
#include "esrs/numcore/init.hpp"
#include "esrs/numcore/ops.hpp"
#include "esrs/random.hpp"
#include "esrs/vocabulary.hpp"

namespace esrs {

/// One pretrained table: |V| rows of dimension `dim`, row-major.
class EmbeddingTable {
 public:
  explicit EmbeddingTable(std::size_t dim = 0) : dim_(dim) {}

  std::size_t dim() const { return dim_; }
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  /// Keeps the first occurrence; returns false for a duplicate.
  bool add(const std::string& token, std::span<const float> row) {
    if (row.size() != dim_) {
      throw DimensionError("embedding row for '" + token + "' has " + std::to_string(row.size()) +
                           " values, table dim is " + std::to_string(dim_));
    }
    if (index_.count(token)) return false;
    index_.emplace(token, tokens_.size());
    tokens_.push_back(token);
    matrix_.insert(matrix_.end(), row.begin(), row.end());
    return true;
  }

  std::optional<std::span<const float>> row(const std::string& token) const {
    const auto it = index_.find(token);
    if (it == index_.end()) return std::nullopt;
    return std::span<const float>(matrix_.data() + it->second * dim_, dim_);
  }

 private:
  std::size_t dim_;
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<std::string> tokens_;
  std::vector<float> matrix_;
};

struct EmbeddingParseResult {
  EmbeddingTable table;
  std::size_t malformed_lines = 0;
  std::size_t duplicate_tokens = 0;
  bool had_header = false;
};

namespace detail {

inline std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t')) ++i;
    const std::size_t start = i;
    while (i < line.size() && line[i] != ' ' && line[i] != '\t') ++i;
    if (i > start) out.push_back(line.substr(start, i - start));
  }
  return out;
}

inline bool parse_float(std::string_view s, float& out) {
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && p == s.data() + s.size();
}

inline bool parse_size(std::string_view s, std::size_t& out) {
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && p == s.data() + s.size();
}

}  // namespace detail

/// Whitespace-separated text: `token v1 ... vd` per line. A first line of
/// exactly two integers is a `count dim` header and is skipped. LF or CRLF.
inline EmbeddingParseResult parse_embedding_stream(std::istream& in,
                                                   std::optional<std::size_t> expected_dim = {}) {
  EmbeddingParseResult result;
  std::optional<std::size_t> dim;
  std::string line;
  std::vector<float> row;
  bool first = true;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto fields = detail::split_ws(line);
    if (first) {
      first = false;
      std::size_t count = 0, header_dim = 0;
      if (fields.size() == 2 && detail::parse_size(fields[0], count) &&
          detail::parse_size(fields[1], header_dim)) {
        result.had_header = true;
        if (header_dim > 0) dim = header_dim;
        continue;
      }
    }
    if (fields.empty()) continue;
    if (fields.size() < 2) {
      ++result.malformed_lines;
      continue;
    }
    if (!dim) dim = fields.size() - 1;
    if (fields.size() - 1 != *dim) {
      ++result.malformed_lines;
      continue;
    }
    row.resize(*dim);
    bool ok = true;
    for (std::size_t i = 0; i < *dim && ok; ++i) ok = detail::parse_float(fields[i + 1], row[i]);
    if (!ok) {
      ++result.malformed_lines;
      continue;
    }
    if (result.table.dim() == 0) result.table = EmbeddingTable(*dim);
    if (!result.table.add(std::string(fields[0]), row)) ++result.duplicate_tokens;
  }
  if (expected_dim && dim && *dim != *expected_dim) {
    throw DimensionError("embedding dim " + std::to_string(*dim) + " does not match expected " +
                         std::to_string(*expected_dim));
  }
  if (result.table.size() == 0) {
    throw EmptyTableError("embedding input contains no well-formed lines");
  }
  return result;
}

inline EmbeddingParseResult parse_embedding_file(const std::string& path,
                                                 std::optional<std::size_t> expected_dim = {}) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read embedding file '" + path + "'");
  try {
    return parse_embedding_stream(in, expected_dim);
  } catch (const EmptyTableError&) {
    throw EmptyTableError("embedding file '" + path + "' contains no well-formed lines");
  }
}

/// Headerless text format, 9 significant digits (exact for 32-bit floats).
inline void write_embedding_stream(const EmbeddingTable& table, std::ostream& out) {
  char buf[32];
  for (const auto& tok : table.tokens()) {
    out << tok;
    const auto row = *table.row(tok);
    for (float v : row) {
      std::snprintf(buf, sizeof buf, " %.9g", static_cast<double>(v));
      out << buf;
    }
    out << '\n';
  }
}

enum class OovPolicy { Zero, SeededRandom };

/// Ordered tables E_1..E_k whose rows are concatenated per token.
struct EmbeddingSet {
  std::vector<EmbeddingTable> tables;
  OovPolicy oov = OovPolicy::SeededRandom;
  std::uint64_t seed = 0;
  bool trainable = true;

  std::size_t dim() const {
    std::size_t d = 0;
    for (const auto& t : tables) d += t.dim();
    return d;
  }

  /// Seeded U(-0.1, 0.1) row keyed by the token, identical across runs.
  std::vector<float> random_row(const std::string& token, std::size_t d) const {
    Rng rng(mix_seed(seed, stable_hash(token)));
    std::vector<float> v(d);
    for (auto& x : v) x = static_cast<float>(rng.uniform(-0.1, 0.1));
    return v;
  }

  std::vector<float> lookup_concat(const std::string& token) const {
    if (tables.empty()) throw ContractError("lookup in an empty embedding set");
    std::vector<float> out;
    out.reserve(dim());
    for (std::size_t k = 0; k < tables.size(); ++k) {
      const auto& t = tables[k];
      if (const auto row = t.row(token)) {
        out.insert(out.end(), row->begin(), row->end());
      } else if (oov == OovPolicy::Zero) {
        out.insert(out.end(), t.dim(), 0.0f);
      } else {
        const auto r = random_row(token + "\x1f" + std::to_string(k), t.dim());
        out.insert(out.end(), r.begin(), r.end());
      }
    }
    return out;
  }

  /// Matrix [|vocab| x dim()] for a vocabulary. <pad> is all-zero; the other
  /// special tokens always get seeded-random rows.
  std::vector<float> matrix_for(const Vocabulary& vocab) const {
    const std::size_t d = dim();
    std::vector<float> m;
    m.reserve(vocab.size() * d);
    for (std::size_t i = 0; i < vocab.size(); ++i) {
      const auto& tok = vocab.token(static_cast<int>(i));
      if (i == static_cast<std::size_t>(Vocabulary::kPadId)) {
        m.insert(m.end(), d, 0.0f);
      } else if (i < Vocabulary::kSpecialCount) {
        const auto r = random_row(tok, d);
        m.insert(m.end(), r.begin(), r.end());
      } else {
        const auto r = lookup_concat(tok);
        m.insert(m.end(), r.begin(), r.end());
      }
    }
    return m;
  }
};

/// ReLU(x W + b): concatenated embedding width -> model width.
template <Scalar T>
struct Projection {
  Linear<T> layer;

  static Projection init(std::size_t in, std::size_t out, Rng& rng) {
    if (out == 0) throw DimensionError("projection output dim must be positive");
    return {Linear<T>::init(in, out, rng)};
  }

  std::size_t out_dim() const { return layer.out_dim(); }
};

template <Scalar T>
Tensor<T> project(const Projection<T>& proj, const Tensor<T>& x) {
  if (x.rank() < 1 || x.shape().back() != proj.layer.in_dim()) {
    throw DimensionError("project: input " + shape_str(x.shape()) + " vs weight " +
                         shape_str(proj.layer.weight.shape()));
  }
  return relu(proj.layer(x));
}

}  // namespace esrs
