#pragma once

#include <algorithm>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "esrs/error.hpp"

namespace esrs {

namespace tokens {
inline constexpr std::string_view kPad = "<pad>";
inline constexpr std::string_view kUnk = "<unk>";
inline constexpr std::string_view kEndOfUtterance = "__eou__";
inline constexpr std::string_view kEndOfTurn = "__eot__";
}  // namespace tokens

/// Token <-> id map. Ids 0..3 are always <pad>, <unk>, __eou__, __eot__.
class Vocabulary {
 public:
  static constexpr int kPadId = 0;
  static constexpr int kUnkId = 1;
  static constexpr std::size_t kSpecialCount = 4;

  Vocabulary() {
    for (auto t : {tokens::kPad, tokens::kUnk, tokens::kEndOfUtterance, tokens::kEndOfTurn})
      insert(std::string(t));
  }

  /// Most frequent tokens first (ties lexicographic), at most `max_size`
  /// ordinary tokens beyond the specials; 0 means unlimited.
  static Vocabulary build(const std::vector<std::vector<std::string>>& sequences,
                          std::size_t max_size = 0) {
    std::map<std::string, std::size_t> counts;
    for (const auto& seq : sequences)
      for (const auto& tok : seq) ++counts[tok];
    std::vector<std::pair<std::string, std::size_t>> ordered(counts.begin(), counts.end());
    std::stable_sort(ordered.begin(), ordered.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    Vocabulary v;
    for (const auto& [tok, n] : ordered) {
      if (max_size != 0 && v.size() - kSpecialCount >= max_size) break;
      if (!v.contains(tok)) v.insert(tok);
    }
    return v;
  }

  static Vocabulary from_tokens(const std::vector<std::string>& all) {
    Vocabulary v;
    if (all.size() < kSpecialCount ||
        !std::equal(all.begin(), all.begin() + kSpecialCount, v.tokens_.begin())) {
      throw ContractError("vocabulary listing must start with the four special tokens");
    }
    for (std::size_t i = kSpecialCount; i < all.size(); ++i) {
      if (v.contains(all[i])) throw ContractError("duplicate vocabulary token '" + all[i] + "'");
      v.insert(all[i]);
    }
    return v;
  }

  std::size_t size() const { return tokens_.size(); }
  bool contains(const std::string& tok) const { return ids_.count(tok) != 0; }

  /// Out-of-vocabulary tokens map to <unk>.
  int id(const std::string& tok) const {
    const auto it = ids_.find(tok);
    return it == ids_.end() ? kUnkId : it->second;
  }

  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  bool operator==(const Vocabulary& o) const { return tokens_ == o.tokens_; }

 private:
  void insert(std::string tok) {
    ids_.emplace(tok, static_cast<int>(tokens_.size()));
    tokens_.push_back(std::move(tok));
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
};

}  // namespace esrs
