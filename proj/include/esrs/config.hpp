#pragma once

#include <charconv>
#include <fstream>
#include <istream>
#include <map>
#include <nlohmann/json.hpp>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "esrs/error.hpp"

namespace esrs {

/// Flat `key = value` run configuration. `#` starts a comment; unknown keys
/// are rejected; every key has a default so the echo is complete.
class RunConfig {
 public:
  static const std::map<std::string, std::string>& defaults() {
    static const std::map<std::string, std::string> d = {
        {"seed", "0"},
        {"model", "esim"},
        {"variant", "full"},
        {"hidden", "300"},
        {"mlp_hidden", "0"},
        {"heads", "1"},
        {"attention_dim", "0"},
        {"embed_dim", "300"},
        {"embedding_files", ""},
        {"oov", "random"},
        {"embeddings_trainable", "true"},
        {"vocab_max_size", "0"},
        {"max_context", "300"},
        {"max_response", "30"},
        {"context_truncation", "keep_tail"},
        {"negative_ratio", "4"},
        {"train_file", ""},
        {"examples_file", ""},
        {"dev_file", ""},
        {"learning_rate", "0.0004"},
        {"batch_size", "128"},
        {"max_epochs", "10"},
        {"lr_decay", "1"},
        {"clip_norm", "0"},
        {"dropout", "0"},
        {"selection_metric", "mrr"},
        {"eval_chunk", "64"},
        {"synthetic_train_dialogues", "32"},
        {"synthetic_dev_cases", "50"},
        {"synthetic_test_cases", "100"},
        {"synthetic_filler_vocab", "60"},
        {"synthetic_keywords", "20"},
        {"synthetic_min_turns", "2"},
        {"synthetic_max_turns", "4"},
        {"synthetic_min_len", "3"},
        {"synthetic_max_len", "6"},
        {"synthetic_link_strength", "1"},
        {"synthetic_candidates", "10"},
        {"synthetic_none_fraction", "0"},
    };
    return d;
  }

  RunConfig() : values_(defaults()) {}

  static RunConfig parse(std::istream& in, const std::string& source = "config") {
    RunConfig c;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      const std::string body = trim(line);
      if (body.empty()) continue;
      const auto eq = body.find('=');
      if (eq == std::string::npos) throw ParseError(source + ": expected key = value", lineno);
      const std::string key = trim(body.substr(0, eq));
      try {
        c.set(key, trim(body.substr(eq + 1)));
      } catch (const ConfigError& e) {
        throw ParseError(source + ": " + e.what(), lineno);
      }
    }
    return c;
  }

  static RunConfig load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read config '" + path + "'");
    return parse(in, path);
  }

  void set(const std::string& key, const std::string& value) {
    if (!defaults().count(key)) throw ConfigError("unknown config key '" + key + "'");
    values_[key] = value;
  }

  const std::string& str(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    return it->second;
  }

  std::size_t size(const std::string& key) const {
    const auto& s = str(key);
    std::size_t v = 0;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size())
      throw ConfigError("config key '" + key + "' expects a non-negative integer, got '" + s + "'");
    return v;
  }

  std::uint64_t u64(const std::string& key) const { return static_cast<std::uint64_t>(size(key)); }

  double real(const std::string& key) const {
    const auto& s = str(key);
    try {
      std::size_t used = 0;
      const double v = std::stod(s, &used);
      if (used == s.size()) return v;
    } catch (const std::logic_error&) {
    }
    throw ConfigError("config key '" + key + "' expects a number, got '" + s + "'");
  }

  bool flag(const std::string& key) const {
    const auto& s = str(key);
    if (s == "true" || s == "1") return true;
    if (s == "false" || s == "0") return false;
    throw ConfigError("config key '" + key + "' expects true or false, got '" + s + "'");
  }

  std::vector<std::string> list(const std::string& key) const {
    std::vector<std::string> out;
    std::stringstream ss(str(key));
    std::string item;
    while (std::getline(ss, item, ',')) {
      item = trim(item);
      if (!item.empty()) out.push_back(item);
    }
    return out;
  }

  /// Every key with its effective value, sorted; parseable by `parse`.
  void echo(std::ostream& out) const {
    for (const auto& [k, v] : values_) out << k << " = " << v << '\n';
  }

  nlohmann::json to_json() const { return nlohmann::json(values_); }

  bool operator==(const RunConfig&) const = default;

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }

  std::map<std::string, std::string> values_;
};

}  // namespace esrs
