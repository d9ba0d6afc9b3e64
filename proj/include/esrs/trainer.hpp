#pragma once

#include <cmath>
#include <concepts>
#include <cstdint>
#include <functional>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "esrs/checkpoint.hpp"
#include "esrs/datapipe.hpp"
#include "esrs/numcore/ops.hpp"
#include "esrs/parallel.hpp"
#include "esrs/rankeval.hpp"

namespace esrs {

template <typename M>
concept TrainableModel = requires(const M& m, const Batch& b, const CandidateSet& s, Rng* rng) {
  typename M::value_type;
  { m.logits(b, rng) } -> std::same_as<Tensor<typename M::value_type>>;
  { m.parameters() } -> std::same_as<std::vector<NamedTensor<typename M::value_type>>>;
  { m.score(s, std::size_t{}) } -> std::same_as<std::vector<double>>;
  { m.to_checkpoint() } -> std::same_as<Checkpoint>;
  m.vocab();
  m.sequence();
};

/// Mean −log p(label) over the batch, from [B x 2] logits.
template <Scalar T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  return softmax_cross_entropy(logits, labels, 1e-12);
}

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <Scalar T>
struct AdamState {
  AdamConfig config;
  std::uint64_t step = 0;
  std::vector<std::vector<T>> m, v;

  OptimizerSnapshot snapshot() const {
    OptimizerSnapshot s;
    s.step = step;
    for (const auto& x : m) s.first_moment.emplace_back(x.begin(), x.end());
    for (const auto& x : v) s.second_moment.emplace_back(x.begin(), x.end());
    return s;
  }
};

/// One bias-corrected Adam update of every trainable parameter. Parameters
/// that do not require grad are frozen and skipped.
template <Scalar T>
void adam_step(AdamState<T>& state, std::vector<NamedTensor<T>>& params, double lr) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.tensor.size(), T(0));
      state.v.emplace_back(p.tensor.size(), T(0));
    }
  }
  if (state.m.size() != params.size()) {
    throw ContractError("adam_step: optimizer tracks " + std::to_string(state.m.size()) +
                        " parameters, got " + std::to_string(params.size()));
  }
  for (const auto& p : params) {
    if (p.tensor.requires_grad() && !p.tensor.has_grad())
      throw ContractError("adam_step: parameter '" + p.name + "' has no gradient");
  }
  ++state.step;
  const auto& c = state.config;
  const double t = static_cast<double>(state.step);
  const double corr1 = 1.0 - std::pow(c.beta1, t);
  const double corr2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k].tensor;
    if (!p.requires_grad()) continue;
    auto w = p.mutable_values();
    const auto g = p.grad();
    auto& m = state.m[k];
    auto& v = state.v[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = static_cast<double>(g[i]);
      const double mi = c.beta1 * static_cast<double>(m[i]) + (1.0 - c.beta1) * gi;
      const double vi = c.beta2 * static_cast<double>(v[i]) + (1.0 - c.beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double update = lr * (mi / corr1) / (std::sqrt(vi / corr2) + c.eps);
      w[i] = static_cast<T>(static_cast<double>(w[i]) - update);
    }
  }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
template <Scalar T>
double clip_gradients(std::vector<NamedTensor<T>>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params)
    if (p.tensor.has_grad())
      for (T g : p.tensor.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const T f = static_cast<T>(max_norm / norm);
    for (auto& p : params)
      if (p.tensor.has_grad())
        for (auto& g : p.tensor.mutable_grad()) g *= f;
  }
  return norm;
}

enum class SelectionMetric { Mrr, Recall1, Recall10 };

inline SelectionMetric selection_metric_from(const std::string& s) {
  if (s == "mrr") return SelectionMetric::Mrr;
  if (s == "r@1") return SelectionMetric::Recall1;
  if (s == "r@10") return SelectionMetric::Recall10;
  throw ConfigError("unknown selection metric '" + s + "' (expected mrr, r@1 or r@10)");
}

struct TrainConfig {
  double learning_rate = 4e-4;
  std::size_t batch_size = 128;
  std::size_t max_epochs = 10;
  std::uint64_t seed = 0;
  double lr_decay = 1.0;   // per-epoch multiplier; 1 disables
  double clip_norm = 0.0;  // 0 disables
  SelectionMetric selection = SelectionMetric::Mrr;
  bool track_train_accuracy = false;
  bool restore_best = true;
  std::size_t eval_chunk = 64;
  std::size_t workers = 1;
  /// Stops early once training accuracy reaches this value (0 disables).
  double stop_at_train_accuracy = 0.0;

  void validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
    if (batch_size < 1) throw ConfigError("batch size must be at least 1");
    if (!(lr_decay > 0.0)) throw ConfigError("lr_decay must be positive");
    if (clip_norm < 0.0) throw ConfigError("clip_norm must be non-negative");
  }
};

struct EpochRecord {
  std::size_t epoch = 0;
  double loss = 0.0;
  double learning_rate = 0.0;
  std::optional<double> train_accuracy;
  std::optional<EvalReport> dev;

  nlohmann::json to_json() const {
    nlohmann::json j{{"epoch", epoch}, {"loss", loss}, {"lr", learning_rate}};
    j["train_accuracy"] = train_accuracy ? nlohmann::json(*train_accuracy) : nlohmann::json(nullptr);
    j["dev"] = dev ? dev->to_json() : nlohmann::json(nullptr);
    return j;
  }
};

struct TrainResult {
  Checkpoint best;
  std::size_t best_epoch = 0;
  std::vector<EpochRecord> history;
};

/// Fraction of examples whose argmax class equals the label.
template <TrainableModel M>
double evaluate_accuracy(const M& model, const std::vector<Example>& examples, std::size_t batch_size) {
  if (examples.empty()) return 0.0;
  NoGradGuard no_grad;
  std::size_t right = 0;
  for (std::size_t s = 0; s < examples.size(); s += batch_size) {
    std::vector<const Example*> rows;
    for (std::size_t i = s; i < std::min(examples.size(), s + batch_size); ++i) rows.push_back(&examples[i]);
    const auto b = make_batch(rows, model.vocab(), model.sequence());
    const auto z = model.logits(b, nullptr);
    for (std::size_t r = 0; r < b.size(); ++r) {
      const int pred = z[r * 2 + 1] > z[r * 2] ? 1 : 0;
      right += pred == b.labels[r];
    }
  }
  return static_cast<double>(right) / static_cast<double>(examples.size());
}

/// Scores of every candidate set, optionally spread across worker threads.
template <TrainableModel M>
std::vector<std::vector<double>> score_sets(const M& model, const std::vector<CandidateSet>& sets,
                                            std::size_t chunk = 64, std::size_t workers = 1) {
  std::vector<std::vector<double>> out(sets.size());
  parallel_for(sets.size(), workers, [&](std::size_t i) { out[i] = model.score(sets[i], chunk); });
  return out;
}

/// Rankings of every candidate set under the model.
template <TrainableModel M>
std::vector<Ranking> rank_sets(const M& model, const std::vector<CandidateSet>& sets, std::size_t chunk,
                               std::size_t workers = 1) {
  const auto scores = score_sets(model, sets, chunk, workers);
  std::vector<Ranking> out;
  out.reserve(sets.size());
  for (std::size_t i = 0; i < sets.size(); ++i) out.push_back(rank(sets[i], scores[i]));
  return out;
}

template <TrainableModel M>
EvalReport evaluate_sets(const M& model, const std::vector<CandidateSet>& sets, std::size_t chunk,
                         std::size_t workers = 1) {
  GoldSets gold;
  for (const auto& s : sets) gold.push_back(s.correct);
  return evaluate(rank_sets(model, sets, chunk, workers), gold);
}

inline double selection_value(const EvalReport& r, SelectionMetric m) {
  switch (m) {
    case SelectionMetric::Recall1: return r.r1;
    case SelectionMetric::Recall10: return r.r10;
    case SelectionMetric::Mrr: break;
  }
  return r.mrr;
}

template <TrainableModel M>
class Trainer {
 public:
  using T = typename M::value_type;

  Trainer(M& model, TrainConfig cfg) : model_(model), cfg_(std::move(cfg)) {
    cfg_.validate();
    params_ = model_.parameters();
  }

  const AdamState<T>& optimizer() const { return adam_; }

  /// One shuffled pass; returns the example-weighted mean loss.
  double run_epoch(const std::vector<Example>& train, std::size_t epoch, double lr) {
    const auto batches = make_batches(train, cfg_.batch_size, model_.vocab(), model_.sequence(),
                                      mix_seed(cfg_.seed, epoch));
    Rng dropout_rng(mix_seed(cfg_.seed ^ 0xd50u, epoch));
    double total = 0.0;
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      const auto& b = batches[bi];
      for (auto& p : params_)
        if (p.tensor.requires_grad()) p.tensor.clear_grad();
      const auto loss = cross_entropy(model_.logits(b, &dropout_rng), b.labels);
      const double value = static_cast<double>(loss.item());
      if (!std::isfinite(value)) {
        throw NumericError("non-finite loss " + std::to_string(value) + " at epoch " +
                           std::to_string(epoch) + ", batch " + std::to_string(bi));
      }
      backward(loss);
      if (cfg_.clip_norm > 0.0) clip_gradients(params_, cfg_.clip_norm);
      adam_step(adam_, params_, lr);
      total += value * static_cast<double>(b.size());
    }
    return train.empty() ? 0.0 : total / static_cast<double>(train.size());
  }

  /// Epoch loop with dev selection. `on_epoch` sees each record as it lands.
  TrainResult train(const std::vector<Example>& train_data, const std::vector<CandidateSet>& dev,
                    const std::function<void(const EpochRecord&)>& on_epoch = {}) {
    if (train_data.empty()) throw ContractError("train: no training examples");
    TrainResult result;
    double lr = cfg_.learning_rate;
    std::optional<double> best_value;
    for (std::size_t epoch = 1; epoch <= cfg_.max_epochs; ++epoch) {
      EpochRecord rec;
      rec.epoch = epoch;
      rec.learning_rate = lr;
      rec.loss = run_epoch(train_data, epoch, lr);
      if (cfg_.track_train_accuracy || cfg_.stop_at_train_accuracy > 0.0)
        rec.train_accuracy = evaluate_accuracy(model_, train_data, cfg_.batch_size);
      if (!dev.empty()) rec.dev = evaluate_sets(model_, dev, cfg_.eval_chunk, cfg_.workers);
      const double value = rec.dev ? selection_value(*rec.dev, cfg_.selection) : static_cast<double>(epoch);
      if (!best_value || value > *best_value) {
        best_value = value;
        result.best_epoch = epoch;
        result.best = model_.to_checkpoint();
        result.best.optimizer = adam_.snapshot();
        result.best.dev_metrics = rec.dev ? rec.dev->to_json() : nlohmann::json::object();
        result.best.dev_metrics["epoch"] = epoch;
      }
      result.history.push_back(rec);
      if (on_epoch) on_epoch(rec);
      lr *= cfg_.lr_decay;
      if (cfg_.stop_at_train_accuracy > 0.0 && *rec.train_accuracy >= cfg_.stop_at_train_accuracy) break;
    }
    if (cfg_.restore_best) {
      for (auto& p : params_) load_entry(result.best.param(p.name), p.tensor);
    }
    return result;
  }

 private:
  M& model_;
  TrainConfig cfg_;
  std::vector<NamedTensor<T>> params_;
  AdamState<T> adam_;
};

template <TrainableModel M>
TrainResult train(M& model, const TrainConfig& cfg, const std::vector<Example>& train_data,
                  const std::vector<CandidateSet>& dev,
                  const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  Trainer<M> t(model, cfg);
  return t.train(train_data, dev, on_epoch);
}

}  // namespace esrs
