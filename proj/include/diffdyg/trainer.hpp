#pragma once

// Mini-batch BCE training with early stopping, and the AP / AUC-ROC
// evaluation protocols.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "diffdyg/event_store.hpp"
#include "diffdyg/featurizer.hpp"
#include "diffdyg/model.hpp"

namespace diffdyg::train {

using events::EventLog;
using events::NegativeProtocol;
using events::Phase;
using events::SplitSpec;
using features::QueryPair;
using model::Model;

// ---------------------------------------------------------------- metrics

// Clamped binary cross-entropy of a single probability.
double bce_loss(double p, int y, double clamp = 1e-7);

// Mean precision at each positive, scores ranked descending; ties keep input
// order. Throws MetricError without positives.
double average_precision(std::span<const double> scores, std::span<const int> labels);

// Mann-Whitney AUC, ties count one half. Throws MetricError on single-class input.
double auc_roc(std::span<const double> scores, std::span<const int> labels);

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation, 0 for a single value
};
MeanStd mean_std(std::span<const double> xs);

// ---------------------------------------------------------------- scoring

struct LabeledQuery {
  QueryPair q;
  int label = 1;
  std::size_t query_idx = 0;  // position of the positive this pair belongs to
};

// Called on the freshly built sequences of every scored pair, before the
// forward pass. Must be safe to call concurrently for different pairs.
using SequenceHook = std::function<void(const LabeledQuery&, std::uint64_t eval_seed, features::SequencePair&)>;

std::vector<double> score_queries(const Model& model, const EventLog& log, const events::NeighborIndex& index,
                                  std::span<const LabeledQuery> queries, std::uint64_t eval_seed = 0,
                                  const SequenceHook& hook = {});
// Single-threaded reference of the above.
std::vector<double> score_queries_serial(const Model& model, const EventLog& log,
                                         const events::NeighborIndex& index,
                                         std::span<const LabeledQuery> queries, std::uint64_t eval_seed = 0,
                                         const SequenceHook& hook = {});

// ---------------------------------------------------------------- evaluation

enum class EvalMode { kTransductive, kInductive };
EvalMode parse_mode(std::string_view s);
std::string_view to_string(EvalMode m);

using events::NodeId;

struct ScoreRow {
  NodeId src = 0;
  NodeId dst = 0;
  double ts = 0.0;
  int label = 0;
  double score = 0.0;
};

struct EvalReport {
  std::string dataset;
  Phase phase = Phase::kTest;
  NegativeProtocol protocol = NegativeProtocol::kRandom;
  EvalMode mode = EvalMode::kTransductive;
  std::vector<std::uint64_t> seeds;
  std::vector<double> ap;
  std::vector<double> auc;
  MeanStd ap_summary;
  MeanStd auc_summary;
  std::size_t num_positives = 0;
  std::size_t fallback_negatives = 0;
  std::vector<std::vector<ScoreRow>> dumps;  // one per seed

  nlohmann::json to_json() const;
};

struct EvalOptions {
  NegativeProtocol protocol = NegativeProtocol::kRandom;
  EvalMode mode = EvalMode::kTransductive;
  std::vector<std::uint64_t> seeds{0};
  std::string dataset = "unnamed";
  SequenceHook hook;
};

// Holds the full-history neighbor index and the negative pools of one split.
class Evaluator {
 public:
  Evaluator(const EventLog& log, const SplitSpec& split);

  // Positives of a phase; inductive mode keeps edges touching a masked node.
  std::vector<QueryPair> positives(Phase phase, EvalMode mode) const;

  // One protocol negative per positive, negatives resampled for every seed.
  std::vector<LabeledQuery> labeled_queries(std::span<const QueryPair> positives, NegativeProtocol protocol,
                                            std::uint64_t seed) const;

  EvalReport evaluate(const Model& model, Phase phase, const EvalOptions& opts) const;

  const EventLog& log() const { return *log_; }
  const SplitSpec& split() const { return split_; }
  const events::NeighborIndex& index() const { return index_; }
  const events::NegativeSampler& sampler() const { return sampler_; }

 private:
  const EventLog* log_;
  SplitSpec split_;
  events::NeighborIndex index_;
  events::NegativeSampler sampler_;
};

EvalReport evaluate(const Model& model, const EventLog& log, const SplitSpec& split, Phase phase,
                    const EvalOptions& opts);

void write_score_dump(const std::vector<ScoreRow>& rows, const std::filesystem::path& path);
std::vector<ScoreRow> read_score_dump(const std::filesystem::path& path);

// ---------------------------------------------------------------- training

struct TrainConfig {
  int epochs = 100;
  int patience = 5;
  int batch_size = 200;
  double lr = 1e-4;
  double weight_decay = 1e-4;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  NegativeProtocol protocol = NegativeProtocol::kRandom;  // validation / test negatives
  EvalMode mode = EvalMode::kTransductive;
  // Gradient work is cut into this many pieces regardless of thread count,
  // so parallel and serial runs sum in the same order.
  int grad_chunks = 8;

  void validate() const;
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_ap = 0.0;
  double val_auc = 0.0;
  bool improved = false;

  nlohmann::json to_json() const;
};

struct TrainResult {
  Model model;  // best-validation parameters
  std::vector<EpochRecord> history;
  int best_epoch = -1;  // -1 when no epoch ran
  double best_val_ap = 0.0;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

// Trains from `init`; all randomness derives from `seed`.
TrainResult train(const EventLog& log, const SplitSpec& split, const TrainConfig& cfg, Model init,
                  std::uint64_t seed, const EpochCallback& on_epoch = {});

struct BatchGradients {
  tensor::Gradients grads;
  double loss_sum = 0.0;  // summed BCE over the pairs
};

// Mean-BCE gradients of one batch of labeled pairs. dropout_seed keys the
// per-pair dropout streams.
BatchGradients batch_gradients(const Model& model, const EventLog& log, const events::NeighborIndex& index,
                               std::span<const LabeledQuery> pairs, std::uint64_t dropout_seed, int chunks);
BatchGradients batch_gradients_serial(const Model& model, const EventLog& log,
                                      const events::NeighborIndex& index, std::span<const LabeledQuery> pairs,
                                      std::uint64_t dropout_seed, int chunks);

// Mean-pooled source embeddings for the listed interactions (one row each).
tensor::Matrix source_embeddings(const Model& model, const EventLog& log, const events::NeighborIndex& index,
                                 std::span<const std::size_t> interaction_indices);

}  // namespace diffdyg::train
