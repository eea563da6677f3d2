#pragma once

// Timestamped interaction streams: ingestion, chronological splits,
// most-recent-K neighbor lookup, negative sampling and the synthetic
// shifted-community generator.

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "diffdyg/rng.hpp"

namespace diffdyg::events {

using NodeId = std::int64_t;

struct Interaction {
  NodeId src = 0;
  NodeId dst = 0;
  double ts = 0.0;
  std::vector<double> edge_feat;
  std::size_t idx = 0;
};

class EventLog {
 public:
  EventLog() = default;
  // Validates every invariant; throws SchemaError / OrderingError.
  EventLog(std::vector<Interaction> interactions, std::size_t num_nodes,
           std::size_t edge_feat_dim = 0, std::size_t node_feat_dim = 0,
           std::unordered_map<NodeId, std::vector<double>> node_feat = {});

  std::span<const Interaction> interactions() const { return interactions_; }
  const Interaction& operator[](std::size_t i) const { return interactions_[i]; }
  std::size_t size() const { return interactions_.size(); }
  bool empty() const { return interactions_.empty(); }
  std::size_t num_nodes() const { return num_nodes_; }
  std::size_t edge_feat_dim() const { return edge_feat_dim_; }
  std::size_t node_feat_dim() const { return node_feat_dim_; }

  // Zero vector of node_feat_dim() when the node has no stored feature.
  std::span<const double> node_feature(NodeId n) const;
  const std::unordered_map<NodeId, std::vector<double>>& node_features() const { return node_feat_; }

  double max_ts() const { return interactions_.empty() ? 0.0 : interactions_.back().ts; }

 private:
  std::vector<Interaction> interactions_;
  std::unordered_map<NodeId, std::vector<double>> node_feat_;
  std::vector<double> zero_node_feat_;
  std::size_t num_nodes_ = 0;
  std::size_t edge_feat_dim_ = 0;
  std::size_t node_feat_dim_ = 0;
};

// Event CSV: header `src,dst,ts[,f0,f1,...]`. Node CSV: `node,f0,f1,...`.
EventLog load_events(const std::filesystem::path& path,
                     const std::optional<std::filesystem::path>& node_feat_path = std::nullopt);
EventLog parse_events(std::string_view csv_text, std::string_view node_csv_text = {});
void write_events(const EventLog& log, const std::filesystem::path& path);
std::string format_events(const EventLog& log);

struct SplitRatios {
  double train = 0.70;
  double val = 0.15;
  double test = 0.15;
};

enum class Phase { kTrain, kVal, kTest };

struct SplitSpec {
  double train_end_ts = 0.0;
  double val_end_ts = 0.0;
  std::set<NodeId> inductive_masked_nodes;

  Phase phase_of(double ts) const {
    if (ts <= train_end_ts) return Phase::kTrain;
    if (ts <= val_end_ts) return Phase::kVal;
    return Phase::kTest;
  }
  bool is_masked(NodeId n) const { return inductive_masked_nodes.count(n) != 0; }
  bool inductive() const { return !inductive_masked_nodes.empty(); }

  bool operator==(const SplitSpec&) const = default;
};

// Boundaries fall on the last interaction of the floor(ratio * n) prefix;
// interactions sharing a boundary timestamp go to the earlier split.
SplitSpec chronological_split(const EventLog& log, SplitRatios ratios = {}, bool inductive = false,
                              double mask_fraction = 0.1, std::uint64_t seed = 0);

// Indices of interactions falling into a phase. In inductive mode the train
// view drops every interaction touching a masked node.
std::vector<std::size_t> phase_indices(const EventLog& log, const SplitSpec& split, Phase phase);

struct NeighborEntry {
  NodeId neighbor = 0;
  double ts = 0.0;
  std::size_t edge_idx = 0;

  bool operator==(const NeighborEntry&) const = default;
};

class NeighborIndex {
 public:
  NeighborIndex() = default;
  explicit NeighborIndex(const EventLog& log);
  // Only the listed interactions are indexed (training views).
  NeighborIndex(const EventLog& log, std::span<const std::size_t> interaction_indices);

  // Up to k entries with ts < t, the most recent ones, in ascending ts order.
  std::vector<NeighborEntry> recent_neighbors(NodeId u, double t, std::size_t k) const;
  // Every entry of u with ts < t in ascending order.
  std::span<const NeighborEntry> history(NodeId u, double t) const;

  std::size_t num_nodes() const { return per_node_.size(); }

 private:
  void add(const Interaction& e);
  void finish();

  std::vector<std::vector<NeighborEntry>> per_node_;
};

enum class NegativeProtocol { kRandom, kHistorical, kInductive };

NegativeProtocol parse_protocol(std::string_view s);
std::string_view to_string(NegativeProtocol p);

// Per-source candidate pools for the historical and inductive protocols.
class NegativeSampler {
 public:
  NegativeSampler(const EventLog& log, const SplitSpec& split);

  NodeId sample(NegativeProtocol protocol, const Interaction& positive, Rng& rng) const;

  // Pool the protocol draws from for this positive (empty for random); exposed
  // for verification and diagnostics.
  std::vector<NodeId> pool(NegativeProtocol protocol, const Interaction& positive) const;

  std::size_t fallback_count() const { return fallbacks_; }

 private:
  NodeId sample_random(const Interaction& positive, Rng& rng) const;

  const EventLog* log_;
  SplitSpec split_;
  // src -> (first training-window ts, dst), sorted by ts
  std::unordered_map<NodeId, std::vector<std::pair<double, NodeId>>> first_seen_train_;
  // src -> destinations linked only in the evaluation window
  std::unordered_map<NodeId, std::vector<NodeId>> eval_only_;
  // src -> ts -> destinations linked at exactly that time
  std::unordered_map<NodeId, std::unordered_map<double, std::vector<NodeId>>> links_at_;
  mutable std::atomic<std::size_t> fallbacks_{0};
};

struct SynthOptions {
  std::size_t num_nodes = 100;
  std::size_t num_events = 1500;
  double shift = 0.0;
  std::uint64_t seed = 0;
  double intra_prob = 0.9;        // chance an event stays inside the source's block
  double partner_prob = 0.5;      // chance an intra-block event reuses a stable partner
  std::size_t partners = 3;       // stable partners per node
  double hub_fraction = 0.1;      // share of each block acting as hubs
  double hub_prob = 0.3;          // chance an intra-block event targets a hub
  double shift_point = 0.7;       // fraction of the horizon before the shift
};

EventLog synth_generate(const SynthOptions& opts);

}  // namespace diffdyg::events
