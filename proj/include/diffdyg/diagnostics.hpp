#pragma once

// Shift measurement (MMD, Pearson R), critical-node extraction, masking
// ablations and attention-dispersion statistics.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <unordered_set>
#include <vector>

#include "json.hpp"

#include "diffdyg/event_store.hpp"
#include "diffdyg/model.hpp"
#include "diffdyg/trainer.hpp"

namespace diffdyg::diag {

using events::NodeId;
using features::QueryPair;
using tensor::Mask;
using tensor::Matrix;

// ------------------------------------------------------------------ shift

struct MmdResult {
  double value = 0.0;  // square root of the biased MMD^2
  double sigma = 1.0;
  bool bandwidth_fallback = false;  // median distance was zero
};

// RBF-kernel MMD between the rows of x and y. Without a fixed bandwidth,
// sigma is the median pairwise distance over the pooled rows.
MmdResult mmd(const Matrix& x, const Matrix& y, std::optional<double> fixed_sigma = std::nullopt);
MmdResult mmd_serial(const Matrix& x, const Matrix& y, std::optional<double> fixed_sigma = std::nullopt);

double pearson_r(std::span<const double> a, std::span<const double> b);

struct ShiftReport {
  MmdResult mmd;
  double train_from = 0.0, train_to = 0.0;  // timestamp windows
  double test_from = 0.0, test_to = 0.0;
  std::size_t train_points = 0;
  std::size_t test_points = 0;

  nlohmann::json to_json() const;
};

// MMD between pooled source embeddings of the training and test windows,
// each subsampled to at most max_points interactions.
ShiftReport measure_shift(const model::Model& model, const events::EventLog& log, const events::SplitSpec& split,
                          std::size_t max_points, std::uint64_t seed);

// ------------------------------------------------------------------ critical nodes

struct CriticalThresholds {
  int structural = 2;  // distinct candidate partners
  int temporal = 2;    // interactions with the query endpoints
};

struct CriticalSet {
  QueryPair query;
  std::vector<NodeId> candidates;  // ascending
  std::vector<NodeId> critical;    // ascending, subset of candidates
  std::vector<std::uint8_t> structural;  // aligned with critical
  std::vector<std::uint8_t> temporal;

  bool contains(NodeId w) const;
  std::unordered_set<NodeId> critical_set() const { return {critical.begin(), critical.end()}; }
};

CriticalSet find_critical(const events::NeighborIndex& index, NodeId u, NodeId v, double t,
                          CriticalThresholds th = {});
std::vector<CriticalSet> find_critical_batch(const events::NeighborIndex& index, std::span<const QueryPair> queries,
                                             CriticalThresholds th = {});
std::vector<CriticalSet> find_critical_batch_serial(const events::NeighborIndex& index,
                                                    std::span<const QueryPair> queries, CriticalThresholds th = {});

// ------------------------------------------------------------------ masking ablation

enum class MaskMode { kCritical, kRandom };
MaskMode parse_mask_mode(std::string_view s);
std::string_view to_string(MaskMode m);

struct MaskOutcome {
  std::size_t critical_size = 0;
  std::size_t masked_ids = 0;   // distinct node-ids masked
  std::size_t masked_rows = 0;  // token rows invalidated across both sequences
};

// Critical mode keeps ceil(retention * |K|) critical nodes and masks the rest;
// random mode masks as many distinct node-ids (counted among the tokens
// actually present) drawn from all valid non-self tokens. Nothing is touched
// when nothing is to be masked.
MaskOutcome apply_mask(features::SequencePair& seqs, const CriticalSet& crit, MaskMode mode, double retention,
                       Rng& rng);

train::EvalReport masked_evaluate(const model::Model& model, const train::Evaluator& evaluator, MaskMode mode,
                                  double retention, const train::EvalOptions& opts, CriticalThresholds th = {});

// ------------------------------------------------------------------ attention statistics

// Negative entries clipped, valid columns renormalized by (sum + eps).
Matrix positive_normalized(const Matrix& b, const Mask& mask = {}, double eps = 1e-8);

// Natural-log entropy of one row over its valid entries.
double row_entropy(std::span<const double> row, const Mask& mask = {});
// Mean row entropy over valid, not all-zero query rows.
double attention_entropy(const Matrix& map, const Mask& mask = {});

double critical_mass_row(std::span<const double> row, std::span<const NodeId> node_ids,
                         const std::unordered_set<NodeId>& critical, const Mask& mask = {});
double critical_mass(const Matrix& map, std::span<const NodeId> node_ids, const std::unordered_set<NodeId>& critical,
                     const Mask& mask = {});

double topk_critical_proportion_row(std::span<const double> row, std::span<const NodeId> node_ids,
                                    const std::unordered_set<NodeId>& critical, const Mask& mask = {},
                                    double k_frac = 0.05);
double topk_critical_proportion(const Matrix& map, std::span<const NodeId> node_ids,
                                const std::unordered_set<NodeId>& critical, const Mask& mask = {},
                                double k_frac = 0.05);

// Map the statistics are computed on: positive-normalized B for differential
// attention, A1 for standard attention.
Matrix analysis_map(const model::HeadRecord& head, model::AttentionKind kind, const Mask& mask, double eps = 1e-8);

struct AttentionStatsOptions {
  int layer = -1;  // -1: last layer
  bool all_layers = false;
  double k_frac = 0.05;
  double eps = 1e-8;
  CriticalThresholds thresholds;
};

struct AttentionStatRow {
  std::size_t query_idx = 0;
  int layer = 0;
  int head = 0;
  double entropy = 0.0;
  double critical_mass = 0.0;
  double topk_prop = 0.0;
};

struct AttentionSummary {
  model::AttentionKind attention = model::AttentionKind::kDifferential;
  std::vector<AttentionStatRow> rows;
  // Averaged over queries per (layer, head), then over heads.
  double entropy = 0.0;
  double critical_mass = 0.0;
  double topk_prop = 0.0;
  int layer = 0;
  std::size_t num_queries = 0;

  nlohmann::json to_json() const;
};

AttentionSummary attention_statistics(const model::Model& model, const events::EventLog& log,
                                      const events::NeighborIndex& index, std::span<const QueryPair> queries,
                                      const AttentionStatsOptions& opts = {});
AttentionSummary attention_statistics_serial(const model::Model& model, const events::EventLog& log,
                                             const events::NeighborIndex& index,
                                             std::span<const QueryPair> queries,
                                             const AttentionStatsOptions& opts = {});

void write_attention_csv(const AttentionSummary& s, const std::filesystem::path& path);

// One CSV per (layer, head) with query_row,key_row,a1,a2,b plus a JSON header
// holding lambda values, the validity mask and token node-ids.
void write_attention_dump(const model::AttentionRecord& rec, const std::filesystem::path& dir,
                          const std::string& stem);

}  // namespace diffdyg::diag
