#pragma once

// Token sequences for a query pair: one self token, K chronologically ordered
// 1-hop neighbor tokens and, optionally, K2 two-hop tokens. Each row carries
// five raw channels (node, edge, elapsed time, co-occurrence, hop distance);
// the learnable projections that turn them into 5d-wide tokens live with the
// encoder parameters.

#include <span>
#include <unordered_set>
#include <utility>
#include <vector>

#include "diffdyg/event_store.hpp"
#include "diffdyg/tensor.hpp"

namespace diffdyg::features {

using events::NodeId;
using tensor::Mask;
using tensor::Matrix;

struct ChannelConfig {
  int d = 36;     // per-channel projection width
  int d_T = 100;  // raw time-encoding width
  int d_C = 36;   // raw co-occurrence width (two halves of d_C / 2)
  int d_S = 1;    // raw hop-distance width
  int K = 20;     // 1-hop tokens
  int K2 = 0;     // 2-hop tokens (hops == 2 only)
  int hops = 1;
  // Count the query node itself in the self row's co-occurrence channel.
  bool cooc_self_row = false;

  void validate() const;
  int token_width() const { return 5 * d; }
  int num_rows() const { return 1 + K + (hops == 2 ? K2 : 0); }

  bool operator==(const ChannelConfig&) const = default;
};

struct QueryPair {
  NodeId src = 0;
  NodeId dst = 0;
  double ts = 0.0;
};

struct TokenSequence {
  // Raw channels, one row per token.
  Matrix node;     // rows x d_N
  Matrix edge;     // rows x d_E
  Matrix dt;       // rows x 1, elapsed time t - t_j (0 on the self row and padding)
  Matrix cooc;     // rows x 2, (count in own sampled set, count in partner's)
  Matrix spatial;  // rows x d_S, hop distance

  std::vector<NodeId> node_ids;  // -1 on padding
  std::vector<int> hop;          // 0 self, 1, 2; -1 on padding
  std::vector<double> ts;        // interaction time of the token (query time on the self row)
  Mask valid_mask;

  int rows() const { return static_cast<int>(node_ids.size()); }
  int valid_count() const;
  // Rows whose time channel is active: valid and not the self row.
  Mask time_mask() const;
};

struct SequencePair {
  TokenSequence src;
  TokenSequence dst;
};

std::pair<int, int> cooccurrence_counts(NodeId w, std::span<const NodeId> hist_u,
                                        std::span<const NodeId> hist_v);

// Builds the source and destination sequences for (u, v, t). Histories are
// strictly before t.
SequencePair build_sequences(const events::EventLog& log, const events::NeighborIndex& index, NodeId u,
                             NodeId v, double t, const ChannelConfig& cfg);

// Invalidates and zeroes every non-self row whose node-id is in `nodes`.
// Returns the number of rows affected.
int mask_tokens(TokenSequence& seq, const std::unordered_set<NodeId>& nodes);

// Dense stack of sequence pairs with identical shapes.
struct Batch {
  ChannelConfig cfg;
  std::vector<SequencePair> pairs;
  // [B x rows] validity masks, row-major, for src and dst sequences.
  std::vector<std::uint8_t> src_mask;
  std::vector<std::uint8_t> dst_mask;

  std::size_t size() const { return pairs.size(); }
};

Batch assemble_batch(std::vector<SequencePair> pairs, const ChannelConfig& cfg);
Batch assemble_batch(const events::EventLog& log, const events::NeighborIndex& index,
                     std::span<const QueryPair> queries, const ChannelConfig& cfg);

}  // namespace diffdyg::features
