#include "diffdyg/featurizer.hpp"

#include <algorithm>
#include <unordered_map>

#include "diffdyg/error.hpp"

namespace diffdyg::features {

void ChannelConfig::validate() const {
  if (d <= 0 || d_T <= 0 || d_C <= 0 || d_S <= 0) throw ConfigError("channel widths must be positive");
  if (d_C % 2 != 0) throw ConfigError("d_C must be even (two co-occurrence halves)");
  if (K < 0 || K2 < 0) throw ConfigError("neighbor counts must be non-negative");
  if (hops != 1 && hops != 2) throw ConfigError("hops must be 1 or 2");
  if (hops == 1 && K2 != 0) throw ConfigError("K2 > 0 requires hops = 2");
}

int TokenSequence::valid_count() const {
  return static_cast<int>(std::count(valid_mask.begin(), valid_mask.end(), std::uint8_t{1}));
}

Mask TokenSequence::time_mask() const {
  Mask m(valid_mask.size(), 0);
  for (std::size_t r = 1; r < valid_mask.size(); ++r) m[r] = valid_mask[r];
  return m;
}

std::pair<int, int> cooccurrence_counts(NodeId w, std::span<const NodeId> hist_u, std::span<const NodeId> hist_v) {
  return {static_cast<int>(std::count(hist_u.begin(), hist_u.end(), w)),
          static_cast<int>(std::count(hist_v.begin(), hist_v.end(), w))};
}

namespace {

struct Token {
  NodeId node = -1;
  double ts = 0.0;
  std::size_t edge_idx = 0;
  int hop = 0;
};

// Self token, 1-hop tokens, then (hops == 2) 2-hop tokens. Unpadded.
std::vector<Token> sample_tokens(const events::NeighborIndex& index, NodeId u, double t,
                                 const ChannelConfig& cfg) {
  std::vector<Token> tokens;
  tokens.push_back({u, t, 0, 0});
  const auto first = index.recent_neighbors(u, t, static_cast<std::size_t>(cfg.K));
  for (const auto& e : first) tokens.push_back({e.neighbor, e.ts, e.edge_idx, 1});

  if (cfg.hops == 2 && cfg.K2 > 0) {
    std::unordered_set<NodeId> seen;
    for (const auto& tok : tokens) seen.insert(tok.node);
    // Best (most recent) connecting interaction per candidate.
    std::unordered_map<NodeId, events::NeighborEntry> best;
    for (const auto& parent : first) {
      for (const auto& e : index.recent_neighbors(parent.neighbor, t, static_cast<std::size_t>(cfg.K2))) {
        if (seen.count(e.neighbor)) continue;
        auto [it, inserted] = best.try_emplace(e.neighbor, e);
        if (!inserted && e.ts > it->second.ts) it->second = e;
      }
    }
    std::vector<events::NeighborEntry> cands;
    cands.reserve(best.size());
    for (const auto& [node, e] : best) cands.push_back(e);
    std::sort(cands.begin(), cands.end(), [](const auto& a, const auto& b) {
      return a.ts > b.ts || (a.ts == b.ts && a.neighbor < b.neighbor);
    });
    if (cands.size() > static_cast<std::size_t>(cfg.K2)) cands.resize(static_cast<std::size_t>(cfg.K2));
    std::sort(cands.begin(), cands.end(), [](const auto& a, const auto& b) {
      return a.ts < b.ts || (a.ts == b.ts && a.neighbor < b.neighbor);
    });
    for (const auto& e : cands) tokens.push_back({e.neighbor, e.ts, e.edge_idx, 2});
  }
  return tokens;
}

TokenSequence materialize(const events::EventLog& log, const std::vector<Token>& tokens, double t,
                          std::span<const NodeId> own, std::span<const NodeId> partner,
                          const ChannelConfig& cfg) {
  const int rows = cfg.num_rows();
  const auto d_n = static_cast<Eigen::Index>(log.node_feat_dim());
  const auto d_e = static_cast<Eigen::Index>(log.edge_feat_dim());

  TokenSequence seq;
  seq.node = Matrix::Zero(rows, d_n);
  seq.edge = Matrix::Zero(rows, d_e);
  seq.dt = Matrix::Zero(rows, 1);
  seq.cooc = Matrix::Zero(rows, 2);
  seq.spatial = Matrix::Zero(rows, cfg.d_S);
  seq.node_ids.assign(static_cast<std::size_t>(rows), -1);
  seq.hop.assign(static_cast<std::size_t>(rows), -1);
  seq.ts.assign(static_cast<std::size_t>(rows), 0.0);
  seq.valid_mask.assign(static_cast<std::size_t>(rows), 0);

  // Row layout: 0 self, [1, 1+K) one-hop block, [1+K, 1+K+K2) two-hop block.
  int next_hop1 = 1;
  int next_hop2 = 1 + cfg.K;
  for (const Token& tok : tokens) {
    int r;
    if (tok.hop == 0) {
      r = 0;
    } else if (tok.hop == 1) {
      r = next_hop1++;
    } else {
      r = next_hop2++;
    }
    const auto ri = static_cast<std::size_t>(r);
    seq.node_ids[ri] = tok.node;
    seq.hop[ri] = tok.hop;
    seq.ts[ri] = tok.ts;
    seq.valid_mask[ri] = 1;
    const auto nf = log.node_feature(tok.node);
    for (Eigen::Index j = 0; j < d_n; ++j) seq.node(r, j) = nf[static_cast<std::size_t>(j)];
    if (tok.hop > 0) {
      const auto& ef = log[tok.edge_idx].edge_feat;
      for (Eigen::Index j = 0; j < d_e; ++j) seq.edge(r, j) = ef[static_cast<std::size_t>(j)];
      seq.dt(r, 0) = t - tok.ts;
      const auto [a, b] = cooccurrence_counts(tok.node, own, partner);
      seq.cooc(r, 0) = a;
      seq.cooc(r, 1) = b;
      seq.spatial.row(r).setConstant(tok.hop);
    } else if (cfg.cooc_self_row) {
      const auto [a, b] = cooccurrence_counts(tok.node, own, partner);
      seq.cooc(r, 0) = a;
      seq.cooc(r, 1) = b;
    }
  }
  return seq;
}

std::vector<NodeId> sampled_ids(const std::vector<Token>& tokens) {
  std::vector<NodeId> ids;
  for (const auto& t : tokens) {
    if (t.hop > 0) ids.push_back(t.node);
  }
  return ids;
}

}  // namespace

SequencePair build_sequences(const events::EventLog& log, const events::NeighborIndex& index, NodeId u,
                             NodeId v, double t, const ChannelConfig& cfg) {
  cfg.validate();
  const auto tu = sample_tokens(index, u, t, cfg);
  const auto tv = sample_tokens(index, v, t, cfg);
  const auto ids_u = sampled_ids(tu);
  const auto ids_v = sampled_ids(tv);
  return {materialize(log, tu, t, ids_u, ids_v, cfg), materialize(log, tv, t, ids_v, ids_u, cfg)};
}

int mask_tokens(TokenSequence& seq, const std::unordered_set<NodeId>& nodes) {
  int masked = 0;
  for (int r = 1; r < seq.rows(); ++r) {
    const auto ri = static_cast<std::size_t>(r);
    if (!seq.valid_mask[ri] || !nodes.count(seq.node_ids[ri])) continue;
    seq.valid_mask[ri] = 0;
    seq.node.row(r).setZero();
    seq.edge.row(r).setZero();
    seq.dt(r, 0) = 0.0;
    seq.cooc.row(r).setZero();
    seq.spatial.row(r).setZero();
    ++masked;
  }
  return masked;
}

Batch assemble_batch(std::vector<SequencePair> pairs, const ChannelConfig& cfg) {
  Batch b;
  b.cfg = cfg;
  const int rows = cfg.num_rows();
  for (const auto& p : pairs) {
    for (const TokenSequence* s : {&p.src, &p.dst}) {
      if (s->rows() != rows || s->spatial.cols() != cfg.d_S || s->node.cols() != pairs.front().src.node.cols() ||
          s->edge.cols() != pairs.front().src.edge.cols()) {
        throw BatchError("sequence shapes differ across the batch");
      }
    }
    b.src_mask.insert(b.src_mask.end(), p.src.valid_mask.begin(), p.src.valid_mask.end());
    b.dst_mask.insert(b.dst_mask.end(), p.dst.valid_mask.begin(), p.dst.valid_mask.end());
  }
  b.pairs = std::move(pairs);
  return b;
}

Batch assemble_batch(const events::EventLog& log, const events::NeighborIndex& index,
                     std::span<const QueryPair> queries, const ChannelConfig& cfg) {
  std::vector<SequencePair> pairs;
  pairs.reserve(queries.size());
  for (const auto& q : queries) pairs.push_back(build_sequences(log, index, q.src, q.dst, q.ts, cfg));
  return assemble_batch(std::move(pairs), cfg);
}

}  // namespace diffdyg::features
