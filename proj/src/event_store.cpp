#include "diffdyg/event_store.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <spdlog/spdlog.h>

#include "diffdyg/error.hpp"

namespace diffdyg::events {

EventLog::EventLog(std::vector<Interaction> interactions, std::size_t num_nodes,
                   std::size_t edge_feat_dim, std::size_t node_feat_dim,
                   std::unordered_map<NodeId, std::vector<double>> node_feat)
    : interactions_(std::move(interactions)),
      node_feat_(std::move(node_feat)),
      zero_node_feat_(node_feat_dim, 0.0),
      num_nodes_(num_nodes),
      edge_feat_dim_(edge_feat_dim),
      node_feat_dim_(node_feat_dim) {
  for (std::size_t i = 0; i < interactions_.size(); ++i) {
    Interaction& e = interactions_[i];
    e.idx = i;
    if (e.src < 0 || e.dst < 0 || static_cast<std::size_t>(e.src) >= num_nodes_ ||
        static_cast<std::size_t>(e.dst) >= num_nodes_) {
      throw SchemaError("interaction " + std::to_string(i) + " references a node outside [0, " +
                        std::to_string(num_nodes_) + ")");
    }
    if (!(e.ts >= 0.0) || !std::isfinite(e.ts)) {
      throw SchemaError("interaction " + std::to_string(i) + " has an invalid timestamp");
    }
    if (i > 0 && e.ts < interactions_[i - 1].ts) {
      throw OrderingError(i + 2, "timestamps must be non-decreasing");
    }
    if (e.edge_feat.empty() && edge_feat_dim_ > 0) e.edge_feat.assign(edge_feat_dim_, 0.0);
    if (e.edge_feat.size() != edge_feat_dim_) {
      throw SchemaError("interaction " + std::to_string(i) + " has edge feature width " +
                        std::to_string(e.edge_feat.size()) + ", expected " +
                        std::to_string(edge_feat_dim_));
    }
  }
  for (const auto& [node, feat] : node_feat_) {
    if (node < 0 || static_cast<std::size_t>(node) >= num_nodes_) {
      throw SchemaError("node feature for unknown node " + std::to_string(node));
    }
    if (feat.size() != node_feat_dim_) {
      throw SchemaError("node " + std::to_string(node) + " has feature width " +
                        std::to_string(feat.size()) + ", expected " + std::to_string(node_feat_dim_));
    }
  }
}

std::span<const double> EventLog::node_feature(NodeId n) const {
  auto it = node_feat_.find(n);
  if (it == node_feat_.end()) return zero_node_feat_;
  return it->second;
}

namespace {

std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(',', start);
    std::string_view f = line.substr(start, pos == std::string_view::npos ? line.npos : pos - start);
    while (!f.empty() && (f.front() == ' ' || f.front() == '\t')) f.remove_prefix(1);
    while (!f.empty() && (f.back() == ' ' || f.back() == '\t' || f.back() == '\r')) f.remove_suffix(1);
    out.push_back(f);
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

double parse_real(std::string_view f, std::size_t line, std::string_view what) {
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(f.data(), f.data() + f.size(), v);
  if (ec != std::errc() || ptr != f.data() + f.size() || f.empty() || !std::isfinite(v)) {
    throw ParseError(line, "malformed " + std::string(what) + " '" + std::string(f) + "'");
  }
  return v;
}

NodeId parse_node(std::string_view f, std::size_t line, std::string_view what) {
  long long v = 0;
  auto [ptr, ec] = std::from_chars(f.data(), f.data() + f.size(), v);
  if (ec != std::errc() || ptr != f.data() + f.size() || f.empty() || v < 0) {
    throw ParseError(line, "malformed " + std::string(what) + " '" + std::string(f) + "'");
  }
  return v;
}

// Calls fn(line_number, line) for each non-empty line; line numbers are 1-based.
template <typename Fn>
void for_each_line(std::string_view text, Fn&& fn) {
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(start, end - start);
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (!line.empty()) fn(line_no, line);
    if (end == text.size()) break;
    start = end + 1;
  }
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

EventLog parse_events(std::string_view csv_text, std::string_view node_csv_text) {
  std::vector<Interaction> rows;
  std::size_t edge_dim = 0;
  bool have_header = false;
  NodeId max_node = -1;
  double last_ts = -1.0;

  for_each_line(csv_text, [&](std::size_t line_no, std::string_view line) {
    auto fields = split_fields(line);
    if (!have_header) {
      if (fields.size() < 3 || fields[0] != "src" || fields[1] != "dst" || fields[2] != "ts") {
        throw ParseError(line_no, "expected header 'src,dst,ts[,f0,...]'");
      }
      edge_dim = fields.size() - 3;
      have_header = true;
      return;
    }
    if (fields.size() != edge_dim + 3) {
      throw ParseError(line_no, "expected " + std::to_string(edge_dim + 3) + " fields, got " +
                                    std::to_string(fields.size()));
    }
    Interaction e;
    e.src = parse_node(fields[0], line_no, "src");
    e.dst = parse_node(fields[1], line_no, "dst");
    e.ts = parse_real(fields[2], line_no, "ts");
    if (e.ts < 0.0) throw ParseError(line_no, "negative timestamp");
    if (e.ts < last_ts) throw OrderingError(line_no, "timestamp decreases");
    last_ts = e.ts;
    e.edge_feat.reserve(edge_dim);
    for (std::size_t j = 0; j < edge_dim; ++j) {
      e.edge_feat.push_back(parse_real(fields[3 + j], line_no, "edge feature"));
    }
    max_node = std::max({max_node, e.src, e.dst});
    rows.push_back(std::move(e));
  });
  if (!have_header) throw ParseError(1, "missing header");

  std::unordered_map<NodeId, std::vector<double>> node_feat;
  std::size_t node_dim = 0;
  if (!node_csv_text.empty()) {
    bool node_header = false;
    for_each_line(node_csv_text, [&](std::size_t line_no, std::string_view line) {
      auto fields = split_fields(line);
      if (!node_header) {
        if (fields.empty() || fields[0] != "node") {
          throw ParseError(line_no, "expected header 'node,f0,...'");
        }
        node_dim = fields.size() - 1;
        node_header = true;
        return;
      }
      if (fields.size() != node_dim + 1) {
        throw SchemaError("line " + std::to_string(line_no) + ": node feature width " +
                          std::to_string(fields.size() - 1) + ", expected " +
                          std::to_string(node_dim));
      }
      const NodeId n = parse_node(fields[0], line_no, "node");
      std::vector<double> f;
      f.reserve(node_dim);
      for (std::size_t j = 0; j < node_dim; ++j) {
        f.push_back(parse_real(fields[1 + j], line_no, "node feature"));
      }
      max_node = std::max(max_node, n);
      node_feat[n] = std::move(f);
    });
  }

  // Input is non-decreasing in ts, so the stable (ts, idx) order is the file order.
  return EventLog(std::move(rows), static_cast<std::size_t>(max_node + 1), edge_dim, node_dim,
                  std::move(node_feat));
}

EventLog load_events(const std::filesystem::path& path,
                     const std::optional<std::filesystem::path>& node_feat_path) {
  const std::string events = read_file(path);
  const std::string nodes = node_feat_path ? read_file(*node_feat_path) : std::string();
  return parse_events(events, nodes);
}

std::string format_events(const EventLog& log) {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "src,dst,ts";
  for (std::size_t j = 0; j < log.edge_feat_dim(); ++j) os << ",f" << j;
  os << '\n';
  for (const auto& e : log.interactions()) {
    os << e.src << ',' << e.dst << ',' << e.ts;
    for (double f : e.edge_feat) os << ',' << f;
    os << '\n';
  }
  return os.str();
}

void write_events(const EventLog& log, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << format_events(log);
}

// ---------------------------------------------------------------------------

SplitSpec chronological_split(const EventLog& log, SplitRatios ratios, bool inductive,
                              double mask_fraction, std::uint64_t seed) {
  const std::size_t n = log.size();
  if (n < 3) throw SplitError("need at least 3 interactions, got " + std::to_string(n));
  if (ratios.train <= 0 || ratios.val < 0 || ratios.test < 0 ||
      std::abs(ratios.train + ratios.val + ratios.test - 1.0) > 1e-9) {
    throw SplitError("split ratios must be non-negative and sum to 1");
  }
  if (mask_fraction < 0.0 || mask_fraction >= 1.0) {
    throw SplitError("mask_fraction must lie in [0, 1)");
  }

  std::size_t n_train = static_cast<std::size_t>(std::floor(ratios.train * n + 1e-9));
  std::size_t n_train_val =
      static_cast<std::size_t>(std::floor((ratios.train + ratios.val) * n + 1e-9));
  n_train = std::clamp<std::size_t>(n_train, 1, n);
  n_train_val = std::clamp<std::size_t>(n_train_val, n_train, n);

  SplitSpec split;
  split.train_end_ts = log[n_train - 1].ts;
  split.val_end_ts = log[n_train_val - 1].ts;

  if (inductive && mask_fraction > 0.0) {
    std::set<NodeId> eval_nodes;
    for (const auto& e : log.interactions()) {
      if (split.phase_of(e.ts) != Phase::kTrain) {
        eval_nodes.insert(e.src);
        eval_nodes.insert(e.dst);
      }
    }
    std::vector<NodeId> candidates(eval_nodes.begin(), eval_nodes.end());
    const auto k = static_cast<std::size_t>(std::floor(mask_fraction * candidates.size()));
    Rng rng = Rng::stream(seed, "split");
    for (std::size_t i : rng.sample_without_replacement(candidates.size(), k)) {
      split.inductive_masked_nodes.insert(candidates[i]);
    }
  }
  return split;
}

std::vector<std::size_t> phase_indices(const EventLog& log, const SplitSpec& split, Phase phase) {
  std::vector<std::size_t> out;
  for (const auto& e : log.interactions()) {
    if (split.phase_of(e.ts) != phase) continue;
    if (phase == Phase::kTrain && (split.is_masked(e.src) || split.is_masked(e.dst))) continue;
    out.push_back(e.idx);
  }
  return out;
}

// ---------------------------------------------------------------------------

NeighborIndex::NeighborIndex(const EventLog& log) : per_node_(log.num_nodes()) {
  for (const auto& e : log.interactions()) add(e);
  finish();
}

NeighborIndex::NeighborIndex(const EventLog& log, std::span<const std::size_t> interaction_indices)
    : per_node_(log.num_nodes()) {
  for (std::size_t i : interaction_indices) add(log[i]);
  finish();
}

void NeighborIndex::add(const Interaction& e) {
  per_node_[static_cast<std::size_t>(e.src)].push_back({e.dst, e.ts, e.idx});
  per_node_[static_cast<std::size_t>(e.dst)].push_back({e.src, e.ts, e.idx});
}

void NeighborIndex::finish() {
  for (auto& list : per_node_) {
    std::stable_sort(list.begin(), list.end(), [](const NeighborEntry& a, const NeighborEntry& b) {
      return a.ts < b.ts || (a.ts == b.ts && a.edge_idx < b.edge_idx);
    });
  }
}

std::span<const NeighborEntry> NeighborIndex::history(NodeId u, double t) const {
  if (u < 0 || static_cast<std::size_t>(u) >= per_node_.size()) return {};
  const auto& list = per_node_[static_cast<std::size_t>(u)];
  auto end = std::lower_bound(list.begin(), list.end(), t,
                              [](const NeighborEntry& e, double tt) { return e.ts < tt; });
  return {list.data(), static_cast<std::size_t>(end - list.begin())};
}

std::vector<NeighborEntry> NeighborIndex::recent_neighbors(NodeId u, double t, std::size_t k) const {
  auto hist = history(u, t);
  const std::size_t take = std::min(k, hist.size());
  return {hist.end() - static_cast<std::ptrdiff_t>(take), hist.end()};
}

// ---------------------------------------------------------------------------

NegativeProtocol parse_protocol(std::string_view s) {
  if (s == "random") return NegativeProtocol::kRandom;
  if (s == "historical") return NegativeProtocol::kHistorical;
  if (s == "inductive") return NegativeProtocol::kInductive;
  throw ConfigError("unknown negative sampling protocol '" + std::string(s) + "'");
}

std::string_view to_string(NegativeProtocol p) {
  switch (p) {
    case NegativeProtocol::kRandom: return "random";
    case NegativeProtocol::kHistorical: return "historical";
    case NegativeProtocol::kInductive: return "inductive";
  }
  return "?";
}

NegativeSampler::NegativeSampler(const EventLog& log, const SplitSpec& split)
    : log_(&log), split_(split) {
  std::unordered_map<NodeId, std::unordered_map<NodeId, double>> first;
  std::unordered_map<NodeId, std::set<NodeId>> eval_dsts;
  for (const auto& e : log.interactions()) {
    links_at_[e.src][e.ts].push_back(e.dst);
    if (split.phase_of(e.ts) == Phase::kTrain) {
      first[e.src].try_emplace(e.dst, e.ts);
    } else {
      eval_dsts[e.src].insert(e.dst);
    }
  }
  for (auto& [src, m] : first) {
    auto& v = first_seen_train_[src];
    for (const auto& [dst, ts] : m) v.emplace_back(ts, dst);
    std::sort(v.begin(), v.end());
  }
  for (auto& [src, dsts] : eval_dsts) {
    const auto it = first.find(src);
    auto& v = eval_only_[src];
    for (NodeId d : dsts) {
      if (it == first.end() || !it->second.count(d)) v.push_back(d);
    }
  }
}

NodeId NegativeSampler::sample_random(const Interaction& positive, Rng& rng) const {
  const auto n = static_cast<std::uint64_t>(log_->num_nodes());
  if (n < 2) throw SamplingError("negative sampling needs at least 2 nodes");
  auto d = static_cast<NodeId>(rng.uniform_index(n - 1));
  if (d >= positive.dst) ++d;
  return d;
}

std::vector<NodeId> NegativeSampler::pool(NegativeProtocol protocol, const Interaction& positive) const {
  std::vector<NodeId> out;
  if (protocol == NegativeProtocol::kRandom) return out;

  const std::vector<NodeId>* now = nullptr;
  if (auto it = links_at_.find(positive.src); it != links_at_.end()) {
    if (auto jt = it->second.find(positive.ts); jt != it->second.end()) now = &jt->second;
  }
  auto excluded = [&](NodeId d) {
    if (d == positive.dst) return true;
    return now && std::find(now->begin(), now->end(), d) != now->end();
  };

  if (protocol == NegativeProtocol::kHistorical) {
    if (auto it = first_seen_train_.find(positive.src); it != first_seen_train_.end()) {
      for (const auto& [ts, d] : it->second) {
        if (ts >= positive.ts) break;
        if (!excluded(d)) out.push_back(d);
      }
    }
  } else {
    if (auto it = eval_only_.find(positive.src); it != eval_only_.end()) {
      for (NodeId d : it->second) {
        if (!excluded(d)) out.push_back(d);
      }
    }
  }
  return out;
}

NodeId NegativeSampler::sample(NegativeProtocol protocol, const Interaction& positive, Rng& rng) const {
  if (log_->num_nodes() < 2) throw SamplingError("negative sampling needs at least 2 nodes");
  if (protocol == NegativeProtocol::kRandom) return sample_random(positive, rng);
  const auto candidates = pool(protocol, positive);
  if (candidates.empty()) {
    ++fallbacks_;
    spdlog::debug("{} negative pool empty for src {} at ts {}; falling back to random",
                  to_string(protocol), positive.src, positive.ts);
    return sample_random(positive, rng);
  }
  return candidates[rng.uniform_index(candidates.size())];
}

// ---------------------------------------------------------------------------

EventLog synth_generate(const SynthOptions& opts) {
  if (opts.num_nodes < 4) throw GenerationError("synthetic logs need at least 4 nodes");
  if (opts.num_events < 10) throw GenerationError("synthetic logs need at least 10 events");
  if (!(opts.shift >= 0.0 && opts.shift <= 1.0)) throw GenerationError("shift must lie in [0, 1]");
  if (!(opts.shift_point > 0.0 && opts.shift_point < 1.0)) {
    throw GenerationError("shift_point must lie in (0, 1)");
  }

  const std::size_t n = opts.num_nodes;
  Rng rng = Rng::stream(opts.seed, "synth");

  // Two planted blocks of (almost) equal size.
  std::vector<NodeId> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = static_cast<NodeId>(i);
  rng.shuffle(order);
  std::vector<int> block_before(n);
  for (std::size_t i = 0; i < n; ++i) block_before[static_cast<std::size_t>(order[i])] = i < n / 2 ? 0 : 1;
  std::vector<bool> is_hub(n, false);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t pos_in_block = i < n / 2 ? i : i - n / 2;
    const std::size_t block_size = i < n / 2 ? n / 2 : n - n / 2;
    is_hub[static_cast<std::size_t>(order[i])] =
        pos_in_block < std::max<std::size_t>(1, static_cast<std::size_t>(opts.hub_fraction * block_size));
  }

  // After the shift point a `shift` fraction of nodes has its block labels
  // permuted among themselves.
  std::vector<int> block_after = block_before;
  {
    const auto k = static_cast<std::size_t>(std::floor(opts.shift * static_cast<double>(n)));
    auto chosen = rng.sample_without_replacement(n, k);
    std::vector<int> labels;
    labels.reserve(chosen.size());
    for (std::size_t c : chosen) labels.push_back(block_before[c]);
    rng.shuffle(labels);
    for (std::size_t i = 0; i < chosen.size(); ++i) block_after[chosen[i]] = labels[i];
  }

  auto members_of = [&](const std::vector<int>& block) {
    std::array<std::vector<NodeId>, 2> m;
    std::array<std::vector<NodeId>, 2> hubs;
    for (std::size_t i = 0; i < n; ++i) {
      m[block[i]].push_back(static_cast<NodeId>(i));
      if (is_hub[i]) hubs[block[i]].push_back(static_cast<NodeId>(i));
    }
    return std::pair{m, hubs};
  };
  auto partners_of = [&](const std::vector<int>& block, const std::array<std::vector<NodeId>, 2>& m) {
    std::vector<std::vector<NodeId>> p(n);
    for (std::size_t i = 0; i < n; ++i) {
      const auto& pool = m[block[i]];
      for (std::size_t j = 0; j < opts.partners && pool.size() > 1; ++j) {
        NodeId cand;
        do {
          cand = pool[rng.uniform_index(pool.size())];
        } while (cand == static_cast<NodeId>(i));
        p[i].push_back(cand);
      }
    }
    return p;
  };

  auto [members_before, hubs_before] = members_of(block_before);
  auto [members_after, hubs_after] = members_of(block_after);
  const auto partners_before = partners_of(block_before, members_before);
  // Partners that stay in the node's block survive the shift; the rest are redrawn.
  auto partners_after = partners_before;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& pool = members_after[block_after[i]];
    for (auto& p : partners_after[i]) {
      if (block_after[static_cast<std::size_t>(p)] == block_after[i] || pool.size() < 2) continue;
      do {
        p = pool[rng.uniform_index(pool.size())];
      } while (p == static_cast<NodeId>(i));
    }
  }

  const auto shift_at = static_cast<std::size_t>(std::floor(opts.shift_point * opts.num_events));
  std::vector<Interaction> events;
  events.reserve(opts.num_events);
  for (std::size_t i = 0; i < opts.num_events; ++i) {
    const bool after = i >= shift_at;
    const auto& block = after ? block_after : block_before;
    const auto& members = after ? members_after : members_before;
    const auto& hubs = after ? hubs_after : hubs_before;
    const auto& partners = after ? partners_after : partners_before;

    const auto src = static_cast<NodeId>(rng.uniform_index(n));
    const int b = block[static_cast<std::size_t>(src)];
    NodeId dst = src;
    while (dst == src) {
      if (rng.bernoulli(opts.intra_prob) && members[b].size() > 1) {
        const auto& own = partners[static_cast<std::size_t>(src)];
        const double r = rng.uniform();
        if (r < opts.partner_prob && !own.empty()) {
          dst = own[rng.uniform_index(own.size())];
        } else if (r < opts.partner_prob + opts.hub_prob && !hubs[b].empty()) {
          dst = hubs[b][rng.uniform_index(hubs[b].size())];
        } else {
          dst = members[b][rng.uniform_index(members[b].size())];
        }
      } else {
        const auto& other = members[1 - b];
        dst = other.empty() ? static_cast<NodeId>(rng.uniform_index(n)) : other[rng.uniform_index(other.size())];
      }
    }
    Interaction e;
    e.src = src;
    e.dst = dst;
    e.ts = static_cast<double>(i + 1);
    events.push_back(std::move(e));
  }
  return EventLog(std::move(events), n);
}

}  // namespace diffdyg::events
