#include "diffdyg/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <fstream>
#include <limits>
#include <map>
#include <mutex>
#include <numeric>

#include <spdlog/spdlog.h>

#include "diffdyg/error.hpp"

namespace diffdyg::diag {

// ------------------------------------------------------------------ shift

namespace {

Matrix stack_rows(const Matrix& x, const Matrix& y) {
  if (x.cols() != y.cols()) throw PreconditionError("MMD inputs differ in feature width");
  Matrix z(x.rows() + y.rows(), x.cols());
  z << x, y;
  return z;
}

double squared_distance(const Matrix& z, Eigen::Index i, Eigen::Index j) {
  return (z.row(i) - z.row(j)).squaredNorm();
}

double median_of(std::vector<double>& d) {
  const std::size_t mid = d.size() / 2;
  std::nth_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(mid), d.end());
  double hi = d[mid];
  if (d.size() % 2 == 1) return hi;
  const double lo = *std::max_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(mid));
  return 0.5 * (lo + hi);
}

// Row i of the pooled matrix: kernel sums against the x block and the y block.
struct RowSums {
  double with_x = 0.0;
  double with_y = 0.0;
};

RowSums kernel_row(const Matrix& z, Eigen::Index nx, Eigen::Index i, double inv_two_sigma2) {
  RowSums s;
  for (Eigen::Index j = 0; j < z.rows(); ++j) {
    const double k = std::exp(-squared_distance(z, i, j) * inv_two_sigma2);
    (j < nx ? s.with_x : s.with_y) += k;
  }
  return s;
}

template <bool kParallel>
MmdResult mmd_impl(const Matrix& x, const Matrix& y, std::optional<double> fixed_sigma) {
  if (x.rows() < 2 || y.rows() < 2) throw PreconditionError("MMD needs at least two rows per sample");
  const Matrix z = stack_rows(x, y);
  const Eigen::Index n = z.rows();
  const Eigen::Index nx = x.rows();

  MmdResult res;
  if (fixed_sigma) {
    if (!(*fixed_sigma > 0.0)) throw PreconditionError("bandwidth must be positive");
    res.sigma = *fixed_sigma;
  } else {
    std::vector<double> dist(static_cast<std::size_t>(n * (n - 1) / 2));
    // Row i owns the slots of pairs (i, j > i).
#pragma omp parallel for schedule(dynamic, 8) if (kParallel)
    for (Eigen::Index i = 0; i < n; ++i) {
      std::size_t slot = static_cast<std::size_t>(i * n - i * (i + 1) / 2);
      for (Eigen::Index j = i + 1; j < n; ++j) dist[slot++] = std::sqrt(squared_distance(z, i, j));
    }
    const double med = median_of(dist);
    if (med > 0.0) {
      res.sigma = med;
    } else {
      res.sigma = 1.0;
      res.bandwidth_fallback = true;
      spdlog::warn("median pairwise distance is zero; using bandwidth 1");
    }
  }

  const double inv = 1.0 / (2.0 * res.sigma * res.sigma);
  std::vector<RowSums> rows(static_cast<std::size_t>(n));
#pragma omp parallel for schedule(dynamic, 8) if (kParallel)
  for (Eigen::Index i = 0; i < n; ++i) rows[static_cast<std::size_t>(i)] = kernel_row(z, nx, i, inv);

  double kxx = 0.0, kyy = 0.0, kxy = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& r = rows[static_cast<std::size_t>(i)];
    if (i < nx) {
      kxx += r.with_x;
      kxy += r.with_y;
    } else {
      kyy += r.with_y;
    }
  }
  const double mx = static_cast<double>(nx);
  const double my = static_cast<double>(n - nx);
  kxx /= mx * mx;
  kyy /= my * my;
  kxy /= mx * my;
  double m2 = kxx + kyy - 2.0 * kxy;
  // Below summation round-off the two samples are indistinguishable.
  const double floor = 64.0 * std::numeric_limits<double>::epsilon() * (kxx + kyy + 2.0 * kxy);
  if (m2 < floor) m2 = 0.0;
  res.value = std::sqrt(m2);
  return res;
}

}  // namespace

MmdResult mmd(const Matrix& x, const Matrix& y, std::optional<double> fixed_sigma) {
  return mmd_impl<true>(x, y, fixed_sigma);
}

MmdResult mmd_serial(const Matrix& x, const Matrix& y, std::optional<double> fixed_sigma) {
  return mmd_impl<false>(x, y, fixed_sigma);
}

double pearson_r(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) throw MetricError("pearson_r needs two equal-length lists of >= 2");
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) throw MetricError("pearson_r is undefined for zero variance");
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

nlohmann::json ShiftReport::to_json() const {
  return {{"mmd", mmd.value},
          {"bandwidth", mmd.sigma},
          {"bandwidth_fallback", mmd.bandwidth_fallback},
          {"train_window", {train_from, train_to}},
          {"test_window", {test_from, test_to}},
          {"train_points", train_points},
          {"test_points", test_points}};
}

ShiftReport measure_shift(const model::Model& model, const events::EventLog& log, const events::SplitSpec& split,
                          std::size_t max_points, std::uint64_t seed) {
  const events::NeighborIndex index(log);
  Rng rng = Rng::stream(seed, "shift");
  auto window = [&](events::Phase phase) {
    auto idx = events::phase_indices(log, split, phase);
    if (idx.size() > max_points) {
      auto pick = rng.sample_without_replacement(idx.size(), max_points);
      std::sort(pick.begin(), pick.end());
      std::vector<std::size_t> sub;
      sub.reserve(pick.size());
      for (std::size_t p : pick) sub.push_back(idx[p]);
      idx = std::move(sub);
    }
    return idx;
  };
  const auto tr = window(events::Phase::kTrain);
  const auto te = window(events::Phase::kTest);
  if (tr.size() < 2 || te.size() < 2) throw PreconditionError("shift windows need at least two interactions each");
  ShiftReport rep;
  rep.mmd = mmd(train::source_embeddings(model, log, index, tr), train::source_embeddings(model, log, index, te));
  rep.train_from = log[tr.front()].ts;
  rep.train_to = log[tr.back()].ts;
  rep.test_from = log[te.front()].ts;
  rep.test_to = log[te.back()].ts;
  rep.train_points = tr.size();
  rep.test_points = te.size();
  return rep;
}

// ------------------------------------------------------------------ critical nodes

bool CriticalSet::contains(NodeId w) const { return std::binary_search(critical.begin(), critical.end(), w); }

CriticalSet find_critical(const events::NeighborIndex& index, NodeId u, NodeId v, double t, CriticalThresholds th) {
  CriticalSet cs;
  cs.query = {u, v, t};
  auto endpoint_history = [&](NodeId n) {
    return n >= 0 && static_cast<std::size_t>(n) < index.num_nodes() ? index.history(n, t)
                                                                        : std::span<const events::NeighborEntry>{};
  };
  for (NodeId end : {u, v}) {
    for (const auto& e : endpoint_history(end)) {
      if (e.neighbor != u && e.neighbor != v) cs.candidates.push_back(e.neighbor);
    }
  }
  std::sort(cs.candidates.begin(), cs.candidates.end());
  cs.candidates.erase(std::unique(cs.candidates.begin(), cs.candidates.end()), cs.candidates.end());
  const auto& cand = cs.candidates;
  auto cand_pos = [&](NodeId x) -> std::ptrdiff_t {
    auto it = std::lower_bound(cand.begin(), cand.end(), x);
    return it != cand.end() && *it == x ? it - cand.begin() : -1;
  };

  // Interactions of each candidate with u or v.
  std::vector<int> endpoint_links(cand.size(), 0);
  for (std::size_t i = 0; i < cand.size(); ++i) {
    for (const auto& e : index.history(cand[i], t)) {
      if (e.neighbor == u || e.neighbor == v) ++endpoint_links[i];
    }
  }

  std::map<std::ptrdiff_t, int> pair_counts;
  for (std::size_t i = 0; i < cand.size(); ++i) {
    pair_counts.clear();
    for (const auto& e : index.history(cand[i], t)) {
      if (e.neighbor == cand[i]) continue;
      const auto p = cand_pos(e.neighbor);
      if (p >= 0) ++pair_counts[p];
    }
    const bool structural = static_cast<int>(pair_counts.size()) >= th.structural;
    bool temporal = false;
    if (endpoint_links[i] >= th.temporal) {
      for (const auto& [p, c] : pair_counts) {
        if (c >= 2 && endpoint_links[static_cast<std::size_t>(p)] >= th.temporal) {
          temporal = true;
          break;
        }
      }
    }
    if (structural || temporal) {
      cs.critical.push_back(cand[i]);
      cs.structural.push_back(structural);
      cs.temporal.push_back(temporal);
    }
  }
  return cs;
}

std::vector<CriticalSet> find_critical_batch(const events::NeighborIndex& index, std::span<const QueryPair> queries,
                                             CriticalThresholds th) {
  std::vector<CriticalSet> out(queries.size());
  const auto n = static_cast<std::int64_t>(queries.size());
#pragma omp parallel for schedule(dynamic, 8)
  for (std::int64_t i = 0; i < n; ++i) {
    const auto& q = queries[static_cast<std::size_t>(i)];
    out[static_cast<std::size_t>(i)] = find_critical(index, q.src, q.dst, q.ts, th);
  }
  return out;
}

std::vector<CriticalSet> find_critical_batch_serial(const events::NeighborIndex& index,
                                                    std::span<const QueryPair> queries, CriticalThresholds th) {
  std::vector<CriticalSet> out;
  out.reserve(queries.size());
  for (const auto& q : queries) out.push_back(find_critical(index, q.src, q.dst, q.ts, th));
  return out;
}

// ------------------------------------------------------------------ masking ablation

MaskMode parse_mask_mode(std::string_view s) {
  if (s == "critical") return MaskMode::kCritical;
  if (s == "random") return MaskMode::kRandom;
  throw ConfigError("unknown mask mode '" + std::string(s) + "'");
}

std::string_view to_string(MaskMode m) { return m == MaskMode::kCritical ? "critical" : "random"; }

namespace {

// Distinct valid non-self node-ids across both sequences, ascending.
std::vector<NodeId> token_ids(const features::SequencePair& seqs) {
  std::vector<NodeId> ids;
  for (const auto* s : {&seqs.src, &seqs.dst}) {
    for (int r = 1; r < s->rows(); ++r) {
      const auto ri = static_cast<std::size_t>(r);
      if (s->valid_mask[ri]) ids.push_back(s->node_ids[ri]);
    }
  }
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  return ids;
}

}  // namespace

MaskOutcome apply_mask(features::SequencePair& seqs, const CriticalSet& crit, MaskMode mode, double retention,
                       Rng& rng) {
  if (!(retention >= 0.0 && retention <= 1.0)) throw PreconditionError("retention must lie in [0, 1]");
  MaskOutcome out;
  out.critical_size = crit.critical.size();
  const std::size_t n = crit.critical.size();
  const auto keep = std::min(n, static_cast<std::size_t>(std::ceil(retention * static_cast<double>(n) - 1e-9)));
  auto kept_idx = rng.sample_without_replacement(n, keep);
  std::vector<std::uint8_t> kept(n, 0);
  for (std::size_t k : kept_idx) kept[k] = 1;
  std::unordered_set<NodeId> dropped;
  for (std::size_t i = 0; i < n; ++i) {
    if (!kept[i]) dropped.insert(crit.critical[i]);
  }
  if (dropped.empty()) return out;

  const auto present = token_ids(seqs);
  std::unordered_set<NodeId> masked;
  for (NodeId id : present) {
    if (dropped.count(id)) masked.insert(id);
  }
  if (mode == MaskMode::kRandom) {
    const std::size_t m = masked.size();
    masked.clear();
    for (std::size_t k : rng.sample_without_replacement(present.size(), m)) masked.insert(present[k]);
  }
  if (masked.empty()) return out;
  out.masked_ids = masked.size();
  out.masked_rows = static_cast<std::size_t>(features::mask_tokens(seqs.src, masked)) +
                    static_cast<std::size_t>(features::mask_tokens(seqs.dst, masked));
  return out;
}

train::EvalReport masked_evaluate(const model::Model& model, const train::Evaluator& evaluator, MaskMode mode,
                                  double retention, const train::EvalOptions& opts, CriticalThresholds th) {
  if (!(retention >= 0.0 && retention <= 1.0)) throw PreconditionError("retention must lie in [0, 1]");
  train::EvalOptions o = opts;
  const auto& index = evaluator.index();
  o.hook = [&index, mode, retention, th](const train::LabeledQuery& lq, std::uint64_t eval_seed,
                                         features::SequencePair& seqs) {
    const auto crit = find_critical(index, lq.q.src, lq.q.dst, lq.q.ts, th);
    Rng rng = Rng::stream(eval_seed, "masks", 2 * lq.query_idx + (lq.label ? 0 : 1));
    apply_mask(seqs, crit, mode, retention, rng);
  };
  return evaluator.evaluate(model, events::Phase::kTest, o);
}

// ------------------------------------------------------------------ attention statistics

namespace {

bool col_valid(const Mask& mask, Eigen::Index c) {
  return mask.empty() || mask[static_cast<std::size_t>(c)] != 0;
}

bool row_is_zero(std::span<const double> row, const Mask& mask) {
  for (std::size_t c = 0; c < row.size(); ++c) {
    if ((mask.empty() || mask[c]) && row[c] != 0.0) return false;
  }
  return true;
}

std::span<const double> row_span(const Matrix& m, Eigen::Index r) {
  return {m.data() + r * m.cols(), static_cast<std::size_t>(m.cols())};
}

// Mean of f over valid, non-zero query rows.
template <typename F>
double mean_over_rows(const Matrix& map, const Mask& mask, F&& f) {
  double sum = 0.0;
  int count = 0;
  for (Eigen::Index r = 0; r < map.rows(); ++r) {
    if (!col_valid(mask, r)) continue;
    const auto row = row_span(map, r);
    if (row_is_zero(row, mask)) continue;
    sum += f(row);
    ++count;
  }
  return count ? sum / count : 0.0;
}

}  // namespace

Matrix positive_normalized(const Matrix& b, const Mask& mask, double eps) {
  Matrix out = Matrix::Zero(b.rows(), b.cols());
  for (Eigen::Index r = 0; r < b.rows(); ++r) {
    double sum = 0.0;
    for (Eigen::Index c = 0; c < b.cols(); ++c) {
      if (col_valid(mask, c) && b(r, c) > 0.0) {
        out(r, c) = b(r, c);
        sum += b(r, c);
      }
    }
    out.row(r) /= (sum + eps);
  }
  return out;
}

double row_entropy(std::span<const double> row, const Mask& mask) {
  double h = 0.0;
  for (std::size_t c = 0; c < row.size(); ++c) {
    if ((mask.empty() || mask[c]) && row[c] > 0.0) h -= row[c] * std::log(row[c]);
  }
  return h;
}

double attention_entropy(const Matrix& map, const Mask& mask) {
  return mean_over_rows(map, mask, [&](std::span<const double> row) { return row_entropy(row, mask); });
}

double critical_mass_row(std::span<const double> row, std::span<const NodeId> node_ids,
                         const std::unordered_set<NodeId>& critical, const Mask& mask) {
  double total = 0.0, hit = 0.0;
  for (std::size_t c = 0; c < row.size(); ++c) {
    if (!(mask.empty() || mask[c])) continue;
    total += row[c];
    if (critical.count(node_ids[c])) hit += row[c];
  }
  return total > 0.0 ? hit / total : 0.0;
}

double critical_mass(const Matrix& map, std::span<const NodeId> node_ids, const std::unordered_set<NodeId>& critical,
                     const Mask& mask) {
  return mean_over_rows(map, mask, [&](std::span<const double> row) {
    return critical_mass_row(row, node_ids, critical, mask);
  });
}

double topk_critical_proportion_row(std::span<const double> row, std::span<const NodeId> node_ids,
                                    const std::unordered_set<NodeId>& critical, const Mask& mask, double k_frac) {
  std::vector<std::size_t> valid;
  for (std::size_t c = 0; c < row.size(); ++c) {
    if (mask.empty() || mask[c]) valid.push_back(c);
  }
  if (valid.empty()) return 0.0;
  std::stable_sort(valid.begin(), valid.end(), [&](std::size_t a, std::size_t b) { return row[a] > row[b]; });
  const auto k = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::ceil(k_frac * static_cast<double>(valid.size()) - 1e-9)));
  std::size_t hits = 0;
  for (std::size_t i = 0; i < k && i < valid.size(); ++i) hits += critical.count(node_ids[valid[i]]);
  return static_cast<double>(hits) / static_cast<double>(std::min(k, valid.size()));
}

double topk_critical_proportion(const Matrix& map, std::span<const NodeId> node_ids,
                                const std::unordered_set<NodeId>& critical, const Mask& mask, double k_frac) {
  return mean_over_rows(map, mask, [&](std::span<const double> row) {
    return topk_critical_proportion_row(row, node_ids, critical, mask, k_frac);
  });
}

Matrix analysis_map(const model::HeadRecord& head, model::AttentionKind kind, const Mask& mask, double eps) {
  if (kind == model::AttentionKind::kStandard) return head.a1;
  return positive_normalized(head.b, mask, eps);
}

nlohmann::json AttentionSummary::to_json() const {
  return {{"attention", std::string(model::to_string(attention))},
          {"layer", layer},
          {"num_queries", num_queries},
          {"entropy", entropy},
          {"critical_mass", critical_mass},
          {"topk_prop", topk_prop},
          {"aggregation", "mean over query rows, then queries, then heads"},
          {"padding_masked", true}};
}

namespace {

// Statistics of one query; rows for the requested layers.
std::vector<AttentionStatRow> query_stats(const model::Model& model, const events::EventLog& log,
                                          const events::NeighborIndex& index, const QueryPair& q, std::size_t qi,
                                          const AttentionStatsOptions& opts, int target_layer) {
  const auto seqs = features::build_sequences(log, index, q.src, q.dst, q.ts, model.cfg.channels);
  model::AttentionRecord rs, rd;
  model::score_pair(model, seqs, &rs, &rd);
  const auto crit = find_critical(index, q.src, q.dst, q.ts, opts.thresholds).critical_set();

  std::vector<AttentionStatRow> rows;
  for (int l = 0; l < model.cfg.layers; ++l) {
    if (!opts.all_layers && l != target_layer) continue;
    for (int h = 0; h < model.cfg.heads; ++h) {
      AttentionStatRow row{qi, l, h, 0.0, 0.0, 0.0};
      int count = 0;
      for (const auto* rec : {&rs, &rd}) {
        const auto& head = rec->layers[static_cast<std::size_t>(l)][static_cast<std::size_t>(h)];
        const Matrix map = analysis_map(head, model.cfg.attention, rec->valid_mask, opts.eps);
        for (Eigen::Index r = 0; r < map.rows(); ++r) {
          if (!rec->valid_mask[static_cast<std::size_t>(r)]) continue;
          const auto span = row_span(map, r);
          if (row_is_zero(span, rec->valid_mask)) continue;
          row.entropy += row_entropy(span, rec->valid_mask);
          row.critical_mass += critical_mass_row(span, rec->node_ids, crit, rec->valid_mask);
          row.topk_prop += topk_critical_proportion_row(span, rec->node_ids, crit, rec->valid_mask, opts.k_frac);
          ++count;
        }
      }
      if (count) {
        row.entropy /= count;
        row.critical_mass /= count;
        row.topk_prop /= count;
      }
      rows.push_back(row);
    }
  }
  return rows;
}

template <bool kParallel>
AttentionSummary attention_stats_impl(const model::Model& model, const events::EventLog& log,
                                      const events::NeighborIndex& index, std::span<const QueryPair> queries,
                                      const AttentionStatsOptions& opts) {
  if (model.cfg.layers == 0) throw ConfigError("attention statistics need at least one layer");
  const int target = opts.layer < 0 ? model.cfg.layers - 1 : opts.layer;
  if (target >= model.cfg.layers) throw ConfigError("layer index out of range");

  std::vector<std::vector<AttentionStatRow>> per_query(queries.size());
  std::exception_ptr failure;
  std::mutex failure_mu;
  const auto n = static_cast<std::int64_t>(queries.size());
#pragma omp parallel for schedule(dynamic, 4) if (kParallel)
  for (std::int64_t i = 0; i < n; ++i) {
    try {
      const auto qi = static_cast<std::size_t>(i);
      per_query[qi] = query_stats(model, log, index, queries[qi], qi, opts, target);
    } catch (...) {
      std::lock_guard lock(failure_mu);
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);

  AttentionSummary s;
  s.attention = model.cfg.attention;
  s.layer = target;
  s.num_queries = queries.size();
  const auto heads = static_cast<std::size_t>(model.cfg.heads);
  std::vector<double> ent(heads, 0.0), mass(heads, 0.0), topk(heads, 0.0);
  for (auto& rows : per_query) {
    for (const auto& r : rows) {
      if (r.layer == target) {
        const auto h = static_cast<std::size_t>(r.head);
        ent[h] += r.entropy;
        mass[h] += r.critical_mass;
        topk[h] += r.topk_prop;
      }
      s.rows.push_back(r);
    }
  }
  if (!queries.empty()) {
    const double nq = static_cast<double>(queries.size());
    for (std::size_t h = 0; h < heads; ++h) {
      s.entropy += ent[h] / nq;
      s.critical_mass += mass[h] / nq;
      s.topk_prop += topk[h] / nq;
    }
    s.entropy /= static_cast<double>(heads);
    s.critical_mass /= static_cast<double>(heads);
    s.topk_prop /= static_cast<double>(heads);
  }
  return s;
}

}  // namespace

AttentionSummary attention_statistics(const model::Model& model, const events::EventLog& log,
                                      const events::NeighborIndex& index, std::span<const QueryPair> queries,
                                      const AttentionStatsOptions& opts) {
  return attention_stats_impl<true>(model, log, index, queries, opts);
}

AttentionSummary attention_statistics_serial(const model::Model& model, const events::EventLog& log,
                                             const events::NeighborIndex& index,
                                             std::span<const QueryPair> queries, const AttentionStatsOptions& opts) {
  return attention_stats_impl<false>(model, log, index, queries, opts);
}

void write_attention_csv(const AttentionSummary& s, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out.precision(12);
  out << "query_idx,layer,head,entropy,critical_mass,topk_prop\n";
  for (const auto& r : s.rows) {
    out << r.query_idx << ',' << r.layer << ',' << r.head << ',' << r.entropy << ',' << r.critical_mass << ','
        << r.topk_prop << '\n';
  }
}

void write_attention_dump(const model::AttentionRecord& rec, const std::filesystem::path& dir,
                          const std::string& stem) {
  std::filesystem::create_directories(dir);
  nlohmann::json header;
  header["valid_mask"] = rec.valid_mask;
  header["node_ids"] = rec.node_ids;
  header["lambda"] = nlohmann::json::array();
  header["files"] = nlohmann::json::array();
  for (std::size_t l = 0; l < rec.layers.size(); ++l) {
    nlohmann::json lam = nlohmann::json::array();
    for (std::size_t h = 0; h < rec.layers[l].size(); ++h) {
      const auto& hr = rec.layers[l][h];
      lam.push_back(hr.lambda);
      const std::string name = stem + "_layer" + std::to_string(l) + "_head" + std::to_string(h) + ".csv";
      std::ofstream out(dir / name);
      if (!out) throw IoError("cannot write " + (dir / name).string());
      out.precision(12);
      out << "query_row,key_row,a1,a2,b\n";
      for (Eigen::Index i = 0; i < hr.a1.rows(); ++i) {
        for (Eigen::Index j = 0; j < hr.a1.cols(); ++j) {
          out << i << ',' << j << ',' << hr.a1(i, j) << ',' << hr.a2(i, j) << ',' << hr.b(i, j) << '\n';
        }
      }
      header["files"].push_back(name);
    }
    header["lambda"].push_back(lam);
  }
  std::ofstream js(dir / (stem + ".json"));
  if (!js) throw IoError("cannot write " + (dir / (stem + ".json")).string());
  js << header.dump(2) << '\n';
}

}  // namespace diffdyg::diag
