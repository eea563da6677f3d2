#include "diffdyg/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <fstream>
#include <mutex>
#include <numeric>
#include <sstream>

#include <spdlog/spdlog.h>

#include "diffdyg/error.hpp"

namespace diffdyg::train {

// ------------------------------------------------------------------ metrics

double bce_loss(double p, int y, double clamp) {
  p = std::clamp(p, clamp, 1.0 - clamp);
  return y ? -std::log(p) : -std::log(1.0 - p);
}

namespace {

void check_metric_input(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw MetricError("scores and labels differ in length");
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw MetricError("labels must be 0 or 1");
    if (std::isnan(scores[i])) throw MetricError("NaN score at position " + std::to_string(i));
  }
}

}  // namespace

double average_precision(std::span<const double> scores, std::span<const int> labels) {
  check_metric_input(scores, labels);
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double sum = 0.0;
  std::size_t hits = 0;
  for (std::size_t r = 0; r < order.size(); ++r) {
    if (labels[order[r]]) {
      ++hits;
      sum += static_cast<double>(hits) / static_cast<double>(r + 1);
    }
  }
  if (hits == 0) throw MetricError("average precision needs at least one positive");
  return sum / static_cast<double>(hits);
}

double auc_roc(std::span<const double> scores, std::span<const int> labels) {
  check_metric_input(scores, labels);
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Midranks, so a tied positive/negative pair contributes one half.
  double pos_rank_sum = 0.0;
  std::size_t npos = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + j + 1);  // ranks are 1-based
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]]) {
        pos_rank_sum += mid;
        ++npos;
      }
    }
    i = j;
  }
  const std::size_t nneg = scores.size() - npos;
  if (npos == 0 || nneg == 0) throw MetricError("AUC needs both classes");
  const double np = static_cast<double>(npos);
  return (pos_rank_sum - np * (np + 1.0) / 2.0) / (np * static_cast<double>(nneg));
}

MeanStd mean_std(std::span<const double> xs) {
  MeanStd r;
  if (xs.empty()) return r;
  r.mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - r.mean) * (x - r.mean);
    r.std = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  }
  return r;
}

// ------------------------------------------------------------------ scoring

namespace {

double score_one(const Model& model, const EventLog& log, const events::NeighborIndex& index,
                 const LabeledQuery& lq, std::uint64_t eval_seed, const SequenceHook& hook) {
  auto seqs = features::build_sequences(log, index, lq.q.src, lq.q.dst, lq.q.ts, model.cfg.channels);
  if (hook) hook(lq, eval_seed, seqs);
  return model::score_pair(model, seqs);
}

}  // namespace

std::vector<double> score_queries(const Model& model, const EventLog& log, const events::NeighborIndex& index,
                                  std::span<const LabeledQuery> queries, std::uint64_t eval_seed,
                                  const SequenceHook& hook) {
  std::vector<double> out(queries.size());
  std::exception_ptr failure;
  std::mutex failure_mu;
  const auto n = static_cast<std::int64_t>(queries.size());
#pragma omp parallel for schedule(dynamic, 4)
  for (std::int64_t i = 0; i < n; ++i) {
    try {
      out[static_cast<std::size_t>(i)] =
          score_one(model, log, index, queries[static_cast<std::size_t>(i)], eval_seed, hook);
    } catch (...) {
      std::lock_guard lock(failure_mu);
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);
  return out;
}

std::vector<double> score_queries_serial(const Model& model, const EventLog& log,
                                         const events::NeighborIndex& index,
                                         std::span<const LabeledQuery> queries, std::uint64_t eval_seed,
                                         const SequenceHook& hook) {
  std::vector<double> out;
  out.reserve(queries.size());
  for (const auto& lq : queries) out.push_back(score_one(model, log, index, lq, eval_seed, hook));
  return out;
}

// ------------------------------------------------------------------ evaluation

EvalMode parse_mode(std::string_view s) {
  if (s == "transductive") return EvalMode::kTransductive;
  if (s == "inductive") return EvalMode::kInductive;
  throw ConfigError("unknown mode '" + std::string(s) + "'");
}

std::string_view to_string(EvalMode m) { return m == EvalMode::kTransductive ? "transductive" : "inductive"; }

namespace {

std::string_view phase_name(Phase p) {
  switch (p) {
    case Phase::kTrain: return "train";
    case Phase::kVal: return "val";
    case Phase::kTest: return "test";
  }
  return "?";
}

}  // namespace

nlohmann::json EvalReport::to_json() const {
  return {{"dataset", dataset},
          {"phase", std::string(phase_name(phase))},
          {"protocol", std::string(events::to_string(protocol))},
          {"mode", std::string(to_string(mode))},
          {"seeds", seeds},
          {"ap", ap},
          {"auc", auc},
          {"ap_mean", ap_summary.mean},
          {"ap_std", ap_summary.std},
          {"auc_mean", auc_summary.mean},
          {"auc_std", auc_summary.std},
          {"num_positives", num_positives},
          {"fallback_negatives", fallback_negatives}};
}

Evaluator::Evaluator(const EventLog& log, const SplitSpec& split)
    : log_(&log), split_(split), index_(log), sampler_(log, split) {}

std::vector<QueryPair> Evaluator::positives(Phase phase, EvalMode mode) const {
  std::vector<QueryPair> out;
  for (std::size_t i : events::phase_indices(*log_, split_, phase)) {
    const auto& e = (*log_)[i];
    if (mode == EvalMode::kInductive && !split_.is_masked(e.src) && !split_.is_masked(e.dst)) continue;
    out.push_back({e.src, e.dst, e.ts});
  }
  return out;
}

std::vector<LabeledQuery> Evaluator::labeled_queries(std::span<const QueryPair> positives,
                                                     NegativeProtocol protocol, std::uint64_t seed) const {
  Rng rng = Rng::stream(seed, "negatives");
  std::vector<LabeledQuery> out;
  out.reserve(2 * positives.size());
  for (std::size_t i = 0; i < positives.size(); ++i) {
    const auto& q = positives[i];
    out.push_back({q, 1, i});
    events::Interaction pos{q.src, q.dst, q.ts, {}, 0};
    const NodeId neg = sampler_.sample(protocol, pos, rng);
    out.push_back({{q.src, neg, q.ts}, 0, i});
  }
  return out;
}

EvalReport Evaluator::evaluate(const Model& model, Phase phase, const EvalOptions& opts) const {
  const auto pos = positives(phase, opts.mode);
  if (pos.empty()) throw MetricError("no evaluation positives in the " + std::string(phase_name(phase)) + " phase");
  EvalReport rep;
  rep.phase = phase;
  rep.protocol = opts.protocol;
  rep.mode = opts.mode;
  rep.dataset = opts.dataset;
  rep.seeds = opts.seeds;
  rep.num_positives = pos.size();
  const std::size_t fallbacks_before = sampler_.fallback_count();
  for (std::uint64_t seed : opts.seeds) {
    const auto queries = labeled_queries(pos, opts.protocol, seed);
    const auto scores = score_queries(model, *log_, index_, queries, seed, opts.hook);
    std::vector<int> labels;
    std::vector<ScoreRow> dump;
    labels.reserve(queries.size());
    dump.reserve(queries.size());
    for (std::size_t i = 0; i < queries.size(); ++i) {
      labels.push_back(queries[i].label);
      dump.push_back({queries[i].q.src, queries[i].q.dst, queries[i].q.ts, queries[i].label, scores[i]});
    }
    rep.ap.push_back(average_precision(scores, labels));
    rep.auc.push_back(auc_roc(scores, labels));
    rep.dumps.push_back(std::move(dump));
  }
  rep.fallback_negatives = sampler_.fallback_count() - fallbacks_before;
  rep.ap_summary = mean_std(rep.ap);
  rep.auc_summary = mean_std(rep.auc);
  return rep;
}

EvalReport evaluate(const Model& model, const EventLog& log, const SplitSpec& split, Phase phase,
                    const EvalOptions& opts) {
  return Evaluator(log, split).evaluate(model, phase, opts);
}

void write_score_dump(const std::vector<ScoreRow>& rows, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out.precision(17);
  out << "src,dst,ts,label,score\n";
  for (const auto& r : rows) out << r.src << ',' << r.dst << ',' << r.ts << ',' << r.label << ',' << r.score << '\n';
}

std::vector<ScoreRow> read_score_dump(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != "src,dst,ts,label,score") throw ParseError(1, "unexpected score dump header");
  std::vector<ScoreRow> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ss(line);
    ScoreRow r;
    char c1, c2, c3, c4;
    if (!(ss >> r.src >> c1 >> r.dst >> c2 >> r.ts >> c3 >> r.label >> c4 >> r.score)) {
      throw ParseError(lineno, "malformed score row");
    }
    rows.push_back(r);
  }
  return rows;
}

// ------------------------------------------------------------------ training

void TrainConfig::validate() const {
  if (epochs < 0 || epochs > 100) throw ConfigError("epochs must lie in [0, 100]");
  if (patience <= 0) throw ConfigError("patience must be positive");
  if (epochs > 0 && patience > epochs) throw ConfigError("patience cannot exceed epochs");
  if (batch_size <= 0) throw ConfigError("batch_size must be positive");
  if (!(lr > 0.0)) throw ConfigError("lr must be positive");
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be non-negative");
  if (seeds.empty()) throw ConfigError("at least one seed is required");
  if (grad_chunks <= 0) throw ConfigError("grad_chunks must be positive");
}

nlohmann::json EpochRecord::to_json() const {
  return {{"epoch", epoch}, {"train_loss", train_loss}, {"val_ap", val_ap}, {"val_auc", val_auc},
          {"improved", improved}};
}

namespace {

// Gradient of sum_i bce_i / n over [begin, end).
void accumulate_range(const Model& model, const EventLog& log, const events::NeighborIndex& index,
                      std::span<const LabeledQuery> pairs, std::size_t begin, std::size_t end,
                      std::uint64_t dropout_seed, tensor::Gradients& grads, double& loss_sum) {
  const double inv_n = 1.0 / static_cast<double>(pairs.size());
  const bool training = model.cfg.dropout > 0.0;
  for (std::size_t i = begin; i < end; ++i) {
    const auto& lq = pairs[i];
    const auto seqs = features::build_sequences(log, index, lq.q.src, lq.q.dst, lq.q.ts, model.cfg.channels);
    Rng drop_rng = Rng::stream(dropout_seed, "dropout", i);
    tensor::Tape tape;
    model::Forward fwd(tape, model, {training, &drop_rng});
    const auto p = fwd.pair_probability(seqs);
    const auto bce = tape.bce(p, static_cast<double>(lq.label));
    loss_sum += tape.scalar(bce);
    tape.backward(tape.scale(bce, inv_n));
    tape.accumulate_param_grads(model.params, grads);
  }
}

std::size_t chunk_begin(std::size_t n, int chunks, int c) {
  return n * static_cast<std::size_t>(c) / static_cast<std::size_t>(chunks);
}

BatchGradients combine(const Model& model, std::vector<tensor::Gradients>& parts, const std::vector<double>& losses) {
  BatchGradients out{tensor::zero_gradients(model.params), 0.0};
  for (std::size_t c = 0; c < parts.size(); ++c) {
    tensor::add_gradients(out.grads, parts[c]);
    out.loss_sum += losses[c];
  }
  return out;
}

}  // namespace

BatchGradients batch_gradients(const Model& model, const EventLog& log, const events::NeighborIndex& index,
                               std::span<const LabeledQuery> pairs, std::uint64_t dropout_seed, int chunks) {
  if (pairs.empty()) throw BatchError("empty batch");
  std::vector<tensor::Gradients> parts(static_cast<std::size_t>(chunks), tensor::zero_gradients(model.params));
  std::vector<double> losses(static_cast<std::size_t>(chunks), 0.0);
  std::exception_ptr failure;
  std::mutex failure_mu;
#pragma omp parallel for schedule(dynamic, 1)
  for (int c = 0; c < chunks; ++c) {
    try {
      const auto cu = static_cast<std::size_t>(c);
      accumulate_range(model, log, index, pairs, chunk_begin(pairs.size(), chunks, c),
                       chunk_begin(pairs.size(), chunks, c + 1), dropout_seed, parts[cu], losses[cu]);
    } catch (...) {
      std::lock_guard lock(failure_mu);
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);
  return combine(model, parts, losses);
}

BatchGradients batch_gradients_serial(const Model& model, const EventLog& log,
                                      const events::NeighborIndex& index, std::span<const LabeledQuery> pairs,
                                      std::uint64_t dropout_seed, int chunks) {
  if (pairs.empty()) throw BatchError("empty batch");
  std::vector<tensor::Gradients> parts(static_cast<std::size_t>(chunks), tensor::zero_gradients(model.params));
  std::vector<double> losses(static_cast<std::size_t>(chunks), 0.0);
  for (int c = 0; c < chunks; ++c) {
    const auto cu = static_cast<std::size_t>(c);
    accumulate_range(model, log, index, pairs, chunk_begin(pairs.size(), chunks, c),
                     chunk_begin(pairs.size(), chunks, c + 1), dropout_seed, parts[cu], losses[cu]);
  }
  return combine(model, parts, losses);
}

TrainResult train(const EventLog& log, const SplitSpec& split, const TrainConfig& cfg, Model init,
                  std::uint64_t seed, const EpochCallback& on_epoch) {
  cfg.validate();
  TrainResult result{init, {}, -1, 0.0};
  if (cfg.epochs == 0) return result;

  const auto train_idx = events::phase_indices(log, split, Phase::kTrain);
  if (train_idx.empty()) throw TrainingError("no training interactions");
  const events::NeighborIndex train_index(log, train_idx);
  const Evaluator evaluator(log, split);
  const events::NegativeSampler& sampler = evaluator.sampler();

  Model model = std::move(init);
  tensor::Adam adam(model.params, {cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay});
  EvalOptions val_opts;
  val_opts.protocol = cfg.protocol;
  val_opts.mode = cfg.mode;
  val_opts.seeds = {Rng::derive_seed(seed, "validation")};

  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  int stale = 0;
  bool have_best = false;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng neg_rng = Rng::stream(seed, "negatives", static_cast<std::uint64_t>(epoch));
    double loss_sum = 0.0;
    std::size_t loss_count = 0;
    for (std::size_t start = 0, batch = 0; start < train_idx.size(); start += bs, ++batch) {
      const std::size_t end = std::min(train_idx.size(), start + bs);
      std::vector<LabeledQuery> pairs;
      pairs.reserve(2 * (end - start));
      for (std::size_t k = start; k < end; ++k) {
        const auto& e = log[train_idx[k]];
        NodeId neg = sampler.sample(NegativeProtocol::kRandom, e, neg_rng);
        // Masked nodes stay unseen during training.
        for (int tries = 0; split.is_masked(neg) && tries < 64; ++tries) {
          neg = sampler.sample(NegativeProtocol::kRandom, e, neg_rng);
        }
        pairs.push_back({{e.src, e.dst, e.ts}, 1, k});
        pairs.push_back({{e.src, neg, e.ts}, 0, k});
      }
      const std::uint64_t dseed =
          Rng::derive_seed(seed, "dropout", (static_cast<std::uint64_t>(epoch) << 32) | batch);
      auto bg = batch_gradients(model, log, train_index, pairs, dseed, cfg.grad_chunks);
      if (!std::isfinite(bg.loss_sum)) {
        throw TrainingError("loss is not finite at epoch " + std::to_string(epoch) + ", batch " +
                            std::to_string(batch));
      }
      adam.step(model.params, bg.grads);
      loss_sum += bg.loss_sum;
      loss_count += pairs.size();
    }

    const auto val = evaluator.evaluate(model, Phase::kVal, val_opts);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(loss_count);
    rec.val_ap = val.ap.front();
    rec.val_auc = val.auc.front();
    rec.improved = !have_best || rec.val_ap > result.best_val_ap;
    if (rec.improved) {
      have_best = true;
      result.best_val_ap = rec.val_ap;
      result.best_epoch = epoch;
      result.model.params = model.params;
      stale = 0;
    } else {
      ++stale;
    }
    spdlog::info("epoch {} loss {:.5f} val_ap {:.4f}{}", epoch, rec.train_loss, rec.val_ap,
                 rec.improved ? " *" : "");
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
    if (stale >= cfg.patience) break;
  }
  return result;
}

tensor::Matrix source_embeddings(const Model& model, const EventLog& log, const events::NeighborIndex& index,
                                 std::span<const std::size_t> interaction_indices) {
  const auto n = static_cast<std::int64_t>(interaction_indices.size());
  tensor::Matrix out(n, model.cfg.width());
  std::exception_ptr failure;
  std::mutex failure_mu;
#pragma omp parallel for schedule(dynamic, 4)
  for (std::int64_t i = 0; i < n; ++i) {
    try {
      const auto& e = log[interaction_indices[static_cast<std::size_t>(i)]];
      const auto seqs = features::build_sequences(log, index, e.src, e.dst, e.ts, model.cfg.channels);
      tensor::Tape tape(false);
      model::Forward fwd(tape, model);
      out.row(i) = tape.value(fwd.encode_node(seqs.src));
    } catch (...) {
      std::lock_guard lock(failure_mu);
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);
  return out;
}

}  // namespace diffdyg::train
