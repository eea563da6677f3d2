#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include <omp.h>

#include "diffdyg/error.hpp"
#include "diffdyg/trainer.hpp"
#include "test_util.hpp"

using namespace diffdyg;
using namespace diffdyg::train;
using events::Phase;

namespace {

model::ModelConfig small_model(int edge_dim = 0) {
  model::ModelConfig c;
  c.channels.d = 4;
  c.channels.d_T = 8;
  c.channels.d_C = 4;
  c.channels.K = 5;
  c.layers = 1;
  c.heads = 2;
  c.d_attn = 5;
  c.dropout = 0.0;
  c.edge_dim = edge_dim;
  return c;
}

TrainConfig quick_train(int epochs) {
  TrainConfig t;
  t.epochs = epochs;
  t.patience = std::max(1, epochs);
  t.batch_size = 25;
  t.lr = 5e-3;
  t.seeds = {0};
  return t;
}

// O(n^2) definitions: rank of each positive counts every item scored above
// it plus earlier items tied with it.
double brute_ap(const std::vector<double>& s, const std::vector<int>& y) {
  double total = 0;
  int npos = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!y[i]) continue;
    ++npos;
    int rank = 0, hits = 0;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (s[j] > s[i] || (s[j] == s[i] && j <= i)) {
        ++rank;
        hits += y[j];
      }
    }
    total += static_cast<double>(hits) / rank;
  }
  return total / npos;
}

double brute_auc(const std::vector<double>& s, const std::vector<int>& y) {
  double num = 0, den = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[i] != 1 || y[j] != 0) continue;
      den += 1;
      num += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
    }
  }
  return num / den;
}

}  // namespace

// ---------------------------------------------------------------- metrics

TEST(Bce, Examples) {
  EXPECT_NEAR(bce_loss(0.5, 1), 0.693147180559945, 1e-12);
  EXPECT_NEAR(bce_loss(0.5, 0), 0.693147180559945, 1e-12);
  EXPECT_NEAR(bce_loss(0.9, 0), 2.302585092994046, 1e-12);
  EXPECT_LT(bce_loss(1.0 - 1e-12, 1), 1e-6);
  EXPECT_NEAR(bce_loss(0.0, 1), -std::log(1e-7), 1e-9);
  EXPECT_TRUE(std::isfinite(bce_loss(1.0, 0)));
}

TEST(AveragePrecision, Examples) {
  EXPECT_DOUBLE_EQ(average_precision(std::vector<double>{0.9, 0.8, 0.1}, std::vector<int>{1, 1, 0}), 1.0);
  EXPECT_NEAR(average_precision(std::vector<double>{0.9, 0.8, 0.7}, std::vector<int>{1, 0, 1}), 0.8333333333333334,
              1e-15);
  EXPECT_DOUBLE_EQ(average_precision(std::vector<double>{0.1, 0.7, 0.3}, std::vector<int>{1, 1, 1}), 1.0);
  EXPECT_THROW(average_precision(std::vector<double>{0.1, 0.2}, std::vector<int>{0, 0}), MetricError);
  EXPECT_THROW(average_precision(std::vector<double>{0.1}, std::vector<int>{1, 0}), MetricError);
}

TEST(AveragePrecision, TiesKeepInputOrder) {
  // negative listed first among equal scores ranks ahead of the positive
  EXPECT_DOUBLE_EQ(average_precision(std::vector<double>{0.5, 0.5}, std::vector<int>{0, 1}), 0.5);
  EXPECT_DOUBLE_EQ(average_precision(std::vector<double>{0.5, 0.5}, std::vector<int>{1, 0}), 1.0);
}

TEST(AucRoc, Examples) {
  EXPECT_DOUBLE_EQ(auc_roc(std::vector<double>{0.9, 0.8, 0.2, 0.1}, std::vector<int>{1, 1, 0, 0}), 1.0);
  EXPECT_DOUBLE_EQ(auc_roc(std::vector<double>{0.9, 0.8, 0.7}, std::vector<int>{1, 0, 1}), 0.5);
  EXPECT_DOUBLE_EQ(auc_roc(std::vector<double>{0.3, 0.3, 0.3, 0.3}, std::vector<int>{1, 0, 1, 0}), 0.5);
  EXPECT_THROW(auc_roc(std::vector<double>{0.3, 0.4}, std::vector<int>{1, 1}), MetricError);
  EXPECT_THROW(auc_roc(std::vector<double>{0.3, std::nan("")}, std::vector<int>{1, 0}), MetricError);
  EXPECT_THROW(auc_roc(std::vector<double>{0.3, 0.4}, std::vector<int>{1, 2}), MetricError);
}

TEST(Metrics, MatchBruteForceAndMonotoneInvariance) {
  Rng rng(31);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + rng.uniform_index(19);
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      // coarse grid so ties are common
      s[i] = static_cast<double>(rng.uniform_index(6)) / 5.0;
      y[i] = rng.bernoulli(0.5);
    }
    y[0] = 1;
    y[1] = 0;
    EXPECT_NEAR(average_precision(s, y), brute_ap(s, y), 1e-12);
    EXPECT_NEAR(auc_roc(s, y), brute_auc(s, y), 1e-12);

    std::vector<double> t(n);
    std::transform(s.begin(), s.end(), t.begin(), [](double x) { return std::exp(3.0 * x) - 7.0; });
    EXPECT_NEAR(average_precision(t, y), average_precision(s, y), 1e-12);
    EXPECT_NEAR(auc_roc(t, y), auc_roc(s, y), 1e-12);
  }
}

TEST(Metrics, MeanStd) {
  const auto a = mean_std(std::vector<double>{1.0, 2.0, 3.0, 4.0});
  EXPECT_DOUBLE_EQ(a.mean, 2.5);
  EXPECT_NEAR(a.std, std::sqrt(5.0 / 3.0), 1e-15);
  EXPECT_EQ(mean_std(std::vector<double>{0.7}).std, 0.0);
}

// ---------------------------------------------------------------- scoring

TEST(Scoring, BatchMatchesPerPairAndSerial) {
  const auto cfg = small_model(2);
  const auto m = model::init_model(cfg, 3);
  Rng rng(4);
  const auto log = testutil::random_log(rng, 15, 120, 2);
  const events::NeighborIndex idx(log);
  std::vector<LabeledQuery> qs;
  for (std::size_t i = 0; i < 64; ++i) {
    qs.push_back({{static_cast<NodeId>(rng.uniform_index(log.num_nodes())),
                   static_cast<NodeId>(rng.uniform_index(log.num_nodes())), rng.uniform(1.0, log.max_ts() + 1)},
                  static_cast<int>(i % 2), i / 2});
  }
  omp_set_num_threads(4);
  const auto par = score_queries(m, log, idx, qs);
  const auto ser = score_queries_serial(m, log, idx, qs);
  EXPECT_EQ(par, ser);
  for (std::size_t i = 0; i < qs.size(); ++i) {
    const auto seqs = features::build_sequences(log, idx, qs[i].q.src, qs[i].q.dst, qs[i].q.ts, cfg.channels);
    EXPECT_NEAR(par[i], model::score_pair(m, seqs), 1e-12);
  }
  // batch of one
  const auto one = score_queries(m, log, idx, std::span(qs).first(1));
  EXPECT_EQ(one[0], par[0]);
}

TEST(Scoring, HookSeesEveryPairAndErrorsPropagate) {
  const auto m = model::init_model(small_model(), 3);
  const auto log = testutil::make_log({{0, 1, 1}, {1, 2, 2}, {2, 0, 3}});
  const events::NeighborIndex idx(log);
  const std::vector<LabeledQuery> qs{{{0, 1, 4}, 1, 0}, {{0, 2, 4}, 0, 0}};
  std::atomic<int> calls{0};
  score_queries(m, log, idx, qs, 0, [&](const LabeledQuery&, std::uint64_t, features::SequencePair&) { ++calls; });
  EXPECT_EQ(calls.load(), 2);
  EXPECT_THROW(score_queries(m, log, idx, qs, 0,
                             [](const LabeledQuery&, std::uint64_t, features::SequencePair&) {
                               throw PreconditionError("boom");
                             }),
               PreconditionError);
}

// ---------------------------------------------------------------- evaluation

TEST(Evaluate, DeterministicAndDumpRecomputes) {
  const auto log = events::synth_generate({.num_nodes = 30, .num_events = 300, .seed = 5});
  const auto split = events::chronological_split(log);
  const auto m = model::init_model(small_model(), 6);
  EvalOptions o;
  o.seeds = {0, 1, 2};
  o.protocol = events::NegativeProtocol::kHistorical;
  const auto a = evaluate(m, log, split, Phase::kTest, o);
  const auto b = evaluate(m, log, split, Phase::kTest, o);
  EXPECT_EQ(a.ap, b.ap);
  EXPECT_EQ(a.auc, b.auc);
  EXPECT_EQ(a.to_json(), b.to_json());
  ASSERT_EQ(a.dumps.size(), 3u);
  EXPECT_EQ(a.num_positives, events::phase_indices(log, split, Phase::kTest).size());

  testutil::TempDir dir("dump");
  for (std::size_t s = 0; s < 3; ++s) {
    write_score_dump(a.dumps[s], dir / "d.csv");
    const auto rows = read_score_dump(dir / "d.csv");
    ASSERT_EQ(rows.size(), 2 * a.num_positives);
    std::vector<double> sc;
    std::vector<int> lb;
    for (const auto& r : rows) {
      sc.push_back(r.score);
      lb.push_back(r.label);
    }
    EXPECT_NEAR(brute_ap(sc, lb), a.ap[s], 1e-12);
    EXPECT_NEAR(brute_auc(sc, lb), a.auc[s], 1e-12);
  }
  EXPECT_NE(a.ap[0], a.ap[1]);  // negatives resampled per seed
  const auto j = a.to_json();
  EXPECT_EQ(j["protocol"], "historical");
  EXPECT_GE(j["ap_std"].get<double>(), 0.0);
}

TEST(Evaluate, ChanceLevelWhenEveryPairRepeats) {
  // Every ordered pair of 8 nodes occurs in each round, so test positives and
  // random negatives alike are repeats of training edges.
  std::vector<std::tuple<NodeId, NodeId, double>> rows;
  double ts = 0;
  for (int round = 0; round < 6; ++round) {
    for (NodeId u = 0; u < 8; ++u) {
      for (NodeId v = 0; v < 8; ++v) {
        if (u != v) rows.emplace_back(u, v, ++ts);
      }
    }
  }
  const auto log = testutil::make_log(rows);
  const auto split = events::chronological_split(log);
  EvalOptions o;
  o.seeds = {0, 1, 2, 3, 4};
  double mean = 0;
  for (std::uint64_t init = 0; init < 5; ++init) {
    const auto r = evaluate(model::init_model(small_model(), init), log, split, Phase::kTest, o);
    mean += r.ap_summary.mean / 5;
  }
  EXPECT_NEAR(mean, 0.5, 0.06);
}

TEST(Evaluate, InductiveKeepsMaskedEdgesOnly) {
  const auto log = events::synth_generate({.num_nodes = 40, .num_events = 400, .seed = 7});
  const auto split = events::chronological_split(log, {}, true, 0.2, 3);
  const Evaluator ev(log, split);
  const auto pos = ev.positives(Phase::kTest, EvalMode::kInductive);
  ASSERT_FALSE(pos.empty());
  for (const auto& q : pos) EXPECT_TRUE(split.is_masked(q.src) || split.is_masked(q.dst));
  EXPECT_LT(pos.size(), ev.positives(Phase::kTest, EvalMode::kTransductive).size());
  const auto lq = ev.labeled_queries(pos, events::NegativeProtocol::kRandom, 1);
  ASSERT_EQ(lq.size(), 2 * pos.size());
  EXPECT_EQ(lq[0].label, 1);
  EXPECT_EQ(lq[1].label, 0);
  EXPECT_EQ(lq[1].q.src, lq[0].q.src);
  EXPECT_EQ(lq[1].q.ts, lq[0].q.ts);
}

TEST(Evaluate, EmptyEvaluationSetIsMetricError) {
  const auto log = events::synth_generate({.num_nodes = 40, .num_events = 200, .seed = 8});
  const auto split = events::chronological_split(log);  // transductive, nothing masked
  const auto m = model::init_model(small_model(), 1);
  EvalOptions o;
  o.mode = EvalMode::kInductive;
  EXPECT_THROW(evaluate(m, log, split, Phase::kTest, o), MetricError);
}

// ---------------------------------------------------------------- training

TEST(Train, ZeroEpochsReturnsInit) {
  const auto log = events::synth_generate({.num_nodes = 20, .num_events = 100, .seed = 1});
  const auto split = events::chronological_split(log);
  const auto m = model::init_model(small_model(), 2);
  const auto r = train::train(log, split, quick_train(0), m, 0);
  EXPECT_TRUE(r.history.empty());
  EXPECT_TRUE(r.model.params == m.params);
  EXPECT_EQ(r.best_epoch, -1);
}

TEST(Train, ConfigValidation) {
  auto t = quick_train(3);
  t.patience = 4;
  EXPECT_THROW(t.validate(), ConfigError);
  t = quick_train(101);
  EXPECT_THROW(t.validate(), ConfigError);
  t = quick_train(3);
  t.batch_size = 0;
  EXPECT_THROW(t.validate(), ConfigError);
}

TEST(Train, DeterministicUnderSeed) {
  const auto log = events::synth_generate({.num_nodes = 20, .num_events = 100, .seed = 2});
  const auto split = events::chronological_split(log);
  auto cfg = small_model();
  cfg.dropout = 0.1;
  const auto init = model::init_model(cfg, 3);
  const auto a = train::train(log, split, quick_train(3), init, 11);
  const auto b = train::train(log, split, quick_train(3), init, 11);
  ASSERT_EQ(a.history.size(), b.history.size());
  for (std::size_t i = 0; i < a.history.size(); ++i) EXPECT_EQ(a.history[i].to_json(), b.history[i].to_json());
  EXPECT_TRUE(a.model.params == b.model.params);
  const auto c = train::train(log, split, quick_train(3), init, 12);
  EXPECT_NE(a.history[0].train_loss, c.history[0].train_loss);
}

TEST(Train, LossDecreasesOverFirstEpochsInMostSeeds) {
  const auto log = events::synth_generate({.num_nodes = 20, .num_events = 100, .shift = 0.0, .seed = 4});
  const auto split = events::chronological_split(log);
  int decreasing = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto r = train::train(log, split, quick_train(3), model::init_model(small_model(), seed), seed);
    ASSERT_EQ(r.history.size(), 3u);
    if (r.history[0].train_loss > r.history[1].train_loss && r.history[1].train_loss > r.history[2].train_loss) {
      ++decreasing;
    }
  }
  EXPECT_GE(decreasing, 4);
}

TEST(Train, EarlyStoppingKeepsBestCheckpoint) {
  const auto log = events::synth_generate({.num_nodes = 20, .num_events = 150, .seed = 9});
  const auto split = events::chronological_split(log);
  auto tc = quick_train(8);
  tc.patience = 2;
  tc.lr = 2e-2;  // aggressive so validation AP moves around
  const std::uint64_t seed = 5;
  std::vector<EpochRecord> seen;
  const auto r = train::train(log, split, tc, model::init_model(small_model(), 1), seed,
                       [&](const EpochRecord& e) { seen.push_back(e); });
  ASSERT_FALSE(r.history.empty());
  EXPECT_EQ(seen.size(), r.history.size());
  double best = -1;
  int stale = 0;
  for (const auto& e : r.history) {
    EXPECT_EQ(e.improved, e.val_ap > best);
    if (e.val_ap > best) {
      best = e.val_ap;
      stale = 0;
    } else {
      ++stale;
    }
    EXPECT_LE(e.val_ap, r.best_val_ap);
  }
  EXPECT_EQ(r.best_val_ap, best);
  EXPECT_EQ(r.history[static_cast<std::size_t>(r.best_epoch)].val_ap, best);
  if (static_cast<int>(r.history.size()) < tc.epochs) {
    EXPECT_EQ(stale, tc.patience);
  }

  // the returned parameters reproduce the best validation AP
  EvalOptions o;
  o.seeds = {Rng::derive_seed(seed, "validation")};
  EXPECT_EQ(evaluate(r.model, log, split, Phase::kVal, o).ap.front(), best);
}

TEST(Train, NonFiniteLossNamesLocation) {
  const auto log = events::synth_generate({.num_nodes = 20, .num_events = 100, .seed = 1});
  const auto split = events::chronological_split(log);
  auto m = model::init_model(small_model(), 2);
  m.params.value(m.slots.cls_b2)(0, 0) = std::nan("");
  try {
    train::train(log, split, quick_train(2), m, 0);
    FAIL() << "expected a training error";
  } catch (const TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find("epoch 0, batch 0"), std::string::npos) << e.what();
  }
}

TEST(Train, BatchGradientsSerialEqualsParallel) {
  const auto log = events::synth_generate({.num_nodes = 20, .num_events = 100, .seed = 3});
  auto cfg = small_model();
  cfg.dropout = 0.2;
  const auto m = model::init_model(cfg, 4);
  const events::NeighborIndex idx(log);
  std::vector<LabeledQuery> pairs;
  for (std::size_t i = 0; i < 40; ++i) {
    const auto& e = log[i + 50];
    pairs.push_back({{e.src, e.dst, e.ts}, 1, i});
    pairs.push_back({{e.src, static_cast<NodeId>((e.dst + 3) % 20), e.ts}, 0, i});
  }
  omp_set_num_threads(4);
  const auto a = batch_gradients(m, log, idx, pairs, 77, 8);
  const auto b = batch_gradients_serial(m, log, idx, pairs, 77, 8);
  EXPECT_EQ(a.loss_sum, b.loss_sum);
  ASSERT_EQ(a.grads.size(), b.grads.size());
  for (std::size_t i = 0; i < a.grads.size(); ++i) EXPECT_EQ(a.grads[i], b.grads[i]) << m.params.name(i);
}

TEST(Train, BatchGradientIsMeanBce) {
  const auto log = events::synth_generate({.num_nodes = 20, .num_events = 100, .seed = 3});
  auto m = model::init_model(small_model(), 4);
  const events::NeighborIndex idx(log);
  std::vector<LabeledQuery> pairs;
  for (std::size_t i = 0; i < 6; ++i) {
    const auto& e = log[i + 60];
    pairs.push_back({{e.src, e.dst, e.ts}, static_cast<int>(i % 2), i});
  }
  const auto bg = batch_gradients(m, log, idx, pairs, 1, 3);
  auto mean_loss = [&]() {
    double s = 0;
    for (const auto& p : pairs) {
      const auto seqs = features::build_sequences(log, idx, p.q.src, p.q.dst, p.q.ts, m.cfg.channels);
      s += bce_loss(model::score_pair(m, seqs), p.label);
    }
    return s / static_cast<double>(pairs.size());
  };
  EXPECT_NEAR(bg.loss_sum / static_cast<double>(pairs.size()), mean_loss(), 1e-12);
  const std::size_t slot = m.slots.cls_w1;
  const auto num = testutil::numeric_gradient(mean_loss, m.params.value(slot), 1e-4);
  EXPECT_LT(testutil::rel_error(bg.grads[slot], num), 1e-6);
}

TEST(Train, SourceEmbeddingsMatchEncodeNode) {
  const auto log = events::synth_generate({.num_nodes = 20, .num_events = 100, .seed = 3});
  const auto m = model::init_model(small_model(), 4);
  const events::NeighborIndex idx(log);
  const std::vector<std::size_t> which{10, 50, 99};
  const auto emb = source_embeddings(m, log, idx, which);
  ASSERT_EQ(emb.rows(), 3);
  for (int r = 0; r < 3; ++r) {
    const auto& e = log[which[static_cast<std::size_t>(r)]];
    const auto seqs = features::build_sequences(log, idx, e.src, e.dst, e.ts, m.cfg.channels);
    tensor::Tape t(false);
    model::Forward f(t, m);
    EXPECT_EQ(tensor::Matrix(emb.row(r)), t.value(f.encode_node(seqs.src)));
  }
}
