// Acceptance run: one PASS/FAIL line per criterion, exit status 1 when any
// gating criterion fails.

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <iostream>
#include <set>
#include <string>
#include <tuple>
#include <unordered_map>
#include <vector>

#include <fmt/core.h>
#include <spdlog/spdlog.h>

#include "diffdyg/diagnostics.hpp"
#include "diffdyg/error.hpp"
#include "diffdyg/model.hpp"
#include "diffdyg/trainer.hpp"

using namespace diffdyg;
using model::AttentionKind;
using tensor::Mask;
using tensor::Matrix;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void report(int id, const std::string& name, bool gating, const std::function<Outcome()>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (!o.pass && gating) ++failures;
  std::cout << fmt::format("{} [{:2d}] {} ({:.1f}s): {}", o.pass ? "PASS" : "FAIL", id, name, secs, o.detail)
            << std::endl;
}

Matrix random_matrix(Rng& rng, int r, int c) {
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

double rel_error(const Matrix& a, const Matrix& n) {
  const double scale = std::max(a.norm(), n.norm());
  return scale == 0.0 ? 0.0 : (a - n).norm() / scale;
}

// ---------------------------------------------------------------- 1

Outcome gradient_fidelity() {
  double worst = 0, fine_worst = 0;
  std::string worst_name;
  for (auto kind : {AttentionKind::kDifferential, AttentionKind::kStandard}) {
    model::ModelConfig cfg;
    cfg.channels.d = 4;
    cfg.channels.d_T = 4;
    cfg.channels.d_C = 4;
    cfg.channels.K = 4;
    cfg.layers = 1;
    cfg.heads = 1;
    cfg.d_attn = 3;
    cfg.dropout = 0.0;
    cfg.attention = kind;
    cfg.node_dim = 2;
    cfg.edge_dim = 2;
    Rng rng(1);
    std::vector<events::Interaction> ev;
    for (int i = 0; i < 40; ++i) {
      events::Interaction e;
      e.src = static_cast<events::NodeId>(rng.uniform_index(8));
      e.dst = static_cast<events::NodeId>(rng.uniform_index(8));
      e.ts = 1.0 + i;
      e.edge_feat = {rng.normal(), rng.normal()};
      ev.push_back(e);
    }
    std::unordered_map<events::NodeId, std::vector<double>> nf;
    for (events::NodeId n = 0; n < 8; ++n) nf[n] = {rng.normal(), rng.normal()};
    const events::EventLog log(std::move(ev), 8, 2, 2, std::move(nf));
    const events::NeighborIndex idx(log);
    auto m = model::init_model(cfg, 2);

    for (const auto& [u, v, label] : {std::tuple{0, 1, 1.0}, std::tuple{2, 5, 0.0}}) {
      const auto pair = features::build_sequences(log, idx, u, v, 35.5, cfg.channels);
      tensor::Tape t;
      model::Forward f(t, m);
      t.backward(t.bce(f.pair_probability(pair), label));
      auto grads = tensor::zero_gradients(m.params);
      t.accumulate_param_grads(m.params, grads, kind == AttentionKind::kDifferential);
      auto value = [&]() {
        tensor::Tape tt(false);
        model::Forward ff(tt, m);
        return tt.scalar(tt.bce(ff.pair_probability(pair), label));
      };
      auto central = [&](Matrix& x, double h) {
        Matrix num(x.rows(), x.cols());
        for (Eigen::Index k = 0; k < x.size(); ++k) {
          const double keep = x.data()[k];
          x.data()[k] = keep + h;
          const double up = value();
          x.data()[k] = keep - h;
          const double down = value();
          x.data()[k] = keep;
          num.data()[k] = (up - down) / (2 * h);
        }
        return num;
      };
      for (std::size_t i = 0; i < m.params.size(); ++i) {
        const double err = rel_error(grads[i], central(m.params.value(i), 1e-3));
        fine_worst = std::max(fine_worst, rel_error(grads[i], central(m.params.value(i), 1e-5)));
        if (err > worst) {
          worst = err;
          worst_name = std::string(model::to_string(kind)) + "/" + m.params.name(i);
        }
      }
    }
  }
  return {worst < 1e-4, fmt::format("h=1e-3: max relative error {:.3e} at {} (tol 1e-4); same check at h=1e-5: {:.3e}",
                                    worst, worst_name, fine_worst)};
}

// ---------------------------------------------------------------- 2

Outcome attention_reductions() {
  model::ModelConfig cfg;
  cfg.channels.d = 4;
  cfg.channels.d_T = 4;
  cfg.channels.d_C = 4;
  cfg.channels.K = 6;
  cfg.layers = 2;
  cfg.heads = 2;
  cfg.d_attn = 5;
  cfg.dropout = 0.0;
  Rng rng(3);
  double lambda_zero = 0;
  for (int trial = 0; trial < 20; ++trial) {
    auto diff = model::init_model(cfg, static_cast<std::uint64_t>(trial));
    for (const auto& ls : diff.slots.layers) diff.params.value(ls.lambda).setZero();
    auto scfg = cfg;
    scfg.attention = AttentionKind::kStandard;
    const auto stdm = model::bind_model(scfg, diff.params);
    const Matrix z = random_matrix(rng, cfg.channels.num_rows(), cfg.width());
    Mask mask(static_cast<std::size_t>(z.rows()), 1);
    mask.back() = 0;
    for (int l = 0; l < cfg.layers; ++l) {
      tensor::Tape t1(false), t2(false);
      model::Forward f1(t1, diff), f2(t2, stdm);
      const Matrix a = t1.value(f1.attention(t1.constant(z), l, mask).pre_projection);
      const Matrix b = t2.value(f2.attention(t2.constant(z), l, mask).pre_projection);
      lambda_zero = std::max(lambda_zero, (a - b).cwiseAbs().maxCoeff());
    }
  }

  double tied = 0;
  for (int trial = 0; trial < 20; ++trial) {
    auto m = model::init_model(cfg, 100 + static_cast<std::uint64_t>(trial));
    const int da = cfg.d_attn;
    for (const auto& ls : m.slots.layers) {
      for (std::size_t w : {ls.wq, ls.wk}) {
        Matrix& W = m.params.value(w);
        for (int h = 0; h < cfg.heads; ++h) W.middleCols(h * 2 * da + da, da) = W.middleCols(h * 2 * da, da);
      }
      m.params.value(ls.lambda).setOnes();
    }
    const Matrix z = random_matrix(rng, cfg.channels.num_rows(), cfg.width());
    const Mask mask(static_cast<std::size_t>(z.rows()), 1);
    for (int l = 0; l < cfg.layers; ++l) {
      tensor::Tape t(false);
      model::Forward f(t, m);
      tied = std::max(tied, t.value(f.attention(t.constant(z), l, mask).pre_projection).cwiseAbs().maxCoeff());
    }
  }
  return {lambda_zero <= 1e-12 && tied == 0.0,
          fmt::format("lambda=0 max diff {:.2e} (tol 1e-12); tied branches max |out| {:.1e} (must be 0)", lambda_zero,
                      tied)};
}

// ---------------------------------------------------------------- 3

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

Outcome metric_oracles() {
  Rng rng(5);
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + rng.uniform_index(19);
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = trial % 2 ? rng.uniform() : static_cast<double>(rng.uniform_index(5)) / 4.0;
      y[i] = rng.bernoulli(0.5);
    }
    y[0] = 1;
    y[1] = 0;
    worst = std::max(worst, std::abs(train::average_precision(s, y) - brute_ap(s, y)));
    worst = std::max(worst, std::abs(train::auc_roc(s, y) - brute_auc(s, y)));
  }
  const std::vector<double> ws{0.9, 0.8, 0.7};
  const std::vector<int> wy{1, 0, 1};
  const double ap = train::average_precision(ws, wy), auc = train::auc_roc(ws, wy);
  const bool worked = std::abs(ap - 5.0 / 6.0) <= 1e-12 && std::abs(auc - 0.5) <= 1e-12;
  return {worst <= 1e-12 && worked,
          fmt::format("max brute-force diff {:.1e}; worked AP {:.6f}, AUC {:.6f}", worst, ap, auc)};
}

// ---------------------------------------------------------------- 4

Outcome critical_oracle() {
  Rng rng(7);
  std::size_t queries = 0, mismatches = 0, nonempty = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t nodes = 4 + rng.uniform_index(27);
    const std::size_t count = 5 + rng.uniform_index(76);
    std::vector<events::Interaction> ev;
    double ts = 0;
    for (std::size_t i = 0; i < count; ++i) {
      events::Interaction e;
      e.src = static_cast<events::NodeId>(rng.uniform_index(nodes));
      e.dst = static_cast<events::NodeId>(rng.uniform_index(nodes));
      ts += static_cast<double>(rng.uniform_index(3));
      e.ts = ts;
      ev.push_back(e);
    }
    const events::EventLog log(std::move(ev), nodes, 0, 0, {});
    const events::NeighborIndex idx(log);
    const diag::CriticalThresholds th{static_cast<int>(1 + rng.uniform_index(3)),
                                      static_cast<int>(1 + rng.uniform_index(3))};
    for (int q = 0; q < 5; ++q) {
      const auto u = static_cast<events::NodeId>(rng.uniform_index(nodes));
      const auto v = static_cast<events::NodeId>(rng.uniform_index(nodes));
      const double t = rng.uniform(0.0, ts + 1.0);

      std::set<events::NodeId> cand;
      for (const auto& e : log.interactions()) {
        if (e.ts >= t) continue;
        if (e.src == u || e.src == v) cand.insert(e.dst);
        if (e.dst == u || e.dst == v) cand.insert(e.src);
      }
      cand.erase(u);
      cand.erase(v);
      auto pair_count = [&](events::NodeId a, events::NodeId b) {
        int c = 0;
        for (const auto& e : log.interactions()) {
          if (e.ts < t && ((e.src == a && e.dst == b) || (e.src == b && e.dst == a))) ++c;
        }
        return c;
      };
      auto endpoint_count = [&](events::NodeId w) {
        int c = 0;
        for (const auto& e : log.interactions()) {
          if (e.ts < t && ((e.src == w && (e.dst == u || e.dst == v)) || (e.dst == w && (e.src == u || e.src == v)))) ++c;
        }
        return c;
      };
      std::set<events::NodeId> expected;
      for (auto w : cand) {
        int partners = 0;
        bool repeated = false;
        for (auto x : cand) {
          if (x == w) continue;
          const int pc = pair_count(w, x);
          partners += pc > 0;
          repeated = repeated || (pc >= 2 && endpoint_count(w) >= th.temporal && endpoint_count(x) >= th.temporal);
        }
        if (partners >= th.structural || repeated) expected.insert(w);
      }
      const auto got = diag::find_critical(idx, u, v, t, th);
      ++queries;
      nonempty += !expected.empty();
      if (std::set<events::NodeId>(got.critical.begin(), got.critical.end()) != expected) ++mismatches;
    }
  }
  return {mismatches == 0,
          fmt::format("{} queries on 200 logs, {} with critical nodes, {} mismatches", queries, nonempty, mismatches)};
}

// ---------------------------------------------------------------- 5

Matrix row(std::initializer_list<double> v) {
  Matrix m(1, static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) m(0, i++) = x;
  return m;
}

Outcome dispersion_metrics() {
  std::vector<std::string> bad;
  const double h8 = diag::attention_entropy(Matrix::Constant(1, 8, 0.125));
  if (std::abs(h8 - std::log(8.0)) > 1e-9) bad.push_back("uniform entropy");
  if (std::abs(diag::attention_entropy(row({0.5, 0.5, 0, 0})) - std::log(2.0)) > 1e-12) bad.push_back("two-term entropy");

  const Matrix pn = diag::positive_normalized(row({0.5, -0.2, 0.1}));
  if (std::abs(pn(0, 0) - 0.8333) > 1e-4 || pn(0, 1) != 0.0 || std::abs(pn(0, 2) - 0.1667) > 1e-4) {
    bad.push_back("positive_normalized example");
  }
  Rng rng(9);
  for (int trial = 0; trial < 200; ++trial) {
    const Matrix b = random_matrix(rng, 3, 7) * 0.3;
    const Matrix p = diag::positive_normalized(b);
    for (int r = 0; r < p.rows(); ++r) {
      const double s = p.row(r).sum();
      const double mass = b.row(r).cwiseMax(0.0).sum();
      const double expected = mass == 0.0 ? 0.0 : mass / (mass + 1e-8);
      if (p.row(r).minCoeff() < 0.0 || std::abs(s - expected) > 1e-12) {
        bad.push_back("positive_normalized row property");
        trial = 200;
        break;
      }
    }
  }

  const std::vector<events::NodeId> ids3{0, 1, 2};
  const Matrix r3 = row({0.6, 0.3, 0.1});
  if (std::abs(diag::critical_mass(r3, ids3, {0, 2}) - 0.7) > 1e-12) bad.push_back("critical mass 0.7");
  if (std::abs(diag::critical_mass(r3, ids3, {0, 1, 2}) - 1.0) > 1e-12) bad.push_back("critical mass all");
  if (diag::critical_mass(r3, ids3, {}) != 0.0) bad.push_back("critical mass empty");

  std::vector<events::NodeId> ids10(10), ids20(20);
  for (int i = 0; i < 20; ++i) {
    if (i < 10) ids10[static_cast<std::size_t>(i)] = i;
    ids20[static_cast<std::size_t>(i)] = i;
  }
  Matrix r10 = Matrix::Constant(1, 10, 0.05);
  r10(0, 4) = 0.55;
  if (diag::topk_critical_proportion(r10, ids10, {4}) != 1.0) bad.push_back("top-k single critical slot");
  if (diag::topk_critical_proportion(r10, ids10, {}) != 0.0) bad.push_back("top-k empty set");
  Matrix r20 = Matrix::Constant(1, 20, 0.04);
  r20(0, 13) = 0.24;
  if (diag::topk_critical_proportion(r20, ids20, {0, 1, 2, 5, 8}) != 0.0) bad.push_back("top-k max on non-critical");

  std::string detail = fmt::format("uniform-8 entropy {:.12f} vs ln 8 {:.12f}", h8, std::log(8.0));
  for (const auto& b : bad) detail += "; failed: " + b;
  return {bad.empty(), detail};
}

// ---------------------------------------------------------------- 6

Outcome mmd_behavior() {
  Rng rng(11);
  const Matrix x = random_matrix(rng, 200, 2);
  const double same = diag::mmd(x, x).value;
  const Matrix noise = random_matrix(rng, 200, 2);
  std::vector<double> v;
  for (double delta : {0.0, 1.0, 2.0}) v.push_back(diag::mmd(x, Matrix(noise.array() + delta)).value);
  const bool increasing = v[0] < v[1] && v[1] < v[2];
  return {std::abs(same) <= 1e-9 && increasing,
          fmt::format("identical {:.1e}; offsets 0/1/2 -> {:.4f} / {:.4f} / {:.4f}", same, v[0], v[1], v[2])};
}

// ---------------------------------------------------------------- 7-9

model::ModelConfig desk_model(AttentionKind kind) {
  model::ModelConfig c;
  c.channels.d = 8;
  c.channels.d_T = 16;
  c.channels.d_C = 8;
  c.channels.K = 10;
  c.channels.cooc_self_row = true;
  c.layers = 2;
  c.heads = 2;
  c.d_attn = 10;
  c.attention = kind;
  return c;
}

train::TrainConfig desk_train(std::uint64_t seed) {
  train::TrainConfig t;
  t.epochs = 10;
  t.patience = 5;
  t.batch_size = 50;
  t.lr = 5e-3;
  t.seeds = {seed};
  return t;
}

struct Run {
  double test_ap = 0.0;
  double entropy = 0.0;
  double critical_ap = 0.0;
  double random_ap = 0.0;
  double mmd = 0.0;
};

struct ShiftExperiment {
  // [shift][kind][seed]
  Run runs[2][2][3];
  double seconds = 0.0;
};

ShiftExperiment run_shift_experiment() {
  ShiftExperiment ex;
  const auto t0 = std::chrono::steady_clock::now();
  for (int shift = 0; shift < 2; ++shift) {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      events::SynthOptions so;
      so.num_nodes = 100;
      so.num_events = 1500;
      so.shift = shift;
      so.seed = seed;
      const auto log = events::synth_generate(so);
      const auto split = events::chronological_split(log);
      const train::Evaluator evaluator(log, split);
      train::EvalOptions eo;
      eo.seeds = {seed};
      for (int k = 0; k < 2; ++k) {
        const auto kind = k == 0 ? AttentionKind::kDifferential : AttentionKind::kStandard;
        auto cfg = desk_model(kind);
        cfg.node_dim = static_cast<int>(log.node_feat_dim());
        cfg.edge_dim = static_cast<int>(log.edge_feat_dim());
        const auto result = train::train(log, split, desk_train(seed), model::init_model(cfg, seed), seed);
        Run& r = ex.runs[shift][k][seed];
        r.test_ap = evaluator.evaluate(result.model, events::Phase::kTest, eo).ap_summary.mean;
        r.mmd = diag::measure_shift(result.model, log, split, 500, seed).mmd.value;
        if (shift == 1) {
          const auto queries = evaluator.positives(events::Phase::kTest, train::EvalMode::kTransductive);
          r.entropy = diag::attention_statistics(result.model, log, evaluator.index(), queries).entropy;
          r.critical_ap =
              diag::masked_evaluate(result.model, evaluator, diag::MaskMode::kCritical, 0.0, eo).ap_summary.mean;
          r.random_ap =
              diag::masked_evaluate(result.model, evaluator, diag::MaskMode::kRandom, 0.0, eo).ap_summary.mean;
        }
        std::cout << fmt::format("  run shift={} seed={} {:12s} test AP {:.4f}", shift, seed, model::to_string(kind),
                                 r.test_ap);
        if (shift == 1) {
          std::cout << fmt::format("  entropy {:.4f}  AP@crit0 {:.4f}  AP@rand0 {:.4f}", r.entropy, r.critical_ap,
                                   r.random_ap);
        }
        std::cout << std::endl;
      }
    }
  }
  ex.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return ex;
}

double mean3(const ShiftExperiment& ex, int shift, int kind, double Run::*field) {
  double s = 0;
  for (int seed = 0; seed < 3; ++seed) s += ex.runs[shift][kind][seed].*field;
  return s / 3.0;
}

// ---------------------------------------------------------------- 10

Outcome uci_benchmark(const char* path) {
  const auto log = events::load_events(path);
  const auto split = events::chronological_split(log);
  auto cfg = desk_model(AttentionKind::kDifferential);
  cfg.channels.K = 20;
  cfg.node_dim = static_cast<int>(log.node_feat_dim());
  cfg.edge_dim = static_cast<int>(log.edge_feat_dim());
  auto tc = desk_train(0);
  tc.batch_size = 200;
  const auto result = train::train(log, split, tc, model::init_model(cfg, 0), 0);
  train::EvalOptions eo;
  eo.seeds = {0};
  const double ap = train::Evaluator(log, split).evaluate(result.model, events::Phase::kTest, eo).ap_summary.mean;
  return {ap >= 0.90, fmt::format("{} events, test AP {:.4f} (target >= 0.90)", log.size(), ap)};
}

}  // namespace

int main() {
  spdlog::set_level(spdlog::level::warn);

  report(1, "gradient fidelity", true, gradient_fidelity);
  report(2, "attention reductions", true, attention_reductions);
  report(3, "metric oracles", true, metric_oracles);
  report(4, "critical-node oracle", true, critical_oracle);
  report(5, "dispersion metrics", true, dispersion_metrics);
  report(6, "MMD behavior", true, mmd_behavior);

  std::cout << "  training shift experiment: 2 shifts x 3 seeds x 2 attention kinds" << std::endl;
  ShiftExperiment ex;
  std::string experiment_error;
  try {
    ex = run_shift_experiment();
  } catch (const std::exception& e) {
    experiment_error = e.what();
  }
  auto guarded = [&](std::function<Outcome()> f) {
    return [&experiment_error, f]() -> Outcome {
      if (!experiment_error.empty()) return {false, "experiment failed: " + experiment_error};
      return f();
    };
  };

  report(7, "shift-trend experiment", true, guarded([&]() -> Outcome {
           const double d1 = mean3(ex, 1, 0, &Run::test_ap), s1 = mean3(ex, 1, 1, &Run::test_ap);
           const double d0 = mean3(ex, 0, 0, &Run::test_ap), s0 = mean3(ex, 0, 1, &Run::test_ap);
           const bool ok = d1 >= s1 && std::abs(d0 - s0) < 0.05 && ex.seconds <= 600.0;
           return {ok, fmt::format("shift=1 AP diff {:.4f} vs std {:.4f}; shift=0 AP diff {:.4f} vs std {:.4f} "
                                   "(|gap| {:.4f} < 0.05); {:.0f}s of 600s",
                                   d1, s1, d0, s0, std::abs(d0 - s0), ex.seconds)};
         }));
  report(8, "attention-focus trend", true, guarded([&]() -> Outcome {
           const double d = mean3(ex, 1, 0, &Run::entropy), s = mean3(ex, 1, 1, &Run::entropy);
           return {d <= s, fmt::format("last-layer entropy diff {:.4f} vs std {:.4f}", d, s)};
         }));
  report(9, "ablation-gap trend", true, guarded([&]() -> Outcome {
           const double c = mean3(ex, 1, 0, &Run::critical_ap), r = mean3(ex, 1, 0, &Run::random_ap);
           return {c <= r, fmt::format("differential AP critical-retention 0 {:.4f} vs random-retention 0 {:.4f} "
                                       "(standard: {:.4f} vs {:.4f})",
                                       c, r, mean3(ex, 1, 1, &Run::critical_ap), mean3(ex, 1, 1, &Run::random_ap))};
         }));
  if (experiment_error.empty()) {
    std::cout << fmt::format("  info: trained-encoder MMD shift=0 {:.4f} vs shift=1 {:.4f} (differential)",
                             mean3(ex, 0, 0, &Run::mmd), mean3(ex, 1, 0, &Run::mmd))
              << std::endl;
  }

  if (const char* uci = std::getenv("DIFFDYG_UCI_EVENTS")) {
    report(10, "UCI benchmark (non-gating)", false, [uci]() { return uci_benchmark(uci); });
  } else {
    std::cout << "SKIP [10] UCI benchmark (non-gating): set DIFFDYG_UCI_EVENTS to an event CSV to run" << std::endl;
  }

  std::cout << (failures == 0 ? "acceptance: all gating criteria passed"
                              : fmt::format("acceptance: {} gating criteria failed", failures))
            << std::endl;
  return failures == 0 ? 0 : 1;
}
