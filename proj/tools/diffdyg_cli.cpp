// diffdyg: synth / train / eval / diagnose / ablate.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <spdlog/spdlog.h>
#ifdef _OPENMP
#include <omp.h>
#endif

#include "CLI11.hpp"
#include "json.hpp"

#include "diffdyg/config.hpp"
#include "diffdyg/diagnostics.hpp"
#include "diffdyg/error.hpp"
#include "diffdyg/event_store.hpp"
#include "diffdyg/model.hpp"
#include "diffdyg/trainer.hpp"

namespace fs = std::filesystem;
using namespace diffdyg;

namespace {

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string mode, protocol, attention, out, events, nodes, checkpoint;
  std::optional<int> hops;
  std::optional<double> retention;
  std::vector<std::string> sets;
};

void add_flags(CLI::App* app, Flags& f, bool with_retention = false) {
  app->add_option("--config", f.config, "key = value config file");
  app->add_option("--seed", f.seed, "root seed");
  app->add_option("--mode", f.mode, "transductive | inductive")->check(CLI::IsMember({"transductive", "inductive"}));
  app->add_option("--protocol", f.protocol, "random | historical | inductive")
      ->check(CLI::IsMember({"random", "historical", "inductive"}));
  app->add_option("--attention", f.attention, "differential | standard")
      ->check(CLI::IsMember({"differential", "standard"}));
  app->add_option("--hops", f.hops, "1 | 2")->check(CLI::IsMember({1, 2}));
  app->add_option("--out", f.out, "output directory");
  app->add_option("--events", f.events, "event CSV");
  app->add_option("--nodes", f.nodes, "node feature CSV");
  app->add_option("--checkpoint", f.checkpoint, "checkpoint prefix");
  app->add_option("--set", f.sets, "extra key=value overrides")->take_all();
  if (with_retention) app->add_option("--retention", f.retention, "single retention ratio");
}

config::RunConfig resolve(const Flags& f, const std::string& command) {
  config::RunConfig cfg;
  if (!f.config.empty()) config::apply_file(cfg, f.config);
  for (const auto& kv : f.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    config::set_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (f.seed) cfg.seed = *f.seed;
  if (!f.mode.empty()) config::set_value(cfg, "split.mode", f.mode);
  if (!f.protocol.empty()) config::set_value(cfg, "train.protocol", f.protocol);
  if (!f.attention.empty()) config::set_value(cfg, "model.attention", f.attention);
  if (f.hops) cfg.model.channels.hops = *f.hops;
  if (!f.out.empty()) cfg.out = f.out;
  if (!f.events.empty()) cfg.events = f.events;
  if (!f.nodes.empty()) cfg.nodes = f.nodes;
  if (!f.checkpoint.empty()) cfg.checkpoint = f.checkpoint;
  if (f.retention) cfg.retention = {*f.retention};
  cfg.finalize();

  spdlog::set_level(spdlog::level::from_str(cfg.log_level));
#ifdef _OPENMP
  if (cfg.threads > 0) omp_set_num_threads(cfg.threads);
#endif
  fs::create_directories(cfg.out);
  config::write_resolved(cfg, cfg.out, "resolved_" + command + ".toml");
  return cfg;
}

events::EventLog load_log(const config::RunConfig& cfg) {
  if (cfg.events.empty()) throw ConfigError("data.events (or --events) is required");
  return events::load_events(cfg.events, cfg.nodes.empty() ? std::nullopt : std::optional<fs::path>(cfg.nodes));
}

events::SplitSpec make_split(const config::RunConfig& cfg, const events::EventLog& log) {
  return events::chronological_split(log, cfg.ratios, cfg.train.mode == train::EvalMode::kInductive,
                                     cfg.mask_fraction, cfg.seed);
}

model::Model load_checked(const config::RunConfig& cfg, const events::EventLog& log) {
  auto m = model::load_model(cfg.checkpoint_prefix());
  if (static_cast<std::size_t>(m.cfg.node_dim) != log.node_feat_dim() ||
      static_cast<std::size_t>(m.cfg.edge_dim) != log.edge_feat_dim()) {
    throw SchemaError("checkpoint feature widths do not match the event log");
  }
  return m;
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

train::EvalOptions eval_options(const config::RunConfig& cfg) {
  train::EvalOptions o;
  o.protocol = cfg.train.protocol;
  o.mode = cfg.train.mode;
  o.seeds = cfg.train.seeds;
  o.dataset = cfg.dataset;
  return o;
}

int cmd_synth(const Flags& f) {
  const auto cfg = resolve(f, "synth");
  const auto log = events::synth_generate(cfg.synth);
  const fs::path path = fs::path(cfg.out) / "events.csv";
  events::write_events(log, path);
  spdlog::info("wrote {} interactions over {} nodes to {}", log.size(), log.num_nodes(), path.string());
  return 0;
}

int cmd_train(const Flags& f) {
  auto cfg = resolve(f, "train");
  const auto log = load_log(cfg);
  const auto split = make_split(cfg, log);
  cfg.model.node_dim = static_cast<int>(log.node_feat_dim());
  cfg.model.edge_dim = static_cast<int>(log.edge_feat_dim());

  std::ofstream history(fs::path(cfg.out) / "history.jsonl");
  if (!history) throw IoError("cannot write history");
  auto result = train::train(log, split, cfg.train, model::init_model(cfg.model, cfg.seed), cfg.seed,
                             [&](const train::EpochRecord& r) { history << r.to_json().dump() << '\n' << std::flush; });
  nlohmann::json meta{{"seed", cfg.seed}, {"best_epoch", result.best_epoch}, {"best_val_ap", result.best_val_ap}};
  model::save_model(result.model, cfg.checkpoint_prefix(), meta);
  write_json(fs::path(cfg.out) / "train_summary.json",
             {{"epochs_run", result.history.size()},
              {"best_epoch", result.best_epoch},
              {"best_val_ap", result.best_val_ap},
              {"checkpoint", cfg.checkpoint_prefix().string()}});
  return 0;
}

int cmd_eval(const Flags& f) {
  const auto cfg = resolve(f, "eval");
  const auto log = load_log(cfg);
  const auto split = make_split(cfg, log);
  const auto m = load_checked(cfg, log);
  const train::Evaluator evaluator(log, split);
  const auto rep = evaluator.evaluate(m, events::Phase::kTest, eval_options(cfg));
  auto j = rep.to_json();
  j["checkpoint"] = cfg.checkpoint_prefix().string();
  write_json(fs::path(cfg.out) / "report.json", j);
  for (std::size_t s = 0; s < rep.seeds.size(); ++s) {
    train::write_score_dump(rep.dumps[s], fs::path(cfg.out) / ("scores_seed" + std::to_string(rep.seeds[s]) + ".csv"));
  }
  spdlog::info("test AP {:.4f} +- {:.4f}, AUC {:.4f}", rep.ap_summary.mean, rep.ap_summary.std,
               rep.auc_summary.mean);
  return 0;
}

int cmd_diagnose(const Flags& f) {
  const auto cfg = resolve(f, "diagnose");
  const auto log = load_log(cfg);
  const auto split = make_split(cfg, log);
  const auto m = load_checked(cfg, log);
  const fs::path out(cfg.out);

  const auto shift = diag::measure_shift(m, log, split, cfg.mmd_points, cfg.seed);
  write_json(out / "shift.json", shift.to_json());

  const train::Evaluator evaluator(log, split);
  const auto queries = evaluator.positives(events::Phase::kTest, cfg.train.mode);
  diag::AttentionStatsOptions opts;
  opts.layer = cfg.attention_layer;
  opts.all_layers = cfg.attention_all_layers;
  opts.k_frac = cfg.k_frac;
  opts.eps = cfg.attention_eps;
  opts.thresholds = cfg.thresholds;
  const auto stats = diag::attention_statistics(m, log, evaluator.index(), queries, opts);
  diag::write_attention_csv(stats, out / "attention.csv");
  auto summary = stats.to_json();
  summary["shift"] = shift.to_json();
  summary["k_frac"] = cfg.k_frac;
  write_json(out / "attention_summary.json", summary);

  for (std::size_t i = 0; i < std::min(cfg.dump_queries, queries.size()); ++i) {
    const auto& q = queries[i];
    const auto seqs = features::build_sequences(log, evaluator.index(), q.src, q.dst, q.ts, m.cfg.channels);
    model::AttentionRecord rs, rd;
    model::score_pair(m, seqs, &rs, &rd);
    diag::write_attention_dump(rs, out / "attention", "query" + std::to_string(i) + "_src");
    diag::write_attention_dump(rd, out / "attention", "query" + std::to_string(i) + "_dst");
  }
  spdlog::info("MMD {:.5f}; last-layer entropy {:.4f}, critical mass {:.4f}, top-k {:.4f}", shift.mmd.value,
               stats.entropy, stats.critical_mass, stats.topk_prop);
  return 0;
}

int cmd_ablate(const Flags& f) {
  const auto cfg = resolve(f, "ablate");
  const auto log = load_log(cfg);
  const auto split = make_split(cfg, log);
  const auto m = load_checked(cfg, log);
  const train::Evaluator evaluator(log, split);
  const auto opts = eval_options(cfg);

  std::ofstream csv(fs::path(cfg.out) / "ablation.csv");
  if (!csv) throw IoError("cannot write ablation.csv");
  csv.precision(17);
  csv << "mask_mode,retention,seed,ap,auc\n";
  nlohmann::json summary = nlohmann::json::array();
  for (auto mode : {diag::MaskMode::kCritical, diag::MaskMode::kRandom}) {
    for (double r : cfg.retention) {
      const auto rep = diag::masked_evaluate(m, evaluator, mode, r, opts, cfg.thresholds);
      for (std::size_t s = 0; s < rep.seeds.size(); ++s) {
        csv << diag::to_string(mode) << ',' << r << ',' << rep.seeds[s] << ',' << rep.ap[s] << ',' << rep.auc[s]
            << '\n';
      }
      summary.push_back({{"mask_mode", std::string(diag::to_string(mode))},
                         {"retention", r},
                         {"ap_mean", rep.ap_summary.mean},
                         {"ap_std", rep.ap_summary.std}});
      spdlog::info("{} retention {:.2f}: AP {:.4f}", diag::to_string(mode), r, rep.ap_summary.mean);
    }
  }
  write_json(fs::path(cfg.out) / "ablation.json", summary);
  return 0;
}

void emit_error(std::string_view kind, const std::string& message, std::optional<std::size_t> line = {}) {
  nlohmann::json j{{"error", kind}, {"message", message}};
  if (line) j["line"] = *line;
  std::cerr << j.dump() << std::endl;
}

}  // namespace

int main(int argc, char** argv) {
  spdlog::set_pattern("[%H:%M:%S.%e] [%l] %v");
  CLI::App app{"dynamic-graph link prediction with differential attention"};
  app.require_subcommand(1);
  Flags flags;
  struct Cmd {
    const char* name;
    const char* help;
    int (*run)(const Flags&);
  };
  const Cmd cmds[] = {{"synth", "generate a synthetic shifted event log", cmd_synth},
                      {"train", "train and checkpoint a model", cmd_train},
                      {"eval", "evaluate a checkpoint on the test window", cmd_eval},
                      {"diagnose", "shift measurement and attention statistics", cmd_diagnose},
                      {"ablate", "critical / random masking sweep", cmd_ablate}};
  for (const auto& c : cmds) {
    auto* sub = app.add_subcommand(c.name, c.help);
    add_flags(sub, flags, std::string_view(c.name) == "ablate");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    emit_error("usage", e.what());
    return e.get_exit_code() != 0 ? e.get_exit_code() : 2;
  }

  try {
    for (const auto& c : cmds) {
      if (app.got_subcommand(c.name)) return c.run(flags);
    }
  } catch (const ParseError& e) {
    emit_error(e.kind(), e.what(), e.line());
  } catch (const OrderingError& e) {
    emit_error(e.kind(), e.what(), e.line());
  } catch (const Error& e) {
    emit_error(e.kind(), e.what());
  } catch (const std::exception& e) {
    emit_error("internal", e.what());
  }
  return 1;
}
