#pragma once

// Flat key = value run configuration. `[section]` headers prefix the keys
// that follow them ("[train]\nlr = 1e-3" is "train.lr = 1e-3").

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "diffdyg/diagnostics.hpp"
#include "diffdyg/event_store.hpp"
#include "diffdyg/model.hpp"
#include "diffdyg/trainer.hpp"

namespace diffdyg::config {

struct RunConfig {
  std::uint64_t seed = 0;
  std::string out = "run";
  std::string log_level = "info";
  int threads = 0;  // 0: OpenMP default

  // data
  std::string events;
  std::string nodes;
  std::string dataset = "synthetic";
  std::string checkpoint;  // prefix; defaults to <out>/checkpoint

  events::SynthOptions synth;
  events::SplitRatios ratios;
  double mask_fraction = 0.1;

  model::ModelConfig model;
  train::TrainConfig train;

  diag::CriticalThresholds thresholds;
  double k_frac = 0.05;
  double attention_eps = 1e-8;
  int attention_layer = -1;
  bool attention_all_layers = false;
  std::size_t mmd_points = 500;
  std::vector<double> retention{1.0, 0.75, 0.5, 0.25, 0.0};
  std::size_t dump_queries = 1;

  // Fills derived settings (K2 = 5 when two hops are on and K2 is unset) and validates.
  void finalize();
  std::filesystem::path checkpoint_prefix() const;
};

// Sets one key; throws ConfigError on an unknown key or a bad value.
void set_value(RunConfig& cfg, std::string_view key, std::string_view value);
void apply_text(RunConfig& cfg, std::string_view text);
void apply_file(RunConfig& cfg, const std::filesystem::path& path);

std::vector<std::string> known_keys();
std::string format_config(const RunConfig& cfg);
// Writes <dir>/<file_name>.
void write_resolved(const RunConfig& cfg, const std::filesystem::path& dir,
                    const std::string& file_name = "resolved_config.toml");

}  // namespace diffdyg::config
