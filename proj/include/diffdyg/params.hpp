#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "diffdyg/tensor.hpp"

namespace diffdyg::tensor {

// Named, ordered collection of learnable matrices.
class ParamStore {
 public:
  std::size_t add(std::string name, Matrix init);

  std::size_t size() const { return values_.size(); }
  const std::string& name(std::size_t i) const { return names_[i]; }
  Matrix& value(std::size_t i) { return values_[i]; }
  const Matrix& value(std::size_t i) const { return values_[i]; }
  std::optional<std::size_t> find(const std::string& name) const;
  std::size_t index(const std::string& name) const;  // throws ConfigError

  std::size_t total_size() const;
  std::vector<double> flatten() const;
  void unflatten(const std::vector<double>& flat);

  bool operator==(const ParamStore&) const;

 private:
  std::vector<std::string> names_;
  std::vector<Matrix> values_;
};

Gradients zero_gradients(const ParamStore& store);
void add_gradients(Gradients& into, const Gradients& from);

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;  // decoupled
};

struct AdamState {
  std::vector<Matrix> m;
  std::vector<Matrix> v;
  std::int64_t step = 0;
};

class Adam {
 public:
  Adam(const ParamStore& store, AdamConfig cfg = {});

  // Bias-corrected Adam; weight decay is applied to the parameter directly.
  void step(ParamStore& params, const Gradients& grads);

  const AdamState& state() const { return state_; }
  const AdamConfig& config() const { return cfg_; }

 private:
  AdamConfig cfg_;
  AdamState state_;
};

inline constexpr const char* kCheckpointVersion = "diffdyg-ckpt-1";

// Writes <prefix>.bin (flat little-endian doubles) and <prefix>.json
// (version, entries of name/shape/offset, plus caller metadata under "meta").
void save_checkpoint(const ParamStore& store, const std::filesystem::path& prefix,
                     const nlohmann::json& meta = nlohmann::json::object());

struct Checkpoint {
  ParamStore params;
  nlohmann::json meta;
};

Checkpoint load_checkpoint(const std::filesystem::path& prefix);

}  // namespace diffdyg::tensor
