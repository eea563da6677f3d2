#pragma once

// Link-prediction encoder: channel projections, RoPE, stacked differential-attention
// layers (pre-RMSNorm, SwiGLU feed-forward, residuals), masked mean pooling
// and the link classifier.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "diffdyg/featurizer.hpp"
#include "diffdyg/params.hpp"
#include "diffdyg/tensor.hpp"

namespace diffdyg::model {

using tensor::Mask;
using tensor::Matrix;
using tensor::ParamStore;
using tensor::Tape;
using tensor::Var;

enum class AttentionKind { kDifferential, kStandard };
enum class RopeMode { kQueryKey, kInput, kOff };

AttentionKind parse_attention(std::string_view s);
std::string_view to_string(AttentionKind k);
RopeMode parse_rope_mode(std::string_view s);
std::string_view to_string(RopeMode m);

struct ModelConfig {
  features::ChannelConfig channels;
  int layers = 2;
  int heads = 2;
  int d_attn = 45;
  double dropout = 0.2;
  AttentionKind attention = AttentionKind::kDifferential;
  RopeMode rope = RopeMode::kQueryKey;
  double rope_base = 10000.0;
  bool headwise_norm = false;
  double lambda_init = 0.5;
  double rms_eps = 1e-6;
  // Raw feature widths of the data the model is bound to.
  int node_dim = 0;
  int edge_dim = 0;

  void validate() const;
  int width() const { return channels.token_width(); }
  int head_value_width() const { return 2 * d_attn; }
  int ffn_hidden() const { return 2 * width(); }

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

// Parameter slots resolved by name, so a store loaded from a checkpoint binds
// the same way as a freshly initialized one.
struct LayerSlots {
  std::size_t attn_norm, wq, wk, wv, wo, lambda, ffn_norm, w1, w3, w2;
};

struct ParamSlots {
  std::size_t node_w, node_b, edge_w, edge_b, time_freq, time_w, time_b;
  std::size_t cooc_w, cooc_b, cooc_proj_w, cooc_proj_b, spatial_w, spatial_b;
  std::vector<LayerSlots> layers;
  std::size_t cls_w1, cls_b1, cls_w2, cls_b2;

  static ParamSlots resolve(const ParamStore& store, int num_layers);
};

struct Model {
  ModelConfig cfg;
  ParamStore params;
  ParamSlots slots;
};

Model init_model(const ModelConfig& cfg, std::uint64_t seed);
// Rebuilds a model around an existing parameter store (e.g. a checkpoint).
Model bind_model(const ModelConfig& cfg, ParamStore params);

void save_model(const Model& m, const std::filesystem::path& prefix,
                nlohmann::json extra_meta = nlohmann::json::object());
Model load_model(const std::filesystem::path& prefix);

struct HeadRecord {
  Matrix a1;
  Matrix a2;  // zero for standard attention
  Matrix b;   // a1 - lambda * a2
  double lambda = 0.0;
};

struct AttentionRecord {
  std::vector<std::vector<HeadRecord>> layers;  // [layer][head]
  Mask valid_mask;
  std::vector<features::NodeId> node_ids;
};

struct ForwardOptions {
  bool training = false;
  Rng* dropout_rng = nullptr;  // required when training with dropout > 0
};

class Forward {
 public:
  Forward(Tape& tape, const Model& model, ForwardOptions opts = {});

  // Projected, concatenated token matrix (rows x 5d); padded rows are zero.
  Var project_tokens(const features::TokenSequence& seq);

  struct AttentionOut {
    Var pre_projection;  // concatenated head outputs, rows x (H * 2 d_attn)
    Var output;          // after W^O (and dropout)
  };
  // Attention sublayer on an already-normalized input.
  AttentionOut attention(Var z, int layer, const Mask& mask, std::vector<HeadRecord>* record = nullptr);

  Var encoder_layer(Var z, int layer, const Mask& mask, std::vector<HeadRecord>* record = nullptr);
  Var encode_node(const features::TokenSequence& seq, AttentionRecord* record = nullptr);
  // Link probability from the two pooled embeddings.
  Var link_probability(Var yu, Var yv);
  Var pair_probability(const features::SequencePair& pair, AttentionRecord* src_rec = nullptr,
                       AttentionRecord* dst_rec = nullptr);

 private:
  Var p(std::size_t slot) { return tape_.param(model_.params, slot); }
  Var drop(Var x);

  Tape& tape_;
  const Model& model_;
  ForwardOptions opts_;
  std::vector<int> positions_;
};

// Inference-only probability for one pair (no gradient recording).
double score_pair(const Model& model, const features::SequencePair& pair, AttentionRecord* src_rec = nullptr,
                  AttentionRecord* dst_rec = nullptr);

}  // namespace diffdyg::model
