#include "diffdyg/model.hpp"

#include <cmath>

#include "diffdyg/error.hpp"

namespace diffdyg::model {

AttentionKind parse_attention(std::string_view s) {
  if (s == "differential") return AttentionKind::kDifferential;
  if (s == "standard") return AttentionKind::kStandard;
  throw ConfigError("unknown attention kind '" + std::string(s) + "'");
}

std::string_view to_string(AttentionKind k) {
  return k == AttentionKind::kDifferential ? "differential" : "standard";
}

RopeMode parse_rope_mode(std::string_view s) {
  if (s == "qk") return RopeMode::kQueryKey;
  if (s == "input") return RopeMode::kInput;
  if (s == "off") return RopeMode::kOff;
  throw ConfigError("unknown rope mode '" + std::string(s) + "'");
}

std::string_view to_string(RopeMode m) {
  switch (m) {
    case RopeMode::kQueryKey: return "qk";
    case RopeMode::kInput: return "input";
    case RopeMode::kOff: return "off";
  }
  return "?";
}

void ModelConfig::validate() const {
  channels.validate();
  if (layers < 0 || heads <= 0 || d_attn <= 0) throw ConfigError("layers/heads/d_attn must be positive");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must lie in [0, 1)");
  if (node_dim < 0 || edge_dim < 0) throw ConfigError("feature widths must be non-negative");
  if (rms_eps <= 0.0) throw ConfigError("rms_eps must be positive");
}

nlohmann::json ModelConfig::to_json() const {
  return {{"d", channels.d},
          {"d_T", channels.d_T},
          {"d_C", channels.d_C},
          {"d_S", channels.d_S},
          {"K", channels.K},
          {"K2", channels.K2},
          {"hops", channels.hops},
          {"cooc_self_row", channels.cooc_self_row},
          {"layers", layers},
          {"heads", heads},
          {"d_attn", d_attn},
          {"dropout", dropout},
          {"attention", std::string(to_string(attention))},
          {"rope", std::string(to_string(rope))},
          {"rope_base", rope_base},
          {"headwise_norm", headwise_norm},
          {"lambda_init", lambda_init},
          {"rms_eps", rms_eps},
          {"node_dim", node_dim},
          {"edge_dim", edge_dim}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.channels.d = j.at("d");
    c.channels.d_T = j.at("d_T");
    c.channels.d_C = j.at("d_C");
    c.channels.d_S = j.at("d_S");
    c.channels.K = j.at("K");
    c.channels.K2 = j.at("K2");
    c.channels.hops = j.at("hops");
    c.channels.cooc_self_row = j.at("cooc_self_row");
    c.layers = j.at("layers");
    c.heads = j.at("heads");
    c.d_attn = j.at("d_attn");
    c.dropout = j.at("dropout");
    c.attention = parse_attention(j.at("attention").get<std::string>());
    c.rope = parse_rope_mode(j.at("rope").get<std::string>());
    c.rope_base = j.at("rope_base");
    c.headwise_norm = j.at("headwise_norm");
    c.lambda_init = j.at("lambda_init");
    c.rms_eps = j.at("rms_eps");
    c.node_dim = j.at("node_dim");
    c.edge_dim = j.at("edge_dim");
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

ParamSlots ParamSlots::resolve(const ParamStore& s, int num_layers) {
  ParamSlots p;
  p.node_w = s.index("proj.node.w");
  p.node_b = s.index("proj.node.b");
  p.edge_w = s.index("proj.edge.w");
  p.edge_b = s.index("proj.edge.b");
  p.time_freq = s.index("time.freq");
  p.time_w = s.index("proj.time.w");
  p.time_b = s.index("proj.time.b");
  p.cooc_w = s.index("cooc.w");
  p.cooc_b = s.index("cooc.b");
  p.cooc_proj_w = s.index("proj.cooc.w");
  p.cooc_proj_b = s.index("proj.cooc.b");
  p.spatial_w = s.index("proj.spatial.w");
  p.spatial_b = s.index("proj.spatial.b");
  for (int l = 0; l < num_layers; ++l) {
    const std::string pre = "layer" + std::to_string(l) + ".";
    p.layers.push_back({s.index(pre + "attn_norm.g"), s.index(pre + "attn.wq"), s.index(pre + "attn.wk"),
                        s.index(pre + "attn.wv"), s.index(pre + "attn.wo"), s.index(pre + "attn.lambda"),
                        s.index(pre + "ffn_norm.g"), s.index(pre + "ffn.w1"), s.index(pre + "ffn.w3"),
                        s.index(pre + "ffn.w2")});
  }
  p.cls_w1 = s.index("cls.w1");
  p.cls_b1 = s.index("cls.b1");
  p.cls_w2 = s.index("cls.w2");
  p.cls_b2 = s.index("cls.b2");
  return p;
}

namespace {

Matrix scaled_normal(Rng& rng, Eigen::Index rows, Eigen::Index cols) {
  Matrix m(rows, cols);
  const double sd = rows > 0 ? 1.0 / std::sqrt(static_cast<double>(rows)) : 0.0;
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = sd * rng.normal();
  return m;
}

}  // namespace

Model init_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng = Rng::stream(seed, "init");
  const auto& ch = cfg.channels;
  const int w = cfg.width();
  const int qk = cfg.heads * 2 * cfg.d_attn;
  const int vw = cfg.heads * cfg.head_value_width();

  ParamStore s;
  s.add("proj.node.w", scaled_normal(rng, cfg.node_dim, ch.d));
  s.add("proj.node.b", Matrix::Zero(1, ch.d));
  s.add("proj.edge.w", scaled_normal(rng, cfg.edge_dim, ch.d));
  s.add("proj.edge.b", Matrix::Zero(1, ch.d));
  Matrix freq(1, ch.d_T);
  for (int i = 0; i < ch.d_T; ++i) {
    const double expo = ch.d_T > 1 ? 9.0 * i / (ch.d_T - 1) : 0.0;
    freq(0, i) = std::pow(10.0, -expo);
  }
  s.add("time.freq", freq);
  s.add("proj.time.w", scaled_normal(rng, ch.d_T, ch.d));
  s.add("proj.time.b", Matrix::Zero(1, ch.d));
  s.add("cooc.w", scaled_normal(rng, 1, ch.d_C / 2));
  s.add("cooc.b", Matrix::Zero(1, ch.d_C / 2));
  s.add("proj.cooc.w", scaled_normal(rng, ch.d_C, ch.d));
  s.add("proj.cooc.b", Matrix::Zero(1, ch.d));
  s.add("proj.spatial.w", scaled_normal(rng, ch.d_S, ch.d));
  s.add("proj.spatial.b", Matrix::Zero(1, ch.d));
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string pre = "layer" + std::to_string(l) + ".";
    s.add(pre + "attn_norm.g", Matrix::Ones(1, w));
    s.add(pre + "attn.wq", scaled_normal(rng, w, qk));
    s.add(pre + "attn.wk", scaled_normal(rng, w, qk));
    s.add(pre + "attn.wv", scaled_normal(rng, w, vw));
    s.add(pre + "attn.wo", scaled_normal(rng, vw, w));
    s.add(pre + "attn.lambda", Matrix::Constant(1, cfg.heads, cfg.lambda_init));
    s.add(pre + "ffn_norm.g", Matrix::Ones(1, w));
    s.add(pre + "ffn.w1", scaled_normal(rng, w, cfg.ffn_hidden()));
    s.add(pre + "ffn.w3", scaled_normal(rng, w, cfg.ffn_hidden()));
    s.add(pre + "ffn.w2", scaled_normal(rng, cfg.ffn_hidden(), w));
  }
  s.add("cls.w1", scaled_normal(rng, 2 * w, w));
  s.add("cls.b1", Matrix::Zero(1, w));
  s.add("cls.w2", scaled_normal(rng, w, 1));
  s.add("cls.b2", Matrix::Zero(1, 1));
  return bind_model(cfg, std::move(s));
}

Model bind_model(const ModelConfig& cfg, ParamStore params) {
  cfg.validate();
  Model m{cfg, std::move(params), {}};
  m.slots = ParamSlots::resolve(m.params, cfg.layers);
  const auto& ch = cfg.channels;
  auto expect = [&](std::size_t slot, Eigen::Index r, Eigen::Index c) {
    const Matrix& v = m.params.value(slot);
    if (v.rows() != r || v.cols() != c) {
      throw SchemaError("parameter '" + m.params.name(slot) + "' has shape " + std::to_string(v.rows()) + "x" +
                        std::to_string(v.cols()) + ", expected " + std::to_string(r) + "x" + std::to_string(c));
    }
  };
  const int w = cfg.width();
  expect(m.slots.node_w, cfg.node_dim, ch.d);
  expect(m.slots.edge_w, cfg.edge_dim, ch.d);
  expect(m.slots.time_freq, 1, ch.d_T);
  expect(m.slots.cooc_w, 1, ch.d_C / 2);
  expect(m.slots.spatial_w, ch.d_S, ch.d);
  for (const auto& l : m.slots.layers) {
    expect(l.wq, w, cfg.heads * 2 * cfg.d_attn);
    expect(l.wv, w, cfg.heads * cfg.head_value_width());
    expect(l.lambda, 1, cfg.heads);
    expect(l.w1, w, cfg.ffn_hidden());
  }
  expect(m.slots.cls_w1, 2 * w, w);
  return m;
}

void save_model(const Model& m, const std::filesystem::path& prefix, nlohmann::json extra_meta) {
  extra_meta["model"] = m.cfg.to_json();
  tensor::save_checkpoint(m.params, prefix, extra_meta);
}

Model load_model(const std::filesystem::path& prefix) {
  auto ck = tensor::load_checkpoint(prefix);
  if (!ck.meta.contains("model")) throw SchemaError("checkpoint carries no model config");
  return bind_model(ModelConfig::from_json(ck.meta.at("model")), std::move(ck.params));
}

// ---------------------------------------------------------------------------

Forward::Forward(Tape& tape, const Model& model, ForwardOptions opts)
    : tape_(tape), model_(model), opts_(opts) {
  positions_.resize(static_cast<std::size_t>(model.cfg.channels.num_rows()));
  for (std::size_t i = 0; i < positions_.size(); ++i) positions_[i] = static_cast<int>(i);
  if (opts_.training && model.cfg.dropout > 0.0 && opts_.dropout_rng == nullptr) {
    throw ConfigError("training with dropout needs a dropout generator");
  }
}

Var Forward::drop(Var x) {
  if (!opts_.training || model_.cfg.dropout <= 0.0) return x;
  return tape_.dropout(x, model_.cfg.dropout, *opts_.dropout_rng);
}

Var Forward::project_tokens(const features::TokenSequence& seq) {
  const auto& sl = model_.slots;
  auto linear = [&](Var x, std::size_t w, std::size_t b) { return tape_.add_row(tape_.matmul(x, p(w)), p(b)); };

  const Var node = linear(tape_.constant(seq.node), sl.node_w, sl.node_b);
  const Var edge = linear(tape_.constant(seq.edge), sl.edge_w, sl.edge_b);
  const Mask time_mask = seq.time_mask();
  const Var time_raw = tape_.time_encode(seq.dt, p(sl.time_freq), time_mask);
  const Var time = linear(time_raw, sl.time_w, sl.time_b);

  // Each count goes through the same scalar -> d_C/2 map; the halves are concatenated.
  auto embed_count = [&](int col) {
    const Var c = tape_.constant(seq.cooc.col(col));
    return tape_.silu(tape_.add_row(tape_.matmul(c, p(sl.cooc_w)), p(sl.cooc_b)));
  };
  const Var cooc_raw = tape_.concat_cols({embed_count(0), embed_count(1)});
  const Var cooc = linear(cooc_raw, sl.cooc_proj_w, sl.cooc_proj_b);
  const Var spatial = linear(tape_.constant(seq.spatial), sl.spatial_w, sl.spatial_b);

  return tape_.mask_rows(tape_.concat_cols({node, edge, time, cooc, spatial}), seq.valid_mask);
}

Forward::AttentionOut Forward::attention(Var z, int layer, const Mask& mask, std::vector<HeadRecord>* record) {
  const auto& cfg = model_.cfg;
  const auto& sl = model_.slots.layers[static_cast<std::size_t>(layer)];
  const int da = cfg.d_attn;
  const int rotary = da - (da % 2);
  const bool rope_qk = cfg.rope == RopeMode::kQueryKey && rotary > 0;
  const bool differential = cfg.attention == AttentionKind::kDifferential;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(da));

  const Var q = tape_.matmul(z, p(sl.wq));
  const Var k = tape_.matmul(z, p(sl.wk));
  const Var v = tape_.matmul(z, p(sl.wv));
  const Var lambda = p(sl.lambda);

  auto branch = [&](Var m, int h, int which) {
    Var x = tape_.slice_cols(m, h * 2 * da + which * da, da);
    if (rope_qk) x = tape_.rope(x, positions_, rotary, cfg.rope_base);
    return x;
  };

  std::vector<Var> heads;
  for (int h = 0; h < cfg.heads; ++h) {
    const Var a1 = tape_.softmax_rows(tape_.scale(tape_.matmul_nt(branch(q, h, 0), branch(k, h, 0)), inv_sqrt), mask);
    Var combined;
    HeadRecord rec;
    if (differential) {
      const Var a2 =
          tape_.softmax_rows(tape_.scale(tape_.matmul_nt(branch(q, h, 1), branch(k, h, 1)), inv_sqrt), mask);
      const Var lam = tape_.element(lambda, 0, h);
      combined = tape_.sub(drop(a1), tape_.scale_by(drop(a2), lam));
      if (record) {
        rec.a1 = tape_.value(a1);
        rec.a2 = tape_.value(a2);
        rec.lambda = tape_.scalar(lam);
        rec.b = rec.a1 - rec.lambda * rec.a2;
      }
    } else {
      combined = drop(a1);
      if (record) {
        rec.a1 = tape_.value(a1);
        rec.a2 = Matrix::Zero(rec.a1.rows(), rec.a1.cols());
        rec.b = rec.a1;
      }
    }
    if (record) record->push_back(std::move(rec));
    Var head = tape_.matmul(combined, tape_.slice_cols(v, h * cfg.head_value_width(), cfg.head_value_width()));
    if (cfg.headwise_norm) head = tape_.scale(tape_.rms_norm(head, cfg.rms_eps), 1.0 - cfg.lambda_init);
    heads.push_back(head);
  }
  const Var pre = heads.size() == 1 ? heads.front() : tape_.concat_cols(heads);
  return {pre, drop(tape_.matmul(pre, p(sl.wo)))};
}

Var Forward::encoder_layer(Var z, int layer, const Mask& mask, std::vector<HeadRecord>* record) {
  const auto& cfg = model_.cfg;
  const auto& sl = model_.slots.layers[static_cast<std::size_t>(layer)];
  const Var attn = attention(tape_.rms_norm(z, p(sl.attn_norm), cfg.rms_eps), layer, mask, record).output;
  const Var mid = tape_.add(z, attn);
  const Var n2 = tape_.rms_norm(mid, p(sl.ffn_norm), cfg.rms_eps);
  const Var gate = tape_.silu(tape_.matmul(n2, p(sl.w1)));
  const Var up = tape_.matmul(n2, p(sl.w3));
  const Var ffn = drop(tape_.matmul(tape_.mul(gate, up), p(sl.w2)));
  return tape_.add(mid, ffn);
}

Var Forward::encode_node(const features::TokenSequence& seq, AttentionRecord* record) {
  const auto& cfg = model_.cfg;
  if (seq.rows() != cfg.channels.num_rows()) throw ConfigError("sequence length does not match the model");
  Var z = project_tokens(seq);
  if (cfg.rope == RopeMode::kInput) {
    z = tape_.rope(z, positions_, cfg.width() - (cfg.width() % 2), cfg.rope_base);
  }
  if (record) {
    record->layers.assign(static_cast<std::size_t>(cfg.layers), {});
    record->valid_mask = seq.valid_mask;
    record->node_ids = seq.node_ids;
  }
  for (int l = 0; l < cfg.layers; ++l) {
    z = encoder_layer(z, l, seq.valid_mask, record ? &record->layers[static_cast<std::size_t>(l)] : nullptr);
  }
  return tape_.mean_rows(z, seq.valid_mask);
}

Var Forward::link_probability(Var yu, Var yv) {
  const auto& sl = model_.slots;
  const Var x = tape_.concat_cols({yu, yv});
  const Var h = tape_.silu(tape_.add_row(tape_.matmul(x, p(sl.cls_w1)), p(sl.cls_b1)));
  const Var logit = tape_.add_row(tape_.matmul(h, p(sl.cls_w2)), p(sl.cls_b2));
  return tape_.sigmoid(logit);
}

Var Forward::pair_probability(const features::SequencePair& pair, AttentionRecord* src_rec,
                              AttentionRecord* dst_rec) {
  const Var yu = encode_node(pair.src, src_rec);
  const Var yv = encode_node(pair.dst, dst_rec);
  return link_probability(yu, yv);
}

double score_pair(const Model& model, const features::SequencePair& pair, AttentionRecord* src_rec,
                  AttentionRecord* dst_rec) {
  Tape tape(false);
  Forward fwd(tape, model);
  return tape.scalar(fwd.pair_probability(pair, src_rec, dst_rec));
}

}  // namespace diffdyg::model
