#include "diffdyg/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "diffdyg/error.hpp"

namespace diffdyg::config {

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

std::string unquote(std::string_view s) {
  s = trim(s);
  if (s.size() >= 2 && (s.front() == '"' || s.front() == '\'') && s.back() == s.front()) {
    s = s.substr(1, s.size() - 2);
  }
  return std::string(s);
}

[[noreturn]] void bad_value(std::string_view key, std::string_view value, std::string_view want) {
  throw ConfigError("key '" + std::string(key) + "': cannot read '" + std::string(value) + "' as " +
                    std::string(want));
}

template <typename T>
T parse_int(std::string_view key, std::string_view raw) {
  const std::string s = unquote(raw);
  T v{};
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size() || s.empty()) bad_value(key, raw, "an integer");
  return v;
}

double parse_double(std::string_view key, std::string_view raw) {
  const std::string s = unquote(raw);
  if (s.empty()) bad_value(key, raw, "a number");
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end != s.c_str() + s.size()) bad_value(key, raw, "a number");
  return v;
}

bool parse_bool(std::string_view key, std::string_view raw) {
  const std::string s = unquote(raw);
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  bad_value(key, raw, "a boolean");
}

// "[1, 2, 3]" or "1,2,3".
std::vector<std::string> parse_list(std::string_view raw) {
  std::string_view s = trim(raw);
  if (!s.empty() && s.front() == '[') {
    if (s.back() != ']') throw ConfigError("unterminated list '" + std::string(raw) + "'");
    s = s.substr(1, s.size() - 2);
  }
  std::vector<std::string> out;
  while (!trim(s).empty()) {
    const auto comma = s.find(',');
    out.push_back(unquote(s.substr(0, comma)));
    if (comma == std::string_view::npos) break;
    s.remove_prefix(comma + 1);
  }
  return out;
}

struct Entry {
  std::string key;
  std::function<void(RunConfig&, std::string_view)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename T, typename Ref>
Entry integer(std::string key, Ref ref) {
  return {key, [key, ref](RunConfig& c, std::string_view v) { ref(c) = parse_int<T>(key, v); },
          [ref](const RunConfig& c) { return fmt::format("{}", ref(const_cast<RunConfig&>(c))); }};
}

template <typename Ref>
Entry real(std::string key, Ref ref) {
  return {key, [key, ref](RunConfig& c, std::string_view v) { ref(c) = parse_double(key, v); },
          [ref](const RunConfig& c) { return fmt::format("{}", ref(const_cast<RunConfig&>(c))); }};
}

template <typename Ref>
Entry boolean(std::string key, Ref ref) {
  return {key, [key, ref](RunConfig& c, std::string_view v) { ref(c) = parse_bool(key, v); },
          [ref](const RunConfig& c) { return std::string(ref(const_cast<RunConfig&>(c)) ? "true" : "false"); }};
}

template <typename Ref>
Entry text(std::string key, Ref ref) {
  return {key, [ref](RunConfig& c, std::string_view v) { ref(c) = unquote(v); },
          [ref](const RunConfig& c) { return fmt::format("\"{}\"", ref(const_cast<RunConfig&>(c))); }};
}

const std::vector<Entry>& registry() {
  static const std::vector<Entry> entries = [] {
    std::vector<Entry> e;
    e.push_back(integer<std::uint64_t>("seed", [](RunConfig& c) -> auto& { return c.seed; }));
    e.push_back(text("out", [](RunConfig& c) -> auto& { return c.out; }));
    e.push_back(text("log_level", [](RunConfig& c) -> auto& { return c.log_level; }));
    e.push_back(integer<int>("threads", [](RunConfig& c) -> auto& { return c.threads; }));

    e.push_back(text("data.events", [](RunConfig& c) -> auto& { return c.events; }));
    e.push_back(text("data.nodes", [](RunConfig& c) -> auto& { return c.nodes; }));
    e.push_back(text("data.dataset", [](RunConfig& c) -> auto& { return c.dataset; }));
    e.push_back(text("data.checkpoint", [](RunConfig& c) -> auto& { return c.checkpoint; }));

    e.push_back(integer<std::size_t>("synth.num_nodes", [](RunConfig& c) -> auto& { return c.synth.num_nodes; }));
    e.push_back(integer<std::size_t>("synth.num_events", [](RunConfig& c) -> auto& { return c.synth.num_events; }));
    e.push_back(real("synth.shift", [](RunConfig& c) -> auto& { return c.synth.shift; }));
    e.push_back(real("synth.intra_prob", [](RunConfig& c) -> auto& { return c.synth.intra_prob; }));
    e.push_back(real("synth.partner_prob", [](RunConfig& c) -> auto& { return c.synth.partner_prob; }));
    e.push_back(integer<std::size_t>("synth.partners", [](RunConfig& c) -> auto& { return c.synth.partners; }));
    e.push_back(real("synth.hub_fraction", [](RunConfig& c) -> auto& { return c.synth.hub_fraction; }));
    e.push_back(real("synth.hub_prob", [](RunConfig& c) -> auto& { return c.synth.hub_prob; }));
    e.push_back(real("synth.shift_point", [](RunConfig& c) -> auto& { return c.synth.shift_point; }));

    e.push_back(real("split.train", [](RunConfig& c) -> auto& { return c.ratios.train; }));
    e.push_back(real("split.val", [](RunConfig& c) -> auto& { return c.ratios.val; }));
    e.push_back(real("split.test", [](RunConfig& c) -> auto& { return c.ratios.test; }));
    e.push_back(real("split.mask_fraction", [](RunConfig& c) -> auto& { return c.mask_fraction; }));
    e.push_back({"split.mode",
                 [](RunConfig& c, std::string_view v) { c.train.mode = train::parse_mode(unquote(v)); },
                 [](const RunConfig& c) { return fmt::format("\"{}\"", train::to_string(c.train.mode)); }});

    e.push_back(integer<int>("model.d", [](RunConfig& c) -> auto& { return c.model.channels.d; }));
    e.push_back(integer<int>("model.d_T", [](RunConfig& c) -> auto& { return c.model.channels.d_T; }));
    e.push_back(integer<int>("model.d_C", [](RunConfig& c) -> auto& { return c.model.channels.d_C; }));
    e.push_back(integer<int>("model.d_S", [](RunConfig& c) -> auto& { return c.model.channels.d_S; }));
    e.push_back(integer<int>("model.K", [](RunConfig& c) -> auto& { return c.model.channels.K; }));
    e.push_back(integer<int>("model.K2", [](RunConfig& c) -> auto& { return c.model.channels.K2; }));
    e.push_back(integer<int>("model.hops", [](RunConfig& c) -> auto& { return c.model.channels.hops; }));
    e.push_back(boolean("model.cooc_self_row", [](RunConfig& c) -> auto& { return c.model.channels.cooc_self_row; }));
    e.push_back(integer<int>("model.layers", [](RunConfig& c) -> auto& { return c.model.layers; }));
    e.push_back(integer<int>("model.heads", [](RunConfig& c) -> auto& { return c.model.heads; }));
    e.push_back(integer<int>("model.d_attn", [](RunConfig& c) -> auto& { return c.model.d_attn; }));
    e.push_back(real("model.dropout", [](RunConfig& c) -> auto& { return c.model.dropout; }));
    e.push_back({"model.attention",
                 [](RunConfig& c, std::string_view v) { c.model.attention = model::parse_attention(unquote(v)); },
                 [](const RunConfig& c) { return fmt::format("\"{}\"", model::to_string(c.model.attention)); }});
    e.push_back({"model.rope",
                 [](RunConfig& c, std::string_view v) { c.model.rope = model::parse_rope_mode(unquote(v)); },
                 [](const RunConfig& c) { return fmt::format("\"{}\"", model::to_string(c.model.rope)); }});
    e.push_back(real("model.rope_base", [](RunConfig& c) -> auto& { return c.model.rope_base; }));
    e.push_back(boolean("model.headwise_norm", [](RunConfig& c) -> auto& { return c.model.headwise_norm; }));
    e.push_back(real("model.lambda_init", [](RunConfig& c) -> auto& { return c.model.lambda_init; }));
    e.push_back(real("model.rms_eps", [](RunConfig& c) -> auto& { return c.model.rms_eps; }));

    e.push_back(integer<int>("train.epochs", [](RunConfig& c) -> auto& { return c.train.epochs; }));
    e.push_back(integer<int>("train.patience", [](RunConfig& c) -> auto& { return c.train.patience; }));
    e.push_back(integer<int>("train.batch_size", [](RunConfig& c) -> auto& { return c.train.batch_size; }));
    e.push_back(real("train.lr", [](RunConfig& c) -> auto& { return c.train.lr; }));
    e.push_back(real("train.weight_decay", [](RunConfig& c) -> auto& { return c.train.weight_decay; }));
    e.push_back(integer<int>("train.grad_chunks", [](RunConfig& c) -> auto& { return c.train.grad_chunks; }));
    e.push_back({"train.protocol",
                 [](RunConfig& c, std::string_view v) { c.train.protocol = events::parse_protocol(unquote(v)); },
                 [](const RunConfig& c) { return fmt::format("\"{}\"", events::to_string(c.train.protocol)); }});
    e.push_back({"train.seeds",
                 [](RunConfig& c, std::string_view v) {
                   c.train.seeds.clear();
                   for (const auto& s : parse_list(v)) c.train.seeds.push_back(parse_int<std::uint64_t>("train.seeds", s));
                 },
                 [](const RunConfig& c) { return fmt::format("[{}]", fmt::join(c.train.seeds, ", ")); }});

    e.push_back(integer<int>("diag.theta_s", [](RunConfig& c) -> auto& { return c.thresholds.structural; }));
    e.push_back(integer<int>("diag.theta_t", [](RunConfig& c) -> auto& { return c.thresholds.temporal; }));
    e.push_back(real("diag.k_frac", [](RunConfig& c) -> auto& { return c.k_frac; }));
    e.push_back(real("diag.eps", [](RunConfig& c) -> auto& { return c.attention_eps; }));
    e.push_back(integer<int>("diag.layer", [](RunConfig& c) -> auto& { return c.attention_layer; }));
    e.push_back(boolean("diag.all_layers", [](RunConfig& c) -> auto& { return c.attention_all_layers; }));
    e.push_back(integer<std::size_t>("diag.mmd_points", [](RunConfig& c) -> auto& { return c.mmd_points; }));
    e.push_back(integer<std::size_t>("diag.dump_queries", [](RunConfig& c) -> auto& { return c.dump_queries; }));
    e.push_back({"diag.retention",
                 [](RunConfig& c, std::string_view v) {
                   c.retention.clear();
                   for (const auto& s : parse_list(v)) c.retention.push_back(parse_double("diag.retention", s));
                 },
                 [](const RunConfig& c) { return fmt::format("[{}]", fmt::join(c.retention, ", ")); }});
    return e;
  }();
  return entries;
}

}  // namespace

void RunConfig::finalize() {
  if (model.channels.hops == 2 && model.channels.K2 == 0) model.channels.K2 = 5;
  if (model.channels.hops == 1 && model.channels.K2 != 0) {
    throw ConfigError("model.K2 is only meaningful with model.hops = 2");
  }
  synth.seed = seed;
  model.validate();
  train.validate();
  if (!(mask_fraction >= 0.0 && mask_fraction <= 1.0)) throw ConfigError("split.mask_fraction must lie in [0, 1]");
  if (!(k_frac > 0.0 && k_frac <= 1.0)) throw ConfigError("diag.k_frac must lie in (0, 1]");
  if (thresholds.structural < 1 || thresholds.temporal < 1) throw ConfigError("diag thresholds must be >= 1");
  for (double r : retention) {
    if (!(r >= 0.0 && r <= 1.0)) throw ConfigError("diag.retention values must lie in [0, 1]");
  }
  if (threads < 0) throw ConfigError("threads must be non-negative");
}

std::filesystem::path RunConfig::checkpoint_prefix() const {
  return checkpoint.empty() ? std::filesystem::path(out) / "checkpoint" : std::filesystem::path(checkpoint);
}

void set_value(RunConfig& cfg, std::string_view key, std::string_view value) {
  for (const auto& e : registry()) {
    if (e.key == key) {
      e.set(cfg, value);
      return;
    }
  }
  throw ConfigError("unknown config key '" + std::string(key) + "'");
}

void apply_text(RunConfig& cfg, std::string_view text) {
  std::string section;
  std::size_t lineno = 0;
  std::istringstream in{std::string(text)};
  std::string raw;
  while (std::getline(in, raw)) {
    ++lineno;
    std::string_view line = raw;
    // Comments start at '#' outside quotes.
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
      if (line[i] == '"') quoted = !quoted;
      if (line[i] == '#' && !quoted) {
        line = line.substr(0, i);
        break;
      }
    }
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ParseError(lineno, "malformed section header");
      section = std::string(trim(line.substr(1, line.size() - 2)));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw ParseError(lineno, "expected key = value");
    const auto key = std::string(trim(line.substr(0, eq)));
    const auto full = section.empty() ? key : section + "." + key;
    try {
      set_value(cfg, full, trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
}

void apply_file(RunConfig& cfg, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  apply_text(cfg, ss.str());
}

std::vector<std::string> known_keys() {
  std::vector<std::string> keys;
  for (const auto& e : registry()) keys.push_back(e.key);
  return keys;
}

std::string format_config(const RunConfig& cfg) {
  std::string out;
  std::string section;
  for (const auto& e : registry()) {
    const auto dot = e.key.find('.');
    const std::string sec = dot == std::string::npos ? "" : e.key.substr(0, dot);
    const std::string name = dot == std::string::npos ? e.key : e.key.substr(dot + 1);
    if (sec != section) {
      out += "\n[" + sec + "]\n";
      section = sec;
    }
    out += name + " = " + e.get(cfg) + "\n";
  }
  return out;
}

void write_resolved(const RunConfig& cfg, const std::filesystem::path& dir, const std::string& file_name) {
  std::filesystem::create_directories(dir);
  std::ofstream out(dir / file_name);
  if (!out) throw IoError("cannot write " + (dir / file_name).string());
  out << format_config(cfg);
}

}  // namespace diffdyg::config
