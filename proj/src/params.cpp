#include "diffdyg/params.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "diffdyg/error.hpp"

namespace diffdyg::tensor {

std::size_t ParamStore::add(std::string name, Matrix init) {
  if (find(name)) throw ConfigError("duplicate parameter '" + name + "'");
  names_.push_back(std::move(name));
  values_.push_back(std::move(init));
  return values_.size() - 1;
}

std::optional<std::size_t> ParamStore::find(const std::string& name) const {
  for (std::size_t i = 0; i < names_.size(); ++i) {
    if (names_[i] == name) return i;
  }
  return std::nullopt;
}

std::size_t ParamStore::index(const std::string& name) const {
  if (auto i = find(name)) return *i;
  throw ConfigError("unknown parameter '" + name + "'");
}

std::size_t ParamStore::total_size() const {
  std::size_t n = 0;
  for (const auto& v : values_) n += static_cast<std::size_t>(v.size());
  return n;
}

std::vector<double> ParamStore::flatten() const {
  std::vector<double> out;
  out.reserve(total_size());
  for (const auto& v : values_) out.insert(out.end(), v.data(), v.data() + v.size());
  return out;
}

void ParamStore::unflatten(const std::vector<double>& flat) {
  if (flat.size() != total_size()) throw UpdateError("flat parameter vector has the wrong length");
  std::size_t at = 0;
  for (auto& v : values_) {
    std::copy_n(flat.data() + at, v.size(), v.data());
    at += static_cast<std::size_t>(v.size());
  }
}

bool ParamStore::operator==(const ParamStore& other) const {
  if (names_ != other.names_) return false;
  for (std::size_t i = 0; i < values_.size(); ++i) {
    if (values_[i].rows() != other.values_[i].rows() || values_[i].cols() != other.values_[i].cols()) {
      return false;
    }
    if (std::memcmp(values_[i].data(), other.values_[i].data(), sizeof(double) * values_[i].size()) != 0) {
      return false;
    }
  }
  return true;
}

Gradients zero_gradients(const ParamStore& store) {
  Gradients g;
  g.reserve(store.size());
  for (std::size_t i = 0; i < store.size(); ++i) {
    g.push_back(Matrix::Zero(store.value(i).rows(), store.value(i).cols()));
  }
  return g;
}

void add_gradients(Gradients& into, const Gradients& from) {
  if (into.size() != from.size()) throw UpdateError("gradient sets differ in length");
  for (std::size_t i = 0; i < into.size(); ++i) into[i] += from[i];
}

// ---------------------------------------------------------------------------

Adam::Adam(const ParamStore& store, AdamConfig cfg) : cfg_(cfg) {
  state_.m = zero_gradients(store);
  state_.v = zero_gradients(store);
}

void Adam::step(ParamStore& params, const Gradients& grads) {
  if (grads.size() != params.size() || state_.m.size() != params.size()) {
    throw UpdateError("parameter/gradient count mismatch");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].rows() != params.value(i).rows() || grads[i].cols() != params.value(i).cols()) {
      throw UpdateError("gradient shape mismatch for '" + params.name(i) + "'");
    }
  }
  ++state_.step;
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(state_.step));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(state_.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Matrix& p = params.value(i);
    Matrix& m = state_.m[i];
    Matrix& v = state_.v[i];
    const Matrix& g = grads[i];
    m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * g;
    v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * g.cwiseAbs2();
    if (cfg_.weight_decay != 0.0) p *= (1.0 - cfg_.lr * cfg_.weight_decay);
    p.array() -= cfg_.lr * (m.array() / c1) / ((v.array() / c2).sqrt() + cfg_.eps);
  }
}

// ---------------------------------------------------------------------------

namespace {

std::filesystem::path with_suffix(const std::filesystem::path& prefix, const char* ext) {
  return std::filesystem::path(prefix.string() + ext);
}

}  // namespace

void save_checkpoint(const ParamStore& store, const std::filesystem::path& prefix, const nlohmann::json& meta) {
  static_assert(std::endian::native == std::endian::little, "checkpoint blobs are little-endian");
  nlohmann::json side;
  side["version"] = kCheckpointVersion;
  side["dtype"] = "float64";
  side["entries"] = nlohmann::json::array();
  std::size_t offset = 0;
  for (std::size_t i = 0; i < store.size(); ++i) {
    const Matrix& v = store.value(i);
    side["entries"].push_back({{"name", store.name(i)},
                               {"shape", {v.rows(), v.cols()}},
                               {"offset", offset}});
    offset += static_cast<std::size_t>(v.size());
  }
  side["total"] = offset;
  side["meta"] = meta;

  const auto flat = store.flatten();
  std::ofstream bin(with_suffix(prefix, ".bin"), std::ios::binary);
  if (!bin) throw IoError("cannot write " + with_suffix(prefix, ".bin").string());
  bin.write(reinterpret_cast<const char*>(flat.data()), static_cast<std::streamsize>(flat.size() * sizeof(double)));
  std::ofstream js(with_suffix(prefix, ".json"));
  if (!js) throw IoError("cannot write " + with_suffix(prefix, ".json").string());
  js << side.dump(2) << '\n';
}

Checkpoint load_checkpoint(const std::filesystem::path& prefix) {
  std::ifstream js(with_suffix(prefix, ".json"));
  if (!js) throw IoError("cannot open " + with_suffix(prefix, ".json").string());
  nlohmann::json side;
  try {
    js >> side;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("checkpoint sidecar: ") + e.what());
  }
  if (side.value("version", "") != kCheckpointVersion) {
    throw SchemaError("unsupported checkpoint version '" + side.value("version", "") + "'");
  }
  const auto total = side.at("total").get<std::size_t>();
  std::vector<double> flat(total);
  std::ifstream bin(with_suffix(prefix, ".bin"), std::ios::binary);
  if (!bin) throw IoError("cannot open " + with_suffix(prefix, ".bin").string());
  bin.read(reinterpret_cast<char*>(flat.data()), static_cast<std::streamsize>(total * sizeof(double)));
  if (static_cast<std::size_t>(bin.gcount()) != total * sizeof(double)) {
    throw SchemaError("checkpoint blob is truncated");
  }

  Checkpoint ck;
  for (const auto& e : side.at("entries")) {
    const auto shape = e.at("shape").get<std::vector<Eigen::Index>>();
    const auto offset = e.at("offset").get<std::size_t>();
    if (shape.size() != 2 || offset + static_cast<std::size_t>(shape[0] * shape[1]) > total) {
      throw SchemaError("bad checkpoint entry '" + e.at("name").get<std::string>() + "'");
    }
    Matrix m(shape[0], shape[1]);
    std::copy_n(flat.data() + offset, m.size(), m.data());
    ck.params.add(e.at("name").get<std::string>(), std::move(m));
  }
  ck.meta = side.value("meta", nlohmann::json::object());
  return ck;
}

}  // namespace diffdyg::tensor
