#pragma once

#include <algorithm>
#include <filesystem>
#include <functional>
#include <fstream>
#include <string>
#include <vector>

#include "diffdyg/event_store.hpp"
#include "diffdyg/rng.hpp"
#include "diffdyg/tensor.hpp"

namespace testutil {

using diffdyg::Rng;
using diffdyg::events::EventLog;
using diffdyg::events::Interaction;
using diffdyg::events::NodeId;

// Random log with non-decreasing integer timestamps (ties allowed),
// self-loops and repeated edges.
inline EventLog random_log(Rng& rng, std::size_t max_nodes, std::size_t max_events, std::size_t edge_dim = 0) {
  const std::size_t n = 2 + rng.uniform_index(max_nodes - 1);
  const std::size_t m = 3 + rng.uniform_index(max_events - 2);
  std::vector<Interaction> ev;
  double ts = 1.0;
  for (std::size_t i = 0; i < m; ++i) {
    if (rng.uniform() < 0.7) ts += static_cast<double>(1 + rng.uniform_index(3));
    Interaction e;
    e.src = static_cast<NodeId>(rng.uniform_index(n));
    e.dst = static_cast<NodeId>(rng.uniform_index(n));
    e.ts = ts;
    for (std::size_t k = 0; k < edge_dim; ++k) e.edge_feat.push_back(rng.uniform(-1.0, 1.0));
    ev.push_back(e);
  }
  return EventLog(std::move(ev), n, edge_dim);
}

inline EventLog make_log(const std::vector<std::tuple<NodeId, NodeId, double>>& rows, std::size_t num_nodes = 0) {
  std::vector<Interaction> ev;
  NodeId max_id = -1;
  for (const auto& [s, d, t] : rows) {
    Interaction e;
    e.src = s;
    e.dst = d;
    e.ts = t;
    ev.push_back(e);
    max_id = std::max({max_id, s, d});
  }
  return EventLog(std::move(ev), num_nodes ? num_nodes : static_cast<std::size_t>(max_id + 1));
}

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("diffdyg_" + tag + "_" + std::to_string(reinterpret_cast<std::uintptr_t>(this)));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() { std::filesystem::remove_all(path_); }
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p);
  out << text;
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

using diffdyg::tensor::Matrix;

inline Matrix random_matrix(Rng& rng, int rows, int cols, double scale = 1.0) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

// ||a - n|| / max(||a||, ||n||), 0 when both vanish.
inline double rel_error(const Matrix& analytic, const Matrix& numeric) {
  const double den = std::max(analytic.norm(), numeric.norm());
  if (den == 0.0) return 0.0;
  return (analytic - numeric).norm() / den;
}

// Central differences of a scalar function with respect to one entry set.
inline Matrix numeric_gradient(const std::function<double()>& f, Matrix& x, double h) {
  Matrix g(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double keep = x.data()[i];
    x.data()[i] = keep + h;
    const double up = f();
    x.data()[i] = keep - h;
    const double down = f();
    x.data()[i] = keep;
    g.data()[i] = (up - down) / (2.0 * h);
  }
  return g;
}

}  // namespace testutil
