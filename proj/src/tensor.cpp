#include "diffdyg/tensor.hpp"

#include <cmath>
#include <limits>

#include "diffdyg/error.hpp"
#include "diffdyg/params.hpp"

namespace diffdyg::tensor {

namespace {

bool key_ok(const Mask& m, Eigen::Index c) { return m.empty() || m[static_cast<std::size_t>(c)] != 0; }

void check_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ConfigError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                      std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                      std::to_string(b.cols()));
  }
}

double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// In-place rotation shared by the forward (sign = +1) and backward (sign = -1) passes.
void rotate_pairs(Matrix& x, std::span<const int> positions, int rotary_dims, double base, double sign) {
  const int half = rotary_dims / 2;
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double pos = positions[static_cast<std::size_t>(r)];
    if (pos == 0.0) continue;
    for (int i = 0; i < half; ++i) {
      const double theta = std::pow(base, -2.0 * i / rotary_dims);
      const double ang = sign * pos * theta;
      const double c = std::cos(ang), s = std::sin(ang);
      const double a = x(r, 2 * i), b = x(r, 2 * i + 1);
      x(r, 2 * i) = a * c - b * s;
      x(r, 2 * i + 1) = a * s + b * c;
    }
  }
}

int resolve_rotary_dims(Eigen::Index cols, int rotary_dims) {
  const int dims = rotary_dims < 0 ? static_cast<int>(cols) : rotary_dims;
  if (dims % 2 != 0) throw ConfigError("RoPE needs an even rotary width, got " + std::to_string(dims));
  if (dims > cols) throw ConfigError("RoPE rotary width exceeds input width");
  return dims;
}

}  // namespace

Matrix softmax_rows(const Matrix& x, const Mask& key_mask) {
  if (!key_mask.empty() && static_cast<Eigen::Index>(key_mask.size()) != x.cols()) {
    throw ConfigError("softmax_rows: mask width mismatch");
  }
  if (x.hasNaN()) throw NumericError("softmax_rows: NaN input");
  Matrix y = Matrix::Zero(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      if (key_ok(key_mask, c)) mx = std::max(mx, x(r, c));
    }
    if (mx == -std::numeric_limits<double>::infinity()) continue;  // fully masked row
    double total = 0.0;
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      if (!key_ok(key_mask, c)) continue;
      y(r, c) = std::exp(x(r, c) - mx);
      total += y(r, c);
    }
    y.row(r) /= total;
  }
  return y;
}

Matrix rope_apply(const Matrix& x, std::span<const int> positions, int rotary_dims, double base) {
  const int dims = resolve_rotary_dims(x.cols(), rotary_dims);
  if (static_cast<Eigen::Index>(positions.size()) != x.rows()) {
    throw ConfigError("RoPE: one position per row required");
  }
  Matrix y = x;
  rotate_pairs(y, positions, dims, base, 1.0);
  return y;
}

RowVector time_encoding(double dt, const RowVector& freqs) {
  return (freqs.array() * dt).cos().matrix();
}

// ---------------------------------------------------------------------------

Var Tape::push(Matrix value, bool needs_grad, std::function<void()> backprop) {
  Node n;
  n.value = std::move(value);
  n.needs_grad = needs_grad;
  if (needs_grad) n.backprop = std::move(backprop);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size() - 1)};
}

Var Tape::constant(Matrix value) { return push(std::move(value), false); }

Var Tape::variable(Matrix value) { return push(std::move(value), record_, [] {}); }

Var Tape::param(const ParamStore& store, std::size_t index) {
  for (const auto& [i, id] : param_leaves_) {
    if (i == index) return Var{id};
  }
  Var v = variable(store.value(index));
  param_leaves_.emplace_back(index, v.id);
  return v;
}

Matrix Tape::grad(Var v) const {
  const Node& n = nodes_[v.id];
  if (n.grad.size() == 0) return Matrix::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

void Tape::backward(Var loss) {
  if (backward_done_) throw ConfigError("backward already run on this tape");
  if (value(loss).rows() != 1 || value(loss).cols() != 1) {
    throw ConfigError("backward needs a scalar loss");
  }
  backward_done_ = true;
  for (auto& n : nodes_) {
    if (n.needs_grad) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
  }
  if (!needs(loss)) return;
  g(loss)(0, 0) = 1.0;
  for (int i = loss.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (n.needs_grad && n.backprop) n.backprop();
  }
}

void Tape::accumulate_param_grads(const ParamStore& store, Gradients& grads, bool strict) const {
  if (grads.size() != store.size()) throw UpdateError("gradient set does not match parameter store");
  if (strict) {
    for (std::size_t i = 0; i < store.size(); ++i) {
      bool found = false;
      for (const auto& [pi, id] : param_leaves_) found = found || pi == i;
      if (!found) throw MissingGradientError("parameter '" + store.name(i) + "' is detached from the loss");
    }
  }
  for (const auto& [index, id] : param_leaves_) {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.size() == 0) continue;
    grads[index] += n.grad;
  }
}

// --- operations ------------------------------------------------------------

Var Tape::matmul(Var a, Var b) {
  if (value(a).cols() != value(b).rows()) throw ConfigError("matmul: inner dimension mismatch");
  Matrix out = value(a) * value(b);
  return push(std::move(out), needs(a) || needs(b), [this, a, b, o = size()] {
    const Var out{static_cast<int>(o)};
    if (needs(a)) g(a).noalias() += g(out) * value(b).transpose();
    if (needs(b)) g(b).noalias() += value(a).transpose() * g(out);
  });
}

Var Tape::matmul_nt(Var a, Var b) {
  if (value(a).cols() != value(b).cols()) throw ConfigError("matmul_nt: inner dimension mismatch");
  Matrix out = value(a) * value(b).transpose();
  return push(std::move(out), needs(a) || needs(b), [this, a, b, o = size()] {
    const Var out{static_cast<int>(o)};
    if (needs(a)) g(a).noalias() += g(out) * value(b);
    if (needs(b)) g(b).noalias() += g(out).transpose() * value(a);
  });
}

Var Tape::add(Var a, Var b) {
  check_same_shape(value(a), value(b), "add");
  return push(value(a) + value(b), needs(a) || needs(b), [this, a, b, o = size()] {
    const Var out{static_cast<int>(o)};
    if (needs(a)) g(a) += g(out);
    if (needs(b)) g(b) += g(out);
  });
}

Var Tape::sub(Var a, Var b) {
  check_same_shape(value(a), value(b), "sub");
  return push(value(a) - value(b), needs(a) || needs(b), [this, a, b, o = size()] {
    const Var out{static_cast<int>(o)};
    if (needs(a)) g(a) += g(out);
    if (needs(b)) g(b) -= g(out);
  });
}

Var Tape::mul(Var a, Var b) {
  check_same_shape(value(a), value(b), "mul");
  Matrix out = value(a).cwiseProduct(value(b));
  return push(std::move(out), needs(a) || needs(b), [this, a, b, o = size()] {
    const Var out{static_cast<int>(o)};
    if (needs(a)) g(a) += g(out).cwiseProduct(value(b));
    if (needs(b)) g(b) += g(out).cwiseProduct(value(a));
  });
}

Var Tape::add_row(Var a, Var row) {
  if (value(row).rows() != 1 || value(row).cols() != value(a).cols()) {
    throw ConfigError("add_row: row width mismatch");
  }
  Matrix out = value(a).rowwise() + value(row).row(0);
  return push(std::move(out), needs(a) || needs(row), [this, a, row, o = size()] {
    const Var out{static_cast<int>(o)};
    if (needs(a)) g(a) += g(out);
    if (needs(row)) g(row) += g(out).colwise().sum();
  });
}

Var Tape::mul_row(Var a, Var row) {
  if (value(row).rows() != 1 || value(row).cols() != value(a).cols()) {
    throw ConfigError("mul_row: row width mismatch");
  }
  Matrix out = value(a).array().rowwise() * value(row).row(0).array();
  return push(std::move(out), needs(a) || needs(row), [this, a, row, o = size()] {
    const Var out{static_cast<int>(o)};
    if (needs(a)) g(a).array() += g(out).array().rowwise() * value(row).row(0).array();
    if (needs(row)) g(row) += g(out).cwiseProduct(value(a)).colwise().sum();
  });
}

Var Tape::scale(Var a, double s) {
  return push(value(a) * s, needs(a), [this, a, s, o = size()] {
    g(a) += s * g(Var{static_cast<int>(o)});
  });
}

Var Tape::scale_by(Var a, Var s) {
  if (value(s).size() != 1) throw ConfigError("scale_by: scalar expected");
  return push(value(a) * value(s)(0, 0), needs(a) || needs(s), [this, a, s, o = size()] {
    const Var out{static_cast<int>(o)};
    if (needs(a)) g(a) += value(s)(0, 0) * g(out);
    if (needs(s)) g(s)(0, 0) += g(out).cwiseProduct(value(a)).sum();
  });
}

Var Tape::slice_cols(Var a, int start, int count) {
  if (start < 0 || count < 0 || start + count > value(a).cols()) {
    throw ConfigError("slice_cols: range out of bounds");
  }
  Matrix out = value(a).middleCols(start, count);
  return push(std::move(out), needs(a), [this, a, start, count, o = size()] {
    g(a).middleCols(start, count) += g(Var{static_cast<int>(o)});
  });
}

Var Tape::element(Var a, int r, int c) {
  Matrix out(1, 1);
  out(0, 0) = value(a)(r, c);
  return push(std::move(out), needs(a), [this, a, r, c, o = size()] {
    g(a)(r, c) += g(Var{static_cast<int>(o)})(0, 0);
  });
}

Var Tape::concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ConfigError("concat_cols: no inputs");
  const Eigen::Index rows = value(parts[0]).rows();
  Eigen::Index cols = 0;
  bool any = false;
  for (Var p : parts) {
    if (value(p).rows() != rows) throw ConfigError("concat_cols: row count mismatch");
    cols += value(p).cols();
    any = any || needs(p);
  }
  Matrix out(rows, cols);
  Eigen::Index at = 0;
  for (Var p : parts) {
    out.middleCols(at, value(p).cols()) = value(p);
    at += value(p).cols();
  }
  return push(std::move(out), any, [this, parts, o = size()] {
    const Var out{static_cast<int>(o)};
    Eigen::Index at = 0;
    for (Var p : parts) {
      const Eigen::Index w = value(p).cols();
      if (needs(p)) g(p) += g(out).middleCols(at, w);
      at += w;
    }
  });
}

Var Tape::silu(Var a) {
  Matrix out = value(a).unaryExpr([](double x) { return x * sigmoid_scalar(x); });
  return push(std::move(out), needs(a), [this, a, o = size()] {
    const Matrix d = value(a).unaryExpr([](double x) {
      const double s = sigmoid_scalar(x);
      return s * (1.0 + x * (1.0 - s));
    });
    g(a) += g(Var{static_cast<int>(o)}).cwiseProduct(d);
  });
}

Var Tape::sigmoid(Var a) {
  Matrix out = value(a).unaryExpr([](double x) { return sigmoid_scalar(x); });
  return push(std::move(out), needs(a), [this, a, o = size()] {
    const Var out{static_cast<int>(o)};
    const Matrix& y = value(out);
    g(a) += g(out).cwiseProduct(y.cwiseProduct((1.0 - y.array()).matrix()));
  });
}

Var Tape::softmax_rows(Var a, const Mask& key_mask) {
  Matrix out = tensor::softmax_rows(value(a), key_mask);
  return push(std::move(out), needs(a), [this, a, o = size()] {
    const Var out{static_cast<int>(o)};
    const Matrix& y = value(out);
    const Matrix& dy = g(out);
    const Eigen::VectorXd dot = dy.cwiseProduct(y).rowwise().sum();
    g(a) += y.cwiseProduct((dy.colwise() - dot));
  });
}

Var Tape::rms_norm(Var a, Var gain, double eps) {
  const Matrix& x = value(a);
  if (value(gain).rows() != 1 || value(gain).cols() != x.cols()) throw ConfigError("rms_norm: gain width");
  const auto n = static_cast<double>(x.cols());
  Eigen::VectorXd inv = ((x.array().square().rowwise().sum() / n) + eps).rsqrt().matrix();
  Matrix normed = x.array().colwise() * inv.array();
  Matrix out = normed.array().rowwise() * value(gain).row(0).array();
  return push(std::move(out), needs(a) || needs(gain), [this, a, gain, inv, normed, n, o = size()] {
    const Var out{static_cast<int>(o)};
    const Matrix& dy = g(out);
    if (needs(gain)) g(gain) += dy.cwiseProduct(normed).colwise().sum();
    if (needs(a)) {
      const Matrix& x = value(a);
      const Matrix dn = dy.array().rowwise() * value(gain).row(0).array();
      const Eigen::VectorXd dot = dn.cwiseProduct(x).rowwise().sum();
      const Eigen::ArrayXd inv3 = inv.array().cube() / n;
      g(a).array() += dn.array().colwise() * inv.array() - x.array().colwise() * (inv3 * dot.array());
    }
  });
}

Var Tape::rms_norm(Var a, double eps) {
  const Matrix& x = value(a);
  const auto n = static_cast<double>(x.cols());
  Eigen::VectorXd inv = ((x.array().square().rowwise().sum() / n) + eps).rsqrt().matrix();
  Matrix out = x.array().colwise() * inv.array();
  return push(std::move(out), needs(a), [this, a, inv, n, o = size()] {
    const Matrix& dy = g(Var{static_cast<int>(o)});
    const Matrix& x = value(a);
    const Eigen::VectorXd dot = dy.cwiseProduct(x).rowwise().sum();
    const Eigen::ArrayXd inv3 = inv.array().cube() / n;
    g(a).array() += dy.array().colwise() * inv.array() - x.array().colwise() * (inv3 * dot.array());
  });
}

Var Tape::rope(Var a, std::span<const int> positions, int rotary_dims, double base) {
  const int dims = resolve_rotary_dims(value(a).cols(), rotary_dims);
  std::vector<int> pos(positions.begin(), positions.end());
  Matrix out = rope_apply(value(a), pos, dims, base);
  return push(std::move(out), needs(a), [this, a, pos = std::move(pos), dims, base, o = size()] {
    Matrix d = g(Var{static_cast<int>(o)});
    rotate_pairs(d, pos, dims, base, -1.0);
    g(a) += d;
  });
}

Var Tape::time_encode(const Matrix& dt, Var freqs, const Mask& row_mask) {
  if (dt.cols() != 1) throw ConfigError("time_encode: dt must be a column");
  const Matrix& f = value(freqs);
  Matrix out(dt.rows(), f.cols());
  for (Eigen::Index r = 0; r < dt.rows(); ++r) {
    const double m = row_mask[static_cast<std::size_t>(r)] ? 1.0 : 0.0;
    for (Eigen::Index c = 0; c < f.cols(); ++c) out(r, c) = m * std::cos(dt(r, 0) * f(0, c));
  }
  return push(std::move(out), needs(freqs), [this, dt, freqs, row_mask, o = size()] {
    const Matrix& dy = g(Var{static_cast<int>(o)});
    const Matrix& f = value(freqs);
    Matrix& df = g(freqs);
    for (Eigen::Index r = 0; r < dt.rows(); ++r) {
      if (!row_mask[static_cast<std::size_t>(r)]) continue;
      for (Eigen::Index c = 0; c < f.cols(); ++c) {
        df(0, c) -= dy(r, c) * std::sin(dt(r, 0) * f(0, c)) * dt(r, 0);
      }
    }
  });
}

Var Tape::mask_rows(Var a, const Mask& row_mask) {
  Matrix out = value(a);
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    if (!row_mask[static_cast<std::size_t>(r)]) out.row(r).setZero();
  }
  return push(std::move(out), needs(a), [this, a, row_mask, o = size()] {
    const Matrix& dy = g(Var{static_cast<int>(o)});
    for (Eigen::Index r = 0; r < dy.rows(); ++r) {
      if (row_mask[static_cast<std::size_t>(r)]) g(a).row(r) += dy.row(r);
    }
  });
}

Var Tape::mean_rows(Var a, const Mask& row_mask) {
  const Matrix& x = value(a);
  Matrix out = Matrix::Zero(1, x.cols());
  int count = 0;
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    if (!row_mask[static_cast<std::size_t>(r)]) continue;
    out += x.row(r);
    ++count;
  }
  if (count == 0) throw ConfigError("mean_rows: no valid rows");
  out /= count;
  return push(std::move(out), needs(a), [this, a, row_mask, count, o = size()] {
    const Matrix& dy = g(Var{static_cast<int>(o)});
    for (Eigen::Index r = 0; r < value(a).rows(); ++r) {
      if (row_mask[static_cast<std::size_t>(r)]) g(a).row(r) += dy / count;
    }
  });
}

Var Tape::dropout(Var a, double rate, Rng& rng) {
  if (rate <= 0.0) return a;
  if (rate >= 1.0) throw ConfigError("dropout rate must be < 1");
  const Matrix& x = value(a);
  Matrix keep(x.rows(), x.cols());
  const double s = 1.0 / (1.0 - rate);
  for (Eigen::Index i = 0; i < keep.size(); ++i) keep.data()[i] = rng.uniform() < rate ? 0.0 : s;
  Matrix out = x.cwiseProduct(keep);
  return push(std::move(out), needs(a), [this, a, keep = std::move(keep), o = size()] {
    g(a) += g(Var{static_cast<int>(o)}).cwiseProduct(keep);
  });
}

Var Tape::sum(Var a) {
  Matrix out(1, 1);
  out(0, 0) = value(a).sum();
  return push(std::move(out), needs(a), [this, a, o = size()] {
    g(a).array() += g(Var{static_cast<int>(o)})(0, 0);
  });
}

Var Tape::mean(const std::vector<Var>& scalars) {
  if (scalars.empty()) throw ConfigError("mean: no inputs");
  Matrix out = Matrix::Zero(1, 1);
  bool any = false;
  for (Var s : scalars) {
    out(0, 0) += value(s)(0, 0);
    any = any || needs(s);
  }
  const auto n = static_cast<double>(scalars.size());
  out(0, 0) /= n;
  return push(std::move(out), any, [this, scalars, n, o = size()] {
    const double d = g(Var{static_cast<int>(o)})(0, 0) / n;
    for (Var s : scalars) {
      if (needs(s)) g(s)(0, 0) += d;
    }
  });
}

Var Tape::bce(Var p, double y, double clamp) {
  const double raw = value(p)(0, 0);
  const double pc = std::clamp(raw, clamp, 1.0 - clamp);
  Matrix out(1, 1);
  out(0, 0) = -(y * std::log(pc) + (1.0 - y) * std::log(1.0 - pc));
  const bool clamped = raw != pc;
  return push(std::move(out), needs(p), [this, p, y, pc, clamped, o = size()] {
    if (clamped) return;
    const double d = -y / pc + (1.0 - y) / (1.0 - pc);
    g(p)(0, 0) += g(Var{static_cast<int>(o)})(0, 0) * d;
  });
}

}  // namespace diffdyg::tensor
