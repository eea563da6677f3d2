#pragma once

// Dense matrices with a recorded reverse-mode tape. Only the operations the
// encoder graph needs are provided.

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "diffdyg/rng.hpp"

namespace diffdyg::tensor {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;

// 1 = valid / unmasked, 0 = padded / masked.
using Mask = std::vector<std::uint8_t>;

class ParamStore;
using Gradients = std::vector<Matrix>;

// Row-wise softmax restricted to columns with key_mask[c] != 0. Masked
// entries are 0; a row with no unmasked column is all zeros. Throws
// NumericError on NaN input.
Matrix softmax_rows(const Matrix& x, const Mask& key_mask = {});

// Rotates dimension pairs (2i, 2i+1), i < rotary_dims/2, of row r by
// positions[r] * base^(-2i/rotary_dims). Remaining columns pass through.
// rotary_dims must be even and <= cols; -1 means all columns (which then
// must be even).
Matrix rope_apply(const Matrix& x, std::span<const int> positions, int rotary_dims = -1,
                  double base = 10000.0);

// cos(dt * freq_i) for each component.
RowVector time_encoding(double dt, const RowVector& freqs);

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

class Tape {
 public:
  // With record_gradients = false no leaf requires a gradient and nothing
  // is recorded for a backward pass.
  explicit Tape(bool record_gradients = true) : record_(record_gradients) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  Var variable(Matrix value);  // leaf that receives a gradient
  // Leaf bound to a stored parameter; created once per tape.
  Var param(const ParamStore& store, std::size_t index);

  const Matrix& value(Var v) const { return nodes_[v.id].value; }
  // Gradient after backward(); a zero matrix if v received none.
  Matrix grad(Var v) const;
  double scalar(Var v) const { return nodes_[v.id].value(0, 0); }
  std::size_t size() const { return nodes_.size(); }

  // Reverse sweep from a 1x1 loss. May be called once per tape.
  void backward(Var loss);

  // Adds the gradients of every parameter leaf into grads (aligned with the
  // store). Parameters not reached by the loss are left untouched unless
  // strict, in which case a MissingGradientError names the first one.
  void accumulate_param_grads(const ParamStore& store, Gradients& grads, bool strict = false) const;

  // --- operations --------------------------------------------------------
  Var matmul(Var a, Var b);
  Var matmul_nt(Var a, Var b);  // a * b^T
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);          // elementwise
  Var add_row(Var a, Var row);    // a + broadcast(1 x c row)
  Var mul_row(Var a, Var row);    // a .* broadcast(1 x c row)
  Var scale(Var a, double s);
  Var scale_by(Var a, Var s);     // a * s, s is 1x1
  Var slice_cols(Var a, int start, int count);
  Var element(Var a, int r, int c);  // 1x1
  Var concat_cols(const std::vector<Var>& parts);
  Var silu(Var a);
  Var sigmoid(Var a);
  Var softmax_rows(Var a, const Mask& key_mask);
  Var rms_norm(Var a, Var gain, double eps);
  Var rms_norm(Var a, double eps);  // gain-free
  Var rope(Var a, std::span<const int> positions, int rotary_dims, double base = 10000.0);
  // cos(dt_r * freq_c) * row_mask[r]; dt is a constant column.
  Var time_encode(const Matrix& dt, Var freqs, const Mask& row_mask);
  Var mask_rows(Var a, const Mask& row_mask);
  Var mean_rows(Var a, const Mask& row_mask);  // 1 x c mean over rows with mask != 0
  Var dropout(Var a, double rate, Rng& rng);   // inverted dropout; identity when rate == 0
  Var sum(Var a);
  Var mean(const std::vector<Var>& scalars);
  // -[y ln p + (1-y) ln(1-p)] with p clamped to [clamp, 1-clamp].
  Var bce(Var p, double y, double clamp = 1e-7);

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    std::function<void()> backprop;
    bool needs_grad = false;
  };

  Var push(Matrix value, bool needs_grad, std::function<void()> backprop = {});
  bool needs(Var v) const { return nodes_[v.id].needs_grad; }
  Matrix& g(Var v) { return nodes_[v.id].grad; }

  std::vector<Node> nodes_;
  std::vector<std::pair<std::size_t, int>> param_leaves_;  // (store index, node id)
  bool record_ = true;
  bool backward_done_ = false;
};

}  // namespace diffdyg::tensor
