#pragma once

// Reverse-mode differentiation over dense Eigen matrices.
//
// Graph features use a batched layout: an n x (B*F) matrix whose b-th block of
// F columns holds sample b's per-vertex features, so graph operators apply to
// the whole batch with one sparse product and channel maps are per-block GEMMs.

#include "cvaenf/mesh.hpp"

#include <Eigen/Core>

#include <deque>
#include <functional>
#include <string>

namespace cvaenf::ad {

using Matrix = Eigen::MatrixXd;

/// A learnable tensor with its accumulated gradient.
struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;
  bool decay = true;  // subject to decoupled weight decay

  Parameter() = default;
  Parameter(std::string name_, Matrix value_, bool decay_ = true)
      : name(std::move(name_)), value(std::move(value_)), grad(Matrix::Zero(value.rows(), value.cols())),
        decay(decay_) {}

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

class Tape;

class Var {
 public:
  Var() = default;
  const Matrix& value() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  Tape* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* t, int id) : tape_(t), id_(id) {}
  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  using BackwardFn = std::function<void(const Matrix& grad_out)>;

  Var constant(Matrix value);
  Var parameter(Parameter& p);

  /// Records an op result. `backward` receives the output gradient and must
  /// push input gradients through accumulate().
  Var record(Matrix value, std::initializer_list<Var> inputs, BackwardFn backward);

  /// Seeds d(root)/d(root) = 1 on a 1x1 root and propagates to all parameters.
  void backward(Var root);

  const Matrix& value(const Var& v) const { return nodes_[v.id()].value; }
  bool needs_grad(const Var& v) const { return nodes_[v.id()].needs_grad; }
  void accumulate(const Var& v, const Eigen::Ref<const Matrix>& g);
  /// Gradient after backward(); zero-sized when nothing reached the node.
  const Matrix& grad(const Var& v) const { return nodes_[v.id()].grad; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    BackwardFn backward;
    bool needs_grad = false;
  };
  std::deque<Node> nodes_;
};

// Elementwise and shape ops.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var exp(Var a);
Var square(Var a);
Var elu(Var a);
Var clamp(Var a, double lo, double hi);
Var sum(Var a);       // 1x1
Var row_sum(Var a);   // r x 1
Var matmul(Var a, Var b);
Var add_row(Var a, Var row);  // broadcast a 1 x c row over the rows of a
Var concat_cols(Var a, Var b);
Var slice_cols(Var a, Index start, Index count);

/// Left multiplication by a constant sparse operator that must outlive the tape.
Var sparse_apply(const SparseOperator& op, Var a);

/// Chebyshev filter sum_k T_k(L) X W_k + bias on batched graph features.
/// `weight` is (K*F_in) x F_out with W_k stacked by rows; K = weight.rows()/F_in.
Var cheb_conv(Var x, const SparseOperator& laplacian, Var weight, Var bias, Index batch);

/// Pointwise channel map X W + bias on batched graph features.
Var channel_linear(Var x, Var weight, Var bias, Index batch);

struct BatchNormState {
  Eigen::RowVectorXd running_mean;
  Eigen::RowVectorXd running_var;
  double momentum = 0.1;
  double eps = 1e-5;
};

/// Per-channel normalization over vertices and batch (training) or running
/// statistics (evaluation); running statistics update in training mode.
Var batch_norm(Var x, Var gamma, Var beta, BatchNormState& state, Index batch, bool training);
Var batch_norm_eval(Var x, Var gamma, Var beta, const BatchNormState& state, Index batch);

/// Per-sample, per-channel standardization over vertices.
Var instance_norm(Var x, Index batch, double eps = 1e-5);

/// y[:, b*F+f] = gamma(b, f) * x[:, b*F+f] + beta(b, f), gamma/beta are B x F.
Var modulate(Var x, Var gamma, Var beta);

/// n x (B*F) graph features -> B x (n*F) rows, row-major over (vertex, channel).
Var flatten_graph(Var x, Index batch);
Var unflatten_graph(Var rows, Index n_vertices, Index channels);

struct FlowOutput {
  Var z;        // B x d
  Var log_det;  // B x 1
};

/// One planar flow unit applied row-wise to z (B x d); u, w are 1 x d, b is 1 x 1
/// raw parameters passed through the invertibility reparameterization.
FlowOutput planar_flow(Var z, Var u, Var w, Var b);

}  // namespace cvaenf::ad
