#include "cvaenf/autodiff.hpp"
#include "cvaenf/flows.hpp"

#include <memory>
#include <stdexcept>

namespace cvaenf::ad {

const Matrix& Var::value() const { return tape_->value(*this); }

Var Tape::constant(Matrix value) {
  nodes_.push_back(Node{std::move(value), Matrix(), nullptr, false});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::parameter(Parameter& p) {
  Parameter* target = &p;
  nodes_.push_back(Node{p.value, Matrix(), [target](const Matrix& g) { target->grad += g; }, true});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::record(Matrix value, std::initializer_list<Var> inputs, BackwardFn backward) {
  bool needs = false;
  for (const Var& v : inputs) {
    if (v.tape() != this) throw std::logic_error("autodiff: mixing variables from different tapes");
    needs = needs || nodes_[v.id()].needs_grad;
  }
  nodes_.push_back(Node{std::move(value), Matrix(), needs ? std::move(backward) : nullptr, needs});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

void Tape::accumulate(const Var& v, const Eigen::Ref<const Matrix>& g) {
  Node& node = nodes_[v.id()];
  if (!node.needs_grad) return;
  if (node.grad.size() == 0) node.grad = g;
  else node.grad += g;
}

void Tape::backward(Var root) {
  if (root.rows() != 1 || root.cols() != 1) throw std::logic_error("autodiff: backward needs a scalar root");
  nodes_[root.id()].grad = Matrix::Ones(1, 1);
  for (int i = root.id(); i >= 0; --i) {
    Node& node = nodes_[i];
    if (node.backward && node.grad.size() != 0) node.backward(node.grad);
  }
}

namespace {

void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
}

}  // namespace

Var add(Var a, Var b) {
  check_same_shape(a, b, "add");
  Tape* t = a.tape();
  return t->record(a.value() + b.value(), {a, b}, [t, a, b](const Matrix& g) {
    t->accumulate(a, g);
    t->accumulate(b, g);
  });
}

Var sub(Var a, Var b) {
  check_same_shape(a, b, "sub");
  Tape* t = a.tape();
  return t->record(a.value() - b.value(), {a, b}, [t, a, b](const Matrix& g) {
    t->accumulate(a, g);
    t->accumulate(b, -g);
  });
}

Var mul(Var a, Var b) {
  check_same_shape(a, b, "mul");
  Tape* t = a.tape();
  return t->record(a.value().cwiseProduct(b.value()), {a, b}, [t, a, b](const Matrix& g) {
    if (t->needs_grad(a)) t->accumulate(a, g.cwiseProduct(b.value()));
    if (t->needs_grad(b)) t->accumulate(b, g.cwiseProduct(a.value()));
  });
}

Var scale(Var a, double s) {
  Tape* t = a.tape();
  return t->record(a.value() * s, {a}, [t, a, s](const Matrix& g) { t->accumulate(a, g * s); });
}

Var add_scalar(Var a, double s) {
  Tape* t = a.tape();
  return t->record(a.value().array() + s, {a}, [t, a](const Matrix& g) { t->accumulate(a, g); });
}

Var exp(Var a) {
  Tape* t = a.tape();
  Matrix v = a.value().array().exp().matrix();
  auto out = std::make_shared<Matrix>(v);
  return t->record(std::move(v), {a}, [t, a, out](const Matrix& g) { t->accumulate(a, g.cwiseProduct(*out)); });
}

Var square(Var a) {
  Tape* t = a.tape();
  return t->record(a.value().array().square().matrix(), {a},
                   [t, a](const Matrix& g) { t->accumulate(a, 2.0 * g.cwiseProduct(a.value())); });
}

Var elu(Var a) {
  Tape* t = a.tape();
  Matrix v = a.value().unaryExpr([](double x) { return x > 0 ? x : std::expm1(x); });
  return t->record(std::move(v), {a}, [t, a](const Matrix& g) {
    const Matrix& x = a.value();
    t->accumulate(a, g.binaryExpr(x, [](double gi, double xi) { return xi > 0 ? gi : gi * std::exp(xi); }));
  });
}

Var clamp(Var a, double lo, double hi) {
  Tape* t = a.tape();
  Matrix v = a.value().cwiseMax(lo).cwiseMin(hi);
  return t->record(std::move(v), {a}, [t, a, lo, hi](const Matrix& g) {
    const Matrix& x = a.value();
    t->accumulate(a, g.binaryExpr(x, [lo, hi](double gi, double xi) { return (xi >= lo && xi <= hi) ? gi : 0.0; }));
  });
}

Var sum(Var a) {
  Tape* t = a.tape();
  Matrix v(1, 1);
  v(0, 0) = a.value().sum();
  const Index r = a.rows(), c = a.cols();
  return t->record(std::move(v), {a}, [t, a, r, c](const Matrix& g) { t->accumulate(a, Matrix::Constant(r, c, g(0, 0))); });
}

Var row_sum(Var a) {
  Tape* t = a.tape();
  const Index c = a.cols();
  return t->record(a.value().rowwise().sum(), {a},
                   [t, a, c](const Matrix& g) { t->accumulate(a, g.replicate(1, c)); });
}

Var matmul(Var a, Var b) {
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimension mismatch");
  Tape* t = a.tape();
  return t->record(a.value() * b.value(), {a, b}, [t, a, b](const Matrix& g) {
    if (t->needs_grad(a)) t->accumulate(a, g * b.value().transpose());
    if (t->needs_grad(b)) t->accumulate(b, a.value().transpose() * g);
  });
}

Var add_row(Var a, Var row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw std::invalid_argument("add_row: shape mismatch");
  Tape* t = a.tape();
  Matrix v = a.value().rowwise() + row.value().row(0);
  return t->record(std::move(v), {a, row}, [t, a, row](const Matrix& g) {
    t->accumulate(a, g);
    if (t->needs_grad(row)) t->accumulate(row, g.colwise().sum());
  });
}

Var concat_cols(Var a, Var b) {
  if (a.rows() != b.rows()) throw std::invalid_argument("concat_cols: row mismatch");
  Tape* t = a.tape();
  Matrix v(a.rows(), a.cols() + b.cols());
  v << a.value(), b.value();
  const Index ca = a.cols(), cb = b.cols();
  return t->record(std::move(v), {a, b}, [t, a, b, ca, cb](const Matrix& g) {
    t->accumulate(a, g.leftCols(ca));
    t->accumulate(b, g.rightCols(cb));
  });
}

Var slice_cols(Var a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) throw std::invalid_argument("slice_cols: out of range");
  Tape* t = a.tape();
  const Index r = a.rows(), c = a.cols();
  return t->record(a.value().middleCols(start, count), {a}, [t, a, r, c, start, count](const Matrix& g) {
    Matrix full = Matrix::Zero(r, c);
    full.middleCols(start, count) = g;
    t->accumulate(a, full);
  });
}

Var sparse_apply(const SparseOperator& op, Var a) {
  if (op.cols() != a.rows()) throw std::invalid_argument("sparse_apply: dimension mismatch");
  Tape* t = a.tape();
  const SparseOperator* S = &op;
  return t->record(Matrix(op * a.value()), {a},
                   [t, a, S](const Matrix& g) { t->accumulate(a, Matrix(S->transpose() * g)); });
}

Var cheb_conv(Var x, const SparseOperator& laplacian, Var weight, Var bias, Index batch) {
  const Index n = x.rows();
  const Index f_in = x.cols() / batch;
  const Index f_out = weight.cols();
  if (batch < 1 || f_in * batch != x.cols()) throw std::invalid_argument("cheb_conv: batch layout mismatch");
  if (weight.rows() % f_in != 0) throw std::invalid_argument("cheb_conv: weight rows not a multiple of F_in");
  const Index order = weight.rows() / f_in;
  if (order < 1) throw std::invalid_argument("cheb_conv: order must be >= 1");
  if (order > 1 && (laplacian.rows() != n || laplacian.cols() != n))
    throw std::invalid_argument("cheb_conv: laplacian size mismatch");
  if (bias.rows() != 1 || bias.cols() != f_out) throw std::invalid_argument("cheb_conv: bias shape mismatch");

  auto basis = std::make_shared<std::vector<Matrix>>();
  basis->reserve(static_cast<std::size_t>(order));
  basis->push_back(x.value());
  if (order > 1) basis->push_back(laplacian * x.value());
  for (Index k = 2; k < order; ++k) basis->push_back(2.0 * (laplacian * (*basis)[k - 1]) - (*basis)[k - 2]);

  const Matrix& W = weight.value();
  Matrix out(n, batch * f_out);
  for (Index b = 0; b < batch; ++b) {
    auto ob = out.middleCols(b * f_out, f_out);
    ob.rowwise() = bias.value().row(0);
    for (Index k = 0; k < order; ++k)
      ob.noalias() += (*basis)[k].middleCols(b * f_in, f_in) * W.middleRows(k * f_in, f_in);
  }

  Tape* t = x.tape();
  const SparseOperator* L = &laplacian;
  return t->record(std::move(out), {x, weight, bias},
                   [t, x, weight, bias, basis, L, batch, f_in, f_out, order, n](const Matrix& g) {
    const Matrix& W = weight.value();
    if (t->needs_grad(weight)) {
      Matrix dW = Matrix::Zero(W.rows(), W.cols());
      for (Index k = 0; k < order; ++k)
        for (Index b = 0; b < batch; ++b)
          dW.middleRows(k * f_in, f_in).noalias() +=
              (*basis)[k].middleCols(b * f_in, f_in).transpose() * g.middleCols(b * f_out, f_out);
      t->accumulate(weight, dW);
    }
    if (t->needs_grad(bias)) {
      Matrix db = Matrix::Zero(1, f_out);
      for (Index b = 0; b < batch; ++b) db += g.middleCols(b * f_out, f_out).colwise().sum();
      t->accumulate(bias, db);
    }
    if (!t->needs_grad(x)) return;
    std::vector<Matrix> dT(static_cast<std::size_t>(order), Matrix(n, batch * f_in));
    for (Index k = 0; k < order; ++k)
      for (Index b = 0; b < batch; ++b)
        dT[k].middleCols(b * f_in, f_in).noalias() =
            g.middleCols(b * f_out, f_out) * W.middleRows(k * f_in, f_in).transpose();
    for (Index k = order - 1; k >= 2; --k) {
      dT[k - 1] += 2.0 * (L->transpose() * dT[k]);
      dT[k - 2] -= dT[k];
    }
    if (order > 1) dT[0] += L->transpose() * dT[1];
    t->accumulate(x, dT[0]);
  });
}

Var channel_linear(Var x, Var weight, Var bias, Index batch) {
  static const SparseOperator kUnused;
  if (weight.rows() * batch != x.cols()) throw std::invalid_argument("channel_linear: weight rows != F_in");
  return cheb_conv(x, kUnused, weight, bias, batch);
}

namespace {

// Channel-wise mean/var over rows and batch blocks.
void channel_moments(const Matrix& x, Index batch, Eigen::RowVectorXd& mean, Eigen::RowVectorXd& var) {
  const Index f = x.cols() / batch;
  const double count = static_cast<double>(x.rows() * batch);
  mean = Eigen::RowVectorXd::Zero(f);
  for (Index b = 0; b < batch; ++b) mean += x.middleCols(b * f, f).colwise().sum();
  mean /= count;
  var = Eigen::RowVectorXd::Zero(f);
  for (Index b = 0; b < batch; ++b)
    var += (x.middleCols(b * f, f).rowwise() - mean).array().square().matrix().colwise().sum();
  var /= count;
}

}  // namespace

namespace {

Var batch_norm_impl(Var x, Var gamma, Var beta, const Eigen::RowVectorXd& mean, const Eigen::RowVectorXd& var,
                    double eps, Index batch, bool batch_stats) {
  const Index f = x.cols() / batch;
  const Eigen::RowVectorXd inv_std = (var.array() + eps).rsqrt().matrix();
  auto xhat = std::make_shared<Matrix>(x.rows(), x.cols());
  Matrix out(x.rows(), x.cols());
  for (Index b = 0; b < batch; ++b) {
    xhat->middleCols(b * f, f) =
        ((x.value().middleCols(b * f, f).rowwise() - mean).array().rowwise() * inv_std.array()).matrix();
    out.middleCols(b * f, f) =
        ((xhat->middleCols(b * f, f).array().rowwise() * gamma.value().row(0).array()).rowwise() +
         beta.value().row(0).array())
            .matrix();
  }
  Tape* t = x.tape();
  const double count = static_cast<double>(x.rows() * batch);
  return t->record(std::move(out), {x, gamma, beta},
                   [t, x, gamma, beta, xhat, inv_std, batch, f, count, batch_stats](const Matrix& g) {
    Eigen::RowVectorXd dgamma = Eigen::RowVectorXd::Zero(f), dbeta = Eigen::RowVectorXd::Zero(f);
    for (Index b = 0; b < batch; ++b) {
      dgamma += g.middleCols(b * f, f).cwiseProduct(xhat->middleCols(b * f, f)).colwise().sum();
      dbeta += g.middleCols(b * f, f).colwise().sum();
    }
    t->accumulate(gamma, dgamma);
    t->accumulate(beta, dbeta);
    if (!t->needs_grad(x)) return;
    const Eigen::RowVectorXd scale_row = (gamma.value().row(0).array() * inv_std.array()).matrix();
    Matrix dx(g.rows(), g.cols());
    for (Index b = 0; b < batch; ++b) {
      if (batch_stats) {
        // dx = gamma*inv_std * (g - mean(g) - xhat*mean(g*xhat))
        dx.middleCols(b * f, f) =
            ((g.middleCols(b * f, f).array().rowwise() - (dbeta / count).array()) -
             xhat->middleCols(b * f, f).array().rowwise() * (dgamma / count).array())
                .rowwise() *
            scale_row.array();
      } else {
        dx.middleCols(b * f, f) = (g.middleCols(b * f, f).array().rowwise() * scale_row.array()).matrix();
      }
    }
    t->accumulate(x, dx);
  });
}

void check_batch_norm_shapes(const Var& x, const Var& gamma, const Var& beta, Index batch) {
  const Index f = x.cols() / batch;
  if (batch < 1 || f * batch != x.cols() || gamma.cols() != f || beta.cols() != f)
    throw std::invalid_argument("batch_norm: channel mismatch");
}

}  // namespace

Var batch_norm(Var x, Var gamma, Var beta, BatchNormState& state, Index batch, bool training) {
  check_batch_norm_shapes(x, gamma, beta, batch);
  const Index f = x.cols() / batch;
  if (state.running_mean.size() != f) {
    state.running_mean = Eigen::RowVectorXd::Zero(f);
    state.running_var = Eigen::RowVectorXd::Ones(f);
  }
  if (!training) return batch_norm_eval(x, gamma, beta, state, batch);
  Eigen::RowVectorXd mean, var;
  channel_moments(x.value(), batch, mean, var);
  const double count = static_cast<double>(x.rows() * batch);
  const double unbias = count > 1 ? count / (count - 1) : 1.0;
  state.running_mean = (1 - state.momentum) * state.running_mean + state.momentum * mean;
  state.running_var = (1 - state.momentum) * state.running_var + state.momentum * unbias * var;
  return batch_norm_impl(x, gamma, beta, mean, var, state.eps, batch, true);
}

Var batch_norm_eval(Var x, Var gamma, Var beta, const BatchNormState& state, Index batch) {
  check_batch_norm_shapes(x, gamma, beta, batch);
  if (state.running_mean.size() != gamma.cols()) throw std::invalid_argument("batch_norm: uninitialized running statistics");
  return batch_norm_impl(x, gamma, beta, state.running_mean, state.running_var, state.eps, batch, false);
}

Var instance_norm(Var x, Index batch, double eps) {
  (void)batch;
  const Matrix& v = x.value();
  const double n = static_cast<double>(v.rows());
  const Eigen::RowVectorXd mean = v.colwise().mean();
  const Eigen::RowVectorXd var = (v.rowwise() - mean).array().square().matrix().colwise().sum() / n;
  const Eigen::RowVectorXd inv_std = (var.array() + eps).rsqrt().matrix();
  auto xhat = std::make_shared<Matrix>(((v.rowwise() - mean).array().rowwise() * inv_std.array()).matrix());
  Tape* t = x.tape();
  return t->record(*xhat, {x}, [t, x, xhat, inv_std, n](const Matrix& g) {
    const Eigen::RowVectorXd gsum = g.colwise().sum() / n;
    const Eigen::RowVectorXd gx = g.cwiseProduct(*xhat).colwise().sum() / n;
    Matrix dx = ((g.rowwise() - gsum).array() - xhat->array().rowwise() * gx.array()).rowwise() * inv_std.array();
    t->accumulate(x, dx);
  });
}

Var modulate(Var x, Var gamma, Var beta) {
  const Index batch = gamma.rows();
  const Index f = gamma.cols();
  if (beta.rows() != batch || beta.cols() != f || x.cols() != batch * f)
    throw std::invalid_argument("modulate: shape mismatch");
  Matrix out(x.rows(), x.cols());
  for (Index b = 0; b < batch; ++b)
    out.middleCols(b * f, f) = ((x.value().middleCols(b * f, f).array().rowwise() * gamma.value().row(b).array())
                                    .rowwise() +
                                beta.value().row(b).array())
                                   .matrix();
  Tape* t = x.tape();
  return t->record(std::move(out), {x, gamma, beta}, [t, x, gamma, beta, batch, f](const Matrix& g) {
    Matrix dx(g.rows(), g.cols()), dgamma(batch, f), dbeta(batch, f);
    for (Index b = 0; b < batch; ++b) {
      const auto gb = g.middleCols(b * f, f);
      dx.middleCols(b * f, f) = (gb.array().rowwise() * gamma.value().row(b).array()).matrix();
      dgamma.row(b) = gb.cwiseProduct(x.value().middleCols(b * f, f)).colwise().sum();
      dbeta.row(b) = gb.colwise().sum();
    }
    t->accumulate(x, dx);
    t->accumulate(gamma, dgamma);
    t->accumulate(beta, dbeta);
  });
}

Var flatten_graph(Var x, Index batch) {
  const Index n = x.rows(), f = x.cols() / batch;
  if (f * batch != x.cols()) throw std::invalid_argument("flatten_graph: batch layout mismatch");
  Matrix out(batch, n * f);
  for (Index b = 0; b < batch; ++b)
    for (Index v = 0; v < n; ++v) out.row(b).segment(v * f, f) = x.value().row(v).segment(b * f, f);
  Tape* t = x.tape();
  return t->record(std::move(out), {x}, [t, x, batch, n, f](const Matrix& g) {
    Matrix dx(n, batch * f);
    for (Index b = 0; b < batch; ++b)
      for (Index v = 0; v < n; ++v) dx.row(v).segment(b * f, f) = g.row(b).segment(v * f, f);
    t->accumulate(x, dx);
  });
}

Var unflatten_graph(Var rows, Index n_vertices, Index channels) {
  const Index batch = rows.rows();
  if (rows.cols() != n_vertices * channels) throw std::invalid_argument("unflatten_graph: size mismatch");
  Matrix out(n_vertices, batch * channels);
  for (Index b = 0; b < batch; ++b)
    for (Index v = 0; v < n_vertices; ++v)
      out.row(v).segment(b * channels, channels) = rows.value().row(b).segment(v * channels, channels);
  Tape* t = rows.tape();
  return t->record(std::move(out), {rows}, [t, rows, batch, n_vertices, channels](const Matrix& g) {
    Matrix d(batch, n_vertices * channels);
    for (Index b = 0; b < batch; ++b)
      for (Index v = 0; v < n_vertices; ++v)
        d.row(b).segment(v * channels, channels) = g.row(v).segment(b * channels, channels);
    t->accumulate(rows, d);
  });
}

FlowOutput planar_flow(Var z, Var u, Var w, Var b) {
  const Index batch = z.rows(), d = z.cols();
  if (u.rows() != 1 || u.cols() != d || w.rows() != 1 || w.cols() != d || b.rows() != 1 || b.cols() != 1)
    throw std::invalid_argument("planar_flow: parameter shape mismatch");
  PlanarFlowParams<double> raw{u.value().row(0).transpose(), w.value().row(0).transpose(), b.value()(0, 0)};
  const InvertiblePlanarFlow<double> unit = ensure_invertible(raw);
  Matrix joint(batch, d + 1);
  for (Index r = 0; r < batch; ++r) {
    const PlanarStep<double> step = planar_forward(z.value().row(r).transpose(), unit);
    joint.row(r).head(d) = step.z.transpose();
    joint(r, d) = step.log_det;
  }
  Tape* t = z.tape();
  Var both = t->record(std::move(joint), {z, u, w, b}, [t, z, u, w, b, raw, batch, d](const Matrix& g) {
    Matrix dz(batch, d), du = Matrix::Zero(1, d), dw = Matrix::Zero(1, d), db = Matrix::Zero(1, 1);
    for (Index r = 0; r < batch; ++r) {
      const PlanarGradients<double> pg =
          planar_vjp<double>(z.value().row(r).transpose(), raw, g.row(r).head(d).transpose(), g(r, d));
      dz.row(r) = pg.z.transpose();
      du += pg.u.transpose();
      dw += pg.w.transpose();
      db(0, 0) += pg.b;
    }
    t->accumulate(z, dz);
    t->accumulate(u, du);
    t->accumulate(w, dw);
    t->accumulate(b, db);
  });
  return {slice_cols(both, 0, d), slice_cols(both, d, 1)};
}

}  // namespace cvaenf::ad
