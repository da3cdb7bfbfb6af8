#pragma once

// Planar normalizing flows: f(z) = z + u tanh(w.z + b), with the exact
// O(d) log-Jacobian ln|1 + u.phi(z)|, phi(z) = tanh'(w.z + b) w.

#include <Eigen/Core>

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

namespace cvaenf {

class FlowSingularityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename Scalar>
using FlowVector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

/// Unconstrained (learnable) parameters of one planar unit.
template <typename Scalar>
struct PlanarFlowParams {
  FlowVector<Scalar> u;
  FlowVector<Scalar> w;
  Scalar b = Scalar(0);

  Eigen::Index dim() const { return u.size(); }
};

/// Parameters that define an invertible planar map (w.u >= -1).
/// Obtained from ensure_invertible, or via `unchecked` for raw use.
template <typename Scalar>
class InvertiblePlanarFlow {
 public:
  static InvertiblePlanarFlow unchecked(FlowVector<Scalar> u, FlowVector<Scalar> w, Scalar b) {
    if (u.size() != w.size()) throw std::invalid_argument("planar flow: u and w differ in dimension");
    InvertiblePlanarFlow f;
    f.u_ = std::move(u);
    f.w_ = std::move(w);
    f.b_ = b;
    return f;
  }

  const FlowVector<Scalar>& u() const { return u_; }
  const FlowVector<Scalar>& w() const { return w_; }
  Scalar b() const { return b_; }
  Eigen::Index dim() const { return u_.size(); }

 private:
  FlowVector<Scalar> u_, w_;
  Scalar b_ = Scalar(0);
};

template <typename Scalar>
Scalar softplus(Scalar a) {
  using std::exp;
  using std::log1p;
  return (a > Scalar(0) ? a : Scalar(0)) + log1p(exp(-(a > Scalar(0) ? a : -a)));
}

template <typename Scalar>
Scalar sigmoid(Scalar a) {
  using std::exp;
  return a >= Scalar(0) ? Scalar(1) / (Scalar(1) + exp(-a)) : exp(a) / (Scalar(1) + exp(a));
}

/// u_hat = u + (m(w.u) - w.u) w / |w|^2 with m(a) = -1 + softplus(a), so that
/// w.u_hat = m(w.u) > -1. With w = 0 the map is a constant shift and u is kept.
template <typename Scalar>
InvertiblePlanarFlow<Scalar> ensure_invertible(const PlanarFlowParams<Scalar>& p) {
  if (p.u.size() != p.w.size()) throw std::invalid_argument("planar flow: u and w differ in dimension");
  const Scalar wn2 = p.w.squaredNorm();
  if (wn2 == Scalar(0)) return InvertiblePlanarFlow<Scalar>::unchecked(p.u, p.w, p.b);
  const Scalar s = p.w.dot(p.u);
  const Scalar m = Scalar(-1) + softplus(s);
  return InvertiblePlanarFlow<Scalar>::unchecked(p.u + ((m - s) / wn2) * p.w, p.w, p.b);
}

/// Already-constrained parameters pass through unchanged.
template <typename Scalar>
const InvertiblePlanarFlow<Scalar>& ensure_invertible(const InvertiblePlanarFlow<Scalar>& f) {
  return f;
}

template <typename Scalar>
struct PlanarStep {
  FlowVector<Scalar> z;
  Scalar log_det;
};

template <typename Derived, typename Scalar = typename Derived::Scalar>
PlanarStep<Scalar> planar_forward(const Eigen::MatrixBase<Derived>& z, const InvertiblePlanarFlow<Scalar>& f) {
  using std::abs;
  using std::log;
  using std::tanh;
  if (z.size() != f.dim()) throw std::invalid_argument("planar_forward: dimension mismatch");
  const Scalar h = tanh(f.w().dot(z) + f.b());
  const Scalar det = Scalar(1) + (Scalar(1) - h * h) * f.w().dot(f.u());
  if (abs(det) < Scalar(1e-12)) throw FlowSingularityError("planar flow Jacobian is numerically singular");
  return {z + f.u() * h, log(abs(det))};
}

/// Numerical inverse of one unit. The projection a = w.z solves the monotone
/// scalar equation w.y = a + (w.u) tanh(a + b); bisection-safeguarded Newton.
template <typename Derived, typename Scalar = typename Derived::Scalar>
FlowVector<Scalar> planar_inverse(const Eigen::MatrixBase<Derived>& y, const InvertiblePlanarFlow<Scalar>& f) {
  using std::abs;
  using std::tanh;
  const Scalar wu = f.w().dot(f.u());
  const Scalar wy = f.w().dot(y);
  const Scalar wn2 = f.w().squaredNorm();
  if (wn2 == Scalar(0)) return y - f.u() * tanh(f.b());
  if (wu < Scalar(-1)) throw FlowSingularityError("planar_inverse: unit is not invertible (w.u < -1)");
  // g(a) = a + wu tanh(a + b) - wy is nondecreasing; the root lies within |wu| of wy.
  Scalar lo = wy - abs(wu) - Scalar(1), hi = wy + abs(wu) + Scalar(1);
  Scalar a = wy;
  for (int it = 0; it < 200; ++it) {
    const Scalar t = tanh(a + f.b());
    const Scalar g = a + wu * t - wy;
    if (g > Scalar(0)) hi = a; else lo = a;
    const Scalar dg = Scalar(1) + wu * (Scalar(1) - t * t);
    Scalar next = dg > Scalar(1e-14) ? a - g / dg : (lo + hi) / Scalar(2);
    if (!(next > lo && next < hi)) next = (lo + hi) / Scalar(2);
    if (abs(next - a) <= Scalar(1e-15) * (Scalar(1) + abs(a))) { a = next; break; }
    a = next;
  }
  return y - f.u() * tanh(a + f.b());
}

/// Vector-Jacobian product of planar_forward through ensure_invertible,
/// i.e. gradients with respect to z and the raw (u, w, b).
template <typename Scalar>
struct PlanarGradients {
  FlowVector<Scalar> z, u, w;
  Scalar b;
};

template <typename Scalar>
PlanarGradients<Scalar> planar_vjp(const FlowVector<Scalar>& z, const PlanarFlowParams<Scalar>& raw,
                                   const FlowVector<Scalar>& grad_z_out, Scalar grad_log_det) {
  using std::tanh;
  const Eigen::Index d = z.size();
  const Scalar wn2 = raw.w.squaredNorm();
  const Scalar s = raw.w.dot(raw.u);
  const bool shifted = wn2 != Scalar(0);
  const Scalar m = Scalar(-1) + softplus(s);
  const Scalar k = shifted ? (m - s) / wn2 : Scalar(0);
  const FlowVector<Scalar> u_hat = raw.u + k * raw.w;
  const Scalar c = raw.w.dot(u_hat);

  const Scalar h = tanh(raw.w.dot(z) + raw.b);
  const Scalar hp = Scalar(1) - h * h;
  const Scalar det = Scalar(1) + hp * c;

  PlanarGradients<Scalar> g{grad_z_out, FlowVector<Scalar>::Zero(d), FlowVector<Scalar>::Zero(d), Scalar(0)};
  FlowVector<Scalar> g_uhat = grad_z_out * h;
  Scalar g_h = grad_z_out.dot(u_hat);
  const Scalar g_det = grad_log_det / det;
  const Scalar g_hp = g_det * c;
  const Scalar g_c = g_det * hp;
  g_h += g_hp * (Scalar(-2) * h);
  const Scalar g_a = g_h * hp;
  g.w += g_a * z;
  g.z += g_a * raw.w;
  g.b = g_a;
  g.w += g_c * u_hat;
  g_uhat += g_c * raw.w;
  g.u += g_uhat;
  if (shifted) {
    const Scalar g_k = g_uhat.dot(raw.w);
    g.w += k * g_uhat;
    const Scalar g_s = g_k * (sigmoid(s) - Scalar(1)) / wn2;
    const Scalar g_wn2 = -g_k * (m - s) / (wn2 * wn2);
    g.w += g_s * raw.u + Scalar(2) * g_wn2 * raw.w;
    g.u += g_s * raw.w;
  }
  return g;
}

/// Ordered composition f_K o ... o f_1 of planar units sharing one dimension.
template <typename Scalar>
class FlowChain {
 public:
  explicit FlowChain(Eigen::Index dim = 0) : dim_(dim) {}

  void push_back(InvertiblePlanarFlow<Scalar> unit) {
    if (unit.dim() != dim_) throw std::invalid_argument("flow chain: unit dimension mismatch");
    units_.push_back(std::move(unit));
  }
  void push_back(const PlanarFlowParams<Scalar>& raw) { push_back(ensure_invertible(raw)); }

  Eigen::Index dim() const { return dim_; }
  std::size_t size() const { return units_.size(); }
  bool empty() const { return units_.empty(); }
  const InvertiblePlanarFlow<Scalar>& operator[](std::size_t i) const { return units_[i]; }
  auto begin() const { return units_.begin(); }
  auto end() const { return units_.end(); }

 private:
  Eigen::Index dim_;
  std::vector<InvertiblePlanarFlow<Scalar>> units_;
};

template <typename Scalar>
struct LatentState {
  FlowVector<Scalar> z0;
  FlowVector<Scalar> z_final;
  Scalar sum_log_det = Scalar(0);
};

template <typename Derived, typename Scalar = typename Derived::Scalar>
LatentState<Scalar> chain_forward(const Eigen::MatrixBase<Derived>& z0, const FlowChain<Scalar>& chain) {
  if (z0.size() != chain.dim()) throw std::invalid_argument("chain_forward: dimension mismatch");
  LatentState<Scalar> state{z0, z0, Scalar(0)};
  for (std::size_t i = 0; i < chain.size(); ++i) {
    try {
      PlanarStep<Scalar> step = planar_forward(state.z_final, chain[i]);
      state.z_final = std::move(step.z);
      state.sum_log_det += step.log_det;
    } catch (const FlowSingularityError& e) {
      throw FlowSingularityError("flow unit " + std::to_string(i) + ": " + e.what());
    }
  }
  return state;
}

template <typename Derived, typename Scalar = typename Derived::Scalar>
FlowVector<Scalar> chain_inverse(const Eigen::MatrixBase<Derived>& z_final, const FlowChain<Scalar>& chain) {
  FlowVector<Scalar> z = z_final;
  for (std::size_t i = chain.size(); i-- > 0;) z = planar_inverse(z, chain[i]);
  return z;
}

template <typename Derived, typename Scalar = typename Derived::Scalar>
Scalar standard_normal_log_density(const Eigen::MatrixBase<Derived>& z) {
  using std::log;
  return Scalar(-0.5) * z.squaredNorm() -
         Scalar(0.5) * Scalar(z.size()) * log(Scalar(2) * std::numbers::pi_v<Scalar>);
}

/// ln q_K(z_K) = ln q_0(z_0) - sum_k ln|det df_k/dz_{k-1}|, with z_K = chain(z_0).
template <typename Derived, typename Scalar = typename Derived::Scalar>
Scalar transformed_log_density(const Eigen::MatrixBase<Derived>& z0, Scalar base_log_q0,
                               const FlowChain<Scalar>& chain) {
  return base_log_q0 - chain_forward(z0, chain).sum_log_det;
}

/// Density of the pushed-forward standard normal at a point of the output space.
template <typename Derived, typename Scalar = typename Derived::Scalar>
Scalar pushforward_log_density(const Eigen::MatrixBase<Derived>& z_final, const FlowChain<Scalar>& chain) {
  const FlowVector<Scalar> z0 = chain_inverse(z_final, chain);
  return transformed_log_density(z0, standard_normal_log_density(z0), chain);
}

struct GridBounds {
  double x_min = -4, x_max = 4, y_min = -4, y_max = 4;
};

struct DensityGridPoint {
  double zx, zy, density;
};

/// Pushes the cell centres of a regular base grid through a 2-D chain and attaches
/// the transformed standard-normal density at each image point.
std::vector<DensityGridPoint> export_density_grid(const FlowChain<double>& chain, const GridBounds& bounds,
                                                  int resolution_x, int resolution_y);

}  // namespace cvaenf
