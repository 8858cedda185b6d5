#include "demandlab/core.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>

namespace dlab {

// ---------------------------------------------------------------------------
// Box

bool Box::contains(const VectorXd& z, double margin) const {
  if (z.size() != lower.size()) return false;
  for (int k = 0; k < dim(); ++k) {
    if (z[k] < lower[k] + margin || z[k] > upper[k] - margin) return false;
  }
  return true;
}

VectorXd Box::clamp(const VectorXd& z) const {
  VectorXd out = z;
  for (int k = 0; k < dim(); ++k) out[k] = std::clamp(out[k], lower[k], upper[k]);
  return out;
}

// ---------------------------------------------------------------------------
// ZGrid

ZGrid::ZGrid(VectorXd lower, VectorXd upper, std::vector<int> pts, std::vector<int> anchor_idx)
    : box{std::move(lower), std::move(upper)}, points(std::move(pts)), anchor(std::move(anchor_idx)) {
  if (box.lower.size() != box.upper.size() || static_cast<int>(points.size()) != box.lower.size() ||
      anchor.size() != points.size()) {
    throw InvalidArgumentError("ZGrid: dimension mismatch");
  }
  for (int k = 0; k < dim(); ++k) {
    if (points[k] < 2) throw InvalidArgumentError("ZGrid: need at least 2 points per dimension");
    if (box.upper[k] <= box.lower[k]) throw InvalidArgumentError("ZGrid: empty box");
    if (anchor[k] <= 0 || anchor[k] >= points[k] - 1) {
      throw InvalidArgumentError("ZGrid: anchor must be strictly inside the box");
    }
  }
}

double ZGrid::max_pitch() const {
  double p = 0.0;
  for (int k = 0; k < dim(); ++k) p = std::max(p, pitch(k));
  return p;
}

long ZGrid::node_count() const {
  long n = 1;
  for (int p : points) n *= p;
  return n;
}

std::vector<int> ZGrid::unflatten(long flat) const {
  std::vector<int> idx(points.size());
  for (int k = dim() - 1; k >= 0; --k) {
    idx[k] = static_cast<int>(flat % points[k]);
    flat /= points[k];
  }
  return idx;
}

long ZGrid::flatten(const std::vector<int>& idx) const {
  long flat = 0;
  for (int k = 0; k < dim(); ++k) flat = flat * points[k] + idx[k];
  return flat;
}

VectorXd ZGrid::node(const std::vector<int>& idx) const {
  VectorXd z(dim());
  for (int k = 0; k < dim(); ++k) z[k] = box.lower[k] + idx[k] * pitch(k);
  return z;
}

VectorXd ZGrid::node(long flat) const { return node(unflatten(flat)); }

long ZGrid::nearest_flat(const VectorXd& z) const {
  std::vector<int> idx(points.size());
  for (int k = 0; k < dim(); ++k) {
    int i = static_cast<int>(std::lround((z[k] - box.lower[k]) / pitch(k)));
    idx[k] = std::clamp(i, 0, points[k] - 1);
  }
  return flatten(idx);
}

bool ZGrid::is_boundary(long flat) const {
  auto idx = unflatten(flat);
  for (int k = 0; k < dim(); ++k) {
    if (idx[k] == 0 || idx[k] == points[k] - 1) return true;
  }
  return false;
}

// ---------------------------------------------------------------------------
// SimplexPoint

bool SimplexPoint::interior(double eps) const {
  if (s.size() == 0) return false;
  for (int j = 0; j < s.size(); ++j) {
    if (!(s[j] > eps)) return false;
  }
  return s.sum() < 1.0 - eps;
}

void SimplexPoint::require_interior(double eps) const {
  if (!interior(eps)) throw OutsideImageError("share vector is not strictly interior to the simplex");
}

// ---------------------------------------------------------------------------
// Jacobians

double condition_number(const MatrixXd& m) {
  Eigen::JacobiSVD<MatrixXd> svd(m);
  const auto& sv = svd.singularValues();
  if (sv.size() == 0 || sv[sv.size() - 1] <= 0.0) return std::numeric_limits<double>::infinity();
  return sv[0] / sv[sv.size() - 1];
}

JacobianMatrix make_jacobian(MatrixXd m) {
  JacobianMatrix j;
  j.cond = condition_number(m);
  j.m = std::move(m);
  return j;
}

MatrixXd safe_inverse(const MatrixXd& m, double cap) {
  double c = condition_number(m);
  if (!(c < cap)) throw SingularJacobianError("matrix condition number " + std::to_string(c) + " above cap");
  return m.inverse();
}

JacobianMatrix finite_diff_jacobian(const std::function<VectorXd(const VectorXd&)>& f,
                                    const VectorXd& z, double step, const Box& domain) {
  if (step <= 0.0) throw InvalidArgumentError("finite_diff_jacobian: step must be positive");
  const int d = static_cast<int>(z.size());
  for (int k = 0; k < d; ++k) {
    VectorXd hi = z, lo = z;
    hi[k] += step;
    lo[k] -= step;
    if (!domain.contains(hi) || !domain.contains(lo)) {
      throw DomainMarginError("finite_diff_jacobian: perturbed point leaves the domain box");
    }
  }
  MatrixXd jac;
  for (int k = 0; k < d; ++k) {
    VectorXd hi = z, lo = z;
    hi[k] += step;
    lo[k] -= step;
    VectorXd col = (f(hi) - f(lo)) / (2.0 * step);
    if (k == 0) jac.resize(col.size(), d);
    jac.col(k) = col;
  }
  return make_jacobian(std::move(jac));
}

VectorXd line_integrate_gradient(const std::function<MatrixXd(const VectorXd&)>& jac_field,
                                 const VectorXd& z0, const VectorXd& z1, int nodes,
                                 const Box* domain) {
  if (nodes < 3) nodes = 3;
  if (nodes % 2 == 0) ++nodes;
  const VectorXd dz = z1 - z0;
  if (dz.norm() == 0.0) return VectorXd::Zero(jac_field(z0).rows());
  if (domain != nullptr) {
    for (int i = 0; i < nodes; ++i) {
      double u = static_cast<double>(i) / (nodes - 1);
      if (!domain->contains(z0 + u * dz)) {
        throw DomainMarginError("line_integrate_gradient: segment exits the domain box");
      }
    }
  }
  const double h = 1.0 / (nodes - 1);
  VectorXd acc;
  for (int i = 0; i < nodes; ++i) {
    double u = i * h;
    double w = (i == 0 || i == nodes - 1) ? 1.0 : (i % 2 == 1 ? 4.0 : 2.0);
    VectorXd term = jac_field(z0 + u * dz) * dz;
    if (i == 0) acc = VectorXd::Zero(term.size());
    acc += w * term;
  }
  return acc * (h / 3.0);
}

// ---------------------------------------------------------------------------
// RNG

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream, std::uint64_t substream) {
  return splitmix64(splitmix64(master ^ 0x2545f4914f6cdd1dULL * (stream + 1)) + substream);
}

std::uint64_t Rng::next_() {
  // xorshift* core over splitmix-initialized state
  state_ ^= state_ >> 12;
  state_ ^= state_ << 25;
  state_ ^= state_ >> 27;
  return state_ * 0x2545f4914f6cdd1dULL;
}

double Rng::uniform() {
  return static_cast<double>(next_() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double a, double b) { return a + (b - a) * uniform(); }

double Rng::normal() {
  if (have_spare_) {
    have_spare_ = false;
    return spare_;
  }
  double u1 = 0.0, u2 = 0.0, r2 = 0.0;
  do {
    u1 = 2.0 * uniform() - 1.0;
    u2 = 2.0 * uniform() - 1.0;
    r2 = u1 * u1 + u2 * u2;
  } while (r2 >= 1.0 || r2 == 0.0);
  double f = std::sqrt(-2.0 * std::log(r2) / r2);
  spare_ = u2 * f;
  have_spare_ = true;
  return u1 * f;
}

int Rng::uniform_int(int n) {
  if (n <= 0) throw InvalidArgumentError("uniform_int: n must be positive");
  return static_cast<int>(uniform() * n) % n;
}

// ---------------------------------------------------------------------------
// Quadrature

Quadrature gauss_hermite(int n) {
  if (n < 1) throw InvalidArgumentError("gauss_hermite: n must be positive");
  MatrixXd t = MatrixXd::Zero(n, n);
  for (int k = 1; k < n; ++k) {
    double b = std::sqrt(k / 2.0);
    t(k, k - 1) = b;
    t(k - 1, k) = b;
  }
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(t);
  Quadrature q;
  q.nodes = es.eigenvalues();
  q.weights.resize(n);
  const double sqrt_pi = std::sqrt(M_PI);
  for (int i = 0; i < n; ++i) {
    double v0 = es.eigenvectors()(0, i);
    q.weights[i] = sqrt_pi * v0 * v0;
  }
  return q;
}

Quadrature normal_quadrature(int n) {
  Quadrature q = gauss_hermite(n);
  q.nodes *= std::sqrt(2.0);
  q.weights /= std::sqrt(M_PI);
  return q;
}

// ---------------------------------------------------------------------------
// GridInterpolant

GridInterpolant::GridInterpolant(ZGrid grid, MatrixXd values, InterpOrder order)
    : grid_(std::move(grid)), values_(std::move(values)), order_(order) {
  if (values_.rows() != grid_.node_count()) {
    throw InvalidArgumentError("GridInterpolant: values row count does not match grid");
  }
  if (order_ == InterpOrder::Cubic) {
    for (int p : grid_.points) {
      if (p < 4) { order_ = InterpOrder::Linear; break; }
    }
  }
}

namespace {

inline void cubic_weights(double t, double* w) {
  w[0] = t * (-0.5 + t * (1.0 - 0.5 * t));
  w[1] = 1.0 + t * t * (-2.5 + 1.5 * t);
  w[2] = t * (0.5 + t * (2.0 - 1.5 * t));
  w[3] = t * t * (-0.5 + 0.5 * t);
}

inline void cubic_dweights(double t, double* w) {
  w[0] = -0.5 + t * (2.0 - 1.5 * t);
  w[1] = t * (-5.0 + 4.5 * t);
  w[2] = 0.5 + t * (4.0 - 4.5 * t);
  w[3] = t * (-1.0 + 1.5 * t);
}

}  // namespace

VectorXd GridInterpolant::eval_(const VectorXd& z, int deriv_dim) const {
  const int d = grid_.dim();
  const int stencil = (order_ == InterpOrder::Cubic) ? 4 : 2;
  std::vector<int> cell(d);
  std::vector<std::array<double, 4>> w(d);
  for (int k = 0; k < d; ++k) {
    double pk = grid_.pitch(k);
    double u = (z[k] - grid_.box.lower[k]) / pk;
    int c = static_cast<int>(std::floor(u));
    c = std::clamp(c, 0, grid_.points[k] - 2);
    double t = u - c;
    cell[k] = c;
    if (order_ == InterpOrder::Cubic) {
      if (k == deriv_dim) {
        cubic_dweights(t, w[k].data());
        for (double& x : w[k]) x /= pk;
      } else {
        cubic_weights(t, w[k].data());
      }
    } else {
      if (k == deriv_dim) {
        w[k] = {-1.0 / pk, 1.0 / pk, 0.0, 0.0};
      } else {
        w[k] = {1.0 - t, t, 0.0, 0.0};
      }
    }
  }

  const int offset = (order_ == InterpOrder::Cubic) ? -1 : 0;
  // Recursive tensor contraction; out-of-range stencil slots use
  // quadratic-extrapolation ghosts so edge cells keep full accuracy.
  std::function<VectorXd(int, std::vector<int>&)> gather = [&](int k, std::vector<int>& idx) -> VectorXd {
    auto child = [&](int i) -> VectorXd {
      const int nk = grid_.points[k];
      auto at = [&](int j) -> VectorXd {
        idx[k] = j;
        if (k + 1 == d) return values_.row(grid_.flatten(idx)).transpose();
        return gather(k + 1, idx);
      };
      if (i < 0) return 3.0 * at(0) - 3.0 * at(1) + at(2);
      if (i > nk - 1) return 3.0 * at(nk - 1) - 3.0 * at(nk - 2) + at(nk - 3);
      return at(i);
    };
    VectorXd acc = VectorXd::Zero(values_.cols());
    for (int s = 0; s < stencil; ++s) {
      double wk = w[k][s];
      if (wk == 0.0) continue;
      acc += wk * child(cell[k] + offset + s);
    }
    return acc;
  };
  std::vector<int> idx(d, 0);
  return gather(0, idx);
}

VectorXd GridInterpolant::value(const VectorXd& z) const { return eval_(z, -1); }

MatrixXd GridInterpolant::jacobian(const VectorXd& z) const {
  MatrixXd jac(values_.cols(), grid_.dim());
  for (int k = 0; k < grid_.dim(); ++k) jac.col(k) = eval_(z, k);
  return jac;
}

}  // namespace dlab
