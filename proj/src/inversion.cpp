#include "demandlab/inversion.hpp"

#include <algorithm>
#include <cmath>

namespace dlab {

CcpSurface::CcpSurface(int market_id, ZGrid grid, MatrixXd values, InterpOrder order,
                       std::shared_ptr<const ExactFn> exact)
    : market_id_(market_id),
      grid_(std::move(grid)),
      values_(std::move(values)),
      exact_(std::move(exact)) {
  for (long i = 0; i < values_.rows(); ++i) {
    if (!SimplexPoint(values_.row(i).transpose()).interior(1e-13)) {
      throw OutsideImageError("CcpSurface: node value not strictly interior to the simplex");
    }
  }
  interp_ = GridInterpolant(grid_, values_, order);
}

VectorXd CcpSurface::eval_exact(const VectorXd& z) const {
  if (!exact_) return eval(z);
  return (*exact_)(z);
}

double CcpSurface::log_share_derivative(int j, const VectorXd& z, int k, double step) const {
  if (exact_) {
    VectorXd hi = z, lo = z;
    hi[k] += step;
    lo[k] -= step;
    auto share = [&](const VectorXd& q) -> double {
      VectorXd s = (*exact_)(q);
      return j < s.size() ? s[j] : 1.0 - s.sum();  // j == goods() means the outside good
    };
    return (std::log(share(hi)) - std::log(share(lo))) / (2.0 * step);
  }
  VectorXd s = eval(z);
  MatrixXd jac = jacobian(z);
  if (j < s.size()) return jac(j, k) / s[j];
  return -jac.col(k).sum() / (1.0 - s.sum());
}

// ---------------------------------------------------------------------------

VectorXd invert_logit(const SimplexPoint& s) {
  s.require_interior();
  double s0 = s.outside();
  VectorXd delta(s.goods());
  for (int j = 0; j < s.goods(); ++j) delta[j] = std::log(s.s[j]) - std::log(s0);
  return delta;
}

VectorXd invert_nested_logit(const SimplexPoint& s, double theta, const std::vector<int>& nest_of_good) {
  s.require_interior();
  if (static_cast<int>(nest_of_good.size()) != s.goods()) {
    throw InvalidArgumentError("invert_nested_logit: nest map size mismatch");
  }
  double s0 = s.outside();
  VectorXd delta(s.goods());
  for (int j = 0; j < s.goods(); ++j) {
    double nest_total = 0.0;
    for (int k = 0; k < s.goods(); ++k) {
      if (nest_of_good[k] == nest_of_good[j]) nest_total += s.s[k];
    }
    double within = s.s[j] / nest_total;
    delta[j] = std::log(s.s[j]) - std::log(s0) - theta * std::log(within);
  }
  return delta;
}

VectorXd invert_sigma(const std::function<VectorXd(const VectorXd&)>& sigma, const SimplexPoint& s,
                      const VectorXd& start, double tol, int max_iter) {
  s.require_interior();
  VectorXd delta = start;
  VectorXd resid = sigma(delta) - s.s;
  double err = resid.cwiseAbs().maxCoeff();
  const double fd_step = 1e-6;
  for (int it = 0; it < max_iter && err > tol; ++it) {
    MatrixXd jac(resid.size(), delta.size());
    for (int k = 0; k < delta.size(); ++k) {
      VectorXd hi = delta, lo = delta;
      hi[k] += fd_step;
      lo[k] -= fd_step;
      jac.col(k) = (sigma(hi) - sigma(lo)) / (2.0 * fd_step);
    }
    if (!(condition_number(jac) < kCondCap)) {
      throw OutsideImageError("invert_sigma: singular share Jacobian");
    }
    VectorXd step = jac.colPivHouseholderQr().solve(-resid);
    // damping: halve until the residual decreases
    double lambda = 1.0;
    bool improved = false;
    for (int h = 0; h < 40; ++h) {
      VectorXd cand = delta + lambda * step;
      VectorXd r2 = sigma(cand) - s.s;
      double e2 = r2.cwiseAbs().maxCoeff();
      if (e2 < err) {
        delta = cand;
        resid = r2;
        err = e2;
        improved = true;
        break;
      }
      lambda *= 0.5;
    }
    if (!improved) break;
  }
  if (err > tol) throw OutsideImageError("invert_sigma: no convergence, target may be outside the image");
  return delta;
}

// ---------------------------------------------------------------------------

namespace {

InversionResult newton_on_surface(const CcpSurface& surf, const VectorXd& target, VectorXd z,
                                  double tol, int max_iter) {
  const Box& box = surf.grid().box;
  InversionResult res;
  VectorXd resid = surf.eval(z) - target;
  double err = resid.cwiseAbs().maxCoeff();
  int it = 0;
  for (; it < max_iter && err > tol; ++it) {
    MatrixXd jac = surf.jacobian(z);
    if (!(condition_number(jac) < kCondCap)) break;
    VectorXd step = jac.colPivHouseholderQr().solve(-resid);
    double lambda = 1.0;
    bool improved = false;
    for (int h = 0; h < 30; ++h) {
      VectorXd cand = box.clamp(z + lambda * step);
      VectorXd r2 = surf.eval(cand) - target;
      double e2 = r2.cwiseAbs().maxCoeff();
      if (e2 < err) {
        z = cand;
        resid = r2;
        err = e2;
        improved = true;
        break;
      }
      lambda *= 0.5;
    }
    if (!improved) break;
  }
  res.z = z;
  res.residual = err;
  res.iterations = it;
  res.converged = err <= tol;
  return res;
}

}  // namespace

InversionResult solve_z_star_soft(const CcpSurface& surface, const SimplexPoint& target,
                                  const SolveOpts& opts, const VectorXd* warm_start) {
  const ZGrid& g = surface.grid();
  InversionResult best;
  best.residual = std::numeric_limits<double>::infinity();

  std::vector<VectorXd> starts;
  if (warm_start != nullptr && g.box.contains(*warm_start)) starts.push_back(*warm_start);
  const int m = std::max(1, opts.multistart_per_dim);
  long total = 1;
  for (int k = 0; k < g.dim(); ++k) total *= m;
  for (long c = 0; c < total; ++c) {
    long rem = c;
    VectorXd z(g.dim());
    for (int k = g.dim() - 1; k >= 0; --k) {
      int i = static_cast<int>(rem % m);
      rem /= m;
      double frac = (i + 1.0) / (m + 1.0);
      z[k] = g.box.lower[k] + frac * (g.box.upper[k] - g.box.lower[k]);
    }
    starts.push_back(z);
  }

  std::vector<InversionResult> roots;
  for (const auto& s0 : starts) {
    InversionResult r = newton_on_surface(surface, target.s, s0, opts.tol, opts.max_iter);
    if (r.residual < best.residual) best = r;
    if (r.converged) {
      roots.push_back(r);
      if (warm_start != nullptr) break;  // warm-started scans accept the first root
    }
  }
  double pitch = g.max_pitch() * opts.nonunique_pitches;
  for (size_t a = 0; a + 1 < roots.size(); ++a) {
    for (size_t b = a + 1; b < roots.size(); ++b) {
      if ((roots[a].z - roots[b].z).norm() > pitch) {
        throw NonUniqueError("solve_z_star: two distinct solutions; injectivity violated");
      }
    }
  }
  return best;
}

InversionResult solve_z_star(const CcpSurface& surface, const SimplexPoint& target,
                             const SolveOpts& opts) {
  target.require_interior();
  InversionResult res = solve_z_star_soft(surface, target, opts);
  if (!res.converged) {
    throw NotInImageError("solve_z_star: target share vector outside the numerical image");
  }
  return res;
}

InjectivityReport check_injectivity(const CcpSurface& surface, double det_eps, int collision_stride) {
  const ZGrid& g = surface.grid();
  InjectivityReport rep;
  rep.min_abs_det = std::numeric_limits<double>::infinity();
  long singular = 0;
  const bool square = surface.goods() == g.dim();
  for (long i = 0; i < g.node_count(); ++i) {
    MatrixXd jac = surface.jacobian(g.node(i));
    double det;
    if (square) {
      det = jac.determinant();
    } else {
      det = jac.jacobiSvd().singularValues().minCoeff();  // smallest singular value as rank proxy
    }
    rep.min_abs_det = std::min(rep.min_abs_det, std::abs(det));
    if (std::abs(det) < det_eps || !(condition_number(jac) < kCondCap)) ++singular;
  }
  rep.nodes_checked = g.node_count();
  rep.frac_near_singular = static_cast<double>(singular) / g.node_count();

  // collision scan over a coarse subsample
  std::vector<long> sub;
  for (long i = 0; i < g.node_count(); ++i) {
    auto idx = g.unflatten(i);
    bool keep = true;
    for (int k = 0; k < g.dim(); ++k) keep = keep && (idx[k] % collision_stride == 0);
    if (keep) sub.push_back(i);
  }
  double pitch = g.max_pitch();
  const double s_tol = 1e-9;
  for (size_t a = 0; a + 1 < sub.size(); ++a) {
    for (size_t b = a + 1; b < sub.size(); ++b) {
      ++rep.pairs_checked;
      VectorXd sa = surface.values().row(sub[a]);
      VectorXd sb = surface.values().row(sub[b]);
      if ((sa - sb).cwiseAbs().maxCoeff() < s_tol &&
          (g.node(sub[a]) - g.node(sub[b])).norm() > pitch) {
        ++rep.collisions;
      }
    }
  }
  return rep;
}

}  // namespace dlab
