// Inversion of observed CCP surfaces: recover index vectors from shares and
// recover the consumer-observable point that attains a target share vector.
#pragma once

#include <functional>
#include <memory>
#include <optional>

#include "demandlab/core.hpp"

namespace dlab {

// Per-market conditional choice probabilities on a z-grid. Values are stored
// at the nodes and queried through a C^1 interpolant. In population mode the
// surface also carries the exact CCP map, used where grid-level accuracy is
// not enough (e.g. the semiparametric nested-logit derivatives).
class CcpSurface {
 public:
  using ExactFn = std::function<VectorXd(const VectorXd&)>;

  CcpSurface() = default;
  CcpSurface(int market_id, ZGrid grid, MatrixXd values, InterpOrder order = InterpOrder::Cubic,
             std::shared_ptr<const ExactFn> exact = nullptr);

  int market_id() const { return market_id_; }
  int goods() const { return static_cast<int>(values_.cols()); }
  const ZGrid& grid() const { return grid_; }
  const MatrixXd& values() const { return values_; }
  bool has_exact() const { return exact_ != nullptr; }

  VectorXd eval(const VectorXd& z) const { return interp_.value(z); }
  SimplexPoint at_node(long flat) const { return SimplexPoint(values_.row(flat).transpose()); }
  MatrixXd jacobian(const VectorXd& z) const { return interp_.jacobian(z); }  // goods x dim

  VectorXd eval_exact(const VectorXd& z) const;
  // d ln s_j / d z_k by central differences on the exact map when available,
  // otherwise from the interpolant.
  double log_share_derivative(int j, const VectorXd& z, int k, double step = 1e-4) const;

 private:
  int market_id_ = -1;
  ZGrid grid_;
  MatrixXd values_;
  GridInterpolant interp_;
  std::shared_ptr<const ExactFn> exact_;
};

struct InversionResult {
  VectorXd z;
  double residual = 0.0;
  int iterations = 0;
  bool converged = false;
};

struct SolveOpts {
  double tol = 1e-8;
  int max_iter = 200;
  int multistart_per_dim = 3;   // seeds per dimension (3 -> 9 starts when dim = 2)
  double nonunique_pitches = 1.0;  // distinct-root threshold in units of grid pitch
};

// Index vector from shares for closed-form families.
VectorXd invert_logit(const SimplexPoint& s);
VectorXd invert_nested_logit(const SimplexPoint& s, double theta, const std::vector<int>& nest_of_good);

// Damped-Newton inversion of an analytic demand map sigma(delta) = s.
// Throws OutsideImageError if the iteration fails to reach tol.
VectorXd invert_sigma(const std::function<VectorXd(const VectorXd&)>& sigma, const SimplexPoint& s,
                      const VectorXd& start, double tol = 1e-10, int max_iter = 200);

// Newton-with-multistart solve of surface(z) = target on the grid box.
// Throws NotInImageError / NonUniqueError; the _soft variant reports instead.
InversionResult solve_z_star(const CcpSurface& surface, const SimplexPoint& target,
                             const SolveOpts& opts = {});
InversionResult solve_z_star_soft(const CcpSurface& surface, const SimplexPoint& target,
                                  const SolveOpts& opts = {}, const VectorXd* warm_start = nullptr);

struct InjectivityReport {
  double min_abs_det = 0.0;
  double frac_near_singular = 0.0;
  long collisions = 0;
  long nodes_checked = 0;
  long pairs_checked = 0;
};

// Grid diagnostic for Assumption-level injectivity: determinant scan plus a
// pairwise collision check on a coarse subsample.
InjectivityReport check_injectivity(const CcpSurface& surface, double det_eps = 1e-10,
                                    int collision_stride = 4);

}  // namespace dlab
