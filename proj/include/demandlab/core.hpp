// Shared numeric types: grids, simplex vectors, Jacobians, quadrature,
// finite differences, line integrals, grid interpolation, seeded RNG.
#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace dlab {

using Eigen::MatrixXd;
using Eigen::VectorXd;

// ---------------------------------------------------------------------------
// Error types. Each maps to a named failure mode of some operation.

struct DomainMarginError : std::runtime_error { using std::runtime_error::runtime_error; };
struct OutsideImageError : std::runtime_error { using std::runtime_error::runtime_error; };
struct NotInImageError : std::runtime_error { using std::runtime_error::runtime_error; };
struct NonUniqueError : std::runtime_error { using std::runtime_error::runtime_error; };
struct NoTiesError : std::runtime_error { using std::runtime_error::runtime_error; };
struct SingularJacobianError : std::runtime_error { using std::runtime_error::runtime_error; };
struct DisconnectedCoverError : std::runtime_error { using std::runtime_error::runtime_error; };
struct RankDeficientError : std::runtime_error { using std::runtime_error::runtime_error; };
struct NoSupportError : std::runtime_error { using std::runtime_error::runtime_error; };
struct ExogeneityNotAssertedError : std::runtime_error { using std::runtime_error::runtime_error; };
struct UnsupportedVariantError : std::runtime_error { using std::runtime_error::runtime_error; };
struct BadRhoError : std::runtime_error { using std::runtime_error::runtime_error; };
struct DegenerateMarketsError : std::runtime_error { using std::runtime_error::runtime_error; };
struct WeakInstrumentError : std::runtime_error { using std::runtime_error::runtime_error; };
struct OverlappingSetsError : std::runtime_error { using std::runtime_error::runtime_error; };
struct MissingRoleError : std::runtime_error { using std::runtime_error::runtime_error; };
struct SeriesTooShortError : std::runtime_error { using std::runtime_error::runtime_error; };
struct ConfigInvalidError : std::runtime_error { using std::runtime_error::runtime_error; };
struct GraphParseError : std::runtime_error { using std::runtime_error::runtime_error; };
struct InvalidArgumentError : std::runtime_error { using std::runtime_error::runtime_error; };

// Condition-number cap above which a Jacobian is treated as singular and the
// node is flagged and skipped rather than inverted.
constexpr double kCondCap = 1e8;

// ---------------------------------------------------------------------------
// Axis-aligned box.

struct Box {
  VectorXd lower;
  VectorXd upper;

  int dim() const { return static_cast<int>(lower.size()); }
  bool contains(const VectorXd& z, double margin = 0.0) const;
  VectorXd clamp(const VectorXd& z) const;
};

// ---------------------------------------------------------------------------
// Rectangular grid over a box with a distinguished anchor node z0.
// The anchor must be strictly inside the box.

struct ZGrid {
  Box box;
  std::vector<int> points;  // nodes per dimension (>= 4 for cubic interpolation)
  std::vector<int> anchor;  // multi-index of z0

  ZGrid() = default;
  ZGrid(VectorXd lower, VectorXd upper, std::vector<int> pts, std::vector<int> anchor_idx);

  int dim() const { return static_cast<int>(points.size()); }
  double pitch(int k) const { return (box.upper[k] - box.lower[k]) / (points[k] - 1); }
  double max_pitch() const;
  long node_count() const;

  std::vector<int> unflatten(long flat) const;
  long flatten(const std::vector<int>& idx) const;
  VectorXd node(const std::vector<int>& idx) const;
  VectorXd node(long flat) const;
  VectorXd anchor_point() const { return node(anchor); }
  long anchor_flat() const { return flatten(anchor); }
  long nearest_flat(const VectorXd& z) const;
  bool is_boundary(long flat) const;
};

// ---------------------------------------------------------------------------
// Probability vector over the J inside goods; good 0 share is 1 - sum.

struct SimplexPoint {
  VectorXd s;

  SimplexPoint() = default;
  explicit SimplexPoint(VectorXd shares) : s(std::move(shares)) {}

  int goods() const { return static_cast<int>(s.size()); }
  double outside() const { return 1.0 - s.sum(); }
  bool interior(double eps = 1e-12) const;
  void require_interior(double eps = 1e-12) const;
};

// ---------------------------------------------------------------------------
// Square Jacobian with a condition-number estimate.

struct JacobianMatrix {
  MatrixXd m;
  double cond = 0.0;

  bool nonsingular(double cap = kCondCap) const { return cond < cap && std::isfinite(cond); }
};

double condition_number(const MatrixXd& m);
JacobianMatrix make_jacobian(MatrixXd m);

// Inverse that throws SingularJacobianError above the condition cap.
MatrixXd safe_inverse(const MatrixXd& m, double cap = kCondCap);

// ---------------------------------------------------------------------------
// Central-difference Jacobian of a vector-valued map. Every perturbed point
// must stay inside `domain` or DomainMarginError is thrown.

JacobianMatrix finite_diff_jacobian(const std::function<VectorXd(const VectorXd&)>& f,
                                    const VectorXd& z, double step, const Box& domain);

// ---------------------------------------------------------------------------
// Composite-Simpson line integral of a Jacobian field along the straight
// segment z0 -> z1:  integral_0^1 J(z0 + u (z1 - z0)) (z1 - z0) du.
// `nodes` is forced odd. If `domain` is given the whole segment must lie in it.

VectorXd line_integrate_gradient(const std::function<MatrixXd(const VectorXd&)>& jac_field,
                                 const VectorXd& z0, const VectorXd& z1, int nodes = 101,
                                 const Box* domain = nullptr);

// ---------------------------------------------------------------------------
// Deterministic RNG. Streams are derived from one master seed with splitmix64
// so per-market draws are reproducible and order-independent across markets.

std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream, std::uint64_t substream = 0);

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed ? seed : 0x9e3779b97f4a7c15ULL) {}

  double uniform();                      // [0, 1)
  double uniform(double a, double b);    // [a, b)
  double normal();                       // N(0, 1)
  int uniform_int(int n);                // {0, ..., n-1}

 private:
  std::uint64_t next_();
  std::uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// ---------------------------------------------------------------------------
// Gauss-Hermite rule (weight exp(-x^2)) by Golub-Welsch, and the rescaled
// rule for expectations over a standard normal.

struct Quadrature {
  VectorXd nodes;
  VectorXd weights;
};

Quadrature gauss_hermite(int n);
Quadrature normal_quadrature(int n);  // E[f(Z)] ~= sum_i w_i f(x_i), Z ~ N(0,1)

// ---------------------------------------------------------------------------
// Separable interpolation of vector-valued data on a ZGrid. Cubic uses the
// Catmull-Rom kernel (C^1, exact on quadratics) with quadratic-extrapolation
// ghost nodes at the box edges; linear is the multilinear fallback.

enum class InterpOrder { Linear, Cubic };

class GridInterpolant {
 public:
  GridInterpolant() = default;
  GridInterpolant(ZGrid grid, MatrixXd values, InterpOrder order = InterpOrder::Cubic);

  // values: node_count x channels, rows in flatten() order.
  const ZGrid& grid() const { return grid_; }
  int channels() const { return static_cast<int>(values_.cols()); }

  VectorXd value(const VectorXd& z) const;
  MatrixXd jacobian(const VectorXd& z) const;  // channels x dim

 private:
  VectorXd eval_(const VectorXd& z, int deriv_dim) const;
  ZGrid grid_;
  MatrixXd values_;
  InterpOrder order_ = InterpOrder::Cubic;
};

}  // namespace dlab
