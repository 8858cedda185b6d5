// Data-generating processes: markets with known demand systems, endogenous
// prices on a finite lattice, demand shocks, instruments, and consumers.
#pragma once

#include <memory>
#include <optional>
#include <vector>

#include "demandlab/core.hpp"
#include "demandlab/inversion.hpp"

namespace dlab {

enum class Variant { MixedLogit, NestedLogit, MixedCes };

// ---------------------------------------------------------------------------
// Index function g: R^d -> R^J. When d == J the function is constructed in
// the normalized representation: g(z0) = 0 and dg/dz(z0) = I.

enum class GFamily { Linear, Quadratic, SigmoidWarped };

struct GFunction {
  GFamily family = GFamily::Linear;
  VectorXd z0;                  // anchor, g(z0) = 0
  MatrixXd lin;                 // J x d linear part; identity when d == J
  std::vector<MatrixXd> quad;   // per-good symmetric d x d curvature (Quadratic)
  VectorXd warp_scale;          // per-good c_j (SigmoidWarped)
  MatrixXd warp_dir;            // J x d directions b_j (SigmoidWarped)

  int in_dim() const { return static_cast<int>(z0.size()); }
  int out_dim() const { return static_cast<int>(lin.rows()); }
  VectorXd eval(const VectorXd& z) const;
  MatrixXd jacobian(const VectorXd& z) const;  // J x d

  static GFunction linear(VectorXd z0, int out_dim = -1);
  static GFunction linear_slopes(VectorXd z0, MatrixXd slopes);
  static GFunction quadratic(VectorXd z0, std::vector<MatrixXd> q);
  static GFunction sigmoid_warped(VectorXd z0, VectorXd scale, MatrixXd dir);
};

// ---------------------------------------------------------------------------
// Market-level shock, instrument, and characteristics laws.

enum class ShockFamily { UniformBox, Gaussian, AtomJitter };

struct ShockLaw {
  ShockFamily family = ShockFamily::UniformBox;
  VectorXd mean;                 // zero for the normalized model
  double radius = 0.25;          // uniform half-width / gaussian truncation
  double sd = 0.1;               // gaussian only
  std::vector<double> atoms;     // AtomJitter: per-component atom set
  double jitter = 0.0;           // AtomJitter: uniform jitter half-width

  VectorXd draw(Rng& rng, int dim) const;
  double support_radius() const;
};

struct InstrumentLaw {
  int dim = 0;            // 0 means "one per good"
  double radius = 0.5;    // w ~ U(-radius, radius) per component
  VectorXd draw(Rng& rng, int goods) const;
};

enum class XMode { Exogenous, CommonFactor, XiToX };

struct XLaw {
  std::vector<VectorXd> cells;  // discrete support of x_t; may hold a single cell
  XMode mode = XMode::Exogenous;
  double factor_loading = 0.0;  // CommonFactor: xi shift is loading * V, V in {-1,+1}
};

// Reduced-form pricing p_j = exp(c0 + c_w w_j + c_xi xi_j + c_x . x + c_x_own x_j),
// snapped to a finite lattice so exact price ties occur across markets. The
// own-characteristic term applies when x carries one component per good.
struct PriceRule {
  double c0 = 0.0;
  double c_w = 0.4;
  double c_xi = 0.0;
  VectorXd c_x;                 // may be empty
  double c_x_own = 0.0;
  double lattice_pitch = 0.05;  // 0 disables snapping

  VectorXd price(const VectorXd& w, const VectorXd& xi, const VectorXd& x) const;
};

// ---------------------------------------------------------------------------
// Variant parameter blocks.

struct MixedLogitParams {
  double alpha0 = 0.0;        // ln price coefficient at y = 0, nu = 0
  VectorXd alpha_y;           // income loadings (H)
  double alpha_nu = 0.0;      // random coefficient on ln alpha
  VectorXd sigma_nu;          // per-good taste loading on nu (J)
  MatrixXd beta_x;            // J x dim(x) fixed loadings
  int gh_nodes = 32;
  bool is_plain_logit() const;
};

struct NestedParams {
  std::vector<int> nest_of_good;  // nests numbered from 1; outside good is nest 0
  double theta = 0.0;             // within-nest correlation, [0, 1)
  double alpha0 = 0.0;
  VectorXd alpha_y;
  MatrixXd beta_x;
};

struct CesParams {
  double rho = 0.5;       // in (0,1)
  double mu_beta = 0.0;   // random coefficient on x-load, N(mu, sd^2)
  double sd_beta = 0.0;
  MatrixXd x_load;        // J x dim(x)
  int gh_nodes = 32;
};

// ---------------------------------------------------------------------------

struct DgpSpec {
  Variant variant = Variant::MixedLogit;
  int J = 2;
  int T = 200;
  std::uint64_t seed = 1;
  GFunction g;
  ShockLaw shock;
  PriceRule price;
  InstrumentLaw instrument;
  XLaw x;
  ZGrid grid;
  VectorXd y0;  // fixed consumer observable level used by the pipeline (H >= 0)
  MixedLogitParams logit;
  NestedParams nested;
  CesParams ces;

  int x_dim() const { return x.cells.empty() ? 0 : static_cast<int>(x.cells[0].size()); }
  void validate() const;
};

struct MarketRecord {
  int id = -1;
  VectorXd x;
  int x_cell = 0;
  VectorXd p;
  VectorXd w;
  VectorXd xi_true;
  double factor_v = 0.0;  // hidden common factor (diagnostics only)
};

struct ConsumerDraw {
  VectorXd z;
  VectorXd y;
  int choice = -1;  // 0 = outside good, 1..J inside (discrete variants)
  VectorXd q;       // CES quantities, [q0, q1, ..., qJ]
};

struct CesDemand {
  VectorXd inside;      // q1..qJ
  double outside = 0.0;  // q0
};

// ---------------------------------------------------------------------------
// Operations

// Share maps over utility/index vectors (outside good normalized to zero).
VectorXd logit_shares(const VectorXd& v);
VectorXd nested_logit_shares(const VectorXd& delta, double theta,
                             const std::vector<int>& nest_of_good);

// Exact population choice probabilities sigma(g(z) + xi, y, p, x).
SimplexPoint structural_ccp(const DgpSpec& spec, const MarketRecord& market, const VectorXd& z,
                            const VectorXd& y);

// Expected Marshallian demand for the mixed-CES variant (income y > 0).
CesDemand ces_expected_demand(const DgpSpec& spec, const MarketRecord& market, const VectorXd& z,
                              double y);
// Demand of a single consumer with realized taste draw beta (used by the
// sampling path and by per-draw budget checks).
CesDemand ces_consumer_demand(const DgpSpec& spec, const MarketRecord& market, const VectorXd& z,
                              double y, double beta);

// Assemble market records from shock/instrument draws under the price rule.
std::vector<MarketRecord> price_markets(const DgpSpec& spec, const std::vector<VectorXd>& shocks,
                                        const std::vector<VectorXd>& instruments,
                                        const std::vector<std::pair<int, double>>& cells = {});

// Draw (x, xi, w) per the spec's laws and price the markets. Deterministic in
// spec.seed; market t's draws do not depend on T.
std::vector<MarketRecord> simulate_markets(const DgpSpec& spec);

// Population-mode observables: exact CCPs at every grid node plus the exact
// map itself. Throws UnsupportedVariantError for the CES variant.
CcpSurface population_surface(const DgpSpec& spec, const MarketRecord& market,
                              InterpOrder order = InterpOrder::Cubic);
std::vector<CcpSurface> population_surfaces(const DgpSpec& spec,
                                            const std::vector<MarketRecord>& markets,
                                            InterpOrder order = InterpOrder::Cubic);

// Finite-sample mode: consumers drawn i.i.d. with z uniform on the grid box
// (n >= 1 required).
std::vector<ConsumerDraw> draw_consumers(const DgpSpec& spec, const MarketRecord& market, long n);

// Multinomial counts over {0,1,...,J} for n consumers pinned at one z.
Eigen::VectorXi node_choice_counts(const DgpSpec& spec, const MarketRecord& market, const VectorXd& z,
                                   long n, Rng& rng);

// Surface from stratified sampling: n_per_node consumers at every grid node,
// empirical frequencies with add-half smoothing to stay interior.
CcpSurface empirical_surface(const DgpSpec& spec, const MarketRecord& market, long n_per_node,
                             InterpOrder order = InterpOrder::Cubic);

}  // namespace dlab
