// Constructive index recovery from matched markets: price-tied market pairs,
// observed Jacobian ratios, chaining from the anchor, line integration, and
// the common-choice-probability search with its verifiability certificate.
#pragma once

#include <cstdint>

#include "demandlab/dgp.hpp"
#include "demandlab/inversion.hpp"

namespace dlab {

// One probe match: two markets sharing (p, x-cell) whose surfaces attain the
// same share vector s at z and z_prime.
struct MatchedPair {
  int t = -1;
  int t_prime = -1;
  int x_cell = 0;
  VectorXd p;
  VectorXd s;
  VectorXd z;
  VectorXd z_prime;

  double displacement() const { return (z_prime - z).norm(); }
};

// A market pair usable for chaining hops, with its average displacement in
// z-space (the image of the shock difference under the inverse index).
struct PairGenerator {
  int t = -1;
  int t_prime = -1;
  VectorXd mean_disp;
};

struct MatchResult {
  int x_cell = 0;
  double delta = 0.0;  // Lemma-1 radius chosen from the data
  std::vector<MatchedPair> pairs;
  std::vector<PairGenerator> generators;
  long probe_attempts = 0;
  long probe_successes = 0;
};

struct MatchOpts {
  int probe_per_dim = 9;
  double delta_quantile = 0.95;
  int max_pairs_per_group = 12;  // cap on pairs per price-tie group (0 = unlimited)
  double price_tol = 0.0;        // > 0 switches to tolerance matching |p - p'| < tol
  bool match_x_cell = true;
  SolveOpts solve;
};

MatchResult find_matched_pairs(const std::vector<MarketRecord>& markets,
                               const std::vector<CcpSurface>& surfaces, int x_cell,
                               const MatchOpts& opts = {});

// Observed ratio [dg(z')/dz]^-1 [dg(z)/dz] = [ds_{t'}/dz(z')]^-1 [ds_t/dz(z)].
JacobianMatrix jacobian_ratio(const MatchedPair& pair, const std::vector<CcpSurface>& surfaces);

// ---------------------------------------------------------------------------

// Recovered index function on the grid: ghat values, the Jacobian field, and
// the coverage mask of nodes reached from the anchor.
struct IndexField {
  ZGrid grid;
  MatrixXd g_values;                // nodes x J (zero rows where uncovered)
  std::vector<MatrixXd> jacobians;  // per node (empty where uncovered)
  std::vector<std::uint8_t> covered;

  double coverage() const;
  bool is_covered(long flat) const { return covered[flat] != 0; }
  // Multilinear evaluation over covered cells; NoSupportError off coverage.
  VectorXd eval_g(const VectorXd& z) const;
};

struct ChainOpts {
  double min_coverage = 0.5;        // below this the experiment is under-identified
  bool reverse_generators = false;  // longest hops first: an alternative spanning tree
  int max_generators = 128;
  int refine_sweeps = 2;
  SolveOpts solve;
};

IndexField chain_and_integrate(const MatchResult& match, const std::vector<CcpSurface>& surfaces,
                               const ZGrid& grid, const ChainOpts& opts = {});

// ---------------------------------------------------------------------------

struct CcpCertificate {
  int x_cell = 0;
  SimplexPoint s_star;
  std::vector<int> market_ids;
  VectorXd residuals;  // per market, inversion residual at s_star
  double max_residual = 0.0;
  bool holds = false;
  int witness = -1;  // market id with the largest residual when the verdict fails
};

struct CertOpts {
  double verdict_tol = 1e-6;
  double step0 = 0.05;
  double step_tol = 1e-6;
  int restarts = 3;
  SolveOpts solve;
};

// Minimizes over s the maximum inversion residual across the cell's markets;
// failure is a legitimate verdict, so this never throws on non-overlap.
CcpCertificate find_common_ccp(const std::vector<CcpSurface>& surfaces, int x_cell,
                               const CertOpts& opts = {});

}  // namespace dlab
