// Semiparametric nested logit: the nesting parameter from two markets'
// surface derivatives, the index function from the derivative field, and the
// price coefficient from a single excluded instrument. Works with scalar z.
#pragma once

#include "demandlab/dgp.hpp"
#include "demandlab/inversion.hpp"

namespace dlab {

struct NestedLogitEstimate {
  double theta = 0.0;
  ZGrid grid;
  MatrixXd g_hat;       // nodes x J, anchored at g(z0) = 0
  double alpha = 0.0;
  VectorXd xi_mean;     // per-good intercepts, estimates of E[Xi_j]
  MatrixXd xi_hat;      // T x J
  double theta_spread = 0.0;  // over-identification diagnostic
  long theta_samples = 0;
  double first_stage_t = 0.0;
};

struct NestedOpts {
  double fd_step = 1e-4;
  double denom_floor = 1e-6;   // solvability condition floor for one pair
  double stable_floor = 1e-3;  // well-conditioned samples used for the spread
  int deriv_dim = 0;           // z^(1): the coordinate we differentiate in
  double weak_t_floor = 4.0;
  int max_pairs = 60;
};

// theta from one market pair at one probe point (the two-market display).
double estimate_theta(const CcpSurface& market_a, const CcpSurface& market_b, const VectorXd& z,
                      int good, const std::vector<int>& nest_of_good,
                      const NestedOpts& opts = {});

// median over market pairs, probe points, and goods; also reports the spread
// across well-conditioned samples.
double estimate_theta_pooled(const std::vector<CcpSurface>& surfaces,
                             const std::vector<int>& nest_of_good,
                             const std::vector<VectorXd>& probes, const NestedOpts& opts,
                             double* spread_out = nullptr, long* samples_out = nullptr);

// Per-market derivative fields d g_j / d z_k assembled from the inversion
// display, averaged across markets; disagreement_out reports the max
// cross-market spread of the field (a specification diagnostic).
MatrixXd recover_g_nested(const std::vector<CcpSurface>& surfaces,
                          const std::vector<int>& nest_of_good, double theta, const ZGrid& grid,
                          const NestedOpts& opts = {}, double* disagreement_out = nullptr);

struct AlphaEstimate {
  double alpha = 0.0;
  VectorXd intercepts;  // per good
  double first_stage_t = 0.0;
  MatrixXd xi_hat;      // T x J residual shocks
};

// Linear IV of [ln odds - theta ln within - ghat] on price with the scalar
// instrument w and per-good constants.
AlphaEstimate estimate_alpha(const std::vector<MarketRecord>& markets,
                             const std::vector<CcpSurface>& surfaces,
                             const std::vector<int>& nest_of_good, double theta,
                             const MatrixXd& g_hat, const ZGrid& grid,
                             const NestedOpts& opts = {});

// Full pipeline over one nested-logit sample.
NestedLogitEstimate estimate_nested_logit(const std::vector<MarketRecord>& markets,
                                          const std::vector<CcpSurface>& surfaces,
                                          const std::vector<int>& nest_of_good,
                                          const NestedOpts& opts = {});

// Plug the estimate back into the nested-logit CCP formula and report the
// worst deviation from the observed surfaces over all grid nodes.
double plugback_sup_error(const std::vector<MarketRecord>& markets,
                          const std::vector<CcpSurface>& surfaces,
                          const std::vector<int>& nest_of_good,
                          const NestedLogitEstimate& estimate);

}  // namespace dlab
