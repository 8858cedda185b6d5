// Separable nonparametric IV: series two-stage projection recovering the
// market-level index residuals h_j(x_t, xi_jt), conditional demand by pooling
// markets of the same (x, h) type, demand under exogenous X, and the
// product-specific-characteristics variant with BLP-style instruments.
#pragma once

#include "demandlab/dgp.hpp"
#include "demandlab/index_recovery.hpp"
#include "demandlab/inversion.hpp"

namespace dlab {

// Tensor polynomial sieve: per-variable powers up to the given degree plus
// (optionally) pairwise bilinear interactions, with a leading constant.
struct SieveBasis {
  std::vector<int> reg_degrees;
  std::vector<int> inst_degrees;
  bool pairwise = true;

  static SieveBasis uniform(int n_reg, int n_inst, int degree = 2);
};

MatrixXd poly_design(const MatrixXd& cols, const std::vector<int>& degrees, bool pairwise);

struct NpivFit {
  MatrixXd coef;       // basis-count x J
  MatrixXd fitted;     // T x J      f_hat(x_t, p_t)
  MatrixXd residuals;  // T x J      e_hat = f_hat - lhs
  double min_first_stage_sv = 0.0;  // completeness diagnostic (scaled)
  int regressor_count = 0;
  int instrument_count = 0;
  std::vector<int> reg_degrees;
  bool pairwise = true;

  VectorXd predict_f(const VectorXd& reg_row) const;
};

// lhs: T x J values ghat_j(z*_t); reg_cols / inst_cols: raw variable columns.
// Instruments equal to regressors degenerate to the OLS fit (used to expose
// endogeneity bias).
NpivFit npiv_fit(const MatrixXd& lhs, const MatrixXd& reg_cols, const MatrixXd& inst_cols,
                 const SieveBasis& basis);

// z*(s*; p_t, x_t, xi_t) for every market, warm-started across markets.
MatrixXd solve_z_star_table(const std::vector<CcpSurface>& surfaces, const SimplexPoint& s_star,
                            const SolveOpts& opts = {});

// ---------------------------------------------------------------------------
// Conditional demand: pool markets sharing (x-cell, h) within tolerance and
// regress their CCPs at the query z on a price polynomial.

struct DemandQuery {
  VectorXd z;
  VectorXd p;
  int x_cell = 0;
  VectorXd h;
};

struct CondOpts {
  double pool_tol = 1e-2;  // per-component pooling tolerance on h
  int price_degree = 2;
  double hull_slack = 1e-9;
};

VectorXd conditional_demand(const std::vector<MarketRecord>& markets,
                            const std::vector<CcpSurface>& surfaces, const MatrixXd& h_table,
                            const DemandQuery& query, const CondOpts& opts = {});

// Theorem-2 step: under exogenous X the recovered residuals are the shocks
// themselves. The guard prevents reading h as xi when X was not asserted
// exogenous.
MatrixXd recover_demand(const NpivFit& fit, bool exogeneity_asserted);

// ---------------------------------------------------------------------------
// Product-specific-characteristics variant: per-good regression
// ghat_j(z*_j) = f_j(x_jt, p_t) - xi_jt with x_{-jt} as excluded price
// instruments, or with price in the own index and a single instrument.

enum class BlpVariant { PriceOutsideIndex, PriceInOwnIndex };

struct BlpFitOpts {
  BlpVariant variant = BlpVariant::PriceOutsideIndex;
  bool use_cross_x_instruments = true;  // include x_{-j} in the instrument set
  int x_degree = 1;
  int p_degree = 2;
  bool pairwise = true;
};

struct BlpFit {
  std::vector<NpivFit> per_good;
  MatrixXd xi_hat;  // T x J
  // eta_hat_j(x) under the normalization eta_j(x0_j) = 0, evaluated at the
  // column-mean price vector.
  double eta_hat(int j, double x_value) const;

  // stored context for eta evaluation
  std::vector<double> x0;
  MatrixXd mean_price_row;  // per good: the frozen non-x regressor values
  BlpVariant variant = BlpVariant::PriceOutsideIndex;
};

BlpFit npiv_fit_blp_variant(const MatrixXd& lhs, const MatrixXd& x_cols, const MatrixXd& p_cols,
                            const VectorXd& w, const std::vector<double>& x0,
                            const BlpFitOpts& opts = {});

}  // namespace dlab
