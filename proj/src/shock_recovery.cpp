#include "demandlab/shock_recovery.hpp"

#include <algorithm>
#include <cmath>

namespace dlab {

SieveBasis SieveBasis::uniform(int n_reg, int n_inst, int degree) {
  SieveBasis b;
  b.reg_degrees.assign(n_reg, degree);
  b.inst_degrees.assign(n_inst, degree);
  return b;
}

MatrixXd poly_design(const MatrixXd& cols, const std::vector<int>& degrees, bool pairwise) {
  const long t_count = cols.rows();
  const int v = static_cast<int>(cols.cols());
  if (static_cast<int>(degrees.size()) != v) {
    throw InvalidArgumentError("poly_design: one degree per variable required");
  }
  std::vector<VectorXd> columns;
  columns.push_back(VectorXd::Ones(t_count));
  for (int a = 0; a < v; ++a) {
    VectorXd pow = VectorXd::Ones(t_count);
    for (int d = 1; d <= degrees[a]; ++d) {
      pow = pow.cwiseProduct(cols.col(a));
      columns.push_back(pow);
    }
  }
  if (pairwise) {
    for (int a = 0; a < v; ++a) {
      for (int b = a + 1; b < v; ++b) {
        if (degrees[a] >= 1 && degrees[b] >= 1) {
          columns.push_back(cols.col(a).cwiseProduct(cols.col(b)));
        }
      }
    }
  }
  MatrixXd design(t_count, columns.size());
  for (size_t c = 0; c < columns.size(); ++c) design.col(c) = columns[c];
  return design;
}

namespace {

VectorXd poly_row(const VectorXd& vals, const std::vector<int>& degrees, bool pairwise) {
  MatrixXd one_row = vals.transpose();
  return poly_design(one_row, degrees, pairwise).row(0).transpose();
}

}  // namespace

VectorXd NpivFit::predict_f(const VectorXd& reg_row) const {
  return coef.transpose() * poly_row(reg_row, reg_degrees, pairwise);
}

NpivFit npiv_fit(const MatrixXd& lhs, const MatrixXd& reg_cols, const MatrixXd& inst_cols,
                 const SieveBasis& basis) {
  const long t_count = lhs.rows();
  if (reg_cols.rows() != t_count || inst_cols.rows() != t_count) {
    throw InvalidArgumentError("npiv_fit: row mismatch between lhs and variable columns");
  }
  MatrixXd r = poly_design(reg_cols, basis.reg_degrees, basis.pairwise);
  MatrixXd b = poly_design(inst_cols, basis.inst_degrees, basis.pairwise);
  const long k = r.cols(), m = b.cols();
  if (m < k) {
    throw RankDeficientError("npiv_fit: instrument basis smaller than regressor basis (order condition)");
  }
  if (t_count <= k) {
    throw InvalidArgumentError("npiv_fit: need more markets than basis functions");
  }

  // first stage: project the regressor basis on the instrument basis
  MatrixXd r_hat = b * b.colPivHouseholderQr().solve(r);
  Eigen::JacobiSVD<MatrixXd> svd(r_hat, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const auto& sv = svd.singularValues();
  double scale = sv.size() > 0 ? sv[0] : 0.0;
  double sv_min = sv.size() > 0 ? sv[sv.size() - 1] : 0.0;
  NpivFit fit;
  fit.min_first_stage_sv = scale > 0 ? sv_min / scale : 0.0;
  if (!(scale > 0.0) || sv_min < 1e-10 * scale * std::max<long>(t_count, k)) {
    throw RankDeficientError("npiv_fit: projected design is rank deficient (completeness fails in-sample)");
  }

  fit.coef = r_hat.colPivHouseholderQr().solve(lhs);
  fit.fitted = r * fit.coef;
  fit.residuals = fit.fitted - lhs;
  fit.regressor_count = static_cast<int>(k);
  fit.instrument_count = static_cast<int>(m);
  fit.reg_degrees = basis.reg_degrees;
  fit.pairwise = basis.pairwise;
  return fit;
}

MatrixXd solve_z_star_table(const std::vector<CcpSurface>& surfaces, const SimplexPoint& s_star,
                            const SolveOpts& opts) {
  if (surfaces.empty()) throw InvalidArgumentError("solve_z_star_table: no surfaces");
  const int d = surfaces.front().grid().dim();
  MatrixXd table(surfaces.size(), d);
  VectorXd warm = surfaces.front().grid().anchor_point();
  for (size_t t = 0; t < surfaces.size(); ++t) {
    InversionResult r = solve_z_star_soft(surfaces[t], s_star, opts, &warm);
    if (!r.converged) {
      throw NotInImageError("solve_z_star_table: s* not attainable in market " +
                            std::to_string(surfaces[t].market_id()));
    }
    table.row(t) = r.z.transpose();
    warm = r.z;
  }
  return table;
}

// ---------------------------------------------------------------------------

VectorXd conditional_demand(const std::vector<MarketRecord>& markets,
                            const std::vector<CcpSurface>& surfaces, const MatrixXd& h_table,
                            const DemandQuery& query, const CondOpts& opts) {
  std::vector<long> cluster;
  for (size_t t = 0; t < markets.size(); ++t) {
    if (markets[t].x_cell != query.x_cell) continue;
    if ((h_table.row(t).transpose() - query.h).cwiseAbs().maxCoeff() <= opts.pool_tol) {
      cluster.push_back(static_cast<long>(t));
    }
  }
  if (cluster.empty()) {
    throw NoSupportError("conditional_demand: no market matches the queried (x, h) type");
  }
  const int jd = surfaces[cluster.front()].goods();
  const int pd = static_cast<int>(query.p.size());

  // price support check within the pooled cluster
  VectorXd p_lo = markets[cluster.front()].p, p_hi = markets[cluster.front()].p;
  for (long t : cluster) {
    p_lo = p_lo.cwiseMin(markets[t].p);
    p_hi = p_hi.cwiseMax(markets[t].p);
  }
  for (int k = 0; k < pd; ++k) {
    if (query.p[k] < p_lo[k] - opts.hull_slack || query.p[k] > p_hi[k] + opts.hull_slack) {
      throw NoSupportError("conditional_demand: query price outside the pooled price support");
    }
  }

  // degrade the price polynomial until the cluster can support it
  int degree = opts.price_degree;
  auto basis_size = [&](int deg) {
    long n = 1 + static_cast<long>(deg) * pd;
    if (deg >= 1) n += pd * (pd - 1) / 2;
    return n;
  };
  while (degree > 0 && static_cast<long>(cluster.size()) < basis_size(degree) + 2) --degree;

  std::vector<int> degs(pd, degree);
  MatrixXd p_cols(cluster.size(), pd);
  MatrixXd resp(cluster.size(), jd);
  for (size_t i = 0; i < cluster.size(); ++i) {
    p_cols.row(i) = markets[cluster[i]].p.transpose();
    resp.row(i) = surfaces[cluster[i]].eval(query.z).transpose();
  }
  MatrixXd design = poly_design(p_cols, degs, degree >= 1);
  MatrixXd coef = design.colPivHouseholderQr().solve(resp);
  VectorXd row = poly_row(query.p, degs, degree >= 1);
  return coef.transpose() * row;
}

MatrixXd recover_demand(const NpivFit& fit, bool exogeneity_asserted) {
  if (!exogeneity_asserted) {
    throw ExogeneityNotAssertedError(
        "recover_demand: residuals equal the demand shocks only under exogenous X");
  }
  return fit.residuals;
}

// ---------------------------------------------------------------------------

BlpFit npiv_fit_blp_variant(const MatrixXd& lhs, const MatrixXd& x_cols, const MatrixXd& p_cols,
                            const VectorXd& w, const std::vector<double>& x0,
                            const BlpFitOpts& opts) {
  const long t_count = lhs.rows();
  const int jd = static_cast<int>(lhs.cols());
  if (x_cols.cols() != jd || p_cols.cols() != jd || w.size() != t_count ||
      static_cast<int>(x0.size()) != jd) {
    throw InvalidArgumentError("npiv_fit_blp_variant: column layout mismatch");
  }
  BlpFit out;
  out.variant = opts.variant;
  out.x0 = x0;
  out.xi_hat.resize(t_count, jd);
  out.mean_price_row.resize(jd, opts.variant == BlpVariant::PriceOutsideIndex ? jd : 1);

  for (int j = 0; j < jd; ++j) {
    MatrixXd reg, inst;
    std::vector<int> reg_deg, inst_deg;
    if (opts.variant == BlpVariant::PriceOutsideIndex) {
      // regressors (x_j, p_1..p_J); instruments (x_1..x_J, w)
      reg.resize(t_count, 1 + jd);
      reg.col(0) = x_cols.col(j);
      reg.rightCols(jd) = p_cols;
      reg_deg.assign(1 + jd, opts.p_degree);
      reg_deg[0] = opts.x_degree;
      inst.resize(t_count, jd + 1);
      inst.leftCols(jd) = x_cols;
      inst.col(jd) = w;
      inst_deg.assign(jd + 1, opts.p_degree);
      for (int a = 0; a < jd; ++a) inst_deg[a] = opts.x_degree;
    } else {
      // price in the own index: regressors (x_j, p_j); instruments (x_j, w [, x_{-j}])
      reg.resize(t_count, 2);
      reg.col(0) = x_cols.col(j);
      reg.col(1) = p_cols.col(j);
      reg_deg = {opts.x_degree, opts.p_degree};
      int extra = opts.use_cross_x_instruments ? jd - 1 : 0;
      inst.resize(t_count, 2 + extra);
      inst.col(0) = x_cols.col(j);
      inst.col(1) = w;
      inst_deg = {opts.x_degree, opts.p_degree};
      int c = 2;
      for (int a = 0; a < jd; ++a) {
        if (a == j) continue;
        if (c - 2 >= extra) break;
        inst.col(c) = x_cols.col(a);
        inst_deg.push_back(opts.x_degree);
        ++c;
      }
    }
    SieveBasis basis;
    basis.reg_degrees = reg_deg;
    basis.inst_degrees = inst_deg;
    basis.pairwise = opts.pairwise;
    NpivFit fit = npiv_fit(lhs.col(j), reg, inst, basis);
    out.xi_hat.col(j) = fit.residuals.col(0);
    out.mean_price_row.row(j) = reg.rightCols(reg.cols() - 1).colwise().mean();
    out.per_good.push_back(std::move(fit));
  }
  return out;
}

double BlpFit::eta_hat(int j, double x_value) const {
  const NpivFit& fit = per_good[j];
  VectorXd row(1 + mean_price_row.cols());
  row[0] = x_value;
  row.tail(mean_price_row.cols()) = mean_price_row.row(j).transpose();
  VectorXd ref = row;
  ref[0] = x0[j];
  // f_j(x, p) = sigma_j^{-1}(s*; p) - eta_j(x) with eta_j(x0_j) = 0
  return (fit.predict_f(ref) - fit.predict_f(row))[0];
}

}  // namespace dlab
