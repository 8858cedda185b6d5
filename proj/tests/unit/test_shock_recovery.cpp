#include <doctest.h>

#include <cmath>

#include "demandlab/shock_recovery.hpp"

using namespace dlab;

namespace {

DgpSpec pipeline_spec(int T = 200, double c_xi = 0.0, std::uint64_t seed = 404) {
  DgpSpec spec;
  spec.variant = Variant::MixedLogit;
  spec.J = 2;
  spec.T = T;
  spec.seed = seed;
  Eigen::Vector2d lo(-1.4, -1.4), hi(1.4, 1.4);
  spec.grid = ZGrid(lo, hi, {21, 21}, {10, 10});
  spec.g = GFunction::linear(VectorXd::Zero(2));
  spec.shock.radius = 0.25;
  spec.price.c0 = 0.0;
  spec.price.c_w = 0.3;
  spec.price.c_xi = c_xi;
  spec.price.lattice_pitch = 0.02;
  spec.instrument.radius = 0.5;
  return spec;
}

// closed-form z* for the linear-index plain logit: z*_j = ln(s*_j/s*_0) + p_j - xi_j
MatrixXd closed_form_zstar(const DgpSpec& spec, const std::vector<MarketRecord>& markets,
                           const SimplexPoint& s_star) {
  VectorXd lnodds = invert_logit(s_star);
  MatrixXd z(markets.size(), spec.J);
  for (size_t t = 0; t < markets.size(); ++t) {
    z.row(t) = (lnodds + markets[t].p - markets[t].xi_true).transpose();
  }
  return z;
}

double corr_of(const MatrixXd& a, const MatrixXd& b) {
  double ma = a.mean(), mb = b.mean();
  MatrixXd da = a.array() - ma, db = b.array() - mb;
  return (da.array() * db.array()).sum() /
         std::sqrt(da.squaredNorm() * db.squaredNorm());
}

const VectorXd kSStar = (VectorXd(2) << 0.22, 0.22).finished();

}  // namespace

TEST_CASE("poly_design layout: constant, powers, pairwise products") {
  MatrixXd cols(3, 2);
  cols << 1.0, 2.0, 3.0, 4.0, 5.0, 6.0;
  MatrixXd d = poly_design(cols, {2, 1}, true);
  CHECK(d.cols() == 5);  // 1, v1, v1^2, v2, v1*v2
  CHECK(d(1, 0) == 1.0);
  CHECK(d(1, 1) == 3.0);
  CHECK(d(1, 2) == 9.0);
  CHECK(d(1, 3) == 4.0);
  CHECK(d(1, 4) == 12.0);
}

TEST_CASE("npiv with zero shocks recovers a linear f exactly") {
  DgpSpec spec = pipeline_spec(120);
  auto markets = simulate_markets(spec);
  for (auto& m : markets) m.xi_true.setZero();
  SimplexPoint s_star(kSStar);
  MatrixXd zstar = closed_form_zstar(spec, markets, s_star);
  MatrixXd lhs(markets.size(), 2), reg(markets.size(), 2), inst(markets.size(), 2);
  for (size_t t = 0; t < markets.size(); ++t) {
    lhs.row(t) = spec.g.eval(zstar.row(t).transpose()).transpose();
    reg.row(t) = markets[t].p.transpose();
    inst.row(t) = markets[t].w.transpose();
  }
  NpivFit fit = npiv_fit(lhs, reg, inst, SieveBasis::uniform(2, 2, 2));
  CHECK(fit.residuals.cwiseAbs().maxCoeff() < 1e-8);
  CHECK(fit.min_first_stage_sv > 0.0);
}

TEST_CASE("npiv instrument orthogonality holds exactly when just identified") {
  DgpSpec spec = pipeline_spec(150, 0.4);
  auto markets = simulate_markets(spec);
  SimplexPoint s_star(kSStar);
  MatrixXd zstar = closed_form_zstar(spec, markets, s_star);
  MatrixXd lhs(markets.size(), 2), reg(markets.size(), 2), inst(markets.size(), 2);
  for (size_t t = 0; t < markets.size(); ++t) {
    lhs.row(t) = spec.g.eval(zstar.row(t).transpose()).transpose();
    reg.row(t) = markets[t].p.transpose();
    inst.row(t) = markets[t].w.transpose();
  }
  SieveBasis basis = SieveBasis::uniform(2, 2, 2);
  NpivFit fit = npiv_fit(lhs, reg, inst, basis);
  MatrixXd b = poly_design(inst, basis.inst_degrees, basis.pairwise);
  MatrixXd moments = b.transpose() * fit.residuals / static_cast<double>(markets.size());
  CHECK(moments.cwiseAbs().maxCoeff() < 1e-9);
  // the constant instrument row enforces a zero residual mean
  CHECK(std::abs(fit.residuals.col(0).mean()) < 1e-10);
  CHECK(std::abs(fit.residuals.col(1).mean()) < 1e-10);
}

TEST_CASE("constant instruments are rank deficient") {
  DgpSpec spec = pipeline_spec(80);
  auto markets = simulate_markets(spec);
  SimplexPoint s_star(kSStar);
  MatrixXd zstar = closed_form_zstar(spec, markets, s_star);
  MatrixXd lhs(markets.size(), 2), reg(markets.size(), 2), inst(markets.size(), 2);
  for (size_t t = 0; t < markets.size(); ++t) {
    lhs.row(t) = zstar.row(t);
    reg.row(t) = markets[t].p.transpose();
    inst.row(t) = VectorXd::Constant(2, 0.7).transpose();
  }
  CHECK_THROWS_AS(npiv_fit(lhs, reg, inst, SieveBasis::uniform(2, 2, 2)), RankDeficientError);
}

TEST_CASE("order condition: fewer instrument functions than regressors") {
  MatrixXd lhs = MatrixXd::Random(50, 1);
  MatrixXd reg = MatrixXd::Random(50, 3);
  MatrixXd inst = MatrixXd::Random(50, 1);
  SieveBasis basis;
  basis.reg_degrees = {2, 2, 2};
  basis.inst_degrees = {2};
  CHECK_THROWS_AS(npiv_fit(lhs, reg, inst, basis), RankDeficientError);
}

TEST_CASE("endogenous pricing: IV recovers the shocks, OLS is visibly biased") {
  DgpSpec spec = pipeline_spec(400, 0.5, 808);
  auto markets = simulate_markets(spec);
  SimplexPoint s_star(kSStar);
  MatrixXd zstar = closed_form_zstar(spec, markets, s_star);
  MatrixXd lhs(markets.size(), 2), reg(markets.size(), 2), inst(markets.size(), 2);
  MatrixXd xi_true(markets.size(), 2);
  for (size_t t = 0; t < markets.size(); ++t) {
    lhs.row(t) = spec.g.eval(zstar.row(t).transpose()).transpose();
    reg.row(t) = markets[t].p.transpose();
    inst.row(t) = markets[t].w.transpose();
    xi_true.row(t) = markets[t].xi_true.transpose();
  }
  NpivFit iv = npiv_fit(lhs, reg, inst, SieveBasis::uniform(2, 2, 2));
  NpivFit ols = npiv_fit(lhs, reg, reg, SieveBasis::uniform(2, 2, 2));
  double corr_iv = corr_of(iv.residuals, xi_true);
  double corr_ols = corr_of(ols.residuals, xi_true);
  CHECK(corr_iv > 0.97);
  CHECK(corr_iv - corr_ols > 0.01);
  double rmse = std::sqrt((iv.residuals - xi_true).squaredNorm() / xi_true.size());
  CHECK(rmse < 0.06);
}

TEST_CASE("solve_z_star_table matches the closed form on interpolated surfaces") {
  DgpSpec spec = pipeline_spec(12);
  auto markets = simulate_markets(spec);
  auto surfaces = population_surfaces(spec, markets);
  SimplexPoint s_star(kSStar);
  MatrixXd table = solve_z_star_table(surfaces, s_star);
  MatrixXd want = closed_form_zstar(spec, markets, s_star);
  CHECK((table - want).cwiseAbs().maxCoeff() < 1e-4);
}

TEST_CASE("recover_demand requires the exogeneity assertion") {
  NpivFit fit;
  fit.residuals = MatrixXd::Zero(3, 2);
  CHECK_THROWS_AS(recover_demand(fit, false), ExogeneityNotAssertedError);
  CHECK(recover_demand(fit, true).rows() == 3);
}

TEST_CASE("conditional demand: in-sample reproduction and price counterfactuals") {
  DgpSpec spec = pipeline_spec(240, 0.1, 909);
  spec.shock.family = ShockFamily::AtomJitter;
  spec.shock.atoms = {-0.15, 0.0, 0.15};
  spec.shock.jitter = 1e-3;
  spec.price.c_w = 0.25;
  auto markets = simulate_markets(spec);
  auto surfaces = population_surfaces(spec, markets);
  MatrixXd h_true(markets.size(), 2);
  for (size_t t = 0; t < markets.size(); ++t) h_true.row(t) = markets[t].xi_true.transpose();

  DemandQuery q;
  q.z = (VectorXd(2) << 0.35, -0.2).finished();
  q.x_cell = 0;
  q.h = markets[5].xi_true;

  // in-sample: at market 5's own price, the pooled fit reproduces its CCP
  q.p = markets[5].p;
  VectorXd got = conditional_demand(markets, surfaces, h_true, q);
  VectorXd want = structural_ccp(spec, markets[5], q.z, spec.y0).s;
  CHECK((got - want).cwiseAbs().maxCoeff() < 1e-2);

  // counterfactual price inside the pooled support
  std::vector<long> cluster;
  for (size_t t = 0; t < markets.size(); ++t) {
    if ((h_true.row(t).transpose() - q.h).cwiseAbs().maxCoeff() <= 1e-2) cluster.push_back(t);
  }
  REQUIRE(cluster.size() >= 10);
  VectorXd p_mid = VectorXd::Zero(2);
  for (long t : cluster) p_mid += markets[t].p;
  p_mid /= static_cast<double>(cluster.size());
  q.p = p_mid;
  got = conditional_demand(markets, surfaces, h_true, q);
  MarketRecord counterfactual = markets[5];
  counterfactual.p = p_mid;
  want = structural_ccp(spec, counterfactual, q.z, spec.y0).s;
  CHECK((got - want).cwiseAbs().maxCoeff() < 2e-2);

  // support violations
  q.h = VectorXd::Constant(2, 9.0);
  CHECK_THROWS_AS(conditional_demand(markets, surfaces, h_true, q), NoSupportError);
  q.h = markets[5].xi_true;
  q.p = VectorXd::Constant(2, 50.0);
  CHECK_THROWS_AS(conditional_demand(markets, surfaces, h_true, q), NoSupportError);
}

TEST_CASE("location shifts of the shocks are absorbed by the index intercept") {
  DgpSpec base = pipeline_spec(40);
  auto markets = simulate_markets(base);
  // shifted model: xi + kappa paired with a utility intercept -kappa
  const double kappa = 0.37;
  DgpSpec shifted = base;
  shifted.x.cells = {VectorXd::Ones(1)};
  shifted.logit.beta_x = MatrixXd::Constant(2, 1, -kappa);
  auto shifted_markets = markets;
  for (auto& m : shifted_markets) {
    m.xi_true.array() += kappa;
    m.x = VectorXd::Ones(1);
  }
  for (size_t t = 0; t < markets.size(); ++t) {
    CcpSurface a = population_surface(base, markets[t]);
    CcpSurface b = population_surface(shifted, shifted_markets[t]);
    CHECK((a.values() - b.values()).cwiseAbs().maxCoeff() < 1e-14);
  }
}

TEST_CASE("product-characteristics variant: exact identification with x_{-j} and one w") {
  DgpSpec spec;
  spec.variant = Variant::MixedLogit;
  spec.J = 2;
  spec.T = 360;
  spec.seed = 515;
  Eigen::Vector2d lo(-1.6, -1.6), hi(1.6, 1.6);
  spec.grid = ZGrid(lo, hi, {21, 21}, {10, 10});
  spec.g = GFunction::linear(VectorXd::Zero(2));
  spec.shock.radius = 0.2;
  const double c_eta = 0.3;
  spec.x.cells = {(VectorXd(2) << -0.5, -0.5).finished(), (VectorXd(2) << -0.5, 0.5).finished(),
                  (VectorXd(2) << 0.5, -0.5).finished(), (VectorXd(2) << 0.5, 0.5).finished()};
  spec.logit.beta_x = c_eta * MatrixXd::Identity(2, 2);
  spec.instrument.dim = 1;  // one market-level cost shifter
  spec.instrument.radius = 0.5;
  spec.price.c0 = 0.1;
  spec.price.c_w = 0.4;
  spec.price.c_xi = 0.4;
  spec.price.c_x_own = 0.25;
  spec.price.c_x = VectorXd::Constant(2, 0.08);
  spec.price.lattice_pitch = 0.02;
  auto markets = simulate_markets(spec);

  // closed-form z*: z*_j = lnodds_j + p_j - eta_j(x) - xi_j under the linear diagonal index
  SimplexPoint s_star((VectorXd(2) << 0.2, 0.2).finished());
  VectorXd lnodds = invert_logit(s_star);
  const long T = static_cast<long>(markets.size());
  MatrixXd lhs(T, 2), x_cols(T, 2), p_cols(T, 2), xi_true(T, 2);
  VectorXd w(T);
  for (long t = 0; t < T; ++t) {
    const auto& m = markets[t];
    VectorXd zstar = lnodds + m.p - c_eta * m.x - m.xi_true;
    lhs.row(t) = spec.g.eval(zstar).transpose();
    x_cols.row(t) = m.x.transpose();
    p_cols.row(t) = m.p.transpose();
    xi_true.row(t) = m.xi_true.transpose();
    w[t] = m.w[0];
  }

  BlpFitOpts opts;
  opts.variant = BlpVariant::PriceOutsideIndex;
  opts.p_degree = 1;
  BlpFit fit = npiv_fit_blp_variant(lhs, x_cols, p_cols, w, {0.0, 0.0}, opts);
  double rmse = std::sqrt((fit.xi_hat - xi_true).squaredNorm() / xi_true.size());
  CHECK(rmse < 5e-2);
  for (int j = 0; j < 2; ++j) {
    CHECK(std::abs(fit.eta_hat(j, 0.5) - c_eta * 0.5) < 2e-2);
    CHECK(std::abs(fit.eta_hat(j, -0.5) + c_eta * 0.5) < 2e-2);
  }

  // price-in-own-index reading of the same data: a single instrument suffices
  BlpFitOpts own;
  own.variant = BlpVariant::PriceInOwnIndex;
  own.use_cross_x_instruments = false;
  own.p_degree = 1;
  BlpFit fit2 = npiv_fit_blp_variant(lhs, x_cols, p_cols, w, {0.0, 0.0}, own);
  double rmse2 = std::sqrt((fit2.xi_hat - xi_true).squaredNorm() / xi_true.size());
  CHECK(rmse2 < 5e-2);

  // BLP instruments overidentify the same regression
  own.use_cross_x_instruments = true;
  BlpFit fit3 = npiv_fit_blp_variant(lhs, x_cols, p_cols, w, {0.0, 0.0}, own);
  double rmse3 = std::sqrt((fit3.xi_hat - xi_true).squaredNorm() / xi_true.size());
  CHECK(rmse3 < 5e-2);
}

TEST_CASE("null product-characteristic effect is recovered as (near) zero") {
  DgpSpec spec;
  spec.variant = Variant::MixedLogit;
  spec.J = 2;
  spec.T = 600;
  spec.seed = 616;
  Eigen::Vector2d lo(-1.5, -1.5), hi(1.5, 1.5);
  spec.grid = ZGrid(lo, hi, {15, 15}, {7, 7});
  spec.g = GFunction::linear(VectorXd::Zero(2));
  spec.shock.radius = 0.08;
  spec.x.cells = {(VectorXd(2) << -0.5, -0.5).finished(), (VectorXd(2) << -0.5, 0.5).finished(),
                  (VectorXd(2) << 0.5, -0.5).finished(), (VectorXd(2) << 0.5, 0.5).finished()};
  spec.instrument.dim = 1;
  spec.price.c_w = 0.4;
  spec.price.c_xi = 0.3;
  spec.price.c_x_own = 0.2;
  spec.price.lattice_pitch = 0.02;
  auto markets = simulate_markets(spec);

  SimplexPoint s_star((VectorXd(2) << 0.2, 0.2).finished());
  VectorXd lnodds = invert_logit(s_star);
  const long T = static_cast<long>(markets.size());
  MatrixXd lhs(T, 2), x_cols(T, 2), p_cols(T, 2);
  VectorXd w(T);
  for (long t = 0; t < T; ++t) {
    const auto& m = markets[t];
    VectorXd zstar = lnodds + m.p - m.xi_true;  // eta = 0 in the DGP
    lhs.row(t) = zstar.transpose();
    x_cols.row(t) = m.x.transpose();
    p_cols.row(t) = m.p.transpose();
    w[t] = m.w[0];
  }
  BlpFitOpts opts;
  opts.p_degree = 1;
  BlpFit fit = npiv_fit_blp_variant(lhs, x_cols, p_cols, w, {0.0, 0.0}, opts);
  for (int j = 0; j < 2; ++j) {
    CHECK(std::abs(fit.eta_hat(j, 0.5)) < 1e-2);
    CHECK(std::abs(fit.eta_hat(j, -0.5)) < 1e-2);
  }
}
