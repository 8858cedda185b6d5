#include <doctest.h>

#include <cmath>

#include "demandlab/nested_logit.hpp"

using namespace dlab;

namespace {

// scalar consumer observable, two goods sharing one nest
DgpSpec nested_spec(double theta, int T = 200, std::uint64_t seed = 321) {
  DgpSpec spec;
  spec.variant = Variant::NestedLogit;
  spec.J = 2;
  spec.T = T;
  spec.seed = seed;
  Eigen::VectorXd lo(1), hi(1);
  lo << -1.0;
  hi << 1.0;
  spec.grid = ZGrid(lo, hi, {41}, {20});
  MatrixXd slopes(2, 1);
  slopes << 1.0, 0.5;
  spec.g = GFunction::linear_slopes(VectorXd::Zero(1), slopes);
  spec.nested.nest_of_good = {1, 1};
  spec.nested.theta = theta;
  spec.nested.alpha0 = std::log(2.0);  // alpha = 2
  spec.shock.mean = VectorXd::Constant(2, 0.3);
  spec.shock.radius = 0.08;
  spec.instrument.dim = 1;
  spec.instrument.radius = 0.5;
  spec.price.c0 = 0.3;
  spec.price.c_w = 1.0;
  spec.price.c_xi = 0.8;
  spec.price.lattice_pitch = 0.0;  // no matching step here, prices may be continuous
  return spec;
}

}  // namespace

TEST_CASE("theta from two markets matches the truth to 1e-6 in population mode") {
  for (double theta : {0.0, 0.5}) {
    DgpSpec spec = nested_spec(theta, 2);
    auto markets = simulate_markets(spec);
    REQUIRE((markets[0].xi_true - markets[1].xi_true).norm() > 1e-3);
    auto surfaces = population_surfaces(spec, markets);
    VectorXd z = VectorXd::Constant(1, 0.25);
    double theta_hat = estimate_theta(surfaces[0], surfaces[1], z, 0, spec.nested.nest_of_good);
    CHECK(std::abs(theta_hat - theta) < 1e-6);
  }
}

TEST_CASE("identical markets are degenerate for theta") {
  DgpSpec spec = nested_spec(0.4, 2);
  VectorXd xi = VectorXd::Constant(2, 0.3);
  auto markets = price_markets(spec, {xi, xi}, {VectorXd::Zero(1), VectorXd::Zero(1)});
  auto surfaces = population_surfaces(spec, markets);
  VectorXd z = VectorXd::Constant(1, 0.25);
  CHECK_THROWS_AS(estimate_theta(surfaces[0], surfaces[1], z, 0, spec.nested.nest_of_good),
                  DegenerateMarketsError);
}

TEST_CASE("pooled theta is invariant across pairs, probes, and goods") {
  DgpSpec spec = nested_spec(0.3, 12);
  auto markets = simulate_markets(spec);
  auto surfaces = population_surfaces(spec, markets);
  std::vector<VectorXd> probes = {VectorXd::Constant(1, -0.4), VectorXd::Constant(1, 0.1),
                                  VectorXd::Constant(1, 0.55)};
  double spread = 0.0;
  long samples = 0;
  double theta_hat = estimate_theta_pooled(surfaces, spec.nested.nest_of_good, probes, {},
                                           &spread, &samples);
  CHECK(std::abs(theta_hat - 0.3) < 1e-6);
  CHECK(samples > 50);
  CHECK(spread < 1e-4);
}

TEST_CASE("g recovery: slopes 1 and 0.5 within 1e-3, cross-market agreement") {
  DgpSpec spec = nested_spec(0.5, 8);
  auto markets = simulate_markets(spec);
  auto surfaces = population_surfaces(spec, markets);
  double disagreement = 0.0;
  MatrixXd g_hat = recover_g_nested(surfaces, spec.nested.nest_of_good, 0.5, spec.grid, {},
                                    &disagreement);
  CHECK(disagreement < 1e-4);
  double worst = 0.0;
  for (long i = 0; i < spec.grid.node_count(); ++i) {
    VectorXd want = spec.g.eval(spec.grid.node(i));
    worst = std::max(worst, (g_hat.row(i).transpose() - want).cwiseAbs().maxCoeff());
  }
  CHECK(worst < 1e-3);
}

TEST_CASE("misspecified theta shows up as cross-market disagreement") {
  DgpSpec spec = nested_spec(0.5, 8);
  auto markets = simulate_markets(spec);
  auto surfaces = population_surfaces(spec, markets);
  double disagreement = 0.0;
  recover_g_nested(surfaces, spec.nested.nest_of_good, 0.6, spec.grid, {}, &disagreement);
  CHECK(disagreement > 1e-3);
}

TEST_CASE("alpha and the shock means from a single excluded instrument") {
  DgpSpec spec = nested_spec(0.5, 200);
  auto markets = simulate_markets(spec);
  auto surfaces = population_surfaces(spec, markets);
  MatrixXd g_hat = recover_g_nested(surfaces, spec.nested.nest_of_good, 0.5, spec.grid);
  AlphaEstimate est = estimate_alpha(markets, surfaces, spec.nested.nest_of_good, 0.5, g_hat,
                                     spec.grid);
  CHECK(std::abs(est.alpha - 2.0) < 1e-2);
  CHECK(std::abs(est.intercepts[0] - 0.3) < 2e-2);
  CHECK(std::abs(est.intercepts[1] - 0.3) < 2e-2);
  CHECK(est.first_stage_t > 4.0);
}

TEST_CASE("constant instrument raises WeakInstrument") {
  DgpSpec spec = nested_spec(0.5, 30);
  spec.instrument.radius = 0.0;
  auto markets = simulate_markets(spec);
  auto surfaces = population_surfaces(spec, markets);
  MatrixXd g_hat = MatrixXd::Zero(spec.grid.node_count(), 2);
  CHECK_THROWS_AS(
      estimate_alpha(markets, surfaces, spec.nested.nest_of_good, 0.5, g_hat, spec.grid),
      WeakInstrumentError);
}

TEST_CASE("full nested pipeline plugs back into every observed surface") {
  DgpSpec spec = nested_spec(0.7, 60, 29);
  auto markets = simulate_markets(spec);
  auto surfaces = population_surfaces(spec, markets);
  NestedLogitEstimate est = estimate_nested_logit(markets, surfaces, spec.nested.nest_of_good);
  CHECK(std::abs(est.theta - 0.7) < 1e-6);
  CHECK(std::abs(est.alpha - 2.0) < 2e-2);
  double err = plugback_sup_error(markets, surfaces, spec.nested.nest_of_good, est);
  CHECK(err < 1e-3);
}
