#include <doctest.h>

#include <cmath>

#include "demandlab/index_recovery.hpp"

using namespace dlab;

namespace {

DgpSpec base_spec(double half = 1.0, int n = 21) {
  DgpSpec spec;
  spec.variant = Variant::MixedLogit;
  spec.J = 2;
  spec.T = 8;
  spec.seed = 2024;
  Eigen::Vector2d lo(-half, -half), hi(half, half);
  spec.grid = ZGrid(lo, hi, {n, n}, {n / 2, n / 2});
  spec.g = GFunction::linear(VectorXd::Zero(2));
  spec.shock.radius = 0.25;
  spec.price.c0 = 0.0;
  spec.price.c_w = 0.0;  // every market lands on the same lattice price
  spec.price.c_xi = 0.0;
  spec.price.lattice_pitch = 0.05;
  spec.instrument.radius = 0.5;
  return spec;
}

MatchOpts fast_match() {
  MatchOpts opts;
  opts.probe_per_dim = 5;
  return opts;
}

}  // namespace

TEST_CASE("identical markets match with zero displacement") {
  DgpSpec spec = base_spec();
  VectorXd xi(2);
  xi << 0.12, -0.08;
  std::vector<VectorXd> shocks = {xi, xi};
  std::vector<VectorXd> ws = {VectorXd::Zero(2), VectorXd::Zero(2)};
  auto markets = price_markets(spec, shocks, ws);
  auto surfaces = population_surfaces(spec, markets);
  MatchResult match = find_matched_pairs(markets, surfaces, 0, fast_match());
  CHECK(match.pairs.size() > 10);
  for (const auto& mp : match.pairs) {
    CHECK((mp.z_prime - mp.z).norm() < 1e-7);
  }
}

TEST_CASE("linear index: displacement equals the shock difference") {
  DgpSpec spec = base_spec();
  auto markets = simulate_markets(spec);
  auto surfaces = population_surfaces(spec, markets);
  MatchResult match = find_matched_pairs(markets, surfaces, 0, fast_match());
  CHECK(match.pairs.size() > 50);
  for (const auto& mp : match.pairs) {
    VectorXd want = markets[mp.t].xi_true - markets[mp.t_prime].xi_true;
    CHECK((mp.z_prime - mp.z - want).cwiseAbs().maxCoeff() < 2e-3);
  }
}

TEST_CASE("a single market in the cell yields NoTies") {
  DgpSpec spec = base_spec();
  spec.T = 1;
  auto markets = simulate_markets(spec);
  auto surfaces = population_surfaces(spec, markets);
  CHECK_THROWS_AS(find_matched_pairs(markets, surfaces, 0, fast_match()), NoTiesError);
}

TEST_CASE("tolerance matching clusters nearby continuous prices") {
  DgpSpec spec = base_spec();
  spec.price.lattice_pitch = 0.0;  // continuous prices, no exact ties
  spec.price.c_w = 0.002;          // tiny dispersion inside the tolerance
  auto markets = simulate_markets(spec);
  auto surfaces = population_surfaces(spec, markets);
  CHECK_THROWS_AS(find_matched_pairs(markets, surfaces, 0, fast_match()), NoTiesError);
  MatchOpts opts = fast_match();
  opts.price_tol = 0.01;
  MatchResult match = find_matched_pairs(markets, surfaces, 0, opts);
  CHECK(match.pairs.size() > 20);
}

TEST_CASE("jacobian_ratio: same market and point gives the identity") {
  DgpSpec spec = base_spec();
  auto markets = simulate_markets(spec);
  auto surfaces = population_surfaces(spec, markets);
  MatchedPair mp;
  mp.t = 0;
  mp.t_prime = 0;
  mp.z = VectorXd::Zero(2);
  mp.z_prime = VectorXd::Zero(2);
  JacobianMatrix r = jacobian_ratio(mp, surfaces);
  CHECK((r.m - MatrixXd::Identity(2, 2)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("jacobian_ratio: linear index gives the identity across matched pairs") {
  DgpSpec spec = base_spec(1.0, 41);
  spec.T = 6;
  auto markets = simulate_markets(spec);
  auto surfaces = population_surfaces(spec, markets);
  MatchResult match = find_matched_pairs(markets, surfaces, 0, fast_match());
  REQUIRE(match.pairs.size() > 20);
  for (const auto& mp : match.pairs) {
    JacobianMatrix r = jacobian_ratio(mp, surfaces);
    CHECK((r.m - MatrixXd::Identity(2, 2)).cwiseAbs().maxCoeff() < 1e-3);
  }
}

TEST_CASE("jacobian_ratio matches the analytic ratio for a quadratic index") {
  DgpSpec spec = base_spec();
  std::vector<MatrixXd> q(2, MatrixXd::Zero(2, 2));
  q[0] << 0.15, 0.05, 0.05, -0.1;
  q[1] << -0.08, 0.03, 0.03, 0.12;
  spec.g = GFunction::quadratic(VectorXd::Zero(2), q);
  auto markets = simulate_markets(spec);
  auto surfaces = population_surfaces(spec, markets);
  MatchResult match = find_matched_pairs(markets, surfaces, 0, fast_match());
  REQUIRE(match.pairs.size() > 20);
  double worst = 0.0;
  for (const auto& mp : match.pairs) {
    JacobianMatrix r = jacobian_ratio(mp, surfaces);
    MatrixXd want = spec.g.jacobian(mp.z_prime).inverse() * spec.g.jacobian(mp.z);
    worst = std::max(worst, (r.m - want).cwiseAbs().maxCoeff());
  }
  CHECK(worst < 1e-2);
}

TEST_CASE("chain_and_integrate recovers a linear index exactly up to grid error") {
  DgpSpec spec = base_spec(1.0, 41);
  spec.T = 8;
  auto markets = simulate_markets(spec);
  auto surfaces = population_surfaces(spec, markets);
  MatchResult match = find_matched_pairs(markets, surfaces, 0, fast_match());
  IndexField field = chain_and_integrate(match, surfaces, spec.grid);
  CHECK(field.coverage() > 0.8);
  // anchor normalization is exact
  long anchor = spec.grid.anchor_flat();
  CHECK(field.g_values.row(anchor).norm() == 0.0);
  CHECK((field.jacobians[anchor] - MatrixXd::Identity(2, 2)).norm() == 0.0);
  double worst = 0.0;
  for (long i = 0; i < spec.grid.node_count(); ++i) {
    if (!field.is_covered(i)) continue;
    VectorXd want = spec.grid.node(i);  // g(z) = z
    worst = std::max(worst, (field.g_values.row(i).transpose() - want).cwiseAbs().maxCoeff());
  }
  CHECK(worst < 1e-3);
}

TEST_CASE("chain_and_integrate: no pairs means no identification") {
  DgpSpec spec = base_spec();
  auto markets = simulate_markets(spec);
  auto surfaces = population_surfaces(spec, markets);
  MatchResult empty;
  CHECK_THROWS_AS(chain_and_integrate(empty, surfaces, spec.grid), DisconnectedCoverError);
}

TEST_CASE("coverage mask is exactly the anchor-connected component") {
  DgpSpec spec = base_spec();
  spec.T = 10;
  // shocks vary only in the first coordinate: hops cannot leave the anchor row
  auto markets = simulate_markets(spec);
  for (auto& m : markets) m.xi_true[1] = 0.0;
  auto surfaces = population_surfaces(spec, markets);
  MatchResult match = find_matched_pairs(markets, surfaces, 0, fast_match());
  CHECK_THROWS_AS(chain_and_integrate(match, surfaces, spec.grid), DisconnectedCoverError);
  ChainOpts opts;
  opts.min_coverage = 0.01;
  IndexField field = chain_and_integrate(match, surfaces, spec.grid, opts);
  int anchor_row = spec.grid.anchor[1];
  for (long i = 0; i < spec.grid.node_count(); ++i) {
    if (!field.is_covered(i)) continue;
    CHECK(spec.grid.unflatten(i)[1] == anchor_row);
  }
  CHECK(field.coverage() < 0.1);
}

TEST_CASE("two spanning trees agree on the recovered index") {
  DgpSpec spec = base_spec(1.0, 41);
  spec.T = 8;
  std::vector<MatrixXd> q(2, MatrixXd::Zero(2, 2));
  q[0] << 0.15, 0.05, 0.05, -0.1;
  q[1] << -0.08, 0.03, 0.03, 0.12;
  spec.g = GFunction::quadratic(VectorXd::Zero(2), q);
  auto markets = simulate_markets(spec);
  auto surfaces = population_surfaces(spec, markets);
  MatchResult match = find_matched_pairs(markets, surfaces, 0, fast_match());
  IndexField a = chain_and_integrate(match, surfaces, spec.grid);
  ChainOpts alt;
  alt.reverse_generators = true;
  IndexField b = chain_and_integrate(match, surfaces, spec.grid, alt);
  double worst = 0.0;
  long both = 0;
  for (long i = 0; i < spec.grid.node_count(); ++i) {
    if (!a.is_covered(i) || !b.is_covered(i)) continue;
    ++both;
    worst = std::max(worst, (a.g_values.row(i) - b.g_values.row(i)).cwiseAbs().maxCoeff());
  }
  CHECK(both > 1200);
  CHECK(worst < 1e-2);
}

TEST_CASE("quadratic index is recovered on the covered set") {
  DgpSpec spec = base_spec();
  spec.T = 12;
  std::vector<MatrixXd> q(2, MatrixXd::Zero(2, 2));
  q[0] << 0.15, 0.05, 0.05, -0.1;
  q[1] << -0.08, 0.03, 0.03, 0.12;
  spec.g = GFunction::quadratic(VectorXd::Zero(2), q);
  auto markets = simulate_markets(spec);
  auto surfaces = population_surfaces(spec, markets);
  MatchResult match = find_matched_pairs(markets, surfaces, 0, fast_match());
  IndexField field = chain_and_integrate(match, surfaces, spec.grid);
  CHECK(field.coverage() > 0.7);
  double worst = 0.0;
  for (long i = 0; i < spec.grid.node_count(); ++i) {
    if (!field.is_covered(i)) continue;
    VectorXd want = spec.g.eval(spec.grid.node(i));
    worst = std::max(worst, (field.g_values.row(i).transpose() - want).cwiseAbs().maxCoeff());
  }
  CHECK(worst < 5e-2);
}

TEST_CASE("IndexField::eval_g interpolates and respects the coverage mask") {
  DgpSpec spec = base_spec();
  spec.T = 10;
  auto markets = simulate_markets(spec);
  auto surfaces = population_surfaces(spec, markets);
  MatchResult match = find_matched_pairs(markets, surfaces, 0, fast_match());
  IndexField field = chain_and_integrate(match, surfaces, spec.grid);
  VectorXd z(2);
  z << 0.123, -0.217;
  VectorXd got = field.eval_g(z);
  CHECK((got - z).cwiseAbs().maxCoeff() < 5e-3);
  IndexField masked = field;
  std::fill(masked.covered.begin(), masked.covered.end(), 0);
  CHECK_THROWS_AS(masked.eval_g(z), NoSupportError);
}

TEST_CASE("common choice probability: identical markets trivially hold") {
  DgpSpec spec = base_spec();
  VectorXd xi(2);
  xi << 0.1, 0.1;
  auto markets = price_markets(
      spec, {xi, xi, xi}, {VectorXd::Zero(2), VectorXd::Zero(2), VectorXd::Zero(2)});
  auto surfaces = population_surfaces(spec, markets);
  CcpCertificate cert = find_common_ccp(surfaces, 0);
  CHECK(cert.holds);
  CHECK(cert.max_residual <= 1e-6);
}

TEST_CASE("certificate holds on a wide grid with narrow shocks") {
  DgpSpec spec = base_spec(1.2, 17);
  spec.T = 12;
  spec.shock.radius = 0.15;
  auto markets = simulate_markets(spec);
  auto surfaces = population_surfaces(spec, markets);
  CcpCertificate cert = find_common_ccp(surfaces, 0);
  CHECK(cert.holds);
  // soundness: re-inversion of s_star succeeds in every market
  for (long m = 0; m < cert.residuals.size(); ++m) CHECK(cert.residuals[m] <= 1e-6);
}

TEST_CASE("certificate fails with a witness when shocks dwarf the z support") {
  DgpSpec spec = base_spec(0.3, 7);
  spec.T = 6;
  spec.shock.family = ShockFamily::AtomJitter;
  spec.shock.atoms = {-0.8, 0.8};
  spec.shock.jitter = 0.01;
  auto markets = simulate_markets(spec);
  bool has_low = false, has_high = false;
  for (const auto& m : markets) {
    has_low = has_low || m.xi_true[0] < 0;
    has_high = has_high || m.xi_true[0] > 0;
  }
  REQUIRE(has_low);
  REQUIRE(has_high);
  auto surfaces = population_surfaces(spec, markets);
  CcpCertificate cert = find_common_ccp(surfaces, 0);
  CHECK_FALSE(cert.holds);
  CHECK(cert.witness >= 0);
  CHECK(cert.max_residual > 1e-3);
}
