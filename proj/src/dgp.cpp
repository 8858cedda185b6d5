#include "demandlab/dgp.hpp"

#include <algorithm>
#include <cmath>

namespace dlab {

// ---------------------------------------------------------------------------
// GFunction

VectorXd GFunction::eval(const VectorXd& z) const {
  VectorXd u = z - z0;
  VectorXd out = lin * u;
  switch (family) {
    case GFamily::Linear:
      break;
    case GFamily::Quadratic:
      for (int j = 0; j < out_dim(); ++j) out[j] += 0.5 * u.dot(quad[j] * u);
      break;
    case GFamily::SigmoidWarped:
      for (int j = 0; j < out_dim(); ++j) {
        double a = warp_dir.row(j).dot(u);
        out[j] += warp_scale[j] * (std::tanh(a) - a);
      }
      break;
  }
  return out;
}

MatrixXd GFunction::jacobian(const VectorXd& z) const {
  VectorXd u = z - z0;
  MatrixXd jac = lin;
  switch (family) {
    case GFamily::Linear:
      break;
    case GFamily::Quadratic:
      for (int j = 0; j < out_dim(); ++j) jac.row(j) += (quad[j] * u).transpose();
      break;
    case GFamily::SigmoidWarped:
      for (int j = 0; j < out_dim(); ++j) {
        double th = std::tanh(warp_dir.row(j).dot(u));
        jac.row(j) -= warp_scale[j] * th * th * warp_dir.row(j);
      }
      break;
  }
  return jac;
}

GFunction GFunction::linear(VectorXd z0, int out_dim) {
  GFunction g;
  g.family = GFamily::Linear;
  int d = static_cast<int>(z0.size());
  if (out_dim < 0) out_dim = d;
  g.lin = MatrixXd::Identity(out_dim, d);
  g.z0 = std::move(z0);
  return g;
}

GFunction GFunction::linear_slopes(VectorXd z0, MatrixXd slopes) {
  GFunction g;
  g.family = GFamily::Linear;
  g.lin = std::move(slopes);
  g.z0 = std::move(z0);
  if (g.lin.cols() != g.z0.size()) throw InvalidArgumentError("GFunction: slope shape mismatch");
  return g;
}

GFunction GFunction::quadratic(VectorXd z0, std::vector<MatrixXd> q) {
  GFunction g;
  g.family = GFamily::Quadratic;
  int d = static_cast<int>(z0.size());
  int J = static_cast<int>(q.size());
  g.lin = MatrixXd::Identity(J, d);
  g.z0 = std::move(z0);
  g.quad = std::move(q);
  for (const auto& m : g.quad) {
    if (m.rows() != d || m.cols() != d) throw InvalidArgumentError("GFunction: quad shape mismatch");
  }
  return g;
}

GFunction GFunction::sigmoid_warped(VectorXd z0, VectorXd scale, MatrixXd dir) {
  GFunction g;
  g.family = GFamily::SigmoidWarped;
  int d = static_cast<int>(z0.size());
  int J = static_cast<int>(scale.size());
  g.lin = MatrixXd::Identity(J, d);
  g.z0 = std::move(z0);
  g.warp_scale = std::move(scale);
  g.warp_dir = std::move(dir);
  if (g.warp_dir.rows() != J || g.warp_dir.cols() != d) {
    throw InvalidArgumentError("GFunction: warp_dir shape mismatch");
  }
  // |c_j| * ||b_j||^2 < 1 keeps I + correction diagonally dominant, hence injective
  for (int j = 0; j < J; ++j) {
    if (std::abs(g.warp_scale[j]) * g.warp_dir.row(j).squaredNorm() >= 1.0) {
      throw InvalidArgumentError("GFunction: warp too strong for injectivity");
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Laws

VectorXd ShockLaw::draw(Rng& rng, int dim) const {
  VectorXd xi(dim);
  VectorXd mu = mean.size() == dim ? mean : VectorXd::Zero(dim);
  switch (family) {
    case ShockFamily::UniformBox:
      for (int j = 0; j < dim; ++j) xi[j] = mu[j] + rng.uniform(-radius, radius);
      break;
    case ShockFamily::Gaussian:
      for (int j = 0; j < dim; ++j) {
        double v;
        do {
          v = sd * rng.normal();
        } while (std::abs(v) > radius);
        xi[j] = mu[j] + v;
      }
      break;
    case ShockFamily::AtomJitter: {
      if (atoms.empty()) throw InvalidArgumentError("ShockLaw: empty atom set");
      for (int j = 0; j < dim; ++j) {
        double a = atoms[rng.uniform_int(static_cast<int>(atoms.size()))];
        xi[j] = mu[j] + a + (jitter > 0 ? rng.uniform(-jitter, jitter) : 0.0);
      }
      break;
    }
  }
  return xi;
}

double ShockLaw::support_radius() const {
  switch (family) {
    case ShockFamily::UniformBox:
    case ShockFamily::Gaussian:
      return radius;
    case ShockFamily::AtomJitter: {
      double m = 0.0;
      for (double a : atoms) m = std::max(m, std::abs(a));
      return m + jitter;
    }
  }
  return radius;
}

VectorXd InstrumentLaw::draw(Rng& rng, int goods) const {
  int d = dim > 0 ? dim : goods;
  VectorXd w(d);
  for (int k = 0; k < d; ++k) w[k] = rng.uniform(-radius, radius);
  return w;
}

VectorXd PriceRule::price(const VectorXd& w, const VectorXd& xi, const VectorXd& x) const {
  int J = static_cast<int>(xi.size());
  VectorXd p(J);
  double xterm = (c_x.size() > 0 && x.size() == c_x.size()) ? c_x.dot(x) : 0.0;
  for (int j = 0; j < J; ++j) {
    double wj = w.size() == J ? w[j] : (w.size() > 0 ? w[0] : 0.0);
    double own = (c_x_own != 0.0 && x.size() == J) ? c_x_own * x[j] : 0.0;
    double raw = std::exp(c0 + c_w * wj + c_xi * xi[j] + xterm + own);
    if (lattice_pitch > 0.0) {
      raw = std::max(1.0, std::round(raw / lattice_pitch)) * lattice_pitch;
    }
    p[j] = raw;
  }
  return p;
}

// ---------------------------------------------------------------------------

bool MixedLogitParams::is_plain_logit() const {
  return alpha_nu == 0.0 && (sigma_nu.size() == 0 || sigma_nu.cwiseAbs().maxCoeff() == 0.0);
}

void DgpSpec::validate() const {
  if (J < 1) throw InvalidArgumentError("DgpSpec: J must be positive");
  if (g.out_dim() != J) throw InvalidArgumentError("DgpSpec: g output dimension must equal J");
  if (g.in_dim() != grid.dim()) throw InvalidArgumentError("DgpSpec: g input dimension must match grid");
  if (variant == Variant::NestedLogit) {
    if (static_cast<int>(nested.nest_of_good.size()) != J) {
      throw InvalidArgumentError("DgpSpec: nest map must have one entry per good");
    }
    if (nested.theta < 0.0 || nested.theta >= 1.0) {
      throw InvalidArgumentError("DgpSpec: theta must lie in [0, 1)");
    }
  }
  if (variant == Variant::MixedCes && (ces.rho <= 0.0 || ces.rho >= 1.0)) {
    throw BadRhoError("DgpSpec: rho must lie in (0, 1)");
  }
  // the location normalization: demand shocks have zero mean unless the
  // nested-logit module, which leaves E[Xi] free, is in use
  if (variant != Variant::NestedLogit && shock.mean.size() > 0 &&
      shock.mean.cwiseAbs().maxCoeff() > 1e-12) {
    throw InvalidArgumentError("DgpSpec: shock law must have zero mean");
  }
  if (g.in_dim() == J) {
    VectorXd g0 = g.eval(g.z0);
    MatrixXd j0 = g.jacobian(g.z0);
    if (g0.cwiseAbs().maxCoeff() > 1e-12 ||
        (j0 - MatrixXd::Identity(J, J)).cwiseAbs().maxCoeff() > 1e-12) {
      throw InvalidArgumentError("DgpSpec: g must satisfy g(z0)=0 and dg/dz(z0)=I");
    }
  }
}

// ---------------------------------------------------------------------------
// Choice probabilities

VectorXd logit_shares(const VectorXd& v) {
  double m = std::max(0.0, v.maxCoeff());
  double denom = std::exp(-m);
  VectorXd e = (v.array() - m).exp();
  denom += e.sum();
  return e / denom;
}

VectorXd nested_logit_shares(const VectorXd& delta, double theta, const std::vector<int>& nest_of_good) {
  const int J = static_cast<int>(delta.size());
  const double lam = 1.0 - theta;
  int max_nest = 0;
  for (int n : nest_of_good) max_nest = std::max(max_nest, n);
  // log inclusive value per nest
  std::vector<double> log_d(max_nest + 1, -std::numeric_limits<double>::infinity());
  for (int j = 0; j < J; ++j) {
    int n = nest_of_good[j];
    double a = delta[j] / lam;
    log_d[n] = (log_d[n] == -std::numeric_limits<double>::infinity())
                   ? a
                   : std::max(log_d[n], a) + std::log1p(std::exp(-std::abs(log_d[n] - a)));
  }
  double denom = 1.0;  // outside good in its own nest with inclusive value 0
  for (int n = 1; n <= max_nest; ++n) {
    if (log_d[n] != -std::numeric_limits<double>::infinity()) denom += std::exp(lam * log_d[n]);
  }
  VectorXd s(J);
  for (int j = 0; j < J; ++j) {
    int n = nest_of_good[j];
    s[j] = std::exp(delta[j] / lam - theta * log_d[n]) / denom;
  }
  return s;
}

SimplexPoint structural_ccp(const DgpSpec& spec, const MarketRecord& market, const VectorXd& z,
                            const VectorXd& y) {
  if (!spec.grid.box.contains(z)) throw DomainMarginError("structural_ccp: z outside the grid box");
  VectorXd gamma = spec.g.eval(z) + market.xi_true;

  switch (spec.variant) {
    case Variant::MixedLogit: {
      const auto& mp = spec.logit;
      VectorXd xbeta = (mp.beta_x.size() > 0 && market.x.size() == mp.beta_x.cols())
                           ? (mp.beta_x * market.x).eval()
                           : VectorXd::Zero(spec.J);
      double ln_alpha = mp.alpha0;
      if (mp.alpha_y.size() > 0 && y.size() == mp.alpha_y.size()) ln_alpha += mp.alpha_y.dot(y);
      auto utilities = [&](double nu) {
        double alpha = std::exp(ln_alpha + mp.alpha_nu * nu);
        VectorXd v = gamma + xbeta - alpha * market.p;
        if (mp.sigma_nu.size() == spec.J) v += nu * mp.sigma_nu;
        return v;
      };
      if (mp.is_plain_logit()) return SimplexPoint(logit_shares(utilities(0.0)));
      Quadrature q = normal_quadrature(mp.gh_nodes);
      VectorXd s = VectorXd::Zero(spec.J);
      for (int i = 0; i < q.nodes.size(); ++i) s += q.weights[i] * logit_shares(utilities(q.nodes[i]));
      return SimplexPoint(s);
    }
    case Variant::NestedLogit: {
      const auto& np = spec.nested;
      VectorXd xbeta = (np.beta_x.size() > 0 && market.x.size() == np.beta_x.cols())
                           ? (np.beta_x * market.x).eval()
                           : VectorXd::Zero(spec.J);
      double ln_alpha = np.alpha0;
      if (np.alpha_y.size() > 0 && y.size() == np.alpha_y.size()) ln_alpha += np.alpha_y.dot(y);
      VectorXd delta = gamma + xbeta - std::exp(ln_alpha) * market.p;
      return SimplexPoint(nested_logit_shares(delta, np.theta, np.nest_of_good));
    }
    case Variant::MixedCes:
      throw UnsupportedVariantError("structural_ccp: use ces_expected_demand for the CES variant");
  }
  throw UnsupportedVariantError("structural_ccp: unknown variant");
}

CesDemand ces_consumer_demand(const DgpSpec& spec, const MarketRecord& market, const VectorXd& z,
                              double y, double beta) {
  const auto& cp = spec.ces;
  if (cp.rho <= 0.0 || cp.rho >= 1.0) throw BadRhoError("ces demand: rho must lie in (0,1)");
  if (y <= 0.0) throw InvalidArgumentError("ces demand: income must be positive");
  const double alpha = 1.0 / (1.0 - cp.rho);
  VectorXd gamma = spec.g.eval(z) + market.xi_true;
  VectorXd xload = (cp.x_load.size() > 0 && market.x.size() == cp.x_load.cols())
                       ? (cp.x_load * market.x).eval()
                       : VectorXd::Zero(spec.J);
  double denom = 1.0;
  VectorXd num(spec.J);
  for (int j = 0; j < spec.J; ++j) {
    double e = gamma[j] + xload[j] * beta;
    num[j] = std::exp(e - alpha * std::log(market.p[j]));
    denom += std::exp(e - alpha * cp.rho * std::log(market.p[j]));
  }
  CesDemand d;
  d.inside = y * num / denom;
  d.outside = y / denom;
  return d;
}

CesDemand ces_expected_demand(const DgpSpec& spec, const MarketRecord& market, const VectorXd& z,
                              double y) {
  if (spec.variant != Variant::MixedCes) {
    throw UnsupportedVariantError("ces_expected_demand: spec is not the CES variant");
  }
  const auto& cp = spec.ces;
  if (cp.sd_beta == 0.0) return ces_consumer_demand(spec, market, z, y, cp.mu_beta);
  Quadrature q = normal_quadrature(cp.gh_nodes);
  CesDemand acc;
  acc.inside = VectorXd::Zero(spec.J);
  for (int i = 0; i < q.nodes.size(); ++i) {
    CesDemand d = ces_consumer_demand(spec, market, z, y, cp.mu_beta + cp.sd_beta * q.nodes[i]);
    acc.inside += q.weights[i] * d.inside;
    acc.outside += q.weights[i] * d.outside;
  }
  return acc;
}

// ---------------------------------------------------------------------------
// Market construction

std::vector<MarketRecord> price_markets(const DgpSpec& spec, const std::vector<VectorXd>& shocks,
                                        const std::vector<VectorXd>& instruments,
                                        const std::vector<std::pair<int, double>>& cells) {
  if (shocks.size() != instruments.size()) {
    throw InvalidArgumentError("price_markets: shock and instrument draws must have equal length");
  }
  std::vector<MarketRecord> out(shocks.size());
  for (size_t t = 0; t < shocks.size(); ++t) {
    MarketRecord& m = out[t];
    m.id = static_cast<int>(t);
    m.xi_true = shocks[t];
    m.w = instruments[t];
    if (t < cells.size()) {
      m.x_cell = cells[t].first;
      m.factor_v = cells[t].second;
    }
    m.x = spec.x.cells.empty() ? VectorXd() : spec.x.cells[m.x_cell];
    m.p = spec.price.price(m.w, m.xi_true, m.x);
  }
  return out;
}

std::vector<MarketRecord> simulate_markets(const DgpSpec& spec) {
  spec.validate();
  std::vector<VectorXd> shocks(spec.T), instruments(spec.T);
  std::vector<std::pair<int, double>> cells(spec.T);
  const int n_cells = std::max<int>(1, spec.x.cells.size());
  for (int t = 0; t < spec.T; ++t) {
    Rng rng(derive_seed(spec.seed, t, 0));
    VectorXd xi = spec.shock.draw(rng, spec.J);
    int cell = 0;
    double v = 0.0;
    switch (spec.x.mode) {
      case XMode::Exogenous:
        cell = n_cells > 1 ? rng.uniform_int(n_cells) : 0;
        break;
      case XMode::CommonFactor: {
        v = rng.uniform() < 0.5 ? -1.0 : 1.0;
        cell = n_cells > 1 ? (v < 0 ? 0 : 1) : 0;
        xi.array() += spec.x.factor_loading * v;
        break;
      }
      case XMode::XiToX:
        cell = n_cells > 1 ? (xi[0] > 0 ? 1 : 0) : 0;
        break;
    }
    shocks[t] = xi;
    instruments[t] = spec.instrument.draw(rng, spec.J);
    cells[t] = {cell, v};
  }
  return price_markets(spec, shocks, instruments, cells);
}

// ---------------------------------------------------------------------------
// Consumers and surfaces

CcpSurface population_surface(const DgpSpec& spec, const MarketRecord& market, InterpOrder order) {
  if (spec.variant == Variant::MixedCes) {
    throw UnsupportedVariantError("population_surface: CCP surfaces are for discrete variants");
  }
  const ZGrid& g = spec.grid;
  MatrixXd values(g.node_count(), spec.J);
  for (long i = 0; i < g.node_count(); ++i) {
    values.row(i) = structural_ccp(spec, market, g.node(i), spec.y0).s.transpose();
  }
  auto exact = std::make_shared<const CcpSurface::ExactFn>(
      [spec, market](const VectorXd& z) { return structural_ccp(spec, market, z, spec.y0).s; });
  return CcpSurface(market.id, g, std::move(values), order, exact);
}

std::vector<CcpSurface> population_surfaces(const DgpSpec& spec,
                                            const std::vector<MarketRecord>& markets,
                                            InterpOrder order) {
  std::vector<CcpSurface> out;
  out.reserve(markets.size());
  for (const auto& m : markets) out.push_back(population_surface(spec, m, order));
  return out;
}

std::vector<ConsumerDraw> draw_consumers(const DgpSpec& spec, const MarketRecord& market, long n) {
  if (n < 1) throw InvalidArgumentError("draw_consumers: need at least one consumer in sample mode");
  Rng rng(derive_seed(spec.seed, market.id, 1));
  const ZGrid& g = spec.grid;
  std::vector<ConsumerDraw> out(n);
  for (long i = 0; i < n; ++i) {
    ConsumerDraw& c = out[i];
    c.z.resize(g.dim());
    for (int k = 0; k < g.dim(); ++k) c.z[k] = rng.uniform(g.box.lower[k], g.box.upper[k]);
    c.y = spec.y0;
    if (spec.variant == Variant::MixedCes) {
      double beta = spec.ces.mu_beta + spec.ces.sd_beta * rng.normal();
      double income = spec.y0.size() > 0 ? spec.y0[0] : 1.0;
      CesDemand d = ces_consumer_demand(spec, market, c.z, income, beta);
      c.q.resize(spec.J + 1);
      c.q[0] = d.outside;
      c.q.tail(spec.J) = d.inside;
    } else {
      SimplexPoint s = structural_ccp(spec, market, c.z, c.y);
      double u = rng.uniform();
      double acc = 0.0;
      c.choice = 0;
      for (int j = 0; j < spec.J; ++j) {
        acc += s.s[j];
        if (u < acc) {
          c.choice = j + 1;
          break;
        }
      }
    }
  }
  return out;
}

Eigen::VectorXi node_choice_counts(const DgpSpec& spec, const MarketRecord& market, const VectorXd& z,
                                   long n, Rng& rng) {
  SimplexPoint s = structural_ccp(spec, market, z, spec.y0);
  Eigen::VectorXi counts = Eigen::VectorXi::Zero(spec.J + 1);
  for (long i = 0; i < n; ++i) {
    double u = rng.uniform();
    double acc = 0.0;
    int pick = 0;
    for (int j = 0; j < spec.J; ++j) {
      acc += s.s[j];
      if (u < acc) {
        pick = j + 1;
        break;
      }
    }
    counts[pick] += 1;
  }
  return counts;
}

CcpSurface empirical_surface(const DgpSpec& spec, const MarketRecord& market, long n_per_node,
                             InterpOrder order) {
  if (n_per_node < 1) throw InvalidArgumentError("empirical_surface: need at least one consumer per node");
  const ZGrid& g = spec.grid;
  MatrixXd values(g.node_count(), spec.J);
  Rng rng(derive_seed(spec.seed, market.id, 2));
  for (long i = 0; i < g.node_count(); ++i) {
    Eigen::VectorXi counts = node_choice_counts(spec, market, g.node(i), n_per_node, rng);
    // add-half smoothing keeps empirical shares strictly interior
    double denom = n_per_node + 0.5 * (spec.J + 1);
    for (int j = 0; j < spec.J; ++j) values(i, j) = (counts[j + 1] + 0.5) / denom;
  }
  return CcpSurface(market.id, g, std::move(values), order, nullptr);
}

}  // namespace dlab
