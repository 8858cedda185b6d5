#include "demandlab/nested_logit.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <map>

namespace dlab {

namespace {

// central differences need a margin; boundary nodes are evaluated at the
// nearest interior point instead
VectorXd with_margin(const Box& box, const VectorXd& z, double margin) {
  VectorXd out = z;
  for (int k = 0; k < box.dim(); ++k) {
    out[k] = std::clamp(out[k], box.lower[k] + margin, box.upper[k] - margin);
  }
  return out;
}

double log_within_derivative(const CcpSurface& surf, int j, const std::vector<int>& nests,
                             const VectorXd& z, int k, double step) {
  VectorXd hi = z, lo = z;
  hi[k] += step;
  lo[k] -= step;
  auto log_within = [&](const VectorXd& q) {
    VectorXd s = surf.eval_exact(q);
    double tot = 0.0;
    for (int m = 0; m < s.size(); ++m) {
      if (nests[m] == nests[j]) tot += s[m];
    }
    return std::log(s[j]) - std::log(tot);
  };
  return (log_within(hi) - log_within(lo)) / (2.0 * step);
}

// A = d ln s_j / dz - d ln s_0 / dz at z along one coordinate
double a_term(const CcpSurface& surf, int j, const VectorXd& z, int k, double step) {
  return surf.log_share_derivative(j, z, k, step) -
         surf.log_share_derivative(surf.goods(), z, k, step);
}

double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

double estimate_theta(const CcpSurface& market_a, const CcpSurface& market_b, const VectorXd& z,
                      int good, const std::vector<int>& nest_of_good, const NestedOpts& opts) {
  const int k = opts.deriv_dim;
  double aa = a_term(market_a, good, z, k, opts.fd_step);
  double ab = a_term(market_b, good, z, k, opts.fd_step);
  double ba = log_within_derivative(market_a, good, nest_of_good, z, k, opts.fd_step);
  double bb = log_within_derivative(market_b, good, nest_of_good, z, k, opts.fd_step);
  double denom = ba - bb;
  if (std::abs(denom) < opts.denom_floor) {
    throw DegenerateMarketsError(
        "estimate_theta: within-nest derivatives coincide across the two markets");
  }
  return (aa - ab) / denom;
}

double estimate_theta_pooled(const std::vector<CcpSurface>& surfaces,
                             const std::vector<int>& nest_of_good,
                             const std::vector<VectorXd>& probes, const NestedOpts& opts,
                             double* spread_out, long* samples_out) {
  const int J = surfaces.empty() ? 0 : surfaces.front().goods();
  std::vector<double> samples;
  std::vector<double> stable;
  int pairs_used = 0;
  for (size_t a = 0; a < surfaces.size() && pairs_used < opts.max_pairs; ++a) {
    for (size_t b = a + 1; b < surfaces.size() && pairs_used < opts.max_pairs; ++b) {
      ++pairs_used;
      for (const auto& z : probes) {
        for (int j = 0; j < J; ++j) {
          double ba = log_within_derivative(surfaces[a], j, nest_of_good, z, opts.deriv_dim,
                                            opts.fd_step);
          double bb = log_within_derivative(surfaces[b], j, nest_of_good, z, opts.deriv_dim,
                                            opts.fd_step);
          double denom = ba - bb;
          if (std::abs(denom) < opts.denom_floor) continue;
          double aa = a_term(surfaces[a], j, z, opts.deriv_dim, opts.fd_step);
          double ab = a_term(surfaces[b], j, z, opts.deriv_dim, opts.fd_step);
          double theta = (aa - ab) / denom;
          samples.push_back(theta);
          if (std::abs(denom) >= opts.stable_floor) stable.push_back(theta);
        }
      }
    }
  }
  if (samples.empty()) {
    throw DegenerateMarketsError("estimate_theta_pooled: no admissible market pair");
  }
  if (spread_out != nullptr) {
    const auto& pool = stable.empty() ? samples : stable;
    auto [lo, hi] = std::minmax_element(pool.begin(), pool.end());
    *spread_out = *hi - *lo;
  }
  if (samples_out != nullptr) *samples_out = static_cast<long>(samples.size());
  return median_of(samples);
}

MatrixXd recover_g_nested(const std::vector<CcpSurface>& surfaces,
                          const std::vector<int>& nest_of_good, double theta, const ZGrid& grid,
                          const NestedOpts& opts, double* disagreement_out) {
  if (surfaces.empty()) throw InvalidArgumentError("recover_g_nested: no surfaces");
  const int J = surfaces.front().goods();
  const int d = grid.dim();
  const long n = grid.node_count();

  double disagreement = 0.0;
  // mean over markets of the per-market derivative field, all dims at once
  auto field = [&](const VectorXd& z_raw, bool track) {
    VectorXd z = with_margin(grid.box, z_raw, 2.0 * opts.fd_step);
    MatrixXd mean = MatrixXd::Zero(J, d);
    std::vector<MatrixXd> per(track ? surfaces.size() : 0);
    for (size_t t = 0; t < surfaces.size(); ++t) {
      MatrixXd f(J, d);
      for (int j = 0; j < J; ++j) {
        for (int k = 0; k < d; ++k) {
          f(j, k) = a_term(surfaces[t], j, z, k, opts.fd_step) -
                    theta * log_within_derivative(surfaces[t], j, nest_of_good, z, k, opts.fd_step);
        }
      }
      if (track) per[t] = f;
      mean += f;
    }
    mean /= static_cast<double>(surfaces.size());
    if (track) {
      for (const auto& f : per) {
        disagreement = std::max(disagreement, (f - mean).cwiseAbs().maxCoeff());
      }
    }
    return mean;
  };

  MatrixXd g_hat = MatrixXd::Zero(n, J);
  std::vector<std::uint8_t> done(n, 0);
  std::map<long, MatrixXd> node_field;
  auto field_at_node = [&](long flat) -> const MatrixXd& {
    auto it = node_field.find(flat);
    if (it == node_field.end()) {
      it = node_field.emplace(flat, field(grid.node(flat), disagreement_out != nullptr)).first;
    }
    return it->second;
  };

  const long anchor = grid.anchor_flat();
  done[anchor] = 1;
  std::deque<long> queue{anchor};
  while (!queue.empty()) {
    long cur = queue.front();
    queue.pop_front();
    auto idx = grid.unflatten(cur);
    for (int k = 0; k < d; ++k) {
      for (int step : {-1, 1}) {
        auto nidx = idx;
        nidx[k] += step;
        if (nidx[k] < 0 || nidx[k] >= grid.points[k]) continue;
        long nb = grid.flatten(nidx);
        if (done[nb]) continue;
        VectorXd za = grid.node(cur), zb = grid.node(nb);
        VectorXd mid = 0.5 * (za + zb);
        // Simpson along the lattice edge
        VectorXd dz = zb - za;
        MatrixXd fa = field_at_node(cur), fb = field_at_node(nb);
        MatrixXd fm = field(mid, false);
        g_hat.row(nb) = g_hat.row(cur) + ((fa + 4.0 * fm + fb) * dz / 6.0).transpose();
        done[nb] = 1;
        queue.push_back(nb);
      }
    }
  }
  if (disagreement_out != nullptr) *disagreement_out = disagreement;
  return g_hat;
}

AlphaEstimate estimate_alpha(const std::vector<MarketRecord>& markets,
                             const std::vector<CcpSurface>& surfaces,
                             const std::vector<int>& nest_of_good, double theta,
                             const MatrixXd& g_hat, const ZGrid& grid, const NestedOpts& opts) {
  const long T = static_cast<long>(markets.size());
  if (T < 3) throw InvalidArgumentError("estimate_alpha: too few markets");
  const int J = surfaces.front().goods();
  const long anchor = grid.anchor_flat();
  const VectorXd zref = grid.anchor_point();

  MatrixXd lhs(T, J), p(T, J);
  VectorXd w(T);
  for (long t = 0; t < T; ++t) {
    VectorXd s = surfaces[t].eval_exact(zref);
    double s0 = 1.0 - s.sum();
    for (int j = 0; j < J; ++j) {
      double tot = 0.0;
      for (int m = 0; m < J; ++m) {
        if (nest_of_good[m] == nest_of_good[j]) tot += s[m];
      }
      double lnodds = std::log(s[j]) - std::log(s0);
      double lnwithin = std::log(s[j]) - std::log(tot);
      lhs(t, j) = lnodds - theta * lnwithin - g_hat(anchor, j);
      p(t, j) = markets[t].p[j];
    }
    w[t] = markets[t].w[0];
  }

  // pooled IV with per-good intercepts: demean within good, common w
  VectorXd mean_lhs = lhs.colwise().mean(), mean_p = p.colwise().mean();
  double mean_w = w.mean();
  double sww = 0.0, swp = 0.0, swl = 0.0;
  for (long t = 0; t < T; ++t) {
    double wt = w[t] - mean_w;
    for (int j = 0; j < J; ++j) {
      sww += wt * wt;
      swp += wt * (p(t, j) - mean_p[j]);
      swl += wt * (lhs(t, j) - mean_lhs[j]);
    }
  }
  AlphaEstimate est;
  if (sww <= 0.0) throw WeakInstrumentError("estimate_alpha: instrument has no variation");
  double slope_fs = swp / sww;
  double rss = 0.0;
  for (long t = 0; t < T; ++t) {
    double wt = w[t] - mean_w;
    for (int j = 0; j < J; ++j) {
      double r = (p(t, j) - mean_p[j]) - slope_fs * wt;
      rss += r * r;
    }
  }
  double sd_resid = std::sqrt(rss / std::max<long>(1, T * J - 2));
  est.first_stage_t = sd_resid > 0 ? std::abs(slope_fs) * std::sqrt(sww) / sd_resid
                                   : std::numeric_limits<double>::infinity();
  if (est.first_stage_t < opts.weak_t_floor) {
    throw WeakInstrumentError("estimate_alpha: first-stage t-ratio proxy " +
                              std::to_string(est.first_stage_t) + " below floor");
  }
  est.alpha = -swl / swp;
  est.intercepts = mean_lhs + est.alpha * mean_p;
  est.xi_hat = lhs + est.alpha * p;
  return est;
}

NestedLogitEstimate estimate_nested_logit(const std::vector<MarketRecord>& markets,
                                          const std::vector<CcpSurface>& surfaces,
                                          const std::vector<int>& nest_of_good,
                                          const NestedOpts& opts) {
  const ZGrid& grid = surfaces.front().grid();
  std::vector<VectorXd> probes;
  for (double frac : {0.2, 0.35, 0.5, 0.65, 0.8}) {
    VectorXd z = grid.anchor_point();
    z[opts.deriv_dim] =
        grid.box.lower[opts.deriv_dim] +
        frac * (grid.box.upper[opts.deriv_dim] - grid.box.lower[opts.deriv_dim]);
    probes.push_back(z);
  }
  NestedLogitEstimate est;
  est.grid = grid;
  est.theta = estimate_theta_pooled(surfaces, nest_of_good, probes, opts, &est.theta_spread,
                                    &est.theta_samples);
  est.g_hat = recover_g_nested(surfaces, nest_of_good, est.theta, grid, opts);
  AlphaEstimate alpha = estimate_alpha(markets, surfaces, nest_of_good, est.theta, est.g_hat, grid, opts);
  est.alpha = alpha.alpha;
  est.xi_mean = alpha.intercepts;
  est.xi_hat = alpha.xi_hat;
  est.first_stage_t = alpha.first_stage_t;
  return est;
}

double plugback_sup_error(const std::vector<MarketRecord>& markets,
                          const std::vector<CcpSurface>& surfaces,
                          const std::vector<int>& nest_of_good,
                          const NestedLogitEstimate& estimate) {
  const ZGrid& grid = estimate.grid;
  const int J = surfaces.front().goods();
  double worst = 0.0;
  for (size_t t = 0; t < markets.size(); ++t) {
    for (long i = 0; i < grid.node_count(); ++i) {
      VectorXd delta(J);
      for (int j = 0; j < J; ++j) {
        delta[j] = estimate.g_hat(i, j) + estimate.xi_hat(t, j) -
                   estimate.alpha * markets[t].p[j];
      }
      VectorXd s = nested_logit_shares(delta, estimate.theta, nest_of_good);
      worst = std::max(worst, (s - surfaces[t].values().row(i).transpose()).cwiseAbs().maxCoeff());
    }
  }
  return worst;
}

}  // namespace dlab
