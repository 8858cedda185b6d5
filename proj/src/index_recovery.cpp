#include "demandlab/index_recovery.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <map>

namespace dlab {

// ---------------------------------------------------------------------------
// Matched pairs

MatchResult find_matched_pairs(const std::vector<MarketRecord>& markets,
                               const std::vector<CcpSurface>& surfaces, int x_cell,
                               const MatchOpts& opts) {
  std::vector<int> members;
  for (const auto& m : markets) {
    if (!opts.match_x_cell || m.x_cell == x_cell) members.push_back(m.id);
  }

  std::vector<std::vector<int>> groups;
  if (opts.price_tol <= 0.0) {
    std::map<std::vector<double>, std::vector<int>> by_price;
    for (int id : members) {
      const VectorXd& p = markets[id].p;
      std::vector<double> key(p.data(), p.data() + p.size());
      by_price[key].push_back(id);
    }
    for (auto& [key, ids] : by_price) {
      if (ids.size() >= 2) groups.push_back(ids);
    }
  } else {
    // greedy clustering against group representatives
    for (int id : members) {
      bool placed = false;
      for (auto& grp : groups) {
        if ((markets[id].p - markets[grp.front()].p).cwiseAbs().maxCoeff() < opts.price_tol) {
          grp.push_back(id);
          placed = true;
          break;
        }
      }
      if (!placed) groups.push_back({id});
    }
    std::erase_if(groups, [](const std::vector<int>& g) { return g.size() < 2; });
  }
  if (groups.empty()) {
    throw NoTiesError("find_matched_pairs: no two markets share a price vector in this cell");
  }

  MatchResult res;
  res.x_cell = x_cell;
  const ZGrid& grid = surfaces[members.front()].grid();
  const int d = grid.dim();

  // probe set: a coarse interior subgrid pushed through market t's surface
  std::vector<VectorXd> probes;
  long n_probe = 1;
  for (int k = 0; k < d; ++k) n_probe *= opts.probe_per_dim;
  for (long c = 0; c < n_probe; ++c) {
    long rem = c;
    VectorXd z(d);
    for (int k = d - 1; k >= 0; --k) {
      int i = static_cast<int>(rem % opts.probe_per_dim);
      rem /= opts.probe_per_dim;
      double frac = (i + 1.0) / (opts.probe_per_dim + 1.0);
      z[k] = grid.box.lower[k] + frac * (grid.box.upper[k] - grid.box.lower[k]);
    }
    probes.push_back(z);
  }

  std::vector<MatchedPair> all;
  for (const auto& grp : groups) {
    int taken = 0;
    bool capped = false;
    for (size_t a = 0; a < grp.size() && !capped; ++a) {
      for (size_t b = a + 1; b < grp.size() && !capped; ++b) {
        if (opts.max_pairs_per_group > 0 && taken >= opts.max_pairs_per_group) {
          capped = true;
          break;
        }
        ++taken;
        int t = grp[a], tp = grp[b];
        for (const auto& zk : probes) {
          VectorXd s = surfaces[t].eval(zk);
          ++res.probe_attempts;
          InversionResult r = solve_z_star_soft(surfaces[tp], SimplexPoint(s), opts.solve, &zk);
          if (!r.converged) continue;
          ++res.probe_successes;
          MatchedPair mp;
          mp.t = t;
          mp.t_prime = tp;
          mp.x_cell = x_cell;
          mp.p = markets[t].p;
          mp.s = s;
          mp.z = zk;
          mp.z_prime = r.z;
          all.push_back(std::move(mp));
        }
      }
    }
  }

  // Lemma-1 radius: the displacement quantile that keeps the bulk of matches
  std::vector<double> norms;
  norms.reserve(all.size());
  for (const auto& mp : all) norms.push_back(mp.displacement());
  std::sort(norms.begin(), norms.end());
  if (!norms.empty()) {
    size_t q = static_cast<size_t>(opts.delta_quantile * (norms.size() - 1));
    res.delta = norms[q];
  }
  for (auto& mp : all) {
    if (mp.displacement() <= res.delta) res.pairs.push_back(std::move(mp));
  }

  std::map<std::pair<int, int>, std::pair<VectorXd, long>> gen_acc;
  for (const auto& mp : res.pairs) {
    auto key = std::make_pair(mp.t, mp.t_prime);
    auto it = gen_acc.find(key);
    if (it == gen_acc.end()) {
      gen_acc.emplace(key, std::make_pair((mp.z_prime - mp.z).eval(), 1L));
    } else {
      it->second.first += mp.z_prime - mp.z;
      it->second.second += 1;
    }
  }
  for (auto& [key, acc] : gen_acc) {
    PairGenerator pg;
    pg.t = key.first;
    pg.t_prime = key.second;
    pg.mean_disp = acc.first / static_cast<double>(acc.second);
    res.generators.push_back(std::move(pg));
  }
  return res;
}

JacobianMatrix jacobian_ratio(const MatchedPair& pair, const std::vector<CcpSurface>& surfaces) {
  MatrixXd jt = surfaces[pair.t].jacobian(pair.z);
  MatrixXd jtp = surfaces[pair.t_prime].jacobian(pair.z_prime);
  if (jt.rows() != jt.cols()) {
    throw InvalidArgumentError("jacobian_ratio: surface Jacobian must be square (dim z == J)");
  }
  if (!(condition_number(jt) < kCondCap) || !(condition_number(jtp) < kCondCap)) {
    throw SingularJacobianError("jacobian_ratio: near-singular surface Jacobian at a matched point");
  }
  return make_jacobian(jtp.inverse() * jt);
}

// ---------------------------------------------------------------------------
// IndexField

double IndexField::coverage() const {
  long n = 0;
  for (auto c : covered) n += c != 0;
  return static_cast<double>(n) / covered.size();
}

VectorXd IndexField::eval_g(const VectorXd& z) const {
  const int d = grid.dim();
  std::vector<int> cell(d);
  std::vector<double> t(d);
  for (int k = 0; k < d; ++k) {
    double u = (z[k] - grid.box.lower[k]) / grid.pitch(k);
    int c = static_cast<int>(std::floor(u));
    c = std::clamp(c, 0, grid.points[k] - 2);
    cell[k] = c;
    t[k] = u - c;
  }
  VectorXd acc = VectorXd::Zero(g_values.cols());
  const long corners = 1L << d;
  for (long mask = 0; mask < corners; ++mask) {
    std::vector<int> idx(d);
    double w = 1.0;
    for (int k = 0; k < d; ++k) {
      int bit = static_cast<int>((mask >> k) & 1);
      idx[k] = cell[k] + bit;
      w *= bit ? t[k] : 1.0 - t[k];
    }
    long flat = grid.flatten(idx);
    if (!is_covered(flat)) {
      throw NoSupportError("IndexField: query point touches uncovered grid nodes");
    }
    acc += w * g_values.row(flat).transpose();
  }
  return acc;
}

// ---------------------------------------------------------------------------
// Chaining

namespace {

struct Hop {
  long target;
  int a, b;
  VectorXd z_src;
};

// Multilinear read of the partially-resolved Jacobian field at z; falls back
// to the nearest covered node while the surrounding cell is incomplete.
MatrixXd field_at(const ZGrid& grid, const std::vector<MatrixXd>& jac,
                  const std::vector<std::uint8_t>& covered, const VectorXd& z, int J, bool& ok) {
  const int d = grid.dim();
  std::vector<int> cell(d);
  std::vector<double> t(d);
  for (int k = 0; k < d; ++k) {
    double u = (z[k] - grid.box.lower[k]) / grid.pitch(k);
    int c = std::clamp(static_cast<int>(std::floor(u)), 0, grid.points[k] - 2);
    cell[k] = c;
    t[k] = u - c;
  }
  const long corners = 1L << d;
  bool full = true;
  std::vector<long> flats(corners);
  for (long mask = 0; mask < corners; ++mask) {
    std::vector<int> idx(d);
    for (int k = 0; k < d; ++k) idx[k] = cell[k] + static_cast<int>((mask >> k) & 1);
    flats[mask] = grid.flatten(idx);
    full = full && covered[flats[mask]] != 0;
  }
  if (full) {
    MatrixXd acc = MatrixXd::Zero(J, J);
    for (long mask = 0; mask < corners; ++mask) {
      double w = 1.0;
      for (int k = 0; k < d; ++k) w *= ((mask >> k) & 1) ? t[k] : 1.0 - t[k];
      acc += w * jac[flats[mask]];
    }
    ok = true;
    return acc;
  }
  long center = grid.nearest_flat(z);
  auto cidx = grid.unflatten(center);
  long best = -1;
  double best_dist = std::numeric_limits<double>::infinity();
  long combos = 1;
  for (int k = 0; k < d; ++k) combos *= 3;
  for (long c = 0; c < combos; ++c) {
    long rem = c;
    std::vector<int> idx(d);
    bool valid = true;
    for (int k = 0; k < d; ++k) {
      int off = static_cast<int>(rem % 3) - 1;
      rem /= 3;
      idx[k] = cidx[k] + off;
      valid = valid && idx[k] >= 0 && idx[k] < grid.points[k];
    }
    if (!valid) continue;
    long flat = grid.flatten(idx);
    if (!covered[flat]) continue;
    double dist = (grid.node(flat) - z).norm();
    if (dist < best_dist) {
      best_dist = dist;
      best = flat;
    }
  }
  if (best >= 0 && best_dist <= 1.1 * grid.max_pitch()) {
    ok = true;
    return jac[best];
  }
  ok = false;
  return MatrixXd();
}

}  // namespace

IndexField chain_and_integrate(const MatchResult& match, const std::vector<CcpSurface>& surfaces,
                               const ZGrid& grid, const ChainOpts& opts) {
  if (match.pairs.empty()) {
    throw DisconnectedCoverError("chain_and_integrate: no matched pairs to chain");
  }
  const int d = grid.dim();
  const int J = surfaces[match.pairs.front().t].goods();
  if (J != d) throw InvalidArgumentError("chain_and_integrate: requires dim(z) == J");

  struct Gen {
    int a, b;
    VectorXd disp;
  };
  std::vector<Gen> gens;
  double min_pitch = std::numeric_limits<double>::infinity();
  for (int k = 0; k < d; ++k) min_pitch = std::min(min_pitch, grid.pitch(k));
  for (const auto& pg : match.generators) {
    if (pg.mean_disp.norm() < 0.45 * min_pitch) continue;  // hop would snap to its own source
    gens.push_back({pg.t, pg.t_prime, pg.mean_disp});
    gens.push_back({pg.t_prime, pg.t, -pg.mean_disp});
  }
  // short hops first: the transported ratio is most accurate on short moves
  std::stable_sort(gens.begin(), gens.end(), [](const Gen& x, const Gen& y) {
    double nx = x.disp.norm(), ny = y.disp.norm();
    if (nx != ny) return nx < ny;
    if (x.a != y.a) return x.a < y.a;
    return x.b < y.b;
  });
  if (opts.max_generators > 0 && static_cast<int>(gens.size()) > opts.max_generators) {
    gens.resize(opts.max_generators);
  }
  if (opts.reverse_generators) std::reverse(gens.begin(), gens.end());

  const long n = grid.node_count();
  std::vector<MatrixXd> jac(n);
  std::vector<std::uint8_t> covered(n, 0);
  const long anchor = grid.anchor_flat();
  jac[anchor] = MatrixXd::Identity(J, J);
  covered[anchor] = 1;
  std::deque<long> queue{anchor};
  std::vector<Hop> hops;

  // Backward-exact hop: pin the target at a grid node of market b, solve the
  // matched source point on market a, transport the Jacobian across the pair.
  auto try_hop = [&](long target, const Gen& gen) -> bool {
    const VectorXd tz = grid.node(target);
    VectorXd s = surfaces[gen.b].values().row(target).transpose();
    VectorXd warm = tz - gen.disp;
    InversionResult r = solve_z_star_soft(surfaces[gen.a], SimplexPoint(s), opts.solve, &warm);
    if (!r.converged) return false;
    if ((r.z - tz).norm() > std::max(match.delta, 1e-12)) return false;
    bool ok = false;
    MatrixXd g_src = field_at(grid, jac, covered, r.z, J, ok);
    if (!ok) return false;
    MatrixXd ja = surfaces[gen.a].jacobian(r.z);
    MatrixXd jb = surfaces[gen.b].jacobian(tz);
    if (!(condition_number(ja) < kCondCap) || !(condition_number(jb) < kCondCap)) return false;
    jac[target] = g_src * ja.inverse() * jb;
    covered[target] = 1;
    hops.push_back({target, gen.a, gen.b, r.z});
    return true;
  };

  while (!queue.empty()) {
    long cur = queue.front();
    queue.pop_front();
    const VectorXd cz = grid.node(cur);
    for (const auto& gen : gens) {
      VectorXd predicted = cz + gen.disp;
      if (!grid.box.contains(predicted)) continue;
      long target = grid.nearest_flat(predicted);
      if (covered[target] || target == cur) continue;
      if (try_hop(target, gen)) queue.push_back(target);
    }
  }

  // refinement: re-transport each hop against the completed field
  for (int sweep = 0; sweep < opts.refine_sweeps; ++sweep) {
    for (const auto& h : hops) {
      bool ok = false;
      MatrixXd g_src = field_at(grid, jac, covered, h.z_src, J, ok);
      if (!ok) continue;
      MatrixXd ja = surfaces[h.a].jacobian(h.z_src);
      MatrixXd jb = surfaces[h.b].jacobian(grid.node(h.target));
      if (!(condition_number(ja) < kCondCap) || !(condition_number(jb) < kCondCap)) continue;
      jac[h.target] = g_src * ja.inverse() * jb;
    }
    jac[anchor] = MatrixXd::Identity(J, J);
  }

  // ghat: integrate the Jacobian field outward from the anchor along lattice
  // edges; only the anchor-connected component is kept.
  IndexField field;
  field.grid = grid;
  field.g_values = MatrixXd::Zero(n, J);
  field.jacobians.assign(n, MatrixXd());
  field.covered.assign(n, 0);
  field.covered[anchor] = 1;
  field.jacobians[anchor] = jac[anchor];
  std::deque<long> q2{anchor};
  while (!q2.empty()) {
    long cur = q2.front();
    q2.pop_front();
    auto idx = grid.unflatten(cur);
    for (int k = 0; k < d; ++k) {
      for (int step : {-1, 1}) {
        auto nidx = idx;
        nidx[k] += step;
        if (nidx[k] < 0 || nidx[k] >= grid.points[k]) continue;
        long nb = grid.flatten(nidx);
        if (!covered[nb] || field.covered[nb]) continue;
        VectorXd dz = grid.node(nb) - grid.node(cur);
        field.g_values.row(nb) =
            field.g_values.row(cur) + (0.5 * (jac[cur] + jac[nb]) * dz).transpose();
        field.jacobians[nb] = jac[nb];
        field.covered[nb] = 1;
        q2.push_back(nb);
      }
    }
  }

  if (field.coverage() < opts.min_coverage) {
    throw DisconnectedCoverError("chain_and_integrate: anchor component covers only " +
                                 std::to_string(field.coverage()) + " of the grid");
  }
  return field;
}

// ---------------------------------------------------------------------------
// Common choice probability

CcpCertificate find_common_ccp(const std::vector<CcpSurface>& surfaces, int x_cell,
                               const CertOpts& opts) {
  if (surfaces.empty()) throw InvalidArgumentError("find_common_ccp: need at least one market");
  const int J = surfaces.front().goods();
  const long m_count = static_cast<long>(surfaces.size());
  const double interior_eps = 1e-4;

  std::vector<VectorXd> warm(m_count, surfaces.front().grid().anchor_point());
  auto objective = [&](const VectorXd& s, VectorXd& resid) -> double {
    double worst = 0.0;
    for (long m = 0; m < m_count; ++m) {
      InversionResult r = solve_z_star_soft(surfaces[m], SimplexPoint(s), opts.solve, &warm[m]);
      if (r.converged) warm[m] = r.z;
      resid[m] = r.residual;
      worst = std::max(worst, r.residual);
    }
    return worst;
  };
  auto feasible = [&](const VectorXd& s) {
    return s.minCoeff() >= interior_eps && s.sum() <= 1.0 - interior_eps;
  };

  // seeds: image centroids of all markets, of the most constrained market,
  // and their blend
  VectorXd centroid = VectorXd::Zero(J);
  double tightest = std::numeric_limits<double>::infinity();
  VectorXd tight_centroid = VectorXd::Zero(J);
  for (const auto& surf : surfaces) {
    VectorXd mu = surf.values().colwise().mean().transpose();
    centroid += mu / static_cast<double>(m_count);
    double spread = (surf.values().colwise().maxCoeff() - surf.values().colwise().minCoeff()).sum();
    if (spread < tightest) {
      tightest = spread;
      tight_centroid = mu;
    }
  }
  std::vector<VectorXd> seeds = {centroid, tight_centroid, 0.5 * (centroid + tight_centroid)};
  if (opts.restarts < static_cast<int>(seeds.size())) seeds.resize(std::max(1, opts.restarts));

  CcpCertificate best;
  best.x_cell = x_cell;
  best.max_residual = std::numeric_limits<double>::infinity();
  for (const auto& seed : seeds) {
    VectorXd s = seed;
    if (!feasible(s)) continue;
    VectorXd resid(m_count);
    double f = objective(s, resid);
    VectorXd best_resid = resid;
    double step = opts.step0;
    while (step >= opts.step_tol && f > 0.1 * opts.verdict_tol) {
      bool improved = false;
      for (int j = 0; j < J && !improved; ++j) {
        for (double sign : {+1.0, -1.0}) {
          VectorXd cand = s;
          cand[j] += sign * step;
          if (!feasible(cand)) continue;
          VectorXd r2(m_count);
          double f2 = objective(cand, r2);
          if (f2 < f) {
            s = cand;
            f = f2;
            best_resid = r2;
            improved = true;
            break;
          }
        }
      }
      if (!improved) step *= 0.5;
    }
    if (f < best.max_residual) {
      best.max_residual = f;
      best.s_star = SimplexPoint(s);
      best.residuals = best_resid;
    }
  }

  best.market_ids.resize(m_count);
  for (long m = 0; m < m_count; ++m) best.market_ids[m] = surfaces[m].market_id();
  best.holds = best.max_residual <= opts.verdict_tol;
  if (!best.holds && best.residuals.size() > 0) {
    Eigen::Index arg;
    best.residuals.maxCoeff(&arg);
    best.witness = best.market_ids[arg];
  }
  return best;
}

}  // namespace dlab
