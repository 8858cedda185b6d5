#include <doctest.h>

#include <cmath>
#include <vector>

#include "demandlab/causal.hpp"

using namespace dlab;

namespace {

// Independent oracle: binary Bayesian network with explicit CPTs whose joint
// is enumerated exactly; conditional independence is then checked from the
// joint table directly.
struct DiscreteBn {
  int n = 0;
  std::vector<std::vector<int>> parents;
  std::vector<std::vector<double>> cpt;  // p(node = 1 | parent bits)
  std::vector<double> joint;             // 2^n probabilities

  void build_joint() {
    joint.assign(1L << n, 0.0);
    for (long m = 0; m < (1L << n); ++m) {
      double p = 1.0;
      for (int v = 0; v < n; ++v) {
        long pa_index = 0;
        for (size_t k = 0; k < parents[v].size(); ++k) {
          pa_index |= ((m >> parents[v][k]) & 1) << k;
        }
        double p1 = cpt[v][pa_index];
        p *= ((m >> v) & 1) ? p1 : 1.0 - p1;
      }
      joint[m] = p;
    }
  }

  // max over assignments of |P(a,b,c)P(c) - P(a,c)P(b,c)|
  double ci_violation(int a, int b, const std::vector<int>& cond) const {
    double worst = 0.0;
    long c_count = 1L << cond.size();
    for (long cm = 0; cm < c_count; ++cm) {
      auto matches_c = [&](long m) {
        for (size_t k = 0; k < cond.size(); ++k) {
          if (((m >> cond[k]) & 1) != ((cm >> k) & 1)) return false;
        }
        return true;
      };
      for (int va = 0; va <= 1; ++va) {
        for (int vb = 0; vb <= 1; ++vb) {
          double pabc = 0, pac = 0, pbc = 0, pc = 0;
          for (long m = 0; m < (1L << n); ++m) {
            if (!matches_c(m)) continue;
            double p = joint[m];
            pc += p;
            bool am = ((m >> a) & 1) == va;
            bool bm = ((m >> b) & 1) == vb;
            if (am) pac += p;
            if (bm) pbc += p;
            if (am && bm) pabc += p;
          }
          worst = std::max(worst, std::abs(pabc * pc - pac * pbc));
        }
      }
    }
    return worst;
  }
};

DiscreteBn random_bn(Rng& rng, CausalDag& dag_out, int n) {
  DiscreteBn bn;
  bn.n = n;
  bn.parents.resize(n);
  for (int j = 0; j < n; ++j) {
    for (int i = 0; i < j; ++i) {
      if (rng.uniform() < 0.4) bn.parents[j].push_back(i);
    }
  }
  bn.cpt.resize(n);
  for (int v = 0; v < n; ++v) {
    bn.cpt[v].resize(1L << bn.parents[v].size());
    for (auto& p : bn.cpt[v]) p = rng.uniform(0.15, 0.85);
  }
  bn.build_joint();
  for (int v = 0; v < n; ++v) dag_out.add_node("n" + std::to_string(v));
  for (int v = 0; v < n; ++v) {
    for (int p : bn.parents[v]) dag_out.add_edge("n" + std::to_string(p), "n" + std::to_string(v));
  }
  return bn;
}

}  // namespace

TEST_CASE("chain blocked by conditioning, collider opened by conditioning") {
  CausalDag chain;
  chain.add_edge("A", "X");
  chain.add_edge("X", "B");
  CHECK(d_separated(chain, {"A"}, {"B"}, {"X"}).holds);
  CHECK_FALSE(d_separated(chain, {"A"}, {"B"}, {}).holds);

  CausalDag collider;
  collider.add_node("W", NodeRole::W);
  collider.add_node("Xi", NodeRole::Xi);
  collider.add_node("X", NodeRole::X);
  collider.add_edge("Xi", "X");
  collider.add_edge("W", "X");
  CHECK(d_separated(collider, {"W"}, {"Xi"}, {}).holds);
  ExclusionVerdict v = d_separated(collider, {"W"}, {"Xi"}, {"X"});
  CHECK_FALSE(v.holds);
  REQUIRE(v.witness.size() == 3);
  CHECK(v.witness[1].node == "X");
  CHECK(v.witness[1].collider);
}

TEST_CASE("descendants of a collider open it too") {
  CausalDag g;
  g.add_edge("Xi", "X");
  g.add_edge("W", "X");
  g.add_edge("X", "D");
  CHECK(d_separated(g, {"W"}, {"Xi"}, {}).holds);
  CHECK_FALSE(d_separated(g, {"W"}, {"Xi"}, {"D"}).holds);
}

TEST_CASE("overlapping sets are rejected") {
  CausalDag g;
  g.add_edge("A", "B");
  CHECK_THROWS_AS(d_separated(g, {"A"}, {"A"}, {}), OverlappingSetsError);
  CHECK_THROWS_AS(d_separated(g, {"A"}, {"B"}, {"B"}), OverlappingSetsError);
}

TEST_CASE("audit_instrument requires role labels") {
  CausalDag g;
  g.add_edge("A", "B");
  CHECK_THROWS_AS(audit_instrument(g), MissingRoleError);
}

TEST_CASE("golden table: every appendix figure reproduces the published verdict") {
  auto figs = builtin_figures();
  CHECK(figs.size() == 13);
  int matched = 0;
  for (const auto& fig : figs) {
    ExclusionVerdict v = audit_instrument(fig.dag);
    INFO(fig.name);
    CHECK(v.holds == fig.expect_holds);
    if (v.holds == fig.expect_holds) ++matched;
    if (!v.holds) CHECK(v.witness.size() >= 3);
  }
  CHECK(matched == 13);
}

TEST_CASE("proxy collider fails with the documented witness path") {
  auto figs = builtin_figures();
  const BuiltinFigure* proxy = nullptr;
  for (const auto& f : figs) {
    if (f.name == "proxy_collider") proxy = &f;
  }
  REQUIRE(proxy != nullptr);
  ExclusionVerdict v = audit_instrument(proxy->dag);
  REQUIRE_FALSE(v.holds);
  // W <- L -> X <- Xi with the collider at X
  REQUIRE(v.witness.size() == 4);
  CHECK(v.witness[0].node == "W");
  CHECK(v.witness[1].node == "L");
  CHECK_FALSE(v.witness[1].collider);
  CHECK(v.witness[2].node == "X");
  CHECK(v.witness[2].collider);
  CHECK(v.witness[3].node == "Xi");
}

TEST_CASE("cross-market dependence through an explicit latent opens the collider") {
  // the strict latent-common-cause reading of the Hausman graph: conditioning
  // on X opens Xi -> X <- U -> X_other -> W
  CausalDag g;
  g.add_node("W", NodeRole::W);
  g.add_node("Xi", NodeRole::Xi);
  g.add_node("X", NodeRole::X);
  g.add_edge("Xi", "X");
  g.add_edge("X", "L");
  g.add_edge("L", "W");
  g.add_edge("Xi_other", "W");
  g.add_edge("X_other", "W");
  g.add_bidirected("X", "X_other");
  CHECK_FALSE(audit_instrument(g).holds);
}

TEST_CASE("symmetry: d_separated(A,B|C) equals d_separated(B,A|C) on random graphs") {
  Rng rng(77);
  for (int trial = 0; trial < 100; ++trial) {
    CausalDag dag;
    random_bn(rng, dag, 3 + rng.uniform_int(4));
    int n = dag.size();
    int a = rng.uniform_int(n), b = rng.uniform_int(n);
    if (a == b) continue;
    std::vector<std::string> cond;
    for (int v = 0; v < n; ++v) {
      if (v != a && v != b && rng.uniform() < 0.35) cond.push_back(dag.name(v));
    }
    bool ab = d_separated(dag, {dag.name(a)}, {dag.name(b)}, cond).holds;
    bool ba = d_separated(dag, {dag.name(b)}, {dag.name(a)}, cond).holds;
    CHECK(ab == ba);
  }
}

TEST_CASE("oracle equivalence: d-separation is sound and generically faithful") {
  Rng rng(123);
  long dsep_count = 0, dconn_count = 0, faithful = 0;
  for (int net = 0; net < 200; ++net) {
    CausalDag dag;
    int n = 3 + rng.uniform_int(4);  // up to 6 nodes
    DiscreteBn bn = random_bn(rng, dag, n);
    for (int q = 0; q < 3; ++q) {
      int a = rng.uniform_int(n), b = rng.uniform_int(n);
      if (a == b) continue;
      std::vector<int> cond_ids;
      std::vector<std::string> cond;
      for (int v = 0; v < n; ++v) {
        if (v != a && v != b && rng.uniform() < 0.4) {
          cond_ids.push_back(v);
          cond.push_back(dag.name(v));
        }
      }
      bool sep = d_separated(dag, {dag.name(a)}, {dag.name(b)}, cond).holds;
      double viol = bn.ci_violation(a, b, cond_ids);
      if (sep) {
        ++dsep_count;
        // soundness must be exact
        CHECK(viol < 1e-10);
      } else {
        ++dconn_count;
        if (viol > 1e-8) ++faithful;
      }
    }
  }
  REQUIRE(dsep_count > 50);
  REQUIRE(dconn_count > 100);
  CHECK(static_cast<double>(faithful) / dconn_count >= 0.95);
}

TEST_CASE("timing construction: innovations are valid, cost levels are not") {
  Rng rng(55);
  const long T = 400, periods = 4;
  const double phi0 = 0.3, phi1 = 0.7;
  MatrixXd m(T, periods), w_true(T, periods - 1);
  for (long t = 0; t < T; ++t) {
    m(t, 0) = rng.normal();
    for (long s = 1; s < periods; ++s) {
      double w = 0.2 * rng.normal();
      w_true(t, s - 1) = w;
      m(t, s) = phi0 + phi1 * m(t, s - 1) + w;
    }
  }
  TimingResult res = timing_instrument(m, 1);
  CHECK(res.innovation_verdict.holds);
  CHECK_FALSE(res.current_cost_verdict.holds);
  CHECK_FALSE(res.lagged_cost_verdict.holds);
  CHECK(std::abs(res.phi_coef[0] - phi0) < 0.02);
  CHECK(std::abs(res.phi_coef[1] - phi1) < 0.02);
  double rmse = std::sqrt((res.w_hat - w_true).squaredNorm() / w_true.size());
  CHECK(rmse < 0.02);
  CHECK_THROWS_AS(timing_instrument(m.leftCols(1), 1), SeriesTooShortError);
}

TEST_CASE("edge-list parser round trip and diagnostics") {
  std::string text =
      "# a worked example\n"
      "node W role=instrument\n"
      "node Xi role=shock\n"
      "node X role=characteristics\n"
      "Xi -> X\n"
      "L -> W\n"
      "A <-> B\n";
  CausalDag g = parse_dag(text);
  CHECK(g.node_id("W") >= 0);
  CHECK(g.role(g.node_id("Xi")) == NodeRole::Xi);
  CHECK(g.node_id("L") >= 0);
  // bidirected edge desugars to a latent parent
  bool has_latent = false;
  for (int i = 0; i < g.size(); ++i) has_latent = has_latent || g.role(i) == NodeRole::Latent;
  CHECK(has_latent);
  CHECK(audit_instrument(g).holds);

  CHECK_THROWS_WITH_AS(parse_dag("X ->"), doctest::Contains("line 1"), GraphParseError);
  CHECK_THROWS_WITH_AS(parse_dag("node\n"), doctest::Contains("line 1"), GraphParseError);
  CHECK_THROWS_WITH_AS(parse_dag("A -> B\nbogus line\n"), doctest::Contains("line 2"),
                       GraphParseError);
  CHECK_THROWS_AS(parse_dag("A -> B\nB -> A\n"), InvalidArgumentError);
}

TEST_CASE("independence query parser") {
  std::vector<std::string> a, b, c;
  parse_independence_query("W _||_ Xi | X", a, b, c);
  CHECK(a == std::vector<std::string>{"W"});
  CHECK(b == std::vector<std::string>{"Xi"});
  CHECK(c == std::vector<std::string>{"X"});
  parse_independence_query("A,B _||_ C", a, b, c);
  CHECK(a.size() == 2);
  CHECK(c.empty());
  CHECK_THROWS_AS(parse_independence_query("W | X", a, b, c), GraphParseError);
}
