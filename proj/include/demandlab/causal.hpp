// Causal DAGs with latent confounding: d-separation with witness paths,
// instrument-exclusion audits, the appendix gallery of worked examples, and
// the sequential-timing innovation-instrument construction.
#pragma once

#include <string>
#include <vector>

#include "demandlab/core.hpp"

namespace dlab {

enum class NodeRole { W, Xi, X, P, M, V, L, Latent, Other };

std::string role_name(NodeRole role);

class CausalDag {
 public:
  int add_node(const std::string& name, NodeRole role = NodeRole::Other);
  void add_edge(const std::string& from, const std::string& to);
  // dependence through an unmodeled common cause: desugared to a fresh
  // latent parent with two directed edges
  void add_bidirected(const std::string& a, const std::string& b);

  int node_id(const std::string& name) const;  // -1 when absent
  int size() const { return static_cast<int>(names_.size()); }
  const std::string& name(int id) const { return names_[id]; }
  NodeRole role(int id) const { return roles_[id]; }
  const std::vector<int>& parents(int id) const { return parents_[id]; }
  const std::vector<int>& children(int id) const { return children_[id]; }
  std::vector<int> nodes_with_role(NodeRole role) const;

  bool acyclic() const;
  void require_acyclic() const;

 private:
  int ensure_node_(const std::string& name);
  std::vector<std::string> names_;
  std::vector<NodeRole> roles_;
  std::vector<std::vector<int>> parents_;
  std::vector<std::vector<int>> children_;
  int latent_counter_ = 0;
};

struct PathStep {
  std::string node;
  bool collider = false;
};

struct ExclusionVerdict {
  std::string query;
  bool holds = false;
  std::vector<PathStep> witness;  // a d-connecting path when holds is false

  std::string witness_string() const;
};

// Standard d-separation by orientation-tracked reachability. A, B, C must be
// disjoint (OverlappingSetsError otherwise).
ExclusionVerdict d_separated(const CausalDag& g, const std::vector<std::string>& a,
                             const std::vector<std::string>& b,
                             const std::vector<std::string>& c);

// W independent of Xi given X, using the role labels.
ExclusionVerdict audit_instrument(const CausalDag& g);

struct BuiltinFigure {
  std::string name;
  CausalDag dag;
  bool expect_holds = false;
};

// The appendix gallery with the published verdicts.
std::vector<BuiltinFigure> builtin_figures();

// ---------------------------------------------------------------------------
// Sequential timing: M^tau = Phi(M^{tau-1}) + W^tau. The innovations are
// recovered by a pooled series regression of M^tau on M^{tau-1}.

struct TimingResult {
  CausalDag dag;  // the period-indexed graph
  ExclusionVerdict innovation_verdict;  // W^tau, holds
  ExclusionVerdict current_cost_verdict;  // M^tau, fails
  ExclusionVerdict lagged_cost_verdict;   // M^{tau-1}, fails
  MatrixXd w_hat;       // T x (periods-1) recovered innovations
  VectorXd phi_coef;    // fitted transition polynomial coefficients
};

// m_series: one row per market, one column per period.
TimingResult timing_instrument(const MatrixXd& m_series, int phi_degree = 1);

// ---------------------------------------------------------------------------
// Text formats: one edge per line ("A -> B", "A <-> B"), role annotations
// ("node W role=instrument"), '#' comments.

CausalDag parse_dag(const std::string& text);
// "W _||_ Xi | X" with comma-separated node groups; the conditioning part is
// optional.
void parse_independence_query(const std::string& text, std::vector<std::string>& a,
                              std::vector<std::string>& b, std::vector<std::string>& c);

}  // namespace dlab
