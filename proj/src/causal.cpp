#include "demandlab/causal.hpp"

#include <algorithm>
#include <deque>
#include <map>
#include <sstream>

namespace dlab {

std::string role_name(NodeRole role) {
  switch (role) {
    case NodeRole::W: return "W";
    case NodeRole::Xi: return "Xi";
    case NodeRole::X: return "X";
    case NodeRole::P: return "P";
    case NodeRole::M: return "M";
    case NodeRole::V: return "V";
    case NodeRole::L: return "L";
    case NodeRole::Latent: return "latent";
    case NodeRole::Other: return "other";
  }
  return "other";
}

int CausalDag::ensure_node_(const std::string& name) {
  int id = node_id(name);
  if (id >= 0) return id;
  names_.push_back(name);
  roles_.push_back(NodeRole::Other);
  parents_.emplace_back();
  children_.emplace_back();
  return static_cast<int>(names_.size()) - 1;
}

int CausalDag::add_node(const std::string& name, NodeRole role) {
  int id = ensure_node_(name);
  roles_[id] = role;
  return id;
}

void CausalDag::add_edge(const std::string& from, const std::string& to) {
  int a = ensure_node_(from), b = ensure_node_(to);
  if (a == b) throw InvalidArgumentError("CausalDag: self edge " + from);
  children_[a].push_back(b);
  parents_[b].push_back(a);
}

void CausalDag::add_bidirected(const std::string& a, const std::string& b) {
  std::string latent = "_u" + std::to_string(latent_counter_++) + "(" + a + "," + b + ")";
  add_node(latent, NodeRole::Latent);
  add_edge(latent, a);
  add_edge(latent, b);
}

int CausalDag::node_id(const std::string& name) const {
  for (int i = 0; i < size(); ++i) {
    if (names_[i] == name) return i;
  }
  return -1;
}

std::vector<int> CausalDag::nodes_with_role(NodeRole role) const {
  std::vector<int> out;
  for (int i = 0; i < size(); ++i) {
    if (roles_[i] == role) out.push_back(i);
  }
  return out;
}

bool CausalDag::acyclic() const {
  std::vector<int> indeg(size(), 0);
  for (int v = 0; v < size(); ++v) indeg[v] = static_cast<int>(parents_[v].size());
  std::deque<int> q;
  for (int v = 0; v < size(); ++v) {
    if (indeg[v] == 0) q.push_back(v);
  }
  int seen = 0;
  while (!q.empty()) {
    int v = q.front();
    q.pop_front();
    ++seen;
    for (int c : children_[v]) {
      if (--indeg[c] == 0) q.push_back(c);
    }
  }
  return seen == size();
}

void CausalDag::require_acyclic() const {
  if (!acyclic()) throw InvalidArgumentError("CausalDag: directed part has a cycle");
}

// ---------------------------------------------------------------------------

std::string ExclusionVerdict::witness_string() const {
  std::string out;
  for (size_t i = 0; i < witness.size(); ++i) {
    if (i > 0) out += " - ";
    out += witness[i].node;
    if (witness[i].collider) out += "[collider]";
  }
  return out;
}

namespace {

std::string join_names(const std::vector<std::string>& v) {
  std::string out;
  for (size_t i = 0; i < v.size(); ++i) {
    if (i > 0) out += ",";
    out += v[i];
  }
  return out;
}

}  // namespace

ExclusionVerdict d_separated(const CausalDag& g, const std::vector<std::string>& a,
                             const std::vector<std::string>& b,
                             const std::vector<std::string>& c) {
  g.require_acyclic();
  auto ids_of = [&](const std::vector<std::string>& names) {
    std::vector<int> ids;
    for (const auto& n : names) {
      int id = g.node_id(n);
      if (id < 0) throw InvalidArgumentError("d_separated: unknown node " + n);
      ids.push_back(id);
    }
    return ids;
  };
  std::vector<int> a_ids = ids_of(a), b_ids = ids_of(b), c_ids = ids_of(c);
  std::vector<char> in_a(g.size(), 0), in_b(g.size(), 0), in_c(g.size(), 0);
  for (int v : a_ids) in_a[v] = 1;
  for (int v : b_ids) {
    if (in_a[v]) throw OverlappingSetsError("d_separated: sets A and B overlap");
    in_b[v] = 1;
  }
  for (int v : c_ids) {
    if (in_a[v] || in_b[v]) throw OverlappingSetsError("d_separated: conditioning set overlaps A or B");
    in_c[v] = 1;
  }

  ExclusionVerdict verdict;
  verdict.query = join_names(a) + " _||_ " + join_names(b) +
                  (c.empty() ? "" : " | " + join_names(c));

  // nodes with a descendant in C (inclusive): ancestors of C
  std::vector<char> anc_c(g.size(), 0);
  {
    std::deque<int> q;
    for (int v : c_ids) {
      anc_c[v] = 1;
      q.push_back(v);
    }
    while (!q.empty()) {
      int v = q.front();
      q.pop_front();
      for (int p : g.parents(v)) {
        if (!anc_c[p]) {
          anc_c[p] = 1;
          q.push_back(p);
        }
      }
    }
  }

  // states (node, arrival): arrival 0 = via the edge's head (from a parent
  // edge into this node), 1 = via the edge's tail
  constexpr int kHead = 0, kTail = 1;
  std::vector<std::array<char, 2>> seen(g.size(), {0, 0});
  struct Pred {
    int node = -1;
    int arr = -1;
  };
  std::vector<std::array<Pred, 2>> pred(g.size());
  std::deque<std::pair<int, int>> queue;

  auto visit = [&](int node, int arr, int from, int from_arr) -> bool {
    if (seen[node][arr]) return false;
    seen[node][arr] = 1;
    pred[node][arr] = {from, from_arr};
    queue.emplace_back(node, arr);
    return true;
  };

  int hit_node = -1, hit_arr = -1;
  for (int s : a_ids) {
    for (int child : g.children(s)) {
      if (visit(child, kHead, s, -1) && in_b[child]) {
        hit_node = child;
        hit_arr = kHead;
      }
    }
    for (int par : g.parents(s)) {
      if (visit(par, kTail, s, -1) && in_b[par]) {
        hit_node = par;
        hit_arr = kTail;
      }
    }
    if (hit_node >= 0) break;
  }

  while (hit_node < 0 && !queue.empty()) {
    auto [v, arr] = queue.front();
    queue.pop_front();
    // leave toward a child: v acts as a chain/fork node
    if (!in_c[v]) {
      for (int child : g.children(v)) {
        if (visit(child, kHead, v, arr) && in_b[child]) {
          hit_node = child;
          hit_arr = kHead;
          break;
        }
      }
    }
    if (hit_node >= 0) break;
    // leave toward a parent: collider when we arrived via a head
    bool passable = (arr == kHead) ? anc_c[v] != 0 : !in_c[v];
    if (passable) {
      for (int par : g.parents(v)) {
        if (visit(par, kTail, v, arr) && in_b[par]) {
          hit_node = par;
          hit_arr = kTail;
          break;
        }
      }
    }
  }

  if (hit_node < 0) {
    verdict.holds = true;
    return verdict;
  }
  verdict.holds = false;
  // walk the predecessor chain back to A, then annotate colliders: a node is
  // a collider on the path iff we arrived at its head and left via a parent
  std::vector<std::pair<int, int>> chain;  // (node, arrival)
  int node = hit_node, arr = hit_arr;
  while (node >= 0) {
    chain.emplace_back(node, arr);
    if (arr < 0) break;  // reached the seeding A-node
    Pred p = pred[node][arr];
    node = p.node;
    arr = p.arr;
  }
  std::reverse(chain.begin(), chain.end());
  for (size_t i = 0; i < chain.size(); ++i) {
    PathStep step;
    step.node = g.name(chain[i].first);
    if (i + 1 < chain.size()) {
      step.collider = chain[i].second == kHead && chain[i + 1].second == kTail;
    }
    verdict.witness.push_back(step);
  }
  return verdict;
}

ExclusionVerdict audit_instrument(const CausalDag& g) {
  auto w = g.nodes_with_role(NodeRole::W);
  auto xi = g.nodes_with_role(NodeRole::Xi);
  auto x = g.nodes_with_role(NodeRole::X);
  if (w.empty() || xi.empty() || x.empty()) {
    throw MissingRoleError("audit_instrument: graph must label W, Xi, and X nodes");
  }
  auto names = [&](const std::vector<int>& ids) {
    std::vector<std::string> out;
    for (int id : ids) out.push_back(g.name(id));
    return out;
  };
  return d_separated(g, names(w), names(xi), names(x));
}

// ---------------------------------------------------------------------------

namespace {

CausalDag wxx_graph() {
  CausalDag g;
  g.add_node("W", NodeRole::W);
  g.add_node("Xi", NodeRole::Xi);
  g.add_node("X", NodeRole::X);
  return g;
}

}  // namespace

std::vector<BuiltinFigure> builtin_figures() {
  std::vector<BuiltinFigure> figs;

  {
    BuiltinFigure f;
    f.name = "fully_exogenous";
    f.dag = wxx_graph();
    f.dag.add_edge("Xi", "X");
    f.expect_holds = true;
    figs.push_back(std::move(f));
  }
  {
    BuiltinFigure f;
    f.name = "reversed_causation";
    f.dag = wxx_graph();
    f.dag.add_edge("X", "Xi");
    f.expect_holds = true;
    figs.push_back(std::move(f));
  }
  {
    BuiltinFigure f;
    f.name = "common_cause";
    f.dag = wxx_graph();
    f.dag.add_node("V", NodeRole::V);
    f.dag.add_edge("V", "Xi");
    f.dag.add_edge("V", "X");
    f.expect_holds = true;
    figs.push_back(std::move(f));
  }
  {
    BuiltinFigure f;
    f.name = "cost_proxy";
    f.dag = wxx_graph();
    f.dag.add_node("L", NodeRole::L);
    f.dag.add_edge("Xi", "X");
    f.dag.add_edge("L", "W");
    f.expect_holds = true;
    figs.push_back(std::move(f));
  }
  {
    BuiltinFigure f;
    f.name = "x_causes_w";
    f.dag = wxx_graph();
    f.dag.add_edge("Xi", "X");
    f.dag.add_edge("X", "W");
    f.expect_holds = true;
    figs.push_back(std::move(f));
  }
  {
    // Hausman instruments with explicit other-market nodes. The cross-market
    // dependence of the same product's characteristics is encoded as a
    // directed carry-over edge.
    BuiltinFigure f;
    f.name = "hausman_other_markets";
    f.dag = wxx_graph();
    f.dag.add_node("L", NodeRole::L);
    f.dag.add_node("Xi_other", NodeRole::Other);
    f.dag.add_node("X_other", NodeRole::Other);
    f.dag.add_edge("Xi", "X");
    f.dag.add_edge("X", "L");
    f.dag.add_edge("L", "W");
    f.dag.add_edge("Xi_other", "W");
    f.dag.add_edge("X_other", "W");
    f.dag.add_edge("X", "X_other");
    f.expect_holds = true;
    figs.push_back(std::move(f));
  }
  {
    BuiltinFigure f;
    f.name = "fork";
    f.dag = wxx_graph();
    f.dag.add_edge("X", "Xi");
    f.dag.add_edge("X", "W");
    f.expect_holds = true;
    figs.push_back(std::move(f));
  }
  {
    BuiltinFigure f;
    f.name = "w_causes_x";
    f.dag = wxx_graph();
    f.dag.add_edge("X", "Xi");
    f.dag.add_edge("W", "X");
    f.expect_holds = true;
    figs.push_back(std::move(f));
  }
  {
    BuiltinFigure f;
    f.name = "latent_cost_causes_x";
    f.dag = wxx_graph();
    f.dag.add_node("L", NodeRole::L);
    f.dag.add_node("Xi_other", NodeRole::Other);
    f.dag.add_node("X_other", NodeRole::Other);
    f.dag.add_edge("X", "Xi");
    f.dag.add_edge("L", "X");
    f.dag.add_edge("L", "W");
    f.dag.add_edge("Xi_other", "W");
    f.dag.add_edge("X_other", "W");
    f.dag.add_edge("X", "X_other");
    f.expect_holds = true;
    figs.push_back(std::move(f));
  }
  {
    BuiltinFigure f;
    f.name = "collider";
    f.dag = wxx_graph();
    f.dag.add_edge("Xi", "X");
    f.dag.add_edge("W", "X");
    f.expect_holds = false;
    figs.push_back(std::move(f));
  }
  {
    BuiltinFigure f;
    f.name = "simultaneous_choice";
    f.dag = wxx_graph();
    f.dag.add_node("P", NodeRole::P);
    f.dag.add_edge("Xi", "X");
    f.dag.add_edge("W", "X");
    f.dag.add_edge("Xi", "P");
    f.dag.add_edge("W", "P");
    f.expect_holds = false;
    figs.push_back(std::move(f));
  }
  {
    BuiltinFigure f;
    f.name = "common_cause_collider";
    f.dag = wxx_graph();
    f.dag.add_node("V", NodeRole::V);
    f.dag.add_edge("V", "Xi");
    f.dag.add_edge("V", "X");
    f.dag.add_edge("W", "X");
    f.expect_holds = false;
    figs.push_back(std::move(f));
  }
  {
    BuiltinFigure f;
    f.name = "proxy_collider";
    f.dag = wxx_graph();
    f.dag.add_node("L", NodeRole::L);
    f.dag.add_edge("Xi", "X");
    f.dag.add_edge("L", "X");
    f.dag.add_edge("L", "W");
    f.expect_holds = false;
    figs.push_back(std::move(f));
  }
  return figs;
}

// ---------------------------------------------------------------------------

TimingResult timing_instrument(const MatrixXd& m_series, int phi_degree) {
  if (m_series.cols() < 2) {
    throw SeriesTooShortError("timing_instrument: need at least two observed periods");
  }
  if (phi_degree < 1) throw InvalidArgumentError("timing_instrument: degree must be positive");
  const long t_count = m_series.rows();
  const long steps = m_series.cols() - 1;

  // pooled polynomial regression of M^tau on M^{tau-1}
  MatrixXd design(t_count * steps, phi_degree + 1);
  VectorXd y(t_count * steps);
  long row = 0;
  for (long t = 0; t < t_count; ++t) {
    for (long s = 0; s < steps; ++s, ++row) {
      double lag = m_series(t, s);
      double pw = 1.0;
      for (int d = 0; d <= phi_degree; ++d) {
        design(row, d) = pw;
        pw *= lag;
      }
      y[row] = m_series(t, s + 1);
    }
  }
  TimingResult res;
  res.phi_coef = design.colPivHouseholderQr().solve(y);
  res.w_hat.resize(t_count, steps);
  row = 0;
  for (long t = 0; t < t_count; ++t) {
    for (long s = 0; s < steps; ++s, ++row) {
      res.w_hat(t, s) = y[row] - design.row(row).dot(res.phi_coef);
    }
  }

  CausalDag& g = res.dag;
  g.add_node("Xi_lag", NodeRole::Other);
  g.add_node("Xi", NodeRole::Xi);
  g.add_node("M_lag", NodeRole::M);
  g.add_node("M", NodeRole::M);
  g.add_node("W", NodeRole::W);
  g.add_node("X", NodeRole::X);
  g.add_node("P", NodeRole::P);
  g.add_edge("Xi_lag", "X");
  g.add_edge("M_lag", "X");
  g.add_edge("M_lag", "M");
  g.add_edge("W", "M");
  g.add_edge("X", "Xi");
  g.add_edge("X", "P");
  g.add_edge("M", "P");
  g.add_edge("Xi", "P");
  g.add_edge("Xi_lag", "Xi");

  res.innovation_verdict = d_separated(g, {"W"}, {"Xi"}, {"X"});
  res.current_cost_verdict = d_separated(g, {"M"}, {"Xi"}, {"X"});
  res.lagged_cost_verdict = d_separated(g, {"M_lag"}, {"Xi"}, {"X"});
  return res;
}

// ---------------------------------------------------------------------------

namespace {

std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

NodeRole parse_role(const std::string& token, int line_no) {
  std::string t = token;
  std::transform(t.begin(), t.end(), t.begin(), [](unsigned char ch) { return std::tolower(ch); });
  if (t == "instrument" || t == "w") return NodeRole::W;
  if (t == "shock" || t == "xi") return NodeRole::Xi;
  if (t == "characteristics" || t == "x") return NodeRole::X;
  if (t == "price" || t == "p") return NodeRole::P;
  if (t == "cost" || t == "m") return NodeRole::M;
  if (t == "factor" || t == "v") return NodeRole::V;
  if (t == "latent_cost" || t == "l") return NodeRole::L;
  if (t == "latent" || t == "u") return NodeRole::Latent;
  if (t == "other") return NodeRole::Other;
  throw GraphParseError("line " + std::to_string(line_no) + ": unknown role '" + token + "'");
}

}  // namespace

CausalDag parse_dag(const std::string& text) {
  CausalDag g;
  std::istringstream in(text);
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    std::string line = trim(raw);
    if (line.empty() || line[0] == '#') continue;
    if (line.rfind("node ", 0) == 0) {
      std::istringstream ls(line.substr(5));
      std::string name, attr;
      ls >> name;
      if (name.empty()) throw GraphParseError("line " + std::to_string(line_no) + ": missing node name");
      NodeRole role = NodeRole::Other;
      while (ls >> attr) {
        if (attr.rfind("role=", 0) == 0) {
          role = parse_role(attr.substr(5), line_no);
        } else {
          throw GraphParseError("line " + std::to_string(line_no) + ": unknown attribute '" + attr + "'");
        }
      }
      g.add_node(name, role);
      continue;
    }
    size_t bidir = line.find("<->");
    size_t arrow = line.find("->");
    if (bidir != std::string::npos) {
      std::string lhs = trim(line.substr(0, bidir));
      std::string rhs = trim(line.substr(bidir + 3));
      if (lhs.empty() || rhs.empty()) {
        throw GraphParseError("line " + std::to_string(line_no) + ": malformed bidirected edge");
      }
      g.add_bidirected(lhs, rhs);
    } else if (arrow != std::string::npos) {
      std::string lhs = trim(line.substr(0, arrow));
      std::string rhs = trim(line.substr(arrow + 2));
      if (lhs.empty() || rhs.empty()) {
        throw GraphParseError("line " + std::to_string(line_no) + ": malformed edge");
      }
      g.add_edge(lhs, rhs);
    } else {
      throw GraphParseError("line " + std::to_string(line_no) + ": expected an edge or node line");
    }
  }
  g.require_acyclic();
  return g;
}

namespace {

std::vector<std::string> split_names(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(text);
  while (std::getline(in, cur, ',')) {
    std::string t = trim(cur);
    if (!t.empty()) out.push_back(t);
  }
  return out;
}

}  // namespace

void parse_independence_query(const std::string& text, std::vector<std::string>& a,
                              std::vector<std::string>& b, std::vector<std::string>& c) {
  size_t sep = text.find("_||_");
  if (sep == std::string::npos) {
    throw GraphParseError("query must look like 'A _||_ B | C'");
  }
  std::string lhs = text.substr(0, sep);
  std::string rest = text.substr(sep + 4);
  std::string rhs = rest, cond;
  size_t bar = rest.find('|');
  if (bar != std::string::npos) {
    rhs = rest.substr(0, bar);
    cond = rest.substr(bar + 1);
  }
  a = split_names(lhs);
  b = split_names(rhs);
  c = split_names(cond);
  if (a.empty() || b.empty()) throw GraphParseError("query needs nodes on both sides of _||_");
}

}  // namespace dlab
