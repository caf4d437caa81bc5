#pragma once

#include <algorithm>
#include <cstddef>
#include <fstream>
#include <map>
#include <optional>
#include <queue>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "semgrad/value.hpp"

namespace semgrad {

class GraphError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

using NodeId = std::string;

enum class Role { query, parameter, intermediate, output };

inline const char *to_string(Role r) {
  switch (r) {
  case Role::query: return "query";
  case Role::parameter: return "parameter";
  case Role::intermediate: return "intermediate";
  case Role::output: return "output";
  }
  return "?";
}

inline Role role_from_string(const std::string &s) {
  if (s == "query") return Role::query;
  if (s == "parameter") return Role::parameter;
  if (s == "intermediate") return Role::intermediate;
  if (s == "output") return Role::output;
  throw GraphError("unknown node role '" + s + "'");
}

struct Variable {
  NodeId id;
  Role role = Role::intermediate;
  std::string name;
  std::optional<SemanticValue> init_value; // parameters only
};

// Forward-function reference. `function` is a template name, a numeric
// primitive name or "identity"; `arity` is fixed when the binding is made.
struct Binding {
  std::string function;
  std::size_t arity = 0;
};

using ParamMap = std::map<NodeId, SemanticValue>;

struct ValidationReport {
  std::vector<std::string> violations;
  std::vector<std::pair<NodeId, NodeId>> cycle_edges;

  bool ok() const { return violations.empty(); }
  bool mentions(const std::string &needle) const {
    return std::any_of(violations.begin(), violations.end(), [&](auto &v) {
      return v.find(needle) != std::string::npos;
    });
  }
};

// The computational graph (V, E, H, Theta). Nodes keep insertion order and
// each node keeps the declared order of its predecessors. The structure is
// built through the mutating methods and is then treated as immutable.
class Graph {
public:
  Graph &add_node(NodeId id, Role role, std::string name = {},
                  std::optional<SemanticValue> init = std::nullopt) {
    if (index_.count(id))
      throw GraphError("duplicate node id '" + id + "'");
    index_[id] = nodes_.size();
    if (name.empty())
      name = id;
    nodes_.push_back({std::move(id), role, std::move(name), std::move(init)});
    preds_.emplace_back();
    succs_.emplace_back();
    return *this;
  }

  // Appends `from` to the ordered predecessor list of `to`.
  Graph &add_edge(const NodeId &from, const NodeId &to) {
    std::size_t f = require(from), t = require(to);
    preds_[t].push_back(f);
    succs_[f].push_back(t);
    return *this;
  }

  // Binds a forward function; arity is the current predecessor count.
  Graph &bind(const NodeId &node, std::string function) {
    std::size_t n = require(node);
    bindings_[node] = Binding{std::move(function), preds_[n].size()};
    return *this;
  }

  Graph &bind(const NodeId &node, std::string function, std::size_t arity) {
    require(node);
    bindings_[node] = Binding{std::move(function), arity};
    return *this;
  }

  Graph without_edge(const NodeId &from, const NodeId &to) const {
    Graph g = *this;
    std::size_t f = g.require(from), t = g.require(to);
    auto &p = g.preds_[t];
    auto it = std::find(p.begin(), p.end(), f);
    if (it == p.end())
      throw GraphError("no edge " + from + " -> " + to);
    p.erase(it);
    auto &s = g.succs_[f];
    s.erase(std::find(s.begin(), s.end(), t));
    return g;
  }

  std::size_t size() const { return nodes_.size(); }
  const std::vector<Variable> &nodes() const { return nodes_; }
  bool contains(const NodeId &id) const { return index_.count(id) != 0; }
  std::size_t index_of(const NodeId &id) const { return require(id); }
  const Variable &node(const NodeId &id) const { return nodes_[require(id)]; }

  std::vector<NodeId> predecessors(const NodeId &id) const {
    return ids(preds_[require(id)]);
  }
  // Successors ordered by node insertion order.
  std::vector<NodeId> successors(const NodeId &id) const {
    auto s = succs_[require(id)];
    std::sort(s.begin(), s.end());
    return ids(s);
  }

  std::vector<std::pair<NodeId, NodeId>> edges() const {
    std::vector<std::pair<NodeId, NodeId>> out;
    for (std::size_t t = 0; t < nodes_.size(); ++t)
      for (std::size_t f : preds_[t])
        out.emplace_back(nodes_[f].id, nodes_[t].id);
    return out;
  }

  const std::map<NodeId, Binding> &bindings() const { return bindings_; }
  const Binding &binding(const NodeId &id) const {
    auto it = bindings_.find(id);
    if (it == bindings_.end())
      throw GraphError("node '" + id + "' has no forward function");
    return it->second;
  }

  bool is_root(const NodeId &id) const { return preds_[require(id)].empty(); }

  std::vector<NodeId> ids_with_role(Role r) const {
    std::vector<NodeId> out;
    for (auto &n : nodes_)
      if (n.role == r)
        out.push_back(n.id);
    return out;
  }
  std::vector<NodeId> parameters() const { return ids_with_role(Role::parameter); }

  std::optional<NodeId> query_node() const {
    auto q = ids_with_role(Role::query);
    if (q.empty())
      return std::nullopt;
    return q.front();
  }

  NodeId output_node() const {
    auto o = ids_with_role(Role::output);
    if (o.size() != 1)
      throw GraphError("graph must have exactly one output node");
    return o.front();
  }

  // Initial parameter assignment from the nodes' init values.
  ParamMap initial_params() const {
    ParamMap p;
    for (auto &n : nodes_)
      if (n.role == Role::parameter && n.init_value)
        p[n.id] = *n.init_value;
    return p;
  }

  // Kahn's algorithm; ties go to the earliest-inserted ready node. Returns
  // nullopt on a cycle.
  std::optional<std::vector<NodeId>> try_topological_order() const {
    std::vector<std::size_t> indeg(nodes_.size());
    for (std::size_t i = 0; i < nodes_.size(); ++i)
      indeg[i] = preds_[i].size();
    std::priority_queue<std::size_t, std::vector<std::size_t>, std::greater<>> ready;
    for (std::size_t i = 0; i < nodes_.size(); ++i)
      if (indeg[i] == 0)
        ready.push(i);
    std::vector<NodeId> order;
    while (!ready.empty()) {
      std::size_t n = ready.top();
      ready.pop();
      order.push_back(nodes_[n].id);
      for (std::size_t s : succs_[n])
        if (--indeg[s] == 0)
          ready.push(s);
    }
    if (order.size() != nodes_.size())
      return std::nullopt;
    return order;
  }

private:
  std::size_t require(const NodeId &id) const {
    auto it = index_.find(id);
    if (it == index_.end())
      throw GraphError("unknown node '" + id + "'");
    return it->second;
  }
  std::vector<NodeId> ids(const std::vector<std::size_t> &ix) const {
    std::vector<NodeId> out;
    out.reserve(ix.size());
    for (std::size_t i : ix)
      out.push_back(nodes_[i].id);
    return out;
  }

  std::vector<Variable> nodes_;
  std::map<NodeId, std::size_t> index_;
  std::vector<std::vector<std::size_t>> preds_;
  std::vector<std::vector<std::size_t>> succs_;
  std::map<NodeId, Binding> bindings_;
};

namespace detail {

// Edges lying on some cycle: both endpoints in the same strongly connected
// component (Tarjan), or a self loop.
inline std::vector<std::pair<NodeId, NodeId>> cycle_edges(const Graph &g) {
  const std::size_t n = g.size();
  std::vector<int> index(n, -1), low(n, 0), comp(n, -1);
  std::vector<bool> on_stack(n, false);
  std::vector<std::size_t> stack;
  int counter = 0, ncomp = 0;
  std::vector<std::vector<std::size_t>> adj(n);
  for (auto &[f, t] : g.edges())
    adj[g.index_of(f)].push_back(g.index_of(t));

  auto strongconnect = [&](auto &&self, std::size_t v) -> void {
    index[v] = low[v] = counter++;
    stack.push_back(v);
    on_stack[v] = true;
    for (std::size_t w : adj[v]) {
      if (index[w] < 0) {
        self(self, w);
        low[v] = std::min(low[v], low[w]);
      } else if (on_stack[w]) {
        low[v] = std::min(low[v], index[w]);
      }
    }
    if (low[v] == index[v]) {
      std::size_t w;
      do {
        w = stack.back();
        stack.pop_back();
        on_stack[w] = false;
        comp[w] = ncomp;
      } while (w != v);
      ++ncomp;
    }
  };
  for (std::size_t v = 0; v < n; ++v)
    if (index[v] < 0)
      strongconnect(strongconnect, v);

  std::vector<std::pair<NodeId, NodeId>> out;
  for (auto &[f, t] : g.edges())
    if (comp[g.index_of(f)] == comp[g.index_of(t)])
      out.emplace_back(f, t);
  return out;
}

} // namespace detail

inline ValidationReport validate(const Graph &g) {
  ValidationReport r;
  auto bad = [&](std::string msg) { r.violations.push_back(std::move(msg)); };

  r.cycle_edges = detail::cycle_edges(g);
  for (auto &[f, t] : r.cycle_edges)
    bad("cycle through edge " + f + " -> " + t);

  std::vector<NodeId> outputs, sinks;
  std::size_t queries = 0;
  for (auto &n : g.nodes()) {
    const bool root = g.is_root(n.id);
    const bool sink = g.successors(n.id).empty();
    if (sink)
      sinks.push_back(n.id);
    if (n.role == Role::output)
      outputs.push_back(n.id);
    if (n.role == Role::query)
      ++queries;

    const bool root_role = n.role == Role::query || n.role == Role::parameter;
    if (root && !root_role)
      bad("node " + n.id + " has no predecessors but role " + to_string(n.role));
    if (!root && root_role)
      bad("node " + n.id + " has role " + to_string(n.role) + " but has predecessors");
    if (n.role == Role::output && !sink)
      bad("output node " + n.id + " has successors");
    if (n.role != Role::output && sink)
      bad("node " + n.id + " has no successors but is not the output");

    auto b = g.bindings().find(n.id);
    if (root && b != g.bindings().end())
      bad("root node " + n.id + " must not have a forward function");
    if (!root && b == g.bindings().end())
      bad("node " + n.id + " has no forward function");
    if (!root && b != g.bindings().end() &&
        b->second.arity != g.predecessors(n.id).size())
      bad("binding arity mismatch at " + n.id + ": function " + b->second.function +
          " takes " + std::to_string(b->second.arity) + " inputs, node has " +
          std::to_string(g.predecessors(n.id).size()));
  }
  for (auto &[id, b] : g.bindings())
    if (!g.contains(id))
      bad("binding for unknown node " + id);

  if (outputs.empty())
    bad("no output node");
  if (outputs.size() > 1 || sinks.size() > 1)
    bad("multiple outputs");
  if (queries > 1)
    bad("multiple query nodes");

  // Every node must reach the output.
  if (outputs.size() == 1) {
    std::set<NodeId> live{outputs.front()};
    std::vector<NodeId> work{outputs.front()};
    while (!work.empty()) {
      NodeId n = work.back();
      work.pop_back();
      for (auto &p : g.predecessors(n))
        if (live.insert(p).second)
          work.push_back(p);
    }
    for (auto &n : g.nodes())
      if (!live.count(n.id))
        bad("dead node " + n.id + " does not reach the output");
  }
  return r;
}

inline std::vector<NodeId> topological_order(const Graph &g) {
  auto order = g.try_topological_order();
  if (!order)
    throw GraphError("graph contains a cycle");
  return *order;
}

inline void require_valid(const Graph &g) {
  auto r = validate(g);
  if (!r.ok())
    throw GraphError("invalid graph: " + r.violations.front());
}

// Graph definition file:
//   {"nodes": [{"id", "role", "name"?, "init_value"?}],
//    "edges": [[from, to], ...],
//    "bindings": {node: function | {"function", "arity"}}}
inline Graph graph_from_json(const nlohmann::json &j) {
  Graph g;
  for (auto &n : j.at("nodes")) {
    std::optional<SemanticValue> init;
    if (n.contains("init_value"))
      init = from_json_value(n.at("init_value"));
    g.add_node(n.at("id").get<std::string>(),
               role_from_string(n.at("role").get<std::string>()),
               n.value("name", std::string{}), init);
  }
  for (auto &e : j.at("edges")) {
    if (!e.is_array() || e.size() != 2)
      throw GraphError("edge must be a [from, to] pair");
    g.add_edge(e[0].get<std::string>(), e[1].get<std::string>());
  }
  for (auto &[node, b] : j.at("bindings").items()) {
    if (b.is_string())
      g.bind(node, b.get<std::string>());
    else
      g.bind(node, b.at("function").get<std::string>(), b.at("arity").get<std::size_t>());
  }
  return g;
}

inline nlohmann::json graph_to_json(const Graph &g) {
  nlohmann::json j;
  j["nodes"] = nlohmann::json::array();
  for (auto &n : g.nodes()) {
    nlohmann::json nj{{"id", n.id}, {"role", to_string(n.role)}, {"name", n.name}};
    if (n.init_value)
      nj["init_value"] = to_json_value(*n.init_value);
    j["nodes"].push_back(nj);
  }
  j["edges"] = nlohmann::json::array();
  for (auto &[f, t] : g.edges())
    j["edges"].push_back({f, t});
  j["bindings"] = nlohmann::json::object();
  for (auto &[id, b] : g.bindings())
    j["bindings"][id] = {{"function", b.function}, {"arity", b.arity}};
  return j;
}

inline Graph load_graph(const std::string &path) {
  std::ifstream in(path);
  if (!in)
    throw GraphError("cannot open graph file " + path);
  return graph_from_json(nlohmann::json::parse(in));
}

} // namespace semgrad
