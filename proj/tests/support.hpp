#pragma once

// Helpers shared by the unit tests and the acceptance binary.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "semgrad/semgrad.hpp"

namespace support {

using namespace semgrad;

inline std::string source_path(const std::string &rel) {
  return std::string(SEMGRAD_SOURCE_DIR) + "/" + rel;
}

inline std::string slurp(const std::string &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw std::runtime_error("cannot read " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline std::filesystem::path fresh_dir(const std::string &name) {
  auto dir = std::filesystem::temp_directory_path() / ("semgrad_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

// |a - b| <= rtol * max(|a|, |b|) + atol
inline bool close(double a, double b, double rtol = 1e-5, double atol = 1e-9) {
  return std::abs(a - b) <= rtol * std::max(std::abs(a), std::abs(b)) + atol;
}

// ------------------------------------------------------------ numeric DAGs

struct NumericCase {
  Graph graph;
  NodeId query;
  SemanticValue query_value;
  ParamMap params;
};

// Random numeric DAG with at most `max_nodes` nodes ending in a scalar
// square loss. Root 0 is the query, the other roots are parameters.
inline NumericCase random_numeric_dag(std::mt19937_64 &rng, std::size_t max_nodes = 10) {
  std::uniform_real_distribution<double> val(-1.0, 1.0);
  std::uniform_int_distribution<int> coin(0, 1);
  auto pick = [&](std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng); };
  auto vec = [&](std::size_t d) {
    Vector v(d);
    for (auto &x : v)
      x = val(rng);
    return v;
  };

  NumericCase c;
  Graph &g = c.graph;
  const std::size_t d = 1 + pick(3);
  const bool use_affine = coin(rng) == 1;
  const std::size_t roots = 2 + pick(2);

  std::vector<NodeId> pool; // dimension-d nodes usable as inputs
  for (std::size_t i = 0; i < roots; ++i) {
    NodeId id = "r" + std::to_string(i);
    if (i == 0) {
      g.add_node(id, Role::query);
      c.query = id;
      c.query_value = SemanticValue::numeric(vec(d));
    } else {
      g.add_node(id, Role::parameter);
      c.params[id] = SemanticValue::numeric(vec(d));
    }
    pool.push_back(id);
  }
  NodeId W, b;
  if (use_affine) {
    W = "W";
    b = "b";
    g.add_node(W, Role::parameter).add_node(b, Role::parameter);
    c.params[W] = SemanticValue::numeric(vec(d * d));
    c.params[b] = SemanticValue::numeric(vec(d));
  }
  const std::size_t used = g.size();
  // Leave room for the sum node and the loss node.
  const std::size_t budget = max_nodes > used + 2 ? max_nodes - used - 2 : 0;
  const std::size_t inner = budget == 0 ? 0 : 1 + pick(budget);

  std::map<NodeId, std::size_t> succ_count;
  bool affine_done = false;
  for (std::size_t k = 0; k < inner; ++k) {
    NodeId id = "v" + std::to_string(k);
    g.add_node(id, Role::intermediate);
    int kind = static_cast<int>(pick(4));
    if (use_affine && !affine_done)
      kind = 3;
    switch (kind) {
    case 0: { // add of 2 or 3 inputs
      std::size_t n = 2 + pick(2);
      for (std::size_t i = 0; i < n; ++i) {
        auto p = pool[pick(pool.size())];
        g.add_edge(p, id);
        ++succ_count[p];
      }
      g.bind(id, "add");
      break;
    }
    case 1: {
      auto a = pool[pick(pool.size())], bb = pool[pick(pool.size())];
      g.add_edge(a, id).add_edge(bb, id).bind(id, "mul");
      ++succ_count[a];
      ++succ_count[bb];
      break;
    }
    case 2: {
      auto a = pool[pick(pool.size())];
      g.add_edge(a, id).bind(id, "tanh");
      ++succ_count[a];
      break;
    }
    default: {
      if (!use_affine) { // fall back to tanh when no W exists
        auto a = pool[pick(pool.size())];
        g.add_edge(a, id).bind(id, "tanh");
        ++succ_count[a];
        break;
      }
      auto x = pool[pick(pool.size())];
      g.add_edge(W, id).add_edge(x, id).add_edge(b, id).bind(id, "affine");
      ++succ_count[W];
      ++succ_count[b];
      ++succ_count[x];
      affine_done = true;
    }
    }
    pool.push_back(id);
  }
  if (use_affine && !affine_done) {
    // W and b would be dead: route them through one affine node.
    NodeId id = "v_aff";
    g.add_node(id, Role::intermediate);
    g.add_edge(W, id).add_edge(pool[0], id).add_edge(b, id).bind(id, "affine");
    ++succ_count[pool[0]];
    pool.push_back(id);
  }

  std::vector<NodeId> sinks;
  for (auto &id : pool)
    if (!succ_count.count(id))
      sinks.push_back(id);
  NodeId top;
  if (sinks.size() == 1) {
    top = sinks.front();
  } else {
    top = "sum";
    g.add_node(top, Role::intermediate);
    for (auto &s : sinks)
      g.add_edge(s, top);
    g.bind(top, "add");
  }
  g.add_node("loss", Role::output);
  g.add_edge(top, "loss").bind("loss", "square-loss");
  return c;
}

inline double eval_loss(const NumericCase &c, const SemanticValue &q, const ParamMap &p) {
  static const TemplateSet ts;
  return forward(c.graph, q, p, nullptr, ts).answer.as_numeric().at(0);
}

// Central finite differences of the scalar loss at every root coordinate.
inline std::map<NodeId, Vector> finite_differences(const NumericCase &c, double h = 1e-6) {
  std::map<NodeId, Vector> out;
  auto perturb = [&](const NodeId &root, std::size_t i, double delta) {
    SemanticValue q = c.query_value;
    ParamMap p = c.params;
    SemanticValue &target = root == c.query ? q : p[root];
    Vector v = target.as_numeric();
    v[i] += delta;
    target = SemanticValue::numeric(v);
    return eval_loss(c, q, p);
  };
  std::vector<NodeId> roots{c.query};
  for (auto &[k, v] : c.params)
    roots.push_back(k);
  for (auto &r : roots) {
    const std::size_t d = (r == c.query ? c.query_value : c.params.at(r)).dim();
    Vector g(d);
    for (std::size_t i = 0; i < d; ++i)
      g[i] = (perturb(r, i, h) - perturb(r, i, -h)) / (2 * h);
    out[r] = g;
  }
  return out;
}

inline GradientMap numeric_backprop(const NumericCase &c) {
  static const TemplateSet ts;
  auto fwd = forward(c.graph, c.query_value, c.params, nullptr, ts, "numeric");
  return backpropagate(c.graph, fwd.trace, OutputGradient{"numeric", SemanticValue::scalar(1.0), "dl/dl"},
                       nullptr, ts);
}

// ------------------------------------------------------------- LIAR script

// Scripted engines for the LIAR graph: each hint node answers with a text
// unique to (hint index, sample), the final node always says "No", backward
// prompts get a five-line hint response or a one-line rewrite.
inline void script_liar(ScriptedBackend &b) {
  b.with([](const ChatRequest &r) -> std::optional<std::string> {
    if (r.role != CallRole::forward)
      return std::nullopt;
    const std::string p = r.prompt_text();
    if (p.rfind("Context:", 0) == 0) {
      // hint node: echo a digest of the instruction and statement
      auto s = p.find("Statement: ");
      auto e = p.find('\n', s);
      auto t = p.find("Task:\n");
      auto te = p.find('\n', t + 6);
      return "HINT[" + p.substr(t + 6, te - t - 6).substr(0, 24) + "|" +
             p.substr(s + 11, std::min<std::size_t>(e - s - 11, 30)) + "]";
    }
    return std::string("No, the statement looks accurate.");
  });
  b.with([](const ChatRequest &r) -> std::optional<std::string> {
    if (r.role != CallRole::backward)
      return std::nullopt;
    const std::string p = r.prompt_text();
    if (p.find("One of the hints is:") != std::string::npos)
      return std::string("Rewrite this hint to question the factual claim.");
    std::string out;
    for (int k = 1; k <= 5; ++k)
      out += "Hint " + std::to_string(k) + ": check claim " + std::to_string(k) + "\n";
    return out;
  });
}

// --------------------------------------------------------------- toy task

// Five questions on the single-prompt graph. The scripted forward engine
// answers sample i correctly iff i is in the solved set of the current
// instruction, so every instruction has a known validation loss.
struct ToyTask {
  Graph graph = build_single_prompt_graph("Solve the problem");
  std::vector<Sample> samples;
  std::map<std::string, std::set<int>> solved;
  ScriptedBackend forward_engine;
  ScriptedBackend optimizer_engine;
  Objective objective = make_objective(Schema::gqa, Matcher::exact_normalized);

  explicit ToyTask(std::map<std::string, std::set<int>> solved_sets, int n = 5)
      : solved(std::move(solved_sets)) {
    for (int i = 0; i < n; ++i)
      samples.push_back({"s" + std::to_string(i), {{"question", "question " + std::to_string(i)}},
                         "ans" + std::to_string(i)});
    forward_engine.with([this](const ChatRequest &r) -> std::optional<std::string> {
      const std::string p = r.prompt_text();
      auto q = p.find("question ");
      int i = std::stoi(p.substr(q + 9));
      auto ins = p.find("Instruction:\n");
      std::string instruction = p.substr(ins + 13);
      auto it = solved.find(instruction);
      if (it != solved.end() && it->second.count(i))
        return "ans" + std::to_string(i);
      return std::string("wrong");
    });
  }

  // Loss of an instruction over all samples, computed from the solved sets.
  double expected_loss(const std::string &instruction) const {
    auto it = solved.find(instruction);
    std::size_t ok = it == solved.end() ? 0 : it->second.size();
    return static_cast<double>(samples.size() - ok);
  }

  ParamMap init() const { return graph.initial_params(); }
};

} // namespace support
