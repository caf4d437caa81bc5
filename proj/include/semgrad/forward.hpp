#pragma once

#include <map>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "semgrad/backend.hpp"
#include "semgrad/graph.hpp"
#include "semgrad/prompts.hpp"
#include "semgrad/semantics.hpp"
#include "semgrad/value.hpp"

namespace semgrad {

class ConfigError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

struct NodeRecord {
  NodeId node;
  std::vector<SemanticValue> inputs; // predecessor values, declared order
  SemanticValue output;
};

struct CallRecord {
  CallRole role = CallRole::forward;
  NodeId node;
  std::string request_hash;
  std::string model;
  std::string prompt;
  std::string response;
  long input_tokens = 0;
  long output_tokens = 0;
  std::string mode; // backward calls: "full" | "no-neighbor"
};

struct ExecutionTrace {
  std::string query_id;
  std::vector<NodeRecord> records;
  std::vector<CallRecord> calls;
  SemanticValue answer;
  std::map<NodeId, SemanticValue> values; // every node assigned so far

  const NodeRecord *record(const NodeId &id) const {
    for (auto &r : records)
      if (r.node == id)
        return &r;
    return nullptr;
  }
  const SemanticValue &value(const NodeId &id) const {
    auto it = values.find(id);
    if (it == values.end())
      throw GraphError("trace has no value for node " + id);
    return it->second;
  }
  std::size_t count_calls(CallRole role) const {
    std::size_t n = 0;
    for (auto &c : calls)
      n += c.role == role;
    return n;
  }
};

// Forward failure; carries the trace up to the failing node.
class ExecutionError : public std::runtime_error {
public:
  ExecutionError(const std::string &what, ExecutionTrace partial)
      : std::runtime_error(what), trace(std::move(partial)) {}
  ExecutionTrace trace;
};

inline CallRecord make_call_record(const CallResult &r, const NodeId &node,
                                   std::string mode = {}) {
  return {r.request.role, node, r.request_hash, r.request.model, r.request.prompt_text(),
          r.response.text, r.response.input_tokens, r.response.output_tokens, std::move(mode)};
}

inline nlohmann::ordered_json to_json(const NodeRecord &r, const std::string &query_id) {
  nlohmann::ordered_json j;
  j["type"] = "node";
  j["query_id"] = query_id;
  j["node"] = r.node;
  j["inputs"] = nlohmann::ordered_json::array();
  for (auto &v : r.inputs)
    j["inputs"].push_back(nlohmann::ordered_json(to_json_value(v)));
  j["output"] = to_json_value(r.output);
  return j;
}

inline nlohmann::ordered_json to_json(const CallRecord &c, const std::string &query_id) {
  nlohmann::ordered_json j;
  j["type"] = "call";
  j["query_id"] = query_id;
  j["role"] = to_string(c.role);
  j["node"] = c.node;
  j["request_hash"] = c.request_hash;
  j["model"] = c.model;
  j["prompt"] = c.prompt;
  j["response"] = c.response;
  j["input_tokens"] = c.input_tokens;
  j["output_tokens"] = c.output_tokens;
  if (!c.mode.empty())
    j["mode"] = c.mode;
  return j;
}

// JSONL: node records, then backend calls, then the final answer.
inline void write_trace_jsonl(std::ostream &out, const ExecutionTrace &t) {
  for (auto &r : t.records)
    out << to_json(r, t.query_id).dump() << '\n';
  for (auto &c : t.calls)
    out << to_json(c, t.query_id).dump() << '\n';
  nlohmann::ordered_json a;
  a["type"] = "answer";
  a["query_id"] = t.query_id;
  a["answer"] = to_json_value(t.answer);
  out << a.dump() << '\n';
}

inline constexpr const char *kIdentity = "identity";

// Placeholder bindings for an LLM forward function, grouped by the role of
// each predecessor: query -> {query}, parameters -> {instruction},
// everything else -> {inputs} as a numbered list.
inline Bindings forward_bindings(const Graph &g, const std::vector<NodeId> &preds,
                                 const std::vector<SemanticValue> &values) {
  std::string query, instruction;
  std::vector<std::string> inputs;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const std::string &text = values[i].as_text();
    switch (g.node(preds[i]).role) {
    case Role::query:
      query = text;
      break;
    case Role::parameter:
      instruction += (instruction.empty() ? "" : "\n\n") + text;
      break;
    default:
      inputs.push_back(text);
    }
  }
  return {{"query", query},
          {"instruction", instruction},
          {"inputs", inputs.empty() ? std::string("(none)") : numbered_list(inputs)}};
}

struct ForwardResult {
  SemanticValue answer;
  ExecutionTrace trace;
};

// Evaluates every non-root node once, in topological order. `engines` may be
// null for graphs without LLM-backed nodes.
inline ForwardResult forward(const Graph &g, const SemanticValue &query, const ParamMap &params,
                             Engines *engines, const TemplateSet &templates,
                             std::string query_id = {}) {
  require_valid(g);
  ExecutionTrace trace;
  trace.query_id = std::move(query_id);

  for (auto &n : g.nodes()) {
    if (n.role == Role::parameter) {
      auto it = params.find(n.id);
      if (it == params.end())
        throw ConfigError("no value for parameter node " + n.id);
      trace.values[n.id] = it->second;
    } else if (n.role == Role::query) {
      trace.values[n.id] = query;
    }
  }

  for (const NodeId &id : topological_order(g)) {
    if (g.is_root(id))
      continue;
    const auto preds = g.predecessors(id);
    std::vector<SemanticValue> in;
    in.reserve(preds.size());
    for (auto &p : preds)
      in.push_back(trace.values.at(p));

    const Binding &b = g.binding(id);
    SemanticValue out;
    try {
      if (b.function == kIdentity) {
        out = in.at(0);
      } else if (auto prim = primitive_from_name(b.function)) {
        std::vector<Vector> xs;
        for (auto &v : in)
          xs.push_back(v.as_numeric());
        out = SemanticValue::numeric(numeric_forward(*prim, xs));
      } else {
        if (!engines)
          throw ConfigError("node " + id + " needs an LLM backend");
        auto prompt = templates.render(b.function, forward_bindings(g, preds, in));
        auto res = engines->call(CallRole::forward, std::move(prompt));
        trace.calls.push_back(make_call_record(res, id));
        out = SemanticValue::text(res.response.text);
      }
    } catch (const ConfigError &) {
      throw;
    } catch (const std::exception &e) {
      throw ExecutionError("forward failed at node " + id + ": " + e.what(), std::move(trace));
    }
    trace.values[id] = out;
    trace.records.push_back({id, std::move(in), std::move(out)});
  }
  trace.answer = trace.values.at(g.output_node());
  return {trace.answer, std::move(trace)};
}

} // namespace semgrad
