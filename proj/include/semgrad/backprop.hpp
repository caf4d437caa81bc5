#pragma once

#include <algorithm>
#include <map>
#include <mutex>
#include <regex>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "semgrad/backend.hpp"
#include "semgrad/forward.hpp"
#include "semgrad/graph.hpp"
#include "semgrad/prompts.hpp"
#include "semgrad/semantics.hpp"
#include "semgrad/value.hpp"

namespace semgrad {

// full: backward functions see every predecessor of the successor.
// no_neighbor: siblings are withheld from every backward prompt.
enum class BackpropMode { full, no_neighbor };

inline const char *to_string(BackpropMode m) {
  return m == BackpropMode::full ? "full" : "no-neighbor";
}

// Gradient of the loss with respect to the graph output, typically the
// external feedback F(Q, A).
struct OutputGradient {
  std::string query_id;
  SemanticValue content;
  std::string provenance = "feedback";
};

using GradientMap = std::map<NodeId, SemanticGradient>;

class BackpropError : public std::runtime_error {
public:
  BackpropError(const std::string &what, GradientMap partial_map)
      : std::runtime_error(what), partial(std::move(partial_map)) {}
  GradientMap partial;
};

class ParseError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

inline std::string join_lines(const std::vector<std::string> &xs) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i)
      out += '\n';
    out += xs[i];
  }
  return out;
}

// Gradient of a parameter through one successor w:
//   Input: <other predecessors of w>  My output: <w>
//   Feedback received on my output: <gradient of w>
inline std::string format_parameter_feedback(const std::vector<std::string> &siblings,
                                             const std::string &output,
                                             const std::string &output_gradient,
                                             const TemplateSet &ts = TemplateSet{}) {
  return ts.render(templates::kGradientExample, {{"inputs", join_lines(siblings)},
                                                 {"output", output},
                                                 {"feedback", output_gradient}});
}

// The same block without the feedback section.
inline std::string format_parameter_example(const std::vector<std::string> &siblings,
                                            const std::string &output,
                                            const TemplateSet &ts = TemplateSet{}) {
  return ts.render(templates::kGradientExampleNoGrad,
                   {{"inputs", join_lines(siblings)}, {"output", output}});
}

// Splits a backward response into per-hint gradients by "Hint k" line
// prefixes. Lines without a prefix continue the previous hint. Hints that
// never appear come back empty.
inline std::vector<std::string> parse_backward_response(std::string_view response,
                                                        std::size_t hint_count) {
  if (hint_count == 0)
    throw ParseError("hint count must be at least 1");
  static const std::regex hint_line(
      R"(^[\s*_#>\-]*hint\s*(\d+)\s*[*_]*\s*[:.)\-]?\s*[*_]*\s*(.*)$)", std::regex::icase);

  std::vector<std::string> out(hint_count);
  std::vector<bool> seen(hint_count, false);
  std::size_t matched = 0;
  long current = -1;
  std::istringstream in{std::string(response)};
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r')
      line.pop_back();
    std::smatch m;
    if (std::regex_match(line, m, hint_line)) {
      long k = std::stol(m[1].str());
      if (k >= 1 && static_cast<std::size_t>(k) <= hint_count && !seen[k - 1]) {
        seen[k - 1] = true;
        ++matched;
        out[k - 1] = trim(m[2].str());
        current = k - 1;
      } else {
        current = -1;
      }
    } else if (current >= 0 && !trim(line).empty()) {
      out[current] += "\n" + trim(line);
    }
  }
  if (matched == 0)
    throw ParseError("backward response contains no \"Hint k\" lines");
  return out;
}

// Backward template paired with a forward template.
inline std::string backward_template_for(const std::string &forward_fn, BackpropMode mode,
                                         const TemplateSet &ts) {
  std::string full;
  if (forward_fn == templates::kForwardLiarContext || forward_fn == templates::kForwardLiarFinal)
    full = std::string(templates::kBackwardLiar);
  else if (forward_fn.rfind("forward-", 0) == 0 &&
           ts.contains("backward-" + forward_fn.substr(8)))
    full = "backward-" + forward_fn.substr(8);
  else
    full = std::string(templates::kBackwardGqa);
  if (mode == BackpropMode::full)
    return full;
  if (ts.contains(full + "-no-neighbor"))
    return full + "-no-neighbor";
  return std::string(templates::kBackwardLiarNoNeighbor);
}

struct BackpropOptions {
  BackpropMode mode = BackpropMode::full;
  std::vector<NodeId> *visit_log = nullptr; // nodes in gradient-completion order
};

namespace detail {

struct EdgeGradient {
  std::size_t successor_index;
  SemanticGradient gradient;
};

inline CallResult backward_call(Engines *engines, const std::string &prompt) {
  if (!engines)
    throw ConfigError("text backward pass needs an LLM backend");
  return engines->call(CallRole::backward, prompt);
}

// Per-edge text gradients for every predecessor of w.
inline std::vector<std::string> text_edge_gradients(const Graph &g, const NodeId &w,
                                                    const NodeRecord &rec,
                                                    const std::string &grad_w,
                                                    BackpropMode mode, Engines *engines,
                                                    const TemplateSet &ts,
                                                    ExecutionTrace &trace) {
  const auto preds = g.predecessors(w);
  const Binding &b = g.binding(w);
  std::vector<std::string> out(preds.size());
  if (grad_w.empty())
    return out;
  if (b.function == kIdentity) {
    out[0] = grad_w;
    return out;
  }
  const std::string &output = rec.output.as_text();

  std::vector<std::size_t> hints;
  std::string query, instruction;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    Role r = g.node(preds[i]).role;
    if (r == Role::parameter) {
      instruction += (instruction.empty() ? "" : "\n\n") + rec.inputs[i].as_text();
    } else if (r == Role::query) {
      query = rec.inputs[i].as_text();
    } else {
      hints.push_back(i);
    }
  }

  for (std::size_t i = 0; i < preds.size(); ++i) {
    Role r = g.node(preds[i]).role;
    if (r == Role::parameter) {
      std::vector<std::string> siblings;
      if (mode == BackpropMode::full)
        for (std::size_t j = 0; j < preds.size(); ++j)
          if (j != i)
            siblings.push_back(rec.inputs[j].as_text());
      out[i] = format_parameter_feedback(siblings, output, grad_w, ts);
    } else if (r == Role::query) {
      out[i] = grad_w;
    }
  }
  if (hints.empty())
    return out;

  const std::string tmpl = backward_template_for(b.function, mode, ts);
  if (mode == BackpropMode::full) {
    std::vector<std::string> hint_text;
    for (std::size_t i : hints)
      hint_text.push_back(rec.inputs[i].as_text());
    const std::string prompt = ts.render(tmpl, {{"query", query},
                                                {"instruction", instruction},
                                                {"hints", numbered_list(hint_text)},
                                                {"output", output},
                                                {"feedback", grad_w}});
    std::vector<std::string> parsed;
    for (int attempt = 0; attempt < 2 && parsed.empty(); ++attempt) {
      auto res = backward_call(engines, prompt);
      trace.calls.push_back(make_call_record(res, w, to_string(mode)));
      try {
        parsed = parse_backward_response(res.response.text, hints.size());
      } catch (const ParseError &e) {
        if (attempt == 1)
          warn("malformed backward response at node " + w + " (" + e.what() +
               "); using empty gradients");
      }
    }
    if (!parsed.empty())
      for (std::size_t k = 0; k < hints.size(); ++k)
        out[hints[k]] = parsed[k];
  } else {
    for (std::size_t i : hints) {
      const std::string prompt = ts.render(
          tmpl, {{"hint", rec.inputs[i].as_text()}, {"output", output}, {"feedback", grad_w}});
      auto res = backward_call(engines, prompt);
      trace.calls.push_back(make_call_record(res, w, to_string(mode)));
      out[i] = trim(res.response.text);
    }
  }
  return out;
}

} // namespace detail

// Semantic backpropagation. Visits nodes in reverse topological order; each
// node's gradient aggregates the per-edge gradients from all its successors
// (sum for numeric values, concatenation for text), then the node's own
// backward function produces per-edge gradients for its predecessors.
// Backward calls are appended to `trace`.
inline GradientMap backpropagate(const Graph &g, ExecutionTrace &trace, const OutputGradient &out_grad,
                                 Engines *engines, const TemplateSet &ts,
                                 BackpropOptions opts = {}) {
  require_valid(g);
  const NodeId output = g.output_node();
  auto order = topological_order(g);
  std::reverse(order.begin(), order.end());

  GradientMap result;
  std::map<NodeId, std::vector<detail::EdgeGradient>> pending;

  for (const NodeId &w : order) {
    SemanticGradient grad;
    if (w == output) {
      grad = {out_grad.content, GradientOrigin::aggregate(w), out_grad.query_id};
    } else {
      auto &edges = pending[w];
      std::sort(edges.begin(), edges.end(),
                [](auto &a, auto &b) { return a.successor_index < b.successor_index; });
      std::vector<SemanticGradient> gs;
      for (auto &e : edges)
        gs.push_back(e.gradient);
      const SemanticValue &v = trace.value(w);
      if (v.is_numeric())
        grad.content = SemanticValue::numeric(sum_aggregator(gs, v.dim()));
      else
        grad.content = SemanticValue::text(concat_aggregator(gs));
      grad.origin = GradientOrigin::aggregate(w);
      grad.query_id = out_grad.query_id;
    }
    result[w] = grad;
    if (opts.visit_log)
      opts.visit_log->push_back(w);

    if (g.is_root(w))
      continue;
    const NodeRecord *rec = trace.record(w);
    if (!rec)
      throw std::logic_error("trace has no record for node " + w);
    const auto preds = g.predecessors(w);
    const Binding &b = g.binding(w);
    const std::size_t w_index = g.index_of(w);

    try {
      if (grad.content.is_numeric()) {
        std::vector<Vector> xs;
        for (auto &x : rec->inputs)
          xs.push_back(x.as_numeric());
        for (std::size_t i = 0; i < preds.size(); ++i) {
          Vector gi = b.function == kIdentity
                          ? grad.numeric()
                          : numeric_backward(b.function, xs, i, grad.numeric());
          pending[preds[i]].push_back(
              {w_index, {SemanticValue::numeric(std::move(gi)), GradientOrigin::edge(preds[i], w),
                         out_grad.query_id}});
        }
      } else {
        auto texts = detail::text_edge_gradients(g, w, *rec, grad.text(), opts.mode, engines, ts,
                                                 trace);
        for (std::size_t i = 0; i < preds.size(); ++i)
          pending[preds[i]].push_back({w_index,
                                       {SemanticValue::text(std::move(texts[i])),
                                        GradientOrigin::edge(preds[i], w), out_grad.query_id}});
      }
    } catch (const BackendError &e) {
      throw BackpropError(std::string("backward pass failed at node ") + w + ": " + e.what(),
                          std::move(result));
    }
  }
  return result;
}

inline GradientMap backpropagate(const Graph &g, ExecutionTrace &trace, const OutputGradient &out_grad,
                                 BackpropMode mode, Engines *engines, const TemplateSet &ts) {
  return backpropagate(g, trace, out_grad, engines, ts, BackpropOptions{mode, nullptr});
}

// Per-node gradients accumulated over the queries of one batch.
class GradientStore {
public:
  GradientStore() = default;
  GradientStore(GradientStore &&other) noexcept {
    std::lock_guard lock(other.mu_);
    store_ = std::move(other.store_);
  }
  GradientStore &operator=(GradientStore &&other) noexcept {
    if (this != &other) {
      std::scoped_lock lock(mu_, other.mu_);
      store_ = std::move(other.store_);
    }
    return *this;
  }

  void append(const GradientMap &grads) {
    std::lock_guard lock(mu_);
    for (auto &[node, g] : grads)
      store_[node].push_back(g);
  }
  void append(const NodeId &node, SemanticGradient g) {
    std::lock_guard lock(mu_);
    store_[node].push_back(std::move(g));
  }

  std::size_t count(const NodeId &node) const {
    std::lock_guard lock(mu_);
    auto it = store_.find(node);
    return it == store_.end() ? 0 : it->second.size();
  }

  std::vector<SemanticGradient> get(const NodeId &node) const {
    std::lock_guard lock(mu_);
    auto it = store_.find(node);
    return it == store_.end() ? std::vector<SemanticGradient>{} : it->second;
  }

  std::vector<std::string> texts(const NodeId &node) const {
    std::vector<std::string> out;
    for (auto &g : get(node))
      out.push_back(g.text());
    return out;
  }

  void clear() {
    std::lock_guard lock(mu_);
    store_.clear();
  }

private:
  mutable std::mutex mu_;
  std::map<NodeId, std::vector<SemanticGradient>> store_;
};

} // namespace semgrad
