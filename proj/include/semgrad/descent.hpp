#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "semgrad/backend.hpp"
#include "semgrad/backprop.hpp"
#include "semgrad/forward.hpp"
#include "semgrad/graph.hpp"
#include "semgrad/prompts.hpp"
#include "semgrad/tasks.hpp"

namespace semgrad {

enum class Gate { strict_less, leq, off };

inline const char *to_string(Gate g) {
  switch (g) {
  case Gate::strict_less: return "strict-less";
  case Gate::leq: return "leq";
  case Gate::off: return "off";
  }
  return "?";
}

inline Gate gate_from_string(const std::string &s) {
  if (s == "strict-less") return Gate::strict_less;
  if (s == "leq") return Gate::leq;
  if (s == "off") return Gate::off;
  throw ConfigError("unknown gate '" + s + "'");
}

inline bool gate_accepts(Gate g, double candidate, double current) {
  switch (g) {
  case Gate::strict_less: return candidate < current;
  case Gate::leq: return candidate <= current;
  case Gate::off: return true;
  }
  return false;
}

struct Ablation {
  enum class Kind { none, no_gradient, no_neighbor, single_param };
  Kind kind = Kind::none;
  std::size_t param = 0; // 1-based parameter index for single_param

  static Ablation none() { return {}; }
  static Ablation no_gradient() { return {Kind::no_gradient, 0}; }
  static Ablation no_neighbor() { return {Kind::no_neighbor, 0}; }
  static Ablation single_param(std::size_t k) { return {Kind::single_param, k}; }

  BackpropMode backprop_mode() const {
    return kind == Kind::no_neighbor ? BackpropMode::no_neighbor : BackpropMode::full;
  }

  std::string label() const {
    switch (kind) {
    case Kind::none: return "none";
    case Kind::no_gradient: return "no-gradient";
    case Kind::no_neighbor: return "no-neighbor";
    case Kind::single_param: return "single-param(" + std::to_string(param) + ")";
    }
    return "?";
  }
};

struct DescentConfig {
  std::size_t batch_size = 2;
  double loss_threshold = 0.5;
  std::size_t max_iterations = 4;
  Gate gate = Gate::strict_less;
  Ablation ablation;
  std::uint64_t seed = 0;

  void check() const {
    if (batch_size == 0)
      throw ConfigError("batch_size must be positive");
    if (!(loss_threshold >= 0.0 && loss_threshold <= 1.0))
      throw ConfigError("loss_threshold must lie in [0, 1]");
  }
};

// How a task turns samples into queries, losses and output feedback.
struct Objective {
  std::function<SemanticValue(const Sample &)> query;
  std::function<double(const Sample &, const SemanticValue &)> loss;
  std::function<OutputGradient(const Sample &, const SemanticValue &)> feedback;
};

inline Objective make_objective(Schema schema, Matcher matcher, TemplateSet ts = TemplateSet{}) {
  Objective o;
  o.query = [schema](const Sample &s) { return SemanticValue::text(query_text(s, schema)); };
  o.loss = [matcher](const Sample &s, const SemanticValue &a) { return loss(matcher, s, a); };
  o.feedback = [ts = std::move(ts)](const Sample &s, const SemanticValue &) {
    return OutputGradient{s.id, SemanticValue::text(feedback_string(s.target, ts)), "feedback"};
  };
  return o;
}

// Uniform sampling with replacement. Rejection sampling on mt19937_64 keeps
// the index stream identical across standard libraries.
class UniformSampler {
public:
  explicit UniformSampler(std::uint64_t seed) : rng_(seed) {}

  std::size_t next(std::size_t n) {
    if (n == 0)
      throw std::invalid_argument("cannot sample from an empty set");
    const std::uint64_t range = n;
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % range;
    std::uint64_t x;
    do {
      x = rng_();
    } while (x >= limit);
    return static_cast<std::size_t>(x % range);
  }

private:
  std::mt19937_64 rng_;
};

struct BatchResult {
  GradientStore store;
  bool nothing_to_learn = false;
  std::vector<std::string> sampled;    // every sampled query id, in order
  std::vector<std::string> backpropped; // ids whose loss exceeded the threshold
  std::vector<ExecutionTrace> traces;
};

// Parameter feedback blocks without the feedback line, for the no-gradient
// ablation: one block per successor of each parameter.
inline GradientMap parameter_examples(const Graph &g, const ExecutionTrace &trace,
                                      const std::string &query_id, const TemplateSet &ts) {
  GradientMap out;
  for (auto &theta : g.parameters()) {
    std::vector<std::string> blocks;
    for (auto &w : g.successors(theta)) {
      const NodeRecord *rec = trace.record(w);
      const auto preds = g.predecessors(w);
      std::vector<std::string> siblings;
      for (std::size_t i = 0; i < preds.size(); ++i)
        if (preds[i] != theta)
          siblings.push_back(rec->inputs[i].as_text());
      blocks.push_back(format_parameter_example(siblings, rec->output.as_text(), ts));
    }
    out[theta] = {SemanticValue::text(concat_aggregator(std::span<const std::string>(blocks))),
                  GradientOrigin::aggregate(theta), query_id};
  }
  return out;
}

// Samples queries until every node holds `batch_size` gradients. Only
// queries whose loss exceeds the threshold are backpropagated. Gives up with
// nothing_to_learn after 10 * batch_size consecutive below-threshold samples.
inline BatchResult collect_batch(const Graph &g, const ParamMap &params,
                                 const std::vector<Sample> &train, const Objective &obj,
                                 const DescentConfig &cfg, Engines &engines,
                                 const TemplateSet &ts, UniformSampler &sampler) {
  if (train.empty())
    throw ConfigError("training set is empty");
  BatchResult out;
  std::size_t collected = 0, misses = 0;
  const std::size_t miss_bound = 10 * cfg.batch_size;
  while (collected < cfg.batch_size) {
    const Sample &s = train[sampler.next(train.size())];
    out.sampled.push_back(s.id);
    auto fwd = forward(g, obj.query(s), params, &engines, ts, s.id);
    const double l = obj.loss(s, fwd.answer);
    if (l > cfg.loss_threshold) {
      misses = 0;
      GradientMap grads;
      if (cfg.ablation.kind == Ablation::Kind::no_gradient)
        grads = parameter_examples(g, fwd.trace, s.id, ts);
      else
        grads = backpropagate(g, fwd.trace, obj.feedback(s, fwd.answer), &engines, ts,
                              BackpropOptions{cfg.ablation.backprop_mode(), nullptr});
      out.store.append(grads);
      out.backpropped.push_back(s.id);
      ++collected;
    } else if (++misses >= miss_bound) {
      out.nothing_to_learn = true;
    }
    out.traces.push_back(std::move(fwd.trace));
    if (out.nothing_to_learn)
      break;
  }
  return out;
}

struct Proposal {
  std::string candidate;
  bool extracted = false;
  std::optional<CallRecord> call;
};

// Parameter update: render the optimizer prompt from the current value and
// its listed gradients, ask the backward engine, keep the <prompt> span. A
// response without one leaves the parameter unchanged.
inline Proposal propose(const NodeId &theta_id, const std::string &theta,
                        const std::vector<std::string> &grads, Engines &engines,
                        const TemplateSet &ts) {
  const std::string prompt =
      ts.render(templates::kOptimizer, {{"prompt", theta}, {"examples", list_gradients(grads)}});
  auto res = engines.call(CallRole::optimizer, prompt);
  Proposal p;
  p.call = make_call_record(res, theta_id);
  try {
    p.candidate = extract_prompt(res.response.text);
    p.extracted = true;
  } catch (const ExtractionError &e) {
    warn("optimizer response for " + theta_id + " has no usable prompt (" + e.what() +
         "); keeping the current value");
    p.candidate = theta;
  }
  return p;
}

inline std::string params_key(const ParamMap &p) {
  nlohmann::json j;
  for (auto &[k, v] : p)
    j[k] = to_json_value(v);
  return j.dump();
}

// Sum of per-sample losses under a parameter assignment, memoized per
// (assignment, sample id).
class Evaluator {
public:
  Evaluator(const Graph &g, const Objective &obj, Engines &engines, const TemplateSet &ts)
      : g_(g), obj_(obj), engines_(engines), ts_(ts) {}

  double sample_loss(const ParamMap &params, const Sample &s) {
    auto key = params_key(params) + '\x1f' + s.id;
    if (auto it = cache_.find(key); it != cache_.end())
      return it->second;
    auto fwd = forward(g_, obj_.query(s), params, &engines_, ts_, s.id);
    double l = obj_.loss(s, fwd.answer);
    cache_[key] = l;
    return l;
  }

  double validation_loss(const ParamMap &params, const std::vector<Sample> &val) {
    double total = 0;
    for (auto &s : val)
      total += sample_loss(params, s);
    return total;
  }

private:
  const Graph &g_;
  const Objective &obj_;
  Engines &engines_;
  const TemplateSet &ts_;
  std::map<std::string, double> cache_;
};

struct GateResult {
  bool accept = false;
  double current_loss = 0;
  double candidate_loss = 0;
};

inline GateResult gate(Evaluator &eval, const ParamMap &current, const ParamMap &candidate,
                       const std::vector<Sample> &val, Gate predicate) {
  if (val.empty())
    throw ConfigError("validation set is empty");
  GateResult r;
  r.current_loss = eval.validation_loss(current, val);
  r.candidate_loss = eval.validation_loss(candidate, val);
  r.accept = gate_accepts(predicate, r.candidate_loss, r.current_loss);
  return r;
}

struct ParameterUpdate {
  std::string current;
  std::string candidate;
  bool proposed = false;
  bool extracted = false;
};

struct IterationRecord {
  std::size_t iteration = 0;
  std::string status; // accepted | rejected | skipped
  std::vector<std::string> sampled;
  std::vector<std::string> backpropped;
  std::map<NodeId, ParameterUpdate> parameters;
  std::map<NodeId, std::size_t> batch_sizes;
  double l_val_current = 0;
  std::optional<double> l_val_candidate;
  bool accepted = false;
  std::string mode;
  std::string gate;
  TokenUsage tokens;
};

inline nlohmann::ordered_json to_json(const IterationRecord &r) {
  nlohmann::ordered_json j;
  j["iteration"] = r.iteration;
  j["status"] = r.status;
  j["accepted"] = r.accepted;
  j["l_val_current"] = r.l_val_current;
  j["l_val_candidate"] = r.l_val_candidate ? nlohmann::ordered_json(*r.l_val_candidate)
                                           : nlohmann::ordered_json(nullptr);
  j["mode"] = r.mode;
  j["gate"] = r.gate;
  j["sampled"] = r.sampled;
  j["backpropped"] = r.backpropped;
  j["batch_sizes"] = nlohmann::ordered_json::object();
  for (auto &[k, v] : r.batch_sizes)
    j["batch_sizes"][k] = v;
  j["parameters"] = nlohmann::ordered_json::object();
  for (auto &[k, p] : r.parameters)
    j["parameters"][k] = {{"current", p.current},
                          {"candidate", p.candidate},
                          {"proposed", p.proposed},
                          {"extracted", p.extracted}};
  nlohmann::ordered_json t;
  for (CallRole role : {CallRole::forward, CallRole::backward, CallRole::optimizer})
    t[to_string(role)] = {{"input", r.tokens[role].input}, {"output", r.tokens[role].output}};
  j["tokens"] = t;
  return j;
}

inline IterationRecord iteration_from_json(const nlohmann::json &j) {
  IterationRecord r;
  r.iteration = j.at("iteration").get<std::size_t>();
  r.status = j.at("status").get<std::string>();
  r.accepted = j.at("accepted").get<bool>();
  r.l_val_current = j.at("l_val_current").get<double>();
  if (!j.at("l_val_candidate").is_null())
    r.l_val_candidate = j.at("l_val_candidate").get<double>();
  r.mode = j.value("mode", std::string{});
  r.gate = j.value("gate", std::string{});
  r.sampled = j.value("sampled", std::vector<std::string>{});
  r.backpropped = j.value("backpropped", std::vector<std::string>{});
  if (j.contains("batch_sizes"))
    r.batch_sizes = j.at("batch_sizes").get<std::map<NodeId, std::size_t>>();
  for (auto &[k, p] : j.at("parameters").items())
    r.parameters[k] = {p.at("current").get<std::string>(), p.at("candidate").get<std::string>(),
                       p.at("proposed").get<bool>(), p.at("extracted").get<bool>()};
  r.tokens = token_usage_from_json(j.at("tokens"));
  return r;
}

struct RunLog {
  std::vector<IterationRecord> iterations;
};

// Hooks for persisting progress while the run is going.
class RunObserver {
public:
  virtual ~RunObserver() = default;
  virtual void on_trace(std::size_t /*iteration*/, const ExecutionTrace &) {}
  virtual void on_optimizer_call(std::size_t /*iteration*/, const CallRecord &) {}
  virtual void on_iteration(const IterationRecord &) {}
};

struct RunResult {
  ParamMap params;
  RunLog log;
  double final_loss = 0;
};

class RunError : public std::runtime_error {
public:
  RunError(const std::string &what, RunLog partial_log, ParamMap params)
      : std::runtime_error(what), log(std::move(partial_log)), params(std::move(params)) {}
  RunLog log;
  ParamMap params;
};

// Semantic gradient descent. Each iteration collects a gradient batch,
// proposes a new value for every optimized parameter and keeps the proposal
// only if the update gate accepts it on the validation set.
inline RunResult run(const Graph &g, const ParamMap &init, const std::vector<Sample> &train,
                     const std::vector<Sample> &val, const Objective &obj,
                     const DescentConfig &cfg, Engines &engines,
                     const TemplateSet &ts = TemplateSet{}, RunObserver *observer = nullptr) {
  cfg.check();
  require_valid(g);
  const auto params_ids = g.parameters();
  for (auto &p : params_ids)
    if (!init.count(p))
      throw ConfigError("no initial value for parameter " + p);
  if (cfg.ablation.kind == Ablation::Kind::single_param &&
      (cfg.ablation.param < 1 || cfg.ablation.param > params_ids.size()))
    throw ConfigError("single-param index " + std::to_string(cfg.ablation.param) +
                      " out of range 1.." + std::to_string(params_ids.size()));
  if (cfg.max_iterations > 0 && val.empty())
    throw ConfigError("validation set is empty");

  RunObserver null_observer;
  RunObserver &obs = observer ? *observer : null_observer;
  UniformSampler sampler(cfg.seed);
  Evaluator eval(g, obj, engines, ts);
  RunResult result{init, {}, 0};
  const std::string mode = cfg.ablation.kind == Ablation::Kind::no_gradient
                               ? std::string("no-gradient")
                               : std::string(to_string(cfg.ablation.backprop_mode()));

  for (std::size_t it = 1; it <= cfg.max_iterations; ++it) {
    const TokenUsage before = engines.usage();
    IterationRecord rec;
    rec.iteration = it;
    rec.mode = mode;
    rec.gate = to_string(cfg.gate);
    try {
      auto batch = collect_batch(g, result.params, train, obj, cfg, engines, ts, sampler);
      for (auto &t : batch.traces)
        obs.on_trace(it, t);
      rec.sampled = batch.sampled;
      rec.backpropped = batch.backpropped;
      for (auto &p : params_ids) {
        rec.batch_sizes[p] = batch.store.count(p);
        const std::string &cur = result.params.at(p).as_text();
        rec.parameters[p] = {cur, cur, false, false};
      }

      if (batch.nothing_to_learn) {
        rec.status = "skipped";
        rec.l_val_current = eval.validation_loss(result.params, val);
      } else {
        ParamMap candidate = result.params;
        for (std::size_t k = 0; k < params_ids.size(); ++k) {
          if (cfg.ablation.kind == Ablation::Kind::single_param && k + 1 != cfg.ablation.param)
            continue;
          const NodeId &p = params_ids[k];
          auto grads = batch.store.texts(p);
          bool any = false;
          for (auto &s : grads)
            any = any || !s.empty();
          if (!any)
            continue; // zero gradient: nothing to move towards
          auto prop = propose(p, result.params.at(p).as_text(), grads, engines, ts);
          if (prop.call)
            obs.on_optimizer_call(it, *prop.call);
          rec.parameters[p].candidate = prop.candidate;
          rec.parameters[p].proposed = true;
          rec.parameters[p].extracted = prop.extracted;
          candidate[p] = SemanticValue::text(prop.candidate);
        }
        auto gr = gate(eval, result.params, candidate, val, cfg.gate);
        rec.l_val_current = gr.current_loss;
        rec.l_val_candidate = gr.candidate_loss;
        rec.accepted = gr.accept;
        rec.status = gr.accept ? "accepted" : "rejected";
        if (gr.accept)
          result.params = std::move(candidate);
      }
    } catch (const std::exception &e) {
      throw RunError("iteration " + std::to_string(it) + " aborted: " + e.what(), result.log,
                     result.params);
    }
    rec.tokens = engines.usage() - before;
    obs.on_iteration(rec);
    result.log.iterations.push_back(std::move(rec));
  }
  result.final_loss = val.empty() ? 0.0 : eval.validation_loss(result.params, val);
  return result;
}

} // namespace semgrad
