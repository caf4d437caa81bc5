#pragma once

// Operator commands behind tools/semgrad: optimize, eval, trace. Everything
// here works on plain paths and streams so tests can drive it directly.

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "semgrad/http_backend.hpp"
#include "semgrad/semgrad.hpp"

namespace semgrad::cli {

namespace fs = std::filesystem;

struct BackendSettings {
  std::string provider = "scripted"; // http | scripted | replay
  EngineConfig engine;
  HttpConfig http;
  std::string cache;  // replay cache file; empty for none
  std::optional<bool> strict;
  std::string script; // scripted rules file
};

struct RunConfig {
  std::string task = "gqa";
  std::string builder;
  std::string graph_file;
  nlohmann::json params = nullptr; // object of overrides or path to a params file
  std::string train, val, test;
  Matcher matcher = Matcher::answer_tag;
  Schema schema = Schema::gqa;
  DescentConfig descent;
  BackendSettings backend;
  std::string templates;
  std::string out = "run";
};

inline Ablation ablation_from_string(const std::string &s, std::size_t k = 0) {
  if (s == "none") return Ablation::none();
  if (s == "no-gradient") return Ablation::no_gradient();
  if (s == "no-neighbor") return Ablation::no_neighbor();
  if (s == "single-param") return Ablation::single_param(k);
  throw ConfigError("unknown ablation '" + s + "'");
}

namespace detail {

inline std::string resolve(const fs::path &base, const std::string &p) {
  if (p.empty() || fs::path(p).is_absolute())
    return p;
  return (base / p).lexically_normal().string();
}

template <class T> void read(const nlohmann::json &j, const char *key, T &dst) {
  if (j.contains(key) && !j.at(key).is_null())
    dst = j.at(key).get<T>();
}

} // namespace detail

// Relative paths in the config resolve against the config file's directory.
inline RunConfig parse_run_config(const nlohmann::json &j, const fs::path &base = ".") {
  if (!j.is_object())
    throw ConfigError("config must be a JSON object");
  RunConfig c;
  detail::read(j, "task", c.task);
  TaskSpec spec = task_spec(c.task);
  c.builder = spec.builder;
  c.matcher = spec.matcher;
  c.schema = spec.schema;

  if (j.contains("graph")) {
    auto &g = j.at("graph");
    if (g.is_string()) {
      c.builder = g.get<std::string>();
    } else {
      detail::read(g, "builder", c.builder);
      detail::read(g, "file", c.graph_file);
    }
  }
  if (j.contains("matcher"))
    c.matcher = matcher_from_string(j.at("matcher").get<std::string>());
  if (j.contains("params"))
    c.params = j.at("params");
  if (c.params.is_string())
    c.params = detail::resolve(base, c.params.get<std::string>());

  if (j.contains("data")) {
    auto &d = j.at("data");
    detail::read(d, "train", c.train);
    detail::read(d, "val", c.val);
    detail::read(d, "test", c.test);
  }

  if (j.contains("descent")) {
    auto &d = j.at("descent");
    detail::read(d, "batch_size", c.descent.batch_size);
    detail::read(d, "loss_threshold", c.descent.loss_threshold);
    detail::read(d, "max_iterations", c.descent.max_iterations);
    detail::read(d, "seed", c.descent.seed);
    if (d.contains("gate"))
      c.descent.gate = gate_from_string(d.at("gate").get<std::string>());
    if (d.contains("ablation"))
      c.descent.ablation = ablation_from_string(d.at("ablation").get<std::string>(),
                                                d.value("single_param", std::size_t{0}));
  }

  if (j.contains("backend")) {
    auto &b = j.at("backend");
    auto &s = c.backend;
    detail::read(b, "provider", s.provider);
    detail::read(b, "forward_model", s.engine.forward_model);
    detail::read(b, "backward_model", s.engine.backward_model);
    detail::read(b, "temperature", s.engine.temperature);
    detail::read(b, "max_tokens", s.engine.max_tokens);
    detail::read(b, "base_url", s.http.base_url);
    detail::read(b, "api_key_env", s.http.api_key_env);
    detail::read(b, "concurrency", s.http.concurrency);
    detail::read(b, "timeout_seconds", s.http.timeout_seconds);
    detail::read(b, "cache", s.cache);
    detail::read(b, "script", s.script);
    if (b.contains("strict"))
      s.strict = b.at("strict").get<bool>();
  }
  detail::read(j, "templates", c.templates);
  detail::read(j, "out", c.out);

  for (auto *p : {&c.graph_file, &c.train, &c.val, &c.test, &c.backend.cache, &c.backend.script,
                  &c.templates, &c.out})
    *p = detail::resolve(base, *p);
  return c;
}

inline RunConfig load_run_config(const std::string &path) {
  std::ifstream in(path);
  if (!in)
    throw ConfigError("cannot open config " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception &e) {
    throw ConfigError("config " + path + " is not valid JSON: " + e.what());
  }
  return parse_run_config(j, fs::path(path).parent_path());
}

// Flag overrides from the command line.
struct Overrides {
  std::optional<std::string> out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> iterations;
  std::optional<std::string> gate;
  std::optional<std::string> ablation;
  bool no_gradient = false;
  bool no_neighbor = false;
  bool no_gate = false;
  std::optional<std::size_t> single_param;
};

inline void apply(RunConfig &c, const Overrides &o) {
  if (o.out) c.out = *o.out;
  if (o.seed) c.descent.seed = *o.seed;
  if (o.iterations) c.descent.max_iterations = *o.iterations;
  if (o.gate) c.descent.gate = gate_from_string(*o.gate);
  if (o.no_gate) c.descent.gate = Gate::off;
  int picked = (o.no_gradient ? 1 : 0) + (o.no_neighbor ? 1 : 0) + (o.single_param ? 1 : 0) +
               (o.ablation ? 1 : 0);
  if (picked > 1)
    throw ConfigError("--no-gradient, --no-neighbor, --single-param and --ablation are exclusive");
  if (o.no_gradient) c.descent.ablation = Ablation::no_gradient();
  if (o.no_neighbor) c.descent.ablation = Ablation::no_neighbor();
  if (o.single_param) c.descent.ablation = Ablation::single_param(*o.single_param);
  if (o.ablation) c.descent.ablation = ablation_from_string(*o.ablation);
}

// Owns the providers behind the two engines.
struct Providers {
  std::unique_ptr<ScriptedBackend> scripted;
  std::unique_ptr<HttpBackend> http;
  std::unique_ptr<ReplayCache> cache;
  std::unique_ptr<CachedBackend> cached;
  Backend *active = nullptr;
};

// Builds the provider stack. Fails before any call when the http provider
// has no API key, a rules file is missing, or a strict replay has no cache.
inline std::unique_ptr<Providers> make_providers(const BackendSettings &s) {
  auto p = std::make_unique<Providers>();
  Backend *inner = nullptr;
  if (s.provider == "http") {
    try {
      p->http = std::make_unique<HttpBackend>(s.http);
    } catch (const BackendError &e) {
      throw ConfigError(e.what());
    }
    inner = p->http.get();
  } else if (s.provider == "scripted") {
    if (s.script.empty())
      throw ConfigError("scripted provider needs backend.script (a rules file)");
    std::ifstream in(s.script);
    if (!in)
      throw ConfigError("cannot open scripted rules " + s.script);
    p->scripted = std::make_unique<ScriptedBackend>();
    try {
      p->scripted->add_rules(nlohmann::json::parse(in));
    } catch (const nlohmann::json::exception &e) {
      throw ConfigError("bad scripted rules " + s.script + ": " + e.what());
    }
    inner = p->scripted.get();
  } else if (s.provider != "replay") {
    throw ConfigError("unknown provider '" + s.provider + "'");
  }

  if (s.provider == "replay" && s.cache.empty())
    throw ConfigError("replay provider needs backend.cache");
  if (!s.cache.empty()) {
    p->cache = std::make_unique<ReplayCache>(s.cache);
    const bool strict = s.strict.value_or(s.provider == "replay");
    p->cached = std::make_unique<CachedBackend>(*p->cache, inner, strict);
    p->active = p->cached.get();
  } else {
    p->active = inner;
  }
  return p;
}

inline ParamMap read_params_file(const std::string &path) {
  std::ifstream in(path);
  if (!in)
    throw ConfigError("cannot open parameter file " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception &e) {
    throw ConfigError("parameter file " + path + " is not valid JSON: " + e.what());
  }
  ParamMap m;
  for (auto &[k, v] : j.items())
    m[k] = from_json_value(v);
  return m;
}

inline void write_params_file(const std::string &path, const ParamMap &p) {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (auto &[k, v] : p)
    j[k] = nlohmann::ordered_json(to_json_value(v));
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << j.dump(2) << '\n';
  if (!out)
    throw std::runtime_error("failed to write " + path);
}

// Everything resolved from a RunConfig, ready to run.
struct Workspace {
  RunConfig cfg;
  Graph graph;
  ParamMap init;
  TemplateSet templates;
  std::vector<Sample> train, val, test;
  Objective objective;
  std::unique_ptr<Providers> providers;
  std::unique_ptr<Engines> engines;
};

inline std::unique_ptr<Workspace> open_workspace(RunConfig cfg) {
  auto w = std::make_unique<Workspace>();
  w->graph = cfg.graph_file.empty() ? build_graph(cfg.builder) : load_graph(cfg.graph_file);
  require_valid(w->graph);
  w->init = w->graph.initial_params();
  if (cfg.params.is_string()) {
    for (auto &[k, v] : read_params_file(cfg.params.get<std::string>()))
      w->init[k] = v;
  } else if (cfg.params.is_object()) {
    for (auto &[k, v] : cfg.params.items())
      w->init[k] = from_json_value(v);
  }
  for (auto &[k, v] : w->init)
    if (!w->graph.contains(k) || w->graph.node(k).role != Role::parameter)
      throw ConfigError("initial value given for unknown parameter " + k);

  w->templates = cfg.templates.empty() ? TemplateSet{} : TemplateSet::from_directory(cfg.templates);
  auto load = [&](const std::string &p) {
    return p.empty() ? std::vector<Sample>{} : load_dataset(p, cfg.schema);
  };
  w->train = load(cfg.train);
  w->val = cfg.val.empty() ? w->train : load(cfg.val);
  w->test = load(cfg.test);
  w->objective = make_objective(cfg.schema, cfg.matcher, w->templates);
  w->providers = make_providers(cfg.backend);
  w->engines = std::make_unique<Engines>(*w->providers->active, *w->providers->active,
                                         cfg.backend.engine);
  w->cfg = std::move(cfg);
  return w;
}

inline std::string csv_field(const std::string &s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos)
    return s;
  std::string q = "\"";
  for (char c : s) {
    if (c == '"')
      q += '"';
    q += c;
  }
  return q + '"';
}

inline std::string format_number(double x) {
  std::ostringstream os;
  os << std::setprecision(10) << x;
  return os.str();
}

// Streams run artifacts as the run progresses so an abort leaves them behind.
class ArtifactWriter : public RunObserver {
public:
  explicit ArtifactWriter(const fs::path &dir) : dir_(dir) {
    fs::create_directories(dir_ / "traces");
    for (auto &e : fs::directory_iterator(dir_ / "traces"))
      fs::remove(e.path());
    runlog_.open(dir_ / "runlog.jsonl", std::ios::binary | std::ios::trunc);
    metrics_.open(dir_ / "metrics.csv", std::ios::binary | std::ios::trunc);
    if (!runlog_ || !metrics_)
      throw ConfigError("cannot write into output directory " + dir_.string());
    metrics_ << "iteration,status,l_val_current,l_val_candidate,accepted,"
                "forward_input,forward_output,backward_input,backward_output,"
                "optimizer_input,optimizer_output\n";
    metrics_.flush();
  }

  void on_trace(std::size_t it, const ExecutionTrace &t) override { write_trace_jsonl(traces(it), t); }

  void on_optimizer_call(std::size_t it, const CallRecord &c) override {
    traces(it) << to_json(c, "").dump() << '\n';
  }

  void on_iteration(const IterationRecord &r) override {
    runlog_ << to_json(r).dump() << '\n';
    runlog_.flush();
    metrics_ << r.iteration << ',' << r.status << ',' << format_number(r.l_val_current) << ','
             << (r.l_val_candidate ? format_number(*r.l_val_candidate) : std::string()) << ','
             << (r.accepted ? "true" : "false");
    for (CallRole role : {CallRole::forward, CallRole::backward, CallRole::optimizer})
      metrics_ << ',' << r.tokens[role].input << ',' << r.tokens[role].output;
    metrics_ << '\n';
    metrics_.flush();
    trace_.close();
  }

private:
  std::ofstream &traces(std::size_t it) {
    if (it != trace_iteration_ || !trace_.is_open()) {
      trace_.close();
      std::ostringstream name;
      name << "iter_" << std::setw(3) << std::setfill('0') << it << ".jsonl";
      trace_.open(dir_ / "traces" / name.str(), std::ios::binary | std::ios::app);
      trace_iteration_ = it;
    }
    return trace_;
  }

  fs::path dir_;
  std::ofstream runlog_, metrics_, trace_;
  std::size_t trace_iteration_ = 0;
};

inline void write_summary(const fs::path &dir, const RunResult &r, const TokenUsage &usage,
                          const RunConfig &cfg) {
  nlohmann::ordered_json j;
  j["task"] = cfg.task;
  j["iterations"] = r.log.iterations.size();
  j["final_val_loss"] = r.final_loss;
  j["ablation"] = cfg.descent.ablation.label();
  j["gate"] = to_string(cfg.descent.gate);
  j["seed"] = cfg.descent.seed;
  nlohmann::ordered_json t;
  for (CallRole role : {CallRole::forward, CallRole::backward, CallRole::optimizer})
    t[to_string(role)] = {{"input", usage[role].input}, {"output", usage[role].output}};
  j["tokens"] = t;
  std::ofstream out(dir / "summary.json", std::ios::binary | std::ios::trunc);
  out << j.dump(2) << '\n';
}

// optimize: run descent and write runlog.jsonl, params.json, metrics.csv,
// summary.json and traces/ under cfg.out. Returns the process exit status.
inline int cmd_optimize(RunConfig cfg, std::ostream &out = std::cout,
                        std::ostream &err = std::cerr) {
  std::unique_ptr<Workspace> w;
  try {
    w = open_workspace(std::move(cfg));
    if (w->train.empty())
      throw ConfigError("training set is empty (data.train)");
  } catch (const std::exception &e) {
    err << "configuration error: " << e.what() << '\n';
    return 2;
  }
  const fs::path dir = w->cfg.out;
  try {
    ArtifactWriter writer(dir);
    auto result = run(w->graph, w->init, w->train, w->val, w->objective, w->cfg.descent,
                      *w->engines, w->templates, &writer);
    write_params_file((dir / "params.json").string(), result.params);
    write_summary(dir, result, w->engines->usage(), w->cfg);
    out << "optimized " << result.log.iterations.size() << " iterations; final validation loss "
        << format_number(result.final_loss) << " over " << w->val.size() << " samples\n";
    return 0;
  } catch (const RunError &e) {
    write_params_file((dir / "params.json").string(), e.params);
    err << "run aborted: " << e.what() << '\n';
    return 1;
  } catch (const std::exception &e) {
    err << "run failed: " << e.what() << '\n';
    return 1;
  }
}

struct EvalReport {
  std::size_t samples = 0;
  double loss_sum = 0;
  double accuracy = 0;
};

inline EvalReport evaluate(Workspace &w, const ParamMap &params, const std::vector<Sample> &split,
                           std::ostream *csv) {
  if (split.empty())
    throw ConfigError("evaluation split is empty");
  if (csv)
    *csv << "id,target,loss,answer\n";
  EvalReport r;
  for (auto &s : split) {
    auto fwd = forward(w.graph, w.objective.query(s), params, w.engines.get(), w.templates, s.id);
    double l = w.objective.loss(s, fwd.answer);
    r.loss_sum += l;
    if (csv)
      *csv << csv_field(s.id) << ',' << csv_field(s.target) << ',' << format_number(l) << ','
           << csv_field(fwd.answer.as_text()) << '\n';
  }
  r.samples = split.size();
  r.accuracy = 1.0 - r.loss_sum / static_cast<double>(r.samples);
  return r;
}

// eval: accuracy = 1 - mean loss of a parameter file over one split.
inline int cmd_eval(RunConfig cfg, const std::string &params_path, const std::string &split,
                    std::ostream &out = std::cout, std::ostream &err = std::cerr) {
  try {
    auto w = open_workspace(std::move(cfg));
    ParamMap params = read_params_file(params_path);
    const auto wanted = w->graph.parameters();
    bool mismatch = params.size() != wanted.size();
    for (auto &p : wanted)
      mismatch = mismatch || !params.count(p);
    if (mismatch)
      throw ConfigError("parameter file " + params_path + " does not match the graph parameters");

    const std::vector<Sample> *data = split == "train" ? &w->train
                                      : split == "val" ? &w->val
                                      : split == "test" ? &w->test
                                                        : nullptr;
    if (!data)
      throw ConfigError("unknown split '" + split + "' (train, val or test)");
    if (data->empty())
      throw ConfigError("split '" + split + "' is empty");

    const fs::path dir = w->cfg.out;
    fs::create_directories(dir);
    std::ofstream csv(dir / ("eval_" + split + ".csv"), std::ios::binary | std::ios::trunc);
    auto r = evaluate(*w, params, *data, &csv);
    nlohmann::ordered_json j{{"split", split},
                             {"samples", r.samples},
                             {"loss_sum", r.loss_sum},
                             {"accuracy", r.accuracy}};
    std::ofstream(dir / ("eval_" + split + ".json"), std::ios::binary | std::ios::trunc)
        << j.dump(2) << '\n';
    out << "split " << split << ": accuracy " << format_number(r.accuracy) << " (loss "
        << format_number(r.loss_sum) << " over " << r.samples << " samples)\n";
    return 0;
  } catch (const std::exception &e) {
    err << "eval failed: " << e.what() << '\n';
    return 2;
  }
}

inline std::vector<IterationRecord> read_runlog(const fs::path &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw ConfigError("no run log at " + path.string());
  std::vector<IterationRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty())
      continue;
    try {
      out.push_back(iteration_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception &e) {
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": corrupt record (" +
                        e.what() + ")");
    }
  }
  return out;
}

namespace detail {

inline void print_block(std::ostream &out, char mark, const std::string &text) {
  std::istringstream in(text);
  std::string line;
  bool any = false;
  while (std::getline(in, line)) {
    out << "    " << mark << ' ' << line << '\n';
    any = true;
  }
  if (!any)
    out << "    " << mark << '\n';
}

} // namespace detail

// trace: parameter diffs per iteration and token totals by role.
inline int cmd_trace(const std::string &run_dir, std::ostream &out = std::cout,
                     std::ostream &err = std::cerr) {
  std::vector<IterationRecord> log;
  try {
    log = read_runlog(fs::path(run_dir) / "runlog.jsonl");
  } catch (const std::exception &e) {
    err << "trace failed: " << e.what() << '\n';
    return 2;
  }
  TokenUsage total;
  for (auto &r : log) {
    out << "iteration " << r.iteration << ": " << r.status;
    if (r.l_val_candidate)
      out << " (L_val " << format_number(r.l_val_current) << " -> "
          << format_number(*r.l_val_candidate) << ")";
    else
      out << " (L_val " << format_number(r.l_val_current) << ", nothing to learn)";
    out << '\n';
    for (auto &[id, p] : r.parameters) {
      if (!p.proposed) {
        out << "  " << id << ": unchanged\n";
        continue;
      }
      if (p.candidate == p.current) {
        out << "  " << id << ": proposed (" << (r.accepted ? "accepted" : "rejected")
            << "), identical to current\n";
        continue;
      }
      out << "  " << id << ": proposed (" << (r.accepted ? "accepted" : "rejected") << ")\n";
      detail::print_block(out, '-', p.current);
      detail::print_block(out, '+', p.candidate);
    }
    for (CallRole role : {CallRole::forward, CallRole::backward, CallRole::optimizer}) {
      total[role].input += r.tokens[role].input;
      total[role].output += r.tokens[role].output;
    }
  }
  out << '\n' << std::left << std::setw(10) << "role" << std::right << std::setw(12) << "input"
      << std::setw(12) << "output" << '\n';
  auto row = [&](const char *name, const TokenCount &t) {
    out << std::left << std::setw(10) << name << std::right << std::setw(12) << t.input
        << std::setw(12) << t.output << '\n';
  };
  row("forward", total.forward);
  row("backward", total.backward);
  row("optimizer", total.optimizer);
  row("total", total.total());
  return 0;
}

} // namespace semgrad::cli
