#pragma once

#include <array>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <map>
#include <optional>
#include <regex>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "semgrad/graph.hpp"
#include "semgrad/prompts.hpp"
#include "semgrad/value.hpp"

namespace semgrad {

class DatasetError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

struct Sample {
  std::string id;
  std::map<std::string, std::string> fields;
  std::string target;
};

enum class Schema { gqa, liar };

inline Schema schema_from_string(const std::string &s) {
  if (s == "gqa") return Schema::gqa;
  if (s == "liar") return Schema::liar;
  throw DatasetError("unknown dataset schema '" + s + "'");
}

inline const std::vector<std::string> &liar_attributes() {
  static const std::vector<std::string> a{"statement", "job_title", "state", "party", "source"};
  return a;
}

inline std::vector<std::string> schema_fields(Schema s) {
  if (s == Schema::gqa)
    return {"question"};
  return liar_attributes();
}

namespace detail {

inline std::string json_field_text(const nlohmann::json &v) {
  if (v.is_null())
    return {};
  if (v.is_string())
    return v.get<std::string>();
  return v.dump();
}

} // namespace detail

// JSONL datasets. gqa: {id, question, target}; liar: {id, statement,
// job_title, state, party, source, target in {Yes, No}}. LIAR rows with a
// missing or empty attribute are dropped.
inline std::vector<Sample> parse_dataset(std::istream &in, Schema schema,
                                         const std::string &origin = "<stream>") {
  std::vector<Sample> out;
  std::set<std::string> ids;
  std::string line;
  std::size_t lineno = 0;
  const auto fields = schema_fields(schema);
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty())
      continue;
    auto where = origin + ":" + std::to_string(lineno);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception &e) {
      throw DatasetError(where + ": malformed JSON (" + e.what() + ")");
    }
    if (!j.is_object())
      throw DatasetError(where + ": expected a JSON object");
    Sample s;
    if (!j.contains("id") || j["id"].is_null())
      throw DatasetError(where + ": missing id");
    s.id = detail::json_field_text(j["id"]);
    if (!j.contains("target"))
      throw DatasetError(where + ": missing target");
    s.target = detail::json_field_text(j["target"]);

    bool missing = false;
    for (auto &f : fields) {
      std::string v = j.contains(f) ? detail::json_field_text(j[f]) : std::string{};
      if (trim(v).empty())
        missing = true;
      s.fields[f] = v;
    }
    if (missing) {
      if (schema == Schema::liar)
        continue;
      throw DatasetError(where + ": missing required field");
    }
    if (schema == Schema::liar && s.target != "Yes" && s.target != "No")
      throw DatasetError(where + ": LIAR target must be Yes or No");
    if (!ids.insert(s.id).second)
      throw DatasetError(where + ": duplicate id '" + s.id + "'");
    out.push_back(std::move(s));
  }
  return out;
}

inline std::vector<Sample> load_dataset(const std::string &path, Schema schema) {
  std::ifstream in(path);
  if (!in)
    throw DatasetError("cannot open dataset " + path);
  return parse_dataset(in, schema, path);
}

// Query text for one sample. LIAR attributes become the labeled context block.
inline std::string query_text(const Sample &s, Schema schema) {
  if (schema == Schema::gqa)
    return s.fields.at("question");
  return "Statement: " + s.fields.at("statement") + "\n\nJob title: " + s.fields.at("job_title") +
         "\n\nState: " + s.fields.at("state") + "\n\nParty: " + s.fields.at("party") +
         "\n\nSource: " + s.fields.at("source");
}

// ---------------------------------------------------------------- matchers

enum class Matcher { exact_normalized, yes_no_prefix, answer_tag };

inline Matcher matcher_from_string(const std::string &s) {
  if (s == "exact-normalized") return Matcher::exact_normalized;
  if (s == "yes-no-prefix") return Matcher::yes_no_prefix;
  if (s == "answer-tag") return Matcher::answer_tag;
  throw DatasetError("unknown matcher '" + s + "'");
}

inline const char *to_string(Matcher m) {
  switch (m) {
  case Matcher::exact_normalized: return "exact-normalized";
  case Matcher::yes_no_prefix: return "yes-no-prefix";
  case Matcher::answer_tag: return "answer-tag";
  }
  return "?";
}

namespace detail {

inline std::string normalize(std::string_view s) {
  std::string t = trim(s);
  while (!t.empty() && std::string_view(".,;:!?").find(t.back()) != std::string_view::npos)
    t.pop_back();
  t = trim(t);
  for (auto &c : t)
    c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return t;
}

inline std::optional<double> as_number(const std::string &s) {
  if (s.empty())
    return std::nullopt;
  std::string t;
  for (char c : s)
    if (c != ',' && c != '$')
      t += c;
  char *end = nullptr;
  double v = std::strtod(t.c_str(), &end);
  if (end == t.c_str() || *end != '\0' || !std::isfinite(v))
    return std::nullopt;
  return v;
}

inline std::string first_word(std::string_view s) {
  std::string t = trim(s);
  std::size_t i = 0;
  while (i < t.size() && (std::isalpha(static_cast<unsigned char>(t[i])) != 0))
    ++i;
  std::string w = t.substr(0, i);
  for (auto &c : w)
    c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return w;
}

} // namespace detail

inline bool exact_normalized_match(std::string_view answer, std::string_view target) {
  auto a = detail::normalize(answer), t = detail::normalize(target);
  if (a == t)
    return true;
  auto na = detail::as_number(a), nt = detail::as_number(t);
  return na && nt && *na == *nt;
}

// Content of the first <answer>...</answer> span, or the whole text when
// there is none.
inline std::string strip_answer_tag(std::string_view answer) {
  static const std::regex tag(R"(<answer>([\s\S]*?)</answer>)", std::regex::icase);
  std::string s(answer);
  std::smatch m;
  if (std::regex_search(s, m, tag))
    return m[1].str();
  return s;
}

inline bool match(Matcher m, std::string_view answer, std::string_view target) {
  switch (m) {
  case Matcher::exact_normalized:
    return exact_normalized_match(answer, target);
  case Matcher::yes_no_prefix: {
    auto a = detail::first_word(answer), t = detail::first_word(target);
    return (a == "yes" || a == "no") && a == t;
  }
  case Matcher::answer_tag:
    return exact_normalized_match(strip_answer_tag(answer), target);
  }
  return false;
}

inline bool match(const std::string &matcher, std::string_view answer, std::string_view target) {
  return match(matcher_from_string(matcher), answer, target);
}

// 0 when the answer matches the target, else 1.
inline double loss(Matcher m, const Sample &s, const SemanticValue &answer) {
  return match(m, answer.as_text(), s.target) ? 0.0 : 1.0;
}

// ---------------------------------------------------------- graph builders

inline constexpr const char *kInitIntermediate =
    "Work out an intermediate step that helps solve the problem";
inline constexpr const char *kInitFinal = "Solve the problem";

// Q, theta1..3; v1 = LLM(Q + theta1), v2 = LLM(Q + theta2),
// A = LLM(Q + v1 + v2 + theta3).
inline Graph build_gqa_graph(const std::string &init_intermediate = kInitIntermediate,
                             const std::string &init_final = kInitFinal) {
  const std::string f(templates::kForwardGqa);
  Graph g;
  g.add_node("Q", Role::query, "question")
      .add_node("theta1", Role::parameter, "intermediate instruction 1",
                SemanticValue::text(init_intermediate))
      .add_node("theta2", Role::parameter, "intermediate instruction 2",
                SemanticValue::text(init_intermediate))
      .add_node("theta3", Role::parameter, "final instruction", SemanticValue::text(init_final))
      .add_node("v1", Role::intermediate, "intermediate step 1")
      .add_node("v2", Role::intermediate, "intermediate step 2")
      .add_node("A", Role::output, "answer");
  g.add_edge("Q", "v1").add_edge("theta1", "v1").bind("v1", f);
  g.add_edge("Q", "v2").add_edge("theta2", "v2").bind("v2", f);
  g.add_edge("Q", "A").add_edge("v1", "A").add_edge("v2", "A").add_edge("theta3", "A").bind("A", f);
  return g;
}

// Chain variant: v1 = LLM(Q + theta1), v_k = LLM(Q + v_{k-1} + theta_k),
// A = LLM(Q + v_{n-1} + theta_n).
inline Graph build_gqa_chain_graph(std::size_t parameters = 5,
                                   const std::string &init_intermediate = kInitIntermediate,
                                   const std::string &init_final = kInitFinal) {
  if (parameters < 2)
    throw GraphError("chain graph needs at least two parameters");
  const std::string f(templates::kForwardGqa);
  Graph g;
  g.add_node("Q", Role::query, "question");
  for (std::size_t k = 1; k <= parameters; ++k)
    g.add_node("theta" + std::to_string(k), Role::parameter, "instruction " + std::to_string(k),
               SemanticValue::text(k == parameters ? init_final : init_intermediate));
  for (std::size_t k = 1; k < parameters; ++k)
    g.add_node("v" + std::to_string(k), Role::intermediate, "step " + std::to_string(k));
  g.add_node("A", Role::output, "answer");
  for (std::size_t k = 1; k <= parameters; ++k) {
    NodeId node = k == parameters ? "A" : "v" + std::to_string(k);
    g.add_edge("Q", node);
    if (k > 1)
      g.add_edge("v" + std::to_string(k - 1), node);
    g.add_edge("theta" + std::to_string(k), node).bind(node, f);
  }
  return g;
}

// 2x2x1 network: two first-layer steps, two second-layer steps reading both
// first-layer outputs, and the answer reading both second-layer outputs.
inline Graph build_gqa_network_graph(const std::string &init_intermediate = kInitIntermediate,
                                     const std::string &init_final = kInitFinal) {
  const std::string f(templates::kForwardGqa);
  Graph g;
  g.add_node("Q", Role::query, "question");
  for (int k = 1; k <= 5; ++k)
    g.add_node("theta" + std::to_string(k), Role::parameter, "instruction " + std::to_string(k),
               SemanticValue::text(k == 5 ? init_final : init_intermediate));
  for (int k = 1; k <= 4; ++k)
    g.add_node("v" + std::to_string(k), Role::intermediate, "step " + std::to_string(k));
  g.add_node("A", Role::output, "answer");
  g.add_edge("Q", "v1").add_edge("theta1", "v1").bind("v1", f);
  g.add_edge("Q", "v2").add_edge("theta2", "v2").bind("v2", f);
  for (const char *n : {"v3", "v4"}) {
    g.add_edge("Q", n).add_edge("v1", n).add_edge("v2", n);
    g.add_edge(n == std::string("v3") ? "theta3" : "theta4", n).bind(n, f);
  }
  g.add_edge("Q", "A").add_edge("v3", "A").add_edge("v4", "A").add_edge("theta5", "A").bind("A", f);
  return g;
}

// One instruction, one LLM call: A = LLM(Q + theta).
inline Graph build_single_prompt_graph(const std::string &init = kInitFinal) {
  Graph g;
  g.add_node("Q", Role::query, "question")
      .add_node("theta", Role::parameter, "instruction", SemanticValue::text(init))
      .add_node("A", Role::output, "answer");
  g.add_edge("Q", "A").add_edge("theta", "A").bind("A", std::string(templates::kForwardGqa));
  return g;
}

inline const std::array<std::string, 6> &liar_default_inits() {
  static const std::array<std::string, 6> inits{
      "Summarize the claim made in the Statement and point out anything in it that can be "
      "checked against known facts.",
      "How would the political party of the speaker feel about the Statement?",
      "Is the Statement consistent with the job title of the speaker?",
      "Why would the speaker release the Statement through this source?",
      "How would the state of the speaker feel about the Statement?",
      "Determine whether the Statement is a lie (Yes) or not (No) based on the Context and "
      "other information."};
  return inits;
}

// Query (context of five attributes); theta1..5 analyse one attribute each
// through hint nodes v1..v5; theta6 instructs the final Yes/No answer.
inline Graph build_liar_graph(const std::array<std::string, 6> &inits = liar_default_inits()) {
  const std::string ctx(templates::kForwardLiarContext), fin(templates::kForwardLiarFinal);
  static const std::array<const char *, 5> topics{"statement", "party", "job title", "source",
                                                  "state"};
  Graph g;
  g.add_node("Q", Role::query, "context");
  for (int k = 1; k <= 6; ++k)
    g.add_node("theta" + std::to_string(k), Role::parameter,
               k <= 5 ? std::string("analysis instruction (") + topics[k - 1] + ")"
                      : std::string("final instruction"),
               SemanticValue::text(inits[k - 1]));
  for (int k = 1; k <= 5; ++k)
    g.add_node("v" + std::to_string(k), Role::intermediate,
               std::string("hint (") + topics[k - 1] + ")");
  g.add_node("A", Role::output, "answer");
  for (int k = 1; k <= 5; ++k) {
    auto v = "v" + std::to_string(k);
    g.add_edge("Q", v).add_edge("theta" + std::to_string(k), v).bind(v, ctx);
  }
  g.add_edge("Q", "A");
  for (int k = 1; k <= 5; ++k)
    g.add_edge("v" + std::to_string(k), "A");
  g.add_edge("theta6", "A").bind("A", fin);
  return g;
}

struct TaskSpec {
  std::string name;
  std::string builder;
  Matcher matcher = Matcher::answer_tag;
  Schema schema = Schema::gqa;
};

inline Graph build_graph(const std::string &builder) {
  if (builder == "gqa")
    return build_gqa_graph();
  if (builder == "gqa-chain")
    return build_gqa_chain_graph();
  if (builder == "gqa-network")
    return build_gqa_network_graph();
  if (builder == "single")
    return build_single_prompt_graph();
  if (builder == "liar")
    return build_liar_graph();
  throw GraphError("unknown graph builder '" + builder + "'");
}

inline TaskSpec task_spec(const std::string &name) {
  if (name == "gqa")
    return {"gqa", "gqa", Matcher::answer_tag, Schema::gqa};
  if (name == "liar")
    return {"liar", "liar", Matcher::yes_no_prefix, Schema::liar};
  throw DatasetError("unknown task '" + name + "'");
}

} // namespace semgrad
