#pragma once

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace semgrad {

class TemplateError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class ExtractionError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

using Bindings = std::map<std::string, std::string>;

// Template text with `{name}` placeholders. `{{` and `}}` are literal braces.
class Template {
public:
  Template() = default;
  Template(std::string name, std::string body) : name_(std::move(name)), body_(std::move(body)) {
    parse();
  }

  const std::string &name() const { return name_; }
  const std::string &body() const { return body_; }
  const std::set<std::string> &placeholders() const { return placeholders_; }

  // Single pass: substituted values are never rescanned. Unused bindings are
  // ignored.
  std::string render(const Bindings &b) const {
    std::string out;
    out.reserve(body_.size() + 256);
    for (auto &piece : pieces_) {
      if (!piece.placeholder) {
        out += piece.text;
        continue;
      }
      auto it = b.find(piece.text);
      if (it == b.end())
        throw TemplateError("template '" + name_ + "': missing binding for {" + piece.text + "}");
      out += it->second;
    }
    return out;
  }

private:
  struct Piece {
    std::string text;
    bool placeholder = false;
  };

  void parse() {
    std::string lit;
    for (std::size_t i = 0; i < body_.size(); ++i) {
      char c = body_[i];
      if (c == '{' && i + 1 < body_.size() && body_[i + 1] == '{') {
        lit += '{';
        ++i;
      } else if (c == '}' && i + 1 < body_.size() && body_[i + 1] == '}') {
        lit += '}';
        ++i;
      } else if (c == '{') {
        auto close = body_.find('}', i);
        if (close == std::string::npos)
          throw TemplateError("template '" + name_ + "': unterminated placeholder");
        std::string key = body_.substr(i + 1, close - i - 1);
        if (key.empty() || !std::all_of(key.begin(), key.end(), [](unsigned char ch) {
              return std::isalnum(ch) || ch == '_';
            }))
          throw TemplateError("template '" + name_ + "': bad placeholder {" + key + "}");
        if (!lit.empty())
          pieces_.push_back({std::move(lit), false});
        lit.clear();
        pieces_.push_back({key, true});
        placeholders_.insert(key);
        i = close;
      } else if (c == '}') {
        throw TemplateError("template '" + name_ + "': stray '}'");
      } else {
        lit += c;
      }
    }
    if (!lit.empty())
      pieces_.push_back({std::move(lit), false});
  }

  std::string name_;
  std::string body_;
  std::vector<Piece> pieces_;
  std::set<std::string> placeholders_;
};

namespace templates {

inline constexpr std::string_view kForwardGqa = "forward-gqa";
inline constexpr std::string_view kBackwardGqa = "backward-gqa";
inline constexpr std::string_view kForwardLiarContext = "forward-liar-context";
inline constexpr std::string_view kForwardLiarFinal = "forward-liar-final";
inline constexpr std::string_view kBackwardLiar = "backward-liar";
inline constexpr std::string_view kBackwardLiarNoNeighbor = "backward-liar-no-neighbor";
inline constexpr std::string_view kGradientExample = "gradient-example";
inline constexpr std::string_view kGradientExampleNoGrad = "gradient-example-no-grad";
inline constexpr std::string_view kOptimizer = "optimizer";
inline constexpr std::string_view kFeedback = "feedback";

// Default bodies. LF newlines, no trailing newline.
inline const std::map<std::string, std::string, std::less<>> &defaults() {
  static const std::map<std::string, std::string, std::less<>> d = {
      {std::string(kForwardGqa),
       R"(Question:
{query}

Intermediate steps:
{inputs}

Instruction:
{instruction})"},
      {std::string(kBackwardGqa),
       R"(A question is answered given an instruction and some intermediate steps

Instruction:
{instruction}

Question:
{query}

Hints:

{hints}

Answered: {output}

{feedback}

How does each hint need to be changed to get the desired output?
Respond one line per hint. Start with "Hint x" for the xth line.)"},
      {std::string(kForwardLiarContext),
       R"(Context:

{query}

Task:
{instruction}

Respond in at most three sentences.)"},
      {std::string(kForwardLiarFinal),
       R"(Task:
{instruction}

Context:

{query}

Hints:

{inputs}

Start your response with "Yes" or "No".)"},
      {std::string(kBackwardLiar),
       R"(A task is performed given a context and some hints

Task:
{instruction}

Context:

{query}

Hints:

{hints}

Answered: {output}

{feedback}

How does each hint need to be changed to get the desired output?
Respond one line per hint. Start with "Hint x" for the xth line.)"},
      {std::string(kBackwardLiarNoNeighbor),
       R"(A task is performed given a context and some hints.

One of the hints is:
{hint}

Answered: {output}

{feedback}

How the hint needs to be changed to get the desired output? Respond one line.)"},
      {std::string(kGradientExample),
       R"(Input:
{inputs}
My output:
{output}
Feedback received on my output:
{feedback})"},
      {std::string(kGradientExampleNoGrad),
       R"(Input:
{inputs}
My output:
{output})"},
      {std::string(kOptimizer),
       R"(I'm trying to write a task-specific question answering assistant.

My current prompt is:
{prompt}

Here are some examples that it did not answer well:
{examples}

Based on the above examples, write an improved prompt.
Do not include the keyword "feedback" or any example-specific content in the prompt.
Finish with the improved prompt wrapped by <prompt> and </prompt>)"},
      {std::string(kFeedback), "The answer should be {desire}."},
  };
  return d;
}

} // namespace templates

// Named template collection. Defaults are built in; a directory with one
// `<name>.txt` file per template overrides any subset of them.
class TemplateSet {
public:
  TemplateSet() {
    for (auto &[name, body] : templates::defaults())
      set(name, body);
  }

  static TemplateSet from_directory(const std::filesystem::path &dir) {
    if (!std::filesystem::is_directory(dir))
      throw TemplateError("template directory not found: " + dir.string());
    TemplateSet ts;
    for (auto &entry : std::filesystem::directory_iterator(dir)) {
      if (entry.path().extension() != ".txt")
        continue;
      std::ifstream in(entry.path(), std::ios::binary);
      std::stringstream ss;
      ss << in.rdbuf();
      ts.set(entry.path().stem().string(), strip_one_newline(ss.str()));
    }
    return ts;
  }

  void set(const std::string &name, std::string body) {
    // CRLF -> LF
    std::string lf;
    lf.reserve(body.size());
    for (std::size_t i = 0; i < body.size(); ++i)
      if (!(body[i] == '\r' && i + 1 < body.size() && body[i + 1] == '\n'))
        lf += body[i];
    templates_[name] = Template(name, std::move(lf));
  }

  bool contains(std::string_view name) const { return templates_.find(name) != templates_.end(); }

  const Template &get(std::string_view name) const {
    auto it = templates_.find(name);
    if (it == templates_.end())
      throw TemplateError("unknown template '" + std::string(name) + "'");
    return it->second;
  }

  std::string render(std::string_view name, const Bindings &b) const { return get(name).render(b); }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (auto &[k, v] : templates_)
      out.push_back(k);
    return out;
  }

private:
  static std::string strip_one_newline(std::string s) {
    if (!s.empty() && s.back() == '\n')
      s.pop_back();
    if (!s.empty() && s.back() == '\r')
      s.pop_back();
    return s;
  }

  std::map<std::string, Template, std::less<>> templates_;
};

inline std::string render(const Template &t, const Bindings &b) { return t.render(b); }

// External feedback F(Q, A) for a sample with target `desire`.
inline std::string feedback_string(std::string_view desire,
                                   const TemplateSet &ts = TemplateSet{}) {
  return ts.render(templates::kFeedback, {{"desire", std::string(desire)}});
}

// "## Example k" listing of per-query parameter gradients, 1-based.
inline std::string list_gradients(const std::vector<std::string> &grads) {
  if (grads.empty())
    throw TemplateError("list_gradients: no gradients to list");
  std::string out;
  for (std::size_t k = 0; k < grads.size(); ++k) {
    if (k)
      out += "\n\n";
    out += "## Example " + std::to_string(k + 1) + "\n" + grads[k];
  }
  return out;
}

inline std::string trim(std::string_view s) {
  auto is_space = [](unsigned char c) { return std::isspace(c) != 0; };
  std::size_t b = 0, e = s.size();
  while (b < e && is_space(s[b]))
    ++b;
  while (e > b && is_space(s[e - 1]))
    --e;
  return std::string(s.substr(b, e - b));
}

// Content of the first well-formed <prompt>...</prompt> span, trimmed. With
// nested opens the innermost one before the first close wins.
inline std::string extract_prompt(std::string_view response) {
  constexpr std::string_view open = "<prompt>", close = "</prompt>";
  if (response.find(open) == std::string_view::npos)
    throw ExtractionError("no <prompt> tag in response");
  auto end = response.find(close);
  while (end != std::string_view::npos) {
    auto start = response.rfind(open, end);
    if (start != std::string_view::npos && start + open.size() <= end) {
      auto body = start + open.size();
      return trim(response.substr(body, end - body));
    }
    end = response.find(close, end + close.size());
  }
  throw ExtractionError("unterminated <prompt> tag in response");
}

// Numbered listing used for intermediate inputs and hints: "1. a\n\n2. b".
inline std::string numbered_list(const std::vector<std::string> &items) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i)
      out += "\n\n";
    out += std::to_string(i + 1) + ". " + items[i];
  }
  return out;
}

} // namespace semgrad
