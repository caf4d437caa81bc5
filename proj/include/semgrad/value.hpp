#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

namespace semgrad {

using Vector = std::vector<double>;

class ValueError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

enum class ValueKind { text, numeric };

inline const char *to_string(ValueKind k) {
  return k == ValueKind::text ? "text" : "numeric";
}

// Payload of a graph variable: free-form text or a finite real vector.
class SemanticValue {
public:
  SemanticValue() : data_(std::string{}) {}

  static SemanticValue text(std::string s) {
    SemanticValue v;
    v.data_ = std::move(s);
    return v;
  }

  static SemanticValue numeric(Vector x) {
    for (double e : x)
      if (!std::isfinite(e))
        throw ValueError("numeric value contains NaN or Inf");
    SemanticValue v;
    v.data_ = std::move(x);
    return v;
  }

  static SemanticValue scalar(double x) { return numeric(Vector{x}); }

  ValueKind kind() const {
    return std::holds_alternative<std::string>(data_) ? ValueKind::text
                                                      : ValueKind::numeric;
  }
  bool is_text() const { return kind() == ValueKind::text; }
  bool is_numeric() const { return kind() == ValueKind::numeric; }

  const std::string &as_text() const {
    if (!is_text())
      throw ValueError("expected a text value, got numeric");
    return std::get<std::string>(data_);
  }

  const Vector &as_numeric() const {
    if (!is_numeric())
      throw ValueError("expected a numeric value, got text");
    return std::get<Vector>(data_);
  }

  std::size_t dim() const { return is_numeric() ? as_numeric().size() : 0; }

  friend bool operator==(const SemanticValue &, const SemanticValue &) = default;

private:
  std::variant<std::string, Vector> data_;
};

inline nlohmann::json to_json_value(const SemanticValue &v) {
  if (v.is_text())
    return v.as_text();
  return v.as_numeric();
}

inline SemanticValue from_json_value(const nlohmann::json &j) {
  if (j.is_string())
    return SemanticValue::text(j.get<std::string>());
  if (j.is_number())
    return SemanticValue::scalar(j.get<double>());
  if (j.is_array())
    return SemanticValue::numeric(j.get<Vector>());
  throw ValueError("value must be a string, number or array of numbers");
}

// Where a gradient came from: one edge (source -> successor), or the
// aggregate over all successors of a node.
struct GradientOrigin {
  std::string source;
  std::string successor;
  bool aggregated = false;

  static GradientOrigin edge(std::string src, std::string succ) {
    return {std::move(src), std::move(succ), false};
  }
  static GradientOrigin aggregate(std::string node) {
    return {std::move(node), {}, true};
  }

  friend bool operator==(const GradientOrigin &, const GradientOrigin &) = default;
};

struct SemanticGradient {
  SemanticValue content;
  GradientOrigin origin;
  std::string query_id;

  bool is_text() const { return content.is_text(); }
  const std::string &text() const { return content.as_text(); }
  const Vector &numeric() const { return content.as_numeric(); }

  // Zero gradient: empty text or an all-zero vector.
  bool is_zero() const {
    if (content.is_text())
      return content.as_text().empty();
    for (double e : content.as_numeric())
      if (e != 0.0)
        return false;
    return true;
  }
};

inline nlohmann::json to_json(const SemanticGradient &g) {
  nlohmann::json j;
  j["content"] = to_json_value(g.content);
  j["query_id"] = g.query_id;
  if (g.origin.aggregated)
    j["origin"] = "aggregated";
  else
    j["origin"] = {g.origin.source, g.origin.successor};
  return j;
}

} // namespace semgrad
