#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "semgrad/value.hpp"

namespace semgrad {

class ShapeError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

// Numeric primitives. Together with sum aggregation these reduce semantic
// backpropagation to reverse-mode automatic differentiation.
//
//   add(x1..xn)        elementwise sum, n >= 1
//   mul(x, y)          elementwise product
//   dot(x, y)          inner product, scalar result
//   affine(W, x, b)    W (m*n, row-major) times x (n) plus b (m)
//   tanh(x)            elementwise
//   square-loss(y)     sum of y_i^2
//   square-loss(y, t)  sum of (y_i - t_i)^2
enum class Primitive { add, mul, dot, affine, tanh, square_loss };

inline std::optional<Primitive> primitive_from_name(std::string_view name) {
  if (name == "add") return Primitive::add;
  if (name == "mul") return Primitive::mul;
  if (name == "dot") return Primitive::dot;
  if (name == "affine") return Primitive::affine;
  if (name == "tanh") return Primitive::tanh;
  if (name == "square-loss") return Primitive::square_loss;
  return std::nullopt;
}

inline bool is_numeric_primitive(std::string_view name) {
  return primitive_from_name(name).has_value();
}

namespace detail {

inline void require_arity(std::string_view name, std::size_t got, std::size_t lo,
                          std::size_t hi) {
  if (got < lo || got > hi)
    throw ShapeError(std::string(name) + ": wrong number of inputs (" +
                     std::to_string(got) + ")");
}

inline void require_same_dim(std::string_view name, const Vector &a, const Vector &b) {
  if (a.size() != b.size())
    throw ShapeError(std::string(name) + ": dimension mismatch " +
                     std::to_string(a.size()) + " vs " + std::to_string(b.size()));
}

// Returns (m, n) for affine(W, x, b).
inline std::pair<std::size_t, std::size_t> affine_shape(std::span<const Vector> in) {
  const std::size_t n = in[1].size(), m = in[2].size();
  if (in[0].size() != m * n)
    throw ShapeError("affine: W has " + std::to_string(in[0].size()) +
                     " entries, expected " + std::to_string(m * n));
  return {m, n};
}

inline void check_arity(Primitive p, std::size_t k) {
  switch (p) {
  case Primitive::add: require_arity("add", k, 1, SIZE_MAX); break;
  case Primitive::mul: require_arity("mul", k, 2, 2); break;
  case Primitive::dot: require_arity("dot", k, 2, 2); break;
  case Primitive::affine: require_arity("affine", k, 3, 3); break;
  case Primitive::tanh: require_arity("tanh", k, 1, 1); break;
  case Primitive::square_loss: require_arity("square-loss", k, 1, 2); break;
  }
}

} // namespace detail

inline Vector numeric_forward(Primitive p, std::span<const Vector> in) {
  detail::check_arity(p, in.size());
  switch (p) {
  case Primitive::add: {
    Vector out = in[0];
    for (std::size_t k = 1; k < in.size(); ++k) {
      detail::require_same_dim("add", out, in[k]);
      for (std::size_t i = 0; i < out.size(); ++i)
        out[i] += in[k][i];
    }
    return out;
  }
  case Primitive::mul: {
    detail::require_same_dim("mul", in[0], in[1]);
    Vector out(in[0].size());
    for (std::size_t i = 0; i < out.size(); ++i)
      out[i] = in[0][i] * in[1][i];
    return out;
  }
  case Primitive::dot: {
    detail::require_same_dim("dot", in[0], in[1]);
    double s = 0;
    for (std::size_t i = 0; i < in[0].size(); ++i)
      s += in[0][i] * in[1][i];
    return {s};
  }
  case Primitive::affine: {
    auto [m, n] = detail::affine_shape(in);
    Vector out = in[2];
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < n; ++c)
        out[r] += in[0][r * n + c] * in[1][c];
    return out;
  }
  case Primitive::tanh: {
    Vector out(in[0].size());
    for (std::size_t i = 0; i < out.size(); ++i)
      out[i] = std::tanh(in[0][i]);
    return out;
  }
  case Primitive::square_loss: {
    if (in.size() == 2)
      detail::require_same_dim("square-loss", in[0], in[1]);
    double s = 0;
    for (std::size_t i = 0; i < in[0].size(); ++i) {
      double d = in[0][i] - (in.size() == 2 ? in[1][i] : 0.0);
      s += d * d;
    }
    return {s};
  }
  }
  throw ShapeError("unknown primitive");
}

// Vector-Jacobian product: out_grad times the Jacobian of the primitive with
// respect to input `target`, other inputs held at their current values.
inline Vector numeric_backward(Primitive p, std::span<const Vector> in,
                               std::size_t target, const Vector &out_grad) {
  detail::check_arity(p, in.size());
  if (target >= in.size())
    throw ShapeError("backward target index out of range");
  const Vector &x = in[target];

  auto expect_grad_dim = [&](std::size_t d) {
    if (out_grad.size() != d)
      throw ShapeError("output gradient has dimension " +
                       std::to_string(out_grad.size()) + ", expected " +
                       std::to_string(d));
  };

  switch (p) {
  case Primitive::add: {
    auto fwd = numeric_forward(p, in); // shape check
    expect_grad_dim(fwd.size());
    return out_grad;
  }
  case Primitive::mul: {
    detail::require_same_dim("mul", in[0], in[1]);
    expect_grad_dim(x.size());
    const Vector &other = in[1 - target];
    Vector g(x.size());
    for (std::size_t i = 0; i < g.size(); ++i)
      g[i] = out_grad[i] * other[i];
    return g;
  }
  case Primitive::dot: {
    detail::require_same_dim("dot", in[0], in[1]);
    expect_grad_dim(1);
    const Vector &other = in[1 - target];
    Vector g(x.size());
    for (std::size_t i = 0; i < g.size(); ++i)
      g[i] = out_grad[0] * other[i];
    return g;
  }
  case Primitive::affine: {
    auto [m, n] = detail::affine_shape(in);
    expect_grad_dim(m);
    const Vector &W = in[0], &v = in[1];
    if (target == 0) {
      Vector g(m * n);
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < n; ++c)
          g[r * n + c] = out_grad[r] * v[c];
      return g;
    }
    if (target == 1) {
      Vector g(n, 0.0);
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < n; ++c)
          g[c] += out_grad[r] * W[r * n + c];
      return g;
    }
    return out_grad;
  }
  case Primitive::tanh: {
    expect_grad_dim(x.size());
    Vector g(x.size());
    for (std::size_t i = 0; i < g.size(); ++i) {
      double t = std::tanh(x[i]);
      g[i] = out_grad[i] * (1.0 - t * t);
    }
    return g;
  }
  case Primitive::square_loss: {
    if (in.size() == 2)
      detail::require_same_dim("square-loss", in[0], in[1]);
    expect_grad_dim(1);
    const double sign = target == 0 ? 1.0 : -1.0;
    Vector g(x.size());
    for (std::size_t i = 0; i < g.size(); ++i) {
      double d = in[0][i] - (in.size() == 2 ? in[1][i] : 0.0);
      g[i] = out_grad[0] * 2.0 * d * sign;
    }
    return g;
  }
  }
  throw ShapeError("unknown primitive");
}

inline Vector numeric_backward(std::string_view name, std::span<const Vector> in,
                               std::size_t target, const Vector &out_grad) {
  auto p = primitive_from_name(name);
  if (!p)
    throw ShapeError("unknown numeric primitive '" + std::string(name) + "'");
  return numeric_backward(*p, in, target, out_grad);
}

class AggregationError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

// Blank line between per-successor text gradients.
inline constexpr std::string_view kGradientDelimiter = "\n\n";

// Elementwise sum; the empty set sums to the zero vector of dimension `dim`.
inline Vector sum_aggregator(std::span<const SemanticGradient> grads, std::size_t dim) {
  Vector out(dim, 0.0);
  for (auto &g : grads) {
    if (!g.content.is_numeric())
      throw AggregationError("sum aggregator received a text gradient");
    if (g.numeric().size() != dim)
      throw AggregationError("gradient dimension " + std::to_string(g.numeric().size()) +
                             " does not match variable dimension " + std::to_string(dim));
    for (std::size_t i = 0; i < dim; ++i)
      out[i] += g.numeric()[i];
  }
  return out;
}

// Concatenation in the given (successor) order. Empty gradients are skipped.
inline std::string concat_aggregator(std::span<const SemanticGradient> grads) {
  std::string out;
  bool first = true;
  for (auto &g : grads) {
    if (!g.content.is_text())
      throw AggregationError("concat aggregator received a numeric gradient");
    if (g.text().empty())
      continue; // zero gradient
    if (!first)
      out += kGradientDelimiter;
    out += g.text();
    first = false;
  }
  return out;
}

inline std::string concat_aggregator(std::span<const std::string> texts) {
  std::string out;
  for (std::size_t i = 0; i < texts.size(); ++i) {
    if (i)
      out += kGradientDelimiter;
    out += texts[i];
  }
  return out;
}

} // namespace semgrad
