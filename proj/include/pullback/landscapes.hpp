#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "pullback/errors.hpp"
#include "pullback/numcore.hpp"

// Two-dimensional benchmark functions with analytic gradients.
//
//   rosenbrock  (1-x)^2 + 100 (y-x^2)^2                       min 0 at (1, 1)
//   rastrigin   20 + sum(x_i^2 - 10 cos(2 pi x_i))             min 0 at (0, 0)
//   himmelblau  (x^2+y-11)^2 + (x+y^2-7)^2                     min 0 at four points
//   beale       (1.5-x+xy)^2 + (2.25-x+xy^2)^2 + (2.625-x+xy^3)^2   min 0 at (3, 0.5)
//   ackley      -20 exp(-0.2 sqrt((x^2+y^2)/2)) - exp((cos 2pi x + cos 2pi y)/2) + e + 20
//                                                              min 0 at (0, 0)

namespace pullback {

struct Landscape {
  std::string name;
  std::size_t dim = 2;
  std::function<double(const ParamVector&)> eval;
  std::function<ParamVector(const ParamVector&)> grad;
  std::vector<ParamVector> minima;
  double min_value = 0.0;
  ParamVector default_start;
  /// Constant added to eval by offset_loss (0 for the plain function).
  double offset = 0.0;

  /// Euclidean distance from theta to the nearest known minimum.
  double distance_to_minimum(const ParamVector& theta) const {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& m : minima) best = std::min(best, norm2(axpy(-1.0, m, theta)));
    return best;
  }
};

inline constexpr std::string_view kLandscapeNames[] = {"rosenbrock", "rastrigin", "himmelblau",
                                                        "beale", "ackley"};

namespace detail {

inline void require_dim2(const ParamVector& p) {
  if (p.size() != 2) throw DimensionError("landscape: expected 2 parameters");
}

inline Landscape rosenbrock() {
  Landscape l;
  l.name = "rosenbrock";
  l.eval = [](const ParamVector& p) {
    require_dim2(p);
    const double x = p[0], y = p[1];
    return (1.0 - x) * (1.0 - x) + 100.0 * (y - x * x) * (y - x * x);
  };
  l.grad = [](const ParamVector& p) {
    require_dim2(p);
    const double x = p[0], y = p[1];
    return ParamVector{-2.0 * (1.0 - x) - 400.0 * x * (y - x * x), 200.0 * (y - x * x)};
  };
  l.minima = {ParamVector{1.0, 1.0}};
  l.default_start = ParamVector{-1.5, 2.0};
  return l;
}

inline Landscape rastrigin() {
  constexpr double two_pi = 2.0 * std::numbers::pi;
  Landscape l;
  l.name = "rastrigin";
  l.eval = [](const ParamVector& p) {
    require_dim2(p);
    double acc = 20.0;
    for (double x : p) acc += x * x - 10.0 * std::cos(two_pi * x);
    return acc;
  };
  l.grad = [](const ParamVector& p) {
    require_dim2(p);
    ParamVector g(2);
    for (std::size_t i = 0; i < 2; ++i) g[i] = 2.0 * p[i] + 10.0 * two_pi * std::sin(two_pi * p[i]);
    return g;
  };
  l.minima = {ParamVector{0.0, 0.0}};
  l.default_start = ParamVector{2.5, -2.3};
  return l;
}

inline Landscape himmelblau() {
  Landscape l;
  l.name = "himmelblau";
  l.eval = [](const ParamVector& p) {
    require_dim2(p);
    const double x = p[0], y = p[1];
    const double a = x * x + y - 11.0, b = x + y * y - 7.0;
    return a * a + b * b;
  };
  l.grad = [](const ParamVector& p) {
    require_dim2(p);
    const double x = p[0], y = p[1];
    const double a = x * x + y - 11.0, b = x + y * y - 7.0;
    return ParamVector{4.0 * x * a + 2.0 * b, 2.0 * a + 4.0 * y * b};
  };
  l.minima = {ParamVector{3.0, 2.0},
              ParamVector{-2.8051180869527448531, 3.1313125182505729658},
              ParamVector{-3.7793102533777468919, -3.2831859912861694123},
              ParamVector{3.5844283403304917449, -1.8481265269644035535}};
  l.default_start = ParamVector{0.0, 0.0};
  return l;
}

inline Landscape beale() {
  Landscape l;
  l.name = "beale";
  l.eval = [](const ParamVector& p) {
    require_dim2(p);
    const double x = p[0], y = p[1];
    const double a = 1.5 - x + x * y;
    const double b = 2.25 - x + x * y * y;
    const double c = 2.625 - x + x * y * y * y;
    return a * a + b * b + c * c;
  };
  l.grad = [](const ParamVector& p) {
    require_dim2(p);
    const double x = p[0], y = p[1];
    const double a = 1.5 - x + x * y;
    const double b = 2.25 - x + x * y * y;
    const double c = 2.625 - x + x * y * y * y;
    const double dx = 2.0 * a * (y - 1.0) + 2.0 * b * (y * y - 1.0) + 2.0 * c * (y * y * y - 1.0);
    const double dy = 2.0 * a * x + 2.0 * b * 2.0 * x * y + 2.0 * c * 3.0 * x * y * y;
    return ParamVector{dx, dy};
  };
  l.minima = {ParamVector{3.0, 0.5}};
  l.default_start = ParamVector{1.0, 1.5};
  return l;
}

inline Landscape ackley() {
  constexpr double two_pi = 2.0 * std::numbers::pi;
  Landscape l;
  l.name = "ackley";
  // Written as 20 (1 - e1) + (e - e2) so the minimum evaluates to exactly 0.
  l.eval = [](const ParamVector& p) {
    require_dim2(p);
    const double r = std::sqrt(0.5 * (p[0] * p[0] + p[1] * p[1]));
    const double e1 = std::exp(-0.2 * r);
    const double e2 = std::exp(0.5 * (std::cos(two_pi * p[0]) + std::cos(two_pi * p[1])));
    return 20.0 * (1.0 - e1) + (std::exp(1.0) - e2);
  };
  // The radial term has a cusp at the origin; its gradient is taken as 0 there.
  l.grad = [](const ParamVector& p) {
    require_dim2(p);
    const double r = std::sqrt(0.5 * (p[0] * p[0] + p[1] * p[1]));
    const double e2 = std::exp(0.5 * (std::cos(two_pi * p[0]) + std::cos(two_pi * p[1])));
    const double radial = r > 0.0 ? 2.0 * std::exp(-0.2 * r) / r : 0.0;
    ParamVector g(2);
    for (std::size_t i = 0; i < 2; ++i) {
      g[i] = radial * p[i] + std::numbers::pi * std::sin(two_pi * p[i]) * e2;
    }
    return g;
  };
  l.minima = {ParamVector{0.0, 0.0}};
  l.default_start = ParamVector{2.2, -1.7};
  return l;
}

}  // namespace detail

inline std::string valid_landscape_names() {
  std::string out;
  for (auto n : kLandscapeNames) {
    if (!out.empty()) out += ", ";
    out += n;
  }
  return out;
}

inline Landscape make_landscape(std::string_view name) {
  if (name == "rosenbrock") return detail::rosenbrock();
  if (name == "rastrigin") return detail::rastrigin();
  if (name == "himmelblau") return detail::himmelblau();
  if (name == "beale") return detail::beale();
  if (name == "ackley") return detail::ackley();
  throw UsageError("unknown landscape '" + std::string(name) +
                   "'; valid landscapes: " + valid_landscape_names());
}

/// Shifts the loss by +c (c > 0) so it is strictly positive, as the log
/// embedding requires. Gradients are unchanged.
inline Landscape offset_loss(Landscape l, double c) {
  if (!(c > 0.0) || !std::isfinite(c)) throw DomainError("offset_loss: c must be > 0");
  l.eval = [inner = std::move(l.eval), c](const ParamVector& p) { return inner(p) + c; };
  l.min_value += c;
  l.offset += c;
  return l;
}

}  // namespace pullback
