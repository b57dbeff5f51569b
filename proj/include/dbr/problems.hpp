#pragma once

#include "dbr/core.hpp"

#include <span>
#include <string_view>

namespace dbr {

/// Sigmoid-solution benchmark in dimension d:
///   d_t u + (d^2 / 2) Lap u + (u - (d + 2) / (2d)) (d sum_l d_l u) = 0,  u(T, x) = sigmoid(T + mean(x)).
/// sigma = d I, mu = 0, x0 = 0; driver f(t, x, y, z) = (y - (d + 2) / (2d)) (1 . z).
ProblemSpec example1(std::size_t d, double horizon = 1.0);

/// sigmoid(t + mean(x)).
double example1_analytic(double t, std::span<const double> x);

/// Unbounded-solution benchmark: sigma = I / sqrt(d), mu = 0, x0 = 0.5 * 1_d, g(x) = cos(sum_i i x_i),
/// driver f(t, x, y, z) = -khat(t, x) + (y / sqrt(d)) (1 . z) + y^2 / 2.
ProblemSpec example2(std::size_t d, double horizon = 1.0);

/// ((T - t) / d) sum_i phi(x_i) + cos(sum_i i x_i), phi(v) = sin(v) for v < 0 and v otherwise.
double example2_analytic(double t, std::span<const double> x, double horizon = 1.0);

/// Source term that makes example2_analytic an exact solution:
///   khat = d_t u + Lap u / (2d) + (u / d) sum_i d_i u + u^2 / 2.
double khat(double t, std::span<const double> x, double horizon = 1.0);

/// Brownian motion with f = 0 and g(x) = 1 . x, so u(t, x) = 1 . x and Z = 1.
ProblemSpec linear_toy(std::size_t d, double horizon = 1.0);

struct AmericanPutParams {
  double spot = 36.0;
  double strike = 40.0;
  double rate = 0.06;
  double volatility = 0.2;

  bool operator==(const AmericanPutParams&) const = default;
};

/// Black-Scholes American put as an obstacle problem: mu = r x, sigma = vol x, f = -r y,
/// g(x) = (K - x)^+ as both terminal and obstacle. The reference value comes from a
/// 10000-step binomial tree.
ProblemSpec american_put(double spot, double strike, double rate, double volatility, double maturity);

/// Cox-Ross-Rubinstein tree with early exercise at every node.
double binomial_american_put(double spot, double strike, double rate, double volatility, double maturity,
                             std::size_t steps);

/// Looks up "example1", "example2", "linear_toy" or "american_put".
ProblemSpec make_problem(std::string_view id, std::size_t d, double horizon, const AmericanPutParams& put = {});

}  // namespace dbr
