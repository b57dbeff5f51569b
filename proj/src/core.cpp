#include "dbr/core.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

namespace dbr {

TimeGrid::TimeGrid(double horizon, std::size_t steps) : horizon_(horizon), steps_(steps), step_(0.0) {
  if (!(horizon > 0.0) || !std::isfinite(horizon)) {
    throw Error("time grid: horizon must be finite and > 0, got " + std::to_string(horizon));
  }
  if (steps == 0) {
    throw Error("time grid: at least one step is required");
  }
  step_ = horizon / static_cast<double>(steps);
}

double TimeGrid::node(std::size_t i) const {
  if (i > steps_) {
    throw Error("time grid: node index " + std::to_string(i) + " beyond N = " + std::to_string(steps_));
  }
  if (i == steps_) {
    return horizon_;
  }
  return static_cast<double>(i) * step_;
}

std::size_t TimeGrid::nearest_node(double t) const {
  if (!(t > 0.0)) {
    return 0;
  }
  if (t >= horizon_) {
    return steps_;
  }
  const double position = t / step_;
  auto below = static_cast<std::size_t>(std::floor(position));
  below = std::min(below, steps_);
  if (below == steps_) {
    return steps_;
  }
  const double to_below = t - node(below);
  const double to_above = node(below + 1) - t;
  return to_above < to_below ? below + 1 : below;
}

std::optional<double> reference_solution(const ProblemSpec& problem) {
  if (problem.analytic && problem.analytic->u) {
    return problem.analytic->u(0.0, problem.x0);
  }
  return problem.reference_value;
}

double generator_partials(const ProblemSpec& problem, double t, std::span<const double> x, double y,
                          std::span<const double> z, std::span<double> dz) {
  if (problem.generator_partials) {
    return problem.generator_partials(t, x, y, z, dz);
  }
  auto step_for = [](double v) { return 1e-6 * std::max(1.0, std::abs(v)); };

  const double hy = step_for(y);
  const double dy = (problem.generator(t, x, y + hy, z) - problem.generator(t, x, y - hy, z)) / (2.0 * hy);

  std::vector<double> shifted(z.begin(), z.end());
  for (std::size_t j = 0; j < z.size(); ++j) {
    const double hz = step_for(z[j]);
    shifted[j] = z[j] + hz;
    const double up = problem.generator(t, x, y, shifted);
    shifted[j] = z[j] - hz;
    const double down = problem.generator(t, x, y, shifted);
    shifted[j] = z[j];
    dz[j] = (up - down) / (2.0 * hz);
  }
  return dy;
}

double relative_error(double estimate_mean, double truth) {
  if (truth == 0.0) {
    throw Error("relative error is undefined for a zero reference value");
  }
  return std::abs(truth - estimate_mean) / std::abs(truth);
}

SummaryStats summarize(std::span<const double> estimates, double truth) {
  if (estimates.empty()) {
    throw Error("summarize: no estimates");
  }
  // Sorted summation makes the result independent of input order.
  std::vector<double> sorted(estimates.begin(), estimates.end());
  std::sort(sorted.begin(), sorted.end());
  const auto n = static_cast<double>(sorted.size());

  SummaryStats stats;
  stats.mean = std::accumulate(sorted.begin(), sorted.end(), 0.0) / n;

  if (sorted.size() > 1) {
    double squares = 0.0;
    for (double v : sorted) {
      squares += (v - stats.mean) * (v - stats.mean);
    }
    stats.std_dev = std::sqrt(squares / (n - 1.0));
  }

  double abs_sum = 0.0;
  for (double v : sorted) {
    abs_sum += std::abs(truth - v);
  }
  stats.mae = abs_sum / n;
  stats.rel_error = relative_error(stats.mean, truth);
  return stats;
}

}  // namespace dbr
