#include "dbr/problems.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace dbr {
namespace {

double mean_of(std::span<const double> x) {
  return std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
}

double sum_of(std::span<const double> x) { return std::accumulate(x.begin(), x.end(), 0.0); }

double sigmoid(double a) {
  if (a >= 0.0) {
    return 1.0 / (1.0 + std::exp(-a));
  }
  const double e = std::exp(a);
  return e / (1.0 + e);
}

Coefficient zero_drift() {
  return [](double, std::span<const double>, std::span<double> out) { std::fill(out.begin(), out.end(), 0.0); };
}

Coefficient scaled_identity(std::size_t d, double scale) {
  return [d, scale](double, std::span<const double>, std::span<double> out) {
    std::fill(out.begin(), out.end(), 0.0);
    for (std::size_t a = 0; a < d; ++a) {
      out[a * d + a] = scale;
    }
  };
}

void require_dim(std::size_t d, const char* name) {
  if (d == 0) {
    throw Error(std::string(name) + ": dimension must be >= 1");
  }
}

// phi(v) = sin v (v < 0), v (v >= 0) and its first two derivatives.
double phi(double v) { return v < 0.0 ? std::sin(v) : v; }
double phi_prime(double v) { return v < 0.0 ? std::cos(v) : 1.0; }
double phi_second(double v) { return v < 0.0 ? -std::sin(v) : 0.0; }

double weighted_sum(std::span<const double> x) {
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    s += static_cast<double>(i + 1) * x[i];
  }
  return s;
}

}  // namespace

// ---------------------------------------------------------------------------

double example1_analytic(double t, std::span<const double> x) { return sigmoid(t + mean_of(x)); }

ProblemSpec example1(std::size_t d, double horizon) {
  require_dim(d, "example1");
  const double dd = static_cast<double>(d);
  const double level = (dd + 2.0) / (2.0 * dd);

  ProblemSpec p;
  p.id = "example1";
  p.dim = d;
  p.horizon = horizon;
  p.x0.assign(d, 0.0);
  p.drift = zero_drift();
  p.diffusion = scaled_identity(d, dd);
  p.generator = [level](double, std::span<const double>, double y, std::span<const double> z) {
    return (y - level) * sum_of(z);
  };
  p.generator_partials = [level](double, std::span<const double>, double y, std::span<const double> z,
                                 std::span<double> dz) {
    std::fill(dz.begin(), dz.end(), y - level);
    return sum_of(z);
  };
  p.terminal = [horizon](std::span<const double> x) { return sigmoid(horizon + mean_of(x)); };

  AnalyticSolution exact;
  exact.u = [](double t, std::span<const double> x) { return example1_analytic(t, x); };
  exact.z = [](double t, std::span<const double> x, std::span<double> out) {
    const double u = example1_analytic(t, x);
    std::fill(out.begin(), out.end(), u * (1.0 - u));
  };
  p.analytic = std::move(exact);
  return p;
}

// ---------------------------------------------------------------------------

double example2_analytic(double t, std::span<const double> x, double horizon) {
  const double d = static_cast<double>(x.size());
  double linear = 0.0;
  for (double v : x) {
    linear += phi(v);
  }
  return (horizon - t) / d * linear + std::cos(weighted_sum(x));
}

double khat(double t, std::span<const double> x, double horizon) {
  const double d = static_cast<double>(x.size());
  const double s = weighted_sum(x);
  const double sin_s = std::sin(s);
  const double cos_s = std::cos(s);
  const double u = example2_analytic(t, x, horizon);

  double dt_u = 0.0;
  double gradient_sum = 0.0;
  double laplacian = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double w = static_cast<double>(i + 1);
    dt_u -= phi(x[i]) / d;
    gradient_sum += (horizon - t) / d * phi_prime(x[i]) - w * sin_s;
    laplacian += (horizon - t) / d * phi_second(x[i]) - w * w * cos_s;
  }
  return dt_u + laplacian / (2.0 * d) + (u / d) * gradient_sum + 0.5 * u * u;
}

ProblemSpec example2(std::size_t d, double horizon) {
  require_dim(d, "example2");
  const double root_d = std::sqrt(static_cast<double>(d));

  ProblemSpec p;
  p.id = "example2";
  p.dim = d;
  p.horizon = horizon;
  p.x0.assign(d, 0.5);
  p.drift = zero_drift();
  p.diffusion = scaled_identity(d, 1.0 / root_d);
  p.generator = [root_d, horizon](double t, std::span<const double> x, double y, std::span<const double> z) {
    return -khat(t, x, horizon) + (y / root_d) * sum_of(z) + 0.5 * y * y;
  };
  p.generator_partials = [root_d](double, std::span<const double>, double y, std::span<const double> z,
                                  std::span<double> dz) {
    std::fill(dz.begin(), dz.end(), y / root_d);
    return sum_of(z) / root_d + y;
  };
  p.terminal = [](std::span<const double> x) { return std::cos(weighted_sum(x)); };

  AnalyticSolution exact;
  exact.u = [horizon](double t, std::span<const double> x) { return example2_analytic(t, x, horizon); };
  exact.z = [root_d, horizon](double t, std::span<const double> x, std::span<double> out) {
    const double sin_s = std::sin(weighted_sum(x));
    const double d = static_cast<double>(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double grad = (horizon - t) / d * phi_prime(x[i]) - static_cast<double>(i + 1) * sin_s;
      out[i] = grad / root_d;
    }
  };
  p.analytic = std::move(exact);
  return p;
}

// ---------------------------------------------------------------------------

ProblemSpec linear_toy(std::size_t d, double horizon) {
  require_dim(d, "linear_toy");
  ProblemSpec p;
  p.id = "linear_toy";
  p.dim = d;
  p.horizon = horizon;
  p.x0.assign(d, 0.0);
  p.drift = zero_drift();
  p.diffusion = scaled_identity(d, 1.0);
  p.generator = [](double, std::span<const double>, double, std::span<const double>) { return 0.0; };
  p.generator_partials = [](double, std::span<const double>, double, std::span<const double>,
                            std::span<double> dz) {
    std::fill(dz.begin(), dz.end(), 0.0);
    return 0.0;
  };
  p.terminal = [](std::span<const double> x) { return sum_of(x); };

  AnalyticSolution exact;
  exact.u = [](double, std::span<const double> x) { return sum_of(x); };
  exact.z = [](double, std::span<const double>, std::span<double> out) { std::fill(out.begin(), out.end(), 1.0); };
  p.analytic = std::move(exact);
  return p;
}

// ---------------------------------------------------------------------------

namespace {

void check_put_inputs(double spot, double strike, double rate, double volatility, double maturity) {
  if (!(spot > 0.0) || !std::isfinite(spot)) throw Error("american put: spot must be > 0");
  if (!(strike > 0.0) || !std::isfinite(strike)) throw Error("american put: strike must be > 0");
  if (!(volatility >= 0.0) || !std::isfinite(volatility)) throw Error("american put: volatility must be >= 0");
  if (!(maturity > 0.0) || !std::isfinite(maturity)) throw Error("american put: maturity must be > 0");
  if (!std::isfinite(rate)) throw Error("american put: rate must be finite");
}

}  // namespace

double binomial_american_put(double spot, double strike, double rate, double volatility, double maturity,
                             std::size_t steps) {
  check_put_inputs(spot, strike, rate, volatility, maturity);
  if (steps == 0) {
    throw Error("binomial tree: steps must be >= 1");
  }
  const double dt = maturity / static_cast<double>(steps);
  const double discount = std::exp(-rate * dt);

  if (volatility == 0.0) {
    // Single deterministic path S_j = S0 exp(r t_j).
    const double growth = std::exp(rate * dt);
    std::vector<double> prices(steps + 1);
    prices[0] = spot;
    for (std::size_t j = 1; j <= steps; ++j) prices[j] = prices[j - 1] * growth;
    double value = std::max(strike - prices[steps], 0.0);
    for (std::size_t j = steps; j-- > 0;) {
      value = std::max(strike - prices[j], discount * value);
    }
    return value;
  }

  const double up = std::exp(volatility * std::sqrt(dt));
  const double down = 1.0 / up;
  const double p_up = (std::exp(rate * dt) - down) / (up - down);
  if (!(p_up > 0.0 && p_up < 1.0)) {
    throw Error("binomial tree: risk-neutral probability outside (0, 1); refine the tree");
  }
  const double p_down = 1.0 - p_up;

  // values[j] / prices[j] hold the node with j down moves at the current level.
  std::vector<double> prices(steps + 1);
  std::vector<double> values(steps + 1);
  for (std::size_t j = 0; j <= steps; ++j) {
    prices[j] = spot * std::pow(up, static_cast<double>(steps) - 2.0 * static_cast<double>(j));
    values[j] = std::max(strike - prices[j], 0.0);
  }
  for (std::size_t level = steps; level-- > 0;) {
    for (std::size_t j = 0; j <= level; ++j) {
      prices[j] *= down;
      const double hold = discount * (p_up * values[j] + p_down * values[j + 1]);
      values[j] = std::max(strike - prices[j], hold);
    }
  }
  return values[0];
}

ProblemSpec american_put(double spot, double strike, double rate, double volatility, double maturity) {
  check_put_inputs(spot, strike, rate, volatility, maturity);

  ProblemSpec p;
  p.id = "american_put";
  p.dim = 1;
  p.horizon = maturity;
  p.x0 = {spot};
  p.drift = [rate](double, std::span<const double> x, std::span<double> out) { out[0] = rate * x[0]; };
  p.diffusion = [volatility](double, std::span<const double> x, std::span<double> out) {
    out[0] = volatility * x[0];
  };
  p.generator = [rate](double, std::span<const double>, double y, std::span<const double>) { return -rate * y; };
  p.generator_partials = [rate](double, std::span<const double>, double, std::span<const double>,
                                std::span<double> dz) {
    dz[0] = 0.0;
    return -rate;
  };
  p.terminal = [strike](std::span<const double> x) { return std::max(strike - x[0], 0.0); };
  p.has_obstacle = true;
  p.reference_value = binomial_american_put(spot, strike, rate, volatility, maturity, 10000);
  return p;
}

ProblemSpec make_problem(std::string_view id, std::size_t d, double horizon, const AmericanPutParams& put) {
  if (id == "example1") return example1(d, horizon);
  if (id == "example2") return example2(d, horizon);
  if (id == "linear_toy") return linear_toy(d, horizon);
  if (id == "american_put") {
    if (d != 1) {
      throw Error("american_put is one-dimensional, got d = " + std::to_string(d));
    }
    return american_put(put.spot, put.strike, put.rate, put.volatility, horizon);
  }
  throw Error("unknown problem id '" + std::string(id) + "'");
}

}  // namespace dbr
