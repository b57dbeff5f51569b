#pragma once

// Shared domain types for the backward-regression solvers: the uniform time
// grid, the PDE/FBSDE problem description, per-run reports and the summary
// statistics used to compare schemes.

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dbr {

/// Row-major dense matrix; one sample per row throughout the library.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Uniform grid 0 = t_0 < t_1 < ... < t_N = T with step h = T / N.
class TimeGrid {
 public:
  TimeGrid(double horizon, std::size_t steps);

  double horizon() const { return horizon_; }
  std::size_t steps() const { return steps_; }
  double step() const { return step_; }

  /// t_i = i * h, with t_N pinned to the horizon.
  double node(std::size_t i) const;

  /// Index of the grid node closest to t (ties resolve to the earlier node).
  std::size_t nearest_node(double t) const;

 private:
  double horizon_;
  std::size_t steps_;
  double step_;
};

using Coefficient = std::function<void(double t, std::span<const double> x, std::span<double> out)>;
using Generator = std::function<double(double t, std::span<const double> x, double y, std::span<const double> z)>;
/// Returns df/dy and writes df/dz into `dz`.
using GeneratorPartials = std::function<double(double t, std::span<const double> x, double y,
                                               std::span<const double> z, std::span<double> dz)>;
using ScalarField = std::function<double(std::span<const double> x)>;

struct AnalyticSolution {
  std::function<double(double t, std::span<const double> x)> u;
  /// z(t, x) = sigma^T grad u; may be empty.
  Coefficient z;
};

/// One semilinear PDE in FBSDE form with scalar solution:
///
///   dX = mu(t, X) dt + sigma(t, X) dW,        X_0 = x0
///  -dY = f(t, X, Y, Z) dt - Z dW,             Y_T = g(X_T)
///
/// so that Y_t = u(t, X_t) for u solving
///   d_t u + mu . grad u + 1/2 Tr(sigma sigma^T D^2 u) + f(t, x, u, sigma^T grad u) = 0.
/// `generator` is always stated in this driver convention.
struct ProblemSpec {
  std::string id;
  std::size_t dim = 0;
  double horizon = 1.0;
  std::vector<double> x0;

  Coefficient drift;      ///< writes d values
  Coefficient diffusion;  ///< writes d*d values, row-major
  Generator generator;
  GeneratorPartials generator_partials;  ///< optional; central differences otherwise
  ScalarField terminal;

  /// Reflected problems keep Y above the obstacle; the obstacle defaults to the terminal function.
  bool has_obstacle = false;
  ScalarField obstacle;

  std::optional<AnalyticSolution> analytic;
  /// u(0, x0) from an external oracle when no closed form exists.
  std::optional<double> reference_value;

  double obstacle_at(std::span<const double> x) const { return obstacle ? obstacle(x) : terminal(x); }
};

/// Analytic or reference value of u(0, x0), if the problem carries one.
std::optional<double> reference_solution(const ProblemSpec& problem);

/// df/dy at (t, x, y, z); fills dz with df/dz. Falls back to central differences
/// when the problem does not provide closed-form partials.
double generator_partials(const ProblemSpec& problem, double t, std::span<const double> x, double y,
                          std::span<const double> z, std::span<double> dz);

struct SummaryStats {
  double mean = 0.0;
  double std_dev = 0.0;
  double mae = 0.0;
  double rel_error = 0.0;
};

struct StepLosses {
  double y_initial = 0.0;
  double y_final = 0.0;
  double z_initial = 0.0;
  double z_final = 0.0;
};

struct RunReport {
  std::size_t run = 0;
  std::uint64_t seed = 0;
  double estimate = 0.0;
  double seconds = 0.0;
  /// Indexed by time step i = 0..N-1.
  std::vector<StepLosses> losses;
  /// Set when the run aborted; estimate is then NaN.
  std::optional<std::string> error;

  bool ok() const { return !error.has_value(); }
};

/// |truth - estimate_mean| / |truth|. Throws when truth is zero.
double relative_error(double estimate_mean, double truth);

/// Mean, sample standard deviation (n - 1), mean absolute error and relative error of the mean.
SummaryStats summarize(std::span<const double> estimates, double truth);

}  // namespace dbr
