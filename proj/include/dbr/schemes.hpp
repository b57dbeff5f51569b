#pragma once

// Backward-induction solvers for the FBSDE
//
//   Y_i = E_i[Y_{i+1} + h f(t_i, X_i, Y_i, Z_i)],   Z_i = E_i[Y_{i+1} dW_i^T / h].
//
// DBR replaces both conditional expectations with K-branch Monte Carlo averages
// computed once per step, then fits NN_z,i to the Z labels and NN_y,i to the
// Y labels (Z first). DBDP1 fits (NN_y,i, NN_z,i) jointly to the single-path
// Euler residual. RDBR is DBR with the obstacle reflection max{., g}.

#include "dbr/core.hpp"
#include "dbr/neuralnet.hpp"
#include "dbr/paths.hpp"

#include <functional>
#include <optional>
#include <string_view>
#include <vector>

namespace dbr {

enum class Scheme { dbr, dbdp1, rdbr };

std::string_view scheme_name(Scheme scheme);
Scheme parse_scheme(std::string_view name);

struct TrainConfig {
  std::size_t samples = 2000;     ///< M, outer paths
  std::size_t branches = 64;      ///< K, inner branches per outer path
  std::size_t batch = 400;        ///< B, SGD mini-batch
  std::size_t iterations = 1500;  ///< Adam steps per network per time step
  double learning_rate = 5e-4;
  std::vector<std::size_t> hidden;  ///< hidden layer widths
  std::uint64_t seed = 0;
  AdamOptions adam;

  /// Differentiate the loss through the Y argument of f (false = treat f(.) as a constant).
  bool differentiate_generator = true;
  /// Start step i from the step i + 1 networks instead of a fresh Xavier draw.
  bool warm_start = false;
  /// Draw a fresh outer ensemble at every step instead of one per run.
  bool resample_outer = false;
  /// Standardise network inputs with the per-step outer-cloud mean and spread.
  bool scale_inputs = false;
  /// Workers for the branch-label computation.
  std::size_t threads = 1;

  void validate() const;
};

/// Branch-averaged regression labels for one step.
struct StepTargets {
  Vector y_base;    ///< (1/K) sum_k Y_{i+1}[m][k]
  Matrix z_target;  ///< (1/K) sum_k Y_{i+1}[m][k] dW[m][k] / h, M x d
};

/// Trained per-step networks plus the terminal condition.
class SchemeSolution {
 public:
  SchemeSolution(Scheme scheme, ProblemSpec problem, TimeGrid grid);

  Scheme scheme() const { return scheme_; }
  bool reflected() const { return scheme_ == Scheme::rdbr; }
  const ProblemSpec& problem() const { return problem_; }
  const TimeGrid& grid() const { return grid_; }

  void set_networks(std::size_t step, MlpNetwork y, MlpNetwork z);
  bool trained(std::size_t step) const;
  const MlpNetwork& y_network(std::size_t step) const;
  const MlpNetwork& z_network(std::size_t step) const;

  /// Y approximation at node `step` (0..N) on the rows of `points`; g at N,
  /// max{NN_y, obstacle} for reflected solutions.
  Vector evaluate_y(std::size_t step, const Matrix& points) const;
  /// Z approximation at node `step` (0..N-1).
  Matrix evaluate_z(std::size_t step, const Matrix& points) const;

 private:
  Scheme scheme_;
  ProblemSpec problem_;
  TimeGrid grid_;
  std::vector<std::optional<MlpNetwork>> y_nets_;
  std::vector<std::optional<MlpNetwork>> z_nets_;
};

struct SolveResult {
  SchemeSolution solution;
  double estimate = 0.0;  ///< u(0, x0) approximation
  std::vector<StepLosses> losses;
};

struct TrainedNetwork {
  MlpNetwork net;
  double initial_loss = 0.0;  ///< full-ensemble loss before the first update
  double final_loss = 0.0;    ///< full-ensemble loss after the last update
};

using YEvaluator = std::function<Vector(const Matrix& points)>;

/// Rows (t, x_m) fed to the per-step networks.
Matrix network_inputs(double t, const Matrix& states);

/// g(points) at i_next = N, else NN_y,i_next(t_{i_next}, points), reflected when the solution is.
Vector evaluate_y_next(const SchemeSolution& solution, const ProblemSpec& problem, std::size_t i_next,
                       const Matrix& points);

StepTargets compute_step_targets(const ProblemSpec& problem, const TimeGrid& grid, std::size_t step,
                                 const Matrix& outer_states, const BranchBatch& branches, const YEvaluator& y_next,
                                 std::size_t threads = 1);

/// (1/M) sum_m |z_target_m - NN_z(p_m)|^2.
double z_step_loss(const MlpNetwork& net, const Matrix& inputs, const Matrix& targets);

/// Inputs shared by the Y regression at one step.
struct YStepData {
  const Matrix& inputs;    ///< M x (1 + d) rows (t_i, X_i)
  const Matrix& states;    ///< M x d, X_i
  const Vector& y_base;    ///< branch averages of Y_{i+1}
  const Matrix& z_values;  ///< frozen NN_z,i(p_m), M x d
  double t = 0.0;
  double h = 0.0;
};

/// (1/M) sum_m |NN_y(p_m) - y_base_m - h f(t_i, X_m, NN_y(p_m), z_m)|^2.
double y_step_loss(const MlpNetwork& net, const YStepData& data, const ProblemSpec& problem);

/// Adam regression of NN_z,i onto the Z labels. `stream` fixes the step and network substream.
TrainedNetwork train_z_step(const Matrix& inputs, const Matrix& targets, const TrainConfig& config,
                            const RngStream& stream, std::optional<MlpNetwork> start = {});

/// Adam regression of NN_y,i with the implicit generator term.
TrainedNetwork train_y_step(const YStepData& data, const ProblemSpec& problem, const TrainConfig& config,
                            const RngStream& stream, std::optional<MlpNetwork> start = {});

/// Inputs for one DBDP1 step: the same trajectory's next state and increment, no branching.
struct Dbdp1StepData {
  const Matrix& inputs;       ///< M x (1 + d)
  const Matrix& states;       ///< X_i
  const Vector& next_values;  ///< Y_{i+1}(X_{i+1}[m])
  const Matrix& increments;   ///< dW_i[m]
  double t = 0.0;
  double h = 0.0;
};

struct Dbdp1StepResult {
  MlpNetwork y;
  MlpNetwork z;
  double initial_loss = 0.0;
  double final_loss = 0.0;
};

/// (1/M) sum_m |NN_y - Y_{i+1} - h f(t_i, X_m, NN_y, NN_z) + NN_z . dW_m|^2.
double dbdp1_loss(const MlpNetwork& y, const MlpNetwork& z, const Dbdp1StepData& data, const ProblemSpec& problem);

Dbdp1StepResult dbdp1_step(const Dbdp1StepData& data, const ProblemSpec& problem, const TrainConfig& config,
                           const RngStream& stream, std::optional<MlpNetwork> y_start = {},
                           std::optional<MlpNetwork> z_start = {});

SolveResult dbr_solve(const ProblemSpec& problem, const TimeGrid& grid, const TrainConfig& config,
                      const RngStream& stream);
SolveResult dbdp1_solve(const ProblemSpec& problem, const TimeGrid& grid, const TrainConfig& config,
                        const RngStream& stream);
/// Requires problem.has_obstacle.
SolveResult rdbr_solve(const ProblemSpec& problem, const TimeGrid& grid, const TrainConfig& config,
                       const RngStream& stream);

SolveResult solve(Scheme scheme, const ProblemSpec& problem, const TimeGrid& grid, const TrainConfig& config,
                  const RngStream& stream);

}  // namespace dbr
