#pragma once

// Experiment configuration, repeated runs and CSV emission.
//
// Config documents are flat JSON objects. Only `problem` and `d` are required;
// every other key has a default and unknown keys are rejected.

#include "dbr/core.hpp"
#include "dbr/problems.hpp"
#include "dbr/schemes.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace dbr {

struct ExperimentConfig {
  std::string problem;
  std::size_t d = 0;
  double horizon = 1.0;          ///< key "T"
  std::size_t steps = 10;        ///< key "N"
  std::size_t samples = 2000;    ///< key "M"
  std::size_t branches = 64;     ///< key "K"
  std::size_t batch = 400;
  std::size_t iterations = 1500;
  double learning_rate = 5e-4;
  std::vector<std::size_t> hidden;  ///< d + 110 (example1) or d + 10 twice when absent
  std::vector<Scheme> schemes{Scheme::dbr};
  std::size_t repetitions = 10;
  std::uint64_t seed = 1;
  bool deterministic = false;
  std::string output_dir = "results";

  AdamOptions adam;
  bool differentiate_generator = true;
  bool warm_start = false;
  bool resample_outer = false;
  bool scale_inputs = false;

  AmericanPutParams put;
  std::vector<double> profile_times;
  std::optional<std::pair<double, double>> profile_range;
  std::size_t profile_points = 101;
  bool dump_paths = false;

  bool operator==(const ExperimentConfig&) const = default;
};

ExperimentConfig parse_config(std::string_view text);
ExperimentConfig load_config(const std::filesystem::path& file);
/// Canonical JSON with every key present; parse_config(serialize_config(c)) == c.
std::string serialize_config(const ExperimentConfig& config);

/// Hidden widths after defaulting.
std::vector<std::size_t> resolved_hidden(const ExperimentConfig& config);

/// Full-scale budgets: example1 M = 10000 with 6000 iterations, example2 3000 iterations at batch 400.
void apply_paper_budget(ExperimentConfig& config);

ProblemSpec build_problem(const ExperimentConfig& config);
TrainConfig build_train_config(const ExperimentConfig& config);

struct ExperimentResult {
  Scheme scheme = Scheme::dbr;
  std::vector<RunReport> reports;
  std::optional<double> truth;
  /// Over successful runs; empty when no truth is known or every run failed.
  /// rel_error is NaN when the truth is zero.
  std::optional<SummaryStats> stats;
  /// Solution of the first successful run, kept for profile emission.
  std::optional<SchemeSolution> first_solution;

  bool all_ok() const;
};

/// Runs `repetitions` independent solves with seeds seed + r. Repetitions run on up
/// to DBR_THREADS workers (default: hardware concurrency). Failed runs are recorded
/// in their report and excluded from the statistics.
ExperimentResult run_experiment(const ExperimentConfig& config, Scheme scheme);

/// run_experiment for every configured scheme, sharing seeds.
std::vector<ExperimentResult> run_experiments(const ExperimentConfig& config);

/// Number of workers allowed by DBR_THREADS (at least 1).
std::size_t worker_limit();

/// Writes runs.csv and summary.csv into `dir`. In deterministic mode the seconds
/// column is written as zero so repeated invocations are byte-identical.
void emit_csv(const std::vector<ExperimentResult>& results, const ExperimentConfig& config,
              const std::filesystem::path& dir);

std::string format_fixed(double value);

/// One-coordinate slice through x0: coordinate 0 varies over [lo, hi], others stay at x0.
std::vector<std::vector<double>> profile_grid(const ProblemSpec& problem, double lo, double hi, std::size_t count);

/// Default slice range: x0_1 +- 3 |sigma_11(0, x0)| sqrt(T).
std::pair<double, double> default_profile_range(const ProblemSpec& problem);

struct ProfileFile {
  std::filesystem::path path;
  double requested_time = 0.0;
  std::size_t node = 0;
  double node_time = 0.0;
};

/// Writes profile_t{t}.csv (columns x, u_true, u_est) using the networks of the grid
/// node nearest to t; u_true is evaluated at that node's time.
ProfileFile emit_profile(const SchemeSolution& solution, double t, const std::vector<std::vector<double>>& x_grid,
                         const std::filesystem::path& dir);

}  // namespace dbr
