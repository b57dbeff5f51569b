#pragma once

#include "dbr/core.hpp"

#include <cstdint>
#include <filesystem>
#include <random>
#include <vector>

namespace dbr {

enum class StreamPurpose : std::uint32_t {
  outer = 1,
  branch = 2,
  sgd_batch = 3,
  init = 4,
  probe = 5,
};

/// Identifies one logical random stream. Every (seed, run, step, purpose,
/// substream, lane) tuple maps to its own engine, so work split across lanes
/// draws the same numbers regardless of scheduling.
struct RngStream {
  std::uint64_t seed = 0;
  std::uint64_t run = 0;
  std::uint64_t step = 0;
  StreamPurpose purpose = StreamPurpose::outer;
  /// Separates consumers that share (run, step, purpose), e.g. the Y and Z networks of one step.
  std::uint64_t substream = 0;

  RngStream with(StreamPurpose p, std::uint64_t s) const { return RngStream{seed, run, s, p, substream}; }

  std::mt19937_64 engine(std::uint64_t lane = 0) const;
};

/// Outer Monte Carlo trajectories of the Euler-Maruyama forward scheme.
struct PathEnsemble {
  /// states[i] is M x d, i = 0..N.
  std::vector<Matrix> states;
  /// increments[i] is M x d, i = 0..N-1.
  std::vector<Matrix> increments;

  std::size_t samples() const { return states.empty() ? 0 : static_cast<std::size_t>(states.front().rows()); }
  std::size_t dim() const { return states.empty() ? 0 : static_cast<std::size_t>(states.front().cols()); }
};

/// K fresh one-step transitions out of every outer state at step i.
/// Row m * K + k holds branch k of outer sample m.
struct BranchBatch {
  std::size_t step = 0;
  std::size_t branches = 0;
  Matrix increments;
  Matrix next_states;
};

/// `count` rows of independent N(0, h) draws in ℝ^dim, all from lane 0 of `stream`.
Matrix gaussian_increments(const RngStream& stream, std::size_t count, std::size_t dim, double h);

/// X_{i+1} = X_i + mu(t_i, X_i) h + sigma(t_i, X_i) dW_i for M paths started at x0.
/// Increments for path m at step i come from lane m of stream.with(outer, i).
PathEnsemble simulate_forward(const ProblemSpec& problem, const TimeGrid& grid, std::size_t samples,
                              const RngStream& stream);

/// Branches from the step-i states of `ensemble`; draws come from stream.with(branch, i), lane m.
BranchBatch sample_branches(const ProblemSpec& problem, const TimeGrid& grid, const PathEnsemble& ensemble,
                            std::size_t step, std::size_t branches, const RngStream& stream);

/// Debug dump: columns m, i, x_1..x_d.
void write_paths_csv(const PathEnsemble& ensemble, const std::filesystem::path& file);

}  // namespace dbr
