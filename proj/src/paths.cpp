#include "dbr/paths.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>

namespace dbr {
namespace {

std::uint32_t low_word(std::uint64_t v) { return static_cast<std::uint32_t>(v & 0xffffffffu); }
std::uint32_t high_word(std::uint64_t v) { return static_cast<std::uint32_t>(v >> 32); }

void fill_normal(std::mt19937_64& engine, double scale, double* out, std::size_t count) {
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t j = 0; j < count; ++j) {
    out[j] = scale * normal(engine);
  }
}

bool all_finite(std::span<const double> values) {
  for (double v : values) {
    if (!std::isfinite(v)) {
      return false;
    }
  }
  return true;
}

// X_next = x + mu h + sigma dW for one row, with sigma row-major d x d.
void euler_step(std::span<const double> x, std::span<const double> mu, std::span<const double> sigma,
                double h, const double* dw, double* next) {
  const std::size_t d = x.size();
  for (std::size_t a = 0; a < d; ++a) {
    double noise = 0.0;
    const double* row = sigma.data() + a * d;
    for (std::size_t b = 0; b < d; ++b) {
      noise += row[b] * dw[b];
    }
    next[a] = x[a] + mu[a] * h + noise;
  }
}

std::string sample_label(std::size_t m, std::size_t i) {
  return "(m = " + std::to_string(m) + ", i = " + std::to_string(i) + ")";
}

}  // namespace

std::mt19937_64 RngStream::engine(std::uint64_t lane) const {
  std::seed_seq seq{low_word(seed), high_word(seed), low_word(run), high_word(run), low_word(step),
                    high_word(step), static_cast<std::uint32_t>(purpose), low_word(substream), high_word(substream),
                    low_word(lane), high_word(lane)};
  return std::mt19937_64(seq);
}

Matrix gaussian_increments(const RngStream& stream, std::size_t count, std::size_t dim, double h) {
  if (!(h >= 0.0)) {
    throw Error("gaussian increments: variance h must be >= 0, got " + std::to_string(h));
  }
  Matrix out(count, dim);
  auto engine = stream.engine(0);
  fill_normal(engine, std::sqrt(h), out.data(), count * dim);
  return out;
}

PathEnsemble simulate_forward(const ProblemSpec& problem, const TimeGrid& grid, std::size_t samples,
                              const RngStream& stream) {
  if (samples == 0) {
    throw Error("simulate_forward: at least one sample path is required");
  }
  const std::size_t d = problem.dim;
  if (problem.x0.size() != d) {
    throw Error("simulate_forward: x0 has " + std::to_string(problem.x0.size()) + " entries, expected " +
                std::to_string(d));
  }
  const std::size_t n_steps = grid.steps();
  const double h = grid.step();
  const double sqrt_h = std::sqrt(h);

  PathEnsemble ensemble;
  ensemble.states.assign(n_steps + 1, Matrix(samples, d));
  ensemble.increments.assign(n_steps, Matrix(samples, d));
  for (std::size_t m = 0; m < samples; ++m) {
    for (std::size_t a = 0; a < d; ++a) {
      ensemble.states[0](m, a) = problem.x0[a];
    }
  }

  std::vector<double> mu(d);
  std::vector<double> sigma(d * d);
  for (std::size_t i = 0; i < n_steps; ++i) {
    const double t = grid.node(i);
    const RngStream step_stream = stream.with(StreamPurpose::outer, i);
    const Matrix& current = ensemble.states[i];
    Matrix& next = ensemble.states[i + 1];
    Matrix& dw = ensemble.increments[i];
    for (std::size_t m = 0; m < samples; ++m) {
      auto engine = step_stream.engine(m);
      fill_normal(engine, sqrt_h, dw.row(m).data(), d);

      std::span<const double> x(current.row(m).data(), d);
      problem.drift(t, x, mu);
      problem.diffusion(t, x, sigma);
      if (!all_finite(mu) || !all_finite(sigma)) {
        throw Error("simulate_forward: non-finite coefficient at " + sample_label(m, i));
      }
      euler_step(x, mu, sigma, h, dw.row(m).data(), next.row(m).data());
      if (!all_finite(std::span<const double>(next.row(m).data(), d))) {
        throw Error("simulate_forward: non-finite state at " + sample_label(m, i + 1));
      }
    }
  }
  return ensemble;
}

BranchBatch sample_branches(const ProblemSpec& problem, const TimeGrid& grid, const PathEnsemble& ensemble,
                            std::size_t step, std::size_t branches, const RngStream& stream) {
  if (step >= grid.steps()) {
    throw Error("sample_branches: step " + std::to_string(step) + " outside 0.." +
                std::to_string(grid.steps() - 1));
  }
  if (step >= ensemble.states.size()) {
    throw Error("sample_branches: ensemble has no states at step " + std::to_string(step));
  }
  if (branches == 0) {
    throw Error("sample_branches: K must be >= 1");
  }
  const std::size_t d = problem.dim;
  const std::size_t samples = ensemble.samples();
  const double t = grid.node(step);
  const double h = grid.step();
  const double sqrt_h = std::sqrt(h);
  const RngStream step_stream = stream.with(StreamPurpose::branch, step);

  BranchBatch batch;
  batch.step = step;
  batch.branches = branches;
  batch.increments.resize(samples * branches, d);
  batch.next_states.resize(samples * branches, d);

  std::vector<double> mu(d);
  std::vector<double> sigma(d * d);
  const Matrix& current = ensemble.states[step];
  for (std::size_t m = 0; m < samples; ++m) {
    std::span<const double> x(current.row(m).data(), d);
    problem.drift(t, x, mu);
    problem.diffusion(t, x, sigma);
    if (!all_finite(mu) || !all_finite(sigma)) {
      throw Error("sample_branches: non-finite coefficient at " + sample_label(m, step));
    }
    auto engine = step_stream.engine(m);
    const std::size_t first = m * branches;
    fill_normal(engine, sqrt_h, batch.increments.row(first).data(), branches * d);
    for (std::size_t k = 0; k < branches; ++k) {
      euler_step(x, mu, sigma, h, batch.increments.row(first + k).data(), batch.next_states.row(first + k).data());
    }
  }
  return batch;
}

void write_paths_csv(const PathEnsemble& ensemble, const std::filesystem::path& file) {
  std::ofstream out(file);
  if (!out) {
    throw Error("cannot open " + file.string() + " for writing");
  }
  const std::size_t d = ensemble.dim();
  out << "m,i";
  for (std::size_t a = 0; a < d; ++a) {
    out << ",x_" << (a + 1);
  }
  out << '\n';
  char buffer[64];
  for (std::size_t m = 0; m < ensemble.samples(); ++m) {
    for (std::size_t i = 0; i < ensemble.states.size(); ++i) {
      out << m << ',' << i;
      for (std::size_t a = 0; a < d; ++a) {
        std::snprintf(buffer, sizeof buffer, ",%.17g", ensemble.states[i](m, a));
        out << buffer;
      }
      out << '\n';
    }
  }
  if (!out) {
    throw Error("failed writing " + file.string());
  }
}

}  // namespace dbr
