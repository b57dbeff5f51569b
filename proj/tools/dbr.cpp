// dbr solve --config <path> [--scheme dbr|dbdp1|rdbr] [--seed <u64>] [--reps <n>] [--out <dir>]
//           [--paper-budget] [--deterministic] [--profile-times t1,t2,...]

#include "dbr/harness.hpp"
#include "dbr/paths.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>

namespace {

std::vector<double> parse_times(const std::string& text) {
  std::vector<double> out;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (item.empty()) continue;
    std::size_t used = 0;
    const double t = std::stod(item, &used);
    if (used != item.size()) throw dbr::Error("--profile-times: cannot parse '" + item + "'");
    out.push_back(t);
  }
  return out;
}

void print_result(const dbr::ExperimentResult& res) {
  std::size_t failed = 0;
  for (const auto& r : res.reports) {
    if (r.ok()) {
      std::fprintf(stderr, "[%s] run %zu seed %llu: u_hat = %.6f (%.1f s)\n", std::string(dbr::scheme_name(res.scheme)).c_str(),
                   r.run, static_cast<unsigned long long>(r.seed), r.estimate, r.seconds);
    } else {
      ++failed;
      std::fprintf(stderr, "[%s] run %zu seed %llu FAILED: %s\n", std::string(dbr::scheme_name(res.scheme)).c_str(), r.run,
                   static_cast<unsigned long long>(r.seed), r.error->c_str());
    }
  }
  if (res.stats) {
    std::fprintf(stderr, "[%s] mean %.6f std %.6f mae %.6f rel_err %.4f%%\n", std::string(dbr::scheme_name(res.scheme)).c_str(),
                 res.stats->mean, res.stats->std_dev, res.stats->mae, 100.0 * res.stats->rel_error);
  }
  if (failed > 0) {
    std::fprintf(stderr, "[%s] %zu of %zu runs failed\n", std::string(dbr::scheme_name(res.scheme)).c_str(), failed,
                 res.reports.size());
  }
}

int solve_command(const std::string& config_path, const std::vector<std::string>& schemes,
                  const std::optional<std::uint64_t>& seed, const std::optional<std::size_t>& reps,
                  const std::optional<std::string>& out, bool paper_budget, bool deterministic,
                  const std::optional<std::string>& profile_times) {
  dbr::ExperimentConfig config = dbr::load_config(config_path);
  if (!schemes.empty()) {
    config.schemes.clear();
    for (const auto& s : schemes) config.schemes.push_back(dbr::parse_scheme(s));
  }
  if (seed) config.seed = *seed;
  if (reps) {
    if (*reps == 0) throw dbr::Error("--reps must be >= 1");
    config.repetitions = *reps;
  }
  if (out) config.output_dir = *out;
  if (paper_budget) dbr::apply_paper_budget(config);
  if (deterministic) config.deterministic = true;
  if (profile_times) config.profile_times = parse_times(*profile_times);
  // Re-validate after the overrides.
  config = dbr::parse_config(dbr::serialize_config(config));

  const std::filesystem::path dir = config.output_dir;
  const auto results = dbr::run_experiments(config);
  for (const auto& res : results) print_result(res);
  dbr::emit_csv(results, config, dir);

  if (!config.profile_times.empty()) {
    const dbr::ProblemSpec problem = dbr::build_problem(config);
    const auto range = config.profile_range.value_or(dbr::default_profile_range(problem));
    const auto grid = dbr::profile_grid(problem, range.first, range.second, config.profile_points);
    for (const auto& res : results) {
      if (!res.first_solution) continue;
      const std::filesystem::path sub = results.size() > 1 ? dir / std::string(dbr::scheme_name(res.scheme)) : dir;
      for (double t : config.profile_times) {
        const auto file = dbr::emit_profile(*res.first_solution, t, grid, sub);
        std::fprintf(stderr, "profile t = %g -> node %zu (t = %g): %s\n", t, file.node, file.node_time,
                     file.path.string().c_str());
      }
    }
  }
  if (config.dump_paths) {
    const dbr::ProblemSpec problem = dbr::build_problem(config);
    const dbr::TimeGrid grid(config.horizon, config.steps);
    const auto ensemble = dbr::simulate_forward(problem, grid, config.samples, dbr::RngStream{config.seed, 0});
    dbr::write_paths_csv(ensemble, dir / "paths.csv");
  }

  bool ok = true;
  for (const auto& res : results) ok = ok && res.all_ok();
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Deep backward regression solvers for semilinear parabolic PDEs"};
  app.require_subcommand(1);

  auto* solve = app.add_subcommand("solve", "Run repeated solves from a JSON config and write CSV results");
  std::string config_path;
  std::vector<std::string> schemes;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> reps;
  std::optional<std::string> out;
  std::optional<std::string> profile_times;
  bool paper_budget = false;
  bool deterministic = false;
  solve->add_option("--config", config_path, "Experiment config (flat JSON)")->required()->check(CLI::ExistingFile);
  solve->add_option("--scheme", schemes, "dbr, dbdp1 or rdbr (repeatable)")->delimiter(',');
  solve->add_option("--seed", seed, "Base seed; run r uses seed + r");
  solve->add_option("--reps", reps, "Number of repetitions");
  solve->add_option("--out", out, "Output directory");
  solve->add_flag("--paper-budget", paper_budget, "Use the full-scale sample and iteration budgets");
  solve->add_flag("--deterministic", deterministic, "Byte-identical output for identical inputs");
  solve->add_option("--profile-times", profile_times, "Comma-separated times for solution profiles");

  CLI11_PARSE(app, argc, argv);

  try {
    return solve_command(config_path, schemes, seed, reps, out, paper_budget, deterministic, profile_times);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
}
