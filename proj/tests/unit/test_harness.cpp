#include "dbr/harness.hpp"

#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

using namespace dbr;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("dbr_harness_" + name);
  fs::remove_all(dir);
  return dir;
}

std::string slurp(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::vector<std::vector<std::string>> read_csv(const fs::path& file) {
  std::ifstream in(file);
  std::vector<std::vector<std::string>> rows;
  for (std::string line; std::getline(in, line);) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

std::string error_of(const std::string& text) {
  try {
    parse_config(text);
  } catch (const Error& e) {
    return e.what();
  }
  return {};
}

ExperimentConfig tiny_config(const std::string& problem, std::size_t d) {
  ExperimentConfig c;
  c.problem = problem;
  c.d = d;
  c.steps = 3;
  c.samples = 200;
  c.branches = 8;
  c.batch = 50;
  c.iterations = 30;
  c.learning_rate = 5e-3;
  c.hidden = {6, 6};
  c.repetitions = 2;
  return c;
}

}  // namespace

TEST_CASE("minimal config takes the defaults") {
  const ExperimentConfig c = parse_config(R"({"problem": "example1", "d": 10})");
  CHECK(c.horizon == 1.0);
  CHECK(c.steps == 10);
  CHECK(c.samples == 2000);
  CHECK(c.branches == 64);
  CHECK(c.batch == 400);
  CHECK(c.iterations == 1500);
  CHECK(c.learning_rate == 5e-4);
  CHECK(c.repetitions == 10);
  CHECK(c.adam.beta1 == 0.9);
  CHECK(c.adam.beta2 == 0.999);
  CHECK(c.adam.epsilon == 1e-8);
  CHECK(c.schemes == std::vector<Scheme>{Scheme::dbr});
  CHECK(c.hidden == std::vector<std::size_t>{120, 120});
  CHECK(parse_config(R"({"problem": "example2", "d": 8})").hidden == std::vector<std::size_t>{18, 18});
}

TEST_CASE("config round trip") {
  const std::string text = R"({"problem": "american_put", "d": 1, "N": 50, "scheme": ["rdbr"], "spot": 38,
                               "profile_times": [0, 0.5], "profile_range": [20, 60], "scale_inputs": true})";
  const ExperimentConfig c = parse_config(text);
  CHECK(c.put.spot == 38.0);
  CHECK(c.profile_range->second == 60.0);
  const std::string once = serialize_config(c);
  CHECK(parse_config(once) == c);
  CHECK(serialize_config(parse_config(once)) == once);

  ExperimentConfig two = tiny_config("example1", 3);
  two.schemes = {Scheme::dbr, Scheme::dbdp1};
  CHECK(parse_config(serialize_config(two)) == two);
}

TEST_CASE("config errors name the key") {
  CHECK(error_of(R"({"problem": "example1", "d": 2, "M": 100, "batch": 400})").find("'batch'") != std::string::npos);
  CHECK(error_of(R"({"problem": "example1", "d": 2, "bogus": 1})").find("'bogus'") != std::string::npos);
  CHECK(error_of(R"({"problem": "example1"})").find("'d'") != std::string::npos);
  CHECK(error_of(R"({"problem": "example1", "d": "ten"})").find("'d'") != std::string::npos);
  CHECK(error_of(R"({"problem": "example1", "d": 2, "learning_rate": -1})").find("'learning_rate'") !=
        std::string::npos);
  CHECK(error_of(R"({"problem": "example1", "d": 2, "scheme": "dbdp2"})").find("'scheme'") != std::string::npos);
  CHECK(error_of(R"({"problem": "example1", "d": 2, "scheme": "rdbr"})").find("'scheme'") != std::string::npos);
  CHECK(error_of(R"({"problem": "american_put", "d": 2})").find("'d'") != std::string::npos);
  CHECK(error_of(R"({"problem": "heat", "d": 2})").find("'problem'") != std::string::npos);
  CHECK(error_of(R"({"problem": "example1", "d": 2, "profile_times": [2]})").find("'profile_times'") !=
        std::string::npos);
  CHECK(error_of(R"({"problem": "example1", "d": 2, "hidden": [10, 0]})").find("'hidden'") != std::string::npos);
  CHECK_FALSE(error_of("[1, 2]").empty());
  CHECK_FALSE(error_of("{not json").empty());
}

TEST_CASE("full-scale budget") {
  ExperimentConfig c = parse_config(R"({"problem": "example1", "d": 100})");
  apply_paper_budget(c);
  CHECK(c.samples == 10000);
  CHECK(c.iterations == 6000);
  ExperimentConfig e = parse_config(R"({"problem": "example2", "d": 8, "batch": 100})");
  apply_paper_budget(e);
  CHECK(e.iterations == 3000);
  CHECK(e.batch == 400);
}

TEST_CASE("train config mirrors the experiment config") {
  ExperimentConfig c = tiny_config("example1", 2);
  c.warm_start = true;
  const TrainConfig t = build_train_config(c);
  CHECK(t.samples == 200);
  CHECK(t.branches == 8);
  CHECK(t.batch == 50);
  CHECK(t.iterations == 30);
  CHECK(t.hidden == std::vector<std::size_t>{6, 6});
  CHECK(t.warm_start);
}

TEST_CASE("csv formatting") {
  CHECK(format_fixed(0.5) == "0.500000");
  CHECK(format_fixed(-1e-9) == "0.000000");
  CHECK(format_fixed(std::nan("")) == "nan");
  CHECK(format_fixed(-0.0176971) == "-0.017697");
}

TEST_CASE("emit_csv writes both files") {
  ExperimentConfig c = tiny_config("example1", 10);
  ExperimentResult res;
  res.scheme = Scheme::dbr;
  res.truth = 0.5;
  for (std::size_t r = 0; r < 3; ++r) {
    RunReport rep;
    rep.run = r;
    rep.seed = 1 + r;
    rep.estimate = 0.5 + 0.01 * static_cast<double>(r);
    rep.seconds = 1.5;
    res.reports.push_back(rep);
  }
  const std::vector<double> est{0.5, 0.51, 0.52};
  res.stats = summarize(est, 0.5);
  const fs::path dir = scratch_dir("emit");
  emit_csv({res}, c, dir);

  const auto runs = read_csv(dir / "runs.csv");
  REQUIRE(runs.size() == 4);
  CHECK(slurp(dir / "runs.csv").rfind("scheme,problem,d,N,run,seed,u_true,u_hat,abs_err,seconds\n", 0) == 0);
  CHECK(runs[1] == std::vector<std::string>{"dbr", "example1", "10", "3", "0", "1", "0.500000", "0.500000",
                                            "0.000000", "1.500000"});
  const auto summary = read_csv(dir / "summary.csv");
  REQUIRE(summary.size() == 2);
  CHECK(slurp(dir / "summary.csv").rfind("scheme,problem,d,N,u_true,mean,std,mae,rel_err\n", 0) == 0);
  CHECK(summary[1] == std::vector<std::string>{"dbr", "example1", "10", "3", "0.500000", "0.510000", "0.010000",
                                               "0.010000", "0.020000"});

  c.deterministic = true;
  emit_csv({res}, c, dir);
  CHECK(read_csv(dir / "runs.csv")[1].back() == "0.000000");

  const fs::path blocker = scratch_dir("blocker");
  std::ofstream(blocker) << "file";
  CHECK_THROWS_AS(emit_csv({res}, c, blocker / "sub"), Error);
  fs::remove(blocker);
}

TEST_CASE("single repetition") {
  ExperimentConfig c = tiny_config("linear_toy", 2);
  c.repetitions = 1;
  const ExperimentResult toy = run_experiment(c, Scheme::dbr);
  REQUIRE(toy.reports.size() == 1);
  REQUIRE(toy.stats.has_value());
  CHECK(toy.stats->std_dev == 0.0);
  CHECK(toy.stats->mae == doctest::Approx(std::abs(toy.reports[0].estimate)));
  CHECK(std::isnan(toy.stats->rel_error));

  ExperimentConfig e = tiny_config("example1", 1);
  e.repetitions = 1;
  const ExperimentResult one = run_experiment(e, Scheme::dbr);
  REQUIRE(one.stats.has_value());
  CHECK(one.stats->std_dev == 0.0);
  CHECK(one.stats->rel_error == doctest::Approx(std::abs(0.5 - one.reports[0].estimate) / 0.5));
}

TEST_CASE("runs and summary agree") {
  ExperimentConfig c = tiny_config("example1", 2);
  c.repetitions = 4;
  c.schemes = {Scheme::dbr, Scheme::dbdp1};
  const auto results = run_experiments(c);
  const fs::path dir = scratch_dir("agree");
  emit_csv(results, c, dir);
  const auto runs = read_csv(dir / "runs.csv");
  const auto summary = read_csv(dir / "summary.csv");
  REQUIRE(runs.size() == 9);
  REQUIRE(summary.size() == 3);
  for (std::size_t s = 0; s < 2; ++s) {
    std::vector<double> est;
    for (std::size_t r = 1; r < runs.size(); ++r) {
      if (runs[r][0] == summary[s + 1][0]) est.push_back(std::stod(runs[r][7]));
    }
    REQUIRE(est.size() == 4);
    const SummaryStats stats = summarize(est, 0.5);
    CHECK(std::stod(summary[s + 1][5]) == doctest::Approx(stats.mean).epsilon(1e-5));
    CHECK(std::stod(summary[s + 1][6]) == doctest::Approx(stats.std_dev).epsilon(1e-4));
    CHECK(std::stod(summary[s + 1][7]) == doctest::Approx(stats.mae).epsilon(1e-4));
  }
  // both schemes share seeds
  CHECK(runs[1][5] == runs[5][5]);
  CHECK(runs[4][5] == runs[8][5]);
}

TEST_CASE("deterministic output is byte identical") {
  ExperimentConfig c = tiny_config("example1", 2);
  c.deterministic = true;
  const fs::path a = scratch_dir("det_a"), b = scratch_dir("det_b");
  emit_csv(run_experiments(c), c, a);
  emit_csv(run_experiments(c), c, b);
  CHECK(slurp(a / "runs.csv") == slurp(b / "runs.csv"));
  CHECK(slurp(a / "summary.csv") == slurp(b / "summary.csv"));
}

TEST_CASE("failed runs are recorded") {
  ExperimentConfig c = tiny_config("example2", 1);
  c.learning_rate = 1e6;
  c.iterations = 200;
  const ExperimentResult res = run_experiment(c, Scheme::dbr);
  for (const auto& r : res.reports) {
    if (!r.ok()) CHECK(std::isnan(r.estimate));
  }
  CHECK(res.reports.size() == 2);
}

TEST_CASE("profiles") {
  ExperimentConfig c = tiny_config("example1", 1);
  c.repetitions = 1;
  const ExperimentResult res = run_experiment(c, Scheme::dbr);
  REQUIRE(res.first_solution.has_value());
  const ProblemSpec p = build_problem(c);
  const auto range = default_profile_range(p);
  CHECK(range.first == doctest::Approx(-3.0));
  CHECK(range.second == doctest::Approx(3.0));

  const auto grid = profile_grid(p, -1.0, 1.0, 5);
  const fs::path dir = scratch_dir("profile");
  const ProfileFile end = emit_profile(*res.first_solution, 1.0, grid, dir);
  CHECK(end.node == 3);
  CHECK(end.path.filename() == "profile_t1.csv");
  const auto rows = read_csv(end.path);
  REQUIRE(rows.size() == 6);
  CHECK(rows[0] == std::vector<std::string>{"x", "u_true", "u_est"});
  for (std::size_t k = 1; k < rows.size(); ++k) CHECK(rows[k][1] == rows[k][2]);

  const ProfileFile start = emit_profile(*res.first_solution, 0.0, profile_grid(p, 0.0, 0.0, 1), dir);
  const auto first = read_csv(start.path);
  REQUIRE(first.size() == 2);
  CHECK(first[1][1] == "0.500000");

  const ProfileFile mid = emit_profile(*res.first_solution, 0.4, grid, dir);
  CHECK(mid.node == 1);
  CHECK(mid.node_time == doctest::Approx(1.0 / 3.0));
  CHECK_THROWS_AS(profile_grid(p, 1.0, -1.0, 3), Error);
}

TEST_CASE("worker limit from the environment") {
  ::setenv("DBR_THREADS", "3", 1);
  CHECK(worker_limit() == 3);
  ::setenv("DBR_THREADS", "zero", 1);
  CHECK_THROWS_AS(worker_limit(), Error);
  ::setenv("DBR_THREADS", "0", 1);
  CHECK_THROWS_AS(worker_limit(), Error);
  ::unsetenv("DBR_THREADS");
  CHECK(worker_limit() >= 1);
}
