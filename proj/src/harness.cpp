#include "dbr/harness.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

namespace dbr {
namespace {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

const std::set<std::string>& known_keys() {
  static const std::set<std::string> keys{
      "problem",       "d",          "T",          "N",          "M",
      "K",             "batch",      "iterations", "learning_rate", "hidden",
      "scheme",        "repetitions", "seed",      "deterministic", "output_dir",
      "adam_beta1",    "adam_beta2", "adam_epsilon", "differentiate_generator", "warm_start",
      "resample_outer", "scale_inputs", "spot",    "strike",     "rate",
      "volatility",    "profile_times", "profile_range", "profile_points", "dump_paths"};
  return keys;
}

[[noreturn]] void key_error(const std::string& key, const std::string& what) {
  throw Error("config key '" + key + "': " + what);
}

std::uint64_t get_unsigned(const json& j, const std::string& key) {
  const json& v = j.at(key);
  if (v.is_number_unsigned()) return v.get<std::uint64_t>();
  if (v.is_number_integer()) key_error(key, "must be a non-negative integer");
  key_error(key, std::string("expected an integer, got ") + v.type_name());
}

std::size_t get_count(const json& j, const std::string& key) {
  const std::uint64_t v = get_unsigned(j, key);
  if (v < 1) key_error(key, "must be >= 1");
  return static_cast<std::size_t>(v);
}

double get_real(const json& j, const std::string& key) {
  const json& v = j.at(key);
  if (!v.is_number()) key_error(key, std::string("expected a number, got ") + v.type_name());
  const double x = v.get<double>();
  if (!std::isfinite(x)) key_error(key, "must be finite");
  return x;
}

double get_positive(const json& j, const std::string& key) {
  const double x = get_real(j, key);
  if (!(x > 0.0)) key_error(key, "must be > 0");
  return x;
}

bool get_bool(const json& j, const std::string& key) {
  const json& v = j.at(key);
  if (!v.is_boolean()) key_error(key, std::string("expected true or false, got ") + v.type_name());
  return v.get<bool>();
}

std::string get_string(const json& j, const std::string& key) {
  const json& v = j.at(key);
  if (!v.is_string()) key_error(key, std::string("expected a string, got ") + v.type_name());
  return v.get<std::string>();
}

std::vector<Scheme> get_schemes(const json& j) {
  const json& v = j.at("scheme");
  std::vector<Scheme> out;
  auto add = [&](const json& item) {
    if (!item.is_string()) key_error("scheme", "entries must be strings");
    try {
      const Scheme s = parse_scheme(item.get<std::string>());
      if (std::find(out.begin(), out.end(), s) != out.end()) key_error("scheme", "duplicate entry");
      out.push_back(s);
    } catch (const Error& e) {
      if (std::string(e.what()).rfind("config key", 0) == 0) throw;
      key_error("scheme", e.what());
    }
  };
  if (v.is_array()) {
    for (const auto& item : v) add(item);
  } else {
    add(v);
  }
  if (out.empty()) key_error("scheme", "at least one scheme is required");
  return out;
}

std::vector<double> get_real_list(const json& j, const std::string& key) {
  const json& v = j.at(key);
  if (!v.is_array()) key_error(key, "expected an array of numbers");
  std::vector<double> out;
  for (const auto& item : v) {
    if (!item.is_number() || !std::isfinite(item.get<double>())) key_error(key, "entries must be finite numbers");
    out.push_back(item.get<double>());
  }
  return out;
}

std::string format_time_tag(double t) {
  char buffer[64];
  std::snprintf(buffer, sizeof buffer, "%g", t);
  return buffer;
}

std::optional<std::size_t> env_threads() {
  const char* raw = std::getenv("DBR_THREADS");
  if (!raw || !*raw) return std::nullopt;
  char* end = nullptr;
  const unsigned long v = std::strtoul(raw, &end, 10);
  if (end == raw || *end != '\0' || v == 0) {
    throw Error("DBR_THREADS must be a positive integer, got '" + std::string(raw) + "'");
  }
  return static_cast<std::size_t>(v);
}

void ensure_directory(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir)) {
    throw Error("cannot create output directory " + dir.string() + (ec ? ": " + ec.message() : ""));
  }
}

std::ofstream open_output(const std::filesystem::path& file) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw Error("cannot open " + file.string() + " for writing");
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------

ExperimentConfig parse_config(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw Error(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw Error("config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (!known_keys().contains(key)) key_error(key, "unknown key");
  }
  for (const char* required : {"problem", "d"}) {
    if (!j.contains(required)) key_error(required, "missing required key");
  }

  ExperimentConfig c;
  c.problem = get_string(j, "problem");
  c.d = get_count(j, "d");
  if (j.contains("T")) c.horizon = get_positive(j, "T");
  if (j.contains("N")) c.steps = get_count(j, "N");
  if (j.contains("M")) c.samples = get_count(j, "M");
  if (j.contains("K")) c.branches = get_count(j, "K");
  if (j.contains("batch")) c.batch = get_count(j, "batch");
  if (j.contains("iterations")) c.iterations = static_cast<std::size_t>(get_unsigned(j, "iterations"));
  if (j.contains("learning_rate")) c.learning_rate = get_positive(j, "learning_rate");
  if (j.contains("hidden")) {
    const json& v = j.at("hidden");
    if (!v.is_array()) key_error("hidden", "expected an array of layer widths");
    for (const auto& item : v) {
      if (!item.is_number_unsigned() || item.get<std::uint64_t>() == 0) {
        key_error("hidden", "widths must be positive integers");
      }
      c.hidden.push_back(static_cast<std::size_t>(item.get<std::uint64_t>()));
    }
  }
  if (j.contains("scheme")) c.schemes = get_schemes(j);
  if (j.contains("repetitions")) c.repetitions = get_count(j, "repetitions");
  if (j.contains("seed")) c.seed = get_unsigned(j, "seed");
  if (j.contains("deterministic")) c.deterministic = get_bool(j, "deterministic");
  if (j.contains("output_dir")) c.output_dir = get_string(j, "output_dir");
  if (j.contains("adam_beta1")) c.adam.beta1 = get_real(j, "adam_beta1");
  if (j.contains("adam_beta2")) c.adam.beta2 = get_real(j, "adam_beta2");
  if (j.contains("adam_epsilon")) c.adam.epsilon = get_positive(j, "adam_epsilon");
  if (!(c.adam.beta1 >= 0.0 && c.adam.beta1 < 1.0)) key_error("adam_beta1", "must lie in [0, 1)");
  if (!(c.adam.beta2 >= 0.0 && c.adam.beta2 < 1.0)) key_error("adam_beta2", "must lie in [0, 1)");
  if (j.contains("differentiate_generator")) c.differentiate_generator = get_bool(j, "differentiate_generator");
  if (j.contains("warm_start")) c.warm_start = get_bool(j, "warm_start");
  if (j.contains("resample_outer")) c.resample_outer = get_bool(j, "resample_outer");
  if (j.contains("scale_inputs")) c.scale_inputs = get_bool(j, "scale_inputs");
  if (j.contains("spot")) c.put.spot = get_positive(j, "spot");
  if (j.contains("strike")) c.put.strike = get_positive(j, "strike");
  if (j.contains("rate")) c.put.rate = get_real(j, "rate");
  if (j.contains("volatility")) {
    c.put.volatility = get_real(j, "volatility");
    if (c.put.volatility < 0.0) key_error("volatility", "must be >= 0");
  }
  if (j.contains("profile_times")) {
    c.profile_times = get_real_list(j, "profile_times");
    for (double t : c.profile_times) {
      if (t < 0.0 || t > c.horizon) key_error("profile_times", "times must lie in [0, T]");
    }
  }
  if (j.contains("profile_range")) {
    const auto r = get_real_list(j, "profile_range");
    if (r.size() != 2 || !(r[0] <= r[1])) key_error("profile_range", "expected [lo, hi] with lo <= hi");
    c.profile_range = std::make_pair(r[0], r[1]);
  }
  if (j.contains("profile_points")) c.profile_points = get_count(j, "profile_points");
  if (j.contains("dump_paths")) c.dump_paths = get_bool(j, "dump_paths");

  if (c.batch > c.samples) {
    key_error("batch", "batch (" + std::to_string(c.batch) + ") must not exceed M (" + std::to_string(c.samples) +
                           ")");
  }
  if (c.hidden.empty()) c.hidden = resolved_hidden(c);
  if (c.problem == "american_put" && c.d != 1) key_error("d", "american_put is one-dimensional");
  if (c.problem != "example1" && c.problem != "example2" && c.problem != "linear_toy" &&
      c.problem != "american_put") {
    key_error("problem", "unknown problem '" + c.problem + "'");
  }
  for (Scheme s : c.schemes) {
    if (s == Scheme::rdbr && c.problem != "american_put") {
      key_error("scheme", "rdbr needs an obstacle problem (american_put)");
    }
  }
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw Error("cannot read config " + file.string());
  std::ostringstream text;
  text << in.rdbuf();
  return parse_config(text.str());
}

std::string serialize_config(const ExperimentConfig& c) {
  ordered_json j;
  j["problem"] = c.problem;
  j["d"] = c.d;
  j["T"] = c.horizon;
  j["N"] = c.steps;
  j["M"] = c.samples;
  j["K"] = c.branches;
  j["batch"] = c.batch;
  j["iterations"] = c.iterations;
  j["learning_rate"] = c.learning_rate;
  j["hidden"] = resolved_hidden(c);
  if (c.schemes.size() == 1) {
    j["scheme"] = std::string(scheme_name(c.schemes.front()));
  } else {
    ordered_json list = ordered_json::array();
    for (Scheme s : c.schemes) list.push_back(std::string(scheme_name(s)));
    j["scheme"] = list;
  }
  j["repetitions"] = c.repetitions;
  j["seed"] = c.seed;
  j["deterministic"] = c.deterministic;
  j["output_dir"] = c.output_dir;
  j["adam_beta1"] = c.adam.beta1;
  j["adam_beta2"] = c.adam.beta2;
  j["adam_epsilon"] = c.adam.epsilon;
  j["differentiate_generator"] = c.differentiate_generator;
  j["warm_start"] = c.warm_start;
  j["resample_outer"] = c.resample_outer;
  j["scale_inputs"] = c.scale_inputs;
  j["spot"] = c.put.spot;
  j["strike"] = c.put.strike;
  j["rate"] = c.put.rate;
  j["volatility"] = c.put.volatility;
  j["profile_times"] = c.profile_times;
  if (c.profile_range) j["profile_range"] = {c.profile_range->first, c.profile_range->second};
  j["profile_points"] = c.profile_points;
  j["dump_paths"] = c.dump_paths;
  return j.dump(2) + "\n";
}

std::vector<std::size_t> resolved_hidden(const ExperimentConfig& c) {
  if (!c.hidden.empty()) return c.hidden;
  const std::size_t width = c.problem == "example1" ? c.d + 110 : c.d + 10;
  return {width, width};
}

void apply_paper_budget(ExperimentConfig& c) {
  if (c.problem == "example1") {
    c.samples = std::max<std::size_t>(c.samples, 10000);
    c.iterations = 6000;
  } else if (c.problem == "example2") {
    c.iterations = 3000;
    c.batch = 400;
  }
  if (c.batch > c.samples) c.samples = c.batch;
}

ProblemSpec build_problem(const ExperimentConfig& c) { return make_problem(c.problem, c.d, c.horizon, c.put); }

TrainConfig build_train_config(const ExperimentConfig& c) {
  TrainConfig t;
  t.samples = c.samples;
  t.branches = c.branches;
  t.batch = c.batch;
  t.iterations = c.iterations;
  t.learning_rate = c.learning_rate;
  t.hidden = resolved_hidden(c);
  t.seed = c.seed;
  t.adam = c.adam;
  t.differentiate_generator = c.differentiate_generator;
  t.warm_start = c.warm_start;
  t.resample_outer = c.resample_outer;
  t.scale_inputs = c.scale_inputs;
  t.validate();
  return t;
}

// ---------------------------------------------------------------------------

bool ExperimentResult::all_ok() const {
  return std::all_of(reports.begin(), reports.end(), [](const RunReport& r) { return r.ok(); });
}

std::size_t worker_limit() {
  const std::size_t hw = std::max<std::size_t>(1, std::thread::hardware_concurrency());
  return env_threads().value_or(hw);
}

ExperimentResult run_experiment(const ExperimentConfig& config, Scheme scheme) {
  const ProblemSpec problem = build_problem(config);
  const TimeGrid grid(config.horizon, config.steps);
  const std::size_t reps = config.repetitions;
  const std::size_t workers = std::max<std::size_t>(1, std::min(worker_limit(), reps));
  TrainConfig train = build_train_config(config);
  // Spare workers go to the branch-label computation when repetitions cannot use them.
  train.threads = std::max<std::size_t>(1, worker_limit() / workers);

  ExperimentResult result;
  result.scheme = scheme;
  result.truth = reference_solution(problem);
  result.reports.resize(reps);
  std::vector<std::optional<SchemeSolution>> solutions(reps);

  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t r = next++; r < reps; r = next++) {
      RunReport& report = result.reports[r];
      report.run = r;
      report.seed = config.seed + r;
      const auto start = std::chrono::steady_clock::now();
      try {
        const RngStream stream{report.seed, 0};
        SolveResult solved = solve(scheme, problem, grid, train, stream);
        report.estimate = solved.estimate;
        report.losses = std::move(solved.losses);
        if (!std::isfinite(report.estimate)) throw Error("estimate is not finite");
        if (r == 0 || !config.profile_times.empty()) solutions[r] = std::move(solved.solution);
      } catch (const std::exception& e) {
        report.estimate = std::nan("");
        report.error = e.what();
      }
      report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();

  std::vector<double> estimates;
  for (std::size_t r = 0; r < reps; ++r) {
    if (!result.reports[r].ok()) continue;
    estimates.push_back(result.reports[r].estimate);
    if (!result.first_solution && solutions[r]) result.first_solution = std::move(solutions[r]);
  }
  if (result.truth && !estimates.empty()) {
    if (*result.truth != 0.0) {
      result.stats = summarize(estimates, *result.truth);
    } else {
      // Relative error is undefined at a zero solution; the other columns still are.
      SummaryStats s = summarize(estimates, 1.0);
      s.mae = 0.0;
      for (double v : estimates) s.mae += std::abs(v);
      s.mae /= static_cast<double>(estimates.size());
      s.rel_error = std::nan("");
      result.stats = s;
    }
  }
  return result;
}

std::vector<ExperimentResult> run_experiments(const ExperimentConfig& config) {
  std::vector<ExperimentResult> out;
  for (Scheme s : config.schemes) out.push_back(run_experiment(config, s));
  return out;
}

// ---------------------------------------------------------------------------

std::string format_fixed(double value) {
  if (!std::isfinite(value)) return "nan";
  char buffer[64];
  std::snprintf(buffer, sizeof buffer, "%.6f", value);
  if (std::string_view(buffer) == "-0.000000") return "0.000000";
  return buffer;
}

void emit_csv(const std::vector<ExperimentResult>& results, const ExperimentConfig& config,
              const std::filesystem::path& dir) {
  if (results.empty()) throw Error("emit_csv: no results to write");
  ensure_directory(dir);

  const std::string prefix_tail = "," + config.problem + "," + std::to_string(config.d) + "," +
                                  std::to_string(config.steps) + ",";
  auto runs = open_output(dir / "runs.csv");
  runs << "scheme,problem,d,N,run,seed,u_true,u_hat,abs_err,seconds\n";
  for (const auto& res : results) {
    const double truth = res.truth.value_or(std::nan(""));
    for (const auto& r : res.reports) {
      const double err = std::abs(truth - r.estimate);
      runs << scheme_name(res.scheme) << prefix_tail << r.run << ',' << r.seed << ',' << format_fixed(truth) << ','
           << format_fixed(r.estimate) << ',' << format_fixed(err) << ','
           << format_fixed(config.deterministic ? 0.0 : r.seconds) << '\n';
    }
  }
  if (!runs) throw Error("failed writing runs.csv");

  auto summary = open_output(dir / "summary.csv");
  summary << "scheme,problem,d,N,u_true,mean,std,mae,rel_err\n";
  for (const auto& res : results) {
    summary << scheme_name(res.scheme) << prefix_tail << format_fixed(res.truth.value_or(std::nan("")));
    if (res.stats) {
      summary << ',' << format_fixed(res.stats->mean) << ',' << format_fixed(res.stats->std_dev) << ','
              << format_fixed(res.stats->mae) << ',' << format_fixed(res.stats->rel_error) << '\n';
    } else {
      // Without a truth only the spread of the estimates is meaningful.
      std::vector<double> ok;
      for (const auto& r : res.reports) {
        if (r.ok()) ok.push_back(r.estimate);
      }
      if (ok.empty()) {
        summary << ",nan,nan,nan,nan\n";
      } else {
        const SummaryStats s = summarize(ok, 1.0);
        summary << ',' << format_fixed(s.mean) << ',' << format_fixed(s.std_dev) << ",nan,nan\n";
      }
    }
  }
  if (!summary) throw Error("failed writing summary.csv");
}

// ---------------------------------------------------------------------------

std::vector<std::vector<double>> profile_grid(const ProblemSpec& problem, double lo, double hi, std::size_t count) {
  if (count == 0) throw Error("profile_grid: at least one point is required");
  if (!(lo <= hi)) throw Error("profile_grid: lo must not exceed hi");
  std::vector<std::vector<double>> grid(count, problem.x0);
  for (std::size_t k = 0; k < count; ++k) {
    grid[k][0] = count == 1 ? lo : lo + (hi - lo) * static_cast<double>(k) / static_cast<double>(count - 1);
  }
  return grid;
}

std::pair<double, double> default_profile_range(const ProblemSpec& problem) {
  std::vector<double> sigma(problem.dim * problem.dim);
  problem.diffusion(0.0, problem.x0, sigma);
  const double spread = 3.0 * std::max(std::abs(sigma[0]), 1e-3) * std::sqrt(problem.horizon);
  return {problem.x0[0] - spread, problem.x0[0] + spread};
}

ProfileFile emit_profile(const SchemeSolution& solution, double t, const std::vector<std::vector<double>>& x_grid,
                         const std::filesystem::path& dir) {
  if (x_grid.empty()) throw Error("emit_profile: empty evaluation grid");
  const ProblemSpec& problem = solution.problem();
  const std::size_t d = problem.dim;
  ensure_directory(dir);

  ProfileFile file;
  file.requested_time = t;
  file.node = solution.grid().nearest_node(t);
  file.node_time = solution.grid().node(file.node);
  file.path = dir / ("profile_t" + format_time_tag(t) + ".csv");

  Matrix points(static_cast<Eigen::Index>(x_grid.size()), static_cast<Eigen::Index>(d));
  for (std::size_t k = 0; k < x_grid.size(); ++k) {
    if (x_grid[k].size() != d) throw Error("emit_profile: grid point has the wrong dimension");
    for (std::size_t a = 0; a < d; ++a) points(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(a)) = x_grid[k][a];
  }
  const Vector estimate = solution.evaluate_y(file.node, points);

  auto out = open_output(file.path);
  out << "x,u_true,u_est\n";
  for (std::size_t k = 0; k < x_grid.size(); ++k) {
    const double truth = problem.analytic ? problem.analytic->u(file.node_time, x_grid[k]) : std::nan("");
    out << format_fixed(x_grid[k][0]) << ',' << format_fixed(truth) << ','
        << format_fixed(estimate(static_cast<Eigen::Index>(k))) << '\n';
  }
  if (!out) throw Error("failed writing " + file.path.string());
  return file;
}

}  // namespace dbr
