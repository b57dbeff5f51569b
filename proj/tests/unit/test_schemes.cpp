#include "dbr/problems.hpp"
#include "dbr/schemes.hpp"

#include <doctest.h>

#include <cmath>

using namespace dbr;

namespace {

// dX = mu dt + sigma dW in one dimension with f = 0 and the given terminal function.
ProblemSpec scalar_problem(double mu, double sigma, double x0, ScalarField g) {
  ProblemSpec p;
  p.id = "scalar";
  p.dim = 1;
  p.x0 = {x0};
  p.drift = [mu](double, std::span<const double>, std::span<double> out) { out[0] = mu; };
  p.diffusion = [sigma](double, std::span<const double>, std::span<double> out) { out[0] = sigma; };
  p.generator = [](double, std::span<const double>, double, std::span<const double>) { return 0.0; };
  p.terminal = std::move(g);
  return p;
}

TrainConfig small_config() {
  TrainConfig c;
  c.samples = 400;
  c.branches = 16;
  c.batch = 100;
  c.iterations = 200;
  c.learning_rate = 1e-2;
  c.hidden = {8, 8};
  return c;
}

Matrix column(std::initializer_list<double> values) {
  Matrix m(static_cast<Eigen::Index>(values.size()), 1);
  Eigen::Index r = 0;
  for (double v : values) m(r++, 0) = v;
  return m;
}

}  // namespace

TEST_CASE("scheme names") {
  CHECK(parse_scheme("dbr") == Scheme::dbr);
  CHECK(parse_scheme("dbdp1") == Scheme::dbdp1);
  CHECK(parse_scheme("rdbr") == Scheme::rdbr);
  CHECK(scheme_name(Scheme::dbdp1) == "dbdp1");
  CHECK_THROWS_AS(parse_scheme("dbdp2"), Error);
}

TEST_CASE("train config validation") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  c.batch = c.samples + 1;
  CHECK_THROWS_AS(c.validate(), Error);
  c = TrainConfig{};
  c.branches = 0;
  CHECK_THROWS_AS(c.validate(), Error);
  c = TrainConfig{};
  c.learning_rate = 0.0;
  CHECK_THROWS_AS(c.validate(), Error);
  c = TrainConfig{};
  c.hidden = {4, 0};
  CHECK_THROWS_AS(c.validate(), Error);
}

TEST_CASE("network inputs prepend the time") {
  Matrix x(2, 2);
  x << 1.0, 2.0, 3.0, 4.0;
  const Matrix in = network_inputs(0.3, x);
  REQUIRE(in.cols() == 3);
  CHECK(in(0, 0) == 0.3);
  CHECK(in(1, 0) == 0.3);
  CHECK(in(1, 2) == 4.0);
}

TEST_CASE("evaluate_y_next") {
  const ProblemSpec toy = linear_toy(1);
  const TimeGrid grid(1.0, 4);
  SchemeSolution sol(Scheme::dbr, toy, grid);
  const Matrix pts = column({-1.0, 0.25, 2.0});
  CHECK(evaluate_y_next(sol, toy, 4, pts) == pts.col(0));
  CHECK_THROWS_AS(evaluate_y_next(sol, toy, 3, pts), Error);  // untrained
  CHECK_THROWS_AS(evaluate_y_next(sol, toy, 0, pts), Error);
  CHECK_THROWS_AS(evaluate_y_next(sol, toy, 5, pts), Error);

  sol.set_networks(3, MlpNetwork({2, 3, 1}), MlpNetwork({2, 3, 1}));
  CHECK(evaluate_y_next(sol, toy, 3, pts).isZero());

  const ProblemSpec put = american_put(36, 40, 0.06, 0.2, 1);
  SchemeSolution reflected(Scheme::rdbr, put, grid);
  reflected.set_networks(3, MlpNetwork({2, 3, 1}), MlpNetwork({2, 3, 1}));
  const Matrix spots = column({30.0, 40.0, 50.0});
  const Vector v = evaluate_y_next(reflected, put, 3, spots);
  CHECK(v(0) == 10.0);
  CHECK(v(1) == 0.0);
  CHECK(v(2) == 0.0);

  CHECK_THROWS_AS(SchemeSolution(Scheme::rdbr, toy, grid), Error);
}

TEST_CASE("step targets of a constant continuation") {
  const ProblemSpec toy = linear_toy(2);
  const TimeGrid grid(1.0, 5);
  const auto e = simulate_forward(toy, grid, 50, RngStream{1, 0});
  const auto b = sample_branches(toy, grid, e, 2, 64, RngStream{1, 0});
  const YEvaluator constant = [](const Matrix& pts) { return Vector::Constant(pts.rows(), 0.75); };
  const StepTargets t = compute_step_targets(toy, grid, 2, e.states[2], b, constant);
  CHECK((t.y_base.array() == 0.75).all());
  REQUIRE(t.z_target.rows() == 50);
  REQUIRE(t.z_target.cols() == 2);
  // z label is 0.75 times the branch-mean increment over h
  for (Eigen::Index m = 0; m < 50; ++m) {
    const Eigen::RowVectorXd mean_dw = b.increments.middleRows(m * 64, 64).colwise().mean();
    CHECK((t.z_target.row(m) - 0.75 * mean_dw / grid.step()).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("step targets do not depend on the thread count") {
  const ProblemSpec p = example1(3);
  const TimeGrid grid(1.0, 5);
  const auto e = simulate_forward(p, grid, 300, RngStream{2, 0});
  const auto b = sample_branches(p, grid, e, 4, 8, RngStream{2, 0});
  const YEvaluator g = [&](const Matrix& pts) {
    Vector out(pts.rows());
    for (Eigen::Index r = 0; r < pts.rows(); ++r) out(r) = p.terminal(std::span<const double>(pts.row(r).data(), 3));
    return out;
  };
  const StepTargets one = compute_step_targets(p, grid, 4, e.states[4], b, g, 1);
  const StepTargets four = compute_step_targets(p, grid, 4, e.states[4], b, g, 4);
  CHECK(one.y_base == four.y_base);
  CHECK(one.z_target == four.z_target);
}

TEST_CASE("Y labels are unbiased for a martingale") {
  const ProblemSpec toy = linear_toy(1);
  const TimeGrid grid(1.0, 10);
  const auto e = simulate_forward(toy, grid, 2000, RngStream{3, 0});
  const auto b = sample_branches(toy, grid, e, 9, 50, RngStream{3, 0});
  const YEvaluator g = [](const Matrix& pts) { return Vector(pts.col(0)); };
  const StepTargets t = compute_step_targets(toy, grid, 9, e.states[9], b, g);
  const Vector diff = t.y_base - e.states[9].col(0);
  const double n = static_cast<double>(diff.size());
  const double mean = diff.mean();
  const double se = std::sqrt((diff.array() - mean).square().sum() / (n - 1.0) / n);
  CHECK(std::abs(mean) < 4.0 * se);
}

TEST_CASE("Z labels are unbiased on the linear toy") {
  const ProblemSpec toy = linear_toy(1);
  const TimeGrid grid(1.0, 10);
  const auto e = simulate_forward(toy, grid, 1000, RngStream{4, 0});
  const auto b = sample_branches(toy, grid, e, 9, 100, RngStream{4, 0});
  const YEvaluator g = [](const Matrix& pts) { return Vector(pts.col(0)); };
  const StepTargets t = compute_step_targets(toy, grid, 9, e.states[9], b, g);
  const double n = static_cast<double>(t.z_target.rows());
  const double mean = t.z_target.mean();
  const double se = std::sqrt((t.z_target.array() - mean).square().sum() / (n - 1.0) / n);
  CHECK(std::abs(mean - 1.0) < 4.0 * se);
}

TEST_CASE("training with zero iterations returns the initial network") {
  TrainConfig c = small_config();
  c.iterations = 0;
  const Matrix inputs = Matrix::Random(400, 2);
  const Matrix targets = Matrix::Ones(400, 1);
  RngStream s{9, 0};
  s.step = 3;
  const TrainedNetwork z = train_z_step(inputs, targets, c, s);
  const MlpNetwork init = init_xavier({2, 8, 8, 1}, s.with(StreamPurpose::init, 3));
  for (std::size_t l = 0; l < init.layers().size(); ++l) {
    CHECK(z.net.layers()[l].weights == init.layers()[l].weights);
  }
  CHECK(z.initial_loss == z.final_loss);
}

TEST_CASE("Z regression onto a constant") {
  TrainConfig c;
  c.hidden = {11, 11};
  c.iterations = 2000;
  const Matrix states = Matrix::Random(2000, 1);
  const Matrix inputs = network_inputs(0.5, states);
  const Matrix targets = Matrix::Constant(2000, 1, 0.5);
  const TrainedNetwork z = train_z_step(inputs, targets, c, RngStream{1, 0});
  const Matrix out = forward_batch(z.net, inputs);
  CHECK((out - targets).cwiseAbs().maxCoeff() <= 0.05);
  CHECK(z.final_loss < z.initial_loss);
}

TEST_CASE("Y regression with a linear driver reaches the implicit fixed point") {
  // f = -r y with constant labels c: y = c - h r y, so y = c / (1 + r h)
  ProblemSpec p = linear_toy(1);
  const double r = 0.06, h = 0.02, c = 1.0;
  p.generator = [r](double, std::span<const double>, double y, std::span<const double>) { return -r * y; };
  TrainConfig cfg = small_config();
  cfg.iterations = 1500;
  const Matrix states = Matrix::Random(400, 1);
  const Matrix inputs = network_inputs(0.0, states);
  const Vector base = Vector::Constant(400, c);
  const Matrix z = Matrix::Zero(400, 1);
  for (bool differentiate : {true, false}) {
    cfg.differentiate_generator = differentiate;
    const YStepData data{inputs, states, base, z, 0.0, h};
    const TrainedNetwork y = train_y_step(data, p, cfg, RngStream{2, 0});
    const Vector out = forward_batch(y.net, inputs).col(0);
    const double target = c / (1.0 + r * h);
    CHECK((out.array() - target).abs().maxCoeff() <= 0.01 * target);
  }
}

TEST_CASE("Y loss with a zero driver is plain regression") {
  const ProblemSpec toy = linear_toy(2);
  const MlpNetwork net = init_xavier({3, 5, 1}, RngStream{3, 0});
  const Matrix states = Matrix::Random(20, 2);
  const Matrix inputs = network_inputs(0.2, states);
  const Vector base = Vector::Random(20);
  const Matrix z = Matrix::Random(20, 2);
  const YStepData data{inputs, states, base, z, 0.2, 0.1};
  const Vector out = forward_batch(net, inputs).col(0);
  CHECK(y_step_loss(net, data, toy) == doctest::Approx((out - base).squaredNorm() / 20.0).epsilon(1e-14));
}

TEST_CASE("cached labels reproduce the loss") {
  const ProblemSpec p = example1(2);
  const TimeGrid grid(1.0, 4);
  const auto e = simulate_forward(p, grid, 100, RngStream{5, 0});
  const auto b = sample_branches(p, grid, e, 3, 16, RngStream{5, 0});
  const YEvaluator g = [&](const Matrix& pts) {
    Vector out(pts.rows());
    for (Eigen::Index r = 0; r < pts.rows(); ++r) out(r) = p.terminal(std::span<const double>(pts.row(r).data(), 2));
    return out;
  };
  const StepTargets cached = compute_step_targets(p, grid, 3, e.states[3], b, g);
  const MlpNetwork y = init_xavier({3, 6, 1}, RngStream{6, 0});
  const MlpNetwork z = init_xavier({3, 6, 2}, RngStream{7, 0});
  const Matrix inputs = network_inputs(grid.node(3), e.states[3]);
  const Matrix z_values = forward_batch(z, inputs);

  const StepTargets fresh = compute_step_targets(p, grid, 3, e.states[3], b, g);
  const YStepData a{inputs, e.states[3], cached.y_base, z_values, grid.node(3), grid.step()};
  const YStepData c{inputs, e.states[3], fresh.y_base, z_values, grid.node(3), grid.step()};
  CHECK(std::abs(y_step_loss(y, a, p) - y_step_loss(y, c, p)) <= 1e-12);
  CHECK(std::abs(z_step_loss(z, inputs, cached.z_target) - z_step_loss(z, inputs, fresh.z_target)) <= 1e-12);
}

TEST_CASE("trained Z loss sits at the label noise floor") {
  const ProblemSpec toy = linear_toy(1);
  const TimeGrid grid(1.0, 10);
  TrainConfig cfg;
  cfg.hidden = {11, 11};
  const auto e = simulate_forward(toy, grid, 2000, RngStream{8, 0});
  const auto b = sample_branches(toy, grid, e, 9, 64, RngStream{8, 0});
  const YEvaluator g = [](const Matrix& pts) { return Vector(pts.col(0)); };
  const StepTargets t = compute_step_targets(toy, grid, 9, e.states[9], b, g);
  // the conditional mean of the Z label is exactly 1 here
  const double floor = (t.z_target.array() - 1.0).square().mean();
  const Matrix inputs = network_inputs(grid.node(9), e.states[9]);
  const TrainedNetwork z = train_z_step(inputs, t.z_target, cfg, RngStream{8, 0});
  CHECK(std::abs(z.final_loss - floor) <= 0.2 * floor);
}

TEST_CASE("one-step DBR returns the branch average") {
  // f = 0, X_1 = X_0 + dW, g(x) = x^2 so Y_0 = E[(x0 + dW)^2]
  const ProblemSpec p = scalar_problem(0.0, 1.0, 0.5, [](std::span<const double> x) { return x[0] * x[0]; });
  const TimeGrid grid(1.0, 1);
  TrainConfig cfg = small_config();
  cfg.batch = cfg.samples;
  cfg.iterations = 1000;
  const SolveResult res = dbr_solve(p, grid, cfg, RngStream{4, 0});
  const auto e = simulate_forward(p, grid, cfg.samples, RngStream{4, 0});
  const auto b = sample_branches(p, grid, e, 0, cfg.branches, RngStream{4, 0});
  double sum = 0.0;
  for (Eigen::Index r = 0; r < b.next_states.rows(); ++r) sum += b.next_states(r, 0) * b.next_states(r, 0);
  const double branch_mean = sum / static_cast<double>(b.next_states.rows());
  CHECK(res.estimate == doctest::Approx(branch_mean).epsilon(0.01));
  CHECK(res.estimate == doctest::Approx(1.25).epsilon(0.1));
}

TEST_CASE("DBDP1 with deterministic dynamics fits the next value") {
  const ProblemSpec p = scalar_problem(1.0, 0.0, 0.0, [](std::span<const double> x) { return 2.0 * x[0]; });
  const TimeGrid grid(1.0, 1);
  TrainConfig cfg = small_config();
  cfg.iterations = 1000;
  const SolveResult res = dbdp1_solve(p, grid, cfg, RngStream{1, 0});
  CHECK(res.estimate == doctest::Approx(2.0).epsilon(0.01));
  CHECK(res.losses[0].y_final < 1e-3 * res.losses[0].y_initial);
}

TEST_CASE("DBDP1 step loss matches its definition") {
  const ProblemSpec p = example2(2);
  const MlpNetwork y = init_xavier({3, 4, 1}, RngStream{1, 0});
  const MlpNetwork z = init_xavier({3, 4, 2}, RngStream{2, 0});
  const Matrix states = Matrix::Random(10, 2);
  const Matrix inputs = network_inputs(0.4, states);
  const Vector next = Vector::Random(10);
  const Matrix dw = 0.3 * Matrix::Random(10, 2);
  const Dbdp1StepData data{inputs, states, next, dw, 0.4, 0.1};
  const Vector yv = forward_batch(y, inputs).col(0);
  const Matrix zv = forward_batch(z, inputs);
  double expected = 0.0;
  for (Eigen::Index m = 0; m < 10; ++m) {
    const double f = p.generator(0.4, std::span<const double>(states.row(m).data(), 2), yv(m),
                                 std::span<const double>(zv.row(m).data(), 2));
    const double r = yv(m) - next(m) - 0.1 * f + zv.row(m).dot(dw.row(m));
    expected += r * r;
  }
  CHECK(dbdp1_loss(y, z, data, p) == doctest::Approx(expected / 10.0).epsilon(1e-13));
}

TEST_CASE("solvers are deterministic and exact at the terminal node") {
  const ProblemSpec p = example1(2);
  const TimeGrid grid(1.0, 3);
  TrainConfig cfg = small_config();
  cfg.iterations = 50;
  const Matrix pts = Matrix::Random(7, 2);
  for (Scheme s : {Scheme::dbr, Scheme::dbdp1}) {
    const SolveResult a = solve(s, p, grid, cfg, RngStream{3, 0});
    const SolveResult b = solve(s, p, grid, cfg, RngStream{3, 0});
    CHECK(a.estimate == b.estimate);
    CHECK(std::isfinite(a.estimate));
    REQUIRE(a.losses.size() == 3);
    const Vector at_t = a.solution.evaluate_y(3, pts);
    for (Eigen::Index r = 0; r < pts.rows(); ++r) {
      CHECK(at_t(r) == p.terminal(std::span<const double>(pts.row(r).data(), 2)));
    }
    for (std::size_t i = 0; i < 3; ++i) CHECK(a.solution.trained(i));
  }
  cfg.threads = 3;
  CHECK(dbr_solve(p, grid, cfg, RngStream{3, 0}).estimate == solve(Scheme::dbr, p, grid, [&] {
          TrainConfig one = cfg;
          one.threads = 1;
          return one;
        }(), RngStream{3, 0}).estimate);
}

TEST_CASE("RDBR with an inactive obstacle reproduces DBR") {
  ProblemSpec p = example1(2);
  p.has_obstacle = true;
  p.obstacle = [](std::span<const double>) { return -1e300; };
  const TimeGrid grid(1.0, 3);
  TrainConfig cfg = small_config();
  cfg.iterations = 100;
  const SolveResult plain = dbr_solve(p, grid, cfg, RngStream{6, 0});
  const SolveResult reflected = rdbr_solve(p, grid, cfg, RngStream{6, 0});
  CHECK(plain.estimate == reflected.estimate);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(plain.losses[i].y_final == reflected.losses[i].y_final);
    CHECK(plain.losses[i].z_final == reflected.losses[i].z_final);
  }
  CHECK_THROWS_AS(rdbr_solve(example1(2), grid, cfg, RngStream{}), Error);
}

TEST_CASE("RDBR output dominates the obstacle") {
  const ProblemSpec put = american_put(36, 40, 0.06, 0.2, 1);
  const TimeGrid grid(1.0, 5);
  TrainConfig cfg = small_config();
  cfg.scale_inputs = true;
  const SolveResult res = rdbr_solve(put, grid, cfg, RngStream{2, 0});
  const Matrix spots = Eigen::VectorXd::LinSpaced(200, 1.0, 120.0);
  for (std::size_t i = 0; i <= 5; ++i) {
    const Vector v = res.solution.evaluate_y(i, spots);
    for (Eigen::Index r = 0; r < spots.rows(); ++r) CHECK(v(r) >= std::max(40.0 - spots(r, 0), 0.0));
  }
  CHECK(res.estimate >= 4.0);
}

TEST_CASE("non-finite generator values abort with context") {
  ProblemSpec p = linear_toy(1);
  p.generator = [](double, std::span<const double>, double, std::span<const double>) { return std::nan(""); };
  const TimeGrid grid(1.0, 2);
  TrainConfig cfg = small_config();
  cfg.iterations = 5;
  try {
    dbr_solve(p, grid, cfg, RngStream{1, 0});
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("step 1") != std::string::npos);
  }
}
