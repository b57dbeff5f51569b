#include "dbr/schemes.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <string>
#include <thread>

namespace dbr {
namespace {

// Outer samples per work unit in the target computation. Fixed so that the
// row blocks handed to the network, and hence every rounding, do not depend
// on the worker count.
constexpr std::size_t kTargetChunk = 128;

constexpr std::uint64_t kZRole = 0;
constexpr std::uint64_t kYRole = 1;

std::string step_label(std::size_t step) { return "step " + std::to_string(step); }

RngStream network_stream(const RngStream& base, std::size_t step, std::uint64_t role) {
  RngStream s = base;
  s.step = step;
  s.substream = role;
  return s;
}

std::vector<std::size_t> layer_sizes(std::size_t in, const std::vector<std::size_t>& hidden, std::size_t out) {
  std::vector<std::size_t> sizes;
  sizes.reserve(hidden.size() + 2);
  sizes.push_back(in);
  sizes.insert(sizes.end(), hidden.begin(), hidden.end());
  sizes.push_back(out);
  return sizes;
}

InputScaling cloud_scaling(const Matrix& inputs) {
  InputScaling s;
  const auto n = static_cast<double>(inputs.rows());
  s.shift = inputs.colwise().mean().transpose();
  s.scale.resize(inputs.cols());
  for (Eigen::Index j = 0; j < inputs.cols(); ++j) {
    const double var = (inputs.col(j).array() - s.shift(j)).square().sum() / n;
    s.scale(j) = var > 1e-24 ? 1.0 / std::sqrt(var) : 1.0;
  }
  return s;
}

MlpNetwork fresh_network(const Matrix& inputs, std::size_t out, const TrainConfig& config, const RngStream& stream,
                         std::optional<MlpNetwork> start) {
  MlpNetwork net = start ? std::move(*start)
                         : init_xavier(layer_sizes(static_cast<std::size_t>(inputs.cols()), config.hidden, out),
                                       stream.with(StreamPurpose::init, stream.step));
  if (net.input_size() != static_cast<std::size_t>(inputs.cols()) || net.output_size() != out) {
    throw Error(step_label(stream.step) + ": starting network has the wrong shape");
  }
  if (config.scale_inputs) {
    net.input_scaling = cloud_scaling(inputs);
  }
  return net;
}

// Reshuffled epochs over 0..M-1, served B indices at a time.
class BatchSampler {
 public:
  BatchSampler(std::size_t samples, std::size_t batch, const RngStream& stream)
      : order_(samples), batch_(batch), engine_(stream.with(StreamPurpose::sgd_batch, stream.step).engine()) {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    cursor_ = samples;
  }

  const std::vector<std::size_t>& next() {
    if (cursor_ + batch_ > order_.size()) {
      std::shuffle(order_.begin(), order_.end(), engine_);
      cursor_ = 0;
    }
    current_.assign(order_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                    order_.begin() + static_cast<std::ptrdiff_t>(cursor_ + batch_));
    cursor_ += batch_;
    return current_;
  }

 private:
  std::vector<std::size_t> order_;
  std::vector<std::size_t> current_;
  std::size_t batch_;
  std::size_t cursor_ = 0;
  std::mt19937_64 engine_;
};

template <typename Rows>
void gather_rows(const Matrix& source, const Rows& rows, Matrix& out) {
  out.resize(static_cast<Eigen::Index>(rows.size()), source.cols());
  for (std::size_t b = 0; b < rows.size(); ++b) {
    out.row(static_cast<Eigen::Index>(b)) = source.row(static_cast<Eigen::Index>(rows[b]));
  }
}

void gather_values(const Vector& source, const std::vector<std::size_t>& rows, Vector& out) {
  out.resize(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t b = 0; b < rows.size(); ++b) {
    out(static_cast<Eigen::Index>(b)) = source(static_cast<Eigen::Index>(rows[b]));
  }
}

std::span<const double> row_span(const Matrix& m, Eigen::Index r) {
  return {m.row(r).data(), static_cast<std::size_t>(m.cols())};
}

void check_finite_loss(double loss, std::size_t step, const char* what) {
  if (!std::isfinite(loss)) {
    throw Error(std::string(what) + " loss became non-finite at " + step_label(step));
  }
}

// f(t_i, X_m, y_m, z_m) for every row, optionally with df/dy.
void generator_values(const ProblemSpec& problem, double t, const Matrix& states, const Vector& y, const Matrix& z,
                      Vector& f, Vector* f_y, Matrix* f_z, std::optional<std::size_t> step,
                      const std::vector<std::size_t>* sample_ids = nullptr) {
  const Eigen::Index n = y.size();
  f.resize(n);
  if (f_y) f_y->resize(n);
  if (f_z) f_z->resize(n, z.cols());
  std::vector<double> dz(static_cast<std::size_t>(z.cols()));
  for (Eigen::Index b = 0; b < n; ++b) {
    const auto x = row_span(states, b);
    const auto zb = row_span(z, b);
    const double value = problem.generator(t, x, y(b), zb);
    if (!std::isfinite(value)) {
      const std::size_t m = sample_ids ? (*sample_ids)[static_cast<std::size_t>(b)] : static_cast<std::size_t>(b);
      throw Error("generator returned a non-finite value at " + (step ? step_label(*step) + ", " : std::string()) +
                  "sample m = " + std::to_string(m));
    }
    f(b) = value;
    if (f_y) {
      (*f_y)(b) = generator_partials(problem, t, x, y(b), zb, dz);
      if (f_z) {
        for (Eigen::Index j = 0; j < z.cols(); ++j) (*f_z)(b, j) = dz[static_cast<std::size_t>(j)];
      }
    }
  }
}

void require_trainable(const TrainConfig& config, const Matrix& inputs) {
  config.validate();
  if (static_cast<std::size_t>(inputs.rows()) < config.batch) {
    throw Error("batch size " + std::to_string(config.batch) + " exceeds the " + std::to_string(inputs.rows()) +
                " available samples");
  }
}

}  // namespace

// ---------------------------------------------------------------------------

std::string_view scheme_name(Scheme scheme) {
  switch (scheme) {
    case Scheme::dbr:
      return "dbr";
    case Scheme::dbdp1:
      return "dbdp1";
    case Scheme::rdbr:
      return "rdbr";
  }
  return "unknown";
}

Scheme parse_scheme(std::string_view name) {
  if (name == "dbr") return Scheme::dbr;
  if (name == "dbdp1") return Scheme::dbdp1;
  if (name == "rdbr") return Scheme::rdbr;
  throw Error("unknown scheme '" + std::string(name) + "' (expected dbr, dbdp1 or rdbr)");
}

void TrainConfig::validate() const {
  if (samples < 1) throw Error("samples (M) must be >= 1");
  if (branches < 1) throw Error("branches (K) must be >= 1");
  if (batch < 1) throw Error("batch must be >= 1");
  if (batch > samples) {
    throw Error("batch (" + std::to_string(batch) + ") must not exceed samples M (" + std::to_string(samples) + ")");
  }
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw Error("learning_rate must be > 0");
  for (std::size_t w : hidden) {
    if (w == 0) throw Error("hidden layer widths must be >= 1");
  }
  if (threads < 1) throw Error("threads must be >= 1");
}

// ---------------------------------------------------------------------------

SchemeSolution::SchemeSolution(Scheme scheme, ProblemSpec problem, TimeGrid grid)
    : scheme_(scheme),
      problem_(std::move(problem)),
      grid_(grid),
      y_nets_(grid.steps()),
      z_nets_(grid.steps()) {
  if (scheme_ == Scheme::rdbr && !problem_.has_obstacle) {
    throw Error("rdbr requires a problem with an obstacle");
  }
}

void SchemeSolution::set_networks(std::size_t step, MlpNetwork y, MlpNetwork z) {
  if (step >= grid_.steps()) {
    throw Error("set_networks: " + step_label(step) + " outside 0.." + std::to_string(grid_.steps() - 1));
  }
  y_nets_[step] = std::move(y);
  z_nets_[step] = std::move(z);
}

bool SchemeSolution::trained(std::size_t step) const { return step < grid_.steps() && y_nets_[step].has_value(); }

const MlpNetwork& SchemeSolution::y_network(std::size_t step) const {
  if (!trained(step)) throw Error("no trained Y network at " + step_label(step));
  return *y_nets_[step];
}

const MlpNetwork& SchemeSolution::z_network(std::size_t step) const {
  if (!trained(step)) throw Error("no trained Z network at " + step_label(step));
  return *z_nets_[step];
}

Vector SchemeSolution::evaluate_y(std::size_t step, const Matrix& points) const {
  if (step > grid_.steps()) {
    throw Error("evaluate_y: " + step_label(step) + " beyond N = " + std::to_string(grid_.steps()));
  }
  if (static_cast<std::size_t>(points.cols()) != problem_.dim) {
    throw Error("evaluate_y: points have " + std::to_string(points.cols()) + " columns, expected " +
                std::to_string(problem_.dim));
  }
  Vector out(points.rows());
  if (step == grid_.steps()) {
    for (Eigen::Index r = 0; r < points.rows(); ++r) out(r) = problem_.terminal(row_span(points, r));
    return out;
  }
  const Matrix values = forward_batch(y_network(step), network_inputs(grid_.node(step), points));
  out = values.col(0);
  if (reflected()) {
    for (Eigen::Index r = 0; r < points.rows(); ++r) {
      out(r) = std::max(out(r), problem_.obstacle_at(row_span(points, r)));
    }
  }
  return out;
}

Matrix SchemeSolution::evaluate_z(std::size_t step, const Matrix& points) const {
  if (step >= grid_.steps()) {
    throw Error("evaluate_z: networks exist only for steps 0.." + std::to_string(grid_.steps() - 1));
  }
  return forward_batch(z_network(step), network_inputs(grid_.node(step), points));
}

// ---------------------------------------------------------------------------

Matrix network_inputs(double t, const Matrix& states) {
  Matrix inputs(states.rows(), states.cols() + 1);
  inputs.col(0).setConstant(t);
  inputs.rightCols(states.cols()) = states;
  return inputs;
}

Vector evaluate_y_next(const SchemeSolution& solution, const ProblemSpec& problem, std::size_t i_next,
                       const Matrix& points) {
  const std::size_t n = solution.grid().steps();
  if (i_next < 1 || i_next > n) {
    throw Error("evaluate_y_next: i_next = " + std::to_string(i_next) + " outside 1.." + std::to_string(n));
  }
  Vector out(points.rows());
  if (i_next == n) {
    for (Eigen::Index r = 0; r < points.rows(); ++r) out(r) = problem.terminal(row_span(points, r));
  } else {
    out = forward_batch(solution.y_network(i_next), network_inputs(solution.grid().node(i_next), points)).col(0);
  }
  if (solution.reflected()) {
    for (Eigen::Index r = 0; r < points.rows(); ++r) {
      out(r) = std::max(out(r), problem.obstacle_at(row_span(points, r)));
    }
  }
  return out;
}

StepTargets compute_step_targets(const ProblemSpec& problem, const TimeGrid& grid, std::size_t step,
                                 const Matrix& outer_states, const BranchBatch& branches, const YEvaluator& y_next,
                                 std::size_t threads) {
  const double h = grid.step();
  if (!(h > 0.0)) {
    throw Error("compute_step_targets: step size h must be > 0");
  }
  const std::size_t k = branches.branches;
  const auto samples = static_cast<std::size_t>(outer_states.rows());
  if (k == 0) throw Error("compute_step_targets: K must be >= 1");
  if (branches.step != step) {
    throw Error("compute_step_targets: branches were sampled at step " + std::to_string(branches.step) +
                ", not " + std::to_string(step));
  }
  if (static_cast<std::size_t>(branches.next_states.rows()) != samples * k) {
    throw Error("compute_step_targets: branch batch does not match the outer ensemble");
  }
  const auto d = static_cast<Eigen::Index>(problem.dim);

  StepTargets targets;
  targets.y_base.resize(static_cast<Eigen::Index>(samples));
  targets.z_target.resize(static_cast<Eigen::Index>(samples), d);

  const std::size_t chunks = (samples + kTargetChunk - 1) / kTargetChunk;
  std::atomic<std::size_t> next_chunk{0};
  std::vector<std::string> failures(chunks);

  auto work = [&] {
    for (std::size_t c = next_chunk++; c < chunks; c = next_chunk++) {
      try {
        const std::size_t m0 = c * kTargetChunk;
        const std::size_t m1 = std::min(samples, m0 + kTargetChunk);
        const auto first_row = static_cast<Eigen::Index>(m0 * k);
        const auto rows = static_cast<Eigen::Index>((m1 - m0) * k);
        const Matrix points = branches.next_states.middleRows(first_row, rows);
        const Vector values = y_next(points);
        for (std::size_t m = m0; m < m1; ++m) {
          const auto base = static_cast<Eigen::Index>((m - m0) * k);
          const auto me = static_cast<Eigen::Index>(m);
          double y_sum = 0.0;
          Eigen::RowVectorXd z_sum = Eigen::RowVectorXd::Zero(d);
          for (Eigen::Index b = 0; b < static_cast<Eigen::Index>(k); ++b) {
            const double y = values(base + b);
            y_sum += y;
            z_sum += y * branches.increments.row(first_row + base + b);
          }
          targets.y_base(me) = y_sum / static_cast<double>(k);
          targets.z_target.row(me) = z_sum / (static_cast<double>(k) * h);
          if (!std::isfinite(targets.y_base(me)) || !targets.z_target.row(me).allFinite()) {
            throw Error("non-finite regression label at " + step_label(step) + ", sample m = " + std::to_string(m));
          }
        }
      } catch (const std::exception& e) {
        failures[c] = e.what();
      }
    }
  };

  const std::size_t workers = std::max<std::size_t>(1, std::min(threads, chunks));
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  for (const auto& f : failures) {
    if (!f.empty()) throw Error(f);
  }
  return targets;
}

// ---------------------------------------------------------------------------

double z_step_loss(const MlpNetwork& net, const Matrix& inputs, const Matrix& targets) {
  const Matrix out = forward_batch(net, inputs);
  if (out.rows() != targets.rows() || out.cols() != targets.cols()) {
    throw Error("z_step_loss: targets do not match the network output shape");
  }
  return (out - targets).squaredNorm() / static_cast<double>(inputs.rows());
}

namespace {

double y_loss(const MlpNetwork& net, const YStepData& data, const ProblemSpec& problem,
              std::optional<std::size_t> step) {
  const Vector y = forward_batch(net, data.inputs).col(0);
  Vector f;
  generator_values(problem, data.t, data.states, y, data.z_values, f, nullptr, nullptr, step);
  return (y - data.y_base - data.h * f).squaredNorm() / static_cast<double>(y.size());
}

double joint_loss(const MlpNetwork& y_net, const MlpNetwork& z_net, const Dbdp1StepData& data,
                  const ProblemSpec& problem, std::optional<std::size_t> step) {
  const Vector y = forward_batch(y_net, data.inputs).col(0);
  const Matrix z = forward_batch(z_net, data.inputs);
  Vector f;
  generator_values(problem, data.t, data.states, y, z, f, nullptr, nullptr, step);
  const Vector noise = z.cwiseProduct(data.increments).rowwise().sum();
  return (y - data.next_values - data.h * f + noise).squaredNorm() / static_cast<double>(y.size());
}

}  // namespace

double y_step_loss(const MlpNetwork& net, const YStepData& data, const ProblemSpec& problem) {
  return y_loss(net, data, problem, std::nullopt);
}

TrainedNetwork train_z_step(const Matrix& inputs, const Matrix& targets, const TrainConfig& config,
                            const RngStream& stream, std::optional<MlpNetwork> start) {
  require_trainable(config, inputs);
  if (targets.rows() != inputs.rows()) throw Error("train_z_step: one target row per input row is required");
  const std::size_t step = stream.step;
  TrainedNetwork result{fresh_network(inputs, static_cast<std::size_t>(targets.cols()), config, stream,
                                      std::move(start))};
  result.initial_loss = z_step_loss(result.net, inputs, targets);
  check_finite_loss(result.initial_loss, step, "Z");

  AdamState adam(result.net, config.adam);
  BatchSampler sampler(static_cast<std::size_t>(inputs.rows()), config.batch, stream);
  ForwardTrace trace;
  GradBundle grads;
  Matrix batch_in;
  Matrix batch_target;
  const double scale = 2.0 / static_cast<double>(config.batch);
  for (std::size_t it = 0; it < config.iterations; ++it) {
    const auto& rows = sampler.next();
    gather_rows(inputs, rows, batch_in);
    gather_rows(targets, rows, batch_target);
    const Matrix& out = forward_traced(result.net, batch_in, trace);
    const Matrix residual = out - batch_target;
    if (!residual.allFinite()) check_finite_loss(residual.squaredNorm(), step, "Z");
    backward_traced(result.net, trace, scale * residual, grads);
    adam_update(adam, result.net, grads, config.learning_rate);
  }
  result.final_loss = z_step_loss(result.net, inputs, targets);
  check_finite_loss(result.final_loss, step, "Z");
  return result;
}

TrainedNetwork train_y_step(const YStepData& data, const ProblemSpec& problem, const TrainConfig& config,
                            const RngStream& stream, std::optional<MlpNetwork> start) {
  require_trainable(config, data.inputs);
  const Eigen::Index samples = data.inputs.rows();
  if (data.states.rows() != samples || data.y_base.size() != samples || data.z_values.rows() != samples) {
    throw Error("train_y_step: inputs, states, labels and Z values must have one row per sample");
  }
  const std::size_t step = stream.step;
  TrainedNetwork result{fresh_network(data.inputs, 1, config, stream, std::move(start))};
  result.initial_loss = y_loss(result.net, data, problem, step);
  check_finite_loss(result.initial_loss, step, "Y");

  AdamState adam(result.net, config.adam);
  BatchSampler sampler(static_cast<std::size_t>(samples), config.batch, stream);
  ForwardTrace trace;
  GradBundle grads;
  Matrix batch_in;
  Matrix batch_states;
  Matrix batch_z;
  Vector batch_base;
  Vector f;
  Vector f_y;
  Matrix out_grad(static_cast<Eigen::Index>(config.batch), 1);
  const double scale = 2.0 / static_cast<double>(config.batch);
  for (std::size_t it = 0; it < config.iterations; ++it) {
    const auto& rows = sampler.next();
    gather_rows(data.inputs, rows, batch_in);
    gather_rows(data.states, rows, batch_states);
    gather_rows(data.z_values, rows, batch_z);
    gather_values(data.y_base, rows, batch_base);
    const Vector y = forward_traced(result.net, batch_in, trace).col(0);
    generator_values(problem, data.t, batch_states, y, batch_z, f,
                     config.differentiate_generator ? &f_y : nullptr, nullptr, step, &rows);
    const Vector r = y - batch_base - data.h * f;
    if (config.differentiate_generator) {
      out_grad.col(0) = scale * r.cwiseProduct((1.0 - data.h * f_y.array()).matrix());
    } else {
      out_grad.col(0) = scale * r;
    }
    backward_traced(result.net, trace, out_grad, grads);
    adam_update(adam, result.net, grads, config.learning_rate);
  }
  result.final_loss = y_loss(result.net, data, problem, step);
  check_finite_loss(result.final_loss, step, "Y");
  return result;
}

// ---------------------------------------------------------------------------

double dbdp1_loss(const MlpNetwork& y_net, const MlpNetwork& z_net, const Dbdp1StepData& data,
                  const ProblemSpec& problem) {
  return joint_loss(y_net, z_net, data, problem, std::nullopt);
}

Dbdp1StepResult dbdp1_step(const Dbdp1StepData& data, const ProblemSpec& problem, const TrainConfig& config,
                           const RngStream& stream, std::optional<MlpNetwork> y_start,
                           std::optional<MlpNetwork> z_start) {
  require_trainable(config, data.inputs);
  const Eigen::Index samples = data.inputs.rows();
  if (data.states.rows() != samples || data.next_values.size() != samples || data.increments.rows() != samples) {
    throw Error("dbdp1_step: inputs, states, next values and increments must have one row per sample");
  }
  const std::size_t step = stream.step;
  const auto d = static_cast<std::size_t>(data.states.cols());
  Dbdp1StepResult result{fresh_network(data.inputs, 1, config, network_stream(stream, step, kYRole), std::move(y_start)),
                         fresh_network(data.inputs, d, config, network_stream(stream, step, kZRole), std::move(z_start))};
  result.initial_loss = joint_loss(result.y, result.z, data, problem, step);
  check_finite_loss(result.initial_loss, step, "DBDP1");

  AdamState adam_y(result.y, config.adam);
  AdamState adam_z(result.z, config.adam);
  BatchSampler sampler(static_cast<std::size_t>(samples), config.batch, network_stream(stream, step, kYRole));
  ForwardTrace trace_y;
  ForwardTrace trace_z;
  GradBundle grads_y;
  GradBundle grads_z;
  Matrix batch_in;
  Matrix batch_states;
  Matrix batch_dw;
  Vector batch_next;
  Vector f;
  Vector f_y;
  Matrix f_z;
  Matrix grad_y(static_cast<Eigen::Index>(config.batch), 1);
  const double scale = 2.0 / static_cast<double>(config.batch);
  for (std::size_t it = 0; it < config.iterations; ++it) {
    const auto& rows = sampler.next();
    gather_rows(data.inputs, rows, batch_in);
    gather_rows(data.states, rows, batch_states);
    gather_rows(data.increments, rows, batch_dw);
    gather_values(data.next_values, rows, batch_next);
    const Vector y = forward_traced(result.y, batch_in, trace_y).col(0);
    const Matrix& z = forward_traced(result.z, batch_in, trace_z);
    generator_values(problem, data.t, batch_states, y, z, f, &f_y, &f_z, step, &rows);
    const Vector r = y - batch_next - data.h * f + z.cwiseProduct(batch_dw).rowwise().sum();
    const Vector sr = scale * r;
    if (config.differentiate_generator) {
      grad_y.col(0) = sr.cwiseProduct((1.0 - data.h * f_y.array()).matrix());
    } else {
      grad_y.col(0) = sr;
    }
    const Matrix grad_z = (batch_dw - data.h * f_z).array().colwise() * sr.array();
    backward_traced(result.y, trace_y, grad_y, grads_y);
    backward_traced(result.z, trace_z, grad_z, grads_z);
    adam_update(adam_y, result.y, grads_y, config.learning_rate);
    adam_update(adam_z, result.z, grads_z, config.learning_rate);
  }
  result.final_loss = joint_loss(result.y, result.z, data, problem, step);
  check_finite_loss(result.final_loss, step, "DBDP1");
  return result;
}

// ---------------------------------------------------------------------------

namespace {

Matrix start_point(const ProblemSpec& problem) {
  Matrix x0(1, static_cast<Eigen::Index>(problem.dim));
  for (std::size_t a = 0; a < problem.dim; ++a) x0(0, static_cast<Eigen::Index>(a)) = problem.x0[a];
  return x0;
}

std::vector<std::size_t> hidden_or_default(const TrainConfig& config, std::size_t d) {
  return config.hidden.empty() ? std::vector<std::size_t>{d + 10, d + 10} : config.hidden;
}

// Step-i outer ensemble: the run's single ensemble, or a fresh one per step when resampling.
class OuterSource {
 public:
  OuterSource(const ProblemSpec& problem, const TimeGrid& grid, const TrainConfig& config, const RngStream& stream)
      : problem_(problem), grid_(grid), config_(config), stream_(stream) {
    if (!config.resample_outer) {
      shared_ = simulate_forward(problem, grid, config.samples, stream);
    }
  }

  const PathEnsemble& at(std::size_t step) {
    if (!config_.resample_outer) return shared_;
    RngStream s = stream_;
    s.substream = 1000 + step;
    shared_ = simulate_forward(problem_, grid_, config_.samples, s);
    return shared_;
  }

 private:
  const ProblemSpec& problem_;
  const TimeGrid& grid_;
  const TrainConfig& config_;
  RngStream stream_;
  PathEnsemble shared_;
};

SolveResult branching_solve(Scheme scheme, const ProblemSpec& problem, const TimeGrid& grid,
                            const TrainConfig& base_config, const RngStream& stream) {
  TrainConfig config = base_config;
  config.hidden = hidden_or_default(config, problem.dim);
  config.validate();
  const std::size_t n = grid.steps();
  const double h = grid.step();

  SolveResult result{SchemeSolution(scheme, problem, grid), 0.0, {}};
  result.losses.resize(n);
  OuterSource outer(problem, grid, config, stream);

  for (std::size_t i = n; i-- > 0;) {
    const PathEnsemble& ensemble = outer.at(i);
    const Matrix& states = ensemble.states[i];
    const BranchBatch branches = sample_branches(problem, grid, ensemble, i, config.branches, stream);
    const YEvaluator y_next = [&](const Matrix& points) {
      return evaluate_y_next(result.solution, problem, i + 1, points);
    };
    const StepTargets targets = compute_step_targets(problem, grid, i, states, branches, y_next, config.threads);
    const Matrix inputs = network_inputs(grid.node(i), states);

    std::optional<MlpNetwork> z_start;
    std::optional<MlpNetwork> y_start;
    if (config.warm_start && i + 1 < n) {
      z_start = result.solution.z_network(i + 1);
      y_start = result.solution.y_network(i + 1);
    }
    TrainedNetwork z = train_z_step(inputs, targets.z_target, config, network_stream(stream, i, kZRole), z_start);
    const Matrix z_values = forward_batch(z.net, inputs);
    const YStepData y_data{inputs, states, targets.y_base, z_values, grid.node(i), h};
    TrainedNetwork y = train_y_step(y_data, problem, config, network_stream(stream, i, kYRole), y_start);

    result.losses[i] = StepLosses{y.initial_loss, y.final_loss, z.initial_loss, z.final_loss};
    result.solution.set_networks(i, std::move(y.net), std::move(z.net));
  }
  result.estimate = result.solution.evaluate_y(0, start_point(problem))(0);
  return result;
}

}  // namespace

SolveResult dbr_solve(const ProblemSpec& problem, const TimeGrid& grid, const TrainConfig& config,
                      const RngStream& stream) {
  return branching_solve(Scheme::dbr, problem, grid, config, stream);
}

SolveResult rdbr_solve(const ProblemSpec& problem, const TimeGrid& grid, const TrainConfig& config,
                       const RngStream& stream) {
  if (!problem.has_obstacle) {
    throw Error("rdbr_solve: problem '" + problem.id + "' has no obstacle");
  }
  return branching_solve(Scheme::rdbr, problem, grid, config, stream);
}

SolveResult dbdp1_solve(const ProblemSpec& problem, const TimeGrid& grid, const TrainConfig& base_config,
                        const RngStream& stream) {
  TrainConfig config = base_config;
  config.hidden = hidden_or_default(config, problem.dim);
  config.validate();
  const std::size_t n = grid.steps();
  const double h = grid.step();

  SolveResult result{SchemeSolution(Scheme::dbdp1, problem, grid), 0.0, {}};
  result.losses.resize(n);
  OuterSource outer(problem, grid, config, stream);

  for (std::size_t i = n; i-- > 0;) {
    const PathEnsemble& ensemble = outer.at(i);
    const Matrix& states = ensemble.states[i];
    const Vector next_values = evaluate_y_next(result.solution, problem, i + 1, ensemble.states[i + 1]);
    const Matrix inputs = network_inputs(grid.node(i), states);
    const Dbdp1StepData data{inputs, states, next_values, ensemble.increments[i], grid.node(i), h};

    std::optional<MlpNetwork> y_start;
    std::optional<MlpNetwork> z_start;
    if (config.warm_start && i + 1 < n) {
      y_start = result.solution.y_network(i + 1);
      z_start = result.solution.z_network(i + 1);
    }
    Dbdp1StepResult step = dbdp1_step(data, problem, config, network_stream(stream, i, kYRole), y_start, z_start);
    result.losses[i] = StepLosses{step.initial_loss, step.final_loss, step.initial_loss, step.final_loss};
    result.solution.set_networks(i, std::move(step.y), std::move(step.z));
  }
  result.estimate = result.solution.evaluate_y(0, start_point(problem))(0);
  return result;
}

SolveResult solve(Scheme scheme, const ProblemSpec& problem, const TimeGrid& grid, const TrainConfig& config,
                  const RngStream& stream) {
  switch (scheme) {
    case Scheme::dbr:
      return dbr_solve(problem, grid, config, stream);
    case Scheme::dbdp1:
      return dbdp1_solve(problem, grid, config, stream);
    case Scheme::rdbr:
      return rdbr_solve(problem, grid, config, stream);
  }
  throw Error("unknown scheme");
}

}  // namespace dbr
