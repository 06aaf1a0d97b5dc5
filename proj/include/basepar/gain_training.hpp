// Offline tuning of the implicit base controller.
//
// Each metered cell is treated in isolation (leaving flows unrestricted). For a
// sampled operating point (n, q, d, o_in) the target gain is the theta in
// [0, theta_max] that brings the expected next-step density closest to
// rho_crit when the metering follows ALINEA with that theta. A small network
// is then regressed onto those targets.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <vector>

#include "basepar/actm.hpp"
#include "basepar/mlp.hpp"
#include "basepar/optimizer.hpp"

namespace basepar {

struct Range {
    double lo = 0.0;
    double hi = 1.0;
};

struct SampleRanges {
    Range n{0.0, 80.0};
    Range q{0.0, 20.0};
    Range d{0.0, 4.0};
    Range upstream{0.0, 8.0};
};

/// One isolated-cell gain problem.
struct GainTargetProblem {
    CellParams cell;
    int lanes = 1;
    double rho_crit = 0.0335;
    double mu_prev = 0.0;
    double theta_max = 1.0;
    MlpInput inputs{};  // n, q, d, o_in
};

struct GainSolution {
    double theta = 0.0;
    double error = 0.0;          // |rho_crit - rho_exp| at theta
    bool bound_active = false;   // the target needed more than theta_max
};

/// |rho_crit - n_exp / L| for a given gain, with unrestricted leaving flows.
inline double expected_density_error(const GainTargetProblem& p, double theta) {
    const auto& [n, q, d, o_in] = p.inputs;
    const CellParams& c = p.cell;
    const double lane_length = c.length_m * p.lanes;
    const double rho = n / lane_length;
    const double mu = std::max(p.mu_prev + theta * (p.rho_crit - rho), 0.0);
    const double e = std::max(0.0, std::min({q + d, c.xi * (c.capacity - n), mu}));
    const double leaving = (n + c.blend_alpha * e) * c.eta_moving;  // o + s without downstream limits
    const double n_exp = n + o_in + e - leaving;
    return std::abs(p.rho_crit - n_exp / lane_length);
}

/// Exact minimizer. n_exp is affine in e, e is a clamp of mu, and mu is a
/// clamped affine function of theta, so the error is quasi-convex in theta and
/// the smallest minimizer follows from the required inflow. Ties go to the
/// smallest theta.
inline GainSolution solve_gain_target(const GainTargetProblem& p) {
    const auto& [n, q, d, o_in] = p.inputs;
    const CellParams& c = p.cell;
    const double lane_length = c.length_m * p.lanes;
    const double slope = p.rho_crit - n / lane_length;  // d mu / d theta before the clamp
    const double cap = std::max(0.0, std::min(q + d, c.xi * (c.capacity - n)));
    const double gain_e = 1.0 - c.blend_alpha * c.eta_moving;  // d n_exp / d e
    const double base = n * (1.0 - c.eta_moving) + o_in;

    GainSolution sol;
    auto finish = [&](double theta) {
        sol.theta = theta;
        sol.error = expected_density_error(p, theta);
        return sol;
    };
    if (slope == 0.0 || cap == 0.0 || gain_e <= 0.0) return finish(0.0);

    const double e_wanted = (p.rho_crit * lane_length - base) / gain_e;
    const double e_target = std::clamp(e_wanted, 0.0, cap);
    const double e_now = std::min(cap, std::max(p.mu_prev, 0.0));
    if (e_now == e_target) return finish(0.0);

    // Smallest theta whose metering reaches e_target (for e_target == cap any
    // mu >= cap works, for e_target == 0 any mu <= 0).
    const double theta = (e_target - p.mu_prev) / slope;
    if (!(theta > 0.0)) return finish(0.0);
    if (theta > p.theta_max) {
        sol.bound_active = true;
        return finish(p.theta_max);
    }
    return finish(theta);
}

struct TrainingSample {
    MlpInput inputs{};
    double target = 0.0;
    bool bound_active = false;
};

/// Samples for one metered cell, drawn uniformly from `ranges`.
inline std::vector<TrainingSample> generate_cell_samples(const NetworkParams& params, std::size_t cell,
                                                         double mu_prev, std::size_t count,
                                                         const SampleRanges& ranges, double theta_max,
                                                         std::mt19937_64& rng) {
    if (count < 1) throw std::invalid_argument("sample count must be >= 1");
    if (cell >= params.size() || !params.cells[cell].metered)
        throw TopologyError("training cell is not a metered cell");
    auto draw = [&rng](Range r) { return std::uniform_real_distribution<double>(r.lo, r.hi)(rng); };
    std::vector<TrainingSample> out;
    out.reserve(count);
    for (std::size_t k = 0; k < count; ++k) {
        GainTargetProblem p;
        p.cell = params.cells[cell];
        p.lanes = params.lanes;
        p.rho_crit = params.rho_crit;
        p.mu_prev = mu_prev;
        p.theta_max = theta_max;
        p.inputs = {draw(ranges.n), draw(ranges.q), draw(ranges.d), draw(ranges.upstream)};
        const GainSolution sol = solve_gain_target(p);
        out.push_back({p.inputs, sol.theta, sol.bound_active});
    }
    return out;
}

struct CellDataset {
    std::size_t cell = 0;
    std::vector<TrainingSample> samples;
};

/// `count` samples for every metered cell; mu_prev holds one value per metered cell.
inline std::vector<CellDataset> generate_training_data(const NetworkParams& params,
                                                       std::span<const double> mu_prev, std::size_t count,
                                                       const SampleRanges& ranges, double theta_max,
                                                       std::uint64_t seed) {
    const auto metered = params.metered_cells();
    if (mu_prev.size() != metered.size()) throw TopologyError("one mu_prev per metered cell is required");
    std::mt19937_64 rng(seed);
    std::vector<CellDataset> out;
    for (std::size_t r = 0; r < metered.size(); ++r)
        out.push_back({metered[r], generate_cell_samples(params, metered[r], mu_prev[r], count, ranges,
                                                         theta_max, rng)});
    return out;
}

struct TrainConfig {
    std::size_t train_count = 400;  // the remainder is held out for validation
    int restarts = 6;
    int max_iterations = 3000;
    std::uint64_t seed = 1;
    std::string activation = "logistic";
    double weight_decay = 0.0;   // L2 penalty on the output weights
    bool decay_output_only = true;
    // Deployed gains are clamped to [0, theta_max]; validation scores the clamped output.
    double theta_max = 1.0;
};

struct TrainResult {
    MlpParams params;
    double train_rmse = 0.0;
    double validation_rmse = 0.0;
    double target_std = 0.0;              // over the validation split
    std::vector<double> loss_history;     // training objective after each accepted iterate
};

class TrainingDivergence : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace detail {

inline double mean_squared_error(const MlpParams& p, std::span<const TrainingSample> data,
                                 double clamp_hi = std::numeric_limits<double>::infinity()) {
    double sum = 0.0;
    for (const auto& s : data) {
        double y = mlp_forward(p, s.inputs);
        if (std::isfinite(clamp_hi)) y = std::clamp(y, 0.0, clamp_hi);
        const double r = y - s.target;
        sum += r * r;
    }
    return sum / static_cast<double>(data.size());
}

inline double stddev(std::span<const TrainingSample> data) {
    double mean = 0.0;
    for (const auto& s : data) mean += s.target;
    mean /= static_cast<double>(data.size());
    double var = 0.0;
    for (const auto& s : data) var += (s.target - mean) * (s.target - mean);
    return std::sqrt(var / static_cast<double>(data.size()));
}

}  // namespace detail

/// Least-squares regression of the network onto the samples with a
/// quasi-Newton line-search descent (training loss never increases). The best
/// of several seeded initializations is kept.
inline TrainResult train_mlp(std::span<const TrainingSample> samples, const TrainConfig& config) {
    if (samples.size() < 2) throw std::invalid_argument("training needs at least two samples");
    const std::size_t train_count = std::min(config.train_count, samples.size() - 1);
    const auto train = samples.subspan(0, train_count);
    const auto valid = samples.subspan(train_count);

    MlpParams shape;
    shape.activation = config.activation;
    for (std::size_t k = 0; k < kMlpInputs; ++k) {
        double lo = std::numeric_limits<double>::infinity();
        double hi = -lo;
        for (const auto& s : train) {
            lo = std::min(lo, s.inputs[k]);
            hi = std::max(hi, s.inputs[k]);
        }
        shape.input_offset[k] = lo;
        shape.input_scale[k] = hi > lo ? hi - lo : 1.0;
    }
    shape.validate();

    const std::size_t dim = MlpParams::parameter_count();
    std::vector<std::size_t> weight_indices;
    if (!config.decay_output_only)
        for (std::size_t i = 0; i < kMlpHidden * kMlpInputs; ++i) weight_indices.push_back(i);
    for (std::size_t h = 0; h < kMlpHidden; ++h) weight_indices.push_back(kMlpHidden * kMlpInputs + kMlpHidden + h);
    auto loss = [&](std::span<const double> w) {
        MlpParams p = shape;
        p.unflatten(w);
        double penalty = 0.0;
        for (std::size_t i : weight_indices) penalty += w[i] * w[i];
        return detail::mean_squared_error(p, train) + config.weight_decay * penalty;
    };
    auto gradient = [&](std::span<const double> w) {
        MlpParams p = shape;
        p.unflatten(w);
        std::vector<double> g(dim, 0.0), gi(dim);
        for (const auto& s : train) {
            const double r = mlp_forward_with_gradient(p, s.inputs, gi) - s.target;
            for (std::size_t i = 0; i < dim; ++i) g[i] += 2.0 * r * gi[i];
        }
        for (double& v : g) v /= static_cast<double>(train.size());
        for (std::size_t i : weight_indices) g[i] += 2.0 * config.weight_decay * w[i];
        return g;
    };

    std::mt19937_64 rng(config.seed);
    std::normal_distribution<double> init(0.0, 1.0);
    std::vector<std::vector<double>> starts;
    for (int r = 0; r < std::max(1, config.restarts); ++r) {
        std::vector<double> w(dim);
        for (double& v : w) v = init(rng);
        starts.push_back(std::move(w));
    }

    OptimizerConfig opt;
    opt.function_tolerance = 1e-12;
    opt.step_tolerance = 1e-9;
    opt.budget_s = 1e9;  // effectively unbounded; iteration cap governs
    opt.max_iterations = config.max_iterations;
    const double inf = std::numeric_limits<double>::infinity();
    const Bounds free = Bounds::uniform(dim, -inf, inf);
    const BudgetedSolution sol = solve_budgeted(loss, gradient, free, starts, opt);

    const Iterate& best = sol.best_iterate();
    if (!std::isfinite(best.value)) {
        std::ostringstream msg;
        msg << "MLP training diverged: training loss " << best.value << " after " << sol.stats.iterations
            << " iterations";
        throw TrainingDivergence(msg.str());
    }

    TrainResult result;
    result.params = shape;
    result.params.unflatten(best.x);
    for (const auto& it : sol.iterates)
        if (it.start == best.start) result.loss_history.push_back(it.value);
    result.train_rmse = std::sqrt(detail::mean_squared_error(result.params, train));
    if (!valid.empty()) {
        result.validation_rmse = std::sqrt(detail::mean_squared_error(result.params, valid, config.theta_max));
        result.target_std = detail::stddev(valid);
    }
    return result;
}

}  // namespace basepar
