// Parallel block: ramp-metering MPC solved online under a wall-clock budget.
//
// Conventional MPC optimizes the metering rates themselves (ramps x horizon
// decision variables). Parameterized MPC optimizes one ALINEA gain per ramp,
// held constant over the window; the metering then follows ALINEA along the
// predicted trajectory. Both minimize the summed stage cost over the horizon
// (no terminal cost).
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <future>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "basepar/actm.hpp"
#include "basepar/base_controllers.hpp"
#include "basepar/optimizer.hpp"

namespace basepar {

enum class MpcKind { conventional, parameterized };

struct Interval {
    double lo = 0.0;
    double hi = 1.0;
};

struct MpcProblem {
    MpcKind kind = MpcKind::conventional;
    std::size_t horizon = 1;
    std::string label;
    NetworkParams params;
    NetworkState initial;
    std::vector<ExogenousInput> forecast;  // holds its last entry past the end
    double gamma = 0.8;
    std::vector<double> mu_prev;           // metering before the window (parameterized)
    Interval metering_bounds{0.0, 8.0};
    Bounds bounds;                         // decision box

    std::size_t ramps() const { return params.metered_count(); }

    std::size_t decision_dim() const { return kind == MpcKind::conventional ? ramps() * horizon : ramps(); }

    void validate() const {
        if (horizon < 1) throw std::invalid_argument(label + ": horizon must be >= 1");
        if (forecast.empty()) throw std::invalid_argument(label + ": demand forecast is empty");
        bounds.validate();
        if (bounds.size() != decision_dim()) throw std::invalid_argument(label + ": bounds do not match layout");
        if (kind == MpcKind::parameterized && mu_prev.size() != ramps())
            throw TopologyError(label + ": parameterized MPC needs one previous metering per ramp");
        if (!(metering_bounds.lo <= metering_bounds.hi))
            throw std::invalid_argument(label + ": metering bounds are inverted");
    }
};

inline MpcProblem make_mpc_problem(MpcKind kind, std::size_t horizon, std::string label, NetworkParams params,
                                   NetworkState initial, std::vector<ExogenousInput> forecast, double gamma,
                                   std::vector<double> mu_prev, Interval metering_bounds, Interval gain_bounds) {
    MpcProblem p;
    p.kind = kind;
    p.horizon = horizon;
    p.label = std::move(label);
    p.params = std::move(params);
    p.initial = std::move(initial);
    p.forecast = std::move(forecast);
    p.gamma = gamma;
    p.mu_prev = std::move(mu_prev);
    p.metering_bounds = metering_bounds;
    const Interval box = kind == MpcKind::conventional ? metering_bounds : gain_bounds;
    p.bounds = Bounds::uniform(p.decision_dim(), box.lo, box.hi);
    p.validate();
    return p;
}

struct PlanEvaluation {
    std::vector<std::vector<double>> metering;  // [step][ramp]
    std::vector<StageCost> costs;
    double j = 0.0;
};

/// Rolls the decision out over the horizon. Out-of-box decisions are clipped.
inline PlanEvaluation evaluate_decision(const MpcProblem& p, std::span<const double> decision) {
    if (decision.size() != p.decision_dim()) throw std::invalid_argument(p.label + ": decision has wrong size");
    const std::vector<double> x = p.bounds.projected(decision);
    const std::size_t ramps = p.ramps();
    PlanEvaluation out;
    NetworkState state = p.initial;
    std::vector<double> mu_prev = p.mu_prev;
    for (std::size_t k = 0; k < p.horizon; ++k) {
        std::vector<double> mu(ramps);
        if (p.kind == MpcKind::conventional) {
            std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(k * ramps), ramps, mu.begin());
        } else {
            AlineaState alinea{x, mu_prev};
            const auto rho = detail::metered_densities(state, p.params);
            mu = alinea_step(alinea, rho, p.params.rho_crit);
            for (double& v : mu) v = std::clamp(v, p.metering_bounds.lo, p.metering_bounds.hi);
            mu_prev = mu;
        }
        const ExogenousInput& in = p.forecast[std::min(k, p.forecast.size() - 1)];
        StepResult r = step(state, in, mu, p.params, p.gamma);
        out.j += r.cost.j;
        out.costs.push_back(r.cost);
        out.metering.push_back(std::move(mu));
        state = std::move(r.next);
    }
    return out;
}

/// Summed stage cost of a decision; +inf when the model rejects it.
inline double objective(const MpcProblem& p, std::span<const double> decision) {
    try {
        const double j = evaluate_decision(p, decision).j;
        return std::isfinite(j) ? j : std::numeric_limits<double>::infinity();
    } catch (const ModelConsistencyError&) {
        return std::numeric_limits<double>::infinity();
    }
}

struct CandidateSequence {
    std::string label;
    std::vector<std::vector<double>> metering;  // [step][ramp]
    std::vector<double> decision;
    std::vector<double> stage_costs;            // predicted, per step
    double predicted_cost = 0.0;
    SolveStats stats;
};

struct BudgetedResult {
    CandidateSequence best;
    std::vector<CandidateSequence> iterates;  // every accepted iterate, in order
    TerminationOption option = TerminationOption::best_iterate;
    SolveStats stats;

    /// Candidates handed to the evaluation block under the termination option.
    std::vector<CandidateSequence> candidates() const {
        if (option == TerminationOption::all_iterates) return iterates;
        return {best};
    }
};

inline CandidateSequence make_candidate(const MpcProblem& p, std::span<const double> decision, std::string label) {
    CandidateSequence c;
    c.label = std::move(label);
    c.decision = p.bounds.projected(decision);
    try {
        PlanEvaluation ev = evaluate_decision(p, c.decision);
        c.metering = std::move(ev.metering);
        for (const auto& s : ev.costs) c.stage_costs.push_back(s.j);
        c.predicted_cost = ev.j;
    } catch (const ModelConsistencyError&) {
        c.predicted_cost = std::numeric_limits<double>::infinity();
    }
    return c;
}

/// Drops the first `m` blocks of `x` and repeats the last block `m` times.
inline std::vector<double> shift_sequence(std::span<const double> x, std::size_t block, std::size_t m) {
    if (block == 0 || x.size() % block != 0) throw std::invalid_argument("sequence is not a whole number of blocks");
    const std::size_t steps = x.size() / block;
    std::vector<double> out(x.size());
    for (std::size_t k = 0; k < steps; ++k) {
        const std::size_t src = std::min(k + m, steps - 1);
        std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(src * block), block,
                    out.begin() + static_cast<std::ptrdiff_t>(k * block));
    }
    return out;
}

struct LabeledStart {
    std::string origin;
    std::vector<double> x;
};

/// Starting points built from a controller's own earlier solutions (oldest
/// first in `history`): the previous solution shifted by one step, its average
/// with the second-previous shifted by two, and the average of all previous
/// solutions each shifted by its age. `block` is the number of variables per
/// time step.
inline std::vector<LabeledStart> make_shift_warm_starts(std::span<const std::vector<double>> history,
                                                        std::size_t block) {
    std::vector<LabeledStart> out;
    if (history.empty()) return out;
    const std::size_t count = history.size();
    const auto& prev = history[count - 1];
    out.push_back({"shift", shift_sequence(prev, block, 1)});
    if (count >= 2) {
        const auto older = shift_sequence(history[count - 2], block, 2);
        std::vector<double> avg(prev.size());
        for (std::size_t i = 0; i < avg.size(); ++i) avg[i] = 0.5 * (out[0].x[i] + older[i]);
        out.push_back({"shift-average", std::move(avg)});
    }
    std::vector<double> all(prev.size(), 0.0);
    for (std::size_t a = 0; a < count; ++a) {
        const auto shifted = shift_sequence(history[count - 1 - a], block, a + 1);
        for (std::size_t i = 0; i < all.size(); ++i) all[i] += shifted[i];
    }
    for (double& v : all) v /= static_cast<double>(count);
    out.push_back({"history-average", std::move(all)});
    return out;
}

inline BudgetedResult solve_mpc(const MpcProblem& p, std::span<const std::vector<double>> starts,
                                const OptimizerConfig& config) {
    p.validate();
    auto f = [&p](std::span<const double> x) { return objective(p, x); };
    const BudgetedSolution sol = solve_budgeted(f, p.bounds, starts, config);
    BudgetedResult out;
    out.option = config.termination;
    out.stats = sol.stats;
    out.best = make_candidate(p, sol.best_iterate().x, p.label);
    out.best.stats = sol.stats;
    if (config.termination == TerminationOption::all_iterates) {
        for (std::size_t i = 0; i < sol.iterates.size(); ++i) {
            CandidateSequence c = make_candidate(p, sol.iterates[i].x, p.label + "#" + std::to_string(i));
            c.stats = sol.stats;
            out.iterates.push_back(std::move(c));
        }
    }
    return out;
}

/// Warm-start vectors a parallel controller receives from its base controller:
/// the first `horizon` steps of the base rollout (conventional) or its gains
/// (parameterized: the current gain and the window mean).
inline std::vector<LabeledStart> base_warm_starts(const MpcProblem& p, const WarmStart& warm) {
    if (warm.metering.size() < p.horizon && p.kind == MpcKind::conventional)
        throw std::invalid_argument(p.label + ": base warm start is shorter than the horizon");
    std::vector<LabeledStart> out;
    if (p.kind == MpcKind::conventional) {
        std::vector<double> x;
        for (std::size_t k = 0; k < p.horizon; ++k) x.insert(x.end(), warm.metering[k].begin(), warm.metering[k].end());
        out.push_back({"base", std::move(x)});
    } else {
        if (warm.gains.empty()) throw std::invalid_argument(p.label + ": base warm start carries no gains");
        out.push_back({"base", warm.gains.front()});
        const std::size_t h = std::min(p.horizon, warm.gains.size());
        std::vector<double> mean(p.ramps(), 0.0);
        for (std::size_t k = 0; k < h; ++k)
            for (std::size_t r = 0; r < mean.size(); ++r) mean[r] += warm.gains[k][r] / static_cast<double>(h);
        if (mean != out.front().x) out.push_back({"base-mean", std::move(mean)});
    }
    return out;
}

inline std::vector<std::vector<double>> collect_starts(const MpcProblem& p, const WarmStart& warm,
                                                       std::span<const std::vector<double>> history) {
    std::vector<std::vector<double>> starts;
    auto add = [&](std::vector<double> x) {
        if (x.size() != p.decision_dim()) return;
        if (std::find(starts.begin(), starts.end(), x) == starts.end()) starts.push_back(std::move(x));
    };
    for (auto& s : base_warm_starts(p, warm)) add(std::move(s.x));
    const std::size_t block = p.kind == MpcKind::conventional ? p.ramps() : p.decision_dim();
    for (auto& s : make_shift_warm_starts(history, block)) add(std::move(s.x));
    return starts;
}

/// Solves every controller of one parallel cell. Each controller starts from
/// the base warm start (truncated to its horizon) plus its history-based
/// starts. Solves run concurrently unless `serial`, in which case they run in
/// order and split the budget evenly.
inline std::vector<BudgetedResult> run_parallel_cell(std::span<const MpcProblem> cell, const WarmStart& warm,
                                                     std::span<const std::vector<std::vector<double>>> histories,
                                                     const OptimizerConfig& config, bool serial) {
    if (histories.size() != cell.size()) throw std::invalid_argument("one history per parallel controller");
    std::size_t max_h = 0;
    for (const auto& p : cell) max_h = std::max(max_h, p.horizon);
    if (warm.metering.size() < max_h) throw std::invalid_argument("base warm start shorter than the cell horizon");

    std::vector<std::vector<std::vector<double>>> starts;
    for (std::size_t c = 0; c < cell.size(); ++c) starts.push_back(collect_starts(cell[c], warm, histories[c]));

    std::vector<BudgetedResult> out(cell.size());
    if (serial) {
        OptimizerConfig share = config;
        if (!cell.empty()) share.budget_s = config.budget_s / static_cast<double>(cell.size());
        for (std::size_t c = 0; c < cell.size(); ++c) out[c] = solve_mpc(cell[c], starts[c], share);
        return out;
    }
    std::vector<std::future<BudgetedResult>> jobs;
    for (std::size_t c = 0; c < cell.size(); ++c)
        jobs.push_back(std::async(std::launch::async, [&, c] { return solve_mpc(cell[c], starts[c], config); }));
    for (std::size_t c = 0; c < cell.size(); ++c) out[c] = jobs[c].get();
    return out;
}

}  // namespace basepar
