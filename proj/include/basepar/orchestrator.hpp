// One control step of the base-parallel architecture: base controllers emit
// their candidates and warm starts, parallel cells solve within the budget,
// every candidate is scored on the evaluation model over a short horizon, and
// the argmin is applied.
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <future>
#include <limits>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "basepar/actm.hpp"
#include "basepar/base_controllers.hpp"
#include "basepar/mpc.hpp"
#include "basepar/optimizer.hpp"

namespace basepar {

struct ParallelSpec {
    MpcKind kind = MpcKind::conventional;
    std::size_t horizon = 3;
    std::string label;
};

/// A base controller and the parallel cell it seeds.
struct BaseSlot {
    std::unique_ptr<BaseController> controller;
    std::vector<ParallelSpec> cell;
    bool candidate = true;  // false: only seeds its cell, its own output never competes
};

struct ArchitectureConfig {
    std::vector<BaseSlot> slots;
    std::size_t eval_horizon = 3;
    OptimizerConfig optimizer;
    double gamma = 0.8;
    Interval metering_bounds{0.0, 8.0};
    Interval gain_bounds{0.0, 1.0};
    bool serial = false;

    std::size_t min_parallel_horizon() const {
        std::size_t h = std::numeric_limits<std::size_t>::max();
        for (const auto& s : slots)
            for (const auto& p : s.cell) h = std::min(h, p.horizon);
        return h;
    }

    void validate() const {
        if (slots.empty()) throw std::invalid_argument("architecture needs at least one base controller");
        bool any_candidate = false;
        for (const auto& s : slots) {
            if (!s.controller) throw std::invalid_argument("base slot without a controller");
            any_candidate = any_candidate || s.candidate || !s.cell.empty();
            for (const auto& p : s.cell) {
                if (p.horizon < 1) throw std::invalid_argument(p.label + ": horizon must be >= 1");
                if (p.kind == MpcKind::parameterized && s.controller->kind() != BaseKind::implicit_law)
                    throw std::invalid_argument(p.label + ": parameterized MPC must sit in an implicit cell");
                if (p.kind == MpcKind::conventional && s.controller->kind() != BaseKind::explicit_law)
                    throw std::invalid_argument(p.label + ": conventional MPC must sit in an explicit cell");
            }
        }
        if (!any_candidate) throw std::invalid_argument("architecture produces no candidates");
        if (eval_horizon < 1) throw std::invalid_argument("evaluation horizon must be >= 1");
        if (eval_horizon > min_parallel_horizon())
            throw std::invalid_argument("evaluation horizon exceeds the shortest prediction horizon");
        optimizer.validate();
    }
};

/// Persistence forecast: the measured demand held over the window.
inline std::vector<ExogenousInput> persistence_forecast(const ExogenousInput& measured, std::size_t steps) {
    return std::vector<ExogenousInput>(std::max<std::size_t>(steps, 1), measured);
}

struct EvaluationResult {
    std::vector<double> epsilon;  // one per candidate; +inf when the model rejected it
    std::size_t winner = 0;
    double margin = 0.0;          // gap to the runner-up (+inf with a single finite candidate)
    bool fallback = false;        // every candidate failed
    std::vector<std::string> warnings;
};

/// Argmin with ties to the lowest index. Returns `fallback` when no entry is finite.
inline std::pair<std::size_t, bool> select_best(std::span<const double> epsilon, std::size_t fallback) {
    std::size_t best = epsilon.size();
    for (std::size_t c = 0; c < epsilon.size(); ++c)
        if (std::isfinite(epsilon[c]) && (best == epsilon.size() || epsilon[c] < epsilon[best])) best = c;
    if (best == epsilon.size()) return {fallback, true};
    return {best, false};
}

/// Rolls each candidate out on `model` for `horizon` steps from `state`.
/// Sequences shorter than the horizon hold their last value.
template <PlantModel M>
EvaluationResult evaluate_candidates(std::span<const CandidateSequence> candidates, const M& model,
                                     const NetworkState& state, std::span<const ExogenousInput> forecast,
                                     std::size_t horizon, double gamma, std::size_t fallback = 0) {
    if (candidates.empty()) throw std::invalid_argument("no candidates to evaluate");
    if (forecast.empty()) throw std::invalid_argument("evaluation needs a demand forecast");
    if (horizon < 1) throw std::invalid_argument("evaluation horizon must be >= 1");
    EvaluationResult out;
    out.epsilon.assign(candidates.size(), std::numeric_limits<double>::infinity());
    for (std::size_t c = 0; c < candidates.size(); ++c) {
        const auto& plan = candidates[c].metering;
        if (plan.empty()) {
            out.warnings.push_back(candidates[c].label + ": empty metering sequence, excluded");
            continue;
        }
        try {
            NetworkState s = state;
            double eps = 0.0;
            for (std::size_t k = 0; k < horizon; ++k) {
                StepResult r = model.step(s, forecast[std::min(k, forecast.size() - 1)],
                                          plan[std::min(k, plan.size() - 1)], gamma);
                eps += r.cost.j;
                s = std::move(r.next);
            }
            if (std::isfinite(eps)) out.epsilon[c] = eps;
            else out.warnings.push_back(candidates[c].label + ": non-finite evaluated cost, excluded");
        } catch (const std::exception& e) {
            out.warnings.push_back(candidates[c].label + ": evaluation failed (" + e.what() + "), excluded");
        }
    }
    const auto [winner, fell_back] = select_best(out.epsilon, fallback);
    out.winner = winner;
    out.fallback = fell_back;
    if (fell_back) {
        out.warnings.push_back("WARNING: every candidate failed evaluation; falling back to the explicit base");
        out.margin = std::numeric_limits<double>::quiet_NaN();
    } else {
        double second = std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < out.epsilon.size(); ++c)
            if (c != winner) second = std::min(second, out.epsilon[c]);
        out.margin = second - out.epsilon[winner];
    }
    return out;
}

struct ControllerTiming {
    std::string label;
    double elapsed_s = 0.0;
    int iterations = 0;
    long evaluations = 0;
    bool converged = false;
    bool deadline_hit = false;
};

struct SelectionRecord {
    long step = 0;
    std::vector<double> applied;  // per metered ramp
    std::size_t winner = 0;
    std::string winner_label;
    bool fallback = false;
    std::vector<std::string> labels;
    std::vector<double> epsilon;
    std::vector<double> predicted_cost;
    std::vector<ControllerTiming> timing;  // parallel controllers
    std::vector<std::string> warnings;
    double elapsed_s = 0.0;                // whole control step
};

class BaseParallelArchitecture {
public:
    BaseParallelArchitecture(ArchitectureConfig config, NetworkParams params)
        : config_(std::move(config)), params_(std::move(params)), model_(params_) {
        config_.validate();
        for (const auto& s : config_.slots) history_.emplace_back(s.cell.size());
    }

    const ArchitectureConfig& config() const { return config_; }
    const NetworkParams& params() const { return params_; }

    /// Longest window any part of a step needs (rollouts, solves, evaluation).
    std::size_t max_horizon() const {
        std::size_t h = config_.eval_horizon;
        for (const auto& s : config_.slots)
            for (const auto& p : s.cell) h = std::max(h, p.horizon);
        return h;
    }

    SelectionRecord control_step(const Measurement& m, std::span<const ExogenousInput> forecast) {
        return control_step(m, forecast, model_);
    }

    template <PlantModel M>
    SelectionRecord control_step(const Measurement& m, std::span<const ExogenousInput> forecast,
                                 const M& eval_model) {
        const auto t0 = std::chrono::steady_clock::now();
        validate_state(m.state, params_);
        if (forecast.empty()) throw std::invalid_argument("control step needs a demand forecast");
        SelectionRecord rec;
        rec.step = m.state.step;

        // Base block: candidates and warm starts.
        std::vector<WarmStart> warm;
        for (const auto& slot : config_.slots) {
            std::size_t h = config_.eval_horizon;
            for (const auto& p : slot.cell) h = std::max(h, p.horizon);
            warm.push_back(warm_start_rollout(*slot.controller, m, forecast, h, params_, config_.gamma));
        }

        // Parallel block.
        std::vector<std::vector<MpcProblem>> cells(config_.slots.size());
        for (std::size_t b = 0; b < config_.slots.size(); ++b) {
            const auto& slot = config_.slots[b];
            for (const auto& spec : slot.cell) {
                std::vector<ExogenousInput> fc(forecast.begin(), forecast.end());
                cells[b].push_back(make_mpc_problem(spec.kind, spec.horizon, spec.label, params_, m.state,
                                                    std::move(fc), config_.gamma,
                                                    slot.controller->previous_metering(),
                                                    config_.metering_bounds, config_.gain_bounds));
            }
        }
        std::vector<std::vector<BudgetedResult>> results(cells.size());
        std::size_t busy_cells = 0;
        for (const auto& c : cells) busy_cells += c.empty() ? 0 : 1;
        OptimizerConfig cell_config = config_.optimizer;
        if (config_.serial && busy_cells > 1) cell_config.budget_s /= static_cast<double>(busy_cells);
        if (config_.serial) {
            for (std::size_t b = 0; b < cells.size(); ++b)
                if (!cells[b].empty())
                    results[b] = run_parallel_cell(cells[b], warm[b], history_[b], cell_config, true);
        } else {
            std::vector<std::future<std::vector<BudgetedResult>>> jobs(cells.size());
            for (std::size_t b = 0; b < cells.size(); ++b)
                if (!cells[b].empty())
                    jobs[b] = std::async(std::launch::async, [&, b] {
                        return run_parallel_cell(cells[b], warm[b], history_[b], cell_config, false);
                    });
            for (std::size_t b = 0; b < cells.size(); ++b)
                if (jobs[b].valid()) results[b] = jobs[b].get();
        }

        // Candidate set: bases first, then parallel controllers, in slot order.
        std::vector<CandidateSequence> candidates;
        for (std::size_t b = 0; b < config_.slots.size(); ++b) {
            const auto& slot = config_.slots[b];
            if (!slot.candidate) continue;
            CandidateSequence c;
            c.label = slot.controller->label();
            c.metering = warm[b].metering;
            for (const auto& s : warm[b].costs) {
                c.stage_costs.push_back(s.j);
                c.predicted_cost += s.j;
            }
            candidates.push_back(std::move(c));
        }
        for (std::size_t b = 0; b < results.size(); ++b) {
            for (std::size_t p = 0; p < results[b].size(); ++p) {
                const BudgetedResult& r = results[b][p];
                for (auto& c : r.candidates()) candidates.push_back(c);
                rec.timing.push_back({config_.slots[b].cell[p].label, r.stats.elapsed_s, r.stats.iterations,
                                      r.stats.evaluations, r.stats.converged, r.stats.deadline_hit});
            }
        }

        // Evaluation block and selector.
        const std::size_t explicit_base = explicit_base_candidate(candidates.size());
        EvaluationResult ev = evaluate_candidates(std::span<const CandidateSequence>(candidates), eval_model,
                                                  m.state, forecast, config_.eval_horizon, config_.gamma,
                                                  explicit_base);
        rec.warnings = ev.warnings;
        rec.fallback = ev.fallback;
        for (const auto& c : candidates) {
            rec.labels.push_back(c.label);
            rec.predicted_cost.push_back(c.predicted_cost);
        }
        rec.epsilon = ev.epsilon;
        if (ev.fallback && explicit_base >= candidates.size()) {
            // The explicit base does not compete here; apply its output anyway.
            std::size_t b = first_explicit_slot();
            rec.applied = warm[b].metering.front();
            rec.winner = candidates.size();
            rec.winner_label = config_.slots[b].controller->label();
        } else {
            rec.winner = ev.winner;
            rec.winner_label = candidates[ev.winner].label;
            rec.applied = candidates[ev.winner].metering.front();
        }

        // Bookkeeping for the next step.
        for (auto& slot : config_.slots) slot.controller->set_previous_metering(rec.applied);
        for (std::size_t b = 0; b < results.size(); ++b)
            for (std::size_t p = 0; p < results[b].size(); ++p)
                history_[b][p].push_back(results[b][p].best.decision);

        rec.elapsed_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        return rec;
    }

private:
    std::size_t first_explicit_slot() const {
        for (std::size_t b = 0; b < config_.slots.size(); ++b)
            if (config_.slots[b].controller->kind() == BaseKind::explicit_law) return b;
        return 0;
    }

    // Index of the explicit base candidate, or `none` when it does not compete.
    std::size_t explicit_base_candidate(std::size_t none) const {
        std::size_t index = 0;
        for (const auto& slot : config_.slots) {
            if (!slot.candidate) continue;
            if (slot.controller->kind() == BaseKind::explicit_law) return index;
            ++index;
        }
        return none;
    }

    ArchitectureConfig config_;
    NetworkParams params_;
    ActmModel model_;
    // history_[slot][controller]: best decision of every earlier step, oldest first.
    std::vector<std::vector<std::vector<std::vector<double>>>> history_;
};

}  // namespace basepar
