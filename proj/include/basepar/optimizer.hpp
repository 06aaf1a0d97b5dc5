// Anytime bound-constrained minimizer for small smooth-ish problems.
//
// Projected quasi-Newton descent: BFGS inverse-Hessian on the free variables,
// Armijo backtracking along the projection arc, steepest-descent restart when
// the quasi-Newton direction fails. Several starts share one wall-clock
// deadline; the deadline is checked before every objective evaluation, so the
// overshoot is bounded by one evaluation. Every accepted point is recorded.
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace basepar {

enum class TerminationOption { best_iterate, all_iterates };

inline const char* to_string(TerminationOption t) {
    return t == TerminationOption::best_iterate ? "best" : "all";
}

inline TerminationOption termination_from_string(const std::string& s) {
    if (s == "best") return TerminationOption::best_iterate;
    if (s == "all") return TerminationOption::all_iterates;
    throw std::invalid_argument("termination must be 'best' or 'all', got '" + s + "'");
}

struct OptimizerConfig {
    double function_tolerance = 1e-3;
    double step_tolerance = 1e-7;
    double budget_s = 2.0;
    int max_iterations = 200;       // per start
    long max_evaluations = 0;       // across all starts; 0 = unlimited
    TerminationOption termination = TerminationOption::best_iterate;
    double fd_step = 1e-6;          // relative central-difference step

    void validate() const {
        if (!(function_tolerance > 0.0) || !(step_tolerance > 0.0))
            throw std::invalid_argument("optimizer tolerances must be positive");
        if (!(budget_s >= 0.0)) throw std::invalid_argument("optimizer budget must be nonnegative");
        if (max_iterations < 0 || max_evaluations < 0) throw std::invalid_argument("optimizer limits must be >= 0");
        if (!(fd_step > 0.0)) throw std::invalid_argument("fd_step must be positive");
    }
};

struct Bounds {
    std::vector<double> lower;
    std::vector<double> upper;

    std::size_t size() const { return lower.size(); }

    static Bounds uniform(std::size_t n, double lo, double hi) {
        return {std::vector<double>(n, lo), std::vector<double>(n, hi)};
    }

    void validate() const {
        if (lower.size() != upper.size()) throw std::invalid_argument("bound vectors differ in size");
        for (std::size_t i = 0; i < lower.size(); ++i)
            if (!(lower[i] <= upper[i])) throw std::invalid_argument("lower bound exceeds upper bound");
    }

    void project(std::span<double> x) const {
        for (std::size_t i = 0; i < x.size(); ++i) x[i] = std::clamp(x[i], lower[i], upper[i]);
    }

    std::vector<double> projected(std::span<const double> x) const {
        std::vector<double> y(x.begin(), x.end());
        project(y);
        return y;
    }
};

class Deadline {
public:
    using clock = std::chrono::steady_clock;

    // A non-finite or very large budget never expires.
    explicit Deadline(double budget_s) : start_(clock::now()), end_(clock::time_point::max()) {
        if (std::isfinite(budget_s) && budget_s < 1e9)
            end_ = start_ + std::chrono::duration_cast<clock::duration>(std::chrono::duration<double>(budget_s));
    }

    bool expired() const { return clock::now() >= end_; }
    double elapsed_s() const { return std::chrono::duration<double>(clock::now() - start_).count(); }

private:
    clock::time_point start_;
    clock::time_point end_;
};

struct Iterate {
    std::vector<double> x;
    double value = 0.0;
    double best_so_far = 0.0;  // minimum value recorded up to and including this iterate
    std::size_t start = 0;     // which start produced it
    int iteration = 0;         // 0 = the start itself
};

struct SolveStats {
    int iterations = 0;
    long evaluations = 0;
    double elapsed_s = 0.0;
    bool converged = false;     // every start finished by a tolerance test
    bool deadline_hit = false;  // stopped by wall clock or evaluation cap
};

struct BudgetedSolution {
    std::vector<Iterate> iterates;  // in the order they were accepted
    std::size_t best = 0;
    SolveStats stats;
    TerminationOption option = TerminationOption::best_iterate;

    const Iterate& best_iterate() const { return iterates.at(best); }

    /// Iterates handed on as candidates under the configured termination option.
    std::vector<Iterate> exposed() const {
        if (option == TerminationOption::all_iterates) return iterates;
        return {best_iterate()};
    }
};

namespace detail {

struct BudgetExhausted {};

class EvaluationGate {
public:
    EvaluationGate(const Deadline& deadline, long max_evaluations)
        : deadline_(deadline), max_evaluations_(max_evaluations) {}

    // Evaluations that must happen regardless of the budget.
    template <class F>
    double forced(F& f, std::span<const double> x) {
        ++count_;
        return sanitize(f(x));
    }

    template <class F>
    double operator()(F& f, std::span<const double> x) {
        if (deadline_.expired() || (max_evaluations_ > 0 && count_ >= max_evaluations_)) throw BudgetExhausted{};
        ++count_;
        return sanitize(f(x));
    }

    long count() const { return count_; }

private:
    static double sanitize(double v) { return std::isfinite(v) ? v : std::numeric_limits<double>::infinity(); }

    const Deadline& deadline_;
    long max_evaluations_;
    long count_ = 0;
};

inline double dot(std::span<const double> a, std::span<const double> b) {
    return std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
}

inline double inf_norm(std::span<const double> a) {
    double m = 0.0;
    for (double v : a) m = std::max(m, std::abs(v));
    return m;
}

}  // namespace detail

/// Central differences that stay inside the box (one-sided at active bounds).
template <class F>
std::vector<double> finite_difference_gradient(F&& f, std::span<const double> x, const Bounds& bounds,
                                               double rel_step) {
    std::vector<double> g(x.size(), 0.0);
    std::vector<double> probe(x.begin(), x.end());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double h = rel_step * std::max(1.0, std::abs(x[i]));
        const double up = std::min(x[i] + h, bounds.upper[i]);
        const double down = std::max(x[i] - h, bounds.lower[i]);
        if (up == down) continue;
        probe[i] = up;
        const double fu = f(std::span<const double>(probe));
        probe[i] = down;
        const double fd = f(std::span<const double>(probe));
        probe[i] = x[i];
        g[i] = (fu - fd) / (up - down);
    }
    return g;
}

namespace detail {

template <class F, class G>
BudgetedSolution solve_impl(F& f, G& grad, const Bounds& bounds, std::span<const std::vector<double>> starts,
                            const OptimizerConfig& config) {
    config.validate();
    bounds.validate();
    if (starts.empty()) throw std::invalid_argument("solve_budgeted needs at least one start");
    const std::size_t n = bounds.size();
    for (const auto& s : starts)
        if (s.size() != n) throw std::invalid_argument("start dimension does not match bounds");

    Deadline deadline(config.budget_s);
    EvaluationGate gate(deadline, config.max_evaluations);
    BudgetedSolution out;
    out.option = config.termination;
    double best_value = std::numeric_limits<double>::infinity();

    auto record = [&](std::vector<double> x, double value, std::size_t start, int iteration) {
        if (value < best_value) {
            best_value = value;
            out.best = out.iterates.size();
        }
        out.iterates.push_back({std::move(x), value, best_value, start, iteration});
    };

    // Every start is scored even with a zero budget.
    std::vector<std::vector<double>> x0(starts.size());
    std::vector<double> f0(starts.size());
    for (std::size_t s = 0; s < starts.size(); ++s) {
        x0[s] = bounds.projected(starts[s]);
        f0[s] = gate.forced(f, x0[s]);
        record(x0[s], f0[s], s, 0);
    }

    std::vector<std::size_t> order(starts.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return f0[a] < f0[b]; });

    bool all_converged = true;
    try {
        for (std::size_t s : order) {
            std::vector<double> x = x0[s];
            double fx = f0[s];
            if (!std::isfinite(fx)) continue;
            std::vector<double> H(n * n, 0.0);  // inverse Hessian approximation, row-major
            bool have_curvature = false;
            auto reset_h = [&](double scale) {
                std::fill(H.begin(), H.end(), 0.0);
                for (std::size_t i = 0; i < n; ++i) H[i * n + i] = scale;
            };
            reset_h(1.0);

            std::vector<double> g = grad(x, gate);
            bool converged = false;
            for (int it = 1; it <= config.max_iterations && !converged; ++it) {
                std::vector<bool> free(n, true);
                std::vector<double> pg(n, 0.0);
                for (std::size_t i = 0; i < n; ++i) {
                    const bool at_lo = x[i] <= bounds.lower[i] && g[i] > 0.0;
                    const bool at_hi = x[i] >= bounds.upper[i] && g[i] < 0.0;
                    free[i] = !(at_lo || at_hi);
                    if (free[i]) pg[i] = g[i];
                }
                if (inf_norm(pg) <= 1e-14) {
                    converged = true;
                    break;
                }

                bool accepted = false;
                for (int attempt = 0; attempt < 2 && !accepted; ++attempt) {
                    const bool quasi_newton = attempt == 0 && have_curvature;
                    if (attempt == 1 && !have_curvature) break;
                    std::vector<double> d(n, 0.0);
                    for (std::size_t i = 0; i < n; ++i) {
                        if (!free[i]) continue;
                        if (quasi_newton) {
                            for (std::size_t j = 0; j < n; ++j)
                                if (free[j]) d[i] -= H[i * n + j] * g[j];
                        } else {
                            d[i] = -g[i];
                        }
                    }
                    if (dot(d, g) >= 0.0) continue;

                    double alpha = 1.0;
                    if (!quasi_newton) {
                        // Steepest descent: first trial moves the largest component by a
                        // tenth of its box width (or by 1 when unbounded).
                        double width = std::numeric_limits<double>::infinity();
                        for (std::size_t i = 0; i < n; ++i)
                            if (free[i] && d[i] != 0.0)
                                width = std::min(width, bounds.upper[i] - bounds.lower[i]);
                        const double target = std::isfinite(width) ? 0.1 * width : 1.0;
                        alpha = target / inf_norm(d);
                    }
                    for (int ls = 0; ls < 50; ++ls, alpha *= 0.5) {
                        std::vector<double> trial(n);
                        for (std::size_t i = 0; i < n; ++i) trial[i] = x[i] + alpha * d[i];
                        bounds.project(trial);
                        std::vector<double> step(n);
                        for (std::size_t i = 0; i < n; ++i) step[i] = trial[i] - x[i];
                        if (inf_norm(step) == 0.0) break;
                        const double ft = gate(f, trial);
                        if (ft <= fx + 1e-4 * dot(g, step)) {
                            std::vector<double> g_new = grad(trial, gate);
                            std::vector<double> y(n);
                            for (std::size_t i = 0; i < n; ++i) y[i] = g_new[i] - g[i];
                            const double sy = dot(step, y);
                            if (sy > 1e-12 * std::sqrt(dot(step, step) * dot(y, y))) {
                                if (!have_curvature) reset_h(sy / dot(y, y));
                                // BFGS inverse update: H <- (I - r s y') H (I - r y s') + r s s'
                                const double r = 1.0 / sy;
                                std::vector<double> Hy(n, 0.0);
                                for (std::size_t i = 0; i < n; ++i)
                                    for (std::size_t j = 0; j < n; ++j) Hy[i] += H[i * n + j] * y[j];
                                const double yHy = dot(y, Hy);
                                for (std::size_t i = 0; i < n; ++i)
                                    for (std::size_t j = 0; j < n; ++j)
                                        H[i * n + j] += -r * (step[i] * Hy[j] + Hy[i] * step[j]) +
                                                        (r * r * yHy + r) * step[i] * step[j];
                                have_curvature = true;
                            }
                            const double df = fx - ft;
                            const double dx = inf_norm(step);
                            x = std::move(trial);
                            fx = ft;
                            g = std::move(g_new);
                            record(x, fx, s, it);
                            ++out.stats.iterations;
                            accepted = true;
                            if (std::abs(df) < config.function_tolerance && dx < config.step_tolerance)
                                converged = true;
                            break;
                        }
                    }
                    if (!accepted && quasi_newton) {
                        reset_h(1.0);
                        have_curvature = false;
                    }
                }
                // No descent along either direction: stationary to working precision.
                if (!accepted) converged = true;
            }
            if (!converged) all_converged = false;
        }
    } catch (const BudgetExhausted&) {
        out.stats.deadline_hit = true;
        all_converged = false;
    }
    out.stats.converged = all_converged;
    out.stats.evaluations = gate.count();
    out.stats.elapsed_s = deadline.elapsed_s();
    return out;
}

}  // namespace detail

/// Minimizes `f` over the box from each start, using finite-difference gradients.
template <class F>
BudgetedSolution solve_budgeted(F&& f, const Bounds& bounds, std::span<const std::vector<double>> starts,
                                const OptimizerConfig& config) {
    auto objective = [&f](std::span<const double> x) -> double { return f(x); };
    auto grad = [&](std::span<const double> x, detail::EvaluationGate& gate) {
        const std::size_t n = x.size();
        std::vector<double> g(n, 0.0);
        std::vector<double> probe(x.begin(), x.end());
        for (std::size_t i = 0; i < n; ++i) {
            const double h = config.fd_step * std::max(1.0, std::abs(x[i]));
            const double up = std::min(x[i] + h, bounds.upper[i]);
            const double down = std::max(x[i] - h, bounds.lower[i]);
            if (up == down) continue;
            probe[i] = up;
            const double fu = gate(objective, probe);
            probe[i] = down;
            const double fd = gate(objective, probe);
            probe[i] = x[i];
            g[i] = (fu - fd) / (up - down);
            if (!std::isfinite(g[i])) g[i] = 0.0;
        }
        return g;
    };
    return detail::solve_impl(objective, grad, bounds, starts, config);
}

/// Same, with an analytic gradient `grad(x) -> std::vector<double>`.
template <class F, class G>
BudgetedSolution solve_budgeted(F&& f, G&& gradient, const Bounds& bounds,
                                std::span<const std::vector<double>> starts, const OptimizerConfig& config) {
    auto objective = [&f](std::span<const double> x) -> double { return f(x); };
    auto grad = [&](std::span<const double> x, detail::EvaluationGate&) -> std::vector<double> {
        return gradient(x);
    };
    return detail::solve_impl(objective, grad, bounds, starts, config);
}

}  // namespace basepar
