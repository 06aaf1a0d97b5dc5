#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "basepar/mpc.hpp"
#include "basepar/scenario.hpp"
#include "oracle.hpp"
#include "random_cases.hpp"

using namespace basepar;

namespace {

std::vector<ExogenousInput> forecast_from(const ScenarioConfig& s, std::size_t steps) {
    std::vector<ExogenousInput> f;
    for (std::size_t k = 0; k < steps; ++k) f.push_back(s.demand_at(k));
    return f;
}

MpcProblem case_problem(MpcKind kind, std::size_t horizon, double gamma = 0.8) {
    const auto s = default_scenario();
    return make_mpc_problem(kind, horizon, kind == MpcKind::conventional ? "CMPC" : "PMPC", s.params, s.initial,
                            forecast_from(s, horizon), gamma, s.alinea.initial_metering, {0, 8}, {0, 1});
}

OptimizerConfig capped(long evaluations) {
    OptimizerConfig c;
    c.budget_s = std::numeric_limits<double>::infinity();
    c.max_evaluations = evaluations;
    return c;
}

// Parameterized rollout written independently on top of the reference step.
long double reference_parameterized(const MpcProblem& p, const std::vector<double>& theta) {
    std::vector<double> n = p.initial.n, q = p.initial.q, prev = p.mu_prev;
    const auto cells = p.params.metered_cells();
    long double total = 0;
    for (std::size_t k = 0; k < p.horizon; ++k) {
        std::vector<double> mu(cells.size());
        for (std::size_t r = 0; r < cells.size(); ++r) {
            const double rho = n[cells[r]] / p.params.cells[cells[r]].length_m;
            double m = prev[r] + theta[r] * (p.params.rho_crit - rho);
            m = std::min(std::max(m, 0.0), p.metering_bounds.hi);
            mu[r] = m;
        }
        prev = mu;
        const auto& in = p.forecast[std::min(k, p.forecast.size() - 1)];
        const auto nx = oracle::step(p.params, n, q, in.mainstream_demand, in.ramp_demands, mu, p.gamma);
        total += nx.j;
        for (std::size_t i = 0; i < n.size(); ++i) {
            n[i] = (double)nx.n[i];
            q[i] = (double)nx.q[i];
        }
    }
    return total;
}

}  // namespace

TEST(MpcObjective, ConventionalMatchesReference) {
    const auto p = case_problem(MpcKind::conventional, 10);
    std::mt19937_64 rng(51);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> x(p.decision_dim());
        for (double& v : x) v = cases::uniform(rng, 0, 8);
        std::vector<std::vector<double>> plan;
        for (std::size_t k = 0; k < p.horizon; ++k) plan.emplace_back(x.begin() + 3 * k, x.begin() + 3 * k + 3);
        const long double ref = oracle::rollout_cost(p.params, p.initial.n, p.initial.q, p.forecast, plan, 10, 0.8);
        ASSERT_NEAR(objective(p, x), (double)ref, 1e-9);
    }
}

TEST(MpcObjective, ParameterizedMatchesReference) {
    const auto p = case_problem(MpcKind::parameterized, 10);
    std::mt19937_64 rng(52);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> th(3);
        for (double& v : th) v = cases::uniform(rng, 0, 1);
        ASSERT_NEAR(objective(p, th), (double)reference_parameterized(p, th), 1e-9);
    }
}

TEST(MpcObjective, HorizonOneWithoutDistanceTermIsTravelTime) {
    const auto p = case_problem(MpcKind::conventional, 1, 0.0);
    const std::vector<double> x{1, 2, 3};
    const auto r = step(p.initial, p.forecast[0], x, p.params);
    EXPECT_NEAR(objective(p, x), 20.0 / 3600.0 * r.next.total_vehicles(), 1e-12);
}

TEST(MpcObjective, ZeroGainFromClosedRampsKeepsThemClosed) {
    auto p = case_problem(MpcKind::parameterized, 10);
    p.mu_prev = {0, 0, 0};
    const auto ev = evaluate_decision(p, std::vector<double>{0, 0, 0});
    for (const auto& mu : ev.metering)
        for (double v : mu) EXPECT_EQ(v, 0.0);
}

TEST(MpcObjective, ClipsOutOfBoxDecisions) {
    const auto p = case_problem(MpcKind::conventional, 3);
    std::vector<double> x(9, 20.0), clipped(9, 8.0);
    EXPECT_EQ(objective(p, x), objective(p, clipped));
    EXPECT_THROW(objective(p, std::vector<double>(4, 1.0)), std::invalid_argument);
}

TEST(MpcWarmStart, ShiftedStarts) {
    const std::vector<std::vector<double>> history{{4, 5, 6}, {1, 2, 3}};
    const auto s = make_shift_warm_starts(history, 1);
    ASSERT_EQ(s.size(), 3u);
    EXPECT_EQ(s[0].origin, "shift");
    EXPECT_EQ(s[0].x, (std::vector<double>{2, 3, 3}));
    EXPECT_EQ(s[1].origin, "shift-average");
    EXPECT_EQ(s[1].x, (std::vector<double>{4, 4.5, 4.5}));
    EXPECT_EQ(s[2].x, (std::vector<double>{4, 4.5, 4.5}));

    const std::vector<std::vector<double>> one{{1, 2, 3}};
    const auto t = make_shift_warm_starts(one, 1);
    ASSERT_EQ(t.size(), 2u);
    EXPECT_EQ(t[0].x, t[1].x);
    EXPECT_TRUE(make_shift_warm_starts({}, 1).empty());
}

TEST(MpcWarmStart, ShiftMovesWholeBlocks) {
    const std::vector<double> x{1, 2, 3, 4, 5, 6};
    EXPECT_EQ(shift_sequence(x, 2, 1), (std::vector<double>{3, 4, 5, 6, 5, 6}));
    EXPECT_EQ(shift_sequence(x, 2, 5), (std::vector<double>{5, 6, 5, 6, 5, 6}));
    EXPECT_EQ(shift_sequence(x, 6, 1), x);
    EXPECT_THROW(shift_sequence(x, 4, 1), std::invalid_argument);
}

TEST(MpcWarmStart, BaseStartIsTheRolloutPrefix) {
    const auto s = default_scenario();
    Measurement m{s.initial, s.demand_at(0), s.initial_upstream};
    AlineaController base(s.alinea.gains, s.alinea.initial_metering);
    const auto f = forecast_from(s, 10);
    const auto warm = warm_start_rollout(base, m, f, 10, s.params, 0.8);
    const auto p = case_problem(MpcKind::conventional, 3);
    const auto starts = base_warm_starts(p, warm);
    ASSERT_EQ(starts.size(), 1u);
    std::vector<double> expect;
    for (std::size_t k = 0; k < 3; ++k) expect.insert(expect.end(), warm.metering[k].begin(), warm.metering[k].end());
    EXPECT_EQ(starts[0].x, expect);

    const auto pp = case_problem(MpcKind::parameterized, 10);
    const auto ps = base_warm_starts(pp, warm);
    EXPECT_EQ(ps[0].x, warm.gains[0]);
    for (double g : ps.back().x) EXPECT_NEAR(g, 0.016, 1e-15);  // window mean of constant gains
}

TEST(MpcSolve, SingleControllerCellMatchesDirectSolve) {
    const auto s = default_scenario();
    Measurement m{s.initial, s.demand_at(0), s.initial_upstream};
    AlineaController base(s.alinea.gains, s.alinea.initial_metering);
    const auto warm = warm_start_rollout(base, m, forecast_from(s, 10), 10, s.params, 0.8);
    const std::vector<MpcProblem> cell{case_problem(MpcKind::conventional, 3)};
    const std::vector<std::vector<std::vector<double>>> histories(1);
    const auto config = capped(400);
    const auto got = run_parallel_cell(cell, warm, histories, config, true);

    const auto starts = collect_starts(cell[0], warm, histories[0]);
    auto f = [&](std::span<const double> x) { return objective(cell[0], x); };
    const auto direct = solve_budgeted(f, cell[0].bounds, starts, config);
    ASSERT_EQ(got.size(), 1u);
    EXPECT_EQ(got[0].best.decision, direct.best_iterate().x);
    EXPECT_EQ(got[0].best.predicted_cost, direct.best_iterate().value);
    EXPECT_LE(got[0].best.predicted_cost, objective(cell[0], starts[0]));
}

TEST(MpcSolve, SerialAndThreadedAgreeUnderAnEvaluationCap) {
    const auto s = default_scenario();
    Measurement m{s.initial, s.demand_at(0), s.initial_upstream};
    AlineaController base(s.alinea.gains, s.alinea.initial_metering);
    const auto warm = warm_start_rollout(base, m, forecast_from(s, 10), 10, s.params, 0.8);
    const std::vector<MpcProblem> cell{case_problem(MpcKind::conventional, 3),
                                       case_problem(MpcKind::conventional, 10)};
    const std::vector<std::vector<std::vector<double>>> histories(2);
    const auto a = run_parallel_cell(cell, warm, histories, capped(300), true);
    const auto b = run_parallel_cell(cell, warm, histories, capped(300), true);
    const auto c = run_parallel_cell(cell, warm, histories, capped(300), false);
    for (std::size_t i = 0; i < 2; ++i) {
        EXPECT_EQ(a[i].best.decision, b[i].best.decision);
        EXPECT_EQ(a[i].best.decision, c[i].best.decision);
        EXPECT_EQ(a[i].best.metering.size(), cell[i].horizon);
    }
}

TEST(MpcSolve, AllIteratesAreLabelled) {
    auto config = capped(200);
    config.termination = TerminationOption::all_iterates;
    const auto p = case_problem(MpcKind::conventional, 3);
    const std::vector<std::vector<double>> starts{std::vector<double>(9, 1.0)};
    const auto r = solve_mpc(p, starts, config);
    const auto cands = r.candidates();
    ASSERT_GE(cands.size(), 1u);
    for (std::size_t i = 0; i < cands.size(); ++i) EXPECT_EQ(cands[i].label, "CMPC#" + std::to_string(i));
    for (std::size_t i = 1; i < cands.size(); ++i) EXPECT_LE(cands[i].predicted_cost, cands[0].predicted_cost);
}

// With one step and a gain box that maps exactly onto the metering box, both
// formulations search the same set and must find the same cost.
TEST(MpcSolve, FormulationsAgreeForHorizonOne) {
    std::mt19937_64 rng(53);
    const auto s = default_scenario();
    OptimizerConfig config = capped(4000);
    config.function_tolerance = 1e-3;
    for (int trial = 0; trial < 10; ++trial) {
        auto state = cases::random_state(rng, s.params);
        const std::vector<ExogenousInput> f{cases::random_input(rng, s.params)};
        std::vector<double> prev(3);
        for (double& v : prev) v = cases::uniform(rng, 0, 8);
        auto conv = make_mpc_problem(MpcKind::conventional, 1, "C", s.params, state, f, 0.8, prev, {0, 8}, {0, 1});
        auto par = make_mpc_problem(MpcKind::parameterized, 1, "P", s.params, state, f, 0.8, prev, {0, 8}, {0, 1});
        std::vector<double> mid_theta(3);
        const auto cells = s.params.metered_cells();
        for (std::size_t r = 0; r < 3; ++r) {
            const double slope = s.params.rho_crit - state.n[cells[r]] / s.params.cells[cells[r]].length_m;
            const double a = (0 - prev[r]) / slope, b = (8 - prev[r]) / slope;
            par.bounds.lower[r] = std::min(a, b);
            par.bounds.upper[r] = std::max(a, b);
            mid_theta[r] = (4 - prev[r]) / slope;
        }
        const std::vector<std::vector<double>> cs{{4, 4, 4}}, ps{mid_theta};
        const auto rc = solve_mpc(conv, cs, config);
        const auto rp = solve_mpc(par, ps, config);
        EXPECT_NEAR(rc.best.predicted_cost, rp.best.predicted_cost, config.function_tolerance) << "trial " << trial;
    }
}

TEST(MpcProblem, Validation) {
    const auto s = default_scenario();
    EXPECT_THROW(make_mpc_problem(MpcKind::conventional, 0, "x", s.params, s.initial, forecast_from(s, 1), 0.8,
                                  {}, {0, 8}, {0, 1}),
                 std::invalid_argument);
    EXPECT_THROW(make_mpc_problem(MpcKind::parameterized, 3, "x", s.params, s.initial, forecast_from(s, 1), 0.8,
                                  {0.1}, {0, 8}, {0, 1}),
                 TopologyError);
    EXPECT_THROW(make_mpc_problem(MpcKind::conventional, 3, "x", s.params, s.initial, {}, 0.8, {}, {0, 8}, {0, 1}),
                 std::invalid_argument);
    EXPECT_EQ(case_problem(MpcKind::conventional, 10).decision_dim(), 30u);
    EXPECT_EQ(case_problem(MpcKind::parameterized, 10).decision_dim(), 3u);
}
