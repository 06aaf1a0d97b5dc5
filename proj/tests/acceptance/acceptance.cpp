// Acceptance checks: one PASS/FAIL line per criterion, exit status = number of
// failed criteria.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "../unit/oracle.hpp"
#include "../unit/random_cases.hpp"
#include "basepar/experiment.hpp"
#include "basepar/scenario.hpp"

using namespace basepar;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Verdict {
    bool ok = true;
    std::vector<std::string> notes;

    void check(bool cond, const std::string& what) {
        if (!cond) {
            ok = false;
            notes.push_back("failed: " + what);
        }
    }
    void note(const std::string& s) { notes.push_back(s); }
};

int failures = 0;

void report(int id, const std::string& title, const Verdict& v) {
    std::cout << (v.ok ? "PASS" : "FAIL") << " criterion " << id << ": " << title << '\n';
    for (const auto& n : v.notes) std::cout << "    " << n << '\n';
    std::cout.flush();
    if (!v.ok) ++failures;
}

std::string fmt(double v, int precision = 6) {
    std::ostringstream os;
    os.precision(precision);
    os << v;
    return os.str();
}

const std::string kScenario = std::string(BASEPAR_SOURCE_DIR) + "/scenarios/default.yaml";

// ---- 1 -------------------------------------------------------------------------

void criterion_actm() {
    Verdict v;
    const auto t0 = Clock::now();
    const auto s = default_scenario();
    const auto& p = s.params;

    // Worked examples on the case-study network.
    NetworkState x{{3.8, 36.2, 5.1, 25.3, 3.9, 0.0}, {0.0, 5.5, 0.0, 9.6, 1.6, 0.0}};
    ExogenousInput in{4.0, {0.0, 2.0, 0.0, 1.5, 0.8, 0.0}};
    const std::vector<double> mu{0.5, 8.0, 8.0};
    const auto r = step(x, in, mu, p, 0.8);
    const auto ref = oracle::step(p, x.n, x.q, in.mainstream_demand, in.ramp_demands, mu, 0.8);
    auto near = [&](double a, double b, const std::string& what) { v.check(std::abs(a - b) <= 1e-9, what + " = " + fmt(a, 17)); };
    near(compute_onramp_inflow(x, in, {}, p)[1], 7.5, "unmetered e_2");
    near(r.flows.e[1], 0.5, "metered e_2");
    near(r.flows.o[1], 8.0, "o_2");
    near(r.flows.s[1], 0.35 / 0.65 * 8.0, "s_2");
    near(r.next.n[1], 36.2 + 3.8 + 0.5 - 8.0 - 0.35 / 0.65 * 8.0, "n_2 next");
    near(r.next.q[1], 7.0, "q_2 next");
    near(density(x, p)[1], 36.2 / 560.0, "rho_2");
    for (std::size_t i = 0; i < p.size(); ++i) {
        near(r.flows.e[i], (double)ref.f.e[i], "e vs reference");
        near(r.flows.o[i], (double)ref.f.o[i], "o vs reference");
        near(r.flows.s[i], (double)ref.f.s[i], "s vs reference");
        near(r.next.n[i], (double)ref.n[i], "n vs reference");
    }
    near(r.cost.j, (double)ref.j, "J vs reference");

    // Random networks, states and inputs against the reference.
    std::mt19937_64 rng(1001);
    double worst = 0.0;
    for (int trial = 0; trial < 2000; ++trial) {
        const auto net = cases::random_network(rng, 2 + trial % 8);
        const auto st = cases::random_state(rng, net);
        const auto inp = cases::random_input(rng, net);
        const auto m = cases::random_metering(rng, net);
        const auto a = step(st, inp, m, net, 0.8);
        const auto b = oracle::step(net, st.n, st.q, inp.mainstream_demand, inp.ramp_demands, m, 0.8);
        for (std::size_t i = 0; i < net.size(); ++i) {
            worst = std::max({worst, std::abs(a.flows.e[i] - (double)b.f.e[i]), std::abs(a.flows.o[i] - (double)b.f.o[i]),
                              std::abs(a.flows.s[i] - (double)b.f.s[i]), std::abs(a.next.n[i] - (double)b.n[i]),
                              std::abs(a.next.q[i] - (double)b.q[i])});
        }
        worst = std::max(worst, std::abs(a.cost.j - (double)b.j));
    }
    v.check(worst <= 1e-9, "random cases within 1e-9");
    v.note("2000 random steps, worst deviation from reference " + fmt(worst, 3));

    // Conservation over a 180-step random-demand run on the case-study network.
    NetworkState cur = s.initial;
    double expected = cur.total_vehicles(), drift = 0.0;
    bool conserved = true;
    for (int k = 0; k < 180; ++k) {
        const auto inp = cases::random_input(rng, p);
        const auto m = cases::random_metering(rng, p);
        const auto rr = step(cur, inp, m, p);
        expected += rr.flows.mainstream_inflow - rr.cost.throughput;
        for (std::size_t i = 0; i < p.size(); ++i)
            if (p.cells[i].has_onramp) expected += inp.ramp_demands[i];
        cur = rr.next;
        drift = std::abs(cur.total_vehicles() - expected);
        conserved = conserved && drift <= 1e-9 * (k + 1);
    }
    v.check(conserved, "conservation within 1e-9 per step");
    v.note("conservation drift after 180 steps " + fmt(drift, 3) + " veh");
    const double elapsed = seconds_since(t0);
    v.check(elapsed < 1.0, "runtime < 1 s");
    v.note("runtime " + fmt(elapsed, 3) + " s");
    report(1, "ACTM matches the reference evaluation; vehicles are conserved", v);
}

// ---- 2 -------------------------------------------------------------------------

void criterion_alinea() {
    Verdict v;
    AlineaState st{{0.016}, {0.5}};
    const std::vector<double> rho{36.2 / 560.0};
    const double mu = alinea_step(st, rho, 0.0335)[0];
    v.check(std::abs(mu - 0.499502) <= 1e-6, "case value 0.499502");
    v.note("mu = " + fmt(mu, 10));

    AlineaState fixed{{0.016, 0.4, 5.0}, {0.5, 0.2, 0.4}};
    const std::vector<double> crit(3, 0.0335);
    bool still = true;
    for (int k = 0; k < 20; ++k) still = still && alinea_step(fixed, crit, 0.0335) == std::vector<double>{0.5, 0.2, 0.4};
    v.check(still, "fixed point at critical density");

    AlineaState hi{{50.0}, {0.3}};
    const std::vector<double> dense{0.12};
    v.check(alinea_step(hi, dense, 0.0335)[0] == 0.0, "clamp at zero");
    report(2, "ALINEA: fixed point, clamp, case value", v);
}

// ---- 3 -------------------------------------------------------------------------

double grid_error(const CellParams& c, double rho_crit, double mu_prev, const MlpInput& x, double theta) {
    const double n = x[0], q = x[1], d = x[2], up = x[3];
    const double m = std::max(0.0, mu_prev + theta * (rho_crit - n / c.length_m));
    const double e = std::max(0.0, std::min({q + d, c.xi * (c.capacity - n), m}));
    return std::abs(rho_crit - (n + up + e - c.eta_moving * (n + c.blend_alpha * e)) / c.length_m);
}

void criterion_training() {
    Verdict v;
    const auto t0 = Clock::now();
    const ScenarioConfig s = load_scenario(kScenario);
    const auto data = generate_training_data(s.params, s.alinea.initial_metering, s.ann.samples, s.ann.ranges,
                                             s.ann.train.theta_max, s.ann.data_seed);
    // Audit: the first 7 samples of each cell (20 in total) against a 1e-4 grid.
    int audited = 0;
    double worst_theta = 0.0;
    for (const auto& cell : data) {
        const std::size_t r = &cell - data.data();
        const CellParams& c = s.params.cells[cell.cell];
        for (std::size_t k = 0; k < cell.samples.size() && audited < 20 && k < 7; ++k, ++audited) {
            const auto& smp = cell.samples[k];
            const double mu_prev = s.alinea.initial_metering[r];
            double best = std::numeric_limits<double>::infinity(), arg = 0.0;
            for (int g = 0; g <= 10000; ++g) {
                const double th = g * 1e-4 * s.ann.train.theta_max;
                const double err = grid_error(c, s.params.rho_crit, mu_prev, smp.inputs, th);
                if (err < best - 1e-15) {
                    best = err;
                    arg = th;
                }
            }
            const double err = grid_error(c, s.params.rho_crit, mu_prev, smp.inputs, smp.target);
            v.check(err <= best + 1e-12, "sample " + std::to_string(audited) + " is not a grid minimum");
            worst_theta = std::max(worst_theta, std::abs(smp.target - arg));
        }
    }
    v.check(audited == 20, "20 audited samples");
    v.check(worst_theta <= 1e-4, "theta within grid resolution");
    v.note(std::to_string(audited) + " samples audited, worst |theta - theta_grid| = " + fmt(worst_theta, 3));

    const AnnTraining t = train_ann_bank(s);
    for (std::size_t r = 0; r < t.results.size(); ++r) {
        const auto& res = t.results[r];
        const double ratio = res.validation_rmse / res.target_std;
        v.check(ratio <= 0.25, "cell " + std::to_string(t.bank[r].cell + 1) + " validation RMSE ratio");
        v.note("cell " + std::to_string(t.bank[r].cell + 1) + ": validation RMSE " + fmt(res.validation_rmse, 4) +
               ", target std " + fmt(res.target_std, 4) + ", ratio " + fmt(ratio, 4) + " (limit 0.25)");
    }
    const double elapsed = seconds_since(t0);
    v.check(elapsed < 60.0, "runtime < 60 s");
    v.note("runtime " + fmt(elapsed, 3) + " s");
    report(3, "gain targets match grid search; networks fit the held-out split", v);
}

// ---- 4 -------------------------------------------------------------------------

void criterion_solver() {
    Verdict v;
    std::mt19937_64 rng(1004);

    // Convex quadratic with a known interior minimizer.
    {
        std::vector<double> c(8), w(8);
        for (auto& x : c) x = cases::uniform(rng, 1, 7);
        for (auto& x : w) x = cases::uniform(rng, 0.2, 5);
        auto f = [&](std::span<const double> x) {
            double s = 0;
            for (std::size_t i = 0; i < x.size(); ++i) s += w[i] * (x[i] - c[i]) * (x[i] - c[i]);
            return s;
        };
        OptimizerConfig cfg;
        cfg.function_tolerance = 1e-14;
        cfg.step_tolerance = 1e-12;
        cfg.max_iterations = 500;
        const std::vector<std::vector<double>> starts{std::vector<double>(8, 0.0)};
        const auto sol = solve_budgeted(f, Bounds::uniform(8, 0, 8), starts, cfg);
        double err = 0;
        for (std::size_t i = 0; i < 8; ++i) err = std::max(err, std::abs(sol.best_iterate().x[i] - c[i]));
        v.check(err <= 1e-5, "quadratic minimizer within 1e-5");
        v.note("quadratic: max |x - x*| = " + fmt(err, 3));
    }

    // Random MPC instances on the case-study network.
    const auto s = default_scenario();
    int monotone = 0, dominant = 0;
    for (int inst = 0; inst < 20; ++inst) {
        const auto state = cases::random_state(rng, s.params);
        const std::vector<ExogenousInput> fc{cases::random_input(rng, s.params)};
        const bool conventional = inst % 2 == 0;
        const auto p = make_mpc_problem(conventional ? MpcKind::conventional : MpcKind::parameterized,
                                        conventional ? 3 : 10, "mpc", s.params, state, fc, 0.8,
                                        s.alinea.initial_metering, {0, 8}, {0, 1});
        Measurement m{state, fc[0], std::vector<double>(s.params.size(), 0.0)};
        AlineaController base(s.alinea.gains, s.alinea.initial_metering);
        const auto warm = warm_start_rollout(base, m, fc, 10, s.params, 0.8);
        std::vector<std::vector<double>> starts;
        for (auto& st : base_warm_starts(p, warm)) starts.push_back(st.x);
        for (int k = 0; k < 2; ++k) {
            std::vector<double> x(p.decision_dim());
            for (double& e : x) e = cases::uniform(rng, p.bounds.lower[0], p.bounds.upper[0]);
            starts.push_back(x);
        }
        OptimizerConfig cfg;
        cfg.budget_s = std::numeric_limits<double>::infinity();
        cfg.max_evaluations = 3000;
        auto f = [&](std::span<const double> x) { return objective(p, x); };
        const auto sol = solve_budgeted(f, p.bounds, starts, cfg);
        bool mono = true;
        for (std::size_t k = 1; k < sol.iterates.size(); ++k)
            mono = mono && sol.iterates[k].best_so_far <= sol.iterates[k - 1].best_so_far;
        bool dom = true;
        for (const auto& x : starts) dom = dom && sol.best_iterate().value <= objective(p, x);
        monotone += mono;
        dominant += dom;
    }
    v.check(monotone == 20, "best-so-far non-increasing on every instance");
    v.check(dominant == 20, "final J <= every warm start's J on every instance");
    v.note("MPC instances: " + std::to_string(monotone) + "/20 monotone, " + std::to_string(dominant) +
           "/20 dominate their starts");

    // Gradients: finite differences against analytic derivatives.
    double worst = 0;
    {
        auto f = [](std::span<const double> x) { return std::exp(0.3 * x[0]) * std::cos(x[1]) + x[0] * x[1] * x[1]; };
        for (int k = 0; k < 100; ++k) {
            const std::vector<double> x{cases::uniform(rng, -3, 3), cases::uniform(rng, -3, 3)};
            const auto g = finite_difference_gradient(f, x, Bounds::uniform(2, -10, 10), 1e-6);
            const double g0 = 0.3 * std::exp(0.3 * x[0]) * std::cos(x[1]) + x[1] * x[1];
            const double g1 = -std::exp(0.3 * x[0]) * std::sin(x[1]) + 2 * x[0] * x[1];
            worst = std::max(worst, std::abs(g[0] - g0) / std::max(1.0, std::abs(g0)));
            worst = std::max(worst, std::abs(g[1] - g1) / std::max(1.0, std::abs(g1)));
        }
        MlpParams net;
        net.input_scale = {80, 20, 4, 8};
        auto w = net.flatten();
        for (double& e : w) e = cases::uniform(rng, -2, 2);
        net.unflatten(w);
        const MlpInput in{30, 5, 2, 4};
        std::vector<double> g(w.size());
        mlp_forward_with_gradient(net, in, g);
        auto loss = [&](std::span<const double> ww) {
            MlpParams q = net;
            q.unflatten(ww);
            return mlp_forward(q, in);
        };
        const auto fd = finite_difference_gradient(
            loss, w, Bounds::uniform(w.size(), -std::numeric_limits<double>::infinity(),
                                     std::numeric_limits<double>::infinity()), 1e-6);
        for (std::size_t i = 0; i < w.size(); ++i)
            worst = std::max(worst, std::abs(g[i] - fd[i]) / std::max(1.0, std::abs(g[i])));
    }
    v.check(worst <= 1e-4, "gradient check relative 1e-4");
    v.note("gradient check: worst relative deviation " + fmt(worst, 3));
    report(4, "solver reaches minimizers, is anytime, dominates its starts; gradients check out", v);
}

// ---- 5 -------------------------------------------------------------------------

void criterion_budget() {
    Verdict v;
    const double eval_s = 0.05;
    auto slow = [&](std::span<const double> x) {
        std::this_thread::sleep_for(std::chrono::duration<double>(eval_s));
        return (x[0] - 1) * (x[0] - 1) + std::sin(3 * x[1]);
    };
    OptimizerConfig cfg;
    cfg.budget_s = 2.0;
    cfg.function_tolerance = 1e-14;
    cfg.step_tolerance = 1e-14;
    const std::vector<std::vector<double>> starts{{7, 7}, {0, 4}};
    const auto t0 = Clock::now();
    const auto sol = solve_budgeted(slow, Bounds::uniform(2, 0, 8), starts, cfg);
    const double wall = seconds_since(t0);
    v.check(sol.stats.deadline_hit, "the slow solve runs into the deadline");
    v.check(wall <= (2.0 + eval_s) * 1.1, "solve wall time <= (2 s + one evaluation) * 1.1");
    v.note("slow objective (" + fmt(eval_s) + " s/eval): solve took " + fmt(wall, 4) + " s");

    // Full control steps on the default scenario, threaded, default 2 s budget.
    ScenarioConfig s = load_scenario(kScenario);
    s.serial = false;
    s.steps = 5;
    const auto bank = resolve_ann_bank(s);
    const RunLog log = run_experiment(s, ControllerChoice::base_parallel, bank);
    double worst = 0;
    for (const auto& st : log.steps) worst = std::max(worst, st.selection.elapsed_s);
    const double cycle = s.params.sample_cycle_s;
    v.check(worst < 0.5 * cycle, "control step under half the sampling cycle");
    v.note("base-parallel control step, " + std::to_string(s.steps) + " steps: slowest " + fmt(worst, 4) +
           " s (cycle " + fmt(cycle) + " s, budget " + fmt(s.optimizer.budget_s) + " s)");
    report(5, "solves respect the wall-clock budget; control steps fit the sampling cycle", v);
}

// ---- 6 -------------------------------------------------------------------------

void criterion_selector(const ScenarioConfig& s, const std::vector<MlpBankEntry>& bank, const RunLog& log) {
    Verdict v;
    std::size_t exact = 0;
    for (const auto& st : log.steps) {
        const auto& sel = st.selection;
        const auto [arg, fell_back] = select_best(sel.epsilon, 0);
        bool ok = !sel.fallback && !fell_back && sel.winner == arg && sel.winner < sel.labels.size() &&
                  sel.winner_label == sel.labels[sel.winner];
        if (ok) {
            const double best = *std::min_element(sel.epsilon.begin(), sel.epsilon.end());
            ok = sel.epsilon[sel.winner] == best;
        }
        exact += ok;
    }
    v.check(exact == log.steps.size(), "applied candidate attains the minimum at every step");
    v.note(std::to_string(exact) + "/" + std::to_string(log.steps.size()) + " steps select the minimum epsilon");

    // Superset check: from states along the run, the full line-up against the
    // same line-up without PMPC(2).
    std::size_t checked = 0, held = 0;
    for (std::size_t k = 0; k < log.steps.size(); k += 15) {
        const auto& st = log.steps[k];
        const Measurement m{st.state, st.measured_demand,
                            k == 0 ? s.initial_upstream : upstream_flows(log.steps[k - 1].flows)};
        auto full_cfg = make_architecture(s, ControllerChoice::base_parallel, bank);
        auto sub_cfg = make_architecture(s, ControllerChoice::base_parallel, bank);
        sub_cfg.slots[1].cell.pop_back();
        for (auto* cfg : {&full_cfg, &sub_cfg})
            for (auto& slot : cfg->slots) slot.controller->set_previous_metering(st.selection.applied);
        BaseParallelArchitecture full(std::move(full_cfg), s.params), sub(std::move(sub_cfg), s.params);
        const auto fc = persistence_forecast(st.measured_demand, full.max_horizon());
        const auto a = full.control_step(m, fc);
        const auto b = sub.control_step(m, fc);
        ++checked;
        held += a.epsilon[a.winner] <= b.epsilon[b.winner];
    }
    v.check(held == checked, "adding a controller never raises the selected epsilon");
    v.note("superset check at " + std::to_string(checked) + " states: " + std::to_string(held) + " hold");
    report(6, "selector applies the argmin; more candidates never hurt", v);
}

// ---- 7 -------------------------------------------------------------------------

void criterion_ordering(const std::vector<RunLog>& logs, double elapsed) {
    Verdict v;
    auto avg = [&](std::size_t i) {
        return logs[i].summary.avg_cost_per_vehicle.value_or(std::numeric_limits<double>::quiet_NaN());
    };
    for (std::size_t i = 0; i < logs.size(); ++i)
        v.note(logs[i].controller + ": avg cost/veh " + fmt(avg(i), 8) + " s, J_total " +
               fmt(logs[i].summary.j_total, 8) + " h");
    // kAllChoices order: ALINEA, ANN, CMPC(1), CMPC(2), PMPC(1), PMPC(2), base-parallel.
    v.check(avg(0) >= avg(1), "ALINEA >= ANN");
    for (std::size_t i = 2; i <= 5; ++i) v.check(avg(1) >= avg(i), "ANN >= " + logs[i].controller);
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i <= 5; ++i) best = std::min(best, logs[i].summary.j_total);
    const double bp = logs[6].summary.j_total;
    v.check(bp <= best + 0.005 * std::abs(best), "base-parallel J_total within 0.5% of the best standalone");
    v.note("base-parallel J_total " + fmt(bp, 10) + " vs best standalone " + fmt(best, 10));
    v.check(elapsed < 600.0, "runtime < 10 min");
    v.note("runtime " + fmt(elapsed, 4) + " s (serial, seed " + std::to_string(logs[0].seed) + ")");
    report(7, "cost ordering on the default scenario", v);
}

// ---- 8 -------------------------------------------------------------------------

void criterion_determinism(const ScenarioConfig& s, const std::vector<MlpBankEntry>& bank) {
    Verdict v;
    auto render = [&] {
        std::ostringstream os;
        write_run_log(run_experiment(s, ControllerChoice::base_parallel, bank), os);
        return os.str();
    };
    const std::string a = render(), b = render();
    v.check(!a.empty() && a == b, "identical logs");
    v.note(std::to_string(a.size()) + " bytes per log, identical: " + (a == b ? "yes" : "no"));
    report(8, "serial runs with one seed give byte-identical logs", v);
}

}  // namespace

int main() {
    try {
        criterion_actm();
        criterion_alinea();
        criterion_training();
        criterion_solver();
        criterion_budget();

        ScenarioConfig s = load_scenario(kScenario);
        s.serial = true;
        const auto bank = resolve_ann_bank(s);
        const auto t0 = Clock::now();
        std::vector<RunLog> logs;
        for (ControllerChoice c : kAllChoices) logs.push_back(run_experiment(s, c, bank));
        const double elapsed = seconds_since(t0);

        criterion_selector(s, bank, logs.back());
        criterion_ordering(logs, elapsed);
        criterion_determinism(s, bank);
    } catch (const std::exception& e) {
        std::cout << "FAIL acceptance run aborted: " << e.what() << '\n';
        return 99;
    }
    std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << '\n';
    return failures;
}
