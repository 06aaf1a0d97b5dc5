// Closed-loop experiments on a scenario: controller line-ups, the simulation
// loop, metrics, the JSONL run log and plot tables.
#pragma once

#include <cctype>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "basepar/actm.hpp"
#include "basepar/base_controllers.hpp"
#include "basepar/gain_training.hpp"
#include "basepar/mlp.hpp"
#include "basepar/orchestrator.hpp"
#include "basepar/scenario.hpp"

namespace basepar {

inline constexpr std::string_view kRunLogSchema = "basepar.runlog/1";

enum class ControllerChoice { alinea, ann, cmpc1, cmpc2, pmpc1, pmpc2, base_parallel };

inline constexpr ControllerChoice kAllChoices[] = {
    ControllerChoice::alinea, ControllerChoice::ann,   ControllerChoice::cmpc1,         ControllerChoice::cmpc2,
    ControllerChoice::pmpc1,  ControllerChoice::pmpc2, ControllerChoice::base_parallel,
};

inline const char* to_label(ControllerChoice c) {
    switch (c) {
        case ControllerChoice::alinea: return "ALINEA";
        case ControllerChoice::ann: return "ANN";
        case ControllerChoice::cmpc1: return "CMPC(1)";
        case ControllerChoice::cmpc2: return "CMPC(2)";
        case ControllerChoice::pmpc1: return "PMPC(1)";
        case ControllerChoice::pmpc2: return "PMPC(2)";
        case ControllerChoice::base_parallel: return "base-parallel";
    }
    return "?";
}

/// Accepts the labels above (any case) and the short forms cmpc1, pmpc2, ...
inline ControllerChoice choice_from_string(std::string s) {
    std::string key;
    for (char ch : s)
        if (std::isalnum(static_cast<unsigned char>(ch))) key += static_cast<char>(std::tolower(ch));
    static const std::map<std::string, ControllerChoice> table{
        {"alinea", ControllerChoice::alinea}, {"ann", ControllerChoice::ann},
        {"cmpc1", ControllerChoice::cmpc1},   {"cmpc2", ControllerChoice::cmpc2},
        {"pmpc1", ControllerChoice::pmpc1},   {"pmpc2", ControllerChoice::pmpc2},
        {"baseparallel", ControllerChoice::base_parallel}};
    if (auto it = table.find(key); it != table.end()) return it->second;
    throw std::invalid_argument("unknown controller '" + s + "'");
}

// ---- implicit base training ---------------------------------------------------

struct AnnTraining {
    std::vector<MlpBankEntry> bank;
    std::vector<TrainResult> results;  // one per metered cell
};

inline AnnTraining train_ann_bank(const ScenarioConfig& s) {
    const auto data = generate_training_data(s.params, s.alinea.initial_metering, s.ann.samples, s.ann.ranges,
                                             s.ann.train.theta_max, s.ann.data_seed);
    AnnTraining out;
    for (const auto& cell : data) {
        TrainResult r = train_mlp(cell.samples, s.ann.train);
        out.bank.push_back({cell.cell, r.params});
        out.results.push_back(std::move(r));
    }
    return out;
}

/// Loads the bank named by the scenario, or trains one.
inline std::vector<MlpBankEntry> resolve_ann_bank(const ScenarioConfig& s) {
    if (!s.ann.params_file.empty()) return load_mlp_bank(s.ann.params_file);
    return train_ann_bank(s).bank;
}

// ---- architecture line-ups ----------------------------------------------------

inline ArchitectureConfig make_architecture(const ScenarioConfig& s, ControllerChoice choice,
                                            const std::vector<MlpBankEntry>& bank) {
    ArchitectureConfig a;
    a.eval_horizon = s.eval_horizon;
    a.optimizer = s.optimizer;
    a.gamma = s.gamma;
    a.metering_bounds = s.mpc.metering_bounds;
    a.gain_bounds = s.mpc.gain_bounds;
    a.serial = s.serial;
    if (s.serial) {
        a.optimizer.budget_s = std::numeric_limits<double>::infinity();
        a.optimizer.max_evaluations = s.serial_max_evaluations;
    }

    auto alinea = [&] { return std::make_unique<AlineaController>(s.alinea.gains, s.alinea.initial_metering); };
    auto ann = [&] {
        return std::make_unique<AnnController>(bank, s.alinea.initial_metering, s.ann.train.theta_max);
    };
    const ParallelSpec c1{MpcKind::conventional, s.mpc.short_horizon, "CMPC(1)"};
    const ParallelSpec c2{MpcKind::conventional, s.mpc.long_horizon, "CMPC(2)"};
    const ParallelSpec p1{MpcKind::parameterized, s.mpc.short_horizon, "PMPC(1)"};
    const ParallelSpec p2{MpcKind::parameterized, s.mpc.long_horizon, "PMPC(2)"};
    switch (choice) {
        case ControllerChoice::alinea: a.slots.push_back({alinea(), {}, true}); break;
        case ControllerChoice::ann: a.slots.push_back({ann(), {}, true}); break;
        // A standalone MPC is seeded by its base controller, which does not compete.
        case ControllerChoice::cmpc1: a.slots.push_back({alinea(), {c1}, false}); break;
        case ControllerChoice::cmpc2: a.slots.push_back({alinea(), {c2}, false}); break;
        case ControllerChoice::pmpc1: a.slots.push_back({ann(), {p1}, false}); break;
        case ControllerChoice::pmpc2: a.slots.push_back({ann(), {p2}, false}); break;
        case ControllerChoice::base_parallel:
            a.slots.push_back({alinea(), {c1, c2}, true});
            a.slots.push_back({ann(), {p1, p2}, true});
            break;
    }
    return a;
}

// ---- run log ------------------------------------------------------------------

struct StepLog {
    NetworkState state;             // at the start of the step
    ExogenousInput true_demand;
    ExogenousInput measured_demand;
    FlowVector flows;
    StageCost cost;
    SelectionRecord selection;
};

struct MetricsSummary {
    double j_total = 0.0;
    double n_total = 0.0;
    std::optional<double> avg_cost_per_vehicle;  // seconds; undefined when nothing left the network
    std::map<std::string, long> wins;
    std::size_t steps = 0;
};

struct RunLog {
    std::string scenario;
    std::string controller;
    std::uint64_t seed = 0;
    bool serial = false;
    std::vector<std::string> sources;
    std::vector<StepLog> steps;
    NetworkState final_state;
    MetricsSummary summary;
};

inline MetricsSummary summarize(const RunLog& log) {
    if (log.steps.empty()) throw std::invalid_argument("cannot summarize an empty run log");
    MetricsSummary m;
    m.steps = log.steps.size();
    for (const auto& s : log.steps) {
        m.j_total += s.cost.j;
        m.n_total += s.cost.throughput;
        ++m.wins[s.selection.winner_label];
    }
    if (m.n_total > 0.0) m.avg_cost_per_vehicle = m.j_total * 3600.0 / m.n_total;
    return m;
}

/// Uniform noise draws u[k][source], fixed by the seed so that every
/// controller in a comparison sees the same disturbance.
inline std::vector<std::vector<double>> draw_noise(const ScenarioConfig& s) {
    std::mt19937_64 rng(s.seed);
    const std::size_t sources = 1 + s.onramps.size();
    std::vector<std::vector<double>> u(s.steps, std::vector<double>(sources, 0.0));
    if (s.noise.fraction == 0.0) return u;
    std::uniform_real_distribution<double> dist(-s.noise.fraction, s.noise.fraction);
    for (auto& row : u)
        for (double& v : row) v = dist(rng);
    return u;
}

/// Closed loop: the plant advances on the true demand, the controllers see
/// the noisy measurement and forecast by persistence.
inline RunLog run_experiment(const ScenarioConfig& s, ControllerChoice choice,
                             const std::vector<MlpBankEntry>& bank) {
    s.validate();
    BaseParallelArchitecture arch(make_architecture(s, choice, bank), s.params);
    const auto noise = draw_noise(s);

    RunLog log;
    log.scenario = s.name;
    log.controller = to_label(choice);
    log.seed = s.seed;
    log.serial = s.serial;
    log.sources = s.source_names();

    NetworkState state = s.initial;
    std::vector<double> upstream = s.initial_upstream;
    for (std::size_t k = 0; k < s.steps; ++k) {
        const ExogenousInput truth = s.demand_at(k);
        ExogenousInput measured = truth;
        measured.mainstream_demand = apply_noise(truth.mainstream_demand, noise[k][0]);
        std::size_t src = 1;
        for (const auto& [cell, profile] : s.onramps)
            measured.ramp_demands[cell] = apply_noise(truth.ramp_demands[cell], noise[k][src++]);

        const Measurement m{state, measured, upstream};
        const auto forecast = persistence_forecast(measured, arch.max_horizon());
        SelectionRecord rec = arch.control_step(m, forecast);
        StepResult r = step(state, truth, rec.applied, s.params, s.gamma);

        log.steps.push_back({state, truth, measured, r.flows, r.cost, std::move(rec)});
        upstream = upstream_flows(r.flows);
        state = std::move(r.next);
    }
    log.final_state = state;
    log.summary = summarize(log);
    return log;
}

// ---- serialization ------------------------------------------------------------

inline nlohmann::json summary_to_json(const MetricsSummary& m) {
    nlohmann::json j;
    j["J_total_h"] = m.j_total;
    j["n_total_veh"] = m.n_total;
    j["avg_cost_per_vehicle_s"] = m.avg_cost_per_vehicle ? nlohmann::json(*m.avg_cost_per_vehicle)
                                                         : nlohmann::json("undefined");
    j["wins"] = m.wins;
    j["steps"] = m.steps;
    return j;
}

/// One JSON object per line: a header, one record per step, the summary.
/// Wall-clock fields are left out of serial runs so that they are reproducible.
inline void write_run_log(const RunLog& log, std::ostream& out) {
    nlohmann::json head;
    head["record"] = "header";
    head["schema"] = kRunLogSchema;
    head["scenario"] = log.scenario;
    head["controller"] = log.controller;
    head["seed"] = log.seed;
    head["serial"] = log.serial;
    head["sources"] = log.sources;
    out << head.dump() << '\n';
    for (const auto& s : log.steps) {
        const SelectionRecord& sel = s.selection;
        nlohmann::json j;
        j["record"] = "step";
        j["step"] = s.state.step;
        j["n"] = s.state.n;
        j["q"] = s.state.q;
        j["demand_true"] = {{"mainstream", s.true_demand.mainstream_demand}, {"ramps", s.true_demand.ramp_demands}};
        j["demand_measured"] = {{"mainstream", s.measured_demand.mainstream_demand},
                                {"ramps", s.measured_demand.ramp_demands}};
        j["applied"] = sel.applied;
        j["flows"] = {{"o0", s.flows.mainstream_inflow}, {"e", s.flows.e}, {"o", s.flows.o}, {"s", s.flows.s}};
        j["cost"] = {{"tt", s.cost.tt}, {"td_h", s.cost.td_h}, {"j", s.cost.j}, {"throughput", s.cost.throughput}};
        j["winner"] = sel.winner;
        j["winner_label"] = sel.winner_label;
        j["fallback"] = sel.fallback;
        j["labels"] = sel.labels;
        nlohmann::json eps = nlohmann::json::array();
        for (double e : sel.epsilon) eps.push_back(std::isfinite(e) ? nlohmann::json(e) : nlohmann::json(nullptr));
        j["epsilon"] = eps;
        nlohmann::json pred = nlohmann::json::array();
        for (double p : sel.predicted_cost)
            pred.push_back(std::isfinite(p) ? nlohmann::json(p) : nlohmann::json(nullptr));
        j["predicted_cost"] = pred;
        nlohmann::json timing = nlohmann::json::array();
        for (const auto& t : sel.timing) {
            nlohmann::json tj{{"label", t.label},
                              {"iterations", t.iterations},
                              {"evaluations", t.evaluations},
                              {"converged", t.converged},
                              {"deadline_hit", t.deadline_hit}};
            if (!log.serial) tj["elapsed_s"] = t.elapsed_s;
            timing.push_back(std::move(tj));
        }
        j["timing"] = timing;
        if (!log.serial) j["elapsed_s"] = sel.elapsed_s;
        j["warnings"] = sel.warnings;
        out << j.dump() << '\n';
    }
    nlohmann::json tail = summary_to_json(log.summary);
    tail["record"] = "summary";
    out << tail.dump() << '\n';
}

inline void write_run_log(const RunLog& log, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    write_run_log(log, out);
}

// ---- plot tables --------------------------------------------------------------

namespace detail {

inline std::ofstream open_table(const std::filesystem::path& path, const char* header) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << std::setprecision(17) << header << '\n';
    return out;
}

}  // namespace detail

/// Writes demand.csv, states.csv, candidates.csv, winners.csv and
/// cumulative.csv to `dir`. Returns the paths written.
inline std::vector<std::filesystem::path> emit_plot_data(const RunLog& log, const ScenarioConfig& s,
                                                         const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    std::vector<std::filesystem::path> written;
    const double cycle = s.params.sample_cycle_s;

    {
        auto path = dir / "demand.csv";
        auto out = detail::open_table(path, "step,t_s,source,demand_veh_per_step");
        for (const auto& st : log.steps) {
            const double t = static_cast<double>(st.state.step) * cycle;
            out << st.state.step << ',' << t << ",mainstream," << st.true_demand.mainstream_demand << '\n';
            for (const auto& [cell, profile] : s.onramps)
                out << st.state.step << ',' << t << ",onramp_" << cell + 1 << ','
                    << st.true_demand.ramp_demands[cell] << '\n';
        }
        written.push_back(path);
    }
    {
        auto path = dir / "states.csv";
        auto out = detail::open_table(path, "step,cell,n_veh,q_veh,rho_veh_per_m");
        // Every step's starting state, then the state the run ends in.
        auto row = [&](const NetworkState& x) {
            const auto rho = density(x, s.params);
            for (std::size_t i = 0; i < x.n.size(); ++i)
                out << x.step << ',' << i + 1 << ',' << x.n[i] << ',' << x.q[i] << ',' << rho[i] << '\n';
        };
        for (const auto& st : log.steps) row(st.state);
        row(log.final_state);
        written.push_back(path);
    }
    {
        auto path = dir / "candidates.csv";
        auto out = detail::open_table(path, "step,candidate,label,epsilon_h,predicted_cost_h");
        for (const auto& st : log.steps)
            for (std::size_t c = 0; c < st.selection.labels.size(); ++c)
                out << st.state.step << ',' << c << ',' << st.selection.labels[c] << ','
                    << st.selection.epsilon[c] << ',' << st.selection.predicted_cost[c] << '\n';
        written.push_back(path);
    }
    {
        auto path = dir / "winners.csv";
        auto out = detail::open_table(path, "step,t_s,winner,label,fallback");
        for (const auto& st : log.steps)
            out << st.state.step << ',' << static_cast<double>(st.state.step) * cycle << ','
                << st.selection.winner << ',' << st.selection.winner_label << ','
                << (st.selection.fallback ? 1 : 0) << '\n';
        written.push_back(path);
    }
    {
        auto path = dir / "cumulative.csv";
        auto out = detail::open_table(path, "step,t_s,j_h,j_cumulative_h,exits_veh,exits_cumulative_veh");
        double j = 0.0, n = 0.0;
        for (const auto& st : log.steps) {
            j += st.cost.j;
            n += st.cost.throughput;
            out << st.state.step << ',' << static_cast<double>(st.state.step) * cycle << ',' << st.cost.j << ','
                << j << ',' << st.cost.throughput << ',' << n << '\n';
        }
        written.push_back(path);
    }
    return written;
}

/// Reads states.csv back into per-step n and q vectors.
inline std::vector<NetworkState> read_state_table(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    std::string line;
    std::getline(in, line);
    std::vector<NetworkState> out;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream row(line);
        std::string field;
        std::vector<std::string> f;
        while (std::getline(row, field, ',')) f.push_back(field);
        if (f.size() != 5) throw std::runtime_error(path.string() + ": malformed row '" + line + "'");
        const long step = std::stol(f[0]);
        const std::size_t cell = std::stoul(f[1]);
        if (out.empty() || out.back().step != step) {
            out.emplace_back();
            out.back().step = step;
        }
        auto& s = out.back();
        if (cell != s.n.size() + 1) throw std::runtime_error(path.string() + ": cells out of order");
        s.n.push_back(std::stod(f[2]));
        s.q.push_back(std::stod(f[3]));
    }
    return out;
}

}  // namespace basepar
