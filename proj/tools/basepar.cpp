// basepar: command-line front end for scenario runs, comparisons, implicit-base
// training and plot-table emission.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage error.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "basepar/experiment.hpp"
#include "basepar/scenario.hpp"

namespace fs = std::filesystem;
using namespace basepar;

namespace {

struct Options {
    std::string scenario;
    std::optional<std::uint64_t> seed;
    std::optional<double> budget_s;
    std::optional<double> ftol;
    std::optional<double> xtol;
    std::optional<std::string> termination;
    std::string out = "out";
    bool serial = false;
    std::string params;
    std::string controller = "base-parallel";
};

void add_common(CLI::App* app, Options& o) {
    app->add_option("--scenario", o.scenario, "Scenario YAML file (default: built-in case study)");
    app->add_option("--seed", o.seed, "Noise seed; overrides BASEPAR_SEED and the scenario seed");
    app->add_option("--budget-s", o.budget_s, "Wall-clock budget per control step for the parallel block [s]")
        ->check(CLI::NonNegativeNumber);
    app->add_option("--ftol", o.ftol, "Optimizer function tolerance")->check(CLI::PositiveNumber);
    app->add_option("--xtol", o.xtol, "Optimizer step tolerance")->check(CLI::PositiveNumber);
    app->add_option("--termination", o.termination, "Candidates per MPC solve: best iterate or all iterates")
        ->check(CLI::IsMember({"best", "all"}));
    app->add_option("--out", o.out, "Output directory")->capture_default_str();
    app->add_flag("--serial", o.serial, "Deterministic mode: no threads, evaluation cap instead of wall clock");
    app->add_option("--params", o.params, "ANN parameter file (read by run/compare, written by train-ann)");
}

ScenarioConfig resolve_scenario(const Options& o) {
    ScenarioConfig s = o.scenario.empty() ? default_scenario() : load_scenario(o.scenario);
    if (const char* env = std::getenv("BASEPAR_SEED"); env && *env) {
        try {
            s.seed = std::stoull(env);
        } catch (const std::exception&) {
            throw CLI::ValidationError("BASEPAR_SEED", std::string("not an unsigned integer: ") + env);
        }
    }
    if (o.seed) s.seed = *o.seed;
    if (o.budget_s) s.optimizer.budget_s = *o.budget_s;
    if (o.ftol) s.optimizer.function_tolerance = *o.ftol;
    if (o.xtol) s.optimizer.step_tolerance = *o.xtol;
    if (o.termination) s.optimizer.termination = termination_from_string(*o.termination);
    if (o.serial) s.serial = true;
    if (!o.params.empty()) s.ann.params_file = o.params;
    s.validate();
    return s;
}

std::string format_avg(const MetricsSummary& m) {
    if (!m.avg_cost_per_vehicle) return "undefined";
    std::ostringstream os;
    os << std::setprecision(17) << *m.avg_cost_per_vehicle;
    return os.str();
}

void print_summary(const RunLog& log) {
    std::cout << "controller: " << log.controller << "\nseed: " << log.seed << "\nsteps: " << log.summary.steps
              << std::setprecision(10) << "\nJ_total [h]: " << log.summary.j_total
              << "\nn_total [veh]: " << log.summary.n_total << "\navg cost per vehicle [s]: "
              << (log.summary.avg_cost_per_vehicle ? std::to_string(*log.summary.avg_cost_per_vehicle)
                                                   : std::string("undefined"))
              << "\nwins:";
    for (const auto& [label, n] : log.summary.wins) std::cout << ' ' << label << '=' << n;
    std::cout << '\n';
}

void write_summary(const RunLog& log, const fs::path& path) {
    nlohmann::json j = summary_to_json(log.summary);
    j["controller"] = log.controller;
    j["scenario"] = log.scenario;
    j["seed"] = log.seed;
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << j.dump(2) << '\n';
}

int cmd_run(const Options& o, bool plots) {
    const ScenarioConfig s = resolve_scenario(o);
    ControllerChoice choice;
    try {
        choice = choice_from_string(o.controller);
    } catch (const std::invalid_argument& e) {
        throw CLI::ValidationError("--controller", e.what());
    }
    const auto bank = resolve_ann_bank(s);
    const RunLog log = run_experiment(s, choice, bank);
    fs::create_directories(o.out);
    write_run_log(log, fs::path(o.out) / "log.jsonl");
    write_summary(log, fs::path(o.out) / "summary.json");
    if (plots)
        for (const auto& p : emit_plot_data(log, s, o.out)) std::cout << "wrote " << p.string() << '\n';
    print_summary(log);
    return 0;
}

int cmd_compare(const Options& o) {
    const ScenarioConfig s = resolve_scenario(o);
    const auto bank = resolve_ann_bank(s);
    const fs::path out(o.out);
    fs::create_directories(out / "logs");
    std::ofstream table(out / "compare.csv");
    if (!table) throw std::runtime_error("cannot write " + (out / "compare.csv").string());
    table << std::setprecision(17) << "controller,J_total_h,n_total_veh,avg_cost_per_vehicle_s\n";

    std::cout << std::left << std::setw(16) << "control approach" << std::right << std::setw(16) << "J_total [h]"
              << std::setw(16) << "n_total [veh]" << std::setw(20) << "avg cost/veh [s]" << '\n';
    for (ControllerChoice c : kAllChoices) {
        const RunLog log = run_experiment(s, c, bank);
        std::string file = log.controller;
        for (char& ch : file)
            if (!std::isalnum(static_cast<unsigned char>(ch))) ch = '_';
        write_run_log(log, out / "logs" / (file + ".jsonl"));
        const MetricsSummary& m = log.summary;
        table << log.controller << ',' << m.j_total << ',' << m.n_total << ',' << format_avg(m) << '\n';
        std::cout << std::left << std::setw(16) << log.controller << std::right << std::fixed
                  << std::setprecision(4) << std::setw(16) << m.j_total << std::setw(16) << m.n_total
                  << std::setw(20) << (m.avg_cost_per_vehicle ? std::to_string(*m.avg_cost_per_vehicle) : "undefined")
                  << std::defaultfloat << '\n';
    }
    return 0;
}

int cmd_train(const Options& o) {
    const ScenarioConfig s = resolve_scenario(o);
    const AnnTraining t = train_ann_bank(s);
    const fs::path path = o.params.empty() ? fs::path(o.out) / "mlp_bank.json" : fs::path(o.params);
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    save_mlp_bank(t.bank, path.string());
    std::cout << "cell  train_rmse  validation_rmse  target_std  ratio\n" << std::setprecision(6);
    for (std::size_t r = 0; r < t.bank.size(); ++r) {
        const TrainResult& res = t.results[r];
        std::cout << t.bank[r].cell + 1 << "  " << res.train_rmse << "  " << res.validation_rmse << "  "
                  << res.target_std << "  " << res.validation_rmse / res.target_std << '\n';
    }
    std::cout << "wrote " << path.string() << '\n';
    return 0;
}

int cmd_validate(const Options& o) {
    const ScenarioConfig s = resolve_scenario(o);
    std::cout << (o.scenario.empty() ? std::string("<built-in>") : o.scenario) << ": ok (" << s.name << ", "
              << s.params.size() << " cells, " << s.params.metered_count() << " metered ramps, " << s.steps
              << " steps)\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Base-parallel ramp-metering control on the asymmetric cell transmission model"};
    app.require_subcommand(1);
    Options o;

    auto* run = app.add_subcommand("run", "Run one controller or the full architecture; writes log.jsonl and summary.json");
    add_common(run, o);
    run->add_option("--controller", o.controller,
                    "ALINEA, ANN, CMPC(1), CMPC(2), PMPC(1), PMPC(2) or base-parallel")
        ->capture_default_str();

    auto* compare = app.add_subcommand("compare", "Run all seven control approaches with a shared seed");
    add_common(compare, o);

    auto* train = app.add_subcommand("train-ann", "Generate gain targets, train the networks, write the parameter file");
    add_common(train, o);

    auto* plots = app.add_subcommand("emit-plots", "Run like 'run' and also write the plot tables (CSV)");
    add_common(plots, o);
    plots->add_option("--controller", o.controller, "Controller to run")->capture_default_str();

    auto* validate = app.add_subcommand("validate-scenario", "Parse and validate a scenario file");
    add_common(validate, o);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (*run) return cmd_run(o, false);
        if (*compare) return cmd_compare(o);
        if (*train) return cmd_train(o);
        if (*plots) return cmd_run(o, true);
        if (*validate) return cmd_validate(o);
    } catch (const CLI::ValidationError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 2;
}
