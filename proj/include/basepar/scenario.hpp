// Scenario definition: network, initial conditions, demand profiles, noise,
// controller and solver settings. Scenario files are YAML; every field except
// `schema_version` and `name` is optional and defaults to the built-in
// six-cell case study (see scenarios/default.yaml for the full schema).
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <yaml-cpp/yaml.h>

#include "basepar/actm.hpp"
#include "basepar/gain_training.hpp"
#include "basepar/mpc.hpp"
#include "basepar/optimizer.hpp"

namespace basepar {

inline constexpr int kScenarioSchema = 1;

/// Piecewise-linear profile over time; held constant outside the breakpoints.
struct DemandProfile {
    std::vector<std::pair<double, double>> points;  // (t_s, vehicles/step)

    double at(double t_s) const {
        if (points.empty()) return 0.0;
        if (t_s <= points.front().first) return points.front().second;
        if (t_s >= points.back().first) return points.back().second;
        auto hi = std::upper_bound(points.begin(), points.end(), t_s,
                                   [](double t, const auto& p) { return t < p.first; });
        auto lo = std::prev(hi);
        const double w = (t_s - lo->first) / (hi->first - lo->first);
        return lo->second + w * (hi->second - lo->second);
    }

    void validate(const std::string& name) const {
        for (std::size_t k = 0; k < points.size(); ++k) {
            if (!std::isfinite(points[k].first) || !(points[k].second >= 0.0) || !std::isfinite(points[k].second))
                throw std::invalid_argument(name + ": breakpoints must be finite with nonnegative demand");
            if (k > 0 && !(points[k].first > points[k - 1].first))
                throw std::invalid_argument(name + ": breakpoint times must be strictly increasing");
        }
    }
};

struct NoiseModel {
    double fraction = 0.10;  // d' = d (1 + u), u ~ U(-fraction, fraction)

    void validate() const {
        if (!(fraction >= 0.0 && fraction < 1.0)) throw std::invalid_argument("noise fraction must lie in [0, 1)");
    }
};

inline double apply_noise(double d, double u) { return std::max(0.0, d * (1.0 + u)); }

inline double perturb_demand(double d, const NoiseModel& noise, std::mt19937_64& rng) {
    if (!(d >= 0.0)) throw std::invalid_argument("demand must be nonnegative");
    if (noise.fraction == 0.0) return d;
    std::uniform_real_distribution<double> u(-noise.fraction, noise.fraction);
    return apply_noise(d, u(rng));
}

struct AlineaSettings {
    std::vector<double> gains{0.016, 0.016, 0.016};
    std::vector<double> initial_metering{0.5, 0.2, 0.4};
};

struct AnnSettings {
    std::string params_file;  // empty: train at start-up
    std::size_t samples = 500;
    std::uint64_t data_seed = 1;
    SampleRanges ranges;
    TrainConfig train;
};

struct MpcSettings {
    std::size_t short_horizon = 3;
    std::size_t long_horizon = 10;
    Interval metering_bounds{0.0, 8.0};
    Interval gain_bounds{0.0, 1.0};
};

struct ScenarioConfig {
    int schema_version = kScenarioSchema;
    std::string name = "default";
    std::uint64_t seed = 42;
    std::size_t steps = 180;
    double gamma = 0.8;
    NetworkParams params;
    NetworkState initial;
    std::vector<double> initial_upstream;  // o_{i-1}(0) per cell
    DemandProfile mainstream;
    std::map<std::size_t, DemandProfile> onramps;  // 0-based cell index
    NoiseModel noise;
    AlineaSettings alinea;
    AnnSettings ann;
    MpcSettings mpc;
    std::size_t eval_horizon = 3;
    OptimizerConfig optimizer;
    bool serial = false;
    // Serial runs replace the wall clock by this evaluation cap per solve so that
    // results do not depend on machine speed.
    long serial_max_evaluations = 20000;

    /// True demand at the start of step k.
    ExogenousInput demand_at(std::size_t k) const {
        const double t = static_cast<double>(k) * params.sample_cycle_s;
        ExogenousInput in;
        in.mainstream_demand = mainstream.at(t);
        in.ramp_demands.assign(params.size(), 0.0);
        for (const auto& [cell, profile] : onramps) in.ramp_demands[cell] = profile.at(t);
        return in;
    }

    /// Demand sources in a fixed order: mainstream, then on-ramps by cell.
    std::vector<std::string> source_names() const {
        std::vector<std::string> out{"mainstream"};
        for (const auto& [cell, profile] : onramps) out.push_back("onramp_" + std::to_string(cell + 1));
        return out;
    }

    void validate() const {
        if (schema_version != kScenarioSchema)
            throw std::invalid_argument("unsupported schema_version " + std::to_string(schema_version));
        if (steps < 1) throw std::invalid_argument("steps must be >= 1");
        if (!(gamma >= 0.0)) throw std::invalid_argument("gamma must be nonnegative");
        params.validate();
        validate_state(initial, params);
        if (initial_upstream.size() != params.size())
            throw std::invalid_argument("initial upstream flows do not match the cell count");
        for (double v : initial_upstream)
            if (!(v >= 0.0)) throw std::invalid_argument("initial mainline outflows must be nonnegative");
        mainstream.validate("demand.mainstream");
        for (const auto& [cell, profile] : onramps) {
            if (cell >= params.size() || !params.cells[cell].has_onramp)
                throw std::invalid_argument("demand.onramps: cell " + std::to_string(cell + 1) + " has no on-ramp");
            profile.validate("demand.onramps." + std::to_string(cell + 1));
        }
        noise.validate();
        const std::size_t ramps = params.metered_count();
        if (alinea.gains.size() != ramps || alinea.initial_metering.size() != ramps)
            throw std::invalid_argument("controllers.alinea needs one gain and one initial metering per metered ramp");
        for (double v : alinea.initial_metering)
            if (!(v >= 0.0)) throw std::invalid_argument("controllers.alinea.initial_metering must be nonnegative");
        if (ann.samples < 2) throw std::invalid_argument("controllers.ann.samples must be >= 2");
        if (mpc.short_horizon < 1 || mpc.long_horizon < mpc.short_horizon)
            throw std::invalid_argument("controllers.mpc horizons must satisfy 1 <= short <= long");
        if (!(mpc.metering_bounds.lo <= mpc.metering_bounds.hi) || !(mpc.gain_bounds.lo <= mpc.gain_bounds.hi))
            throw std::invalid_argument("controllers.mpc bounds are inverted");
        if (eval_horizon < 1 || eval_horizon > mpc.short_horizon)
            throw std::invalid_argument("architecture.eval_horizon must lie in [1, short horizon]");
        optimizer.validate();
        if (serial_max_evaluations < 1) throw std::invalid_argument("optimizer.serial_max_evaluations must be >= 1");
    }
};

/// The built-in case study: six cells, metered on-ramps with off-ramps at
/// cells 2, 4 and 5, and stand-in demand profiles (one hour).
inline ScenarioConfig default_scenario() {
    ScenarioConfig s;
    s.name = "default";
    s.params.sample_cycle_s = 20.0;
    s.params.rho_crit = 0.0335;
    s.params.lanes = 1;
    s.params.free_flow_speed = 28.0;
    s.params.cells.assign(6, CellParams{});
    struct Ramp {
        std::size_t cell;
        double alpha, beta, eta;
    };
    for (const Ramp& r : {Ramp{1, 0.6, 0.35, 0.8}, Ramp{3, 0.8, 0.62, 0.65}, Ramp{4, 0.7, 0.43, 0.8}}) {
        CellParams& c = s.params.cells[r.cell];
        c.has_onramp = c.has_offramp = c.metered = true;
        c.blend_alpha = r.alpha;
        c.split_beta = r.beta;
        c.eta_moving = r.eta;
    }
    s.initial.n = {32.6, 36.2, 5.1, 25.3, 3.9, 0.0};
    s.initial.q = {0.0, 5.5, 0.0, 9.6, 1.6, 0.0};
    s.initial_upstream = {0.0, 3.8, 0.0, 3.2, 0.6, 0.0};
    s.mainstream.points = {{0, 4.0}, {600, 5.5}, {1200, 7.5}, {2400, 7.5}, {3000, 5.0}, {3600, 4.0}};
    s.onramps[1].points = {{0, 1.0}, {900, 2.5}, {1800, 2.5}, {2400, 1.2}, {3600, 1.0}};
    s.onramps[3].points = {{0, 1.5}, {1200, 3.5}, {2400, 3.5}, {3000, 1.5}, {3600, 1.2}};
    s.onramps[4].points = {{0, 0.8}, {1500, 2.5}, {2700, 2.5}, {3300, 1.0}, {3600, 0.8}};
    return s;
}

// ---- YAML ingestion -----------------------------------------------------------

class ScenarioError : public std::runtime_error {
public:
    ScenarioError(const std::string& origin, const std::string& field, int line, const std::string& what)
        : std::runtime_error(origin + ":" + std::to_string(line) + ": " + field + ": " + what), field_(field),
          line_(line) {}

    const std::string& field() const { return field_; }
    int line() const { return line_; }

private:
    std::string field_;
    int line_;
};

namespace detail {

class YamlReader {
public:
    explicit YamlReader(std::string origin) : origin_(std::move(origin)) {}

    [[noreturn]] void fail(const YAML::Node& node, const std::string& field, const std::string& what) const {
        throw ScenarioError(origin_, field, node.Mark().line + 1, what);
    }

    void keys(const YAML::Node& node, const std::string& path, std::initializer_list<const char*> allowed) const {
        if (!node.IsMap()) fail(node, path, "expected a mapping");
        const std::set<std::string> ok(allowed.begin(), allowed.end());
        for (const auto& kv : node) {
            const auto key = kv.first.as<std::string>();
            if (!ok.count(key)) fail(kv.first, join(path, key), "unknown field");
        }
    }

    template <class T>
    T as(const YAML::Node& node, const std::string& field) const {
        try {
            return node.as<T>();
        } catch (const YAML::Exception&) {
            fail(node, field, "has the wrong type");
        }
    }

    template <class T>
    void read(const YAML::Node& parent, const std::string& path, const char* key, T& out) const {
        if (const YAML::Node n = parent[key]) out = as<T>(n, join(path, key));
    }

    template <class T>
    T required(const YAML::Node& parent, const std::string& path, const char* key) const {
        const YAML::Node n = parent[key];
        if (!n) fail(parent, join(path, key), "required field is missing");
        return as<T>(n, join(path, key));
    }

    std::size_t cell_key(const YAML::Node& key, const std::string& path, std::size_t cells) const {
        const auto c = as<long>(key, path);
        if (c < 1 || static_cast<std::size_t>(c) > cells) fail(key, path, "cell number out of range");
        return static_cast<std::size_t>(c - 1);
    }

    DemandProfile profile(const YAML::Node& node, const std::string& field) const {
        if (!node.IsSequence()) fail(node, field, "expected a list of [t_s, demand] pairs");
        DemandProfile p;
        for (const auto& pt : node) {
            if (!pt.IsSequence() || pt.size() != 2) fail(pt, field, "each breakpoint is [t_s, demand]");
            p.points.emplace_back(as<double>(pt[0], field), as<double>(pt[1], field));
        }
        try {
            p.validate(field);
        } catch (const std::invalid_argument& e) {
            fail(node, field, e.what());
        }
        return p;
    }

    Interval interval(const YAML::Node& node, const std::string& field) const {
        if (!node.IsSequence() || node.size() != 2) fail(node, field, "expected [lo, hi]");
        return {as<double>(node[0], field), as<double>(node[1], field)};
    }

    static std::string join(const std::string& path, const std::string& key) {
        return path.empty() ? key : path + "." + key;
    }

    const std::string& origin() const { return origin_; }

private:
    std::string origin_;
};

inline void read_network(const YamlReader& r, const YAML::Node& net, ScenarioConfig& s) {
    r.keys(net, "network", {"sample_cycle_s", "rho_crit", "lanes", "free_flow_speed_mps", "cell_defaults", "cells"});
    r.read(net, "network", "sample_cycle_s", s.params.sample_cycle_s);
    r.read(net, "network", "rho_crit", s.params.rho_crit);
    r.read(net, "network", "lanes", s.params.lanes);
    r.read(net, "network", "free_flow_speed_mps", s.params.free_flow_speed);

    CellParams base;
    auto read_cell_fields = [&](const YAML::Node& n, const std::string& path, CellParams& c) {
        r.read(n, path, "length_m", c.length_m);
        r.read(n, path, "capacity", c.capacity);
        r.read(n, path, "sat_mainline", c.sat_mainline);
        r.read(n, path, "sat_offramp", c.sat_offramp);
        r.read(n, path, "eta_moving", c.eta_moving);
        r.read(n, path, "eta_idling", c.eta_idling);
        r.read(n, path, "xi", c.xi);
    };
    if (const YAML::Node d = net["cell_defaults"]) {
        r.keys(d, "network.cell_defaults",
               {"length_m", "capacity", "sat_mainline", "sat_offramp", "eta_moving", "eta_idling", "xi"});
        read_cell_fields(d, "network.cell_defaults", base);
        // Defaults apply to the built-in cells as well when no cell list follows.
        for (auto& c : s.params.cells) {
            const CellParams old = c;
            c = base;
            c.has_onramp = old.has_onramp;
            c.has_offramp = old.has_offramp;
            c.metered = old.metered;
            c.blend_alpha = old.blend_alpha;
            c.split_beta = old.split_beta;
            if (old.has_onramp || old.has_offramp) c.eta_moving = old.eta_moving;
        }
    }
    const YAML::Node cells = net["cells"];
    if (!cells) return;
    if (!cells.IsSequence() || cells.size() == 0) r.fail(cells, "network.cells", "expected a non-empty list");
    s.params.cells.clear();
    for (std::size_t i = 0; i < cells.size(); ++i) {
        const YAML::Node n = cells[i];
        const std::string path = "network.cells[" + std::to_string(i) + "]";
        r.keys(n, path,
               {"cell", "length_m", "capacity", "sat_mainline", "sat_offramp", "eta_moving", "eta_idling", "xi",
                "onramp", "offramp", "alpha", "beta", "allow_full_split"});
        if (const YAML::Node id = n["cell"]; id && r.as<std::size_t>(id, path + ".cell") != i + 1)
            r.fail(id, path + ".cell", "cells must be listed in order starting at 1");
        CellParams c = base;
        read_cell_fields(n, path, c);
        std::string onramp = "none";
        r.read(n, path, "onramp", onramp);
        if (onramp == "metered") c.has_onramp = c.metered = true;
        else if (onramp == "unmetered") c.has_onramp = true;
        else if (onramp != "none") r.fail(n["onramp"], path + ".onramp", "expected none, unmetered or metered");
        r.read(n, path, "offramp", c.has_offramp);
        r.read(n, path, "alpha", c.blend_alpha);
        r.read(n, path, "beta", c.split_beta);
        r.read(n, path, "allow_full_split", c.allow_full_split);
        try {
            c.validate(i + 1);
        } catch (const std::invalid_argument& e) {
            r.fail(n, path, e.what());
        }
        s.params.cells.push_back(c);
    }
    // A new cell list invalidates the built-in initial conditions and demands.
    s.initial.n.assign(s.params.size(), 0.0);
    s.initial.q.assign(s.params.size(), 0.0);
    s.initial_upstream.assign(s.params.size(), 0.0);
    s.onramps.clear();
    const std::size_t metered = s.params.metered_count();
    if (s.alinea.gains.size() != metered) s.alinea.gains.assign(metered, 0.016);
    if (s.alinea.initial_metering.size() != metered) s.alinea.initial_metering.assign(metered, 0.0);
}

inline void read_cell_map(const YamlReader& r, const YAML::Node& node, const std::string& field, std::size_t cells,
                          std::vector<double>& out) {
    if (!node.IsMap()) r.fail(node, field, "expected a mapping from cell number to value");
    out.assign(cells, 0.0);
    for (const auto& kv : node) out[r.cell_key(kv.first, field, cells)] = r.as<double>(kv.second, field);
}

inline void read_optimizer(const YamlReader& r, const YAML::Node& n, ScenarioConfig& s) {
    r.keys(n, "optimizer",
           {"budget_s", "ftol", "xtol", "max_iterations", "termination", "fd_step", "serial_max_evaluations"});
    r.read(n, "optimizer", "budget_s", s.optimizer.budget_s);
    r.read(n, "optimizer", "ftol", s.optimizer.function_tolerance);
    r.read(n, "optimizer", "xtol", s.optimizer.step_tolerance);
    r.read(n, "optimizer", "max_iterations", s.optimizer.max_iterations);
    r.read(n, "optimizer", "fd_step", s.optimizer.fd_step);
    r.read(n, "optimizer", "serial_max_evaluations", s.serial_max_evaluations);
    if (const YAML::Node t = n["termination"]) {
        try {
            s.optimizer.termination = termination_from_string(r.as<std::string>(t, "optimizer.termination"));
        } catch (const std::invalid_argument& e) {
            r.fail(t, "optimizer.termination", e.what());
        }
    }
}

inline void read_controllers(const YamlReader& r, const YAML::Node& n, ScenarioConfig& s) {
    r.keys(n, "controllers", {"alinea", "ann", "mpc"});
    if (const YAML::Node a = n["alinea"]) {
        r.keys(a, "controllers.alinea", {"gains", "initial_metering"});
        r.read(a, "controllers.alinea", "gains", s.alinea.gains);
        r.read(a, "controllers.alinea", "initial_metering", s.alinea.initial_metering);
    }
    if (const YAML::Node a = n["ann"]) {
        const std::string p = "controllers.ann";
        r.keys(a, p,
               {"params_file", "samples", "train_samples", "data_seed", "init_seed", "restarts", "max_iterations",
                "activation", "theta_max", "ranges"});
        r.read(a, p, "params_file", s.ann.params_file);
        r.read(a, p, "samples", s.ann.samples);
        r.read(a, p, "train_samples", s.ann.train.train_count);
        r.read(a, p, "data_seed", s.ann.data_seed);
        r.read(a, p, "init_seed", s.ann.train.seed);
        r.read(a, p, "restarts", s.ann.train.restarts);
        r.read(a, p, "max_iterations", s.ann.train.max_iterations);
        r.read(a, p, "activation", s.ann.train.activation);
        r.read(a, p, "theta_max", s.ann.train.theta_max);
        if (const YAML::Node g = a["ranges"]) {
            r.keys(g, p + ".ranges", {"n", "q", "d", "upstream"});
            auto range = [&](const char* key, Range& out) {
                if (const YAML::Node v = g[key]) {
                    const Interval iv = r.interval(v, p + ".ranges." + key);
                    if (!(iv.lo <= iv.hi)) r.fail(v, p + ".ranges." + key, "range is inverted");
                    out = {iv.lo, iv.hi};
                }
            };
            range("n", s.ann.ranges.n);
            range("q", s.ann.ranges.q);
            range("d", s.ann.ranges.d);
            range("upstream", s.ann.ranges.upstream);
        }
    }
    if (const YAML::Node m = n["mpc"]) {
        const std::string p = "controllers.mpc";
        r.keys(m, p, {"horizons", "metering_bounds", "gain_bounds"});
        if (const YAML::Node h = m["horizons"]) {
            if (!h.IsSequence() || h.size() != 2) r.fail(h, p + ".horizons", "expected [short, long]");
            s.mpc.short_horizon = r.as<std::size_t>(h[0], p + ".horizons");
            s.mpc.long_horizon = r.as<std::size_t>(h[1], p + ".horizons");
        }
        if (const YAML::Node b = m["metering_bounds"]) s.mpc.metering_bounds = r.interval(b, p + ".metering_bounds");
        if (const YAML::Node b = m["gain_bounds"]) s.mpc.gain_bounds = r.interval(b, p + ".gain_bounds");
    }
}

}  // namespace detail

inline ScenarioConfig parse_scenario(const std::string& text, const std::string& origin = "<scenario>") {
    const detail::YamlReader r(origin);
    YAML::Node root;
    try {
        root = YAML::Load(text);
    } catch (const YAML::ParserException& e) {
        throw ScenarioError(origin, "<syntax>", e.mark.line + 1, e.msg);
    }
    if (!root || !root.IsMap()) throw ScenarioError(origin, "<root>", 1, "expected a mapping at top level");
    r.keys(root, "",
           {"schema_version", "name", "seed", "steps", "gamma", "serial", "network", "initial_state", "demand",
            "noise", "controllers", "architecture", "optimizer"});

    ScenarioConfig s = default_scenario();
    s.schema_version = r.required<int>(root, "", "schema_version");
    if (s.schema_version != kScenarioSchema)
        r.fail(root["schema_version"], "schema_version", "unsupported version (expected 1)");
    s.name = r.required<std::string>(root, "", "name");
    r.read(root, "", "seed", s.seed);
    r.read(root, "", "steps", s.steps);
    r.read(root, "", "gamma", s.gamma);
    r.read(root, "", "serial", s.serial);

    if (const YAML::Node n = root["network"]) detail::read_network(r, n, s);
    const std::size_t cells = s.params.size();
    if (const YAML::Node n = root["initial_state"]) {
        r.keys(n, "initial_state", {"n", "q", "mainline_outflow"});
        if (const YAML::Node v = n["n"]) detail::read_cell_map(r, v, "initial_state.n", cells, s.initial.n);
        if (const YAML::Node v = n["q"]) detail::read_cell_map(r, v, "initial_state.q", cells, s.initial.q);
        if (const YAML::Node v = n["mainline_outflow"]) {
            // o_i(0) keyed by the sending cell; cell i+1 receives it.
            std::vector<double> o;
            detail::read_cell_map(r, v, "initial_state.mainline_outflow", cells, o);
            s.initial_upstream.assign(cells, 0.0);
            for (std::size_t i = 0; i + 1 < cells; ++i) s.initial_upstream[i + 1] = o[i];
        }
    }
    if (const YAML::Node n = root["demand"]) {
        r.keys(n, "demand", {"mainstream", "onramps"});
        if (const YAML::Node v = n["mainstream"]) s.mainstream = r.profile(v, "demand.mainstream");
        if (const YAML::Node v = n["onramps"]) {
            if (!v.IsMap()) r.fail(v, "demand.onramps", "expected a mapping from cell number to profile");
            s.onramps.clear();
            for (const auto& kv : v) {
                const std::size_t c = r.cell_key(kv.first, "demand.onramps", cells);
                const std::string field = "demand.onramps." + std::to_string(c + 1);
                if (!s.params.cells[c].has_onramp) r.fail(kv.first, field, "cell has no on-ramp");
                s.onramps[c] = r.profile(kv.second, field);
            }
        }
    }
    if (const YAML::Node n = root["noise"]) {
        r.keys(n, "noise", {"fraction"});
        r.read(n, "noise", "fraction", s.noise.fraction);
    }
    if (const YAML::Node n = root["controllers"]) detail::read_controllers(r, n, s);
    if (const YAML::Node n = root["architecture"]) {
        r.keys(n, "architecture", {"eval_horizon"});
        r.read(n, "architecture", "eval_horizon", s.eval_horizon);
    }
    if (const YAML::Node n = root["optimizer"]) detail::read_optimizer(r, n, s);

    try {
        s.validate();
    } catch (const std::invalid_argument& e) {
        throw ScenarioError(origin, "<scenario>", 1, e.what());
    }
    return s;
}

inline ScenarioConfig load_scenario(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read scenario " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    ScenarioConfig s = parse_scenario(buf.str(), path);
    // Relative parameter files are relative to the scenario file.
    if (!s.ann.params_file.empty() && std::filesystem::path(s.ann.params_file).is_relative())
        s.ann.params_file = (std::filesystem::path(path).parent_path() / s.ann.params_file).string();
    return s;
}

}  // namespace basepar
