// Asymmetric cell transmission model (ACTM) for a single-lane freeway stretch.
//
// A stretch is a chain of cells, each with at most one on-ramp (upstream) and
// one off-ramp (downstream). Per simulation step the model computes, in order,
//
//   e_i  on-ramp inflow       min{q_i + d_i, xi_i (nbar_i - n_i) [, mu_i]}
//   o_i  mainline outflow     min{(1-beta_i)(n_i + alpha_i e_i) eta^m_i,
//                                 (nbar_{i+1} - n_{i+1} - alpha_{i+1} e_{i+1}) eta^i_{i+1},
//                                 obar_i, (1-beta_i)/beta_i sbar_i}
//   s_i  off-ramp outflow     beta_i / (1 - beta_i) o_i
//
// and advances n_i += o_{i-1} + e_i - o_i - s_i, q_i += d_i - e_i.
//
// Boundaries: cell 0 receives the mainstream demand clipped by its own
// vacant-space term; the last cell discharges freely (no downstream term).
// All quantities are real-valued vehicles per simulation step.
#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <limits>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace basepar {

/// Absolute slack allowed on state bounds before a step is declared inconsistent.
inline constexpr double kStateTolerance = 1e-9;

class TopologyError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class ModelConsistencyError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct CellParams {
    double length_m = 560.0;
    double capacity = 80.0;      // nbar, vehicles
    double sat_mainline = 8.0;   // obar, vehicles/step
    double sat_offramp = 6.0;    // sbar, vehicles/step
    double split_beta = 0.0;
    double blend_alpha = 0.0;
    double eta_moving = 1.0;
    double eta_idling = 0.3;
    double xi = 0.4;
    bool has_onramp = false;
    bool has_offramp = false;
    bool metered = false;
    // Enables the beta = 1 branch where every vehicle leaving the cell exits.
    bool allow_full_split = false;

    void validate(std::size_t index) const {
        auto fail = [index](const std::string& what) {
            throw std::invalid_argument("cell " + std::to_string(index) + ": " + what);
        };
        auto fraction = [&](double v, const char* name) {
            if (!(v >= 0.0 && v <= 1.0)) fail(std::string(name) + " must lie in [0, 1]");
        };
        fraction(split_beta, "split_beta");
        fraction(blend_alpha, "blend_alpha");
        fraction(eta_moving, "eta_moving");
        fraction(eta_idling, "eta_idling");
        fraction(xi, "xi");
        if (split_beta >= 1.0 && !allow_full_split)
            fail("split_beta = 1 requires allow_full_split");
        if (!(length_m > 0.0)) fail("length_m must be positive");
        if (!(capacity > 0.0)) fail("capacity must be positive");
        if (!(sat_mainline >= 0.0) || !(sat_offramp >= 0.0))
            fail("saturation flows must be nonnegative");
        if (metered && !has_onramp) fail("metered cell must have an on-ramp");
        if (!has_offramp && split_beta != 0.0) fail("split_beta set on a cell without off-ramp");
        if (!has_onramp && blend_alpha != 0.0) fail("blend_alpha set on a cell without on-ramp");
    }
};

struct NetworkParams {
    std::vector<CellParams> cells;
    double sample_cycle_s = 20.0;
    double rho_crit = 0.0335;   // vehicles / meter / lane
    int lanes = 1;
    double free_flow_speed = 28.0;  // m/s, converts distance into free-flow time

    std::size_t size() const { return cells.size(); }

    /// Indices of metered cells, in network order. Metering vectors follow this order.
    std::vector<std::size_t> metered_cells() const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < cells.size(); ++i)
            if (cells[i].metered) out.push_back(i);
        return out;
    }

    std::size_t metered_count() const {
        return static_cast<std::size_t>(
            std::count_if(cells.begin(), cells.end(), [](const CellParams& c) { return c.metered; }));
    }

    void validate() const {
        if (cells.empty()) throw std::invalid_argument("network has no cells");
        if (!(sample_cycle_s > 0.0)) throw std::invalid_argument("sample_cycle_s must be positive");
        if (!(rho_crit > 0.0)) throw std::invalid_argument("rho_crit must be positive");
        if (lanes < 1) throw std::invalid_argument("lanes must be >= 1");
        if (!(free_flow_speed > 0.0)) throw std::invalid_argument("free_flow_speed must be positive");
        for (std::size_t i = 0; i < cells.size(); ++i) cells[i].validate(i);
    }
};

/// Vehicles per cell and per on-ramp queue. Queues are indexed by cell and are
/// zero for cells without an on-ramp.
struct NetworkState {
    std::vector<double> n;
    std::vector<double> q;
    long step = 0;

    static NetworkState empty(const NetworkParams& p) {
        return {std::vector<double>(p.size(), 0.0), std::vector<double>(p.size(), 0.0), 0};
    }

    double total_vehicles() const {
        double t = 0.0;
        for (double v : n) t += v;
        for (double v : q) t += v;
        return t;
    }

    bool operator==(const NetworkState&) const = default;
};

/// Demands per simulation step. Ramp demands are indexed by cell.
struct ExogenousInput {
    double mainstream_demand = 0.0;
    std::vector<double> ramp_demands;

    bool operator==(const ExogenousInput&) const = default;
};

struct FlowVector {
    double mainstream_inflow = 0.0;  // o_0, admitted into the first cell
    std::vector<double> e;
    std::vector<double> o;
    std::vector<double> s;
};

struct StageCost {
    double tt = 0.0;    // vehicle-hours spent in cells and queues
    double td_h = 0.0;  // distance travelled, as free-flow vehicle-hours
    double j = 0.0;     // tt - gamma * td_h
    double throughput = 0.0;
};

struct StepResult {
    NetworkState next;
    FlowVector flows;
    StageCost cost;
};

namespace detail {

inline void check_sizes(const NetworkState& state, const NetworkParams& params) {
    if (state.n.size() != params.size() || state.q.size() != params.size())
        throw TopologyError("state size does not match the number of cells");
}

inline void check_input(const ExogenousInput& input, const NetworkParams& params) {
    if (input.ramp_demands.size() != params.size())
        throw TopologyError("ramp demand vector does not match the number of cells");
    if (!(input.mainstream_demand >= 0.0))
        throw std::invalid_argument("mainstream demand must be nonnegative");
    for (double d : input.ramp_demands)
        if (!(d >= 0.0)) throw std::invalid_argument("ramp demands must be nonnegative");
}

inline double vacant_space_term(const CellParams& cell, double n, double e) {
    return std::max(0.0, (cell.capacity - n - cell.blend_alpha * e) * cell.eta_idling);
}

}  // namespace detail

inline void validate_state(const NetworkState& state, const NetworkParams& params) {
    detail::check_sizes(state, params);
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double n = state.n[i];
        if (!(n >= -kStateTolerance && n <= params.cells[i].capacity + kStateTolerance))
            throw std::invalid_argument("n[" + std::to_string(i) + "] outside [0, capacity]");
        if (!(state.q[i] >= -kStateTolerance))
            throw std::invalid_argument("q[" + std::to_string(i) + "] is negative");
        if (!params.cells[i].has_onramp && state.q[i] != 0.0)
            throw std::invalid_argument("queue on cell " + std::to_string(i) + " without on-ramp");
    }
}

/// On-ramp inflows e (indexed by cell). An empty metering span leaves metered
/// ramps unmetered; otherwise it must hold one rate per metered cell.
inline std::vector<double> compute_onramp_inflow(const NetworkState& state, const ExogenousInput& input,
                                                 std::span<const double> metering,
                                                 const NetworkParams& params) {
    detail::check_sizes(state, params);
    detail::check_input(input, params);
    if (!metering.empty() && metering.size() != params.metered_count())
        throw TopologyError("metering vector has " + std::to_string(metering.size()) +
                            " entries but the network has " +
                            std::to_string(params.metered_count()) + " metered ramps");
    std::vector<double> e(params.size(), 0.0);
    std::size_t meter_idx = 0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const CellParams& cell = params.cells[i];
        if (!cell.has_onramp) continue;
        double inflow = std::min(state.q[i] + input.ramp_demands[i],
                                 cell.xi * (cell.capacity - state.n[i]));
        if (cell.metered && !metering.empty()) {
            const double mu = metering[meter_idx];
            if (!(mu >= 0.0)) throw std::invalid_argument("metering rates must be nonnegative");
            inflow = std::min(inflow, mu);
        }
        if (cell.metered) ++meter_idx;
        e[i] = std::max(0.0, inflow);
    }
    return e;
}

inline std::vector<double> compute_mainline_outflow(const NetworkState& state, std::span<const double> e,
                                                    const NetworkParams& params) {
    detail::check_sizes(state, params);
    if (e.size() != params.size()) throw TopologyError("inflow vector does not match cells");
    const std::size_t count = params.size();
    std::vector<double> o(count, 0.0);
    for (std::size_t i = 0; i < count; ++i) {
        const CellParams& cell = params.cells[i];
        const double beta = cell.split_beta;
        double flow = (1.0 - beta) * (state.n[i] + cell.blend_alpha * e[i]) * cell.eta_moving;
        if (i + 1 < count)
            flow = std::min(flow, detail::vacant_space_term(params.cells[i + 1], state.n[i + 1], e[i + 1]));
        flow = std::min(flow, cell.sat_mainline);
        if (beta > 0.0) flow = std::min(flow, (1.0 - beta) / beta * cell.sat_offramp);
        o[i] = std::max(0.0, flow);
    }
    return o;
}

/// Mainstream vehicles admitted into the first cell.
inline double admitted_mainstream(const NetworkState& state, const ExogenousInput& input,
                                  std::span<const double> e, const NetworkParams& params) {
    return std::min(input.mainstream_demand,
                    detail::vacant_space_term(params.cells.front(), state.n.front(), e.front()));
}

inline std::vector<double> compute_offramp_outflow(std::span<const double> o, const NetworkParams& params,
                                                   const NetworkState& state, std::span<const double> e) {
    if (o.size() != params.size() || e.size() != params.size())
        throw TopologyError("flow vectors do not match cells");
    std::vector<double> s(params.size(), 0.0);
    for (std::size_t i = 0; i < params.size(); ++i) {
        const CellParams& cell = params.cells[i];
        if (!cell.has_offramp || cell.split_beta == 0.0) continue;
        if (cell.split_beta >= 1.0) {
            s[i] = std::min(cell.sat_offramp,
                            (state.n[i] + cell.blend_alpha * e[i]) * cell.eta_moving);
        } else {
            s[i] = cell.split_beta / (1.0 - cell.split_beta) * o[i];
        }
    }
    return s;
}

inline std::vector<double> density(const NetworkState& state, const NetworkParams& params) {
    detail::check_sizes(state, params);
    std::vector<double> rho(params.size());
    for (std::size_t i = 0; i < params.size(); ++i)
        rho[i] = state.n[i] / (params.cells[i].length_m * params.lanes);
    return rho;
}

/// Stage cost of one step. `state` is the state the step ends in.
inline StageCost stage_cost(const FlowVector& flows, const NetworkState& state, const NetworkParams& params,
                            double gamma) {
    StageCost c;
    c.tt = params.sample_cycle_s / 3600.0 * state.total_vehicles();
    double distance_m = 0.0;
    for (std::size_t i = 0; i < params.size(); ++i)
        distance_m += (flows.o[i] + flows.s[i]) * params.cells[i].length_m;
    c.td_h = distance_m / (params.free_flow_speed * 3600.0);
    c.j = c.tt - gamma * c.td_h;
    c.throughput = flows.o.back();
    for (double s : flows.s) c.throughput += s;
    return c;
}

inline StepResult step(const NetworkState& state, const ExogenousInput& input, std::span<const double> metering,
                       const NetworkParams& params, double gamma = 0.0) {
    StepResult r;
    FlowVector& f = r.flows;
    f.e = compute_onramp_inflow(state, input, metering, params);
    f.o = compute_mainline_outflow(state, f.e, params);
    f.s = compute_offramp_outflow(f.o, params, state, f.e);
    f.mainstream_inflow = admitted_mainstream(state, input, f.e, params);

    const std::size_t count = params.size();
    r.next.n.resize(count);
    r.next.q.resize(count);
    r.next.step = state.step + 1;
    for (std::size_t i = 0; i < count; ++i) {
        const double upstream = i == 0 ? f.mainstream_inflow : f.o[i - 1];
        double n = state.n[i] + upstream + f.e[i] - f.o[i] - f.s[i];
        const double cap = params.cells[i].capacity;
        if (n < -kStateTolerance || n > cap + kStateTolerance) {
            std::ostringstream msg;
            msg.precision(17);
            msg << "cell " << i << " left its bounds at step " << state.step << ": n = " << n;
            throw ModelConsistencyError(msg.str());
        }
        r.next.n[i] = std::clamp(n, 0.0, cap);
        const double q = params.cells[i].has_onramp ? state.q[i] + input.ramp_demands[i] - f.e[i] : 0.0;
        r.next.q[i] = std::max(0.0, q);
    }
    r.cost = stage_cost(f, r.next, params, gamma);
    return r;
}

struct RolloutResult {
    std::vector<NetworkState> states;  // states[0] is the initial state
    std::vector<FlowVector> flows;
    std::vector<StageCost> costs;
    double total_j = 0.0;
};

/// Applies `step` `horizon` times. Inputs and plan entries shorter than the
/// horizon hold their last element; an empty plan means unmetered.
inline RolloutResult rollout(const NetworkState& state, std::span<const ExogenousInput> inputs,
                             std::span<const std::vector<double>> plan, const NetworkParams& params,
                             std::size_t horizon, double gamma) {
    if (horizon < 1) throw std::invalid_argument("rollout horizon must be >= 1");
    if (inputs.empty()) throw std::invalid_argument("rollout needs at least one exogenous input");
    RolloutResult out;
    out.states.reserve(horizon + 1);
    out.states.push_back(state);
    for (std::size_t k = 0; k < horizon; ++k) {
        const ExogenousInput& in = inputs[std::min(k, inputs.size() - 1)];
        std::span<const double> mu;
        if (!plan.empty()) mu = plan[std::min(k, plan.size() - 1)];
        StepResult r = step(out.states.back(), in, mu, params, gamma);
        out.total_j += r.cost.j;
        out.costs.push_back(r.cost);
        out.flows.push_back(std::move(r.flows));
        out.states.push_back(std::move(r.next));
    }
    return out;
}

/// Anything that can stand in for the plant when scoring candidates.
template <class M>
concept PlantModel = requires(const M& m, const NetworkState& s, const ExogenousInput& in,
                              std::span<const double> mu, double gamma) {
    { m.step(s, in, mu, gamma) } -> std::same_as<StepResult>;
    { m.params() } -> std::convertible_to<const NetworkParams&>;
};

class ActmModel {
public:
    explicit ActmModel(NetworkParams params) : params_(std::move(params)) { params_.validate(); }

    StepResult step(const NetworkState& s, const ExogenousInput& in, std::span<const double> mu,
                    double gamma) const {
        return basepar::step(s, in, mu, params_, gamma);
    }

    const NetworkParams& params() const { return params_; }

private:
    NetworkParams params_;
};

static_assert(PlantModel<ActmModel>);

}  // namespace basepar
