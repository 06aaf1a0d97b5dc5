// Base block: offline-tuned ramp-metering controllers.
//
// ALINEA drives the density of each metered cell towards rho_crit,
//
//   mu_i(k) = max{ mu_i(k-1) + theta_i (rho_crit - rho_i(k)), 0 },
//
// either with fixed gains (explicit base) or with gains produced each step by
// a trained network (implicit base).
#pragma once

#include <algorithm>
#include <cstddef>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "basepar/actm.hpp"
#include "basepar/mlp.hpp"

namespace basepar {

struct AlineaState {
    std::vector<double> gains;    // per metered ramp
    std::vector<double> mu_prev;  // per metered ramp, vehicles/step
};

inline std::vector<double> alinea_step(AlineaState& state, std::span<const double> rho, double rho_crit) {
    if (rho.size() != state.gains.size() || state.mu_prev.size() != state.gains.size())
        throw TopologyError("ALINEA state and density vectors differ in size");
    std::vector<double> mu(rho.size());
    for (std::size_t r = 0; r < rho.size(); ++r) {
        if (!(rho[r] >= 0.0)) throw std::invalid_argument("density must be nonnegative");
        mu[r] = std::max(state.mu_prev[r] + state.gains[r] * (rho_crit - rho[r]), 0.0);
    }
    state.mu_prev = mu;
    return mu;
}

/// What a controller sees at a control step.
struct Measurement {
    NetworkState state;
    ExogenousInput demand;
    // Mainline flow into each cell during the previous step (o_{i-1}).
    std::vector<double> upstream_flow;
};

inline std::vector<double> upstream_flows(const FlowVector& f) {
    std::vector<double> up(f.o.size(), 0.0);
    if (up.empty()) return up;
    up[0] = f.mainstream_inflow;
    for (std::size_t i = 1; i < up.size(); ++i) up[i] = f.o[i - 1];
    return up;
}

struct BaseDecision {
    std::vector<double> metering;  // per metered ramp
    std::vector<double> gains;     // ALINEA gains used for this step
};

enum class BaseKind { explicit_law, implicit_law };

class BaseController {
public:
    virtual ~BaseController() = default;

    virtual const std::string& label() const = 0;
    virtual BaseKind kind() const = 0;
    /// Computes the metering for this step and advances the internal mu_prev.
    virtual BaseDecision decide(const Measurement& m, const NetworkParams& params) = 0;
    virtual std::unique_ptr<BaseController> clone() const = 0;

    virtual const std::vector<double>& previous_metering() const = 0;
    virtual void set_previous_metering(std::span<const double> mu) = 0;
};

namespace detail {

inline std::vector<double> metered_densities(const NetworkState& s, const NetworkParams& params) {
    const auto rho = density(s, params);
    std::vector<double> out;
    for (std::size_t i : params.metered_cells()) out.push_back(rho[i]);
    return out;
}

}  // namespace detail

class AlineaController final : public BaseController {
public:
    AlineaController(std::vector<double> gains, std::vector<double> mu_prev, std::string label = "ALINEA")
        : state_{std::move(gains), std::move(mu_prev)}, label_(std::move(label)) {
        if (state_.gains.size() != state_.mu_prev.size())
            throw TopologyError("ALINEA gains and initial metering differ in size");
    }

    const std::string& label() const override { return label_; }
    BaseKind kind() const override { return BaseKind::explicit_law; }

    BaseDecision decide(const Measurement& m, const NetworkParams& params) override {
        const auto rho = detail::metered_densities(m.state, params);
        BaseDecision d;
        d.gains = state_.gains;
        d.metering = alinea_step(state_, rho, params.rho_crit);
        return d;
    }

    std::unique_ptr<BaseController> clone() const override { return std::make_unique<AlineaController>(*this); }

    const std::vector<double>& previous_metering() const override { return state_.mu_prev; }
    void set_previous_metering(std::span<const double> mu) override {
        state_.mu_prev.assign(mu.begin(), mu.end());
    }

    const AlineaState& state() const { return state_; }

private:
    AlineaState state_;
    std::string label_;
};

/// Implicit base: one network per metered ramp produces theta (clamped to
/// [0, gain_max]), then ALINEA.
class AnnController final : public BaseController {
public:
    AnnController(std::vector<MlpBankEntry> bank, std::vector<double> mu_prev, double gain_max = 1.0,
                  std::string label = "ANN")
        : bank_(std::move(bank)), mu_prev_(std::move(mu_prev)), gain_max_(gain_max), label_(std::move(label)) {
        if (bank_.size() != mu_prev_.size())
            throw TopologyError("ANN bank and initial metering differ in size");
    }

    const std::string& label() const override { return label_; }
    BaseKind kind() const override { return BaseKind::implicit_law; }

    std::vector<double> gains(const Measurement& m) const {
        std::vector<double> theta(bank_.size());
        for (std::size_t r = 0; r < bank_.size(); ++r) {
            const std::size_t i = bank_[r].cell;
            const double raw = mlp_forward(bank_[r].params, {m.state.n.at(i), m.state.q.at(i),
                                                             m.demand.ramp_demands.at(i), m.upstream_flow.at(i)});
            theta[r] = std::clamp(raw, 0.0, gain_max_);
        }
        return theta;
    }

    BaseDecision decide(const Measurement& m, const NetworkParams& params) override {
        const auto metered = params.metered_cells();
        if (metered.size() != bank_.size()) throw TopologyError("ANN bank does not cover the metered ramps");
        for (std::size_t r = 0; r < bank_.size(); ++r)
            if (bank_[r].cell != metered[r]) throw TopologyError("ANN bank cells do not match metered cells");
        AlineaState st{gains(m), mu_prev_};
        BaseDecision d;
        d.gains = st.gains;
        d.metering = alinea_step(st, detail::metered_densities(m.state, params), params.rho_crit);
        mu_prev_ = d.metering;
        return d;
    }

    std::unique_ptr<BaseController> clone() const override { return std::make_unique<AnnController>(*this); }

    const std::vector<double>& previous_metering() const override { return mu_prev_; }
    void set_previous_metering(std::span<const double> mu) override { mu_prev_.assign(mu.begin(), mu.end()); }

    const std::vector<MlpBankEntry>& bank() const { return bank_; }

private:
    std::vector<MlpBankEntry> bank_;
    std::vector<double> mu_prev_;
    double gain_max_;
    std::string label_;
};

/// Base controller output extended over a prediction window.
struct WarmStart {
    std::vector<std::vector<double>> metering;  // [step][ramp]
    std::vector<std::vector<double>> gains;     // [step][ramp]
    std::vector<StageCost> costs;               // predicted stage costs along the rollout
};

/// Runs a copy of `base` in closed loop with the model for `horizon` steps. The
/// caller's controller is not modified. Forecast entries past its end hold the
/// last value.
inline WarmStart warm_start_rollout(const BaseController& base, const Measurement& measurement,
                                    std::span<const ExogenousInput> forecast, std::size_t horizon,
                                    const NetworkParams& params, double gamma = 0.0) {
    if (horizon < 1) throw std::invalid_argument("warm start horizon must be >= 1");
    if (forecast.empty()) throw std::invalid_argument("warm start needs a demand forecast");
    auto ctl = base.clone();
    WarmStart ws;
    Measurement m = measurement;
    for (std::size_t k = 0; k < horizon; ++k) {
        m.demand = forecast[std::min(k, forecast.size() - 1)];
        BaseDecision d = ctl->decide(m, params);
        StepResult r = step(m.state, m.demand, d.metering, params, gamma);
        ws.metering.push_back(std::move(d.metering));
        ws.gains.push_back(std::move(d.gains));
        ws.costs.push_back(r.cost);
        m.upstream_flow = upstream_flows(r.flows);
        m.state = std::move(r.next);
    }
    return ws;
}

}  // namespace basepar
