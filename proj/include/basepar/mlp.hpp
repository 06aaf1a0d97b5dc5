// Fixed-shape 4-3-1 feedforward network mapping a metered cell's local
// measurements (n_i, q_i, d_i, o_{i-1}) to an ALINEA gain.
#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace basepar {

inline constexpr std::size_t kMlpInputs = 4;
inline constexpr std::size_t kMlpHidden = 3;
inline constexpr std::string_view kMlpFormat = "basepar.mlp/1";

using MlpInput = std::array<double, kMlpInputs>;

struct MlpParams {
    // hidden_weights[h][k] multiplies scaled input k for hidden unit h.
    std::array<std::array<double, kMlpInputs>, kMlpHidden> hidden_weights{};
    std::array<double, kMlpHidden> hidden_bias{};
    std::array<double, kMlpHidden> output_weights{};
    double output_bias = 0.0;
    // Scaled input = (x - input_offset) / input_scale.
    MlpInput input_offset{};
    MlpInput input_scale{1.0, 1.0, 1.0, 1.0};
    std::string activation = "logistic";

    /// Number of trainable parameters.
    static constexpr std::size_t parameter_count() {
        return kMlpHidden * kMlpInputs + kMlpHidden + kMlpHidden + 1;
    }

    void validate() const {
        for (std::size_t k = 0; k < kMlpInputs; ++k)
            if (!std::isfinite(input_scale[k]) || input_scale[k] == 0.0 || !std::isfinite(input_offset[k]))
                throw std::invalid_argument("MLP input scaling must be finite and nonzero");
        if (activation != "logistic" && activation != "tanh")
            throw std::invalid_argument("unknown MLP activation '" + activation + "'");
    }

    /// Flat parameter vector: hidden weights (row-major), hidden bias, output weights, output bias.
    std::vector<double> flatten() const {
        std::vector<double> out;
        out.reserve(parameter_count());
        for (const auto& row : hidden_weights) out.insert(out.end(), row.begin(), row.end());
        out.insert(out.end(), hidden_bias.begin(), hidden_bias.end());
        out.insert(out.end(), output_weights.begin(), output_weights.end());
        out.push_back(output_bias);
        return out;
    }

    void unflatten(std::span<const double> w) {
        if (w.size() != parameter_count()) throw std::invalid_argument("MLP parameter vector has wrong size");
        std::size_t i = 0;
        for (auto& row : hidden_weights)
            for (double& v : row) v = w[i++];
        for (double& v : hidden_bias) v = w[i++];
        for (double& v : output_weights) v = w[i++];
        output_bias = w[i];
    }
};

namespace detail {

inline double activate(const std::string& kind, double z) {
    if (kind == "tanh") return std::tanh(z);
    return 1.0 / (1.0 + std::exp(-z));
}

// Derivative expressed through the activation value a.
inline double activate_slope(const std::string& kind, double a) {
    if (kind == "tanh") return 1.0 - a * a;
    return a * (1.0 - a);
}

inline MlpInput scale_inputs(const MlpParams& p, const MlpInput& x) {
    MlpInput u{};
    for (std::size_t k = 0; k < kMlpInputs; ++k) {
        if (!std::isfinite(x[k])) throw std::invalid_argument("MLP input is not finite");
        u[k] = (x[k] - p.input_offset[k]) / p.input_scale[k];
    }
    return u;
}

}  // namespace detail

inline double mlp_forward(const MlpParams& p, const MlpInput& x) {
    const MlpInput u = detail::scale_inputs(p, x);
    double out = p.output_bias;
    for (std::size_t h = 0; h < kMlpHidden; ++h) {
        double z = p.hidden_bias[h];
        for (std::size_t k = 0; k < kMlpInputs; ++k) z += p.hidden_weights[h][k] * u[k];
        out += p.output_weights[h] * detail::activate(p.activation, z);
    }
    return out;
}

/// Output and gradient of the output w.r.t. the flat parameter vector.
inline double mlp_forward_with_gradient(const MlpParams& p, const MlpInput& x, std::span<double> grad) {
    const MlpInput u = detail::scale_inputs(p, x);
    std::array<double, kMlpHidden> a{};
    double out = p.output_bias;
    for (std::size_t h = 0; h < kMlpHidden; ++h) {
        double z = p.hidden_bias[h];
        for (std::size_t k = 0; k < kMlpInputs; ++k) z += p.hidden_weights[h][k] * u[k];
        a[h] = detail::activate(p.activation, z);
        out += p.output_weights[h] * a[h];
    }
    std::size_t i = 0;
    for (std::size_t h = 0; h < kMlpHidden; ++h) {
        const double dz = p.output_weights[h] * detail::activate_slope(p.activation, a[h]);
        for (std::size_t k = 0; k < kMlpInputs; ++k) grad[i++] = dz * u[k];
    }
    for (std::size_t h = 0; h < kMlpHidden; ++h)
        grad[i++] = p.output_weights[h] * detail::activate_slope(p.activation, a[h]);
    for (std::size_t h = 0; h < kMlpHidden; ++h) grad[i++] = a[h];
    grad[i] = 1.0;
    return out;
}

// ---- parameter file ----------------------------------------------------------
//
// {
//   "format": "basepar.mlp/1",
//   "networks": [
//     { "cell": 2,                      // 1-based cell number of the metered ramp
//       "shape": [4, 3, 1],
//       "activation": "logistic",
//       "input_offset": [4 numbers], "input_scale": [4 numbers],
//       "hidden_weights": [12 numbers, row-major 3x4],
//       "hidden_bias": [3], "output_weights": [3], "output_bias": number }
//   ]
// }

struct MlpBankEntry {
    std::size_t cell = 0;  // 0-based cell index
    MlpParams params;
};

inline nlohmann::json mlp_to_json(const MlpParams& p) {
    nlohmann::json j;
    j["shape"] = {kMlpInputs, kMlpHidden, 1};
    j["activation"] = p.activation;
    j["input_offset"] = p.input_offset;
    j["input_scale"] = p.input_scale;
    std::vector<double> w;
    for (const auto& row : p.hidden_weights) w.insert(w.end(), row.begin(), row.end());
    j["hidden_weights"] = w;
    j["hidden_bias"] = p.hidden_bias;
    j["output_weights"] = p.output_weights;
    j["output_bias"] = p.output_bias;
    return j;
}

inline MlpParams mlp_from_json(const nlohmann::json& j) {
    const auto shape = j.at("shape").get<std::vector<std::size_t>>();
    if (shape != std::vector<std::size_t>{kMlpInputs, kMlpHidden, 1})
        throw std::invalid_argument("MLP shape must be [4, 3, 1]");
    MlpParams p;
    p.activation = j.at("activation").get<std::string>();
    p.input_offset = j.at("input_offset").get<MlpInput>();
    p.input_scale = j.at("input_scale").get<MlpInput>();
    const auto w = j.at("hidden_weights").get<std::vector<double>>();
    if (w.size() != kMlpHidden * kMlpInputs) throw std::invalid_argument("hidden_weights must hold 12 values");
    for (std::size_t h = 0; h < kMlpHidden; ++h)
        for (std::size_t k = 0; k < kMlpInputs; ++k) p.hidden_weights[h][k] = w[h * kMlpInputs + k];
    p.hidden_bias = j.at("hidden_bias").get<std::array<double, kMlpHidden>>();
    p.output_weights = j.at("output_weights").get<std::array<double, kMlpHidden>>();
    p.output_bias = j.at("output_bias").get<double>();
    p.validate();
    return p;
}

inline void save_mlp_bank(const std::vector<MlpBankEntry>& bank, const std::string& path) {
    nlohmann::json root;
    root["format"] = kMlpFormat;
    root["networks"] = nlohmann::json::array();
    for (const auto& entry : bank) {
        nlohmann::json j = mlp_to_json(entry.params);
        j["cell"] = entry.cell + 1;
        root["networks"].push_back(std::move(j));
    }
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << root.dump(2) << '\n';
}

inline std::vector<MlpBankEntry> load_mlp_bank(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read " + path);
    const nlohmann::json root = nlohmann::json::parse(in);
    if (root.at("format").get<std::string>() != kMlpFormat)
        throw std::invalid_argument(path + ": unsupported MLP file format");
    std::vector<MlpBankEntry> bank;
    for (const auto& j : root.at("networks")) {
        const auto cell = j.at("cell").get<std::size_t>();
        if (cell < 1) throw std::invalid_argument(path + ": cell numbers start at 1");
        bank.push_back({cell - 1, mlp_from_json(j)});
    }
    return bank;
}

}  // namespace basepar
