// SPDX-License-Identifier: Apache-2.0
//
// Training-free router steering: amplify the selected experts' gate weight
// by a coefficient and renormalize. The multiplier table is built once from
// the expert score table and applied with one length-N multiply per MoE
// layer per token; equivalently, ln(multiplier) can be added to the router
// logits before selection. Both application points are supported and must
// agree within 1e-12.

#pragma once

#include <cmath>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dsmoe/common.hpp"
#include "dsmoe/model.hpp"
#include "dsmoe/profiler.hpp"

namespace dsmoe {

struct SteeringConfig {
    std::string fingerprint;
    double alpha = 1.0;
    std::vector<std::pair<int, int>> experts;  // E*: (layer, expert) pairs
    SteerPoint point = SteerPoint::GateWeights;

    bool operator==(const SteeringConfig&) const = default;
};

// Materializes the per-(layer, expert) multiplier table: alpha at members
// of E*, 1 everywhere else.
inline SteeringPlan make_plan(const SteeringConfig& config, const ModelConfig& model_cfg) {
    SteeringPlan plan;
    plan.point = config.point;
    plan.multipliers.assign(static_cast<size_t>(model_cfg.num_layers),
                            std::vector<double>(static_cast<size_t>(model_cfg.num_experts), 1.0));
    for (const auto& [layer, expert] : config.experts) {
        require(layer >= 0 && layer < model_cfg.num_layers, ErrorKind::Config,
                "steering config names layer " + std::to_string(layer) + " outside the model");
        require(expert >= 0 && expert < model_cfg.num_experts, ErrorKind::Config,
                "steering config names expert " + std::to_string(expert) + " outside the model");
        plan.multipliers[static_cast<size_t>(layer)][static_cast<size_t>(expert)] = config.alpha;
    }
    plan.validate(model_cfg);
    return plan;
}

// Builds a config from scored experts. The steering coefficient is
// restricted to (0, 100); diagnostic sweeps outside that range construct a
// SteeringConfig directly.
inline SteeringConfig build_config(const ExpertScoreTable& table, double alpha,
                                   SteerPoint point = SteerPoint::GateWeights) {
    require(alpha > 0.0 && alpha < 100.0 && std::isfinite(alpha), ErrorKind::Config,
            "steering coefficient must lie in (0, 100), got " + format_double(alpha));
    SteeringConfig config;
    config.fingerprint = table.fingerprint;
    config.alpha = alpha;
    config.experts = table.selected;
    config.point = point;
    return config;
}

// Steered, renormalized gate weights: w~_j = m_j w_j / sum_i m_i w_i.
inline std::vector<double> apply_steering(const std::vector<double>& weights, const std::vector<double>& multipliers) {
    require(weights.size() == multipliers.size(), ErrorKind::Dimension,
            "weights and multipliers have different lengths");
    double total = 0.0;
    std::vector<double> steered(weights.size());
    for (size_t i = 0; i < weights.size(); ++i) {
        require(weights[i] >= 0.0 && std::isfinite(weights[i]), ErrorKind::Numeric,
                "gate weights must be nonnegative and finite");
        require(multipliers[i] > 0.0 && std::isfinite(multipliers[i]), ErrorKind::Config,
                "multipliers must be positive");
        steered[i] = weights[i] * multipliers[i];
        total += steered[i];
    }
    require(total > 0.0, ErrorKind::Numeric, "all-zero gate weights cannot be normalized");
    for (double& w : steered) w /= total;
    return steered;
}

inline void require_compatible(const SteeringConfig& config, const MoEModel& model) {
    std::string fp = model.fingerprint();
    require(config.fingerprint == fp, ErrorKind::Compatibility,
            "steering config was built for checkpoint " + config.fingerprint + " but the model is " + fp);
}

// Routing for one token under a steering config.
inline RoutingDecision steered_route(const MoEModel& model, const Tensor& x, int layer,
                                     const SteeringConfig& config) {
    require_compatible(config, model);
    SteeringPlan plan = make_plan(config, model.config());
    require(layer >= 0 && layer < static_cast<int>(plan.multipliers.size()), ErrorKind::Config,
            "layer " + std::to_string(layer) + " outside the steering config");
    return model.route(x, layer, &plan.multipliers[static_cast<size_t>(layer)], plan.point);
}

// ---------------------------------------------------------------------------
// Persistence: {"fingerprint", "alpha", "experts": [[layer, index], ...],
// "mode"} — the multiplier table is re-derived on load.
// ---------------------------------------------------------------------------

inline void save_config(const SteeringConfig& config, const std::string& path) {
    nlohmann::json experts = nlohmann::json::array();
    for (const auto& [l, e] : config.experts) experts.push_back(nlohmann::json::array({l, e}));
    nlohmann::json j = {{"fingerprint", config.fingerprint},
                        {"alpha", config.alpha},
                        {"experts", experts},
                        {"mode", to_string(config.point)}};
    std::ofstream out(path);
    require(out.good(), ErrorKind::Io, "cannot open '" + path + "' for writing");
    out << j.dump(2) << "\n";
}

inline SteeringConfig load_config(const std::string& path) {
    std::ifstream in(path);
    require(in.good(), ErrorKind::Io, "cannot open '" + path + "' for reading");
    nlohmann::json j;
    SteeringConfig config;
    try {
        in >> j;
        config.fingerprint = j.at("fingerprint").get<std::string>();
        config.alpha = j.at("alpha").get<double>();
        for (const auto& pair : j.at("experts")) {
            config.experts.emplace_back(pair.at(0).get<int>(), pair.at(1).get<int>());
        }
        config.point = steer_point_from_string(j.at("mode").get<std::string>());
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::Schema, "steering config '" + path + "': " + e.what());
    }
    require(config.alpha > 0.0 && std::isfinite(config.alpha), ErrorKind::Validation,
            "stored steering coefficient must be positive");
    return config;
}

}  // namespace dsmoe
