#include "wsclip/optim.hpp"

#include <cmath>

#include "wsclip/errors.hpp"

namespace wsclip {

void LambHyper::validate() const {
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
        throw ConfigError("lamb: betas must lie in [0, 1)");
    if (!(epsilon > 0.0)) throw ConfigError("lamb: epsilon must be > 0");
    if (weight_decay < 0.0) throw ConfigError("lamb: negative weight decay");
}

void lamb_update_tensor(std::vector<double>& p, const std::vector<double>& g,
                        std::vector<double>& m, std::vector<double>& v, std::int64_t t,
                        const LambHyper& hyper, double lr) {
    const size_t n = p.size();
    const double bc1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(t));
    double p_norm_sq = 0.0, r_norm_sq = 0.0;
    std::vector<double> r(n);
    for (size_t i = 0; i < n; ++i) {
        m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g[i];
        v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g[i] * g[i];
        const double m_hat = m[i] / bc1;
        const double v_hat = v[i] / bc2;
        r[i] = m_hat / (std::sqrt(v_hat) + hyper.epsilon) + hyper.weight_decay * p[i];
        p_norm_sq += p[i] * p[i];
        r_norm_sq += r[i] * r[i];
    }
    const double p_norm = std::sqrt(p_norm_sq);
    const double r_norm = std::sqrt(r_norm_sq);
    const double trust = (p_norm > 0.0 && r_norm > 0.0) ? p_norm / r_norm : 1.0;
    for (size_t i = 0; i < n; ++i) p[i] -= lr * trust * r[i];
}

void lamb_step(std::map<std::string, Tensor>& params,
               const std::map<std::string, Tensor>& grads, LambState& state,
               const LambHyper& hyper, double lr) {
    hyper.validate();
    if (lr < 0.0) throw ConfigError("lamb_step: negative learning rate");
    for (const auto& [name, p] : params) {
        auto it = grads.find(name);
        if (it == grads.end()) throw ContractError("lamb_step: no gradient for '" + name + "'");
        if (it->second.size() != p.size())
            throw DimensionError("lamb_step: gradient shape mismatch for '" + name + "'");
        for (double g : it->second.values())
            if (std::isnan(g)) throw NumericError("lamb_step: NaN gradient in '" + name + "'");
    }
    state.step += 1;
    for (auto& [name, p] : params) {
        auto& slot = state.slots[name];
        if (slot.m.empty()) {
            slot.m.assign(static_cast<size_t>(p.size()), 0.0);
            slot.v.assign(static_cast<size_t>(p.size()), 0.0);
        }
        lamb_update_tensor(p.mutable_values(), grads.at(name).values(), slot.m, slot.v,
                           state.step, hyper, lr);
    }
}

void ScheduleSpec::validate() const {
    if (!(peak_lr >= 0.0)) throw ConfigError("schedule: peak_lr must be >= 0");
    if (warmup_steps < 0 || total_steps <= warmup_steps)
        throw ConfigError("schedule: need 0 <= warmup_steps < total_steps");
}

double cosine_lr(std::int64_t step, const ScheduleSpec& spec, bool* clamped) {
    spec.validate();
    if (clamped) *clamped = false;
    if (step < 0) throw ContractError("cosine_lr: negative step");
    if (step > spec.total_steps) {
        if (clamped) *clamped = true;
        return 0.0;
    }
    if (step < spec.warmup_steps)
        return spec.peak_lr * static_cast<double>(step) /
               static_cast<double>(spec.warmup_steps);
    const double progress = static_cast<double>(step - spec.warmup_steps) /
                            static_cast<double>(spec.total_steps - spec.warmup_steps);
    return spec.peak_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

double layer_decay_scale(std::int64_t layer_index, std::int64_t n_layers, double rate) {
    if (!(rate > 0.0 && rate <= 1.0))
        throw ConfigError("layer_decay_scale: rate " + std::to_string(rate) +
                          " outside (0, 1]");
    if (layer_index < 0 || layer_index > n_layers)
        throw ContractError("layer_decay_scale: layer index " + std::to_string(layer_index) +
                            " outside [0, " + std::to_string(n_layers) + "]");
    return std::pow(rate, static_cast<double>(n_layers - layer_index));
}

namespace {

std::int64_t block_count(const TowerWeights& weights) {
    std::int64_t layers = 0;
    for (const auto& [name, t] : weights)
        if (name.rfind("blocks.", 0) == 0) {
            const size_t dot = name.find('.', 7);
            layers = std::max<std::int64_t>(layers, std::stoll(name.substr(7, dot - 7)) + 1);
        }
    return layers;
}

std::int64_t layer_index_of(const std::string& name, std::int64_t layers) {
    if (name.rfind("patch_embed.", 0) == 0 || name.rfind("token_embed.", 0) == 0 ||
        name == "cls_token" || name == "pos_embed")
        return 0;
    if (name.rfind("blocks.", 0) == 0) {
        const size_t dot = name.find('.', 7);
        return std::stoll(name.substr(7, dot - 7)) + 1;
    }
    if (name.rfind("final_norm.", 0) == 0 || name.rfind("proj.", 0) == 0) return layers + 1;
    throw ContractError("param groups: unrecognized parameter '" + name + "'");
}

}  // namespace

std::vector<ParamGroup> build_tower_groups(const TowerWeights& weights, double decay_rate,
                                           double peak_lr, const std::string& tower_label) {
    const std::int64_t layers = block_count(weights);
    const std::int64_t top = layers + 1;
    std::vector<ParamGroup> groups(static_cast<size_t>(top + 1));
    for (std::int64_t i = 0; i <= top; ++i) {
        groups[static_cast<size_t>(i)].tower = tower_label;
        groups[static_cast<size_t>(i)].layer_index = i;
        groups[static_cast<size_t>(i)].top_index = top;
        groups[static_cast<size_t>(i)].decay_rate = decay_rate;
        groups[static_cast<size_t>(i)].base_peak_lr = peak_lr;
    }
    for (const auto& [name, t] : weights)
        groups[static_cast<size_t>(layer_index_of(name, layers))].names.push_back(name);
    return groups;
}

std::vector<ParamGroup> build_param_groups(const TowerWeights& vision, const TowerWeights& text,
                                           const OptimConfig& cfg) {
    std::vector<ParamGroup> groups =
        build_tower_groups(vision, cfg.vision_layer_decay, cfg.vision_peak_lr, "vision");
    std::vector<ParamGroup> text_groups =
        build_tower_groups(text, cfg.text_layer_decay, cfg.text_peak_lr, "text");
    groups.insert(groups.end(), text_groups.begin(), text_groups.end());
    return groups;
}

}  // namespace wsclip
