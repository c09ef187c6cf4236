#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "wsclip/models.hpp"
#include "wsclip/tensor.hpp"

namespace wsclip {

struct LambHyper {
    double beta1 = 0.9;
    double beta2 = 0.95;
    double epsilon = 1e-6;
    double weight_decay = 0.0;
    void validate() const;
};

// Per-parameter first/second moments plus a shared step counter.
struct LambState {
    struct Slot {
        std::vector<double> m;
        std::vector<double> v;
    };
    std::map<std::string, Slot> slots;
    std::int64_t step = 0;
};

// One LAMB update over a named parameter set, in place. Moments are
// bias-corrected by the step count; the raw update r = m_hat/(sqrt(v_hat)+eps)
// + wd*p is rescaled by the trust ratio ||p|| / ||r|| (1 when either norm
// vanishes). NaN gradients raise NumericError before any state changes.
void lamb_step(std::map<std::string, Tensor>& params,
               const std::map<std::string, Tensor>& grads, LambState& state,
               const LambHyper& hyper, double lr);

// Same update applied to one raw buffer; t is the 1-based step count.
void lamb_update_tensor(std::vector<double>& p, const std::vector<double>& g,
                        std::vector<double>& m, std::vector<double>& v, std::int64_t t,
                        const LambHyper& hyper, double lr);

struct ScheduleSpec {
    double peak_lr = 0.0;
    std::int64_t warmup_steps = 0;
    std::int64_t total_steps = 1;
    void validate() const;
};

// Linear ramp to peak over the warmup, then cosine decay to exactly zero at
// total_steps. Steps past the end clamp to zero and set *clamped.
double cosine_lr(std::int64_t step, const ScheduleSpec& spec, bool* clamped = nullptr);

// rate^(n_layers - layer_index); index 0 = input embeddings, index n_layers
// = head/projection.
double layer_decay_scale(std::int64_t layer_index, std::int64_t n_layers, double rate);

struct ParamGroup {
    std::string tower;  // label, e.g. "vision" / "text" / "align"
    std::vector<std::string> names;
    std::int64_t layer_index = 0;
    std::int64_t top_index = 0;  // layer index of the head group
    double decay_rate = 1.0;
    double base_peak_lr = 0.0;

    double lr_scale() const { return layer_decay_scale(layer_index, top_index, decay_rate); }
};

struct OptimConfig {
    double vision_peak_lr = 4e-4;
    double text_peak_lr = 4e-5;
    double vision_layer_decay = 0.9;
    double text_layer_decay = 0.75;
    LambHyper lamb;
};

// Splits one tower into (layers + 2) groups: embeddings, each block, head.
std::vector<ParamGroup> build_tower_groups(const TowerWeights& weights, double decay_rate,
                                           double peak_lr, const std::string& tower_label);

// Exhaustive, disjoint partition of both towers with the per-tower peak
// learning rates and layer decay rates from cfg.
std::vector<ParamGroup> build_param_groups(const TowerWeights& vision, const TowerWeights& text,
                                           const OptimConfig& cfg);

}  // namespace wsclip
