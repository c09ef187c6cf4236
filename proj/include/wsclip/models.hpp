#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "wsclip/tensor.hpp"

namespace wsclip {

enum class NormKind { rms, layer };
enum class TowerKind { vision, text };

const char* to_string(NormKind k);
const char* to_string(TowerKind k);
NormKind norm_kind_from_string(const std::string& s);

// Architecture hyperparameters for one encoder tower. The EVA-style vision
// variant (norm_kind = rms) carries no Q/K/V projection biases.
struct TowerConfig {
    TowerKind kind = TowerKind::vision;
    std::int64_t layers = 2;
    std::int64_t width = 64;
    std::int64_t heads = 4;
    std::int64_t mlp_ratio = 4;
    NormKind norm_kind = NormKind::layer;
    bool qkv_bias = true;

    // vision towers
    std::int64_t patch_size = 8;
    std::int64_t input_resolution = 32;

    // text towers
    std::int64_t vocab_size = 0;
    std::int64_t context_length = 0;

    std::int64_t projection_dim = 64;

    bool has_qkv_bias() const { return norm_kind == NormKind::layer && qkv_bias; }
    std::int64_t patches_per_side() const { return input_resolution / patch_size; }
    std::int64_t n_patches() const { return patches_per_side() * patches_per_side(); }
    std::int64_t patch_dim() const { return 3 * patch_size * patch_size; }
    // sequence length: patches + class token, or the text context
    std::int64_t n_tokens() const {
        return kind == TowerKind::vision ? n_patches() + 1 : context_length;
    }
    void validate() const;
};

struct ClipConfig {
    TowerConfig vision;
    TowerConfig text;
    double temperature = 0.01;  // logit scale is 1/temperature
    bool temperature_learnable = false;
    void validate() const;
};

// Named parameter map; every shape is a pure function of TowerConfig.
using TowerWeights = std::map<std::string, Tensor>;

// Canonical (name, shape) list in initialization order.
std::vector<std::pair<std::string, Shape>> tower_parameter_shapes(const TowerConfig& cfg);

// Deterministic initialization for a given seed.
TowerWeights build_tower(const TowerConfig& cfg, std::uint64_t init_seed);

// Exact element count of all tensors produced by build_tower.
std::int64_t count_parameters(const TowerConfig& cfg);

// Analytic multiply-accumulate count x2, in GFLOPs, for one forward pass of
// one sample. Counts the matmul work (QKV/out projections, the quadratic
// attention terms, the MLP, patch embedding, final projection); the O(n*d)
// normalization work is not counted.
double forward_gflops(const TowerConfig& cfg);

// Re-registers every parameter on a tape so gradients can be collected.
TowerWeights watch_tower(Tape& tape, const TowerWeights& weights);

// images: [b, 3, H, W] -> patches [b, n_patches, 3*p*p]; constant transform
Tensor patchify(const Tensor& images, std::int64_t patch_size);

struct VisionActivations {
    Tensor tokens;     // [b, n_kept+1, width] after the final norm
    Tensor embedding;  // [b, projection_dim], projected class token
    std::vector<std::int64_t> kept_patches;
};

// keep_mask: per-patch keep flags (length n_patches), or length n_patches+1
// with the leading entry covering the class token, which must be kept.
VisionActivations vision_forward(const TowerWeights& weights, const TowerConfig& cfg,
                                 const Tensor& images,
                                 const std::vector<bool>* keep_mask = nullptr);

// Projected class-token embedding; not normalized.
Tensor encode_image(const TowerWeights& weights, const TowerConfig& cfg, const Tensor& images,
                    const std::vector<bool>* keep_mask = nullptr);

struct TextActivations {
    Tensor tokens;     // [b, context, width] after the final norm
    Tensor embedding;  // [b, projection_dim], projected end-of-text position
};

// token_ids: b rows of exactly context_length ids; every row must contain
// eot_id. Causal masking keeps positions after end-of-text inert.
TextActivations text_forward(const TowerWeights& weights, const TowerConfig& cfg,
                             const std::vector<std::vector<std::int64_t>>& token_ids,
                             std::int64_t eot_id);

Tensor encode_text(const TowerWeights& weights, const TowerConfig& cfg,
                   const std::vector<std::vector<std::int64_t>>& token_ids,
                   std::int64_t eot_id);

}  // namespace wsclip
