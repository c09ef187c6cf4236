#pragma once

#include <cstdint>
#include <vector>

#include "wsclip/tensor.hpp"

namespace wsclip {

// Patch-level drop mask; the class token is never part of it.
struct PatchMask {
    std::vector<bool> keep;
    double ratio = 0.0;

    std::int64_t kept_count() const;
    std::vector<std::int64_t> kept_indices() const;
    std::vector<std::int64_t> dropped_indices() const;
};

// Drops exactly round(ratio * n_patches) positions, uniformly without
// replacement; deterministic per seed.
PatchMask sample_patch_mask(std::int64_t n_patches, double ratio, std::uint64_t rng_seed);

struct ContrastiveBatch {
    Tensor image_embeddings;  // [b, d], raw (unnormalized) tower outputs
    Tensor text_embeddings;   // [b, d]
    double temperature = 0.01;
};

struct ContrastiveResult {
    Tensor loss;    // scalar: 0.5 * (CE over rows + CE over columns), diagonal targets
    Tensor logits;  // [b, b], rows are images
};

ContrastiveResult contrastive_loss(const ContrastiveBatch& batch);

// Learnable-logit-scale variant for the temperature ablation: logit_scale
// is a positive scalar tensor (1/tau), typically a watched parameter.
ContrastiveResult contrastive_loss_scaled(const Tensor& image_embeddings,
                                          const Tensor& text_embeddings,
                                          const Tensor& logit_scale);

// Mean over the mask's dropped positions of 1 - cosine(student token,
// teacher token). The teacher side never receives gradient.
Tensor distillation_loss(const Tensor& student_feats, const Tensor& teacher_feats,
                         const PatchMask& mask);

}  // namespace wsclip
