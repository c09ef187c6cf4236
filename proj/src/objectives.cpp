#include "wsclip/objectives.hpp"

#include <cmath>

#include "wsclip/errors.hpp"
#include "wsclip/rng.hpp"

namespace wsclip {

std::int64_t PatchMask::kept_count() const {
    std::int64_t n = 0;
    for (bool k : keep) n += k ? 1 : 0;
    return n;
}

std::vector<std::int64_t> PatchMask::kept_indices() const {
    std::vector<std::int64_t> out;
    for (size_t i = 0; i < keep.size(); ++i)
        if (keep[i]) out.push_back(static_cast<std::int64_t>(i));
    return out;
}

std::vector<std::int64_t> PatchMask::dropped_indices() const {
    std::vector<std::int64_t> out;
    for (size_t i = 0; i < keep.size(); ++i)
        if (!keep[i]) out.push_back(static_cast<std::int64_t>(i));
    return out;
}

PatchMask sample_patch_mask(std::int64_t n_patches, double ratio, std::uint64_t rng_seed) {
    if (!(ratio >= 0.0 && ratio < 1.0))
        throw ConfigError("sample_patch_mask: ratio " + std::to_string(ratio) +
                          " outside [0, 1)");
    if (n_patches <= 0) throw ConfigError("sample_patch_mask: no patches");
    const auto n_drop = static_cast<std::int64_t>(
        std::llround(ratio * static_cast<double>(n_patches)));

    PatchMask mask;
    mask.ratio = ratio;
    mask.keep.assign(static_cast<size_t>(n_patches), true);
    if (n_drop == 0) return mask;

    // partial Fisher-Yates: the first n_drop slots become the dropped set
    std::vector<std::int64_t> idx(static_cast<size_t>(n_patches));
    for (std::int64_t i = 0; i < n_patches; ++i) idx[static_cast<size_t>(i)] = i;
    Rng rng(rng_seed);
    for (std::int64_t i = 0; i < n_drop; ++i) {
        const auto j = i + static_cast<std::int64_t>(
                               rng.below(static_cast<std::uint64_t>(n_patches - i)));
        std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
        mask.keep[static_cast<size_t>(idx[static_cast<size_t>(i)])] = false;
    }
    return mask;
}

namespace {

void check_contrastive_inputs(const Tensor& img, const Tensor& txt) {
    if (img.rank() != 2 || txt.rank() != 2 || img.shape() != txt.shape())
        throw DimensionError("contrastive_loss: embeddings must be matching [b, d], got " +
                             shape_str(img.shape()) + " vs " + shape_str(txt.shape()));
    if (img.dim(0) < 1) throw DimensionError("contrastive_loss: empty batch");
    for (double v : img.values())
        if (!std::isfinite(v)) throw NumericError("contrastive_loss: non-finite image embedding");
    for (double v : txt.values())
        if (!std::isfinite(v)) throw NumericError("contrastive_loss: non-finite text embedding");
}

ContrastiveResult symmetric_ce(const Tensor& logits) {
    Tensor loss = affine(
        add(cross_entropy_diag(logits), cross_entropy_diag(transpose2d(logits))), 0.5, 0.0);
    return ContrastiveResult{loss, logits};
}

}  // namespace

ContrastiveResult contrastive_loss(const ContrastiveBatch& batch) {
    if (!(batch.temperature > 0.0))
        throw ConfigError("contrastive_loss: temperature must be > 0");
    check_contrastive_inputs(batch.image_embeddings, batch.text_embeddings);
    Tensor img_n = l2_normalize_last(batch.image_embeddings);
    Tensor txt_n = l2_normalize_last(batch.text_embeddings);
    return symmetric_ce(affine(bmm_nt(img_n, txt_n), 1.0 / batch.temperature, 0.0));
}

ContrastiveResult contrastive_loss_scaled(const Tensor& image_embeddings,
                                          const Tensor& text_embeddings,
                                          const Tensor& logit_scale) {
    if (logit_scale.size() != 1)
        throw DimensionError("contrastive_loss_scaled: logit_scale must be a scalar");
    if (!(logit_scale.values()[0] > 0.0))
        throw ConfigError("contrastive_loss_scaled: logit scale must be > 0");
    check_contrastive_inputs(image_embeddings, text_embeddings);
    Tensor img_n = l2_normalize_last(image_embeddings);
    Tensor txt_n = l2_normalize_last(text_embeddings);
    return symmetric_ce(mul(bmm_nt(img_n, txt_n), logit_scale));
}

Tensor distillation_loss(const Tensor& student_feats, const Tensor& teacher_feats,
                         const PatchMask& mask) {
    if (student_feats.rank() != 3 || student_feats.shape() != teacher_feats.shape())
        throw DimensionError("distillation_loss: features must be matching [b, n, d], got " +
                             shape_str(student_feats.shape()) + " vs " +
                             shape_str(teacher_feats.shape()));
    if (static_cast<std::int64_t>(mask.keep.size()) != student_feats.dim(1))
        throw DimensionError("distillation_loss: mask covers " +
                             std::to_string(mask.keep.size()) + " positions, features have " +
                             std::to_string(student_feats.dim(1)));
    const std::vector<std::int64_t> masked = mask.dropped_indices();
    if (masked.empty()) throw ContractError("distillation_loss: mask selects zero positions");

    // Targets are constants: detach the teacher if it rode in on a tape.
    Tensor teacher = teacher_feats.on_tape()
                         ? Tensor(teacher_feats.shape(), teacher_feats.values())
                         : teacher_feats;

    Tensor s = l2_normalize_last(select_tokens(student_feats, masked));
    Tensor t = l2_normalize_last(select_tokens(teacher, masked));
    Tensor cosine = sum_last(mul(s, t));        // [b, m]
    return affine(mean(cosine), -1.0, 1.0);     // 1 - mean cos
}

}  // namespace wsclip
