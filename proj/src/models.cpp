#include "wsclip/models.hpp"

#include <cmath>
#include <cstring>

#include "wsclip/errors.hpp"
#include "wsclip/rng.hpp"

namespace wsclip {

const char* to_string(NormKind k) { return k == NormKind::rms ? "rms" : "layer"; }
const char* to_string(TowerKind k) { return k == TowerKind::vision ? "vision" : "text"; }

NormKind norm_kind_from_string(const std::string& s) {
    if (s == "rms") return NormKind::rms;
    if (s == "layer") return NormKind::layer;
    throw ConfigError("unknown norm kind '" + s + "' (expected rms|layer)");
}

void TowerConfig::validate() const {
    if (layers < 0) throw ConfigError("tower: layers must be >= 0");
    if (width <= 0 || heads <= 0) throw ConfigError("tower: width and heads must be positive");
    if (width % heads != 0)
        throw ConfigError("tower: width " + std::to_string(width) + " not divisible by heads " +
                          std::to_string(heads));
    if (mlp_ratio <= 0) throw ConfigError("tower: mlp_ratio must be positive");
    if (projection_dim <= 0) throw ConfigError("tower: projection_dim must be positive");
    if (kind == TowerKind::vision) {
        if (patch_size <= 0 || input_resolution <= 0)
            throw ConfigError("vision tower: patch_size and input_resolution must be positive");
        if (input_resolution % patch_size != 0)
            throw ConfigError("vision tower: resolution " + std::to_string(input_resolution) +
                              " not divisible by patch size " + std::to_string(patch_size));
    } else {
        if (vocab_size <= 0 || context_length <= 0)
            throw ConfigError("text tower: vocab_size and context_length must be positive");
    }
}

void ClipConfig::validate() const {
    vision.validate();
    text.validate();
    if (vision.kind != TowerKind::vision || text.kind != TowerKind::text)
        throw ConfigError("clip: tower kinds are swapped");
    if (!(temperature > 0.0)) throw ConfigError("clip: temperature must be > 0");
    if (vision.projection_dim != text.projection_dim)
        throw ConfigError("clip: projection dims differ, vision " +
                          std::to_string(vision.projection_dim) + " vs text " +
                          std::to_string(text.projection_dim));
}

std::vector<std::pair<std::string, Shape>> tower_parameter_shapes(const TowerConfig& cfg) {
    cfg.validate();
    std::vector<std::pair<std::string, Shape>> out;
    const std::int64_t w = cfg.width;
    const std::int64_t hidden = w * cfg.mlp_ratio;
    const bool ln = cfg.norm_kind == NormKind::layer;

    if (cfg.kind == TowerKind::vision) {
        out.emplace_back("patch_embed.weight", Shape{cfg.patch_dim(), w});
        out.emplace_back("patch_embed.bias", Shape{w});
        out.emplace_back("cls_token", Shape{w});
        out.emplace_back("pos_embed", Shape{cfg.n_patches() + 1, w});
    } else {
        out.emplace_back("token_embed.weight", Shape{cfg.vocab_size, w});
        out.emplace_back("pos_embed", Shape{cfg.context_length, w});
    }
    for (std::int64_t b = 0; b < cfg.layers; ++b) {
        const std::string p = "blocks." + std::to_string(b) + ".";
        out.emplace_back(p + "norm1.gamma", Shape{w});
        if (ln) out.emplace_back(p + "norm1.beta", Shape{w});
        for (const char* proj : {"q", "k", "v"}) {
            out.emplace_back(p + "attn." + proj + ".weight", Shape{w, w});
            if (cfg.has_qkv_bias()) out.emplace_back(p + "attn." + proj + ".bias", Shape{w});
        }
        out.emplace_back(p + "attn.out.weight", Shape{w, w});
        out.emplace_back(p + "attn.out.bias", Shape{w});
        out.emplace_back(p + "norm2.gamma", Shape{w});
        if (ln) out.emplace_back(p + "norm2.beta", Shape{w});
        out.emplace_back(p + "mlp.fc1.weight", Shape{w, hidden});
        out.emplace_back(p + "mlp.fc1.bias", Shape{hidden});
        out.emplace_back(p + "mlp.fc2.weight", Shape{hidden, w});
        out.emplace_back(p + "mlp.fc2.bias", Shape{w});
    }
    out.emplace_back("final_norm.gamma", Shape{w});
    if (ln) out.emplace_back("final_norm.beta", Shape{w});
    out.emplace_back("proj.weight", Shape{w, cfg.projection_dim});
    return out;
}

namespace {

bool is_gain(const std::string& name) {
    return name.size() >= 6 && name.compare(name.size() - 6, 6, ".gamma") == 0;
}

bool is_zero_init(const std::string& name) {
    return (name.size() >= 5 && name.compare(name.size() - 5, 5, ".beta") == 0) ||
           (name.size() >= 5 && name.compare(name.size() - 5, 5, ".bias") == 0);
}

bool is_embedding_like(const std::string& name) {
    return name == "cls_token" || name == "pos_embed" || name == "token_embed.weight";
}

}  // namespace

TowerWeights build_tower(const TowerConfig& cfg, std::uint64_t init_seed) {
    Rng rng(Rng::mix(init_seed, cfg.kind == TowerKind::vision ? 0x76697369 : 0x74657874));
    TowerWeights weights;
    for (const auto& [name, shape] : tower_parameter_shapes(cfg)) {
        Tensor t(shape);
        auto& v = t.mutable_values();
        if (is_gain(name)) {
            std::fill(v.begin(), v.end(), 1.0);
        } else if (is_zero_init(name)) {
            // zeros
        } else if (is_embedding_like(name)) {
            for (auto& x : v) x = rng.normal(0.0, 0.02);
        } else {
            // 2-d weights: Xavier-normal over fan-in/fan-out
            const double fan_in = static_cast<double>(shape[0]);
            const double fan_out = static_cast<double>(shape[shape.size() - 1]);
            const double std_dev = std::sqrt(2.0 / (fan_in + fan_out));
            for (auto& x : v) x = rng.normal(0.0, std_dev);
        }
        weights.emplace(name, std::move(t));
    }
    return weights;
}

std::int64_t count_parameters(const TowerConfig& cfg) {
    std::int64_t total = 0;
    for (const auto& [name, shape] : tower_parameter_shapes(cfg)) total += numel(shape);
    return total;
}

double forward_gflops(const TowerConfig& cfg) {
    cfg.validate();
    const double w = static_cast<double>(cfg.width);
    const double n = static_cast<double>(cfg.n_tokens());
    const double ratio = static_cast<double>(cfg.mlp_ratio);
    double macs = 0.0;
    if (cfg.kind == TowerKind::vision)
        macs += static_cast<double>(cfg.n_patches()) * static_cast<double>(cfg.patch_dim()) * w;
    // per block: qkv + out projections, two n^2*d attention products, mlp
    const double per_block = 4.0 * n * w * w + 2.0 * n * n * w + 2.0 * n * w * w * ratio;
    macs += per_block * static_cast<double>(cfg.layers);
    macs += w * static_cast<double>(cfg.projection_dim);  // pooled token only
    return 2.0 * macs / 1e9;
}

TowerWeights watch_tower(Tape& tape, const TowerWeights& weights) {
    TowerWeights out;
    for (const auto& [name, t] : weights) out.emplace(name, tape.watch(t));
    return out;
}

Tensor patchify(const Tensor& images, std::int64_t patch_size) {
    if (images.rank() != 4 || images.dim(1) != 3)
        throw DimensionError("patchify: expects images [b,3,H,W], got " +
                             shape_str(images.shape()));
    const std::int64_t b = images.dim(0), h = images.dim(2), w = images.dim(3);
    if (h % patch_size != 0 || w % patch_size != 0)
        throw DimensionError("patchify: image size not divisible by patch size");
    const std::int64_t side_y = h / patch_size, side_x = w / patch_size;
    const std::int64_t np = side_y * side_x;
    const std::int64_t pd = 3 * patch_size * patch_size;
    std::vector<double> out(static_cast<size_t>(b * np * pd));
    const auto& iv = images.values();
    for (std::int64_t bi = 0; bi < b; ++bi)
        for (std::int64_t py = 0; py < side_y; ++py)
            for (std::int64_t px = 0; px < side_x; ++px) {
                double* dst = out.data() + ((bi * np) + py * side_x + px) * pd;
                for (std::int64_t c = 0; c < 3; ++c)
                    for (std::int64_t y = 0; y < patch_size; ++y)
                        for (std::int64_t x = 0; x < patch_size; ++x)
                            *dst++ = iv[static_cast<size_t>(
                                ((bi * 3 + c) * h + py * patch_size + y) * w + px * patch_size +
                                x)];
            }
    return Tensor({b, np, pd}, std::move(out));
}

namespace {

const Tensor& param(const TowerWeights& weights, const std::string& name) {
    auto it = weights.find(name);
    if (it == weights.end()) throw ContractError("missing parameter '" + name + "'");
    return it->second;
}

const Tensor* param_opt(const TowerWeights& weights, const std::string& name) {
    auto it = weights.find(name);
    return it == weights.end() ? nullptr : &it->second;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor* bias) {
    Tensor y = linear_matmul(x, w);
    return bias ? add(y, *bias) : y;
}

Tensor apply_norm(const TowerWeights& weights, const TowerConfig& cfg, const std::string& prefix,
                  const Tensor& x) {
    constexpr double kEps = 1e-6;
    if (cfg.norm_kind == NormKind::rms) return rms_norm(x, param(weights, prefix + ".gamma"), kEps);
    return layer_norm(x, param(weights, prefix + ".gamma"), param(weights, prefix + ".beta"),
                      kEps);
}

// Pre-norm transformer block: x + attn(norm1(x)), then x + mlp(norm2(x)).
Tensor block_forward(const TowerWeights& weights, const TowerConfig& cfg, std::int64_t block,
                     const Tensor& x, const Tensor* mask) {
    const std::string p = "blocks." + std::to_string(block) + ".";
    const std::int64_t b = x.dim(0), n = x.dim(1), w = cfg.width;
    const std::int64_t heads = cfg.heads, dh = w / heads;

    Tensor y = apply_norm(weights, cfg, p + "norm1", x);
    auto head_split = [&](const Tensor& t) {
        return swap_dims12(reshape(t, {b, n, heads, dh}));  // [b,h,n,dh]
    };
    Tensor q = head_split(linear(y, param(weights, p + "attn.q.weight"),
                                 param_opt(weights, p + "attn.q.bias")));
    Tensor k = head_split(linear(y, param(weights, p + "attn.k.weight"),
                                 param_opt(weights, p + "attn.k.bias")));
    Tensor v = head_split(linear(y, param(weights, p + "attn.v.weight"),
                                 param_opt(weights, p + "attn.v.bias")));
    Tensor attn = attention(q, k, v, mask);
    attn = reshape(swap_dims12(attn), {b, n, w});
    attn = linear(attn, param(weights, p + "attn.out.weight"),
                  param_opt(weights, p + "attn.out.bias"));
    Tensor h = add(x, attn);

    Tensor z = apply_norm(weights, cfg, p + "norm2", h);
    z = gelu(linear(z, param(weights, p + "mlp.fc1.weight"), param_opt(weights, p + "mlp.fc1.bias")));
    z = linear(z, param(weights, p + "mlp.fc2.weight"), param_opt(weights, p + "mlp.fc2.bias"));
    return add(h, z);
}

}  // namespace

VisionActivations vision_forward(const TowerWeights& weights, const TowerConfig& cfg,
                                 const Tensor& images, const std::vector<bool>* keep_mask) {
    cfg.validate();
    if (cfg.kind != TowerKind::vision) throw ConfigError("vision_forward: not a vision tower");
    if (images.rank() != 4 || images.dim(2) != cfg.input_resolution ||
        images.dim(3) != cfg.input_resolution)
        throw DimensionError("vision_forward: expected images [b,3," +
                             std::to_string(cfg.input_resolution) + "," +
                             std::to_string(cfg.input_resolution) + "], got " +
                             shape_str(images.shape()));
    const std::int64_t np = cfg.n_patches();

    std::vector<std::int64_t> kept;
    bool subset = false;
    if (keep_mask) {
        size_t offset = 0;
        if (keep_mask->size() == static_cast<size_t>(np + 1)) {
            if (!(*keep_mask)[0])
                throw ContractError("vision_forward: keep mask drops the class token");
            offset = 1;
        } else if (keep_mask->size() != static_cast<size_t>(np)) {
            throw DimensionError("vision_forward: keep mask length " +
                                 std::to_string(keep_mask->size()) + " != patch count " +
                                 std::to_string(np));
        }
        for (std::int64_t i = 0; i < np; ++i)
            if ((*keep_mask)[offset + static_cast<size_t>(i)]) kept.push_back(i);
        if (kept.empty()) throw ContractError("vision_forward: keep mask drops every patch");
        subset = static_cast<std::int64_t>(kept.size()) != np;
    } else {
        kept.resize(static_cast<size_t>(np));
        for (std::int64_t i = 0; i < np; ++i) kept[static_cast<size_t>(i)] = i;
    }

    Tensor tokens = linear(patchify(images, cfg.patch_size), param(weights, "patch_embed.weight"),
                           param_opt(weights, "patch_embed.bias"));
    Tensor pos_used;
    if (subset) {
        tokens = select_tokens(tokens, kept);
        std::vector<std::int64_t> pos_rows = {0};
        for (auto i : kept) pos_rows.push_back(i + 1);
        pos_used = gather_rows(param(weights, "pos_embed"), pos_rows);
    } else {
        pos_used = param(weights, "pos_embed");
    }
    Tensor x = prepend_token(tokens, param(weights, "cls_token"));
    x = add(x, pos_used);
    for (std::int64_t blk = 0; blk < cfg.layers; ++blk)
        x = block_forward(weights, cfg, blk, x, nullptr);
    x = apply_norm(weights, cfg, "final_norm", x);

    VisionActivations out;
    out.tokens = x;
    Tensor pooled = select_position(x, std::vector<std::int64_t>(static_cast<size_t>(x.dim(0)), 0));
    out.embedding = linear_matmul(pooled, param(weights, "proj.weight"));
    out.kept_patches = std::move(kept);
    return out;
}

Tensor encode_image(const TowerWeights& weights, const TowerConfig& cfg, const Tensor& images,
                    const std::vector<bool>* keep_mask) {
    return vision_forward(weights, cfg, images, keep_mask).embedding;
}

TextActivations text_forward(const TowerWeights& weights, const TowerConfig& cfg,
                             const std::vector<std::vector<std::int64_t>>& token_ids,
                             std::int64_t eot_id) {
    cfg.validate();
    if (cfg.kind != TowerKind::text) throw ConfigError("text_forward: not a text tower");
    const std::int64_t b = static_cast<std::int64_t>(token_ids.size());
    if (b == 0) throw ContractError("text_forward: empty batch");
    const std::int64_t n = cfg.context_length;

    std::vector<std::int64_t> flat;
    flat.reserve(static_cast<size_t>(b * n));
    std::vector<std::int64_t> eot_pos(static_cast<size_t>(b), -1);
    for (std::int64_t r = 0; r < b; ++r) {
        const auto& row = token_ids[static_cast<size_t>(r)];
        if (static_cast<std::int64_t>(row.size()) != n)
            throw DimensionError("text_forward: row " + std::to_string(r) + " has " +
                                 std::to_string(row.size()) + " tokens, context is " +
                                 std::to_string(n));
        for (std::int64_t i = 0; i < n; ++i) {
            const std::int64_t id = row[static_cast<size_t>(i)];
            if (id < 0 || id >= cfg.vocab_size)
                throw ContractError("text_forward: token id " + std::to_string(id) +
                                    " outside vocab of " + std::to_string(cfg.vocab_size));
            if (id == eot_id && eot_pos[static_cast<size_t>(r)] < 0)
                eot_pos[static_cast<size_t>(r)] = i;
            flat.push_back(id);
        }
        if (eot_pos[static_cast<size_t>(r)] < 0)
            throw ContractError("text_forward: row " + std::to_string(r) +
                                " has no end-of-text token");
    }

    Tensor x = embedding(param(weights, "token_embed.weight"), flat, {b, n});
    x = add(x, param(weights, "pos_embed"));

    // causal mask: position i attends to j <= i
    std::vector<double> mvals(static_cast<size_t>(n * n), 0.0);
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = i + 1; j < n; ++j) mvals[static_cast<size_t>(i * n + j)] = -1e30;
    Tensor mask({n, n}, std::move(mvals));

    for (std::int64_t blk = 0; blk < cfg.layers; ++blk)
        x = block_forward(weights, cfg, blk, x, &mask);
    x = apply_norm(weights, cfg, "final_norm", x);

    TextActivations out;
    out.tokens = x;
    out.embedding = linear_matmul(select_position(x, eot_pos), param(weights, "proj.weight"));
    return out;
}

Tensor encode_text(const TowerWeights& weights, const TowerConfig& cfg,
                   const std::vector<std::vector<std::int64_t>>& token_ids, std::int64_t eot_id) {
    return text_forward(weights, cfg, token_ids, eot_id).embedding;
}

}  // namespace wsclip
