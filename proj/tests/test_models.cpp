#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "wsclip/errors.hpp"
#include "wsclip/models.hpp"

using namespace wsclip;

namespace {

TowerConfig toy_vision() {
    TowerConfig cfg;
    cfg.kind = TowerKind::vision;
    cfg.layers = 2;
    cfg.width = 16;
    cfg.heads = 4;
    cfg.norm_kind = NormKind::rms;
    cfg.qkv_bias = false;
    cfg.patch_size = 4;
    cfg.input_resolution = 16;
    cfg.projection_dim = 12;
    return cfg;
}

TowerConfig toy_text() {
    TowerConfig cfg;
    cfg.kind = TowerKind::text;
    cfg.layers = 2;
    cfg.width = 16;
    cfg.heads = 4;
    cfg.norm_kind = NormKind::layer;
    cfg.vocab_size = 32;
    cfg.context_length = 8;
    cfg.projection_dim = 12;
    return cfg;
}

Tensor random_images(std::int64_t b, std::int64_t res, std::uint64_t seed) {
    Rng rng(seed);
    return oracles::random_tensor({b, 3, res, res}, rng, 0.5);
}

}  // namespace

TEST_CASE("zero-depth tower has only embeddings, final norm, projection") {
    TowerConfig cfg = toy_vision();
    cfg.layers = 0;
    TowerWeights w = build_tower(cfg, 1);
    CHECK(w.size() == 6);  // patch w+b, cls, pos, final gamma, proj
    CHECK(w.count("patch_embed.weight") == 1);
    CHECK(w.count("patch_embed.bias") == 1);
    CHECK(w.count("cls_token") == 1);
    CHECK(w.count("pos_embed") == 1);
    CHECK(w.count("final_norm.gamma") == 1);
    CHECK(w.count("proj.weight") == 1);
}

TEST_CASE("rms towers carry no qkv bias, layer towers with qkv_bias do") {
    TowerWeights eva = build_tower(toy_vision(), 2);
    for (const auto& [name, t] : eva) {
        CHECK(name.find("attn.q.bias") == std::string::npos);
        CHECK(name.find("attn.k.bias") == std::string::npos);
        CHECK(name.find("attn.v.bias") == std::string::npos);
    }
    TowerWeights txt = build_tower(toy_text(), 2);
    for (std::int64_t b = 0; b < 2; ++b) {
        const std::string p = "blocks." + std::to_string(b) + ".attn.";
        CHECK(txt.count(p + "q.bias") == 1);
        CHECK(txt.count(p + "k.bias") == 1);
        CHECK(txt.count(p + "v.bias") == 1);
    }
}

TEST_CASE("same seed builds identical parameter bytes") {
    TowerWeights a = build_tower(toy_vision(), 99);
    TowerWeights b = build_tower(toy_vision(), 99);
    REQUIRE(a.size() == b.size());
    for (const auto& [name, t] : a) {
        const auto& u = b.at(name).values();
        REQUIRE(t.values().size() == u.size());
        for (size_t i = 0; i < u.size(); ++i) CHECK(t.values()[i] == u[i]);
    }
    TowerWeights c = build_tower(toy_vision(), 100);
    bool any_diff = false;
    for (const auto& [name, t] : a) {
        const auto& u = c.at(name).values();
        for (size_t i = 0; i < u.size(); ++i)
            if (t.values()[i] != u[i]) any_diff = true;
    }
    CHECK(any_diff);
}

TEST_CASE("invalid configs are rejected") {
    TowerConfig cfg = toy_vision();
    cfg.heads = 3;  // 16 % 3 != 0
    CHECK_THROWS_AS(build_tower(cfg, 1), ConfigError);
    cfg = toy_vision();
    cfg.input_resolution = 15;
    CHECK_THROWS_AS(build_tower(cfg, 1), ConfigError);
}

TEST_CASE("all-keep mask reproduces the unmasked embedding bit-exactly") {
    TowerConfig cfg = toy_vision();
    TowerWeights w = build_tower(cfg, 5);
    Tensor images = random_images(2, cfg.input_resolution, 6);
    Tensor plain = encode_image(w, cfg, images);
    std::vector<bool> keep(static_cast<size_t>(cfg.n_patches()), true);
    Tensor masked = encode_image(w, cfg, images, &keep);
    REQUIRE(plain.values().size() == masked.values().size());
    for (size_t i = 0; i < plain.values().size(); ++i)
        CHECK(plain.values()[i] == masked.values()[i]);
}

TEST_CASE("duplicated image rows embed identically") {
    TowerConfig cfg = toy_vision();
    TowerWeights w = build_tower(cfg, 7);
    Tensor one = random_images(1, cfg.input_resolution, 8);
    std::vector<double> two = one.values();
    two.insert(two.end(), one.values().begin(), one.values().end());
    Tensor both({2, 3, cfg.input_resolution, cfg.input_resolution}, std::move(two));
    Tensor emb = encode_image(w, cfg, both);
    const std::int64_t d = cfg.projection_dim;
    for (std::int64_t i = 0; i < d; ++i)
        CHECK(emb.values()[static_cast<size_t>(i)] == emb.values()[static_cast<size_t>(d + i)]);
}

TEST_CASE("permuting positional embeddings changes the embedding") {
    TowerConfig cfg = toy_vision();
    TowerWeights w = build_tower(cfg, 9);
    Tensor images = random_images(1, cfg.input_resolution, 10);
    Tensor base = encode_image(w, cfg, images);
    auto& pos = w.at("pos_embed").mutable_values();
    const std::int64_t width = cfg.width;
    for (std::int64_t c = 0; c < width; ++c)
        std::swap(pos[static_cast<size_t>(width + c)], pos[static_cast<size_t>(2 * width + c)]);
    Tensor permuted = encode_image(w, cfg, images);
    double max_diff = 0.0;
    for (size_t i = 0; i < base.values().size(); ++i)
        max_diff = std::max(max_diff, std::abs(base.values()[i] - permuted.values()[i]));
    CHECK(max_diff > 1e-9);
}

TEST_CASE("mask errors: dropped class token and resolution mismatch") {
    TowerConfig cfg = toy_vision();
    TowerWeights w = build_tower(cfg, 11);
    Tensor images = random_images(1, cfg.input_resolution, 12);
    std::vector<bool> with_cls(static_cast<size_t>(cfg.n_patches() + 1), true);
    with_cls[0] = false;
    CHECK_THROWS_AS(encode_image(w, cfg, images, &with_cls), ContractError);
    Tensor wrong = random_images(1, cfg.input_resolution * 2, 13);
    CHECK_THROWS_AS(encode_image(w, cfg, wrong), DimensionError);
}

TEST_CASE("identical token rows embed identically; changed padding after eot does not matter") {
    TowerConfig cfg = toy_text();
    TowerWeights w = build_tower(cfg, 14);
    const std::int64_t eot = 2;
    std::vector<std::int64_t> row = {1, 5, 9, eot, 0, 0, 0, 0};
    Tensor emb = encode_text(w, cfg, {row, row}, eot);
    const std::int64_t d = cfg.projection_dim;
    for (std::int64_t i = 0; i < d; ++i)
        CHECK(emb.values()[static_cast<size_t>(i)] == emb.values()[static_cast<size_t>(d + i)]);

    std::vector<std::int64_t> altered = {1, 5, 9, eot, 7, 21, 3, 11};
    Tensor emb2 = encode_text(w, cfg, {altered}, eot);
    for (std::int64_t i = 0; i < d; ++i)
        CHECK(emb2.values()[static_cast<size_t>(i)] == emb.values()[static_cast<size_t>(i)]);
}

TEST_CASE("minimal begin/end sequence embeds to a finite nonzero vector") {
    TowerConfig cfg = toy_text();
    TowerWeights w = build_tower(cfg, 15);
    std::vector<std::int64_t> row = {1, 2, 0, 0, 0, 0, 0, 0};
    Tensor emb = encode_text(w, cfg, {row}, 2);
    double norm = 0.0;
    for (double v : emb.values()) {
        CHECK(std::isfinite(v));
        norm += v * v;
    }
    CHECK(norm > 0.0);
}

TEST_CASE("missing end-of-text raises a contract error") {
    TowerConfig cfg = toy_text();
    TowerWeights w = build_tower(cfg, 16);
    std::vector<std::int64_t> row = {1, 5, 9, 4, 0, 0, 0, 0};
    CHECK_THROWS_AS(encode_text(w, cfg, {row}, 2), ContractError);
}

TEST_CASE("count_parameters equals hand enumeration on a zero-depth text config") {
    TowerConfig cfg;
    cfg.kind = TowerKind::text;
    cfg.layers = 0;
    cfg.width = 8;
    cfg.heads = 2;
    cfg.vocab_size = 100;
    cfg.context_length = 16;
    cfg.projection_dim = 8;
    cfg.norm_kind = NormKind::layer;
    // token embed 100*8, pos 16*8, final norm gamma+beta 8+8, proj 8*8
    const std::int64_t expected = 100 * 8 + 16 * 8 + 8 + 8 + 8 * 8;
    CHECK(count_parameters(cfg) == expected);
}

TEST_CASE("reference text tower lands within 2 percent of 695M parameters") {
    TowerConfig cfg;
    cfg.kind = TowerKind::text;
    cfg.layers = 32;
    cfg.width = 1280;
    cfg.heads = 20;
    cfg.vocab_size = 49408;
    cfg.context_length = 77;
    cfg.projection_dim = 1024;
    cfg.norm_kind = NormKind::layer;
    cfg.qkv_bias = true;
    const double count = static_cast<double>(count_parameters(cfg));
    CHECK(std::abs(count - 695e6) <= 0.02 * 695e6);
}

TEST_CASE("doubling width roughly quadruples block parameters") {
    TowerConfig small = toy_vision();
    TowerConfig big = toy_vision();
    big.width = small.width * 2;
    auto block_params = [](const TowerConfig& cfg) {
        TowerConfig zero = cfg;
        zero.layers = 0;
        return static_cast<double>(count_parameters(cfg) - count_parameters(zero)) /
               static_cast<double>(cfg.layers);
    };
    const double ratio = block_params(big) / block_params(small);
    CHECK(ratio > 3.5);
    CHECK(ratio < 4.5);
}

TEST_CASE("count_parameters matches built towers across random configs") {
    Rng rng(17);
    for (int t = 0; t < 8; ++t) {
        TowerConfig cfg;
        cfg.kind = t % 2 == 0 ? TowerKind::vision : TowerKind::text;
        cfg.heads = 1 + static_cast<std::int64_t>(rng.below(4));
        cfg.width = cfg.heads * (2 + static_cast<std::int64_t>(rng.below(5)));
        cfg.layers = static_cast<std::int64_t>(rng.below(4));
        cfg.norm_kind = rng.below(2) ? NormKind::rms : NormKind::layer;
        cfg.qkv_bias = rng.below(2) != 0;
        cfg.mlp_ratio = 2 + static_cast<std::int64_t>(rng.below(3));
        cfg.projection_dim = 4 + static_cast<std::int64_t>(rng.below(12));
        if (cfg.kind == TowerKind::vision) {
            cfg.patch_size = 2 + static_cast<std::int64_t>(rng.below(3));
            cfg.input_resolution = cfg.patch_size * (2 + static_cast<std::int64_t>(rng.below(3)));
        } else {
            cfg.vocab_size = 16 + static_cast<std::int64_t>(rng.below(64));
            cfg.context_length = 4 + static_cast<std::int64_t>(rng.below(12));
        }
        TowerWeights w = build_tower(cfg, 1000 + static_cast<std::uint64_t>(t));
        std::int64_t total = 0;
        for (const auto& [name, tensor] : w) total += tensor.size();
        CHECK(total == count_parameters(cfg));
    }
}

TEST_CASE("gflops: zero-depth config counts only patch embedding and projection") {
    TowerConfig cfg = toy_vision();
    cfg.layers = 0;
    const double macs = static_cast<double>(cfg.n_patches()) *
                            static_cast<double>(cfg.patch_dim()) * cfg.width +
                        static_cast<double>(cfg.width) * cfg.projection_dim;
    CHECK(forward_gflops(cfg) == doctest::Approx(2.0 * macs / 1e9).epsilon(1e-12));
}

TEST_CASE("gflops: doubling sequence length more than doubles flops") {
    TowerConfig cfg = toy_text();
    TowerConfig longer = cfg;
    longer.context_length = cfg.context_length * 2;
    CHECK(forward_gflops(longer) > 2.0 * forward_gflops(cfg));
}

TEST_CASE("gflops matches the instrumented kernel counter within 5 percent") {
    TowerConfig cfg = toy_vision();
    TowerWeights w = build_tower(cfg, 18);
    Tensor images = random_images(1, cfg.input_resolution, 19);
    mac_counter_reset();
    mac_counter_enable(true);
    (void)encode_image(w, cfg, images);
    mac_counter_enable(false);
    const double measured = 2.0 * static_cast<double>(mac_counter_value()) / 1e9;
    const double analytic = forward_gflops(cfg);
    CHECK(std::abs(measured / analytic - 1.0) < 0.05);

    TowerConfig tcfg = toy_text();
    TowerWeights tw = build_tower(tcfg, 20);
    std::vector<std::int64_t> row = {1, 4, 7, 2, 0, 0, 0, 0};
    mac_counter_reset();
    mac_counter_enable(true);
    (void)encode_text(tw, tcfg, {row}, 2);
    mac_counter_enable(false);
    const double tmeasured = 2.0 * static_cast<double>(mac_counter_value()) / 1e9;
    CHECK(std::abs(tmeasured / forward_gflops(tcfg) - 1.0) < 0.05);
}

TEST_CASE("vision forward gradients match finite differences (subsampled)") {
    TowerConfig cfg = toy_vision();
    cfg.layers = 1;
    TowerWeights weights = build_tower(cfg, 21);
    Tensor images = random_images(2, cfg.input_resolution, 22);

    std::vector<std::string> names;
    std::vector<Tensor> leaves;
    for (const auto& [name, t] : weights) {
        names.push_back(name);
        leaves.push_back(t);
    }
    auto res = oracles::check_gradients(
        leaves,
        [&](Tape&, const std::vector<Tensor>& w) {
            TowerWeights bound;
            for (size_t i = 0; i < names.size(); ++i) bound.emplace(names[i], w[i]);
            Tensor e = encode_image(bound, cfg, images);
            return sum(mul(e, e));
        },
        1e-5, 3);
    CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("text forward gradients match finite differences (subsampled)") {
    TowerConfig cfg = toy_text();
    cfg.layers = 1;
    TowerWeights weights = build_tower(cfg, 23);
    std::vector<std::vector<std::int64_t>> rows = {{1, 5, 9, 2, 0, 0, 0, 0},
                                                   {1, 7, 2, 0, 0, 0, 0, 0}};
    std::vector<std::string> names;
    std::vector<Tensor> leaves;
    for (const auto& [name, t] : weights) {
        names.push_back(name);
        leaves.push_back(t);
    }
    auto res = oracles::check_gradients(
        leaves,
        [&](Tape&, const std::vector<Tensor>& w) {
            TowerWeights bound;
            for (size_t i = 0; i < names.size(); ++i) bound.emplace(names[i], w[i]);
            Tensor e = encode_text(bound, cfg, rows, 2);
            return sum(mul(e, e));
        },
        1e-5, 3);
    CHECK(res.max_rel_err < 1e-4);
}
