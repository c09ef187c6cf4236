#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "oracles.hpp"
#include "wsclip/errors.hpp"
#include "wsclip/models.hpp"
#include "wsclip/optim.hpp"

using namespace wsclip;

namespace {

// Independent transcription of the update equations, element by element.
void reference_lamb(std::vector<double>& p, const std::vector<double>& g,
                    std::vector<double>& m, std::vector<double>& v, std::int64_t t,
                    const LambHyper& h, double lr) {
    std::vector<double> r(p.size());
    for (size_t i = 0; i < p.size(); ++i) {
        m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g[i];
        v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g[i] * g[i];
    }
    double pn = 0.0, rn = 0.0;
    for (size_t i = 0; i < p.size(); ++i) {
        const double mh = m[i] / (1.0 - std::pow(h.beta1, static_cast<double>(t)));
        const double vh = v[i] / (1.0 - std::pow(h.beta2, static_cast<double>(t)));
        r[i] = mh / (std::sqrt(vh) + h.epsilon) + h.weight_decay * p[i];
        pn += p[i] * p[i];
        rn += r[i] * r[i];
    }
    const double trust = (pn > 0.0 && rn > 0.0) ? std::sqrt(pn) / std::sqrt(rn) : 1.0;
    for (size_t i = 0; i < p.size(); ++i) p[i] -= lr * trust * r[i];
}

}  // namespace

TEST_CASE("lamb: zero gradient on a fresh state leaves parameters unchanged") {
    std::map<std::string, Tensor> params;
    params.emplace("w", Tensor({3}, {1.0, -2.0, 3.0}));
    std::map<std::string, Tensor> grads;
    grads.emplace("w", Tensor({3}));
    LambState state;
    lamb_step(params, grads, state, LambHyper{}, 0.1);
    CHECK(params.at("w").values() == std::vector<double>{1.0, -2.0, 3.0});
    CHECK(state.step == 1);
}

TEST_CASE("lamb scalar example agrees with the hand transcription") {
    std::vector<double> p = {2.0}, g = {1.0}, m = {0.0}, v = {0.0};
    lamb_update_tensor(p, g, m, v, 1, LambHyper{}, 0.1);
    std::vector<double> pr = {2.0}, mr = {0.0}, vr = {0.0};
    reference_lamb(pr, g, mr, vr, 1, LambHyper{}, 0.1);
    CHECK(std::abs(p[0] - pr[0]) < 1e-12);
    // closed form: m_hat = v_hat = 1, trust = |p| * (1+eps), update = -lr * |p|
    CHECK(p[0] == doctest::Approx(1.8).epsilon(1e-9));
}

TEST_CASE("lamb matches the reference transcription on randomized instances") {
    Rng rng(41);
    LambHyper h;
    for (int inst = 0; inst < 20; ++inst) {
        const size_t n = 1 + rng.below(6);
        std::vector<double> p(n), g(n), m(n, 0.0), v(n, 0.0);
        for (auto& x : p) x = rng.normal();
        std::vector<double> pr = p, mr = m, vr = v;
        for (std::int64_t t = 1; t <= 3; ++t) {
            for (auto& x : g) x = rng.normal();
            lamb_update_tensor(p, g, m, v, t, h, 0.05);
            reference_lamb(pr, g, mr, vr, t, h, 0.05);
            for (size_t i = 0; i < n; ++i) {
                CHECK(std::abs(p[i] - pr[i]) <= 1e-12);
                CHECK(std::abs(m[i] - mr[i]) <= 1e-12);
                CHECK(std::abs(v[i] - vr[i]) <= 1e-12);
            }
        }
    }
}

TEST_CASE("lamb with lr=0 is the identity") {
    Rng rng(42);
    std::map<std::string, Tensor> params;
    params.emplace("w", oracles::random_tensor({4}, rng));
    const std::vector<double> before = params.at("w").values();
    std::map<std::string, Tensor> grads;
    grads.emplace("w", oracles::random_tensor({4}, rng));
    LambState state;
    lamb_step(params, grads, state, LambHyper{}, 0.0);
    CHECK(params.at("w").values() == before);
}

TEST_CASE("trust ratio is scale invariant when the raw update scales with p") {
    // g = 0, wd = 1: r = p, so both norms scale together and trust stays 1.
    LambHyper h;
    h.weight_decay = 1.0;
    for (double c : {1.0, 10.0, 0.01}) {
        std::vector<double> p = {2.0 * c, -1.0 * c}, g = {0.0, 0.0}, m = {0, 0}, v = {0, 0};
        const std::vector<double> before = p;
        lamb_update_tensor(p, g, m, v, 1, h, 0.5);
        for (size_t i = 0; i < p.size(); ++i)
            CHECK(p[i] == doctest::Approx(before[i] * 0.5).epsilon(1e-12));
    }
}

TEST_CASE("nan gradients raise a numeric error and leave state untouched") {
    std::map<std::string, Tensor> params;
    params.emplace("w", Tensor({2}, {1.0, 2.0}));
    std::map<std::string, Tensor> grads;
    grads.emplace("w", Tensor({2}, {0.5, std::nan("")}));
    LambState state;
    CHECK_THROWS_AS(lamb_step(params, grads, state, LambHyper{}, 0.1), NumericError);
    CHECK(state.step == 0);
    CHECK(state.slots.empty());
    CHECK(params.at("w").values() == std::vector<double>{1.0, 2.0});
}

TEST_CASE("cosine schedule endpoints and midpoint") {
    ScheduleSpec spec;
    spec.peak_lr = 3.0;
    spec.warmup_steps = 200;
    spec.total_steps = 1200;
    CHECK(cosine_lr(0, spec) == 0.0);
    CHECK(cosine_lr(200, spec) == 3.0);
    CHECK(cosine_lr(1200, spec) == doctest::Approx(0.0).epsilon(1e-15));
    CHECK(cosine_lr(700, spec) == doctest::Approx(1.5).epsilon(1e-12));
    bool clamped = false;
    CHECK(cosine_lr(1300, spec, &clamped) == 0.0);
    CHECK(clamped);
}

TEST_CASE("cosine schedule is continuous at the warmup boundary") {
    ScheduleSpec spec;
    spec.peak_lr = 1.0;
    spec.warmup_steps = 100;
    spec.total_steps = 1000;
    const double just_before = cosine_lr(99, spec);
    const double at = cosine_lr(100, spec);
    CHECK(at == 1.0);
    CHECK(std::abs(at - just_before) <= 1.0 / 100.0 + 1e-12);
    ScheduleSpec bad;
    bad.peak_lr = 1.0;
    bad.warmup_steps = 10;
    bad.total_steps = 10;
    CHECK_THROWS_AS(cosine_lr(0, bad), ConfigError);
}

TEST_CASE("layer decay scale") {
    CHECK(layer_decay_scale(4, 4, 0.9) == 1.0);
    CHECK(layer_decay_scale(2, 4, 0.9) == doctest::Approx(0.81).epsilon(1e-12));
    for (std::int64_t i = 0; i <= 4; ++i) CHECK(layer_decay_scale(i, 4, 1.0) == 1.0);
    CHECK_THROWS_AS(layer_decay_scale(1, 4, 0.0), ConfigError);
    CHECK_THROWS_AS(layer_decay_scale(1, 4, 1.5), ConfigError);
    // monotone non-decreasing in layer index
    double prev = 0.0;
    for (std::int64_t i = 0; i <= 6; ++i) {
        const double s = layer_decay_scale(i, 6, 0.75);
        CHECK(s >= prev);
        prev = s;
    }
}

TEST_CASE("param groups partition both towers exhaustively") {
    TowerConfig vcfg;
    vcfg.kind = TowerKind::vision;
    vcfg.layers = 2;
    vcfg.width = 16;
    vcfg.heads = 4;
    vcfg.norm_kind = NormKind::rms;
    vcfg.patch_size = 4;
    vcfg.input_resolution = 16;
    vcfg.projection_dim = 8;
    TowerConfig tcfg;
    tcfg.kind = TowerKind::text;
    tcfg.layers = 2;
    tcfg.width = 16;
    tcfg.heads = 4;
    tcfg.vocab_size = 32;
    tcfg.context_length = 8;
    tcfg.projection_dim = 8;

    TowerWeights vision = build_tower(vcfg, 1);
    TowerWeights text = build_tower(tcfg, 2);
    OptimConfig cfg;
    auto groups = build_param_groups(vision, text, cfg);

    // (layers + 2) groups per tower
    int vision_groups = 0, text_groups = 0;
    for (const auto& g : groups) {
        if (g.tower == "vision") ++vision_groups;
        if (g.tower == "text") ++text_groups;
    }
    CHECK(vision_groups == 4);
    CHECK(text_groups == 4);

    std::set<std::string> seen;
    size_t total = 0;
    for (const auto& g : groups)
        for (const auto& n : g.names) {
            seen.insert(g.tower + "/" + n);
            ++total;
        }
    CHECK(total == vision.size() + text.size());
    CHECK(seen.size() == total);

    for (const auto& g : groups) {
        if (g.tower == "vision") {
            CHECK(g.base_peak_lr == 4e-4);
            CHECK(g.decay_rate == 0.9);
        } else {
            CHECK(g.base_peak_lr == 4e-5);
            CHECK(g.decay_rate == 0.75);
        }
    }

    // head groups are undecayed; embedding groups shrink the most
    for (const auto& g : groups) {
        if (g.layer_index == g.top_index) CHECK(g.lr_scale() == 1.0);
        if (g.layer_index == 0)
            CHECK(g.lr_scale() ==
                  doctest::Approx(std::pow(g.decay_rate, static_cast<double>(g.top_index))));
    }
}

TEST_CASE("orphan parameters are named in the partition error") {
    TowerConfig tcfg;
    tcfg.kind = TowerKind::text;
    tcfg.layers = 1;
    tcfg.width = 8;
    tcfg.heads = 2;
    tcfg.vocab_size = 16;
    tcfg.context_length = 4;
    tcfg.projection_dim = 8;
    TowerWeights text = build_tower(tcfg, 3);
    text.emplace("stray.weight", Tensor({2}, {1.0, 2.0}));
    try {
        build_tower_groups(text, 0.75, 4e-5, "text");
        FAIL("expected ContractError");
    } catch (const ContractError& e) {
        CHECK(std::string(e.what()).find("stray.weight") != std::string::npos);
    }
}
