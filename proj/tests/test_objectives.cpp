#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "oracles.hpp"
#include "wsclip/errors.hpp"
#include "wsclip/objectives.hpp"

using namespace wsclip;

TEST_CASE("contrastive loss is exactly zero for a single pair") {
    Tensor img({1, 3}, {0.2, -1.4, 0.7});
    Tensor txt({1, 3}, {5.0, 0.1, -0.3});
    for (double tau : {0.01, 0.5, 1.0, 7.0}) {
        auto res = contrastive_loss({img, txt, tau});
        CHECK(res.loss.item() == 0.0);
    }
}

TEST_CASE("contrastive loss on orthonormal pairs equals ln(1+exp(-1))") {
    Tensor img({2, 2}, {1, 0, 0, 1});
    Tensor txt({2, 2}, {1, 0, 0, 1});
    auto res = contrastive_loss({img, txt, 1.0});
    CHECK(res.loss.item() ==
          doctest::Approx(std::log(1.0 + std::exp(-1.0))).epsilon(1e-12));
    CHECK(res.logits.shape() == Shape{2, 2});
    CHECK(res.logits.values()[0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(res.logits.values()[1] == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("contrastive loss is invariant under a shared row permutation") {
    Rng rng(31);
    const std::int64_t b = 5, d = 4;
    auto img = oracles::random_tensor({b, d}, rng);
    auto txt = oracles::random_tensor({b, d}, rng);
    const double base = contrastive_loss({img, txt, 0.07}).loss.item();
    std::vector<std::int64_t> perm = {3, 0, 4, 1, 2};
    std::vector<double> pi(static_cast<size_t>(b * d)), pt(static_cast<size_t>(b * d));
    for (std::int64_t r = 0; r < b; ++r)
        for (std::int64_t c = 0; c < d; ++c) {
            pi[static_cast<size_t>(r * d + c)] =
                img.values()[static_cast<size_t>(perm[static_cast<size_t>(r)] * d + c)];
            pt[static_cast<size_t>(r * d + c)] =
                txt.values()[static_cast<size_t>(perm[static_cast<size_t>(r)] * d + c)];
        }
    const double permuted =
        contrastive_loss({Tensor({b, d}, pi), Tensor({b, d}, pt), 0.07}).loss.item();
    CHECK(permuted == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("contrastive loss ignores positive rescaling of embedding rows") {
    Rng rng(32);
    auto img = oracles::random_tensor({4, 6}, rng);
    auto txt = oracles::random_tensor({4, 6}, rng);
    const double base = contrastive_loss({img, txt, 0.01}).loss.item();
    CHECK(base >= 0.0);
    auto scaled = img;
    for (std::int64_t r = 0; r < 4; ++r) {
        const double c = 0.5 + static_cast<double>(r) * 3.0 + 0.25;
        for (std::int64_t j = 0; j < 6; ++j)
            scaled.mutable_values()[static_cast<size_t>(r * 6 + j)] *= c;
    }
    const double after = contrastive_loss({scaled, txt, 0.01}).loss.item();
    CHECK(std::abs(after - base) < 1e-9);
}

TEST_CASE("contrastive loss gradients match finite differences") {
    Rng rng(33);
    auto img = oracles::random_tensor({3, 5}, rng);
    auto txt = oracles::random_tensor({3, 5}, rng);
    auto res = oracles::check_gradients({img, txt}, [](Tape&, const std::vector<Tensor>& w) {
        return contrastive_loss({w[0], w[1], 0.5}).loss;
    });
    CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("contrastive loss rejects bad temperature and zero rows") {
    Tensor img({2, 2}, {1, 0, 0, 1});
    CHECK_THROWS_AS(contrastive_loss({img, img, 0.0}), ConfigError);
    CHECK_THROWS_AS(contrastive_loss({img, img, -1.0}), ConfigError);
    Tensor zero({2, 2}, {1, 0, 0, 0});
    CHECK_THROWS_AS(contrastive_loss({zero, img, 1.0}), NumericError);
}

TEST_CASE("distillation loss vanishes when student matches teacher on masked tokens") {
    Rng rng(34);
    auto teacher = oracles::random_tensor({2, 4, 3}, rng);
    PatchMask mask;
    mask.keep = {true, false, true, false};
    Tensor student = teacher;
    // corrupt the kept (unmasked) positions; they must not contribute
    for (std::int64_t b = 0; b < 2; ++b)
        for (std::int64_t c = 0; c < 3; ++c) {
            student.mutable_values()[static_cast<size_t>((b * 4 + 0) * 3 + c)] += 9.0;
            student.mutable_values()[static_cast<size_t>((b * 4 + 2) * 3 + c)] -= 3.0;
        }
    CHECK(distillation_loss(student, teacher, mask).item() ==
          doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("distillation loss is one for orthogonal features") {
    Tensor student({1, 2, 2}, {1, 0, 1, 0});
    Tensor teacher({1, 2, 2}, {0, 1, 0, 1});
    PatchMask mask;
    mask.keep = {false, false};
    CHECK(distillation_loss(student, teacher, mask).item() ==
          doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("distillation loss equals a per-token scalar recomputation") {
    Rng rng(35);
    auto student = oracles::random_tensor({2, 4, 3}, rng);
    auto teacher = oracles::random_tensor({2, 4, 3}, rng);
    PatchMask mask;
    mask.keep = {false, true, false, false};
    const double got = distillation_loss(student, teacher, mask).item();

    double acc = 0.0;
    int count = 0;
    for (std::int64_t b = 0; b < 2; ++b)
        for (std::int64_t p = 0; p < 4; ++p) {
            if (mask.keep[static_cast<size_t>(p)]) continue;
            double dot = 0.0, ns = 0.0, nt = 0.0;
            for (std::int64_t c = 0; c < 3; ++c) {
                const double s = student.values()[static_cast<size_t>((b * 4 + p) * 3 + c)];
                const double t = teacher.values()[static_cast<size_t>((b * 4 + p) * 3 + c)];
                dot += s * t;
                ns += s * s;
                nt += t * t;
            }
            acc += 1.0 - dot / (std::sqrt(ns) * std::sqrt(nt));
            ++count;
        }
    CHECK(got == doctest::Approx(acc / count).epsilon(1e-12));
    CHECK(got >= 0.0);
    CHECK(got <= 2.0);
}

TEST_CASE("distillation loss is invariant to per-token positive rescaling of the student") {
    Rng rng(36);
    auto student = oracles::random_tensor({1, 3, 4}, rng);
    auto teacher = oracles::random_tensor({1, 3, 4}, rng);
    PatchMask mask;
    mask.keep = {false, false, false};
    const double base = distillation_loss(student, teacher, mask).item();
    auto scaled = student;
    const double factors[3] = {0.3, 8.0, 2.5};
    for (std::int64_t p = 0; p < 3; ++p)
        for (std::int64_t c = 0; c < 4; ++c)
            scaled.mutable_values()[static_cast<size_t>(p * 4 + c)] *= factors[p];
    CHECK(distillation_loss(scaled, teacher, mask).item() ==
          doctest::Approx(base).epsilon(1e-10));
}

TEST_CASE("teacher receives zero gradient from distillation") {
    Rng rng(37);
    auto student = oracles::random_tensor({1, 3, 4}, rng);
    auto teacher = oracles::random_tensor({1, 3, 4}, rng);
    PatchMask mask;
    mask.keep = {false, true, false};
    Tape tape;
    Tensor s = tape.watch(student);
    Tensor t = tape.watch(teacher);
    Tensor loss = distillation_loss(s, t, mask);
    tape.backward(loss);
    const Tensor gt = tape.grad(t);
    for (double v : gt.values()) CHECK(v == 0.0);
    const Tensor gs = tape.grad(s);
    double norm = 0.0;
    for (double v : gs.values()) norm += v * v;
    CHECK(norm > 0.0);
}

TEST_CASE("distillation loss gradient matches finite differences") {
    Rng rng(38);
    auto student = oracles::random_tensor({2, 4, 3}, rng);
    auto teacher = oracles::random_tensor({2, 4, 3}, rng);
    PatchMask mask;
    mask.keep = {false, true, false, true};
    auto res = oracles::check_gradients({student}, [&](Tape&, const std::vector<Tensor>& w) {
        return distillation_loss(w[0], teacher, mask);
    });
    CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("distillation loss rejects an empty mask selection") {
    Tensor x({1, 2, 2}, {1, 0, 0, 1});
    PatchMask mask;
    mask.keep = {true, true};
    CHECK_THROWS_AS(distillation_loss(x, x, mask), ContractError);
}

TEST_CASE("patch mask: ratio zero keeps everything") {
    PatchMask mask = sample_patch_mask(16, 0.0, 1);
    CHECK(mask.kept_count() == 16);
}

TEST_CASE("patch mask: half of 256 patches dropped exactly") {
    PatchMask mask = sample_patch_mask(256, 0.5, 42);
    CHECK(mask.kept_count() == 128);
    CHECK(mask.dropped_indices().size() == 128);
}

TEST_CASE("patch mask is deterministic per seed and varies across seeds") {
    PatchMask a = sample_patch_mask(64, 0.4, 7);
    PatchMask b = sample_patch_mask(64, 0.4, 7);
    CHECK(a.keep == b.keep);
    PatchMask c = sample_patch_mask(64, 0.4, 8);
    CHECK(a.keep != c.keep);
    CHECK(a.kept_count() == 64 - 26);  // round(0.4 * 64) = 26
}

TEST_CASE("patch mask rejects ratios outside [0,1)") {
    CHECK_THROWS_AS(sample_patch_mask(16, 1.0, 1), ConfigError);
    CHECK_THROWS_AS(sample_patch_mask(16, -0.1, 1), ConfigError);
}
