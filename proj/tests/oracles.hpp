#pragma once

// Test-side oracles, independent of the library's differentiation and
// ranking paths: central finite differences, naive matrix products and an
// exhaustive retrieval ranker.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "wsclip/rng.hpp"
#include "wsclip/tensor.hpp"

namespace oracles {

// Builds a fresh tape around the given leaves and returns the scalar loss.
using LossBuilder =
    std::function<wsclip::Tensor(wsclip::Tape&, const std::vector<wsclip::Tensor>&)>;

struct GradCheckResult {
    double max_rel_err = 0.0;
    std::int64_t checked = 0;
};

inline double loss_value(std::vector<wsclip::Tensor>& leaves, const LossBuilder& build) {
    wsclip::Tape tape;
    std::vector<wsclip::Tensor> watched;
    watched.reserve(leaves.size());
    for (auto& l : leaves) watched.push_back(tape.watch(l));
    return build(tape, watched).item();
}

// Central finite differences, step h, against tape gradients. When
// max_coords > 0, a deterministic subsample of coordinates per leaf is
// checked instead of all of them.
inline GradCheckResult check_gradients(std::vector<wsclip::Tensor> leaves,
                                       const LossBuilder& build, double h = 1e-5,
                                       int max_coords = 0, std::uint64_t seed = 7) {
    wsclip::Tape tape;
    std::vector<wsclip::Tensor> watched;
    for (auto& l : leaves) watched.push_back(tape.watch(l));
    wsclip::Tensor loss = build(tape, watched);
    tape.backward(loss);
    std::vector<wsclip::Tensor> grads;
    for (auto& w : watched) grads.push_back(tape.grad(w));

    wsclip::Rng rng(seed);
    GradCheckResult result;
    for (size_t li = 0; li < leaves.size(); ++li) {
        const std::int64_t n = leaves[li].size();
        std::vector<std::int64_t> coords;
        if (max_coords <= 0 || n <= max_coords) {
            coords.resize(static_cast<size_t>(n));
            for (std::int64_t i = 0; i < n; ++i) coords[static_cast<size_t>(i)] = i;
        } else {
            std::vector<std::int64_t> all(static_cast<size_t>(n));
            for (std::int64_t i = 0; i < n; ++i) all[static_cast<size_t>(i)] = i;
            for (int c = 0; c < max_coords; ++c) {
                const auto j = c + static_cast<std::int64_t>(rng.below(
                                       static_cast<std::uint64_t>(n - c)));
                std::swap(all[static_cast<size_t>(c)], all[static_cast<size_t>(j)]);
                coords.push_back(all[static_cast<size_t>(c)]);
            }
        }
        for (auto c : coords) {
            auto& vals = leaves[li].mutable_values();
            const double keep = vals[static_cast<size_t>(c)];
            vals[static_cast<size_t>(c)] = keep + h;
            const double up = loss_value(leaves, build);
            vals[static_cast<size_t>(c)] = keep - h;
            const double down = loss_value(leaves, build);
            vals[static_cast<size_t>(c)] = keep;
            const double fd = (up - down) / (2.0 * h);
            const double g = grads[li].values()[static_cast<size_t>(c)];
            const double rel = std::abs(g - fd) / std::max({1.0, std::abs(g), std::abs(fd)});
            result.max_rel_err = std::max(result.max_rel_err, rel);
            ++result.checked;
        }
    }
    return result;
}

// Naive O(mnk) reference product, C = A * B, row-major.
inline std::vector<double> naive_matmul(const std::vector<double>& a,
                                        const std::vector<double>& b, std::int64_t m,
                                        std::int64_t k, std::int64_t n) {
    std::vector<double> c(static_cast<size_t>(m * n), 0.0);
    for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::int64_t p = 0; p < k; ++p) acc += a[static_cast<size_t>(i * k + p)] *
                                                        b[static_cast<size_t>(p * n + j)];
            c[static_cast<size_t>(i * n + j)] = acc;
        }
    return c;
}

inline wsclip::Tensor random_tensor(wsclip::Shape shape, wsclip::Rng& rng, double scale = 1.0) {
    std::vector<double> v(static_cast<size_t>(wsclip::numel(shape)));
    for (auto& x : v) x = rng.normal() * scale;
    return wsclip::Tensor(std::move(shape), std::move(v));
}

}  // namespace oracles
