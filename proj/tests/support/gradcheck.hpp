#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "rsed/autodiff.hpp"

namespace rsed::testing {

/// Central finite differences vs analytic gradient for a scalar-valued
/// function of one leaf tensor. Returns the max relative error over checked
/// coordinates (all when max_coords <= 0, otherwise a seeded sample).
inline double gradcheck(rsed::ad::Tensor& leaf,
                        const std::function<rsed::ad::Tensor()>& fn, double h = 1e-5,
                        int max_coords = -1, std::uint64_t seed = 0) {
    using rsed::ad::Tensor;
    Tensor out = fn();
    leaf.zero_grad();
    out.backward();
    const std::vector<double> analytic = leaf.grad();

    std::vector<std::size_t> coords;
    if (max_coords <= 0 || static_cast<std::size_t>(max_coords) >= leaf.numel()) {
        for (std::size_t i = 0; i < leaf.numel(); ++i) coords.push_back(i);
    } else {
        std::mt19937_64 rng(seed);
        std::uniform_int_distribution<std::size_t> dist(0, leaf.numel() - 1);
        for (int i = 0; i < max_coords; ++i) coords.push_back(dist(rng));
    }

    double worst = 0.0;
    for (std::size_t i : coords) {
        const double orig = leaf.data()[i];
        leaf.data()[i] = orig + h;
        const double up = fn().item();
        leaf.data()[i] = orig - h;
        const double down = fn().item();
        leaf.data()[i] = orig;
        const double numeric = (up - down) / (2.0 * h);
        // absolute floor keeps roundoff on near-zero gradients from dominating
        const double denom = std::max({std::abs(numeric), std::abs(analytic[i]), 1e-3});
        worst = std::max(worst, std::abs(numeric - analytic[i]) / denom);
    }
    return worst;
}

inline std::vector<double> random_vector(std::size_t n, std::mt19937_64& rng,
                                         double scale = 1.0) {
    std::normal_distribution<double> dist(0.0, scale);
    std::vector<double> v(n);
    for (double& x : v) x = dist(rng);
    return v;
}

} // namespace rsed::testing
