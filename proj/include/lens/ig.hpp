#pragma once

// Integrated Gradients for g̃(x_1..x_m) = g(x_1 + ... + x_m) with a zero baseline.
//
// Along the straight path α·x' the gradient of g̃ w.r.t. every x_i is g'(α S), so
// IG_i = x'_i ∫ g'(α S) dα = x'_i (g(S) - g(0)) / S = x'_i g(S) / S.
// Allocations are therefore proportional to the parts with one scalar ratio per call.

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

#include "lens/activation.hpp"
#include "lens/config.hpp"

namespace lens {

/// |S| at or below this uses the S -> 0 limit g'(0).
inline constexpr double kIgZeroSum = 1e-12;

/// The common factor IG_i / x'_i for a given sum S.
inline double ig_ratio(double sum, const Activation& g) noexcept {
    if (std::abs(sum) <= kIgZeroSum) return g.slope_at_zero();
    return g.value(sum) / sum;
}

inline std::vector<double> ig_allocate(std::span<const double> parts, const Activation& g) {
    double sum = 0.0;
    for (double p : parts) sum += p;
    const double r = ig_ratio(sum, g);
    std::vector<double> out(parts.size());
    for (std::size_t i = 0; i < parts.size(); ++i) out[i] = parts[i] * r;
    return out;
}

/// Midpoint-rule evaluation of the IG path integral; verification oracle for ig_allocate.
inline std::vector<double> ig_allocate_quadrature(std::span<const double> parts,
                                                  const Activation& g, std::size_t steps) {
    if (steps == 0) throw std::invalid_argument("ig_allocate_quadrature: steps must be >= 1");
    double sum = 0.0;
    for (double p : parts) sum += p;
    double mean_grad = 0.0;
    for (std::size_t k = 1; k <= steps; ++k) {
        const double alpha = (static_cast<double>(k) - 0.5) / static_cast<double>(steps);
        mean_grad += g.derivative(alpha * sum);
    }
    mean_grad /= static_cast<double>(steps);
    std::vector<double> out(parts.size());
    for (std::size_t i = 0; i < parts.size(); ++i) out[i] = parts[i] * mean_grad;
    return out;
}

/// Per-dimension IG over m part vectors (rows of `parts`, each of width d').
/// Row j of the result is h_j; column sums reconstruct g(Σ parts) element-wise.
inline Matrix ig_allocate_broadcast(const Matrix& parts, const Activation& g) {
    const Vector sums = parts.colwise().sum();
    Vector ratio(sums.size());
    for (Eigen::Index k = 0; k < sums.size(); ++k) ratio[k] = ig_ratio(sums[k], g);
    return parts.array().rowwise() * ratio.array();
}

inline std::vector<std::vector<double>>
ig_allocate_broadcast(const std::vector<std::vector<double>>& parts, const Activation& g) {
    if (parts.empty()) return {};
    const std::size_t width = parts.front().size();
    Matrix m(parts.size(), width);
    for (std::size_t j = 0; j < parts.size(); ++j) {
        if (parts[j].size() != width)
            throw std::invalid_argument("ig_allocate_broadcast: ragged part vectors (row " +
                                        std::to_string(j) + ")");
        for (std::size_t k = 0; k < width; ++k) m(j, k) = parts[j][k];
    }
    const Matrix h = ig_allocate_broadcast(m, g);
    std::vector<std::vector<double>> out(parts.size(), std::vector<double>(width));
    for (std::size_t j = 0; j < parts.size(); ++j)
        for (std::size_t k = 0; k < width; ++k) out[j][k] = h(j, k);
    return out;
}

} // namespace lens
