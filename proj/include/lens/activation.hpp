#pragma once

#include <cmath>
#include <numbers>

#include "lens/config.hpp"

namespace lens {

/// Element-wise FF activation with its derivative. Every kind satisfies g(0) = 0.
class Activation {
    static constexpr double kInvSqrt2 = 0.70710678118654752440;

public:
    constexpr explicit Activation(ActivationKind kind) noexcept : kind_(kind) {}

    constexpr ActivationKind kind() const noexcept { return kind_; }

    double value(double x) const noexcept {
        switch (kind_) {
        case ActivationKind::GeluErf:
            return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2));
        case ActivationKind::GeluTanh:
            return 0.5 * x * (1.0 + std::tanh(kTanhScale * (x + kTanhCubic * x * x * x)));
        case ActivationKind::Relu:
            return x > 0.0 ? x : 0.0;
        case ActivationKind::Silu:
            return x * sigmoid(x);
        case ActivationKind::Identity:
            return x;
        }
        return x;
    }

    double derivative(double x) const noexcept {
        switch (kind_) {
        case ActivationKind::GeluErf: {
            const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
            const double pdf = std::exp(-0.5 * x * x) * std::numbers::inv_sqrtpi *
                               kInvSqrt2;
            return cdf + x * pdf;
        }
        case ActivationKind::GeluTanh: {
            const double u = kTanhScale * (x + kTanhCubic * x * x * x);
            const double t = std::tanh(u);
            const double du = kTanhScale * (1.0 + 3.0 * kTanhCubic * x * x);
            return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
        }
        case ActivationKind::Relu:
            // Subgradient at 0 is taken as the midpoint of [0, 1].
            return x > 0.0 ? 1.0 : (x < 0.0 ? 0.0 : 0.5);
        case ActivationKind::Silu: {
            const double s = sigmoid(x);
            return s * (1.0 + x * (1.0 - s));
        }
        case ActivationKind::Identity:
            return 1.0;
        }
        return 1.0;
    }

    double slope_at_zero() const noexcept { return derivative(0.0); }

private:
    static double sigmoid(double x) noexcept {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
    }

    // sqrt(2/pi)
    static constexpr double kTanhScale = 0.7978845608028654;
    static constexpr double kTanhCubic = 0.044715;

    ActivationKind kind_;
};

} // namespace lens
