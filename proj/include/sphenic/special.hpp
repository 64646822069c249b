#pragma once

#include <cmath>

#include "error.hpp"

namespace sphenic {

// Lanczos approximation (g = 7, 9 terms), reflection below 1/2.
inline double log_gamma(double x) {
    if (!(x > 0.0)) throw DomainError("log_gamma: argument must be positive");
    static const double coeff[9] = {
        0.99999999999980993,
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    };
    const double pi = 3.1415926535897932384626433832795;
    if (x < 0.5) {
        // log Gamma(x) = log(pi / sin(pi x)) - log Gamma(1 - x)
        return std::log(pi / std::sin(pi * x)) - log_gamma(1.0 - x);
    }
    const double z = x - 1.0;
    double a = coeff[0];
    for (int i = 1; i < 9; ++i) a += coeff[i] / (z + i);
    const double t = z + 7.5;
    return 0.91893853320467274178032973640562 // log sqrt(2 pi)
           + (z + 0.5) * std::log(t) - t + std::log(a);
}

// Derivative of log_gamma; recurrence up to x >= 6 then the asymptotic series.
inline double digamma(double x) {
    if (!(x > 0.0)) throw DomainError("digamma: argument must be positive");
    double s = 0.0;
    while (x < 6.0) {
        s -= 1.0 / x;
        x += 1.0;
    }
    const double inv = 1.0 / x;
    const double inv2 = inv * inv;
    s += std::log(x) - 0.5 * inv;
    s -= inv2 * (1.0 / 12.0 - inv2 * (1.0 / 120.0 - inv2 * (1.0 / 252.0 - inv2 * (1.0 / 240.0 - inv2 * (1.0 / 132.0)))));
    return s;
}

inline double norm_cdf(double z) {
    return 0.5 * std::erfc(-z * 0.70710678118654752440084436210485);
}

inline double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

} // namespace sphenic
