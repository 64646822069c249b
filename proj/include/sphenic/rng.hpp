#pragma once

#include <cmath>
#include <cstdint>

#include "error.hpp"

namespace sphenic {

// Small value-type generator (splitmix64 core) so sessions can copy and fork
// independent streams deterministically. Sampling routines are written out in
// full instead of using <random> distributions, which are not pinned across
// standard library implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Derive an independent stream keyed by id; the parent stream is untouched.
    Rng fork(std::uint64_t id) const {
        std::uint64_t z = state_ ^ (0x9e3779b97f4a7c15ULL * (id + 0x632be59bd9b4e019ULL));
        z = (z ^ (z >> 29)) * 0xff51afd7ed558ccdULL;
        return Rng(z ^ (z >> 32));
    }

    // Uniform on [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n).
    std::uint64_t uniform_int(std::uint64_t n) {
        if (n == 0) throw DomainError("uniform_int: n must be positive");
        return next_u64() % n;
    }

    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do { u1 = uniform(); } while (u1 <= 0.0);
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    // Marsaglia-Tsang for shape >= 1, boost trick below 1.
    double gamma(double shape, double scale) {
        if (shape <= 0.0 || scale <= 0.0) throw DomainError("gamma: shape and scale must be positive");
        if (shape < 1.0) {
            const double u = std::max(uniform(), 1e-300);
            return gamma(shape + 1.0, scale) * std::pow(u, 1.0 / shape);
        }
        const double d = shape - 1.0 / 3.0;
        const double c = 1.0 / std::sqrt(9.0 * d);
        for (;;) {
            double x = 0.0, v = 0.0;
            do {
                x = normal();
                v = 1.0 + c * x;
            } while (v <= 0.0);
            v = v * v * v;
            const double u = uniform();
            if (u < 1.0 - 0.0331 * x * x * x * x) return d * v * scale;
            if (u > 0.0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v * scale;
        }
    }

    // Product-of-uniforms inversion; adequate for the mean ranges used here.
    std::uint64_t poisson(double mean) {
        if (mean < 0.0) throw DomainError("poisson: mean must be nonnegative");
        if (mean == 0.0) return 0;
        if (mean > 1e4) {
            const double s = std::round(mean + std::sqrt(mean) * normal());
            return s <= 0.0 ? 0 : static_cast<std::uint64_t>(s);
        }
        const double limit = std::exp(-mean);
        double prod = uniform();
        std::uint64_t k = 0;
        while (prod > limit) {
            prod *= uniform();
            ++k;
        }
        return k;
    }

private:
    std::uint64_t state_ = 0;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

} // namespace sphenic
