// Deterministic random number generation. Two flavours: a sequential
// splitmix64 stream for training loops, and stateless counter-based draws for
// per-voxel / per-element sampling where the result must not depend on
// evaluation order.
#pragma once

#include <cmath>
#include <cstdint>

namespace evgen {

inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Hash a (seed, counter...) tuple into one well-mixed 64-bit word.
inline std::uint64_t hash_counters(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0,
                                   std::uint64_t c = 0) {
    std::uint64_t s = seed;
    s ^= splitmix64(a += 0x1234567890abcdefULL);
    std::uint64_t t = s;
    s ^= splitmix64(b += 0xfedcba0987654321ULL) + (t << 6) + (t >> 2);
    t = s;
    s ^= splitmix64(c += 0x0f0f0f0f0f0f0f0fULL) + (t << 6) + (t >> 2);
    return splitmix64(s);
}

inline double u64_to_unit(std::uint64_t u) {
    // 53 mantissa bits -> [0, 1)
    return static_cast<double>(u >> 11) * 0x1.0p-53;
}

// Sequential generator. Cheap to copy; derive independent streams with fork().
class Rng {
  public:
    explicit Rng(std::uint64_t seed = 0) : state_(seed ^ 0x5851f42d4c957f2dULL) {
        // decorrelate trivially related seeds
        splitmix64(state_);
    }

    std::uint64_t next_u64() { return splitmix64(state_); }

    double uniform() { return u64_to_unit(next_u64()); }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Box-Muller; returns one value per call, no cached spare.
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
    }

    // Integer in [0, n)
    std::uint64_t below(std::uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

    Rng fork(std::uint64_t tag) {
        Rng r;
        r.state_ = hash_counters(state_, tag, 0x666f726bULL);
        return r;
    }

  private:
    std::uint64_t state_;
};

// Counter-based draws: pure functions of (seed, counters).
inline double counter_uniform(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0,
                              std::uint64_t c = 0) {
    return u64_to_unit(hash_counters(seed, a, b, c));
}

inline double counter_normal(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0,
                             std::uint64_t c = 0) {
    double u1 = counter_uniform(seed, a, b, c ^ 0x9e37ULL);
    double u2 = counter_uniform(seed, a, b, c ^ 0x79b9ULL);
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
}

// Inverse-CDF Poisson draw. For a fixed u the result is nondecreasing in
// lambda, which keeps event counts monotone in the rate parameters.
inline std::uint64_t poisson_icdf(double lambda, double u) {
    if (lambda <= 0.0) return 0;
    // For large lambda fall back to a rounded normal approximation (still
    // monotone in lambda for fixed u).
    if (lambda > 500.0) {
        // invert the standard normal via rational approximation (Acklam)
        double q = u - 0.5;
        double z;
        if (std::abs(q) <= 0.425) {
            double r = 0.180625 - q * q;
            z = q * (((((((2509.0809287301226727 * r + 33430.575583588128105) * r + 67265.770927008700853) * r + 45921.953931549871457) * r + 13731.693765509461125) * r + 1971.5909503065514427) * r + 133.14166789178437745) * r + 3.387132872796366608) /
                (((((((5226.495278852545703 * r + 28729.085735721942674) * r + 39307.89580009271061) * r + 21213.794301586595867) * r + 5394.1960214247511077) * r + 687.1870074920579083) * r + 42.313330701600911252) * r + 1.0);
        } else {
            double r = q < 0 ? u : 1.0 - u;
            r = std::sqrt(-std::log(std::max(r, 1e-300)));
            if (r <= 5.0) {
                r -= 1.6;
                z = (((((((7.7454501427834140764e-4 * r + 0.0227238449892691845833) * r + 0.24178072517745061177) * r + 1.27045825245236838258) * r + 3.64784832476320460504) * r + 5.7694972214606914055) * r + 4.6303378461565452959) * r + 1.42343711074968357734) /
                    (((((((1.05075007164441684324e-9 * r + 5.475938084995344946e-4) * r + 0.0151986665636164571966) * r + 0.14810397642748007459) * r + 0.68976733498510000455) * r + 1.6763848301838038494) * r + 2.05319162663775882187) * r + 1.0);
            } else {
                r -= 5.0;
                z = (((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r + 0.0012426609473880784386) * r + 0.026532189526576123093) * r + 0.29656057182850489123) * r + 1.7848265399172913358) * r + 5.4637849111641143699) * r + 6.6579046435011037772) /
                    (((((((2.04426310338993978564e-15 * r + 1.4215117583164458887e-7) * r + 1.8463183175100546818e-5) * r + 7.868691311456132591e-4) * r + 0.0148753612908506148525) * r + 0.13692988092273580531) * r + 0.59983220655588793769) * r + 1.0);
            }
            if (q < 0) z = -z;
        }
        double x = lambda + std::sqrt(lambda) * z;
        return x < 0 ? 0 : static_cast<std::uint64_t>(x + 0.5);
    }
    double p = std::exp(-lambda);
    double cdf = p;
    std::uint64_t k = 0;
    while (u >= cdf && k < 100000) {
        ++k;
        p *= lambda / static_cast<double>(k);
        cdf += p;
        if (p < 1e-320) break;
    }
    return k;
}

}  // namespace evgen
