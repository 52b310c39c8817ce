#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace synthtrial {

// Bad input: data, config, preconditions. CLI maps this to exit code 1.
struct ValidationError : std::runtime_error {
    explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

// Numerical failure: divergence, singular systems, bracket failures, non-finite values.
struct NumericalError : std::runtime_error {
    explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    std::uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 14695981039346656037ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

// Derives an independent stream seed from a root seed and a purpose tag.
// Schedule-independent: the same (root, tag) pair always yields the same stream.
inline std::uint64_t derive_seed(std::uint64_t root, std::string_view tag) {
    std::uint64_t h = fnv1a64(tag) ^ (root * 0x9E3779B97F4A7C15ULL);
    return splitmix64(splitmix64(h));
}

inline std::uint64_t derive_seed(std::uint64_t root, std::string_view tag, std::uint64_t index) {
    return derive_seed(derive_seed(root, tag), std::to_string(index));
}

double norm_ppf(double p);

inline double norm_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

// Upper tail of the chi-squared distribution with one degree of freedom.
inline double chi2_sf_1df(double x) {
    if (x < 0.0) return 1.0;
    return std::erfc(std::sqrt(x / 2.0));
}

// Kolmogorov distribution tail Q(lambda) = 2 sum_{j>=1} (-1)^{j-1} exp(-2 j^2 lambda^2).
inline double kolmogorov_sf(double lambda) {
    if (lambda <= 0.0) return 1.0;
    double sum = 0.0, sign = 1.0;
    for (int j = 1; j <= 100; ++j) {
        double term = std::exp(-2.0 * j * j * lambda * lambda);
        sum += sign * term;
        if (term < 1e-16) break;
        sign = -sign;
    }
    double q = 2.0 * sum;
    if (q < 0.0) q = 0.0;
    if (q > 1.0) q = 1.0;
    return q;
}

// Quantile with linear interpolation between order statistics (R type 7).
inline double quantile_sorted(const std::vector<double>& sorted, double p) {
    if (sorted.empty()) throw ValidationError("quantile of empty vector");
    if (p <= 0.0) return sorted.front();
    if (p >= 1.0) return sorted.back();
    double h = (static_cast<double>(sorted.size()) - 1.0) * p;
    std::size_t lo = static_cast<std::size_t>(h);
    double frac = h - static_cast<double>(lo);
    if (lo + 1 >= sorted.size()) return sorted.back();
    return sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac;
}

// Deterministic stream of doubles and derived draws. All sampling in the
// project goes through this so runs are reproducible for a given seed.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    std::uint64_t u64() { return eng_(); }

    // Uniform on the open interval (0, 1).
    double uniform() {
        double u = static_cast<double>(eng_() >> 11) * 0x1.0p-53;
        if (u <= 0.0) u = 0x1.0p-54;
        return u;
    }

    double normal() { return norm_ppf(uniform()); }

    double gumbel() { return -std::log(-std::log(uniform())); }

    // Uniform integer in [0, n).
    std::size_t below(std::size_t n) {
        if (n == 0) throw ValidationError("Rng::below(0)");
        return static_cast<std::size_t>(eng_() % n);
    }

    int bernoulli(double p) { return uniform() < p ? 1 : 0; }

    int poisson(double lambda) {
        if (!(lambda >= 0.0) || !std::isfinite(lambda))
            throw NumericalError("poisson rate must be finite and nonnegative");
        if (lambda == 0.0) return 0;
        if (lambda <= 500.0) {
            // inversion by sequential search
            double p = std::exp(-lambda), cdf = p, u = uniform();
            int k = 0;
            while (u > cdf && k < 100000) {
                ++k;
                p *= lambda / k;
                cdf += p;
            }
            return k;
        }
        double v = lambda + std::sqrt(lambda) * normal();
        return v < 0.0 ? 0 : static_cast<int>(std::lround(v));
    }

    std::size_t categorical(const std::vector<double>& probs) {
        double total = 0.0;
        for (double p : probs) total += p;
        if (!(total > 0.0) || !std::isfinite(total))
            throw NumericalError("categorical probabilities must have positive finite sum");
        double u = uniform() * total, acc = 0.0;
        for (std::size_t i = 0; i < probs.size(); ++i) {
            acc += probs[i];
            if (u <= acc) return i;
        }
        return probs.size() - 1;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = below(i);
            std::swap(v[i - 1], v[j]);
        }
    }

  private:
    std::mt19937_64 eng_;
};

}  // namespace synthtrial
