#pragma once

#include <cstdint>
#include <random>

#include "nsdiff/core.hpp"

namespace nsdiff {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Named substream tags. One master seed fans out into independent streams
// so ablation runs share parameter initializations.
enum class Stream : std::uint64_t {
    init_mean = 1,
    init_variance = 2,
    init_denoiser = 3,
    shuffle = 4,
    t_draw = 5,
    eta_draw = 6,
    sample_path = 7,
    synth = 8,
    endpoint = 9,
};

// Deterministic Gaussian/uniform source. Box-Muller on top of mt19937_64,
// so the byte stream depends only on the seed, not on the C++ runtime's
// normal_distribution internals.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    static Rng substream(std::uint64_t master, Stream tag, std::uint64_t a = 0, std::uint64_t b = 0) {
        std::uint64_t s = splitmix64(master);
        s = splitmix64(s ^ static_cast<std::uint64_t>(tag));
        s = splitmix64(s ^ a);
        s = splitmix64(s ^ b);
        return Rng(s);
    }

    std::uint64_t next_u64() { return gen_(); }

    // Uniform in [0, 1).
    double uniform() {
        return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
    }

    // Uniform integer in [lo, hi] via rejection (unbiased).
    int uniform_int(int lo, int hi) {
        const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % span;
        std::uint64_t r;
        do {
            r = gen_();
        } while (r >= limit);
        return lo + static_cast<int>(r % span);
    }

    double gaussian() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u, v, s;
        do {
            u = 2.0 * uniform() - 1.0;
            v = 2.0 * uniform() - 1.0;
            s = u * u + v * v;
        } while (s >= 1.0 || s == 0.0);
        const double m = std::sqrt(-2.0 * std::log(s) / s);
        spare_ = v * m;
        has_spare_ = true;
        return u * m;
    }

    void fill_gaussian(Matrix& m) {
        for (double& x : m.raw()) x = gaussian();
    }

    Matrix gaussian_matrix(std::size_t rows, std::size_t cols) {
        Matrix m(rows, cols);
        fill_gaussian(m);
        return m;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(uniform_int(0, static_cast<int>(i) - 1));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 gen_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace nsdiff
