#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace mrlab {

// Deterministic random stream. Distributions are hand-rolled on top of
// mt19937_64 because the std distribution objects are not bit-stable
// across standard library implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // Uniform in the open interval (0, 1).
    double uniform01() {
        return (static_cast<double>(engine_() >> 11) + 0.5) * (1.0 / 9007199254740992.0);
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    // Box-Muller without the cached spare so draw count stays predictable.
    double normal(double mean = 0.0, double stddev = 1.0) {
        const double u1 = uniform01();
        const double u2 = uniform01();
        const double mag = std::sqrt(-2.0 * std::log(u1));
        return mean + stddev * mag * std::cos(2.0 * 3.141592653589793238462643 * u2);
    }

    // Standard Gumbel: -log(-log(u)), u in (0,1).
    double gumbel() { return -std::log(-std::log(uniform01())); }

    // Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) {
        // Rejection sampling keeps the stream unbiased for any n.
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x = engine_();
        while (x >= limit) x = engine_();
        return x % n;
    }

    int int_range(int lo, int hi_inclusive) {
        return lo + static_cast<int>(below(static_cast<std::uint64_t>(hi_inclusive - lo + 1)));
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        if (v.size() < 2) return;
        for (std::size_t i = v.size() - 1; i > 0; --i) {
            const std::size_t j = static_cast<std::size_t>(below(i + 1));
            std::swap(v[i], v[j]);
        }
    }

    // Derive an independent stream, e.g. one per task id.
    Rng fork(std::uint64_t stream_id) const {
        // SplitMix64 finalizer over (state hash, stream id).
        std::uint64_t z = seed_hash_ ^ (stream_id + 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return Rng(z ^ (z >> 31));
    }

    void set_fork_base(std::uint64_t seed) { seed_hash_ = seed; }

    static Rng with_fork_base(std::uint64_t seed) {
        Rng r(seed);
        r.set_fork_base(seed);
        return r;
    }

private:
    std::mt19937_64 engine_;
    std::uint64_t seed_hash_ = 0x6d724c4142ULL; // "mrLAB"
};

} // namespace mrlab
