#pragma once

#include <cstdint>
#include <span>

namespace vitlens {

// Counter-based generator: every draw is a pure function of (key, counter),
// so results never depend on how many values were consumed elsewhere.
class CounterRng {
public:
    explicit CounterRng(uint64_t key) : key_(mix(key ^ 0x9e3779b97f4a7c15ULL)) {}

    static uint64_t mix(uint64_t z) {
        z += 0x9e3779b97f4a7c15ULL;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    uint64_t bits(uint64_t counter) const { return mix(key_ + mix(counter)); }

    // Uniform in [0, 1) with 53 bits.
    double uniform(uint64_t counter) const {
        return static_cast<double>(bits(counter) >> 11) * 0x1.0p-53;
    }

    // Standard normal via Box-Muller on counter slots 2c and 2c+1.
    double gaussian(uint64_t counter) const;

    CounterRng derive(uint64_t salt) const { return CounterRng(key_ ^ mix(salt + 0x632be59bd9b4e019ULL)); }

private:
    uint64_t key_;
};

// Sequential convenience wrapper for code that just needs a stream.
class SeededStream {
public:
    explicit SeededStream(uint64_t seed) : rng_(seed), gauss_(rng_.derive(1)) {}

    uint64_t next_bits() { return rng_.bits(counter_++); }
    double next_uniform() { return rng_.uniform(counter_++); }
    double next_gaussian() { return gauss_.gaussian(gauss_counter_++); }

    // Uniform integer in [0, bound), bound > 0, rejection-sampled (unbiased).
    uint64_t next_below(uint64_t bound);

    template <typename T>
    void shuffle(std::span<T> items) {
        for (size_t i = items.size(); i > 1; --i) {
            const size_t j = static_cast<size_t>(next_below(i));
            std::swap(items[i - 1], items[j]);
        }
    }

private:
    CounterRng rng_;
    CounterRng gauss_;
    uint64_t counter_ = 0;
    uint64_t gauss_counter_ = 0;
};

} // namespace vitlens
