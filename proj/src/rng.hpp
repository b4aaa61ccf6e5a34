#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace moelab::rng {

// splitmix64 finalizer. All randomness in the project is derived from this
// hash so that every consumer (init, dropout, shuffling, splits) is a pure
// function of its key and counter.
constexpr uint64_t mix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

constexpr uint64_t combine(uint64_t a, uint64_t b) {
    return mix64(a ^ (0x9e3779b97f4a7c15ULL + b + (a << 6) + (a >> 2)));
}

inline uint64_t hash_str(std::string_view s) {
    // FNV-1a, folded through mix64
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return mix64(h);
}

// Stateless counter-based random stream. Identical (key, counter) pairs give
// identical draws on every platform, which is what makes step replay and
// same-seed reruns bit-identical.
class Stream {
  public:
    Stream(uint64_t seed, std::string_view label, uint64_t a = 0, uint64_t b = 0)
        : key_(combine(combine(combine(seed, hash_str(label)), a), b)) {}

    explicit Stream(uint64_t key) : key_(key) {}

    uint64_t bits(uint64_t counter) const { return mix64(key_ ^ mix64(counter)); }

    // [0, 1)
    double uniform(uint64_t counter) const {
        return static_cast<double>(bits(counter) >> 11) * 0x1.0p-53;
    }

    // N(0, 1) via Box-Muller; consumes counters 2c and 2c+1.
    double normal(uint64_t counter) const {
        const double u1 = uniform(2 * counter);
        const double u2 = uniform(2 * counter + 1);
        const double r = std::sqrt(-2.0 * std::log(1.0 - u1));
        return r * std::cos(6.283185307179586 * u2);
    }

    uint64_t key() const { return key_; }

  private:
    uint64_t key_;
};

} // namespace moelab::rng
