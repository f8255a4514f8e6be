#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace cal::rng {

inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

// Deterministic named stream. Every consumer derives its own stream from the
// root seed plus a purpose string, so adding a consumer never shifts the
// values another consumer sees. Portable: no std distributions involved.
class Stream {
public:
    Stream(std::uint64_t root_seed, std::string_view purpose) {
        state_ = fnv1a64(purpose) ^ (root_seed * 0x9e3779b97f4a7c15ull);
        splitmix64(state_);  // decorrelate nearby roots
    }

    Stream fork(std::string_view purpose) const {
        Stream s = *this;
        s.state_ ^= fnv1a64(purpose);
        splitmix64(s.state_);
        return s;
    }

    Stream fork(std::string_view purpose, std::uint64_t index) const {
        Stream s = fork(purpose);
        s.state_ ^= index * 0xd1342543de82ef95ull;
        splitmix64(s.state_);
        return s;
    }

    std::uint64_t next_u64() { return splitmix64(state_); }

    // Uniform double in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Unbiased integer in [0, n) by rejection.
    std::uint64_t below(std::uint64_t n) {
        const std::uint64_t limit = ~0ull - (~0ull % n);
        std::uint64_t x;
        do {
            x = next_u64();
        } while (x >= limit);
        return x % n;
    }

    bool bernoulli(double p) { return uniform() < p; }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    // Shuffled index permutation 0..n-1, used for batch order each epoch.
    std::vector<std::size_t> permutation(std::size_t n) {
        std::vector<std::size_t> idx(n);
        for (std::size_t i = 0; i < n; ++i) idx[i] = i;
        shuffle(idx);
        return idx;
    }

private:
    std::uint64_t state_ = 0;
};

}  // namespace cal::rng
