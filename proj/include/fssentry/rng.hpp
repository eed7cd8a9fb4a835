#pragma once

#include <cstdint>
#include <vector>

namespace fssentry {

/// Deterministic counter-tracked random stream. Identical (seed, stream_id)
/// pairs replay bit-identical draw sequences; distinct stream_ids give
/// independent streams, so workers can fork without coordination.
/// Core generator is xoshiro256** seeded through splitmix64.
class RngStream {
public:
    RngStream(uint64_t seed, uint64_t stream_id);

    uint64_t seed() const { return seed_; }
    uint64_t stream_id() const { return stream_id_; }
    uint64_t counter() const { return counter_; }

    uint64_t next_u64();

    /// Uniform double in [0, 1).
    double uniform();
    double uniform(double lo, double hi);
    /// Standard normal via Box-Muller (two u64 draws per call, no caching).
    double normal();
    /// Unbiased integer in [0, n); n must be > 0.
    uint64_t uniform_int(uint64_t n);

    /// Derive an independent child stream; deterministic in (parent, child_id).
    RngStream fork(uint64_t child_id) const;

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(uniform_int(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    /// k distinct indices drawn uniformly from [0, n), order randomized.
    std::vector<size_t> sample_without_replacement(size_t n, size_t k);

private:
    uint64_t seed_;
    uint64_t stream_id_;
    uint64_t counter_ = 0;
    uint64_t state_[4];
};

/// 64-bit mix used for stable id hashing (stream derivation, run keys).
uint64_t mix64(uint64_t x);
uint64_t hash_combine(uint64_t a, uint64_t b);

} // namespace fssentry
