#include "fssentry/rng.hpp"

#include <cmath>
#include <stdexcept>

namespace fssentry {

namespace {

uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

} // namespace

uint64_t mix64(uint64_t x) {
    uint64_t s = x;
    return splitmix64(s);
}

uint64_t hash_combine(uint64_t a, uint64_t b) { return mix64(a ^ (mix64(b) + 0x9E3779B97F4A7C15ull + (a << 6) + (a >> 2))); }

RngStream::RngStream(uint64_t seed, uint64_t stream_id) : seed_(seed), stream_id_(stream_id) {
    uint64_t s = seed ^ (0x9E3779B97F4A7C15ull * (stream_id + 0x632BE59BD9B4E019ull));
    s = splitmix64(s);
    for (auto& w : state_) w = splitmix64(s);
    // xoshiro must not start from the all-zero state
    bool all_zero = true;
    for (auto w : state_) all_zero &= (w == 0);
    if (all_zero) state_[0] = 0x9E3779B97F4A7C15ull;
}

uint64_t RngStream::next_u64() {
    ++counter_;
    uint64_t result = rotl(state_[1] * 5, 7) * 9;
    uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
}

double RngStream::uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double RngStream::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

double RngStream::normal() {
    // Box-Muller; u1 bounded away from 0 so log stays finite.
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

uint64_t RngStream::uniform_int(uint64_t n) {
    if (n == 0) throw std::invalid_argument("uniform_int: n must be positive");
    // rejection sampling on the top multiple of n
    uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t v;
    do {
        v = next_u64();
    } while (v >= limit);
    return v % n;
}

RngStream RngStream::fork(uint64_t child_id) const {
    return RngStream(seed_, hash_combine(stream_id_, child_id));
}

std::vector<size_t> RngStream::sample_without_replacement(size_t n, size_t k) {
    if (k > n) throw std::invalid_argument("sample_without_replacement: k > n");
    // partial Fisher-Yates over an index vector
    std::vector<size_t> idx(n);
    for (size_t i = 0; i < n; ++i) idx[i] = i;
    for (size_t i = 0; i < k; ++i) {
        size_t j = i + static_cast<size_t>(uniform_int(n - i));
        std::swap(idx[i], idx[j]);
    }
    idx.resize(k);
    return idx;
}

} // namespace fssentry
