#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>

namespace cimsim {

/// FNV-1a 64-bit hash, used to turn stream labels into seed material.
constexpr std::uint64_t fnv1a64(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// Deterministic pseudo-random stream. One stream per sampled object so that
/// a chip seed reproduces bit-identical offset patterns on every run.
///
/// Generator: xoshiro256++ (Blackman & Vigna) with the state filled by the
/// SplitMix64 sequence. Sub-streams are derived by mixing the master seed
/// with an FNV-1a hash of the label:
///
///   seed(label) = master_seed ^ (fnv1a64(label) * 0x9E3779B97F4A7C15)
///
/// Uniform doubles come from the top 52 bits of one 64-bit output, offset by
/// half an ulp so the result lies strictly inside (0,1). Normal deviates use
/// the inverse-CDF method: exactly one 64-bit draw per scalar, so draw_count
/// advances by one per sample regardless of distribution.
class RngStream {
public:
    explicit RngStream(std::uint64_t seed) {
        std::uint64_t x = seed;
        for (auto& word : state_) word = splitmix64(x);
    }

    /// Named sub-stream of a master seed. Distinct labels give independent
    /// streams; the same (seed, label) pair always gives the same stream.
    static RngStream derive(std::uint64_t master_seed, std::string_view label) {
        return RngStream(master_seed ^ (fnv1a64(label) * 0x9E3779B97F4A7C15ULL));
    }

    std::uint64_t next_u64() {
        const std::uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        ++draw_count_;
        return result;
    }

    /// Uniform double strictly inside (0,1); one generator draw.
    double uniform_open01() {
        return (static_cast<double>(next_u64() >> 12) + 0.5) * 0x1p-52;
    }

    /// Normal deviate via inverse CDF; one generator draw. sigma must be >= 0.
    double normal(double mu, double sigma);

    std::uint64_t draw_count() const { return draw_count_; }

    static std::string_view algorithm_id() { return kAlgorithmId; }

private:
    static constexpr std::string_view kAlgorithmId = "xoshiro256pp/splitmix64/fnv1a64:v1";

    static constexpr std::uint64_t splitmix64(std::uint64_t& x) {
        x += 0x9E3779B97F4A7C15ULL;
        std::uint64_t z = x;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    static constexpr std::uint64_t rotl(std::uint64_t x, int k) {
        return (x << k) | (x >> (64 - k));
    }

    std::array<std::uint64_t, 4> state_{};
    std::uint64_t draw_count_ = 0;
};

} // namespace cimsim
