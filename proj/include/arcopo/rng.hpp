#pragma once

#include <cstdint>
#include <string>
#include <string_view>

#include "arcopo/vecmath.hpp"

namespace arcopo {

/// Counter-based random stream keyed by (root_seed, label path).
///
/// Each stream owns a key derived by hashing the root seed and every
/// label on its path; the i-th draw is a pure function of (key, i).
/// Forking a child stream never perturbs the parent's draw sequence,
/// which is what lets branch rollouts share every noise except the one
/// deliberately replaced. Streams are cheap values; copy freely.
class RngStream {
public:
    explicit RngStream(std::uint64_t root_seed);

    /// New stream for `label` appended to this stream's path, counter 0.
    RngStream child(std::string_view label) const;

    /// n i.i.d. standard normal draws; advances the counter by exactly n.
    Vec gaussian(std::size_t n);
    double gaussian1();

    /// Unbiased draw from {0, ..., n-1}; advances the counter by at
    /// least 1 (rejection sampling).
    std::size_t uniform_index(std::size_t n);

    std::uint64_t root_seed() const { return root_seed_; }
    const std::string& path() const { return path_; }
    std::uint64_t counter() const { return counter_; }

    /// Process-wide count of normal draws, for audit tests that assert a
    /// code path draws no new rollout noise.
    static std::uint64_t gaussian_draw_count();

private:
    RngStream(std::uint64_t root_seed, std::uint64_t key, std::string path);
    std::uint64_t word(std::uint64_t index) const;

    std::uint64_t root_seed_;
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
    std::string path_;
};

}  // namespace arcopo
