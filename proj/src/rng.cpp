#include "arcopo/rng.hpp"

#include <atomic>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace arcopo {

namespace {

constexpr std::uint64_t kGamma = 0x9E3779B97F4A7C15ULL;

// SplitMix64 finalizer.
std::uint64_t mix64(std::uint64_t z) {
    z ^= z >> 30;
    z *= 0xBF58476D1CE4E5B9ULL;
    z ^= z >> 27;
    z *= 0x94D049BB133111EBULL;
    z ^= z >> 31;
    return z;
}

std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001B3ULL;
    }
    return h;
}

std::atomic<std::uint64_t> g_gaussian_draws{0};

}  // namespace

RngStream::RngStream(std::uint64_t root_seed)
    : root_seed_(root_seed), key_(mix64(root_seed + kGamma)), path_() {}

RngStream::RngStream(std::uint64_t root_seed, std::uint64_t key, std::string path)
    : root_seed_(root_seed), key_(key), path_(std::move(path)) {}

RngStream RngStream::child(std::string_view label) const {
    const std::uint64_t k = mix64(key_ ^ (fnv1a64(label) * 0xBF58476D1CE4E5B9ULL + kGamma));
    std::string p = path_.empty() ? std::string(label) : path_ + "/" + std::string(label);
    return RngStream(root_seed_, k, std::move(p));
}

std::uint64_t RngStream::word(std::uint64_t index) const {
    return mix64(key_ + (index + 1) * kGamma);
}

Vec RngStream::gaussian(std::size_t n) {
    if (n == 0) throw std::invalid_argument("gaussian: n must be >= 1");
    Vec out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = gaussian1();
    return out;
}

double RngStream::gaussian1() {
    // Box-Muller, cosine branch; two words per draw. Uniforms are mapped
    // into (0,1) so the log never sees 0.
    const std::uint64_t c = counter_++;
    const double u1 = (static_cast<double>(word(2 * c) >> 11) + 0.5) * 0x1.0p-53;
    const double u2 = (static_cast<double>(word(2 * c + 1) >> 11) + 0.5) * 0x1.0p-53;
    g_gaussian_draws.fetch_add(1, std::memory_order_relaxed);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::size_t RngStream::uniform_index(std::size_t n) {
    if (n == 0) throw std::invalid_argument("uniform_index: n must be >= 1");
    const std::uint64_t un = n;
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % un;
    while (true) {
        const std::uint64_t c = counter_++;
        const std::uint64_t u = word(2 * c);
        if (u < limit) return static_cast<std::size_t>(u % un);
    }
}

std::uint64_t RngStream::gaussian_draw_count() {
    return g_gaussian_draws.load(std::memory_order_relaxed);
}

}  // namespace arcopo
