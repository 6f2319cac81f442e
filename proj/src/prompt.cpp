#include "arcopo/prompt.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "arcopo/errors.hpp"
#include "arcopo/rng.hpp"

namespace arcopo {

PromptSpec PromptSpec::from_seed(std::uint64_t seed, int chunk_dim, double scale) {
    if (chunk_dim < 1) throw std::invalid_argument("PromptSpec: chunk_dim must be >= 1");
    RngStream stream = RngStream(seed).child("prompt");
    Vec g = stream.gaussian(static_cast<std::size_t>(chunk_dim));
    const double norm = l2(g);
    if (norm < 1e-12) throw NumericError("PromptSpec: degenerate direction draw");
    const double want = scale * std::sqrt(static_cast<double>(chunk_dim));
    PromptSpec spec;
    spec.prompt_seed = seed;
    spec.target = scaled(g, want / norm);
    return spec;
}

std::vector<PromptSpec> make_prompt_set(std::uint64_t root_seed, const char* family,
                                        int count, int chunk_dim, double scale) {
    if (count < 1) throw std::invalid_argument("make_prompt_set: count must be >= 1");
    std::vector<PromptSpec> out;
    out.reserve(static_cast<std::size_t>(count));
    RngStream base = RngStream(root_seed).child(family);
    for (int i = 0; i < count; ++i) {
        // Derive one 64-bit seed per prompt from a labeled substream.
        RngStream s = base.child("seed." + std::to_string(i));
        const std::uint64_t seed = s.uniform_index(static_cast<std::size_t>(1) << 62);
        out.push_back(PromptSpec::from_seed(seed, chunk_dim, scale));
    }
    return out;
}

}  // namespace arcopo
