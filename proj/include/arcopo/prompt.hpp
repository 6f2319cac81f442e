#pragma once

#include <cstdint>
#include <vector>

#include "arcopo/vecmath.hpp"

namespace arcopo {

/// Conditioning for a rollout: a fixed-norm target vector derived from a
/// seed. The target is injected into the initial context and is what the
/// alignment reward measures against.
struct PromptSpec {
    std::uint64_t prompt_seed = 0;
    Vec target;

    /// Target of dimension chunk_dim with norm scale*sqrt(chunk_dim).
    /// Fixed norm keeps reward magnitudes comparable across prompts.
    static PromptSpec from_seed(std::uint64_t seed, int chunk_dim, double scale = 1.0);
};

/// Deterministic prompt sets; train and held-out families are disjoint
/// for every root seed.
std::vector<PromptSpec> make_prompt_set(std::uint64_t root_seed, const char* family,
                                        int count, int chunk_dim, double scale = 1.0);

}  // namespace arcopo
