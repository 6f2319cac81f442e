#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "arcopo/model.hpp"
#include "arcopo/prompt.hpp"

namespace arcopo {

/// One fork group captured at the pivot chunk: everything a later
/// parameter update needs, with the forked trajectories carrying the
/// rollout-time (old-policy) predictions.
struct ReplayEntry {
    int pivot = 0;                           // 0-based chunk index
    ContextCache context;                    // shared h entering the pivot chunk
    Vec base_noise;                          // eps*
    std::vector<Vec> member_noises;          // G perturbed initial noises
    std::vector<Vec> pivot_solver_noises;    // shared across branches, T-1 entries
    std::vector<ChunkTrajectory> candidates; // G pivot-chunk trajectories
    Vec rewards;                             // G sequence-level rewards
    PromptSpec prompt;
    std::uint64_t root_seed = 0;             // provenance
    std::string iter_label;

    int group_size() const { return static_cast<int>(candidates.size()); }
};

}  // namespace arcopo
