#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "arcopo/copo.hpp"
#include "arcopo/replay_entry.hpp"
#include "arcopo/rollout.hpp"

namespace arcopo {

/// Pre-collected fork groups, all rolled out by one reference policy.
struct ReplayBuffer {
    std::vector<ReplayEntry> entries;
    std::uint64_t reference_id = 0;  // params_fingerprint of the reference
};

/// n_groups independent fork-group rollouts under the frozen reference
/// parameters, prompts cycled round-robin.
ReplayBuffer collect_buffer(const ModelParams& ref_params, std::span<const PromptSpec> prompts,
                            const RewardSpec& reward, const CopoConfig& cfg,
                            const SamplerConfig& sampler, int L, int n_groups,
                            RngStream stream);

/// Buffered training: every step samples one stored group (seeded, with
/// replacement) and ascends the objective against the stored old-policy
/// candidates. clip_enabled=false runs the raw ratio-weighted objective
/// (the off-policy ablation). Draws no new rollout noise.
TrainResult train_semi(Policy& policy, const ReplayBuffer& buffer, const CopoConfig& cfg,
                       const SamplerConfig& sampler, int steps, bool clip_enabled,
                       RngStream batch_stream);

inline constexpr char kBufferMagic[] = "ARCOPO-BUF-1";

void save_buffer(const std::filesystem::path& path, const ReplayBuffer& buffer,
                 std::uint64_t config_hash, std::uint64_t root_seed);
/// expected_reference_id != 0 enforces that the buffer was collected by
/// that exact parameter snapshot.
ReplayBuffer load_buffer(const std::filesystem::path& path, const ModelDims& expected,
                         std::uint64_t expected_reference_id = 0);

}  // namespace arcopo
