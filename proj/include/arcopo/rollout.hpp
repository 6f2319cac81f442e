#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "arcopo/copo.hpp"
#include "arcopo/replay_entry.hpp"
#include "arcopo/rewards.hpp"

namespace arcopo {

struct IterationRecord {
    int iteration = 0;
    int pivot = 0;  // 1-based in logs
    double reward_mean = 0.0;
    double reward_std = 0.0;
    double objective = 0.0;
    double ratio_mean = 1.0;
    double ratio_max = 1.0;
    double clip_fraction = 0.0;
    double tau_used = 0.0;
    double wall_ms = 0.0;  // kept out of persisted artifacts (not reproducible)
};

/// One forked rollout group (Algorithm steps: pivot draw, shared context,
/// neighborhood fork, branch completion, sequence rewards). Does not
/// update parameters; the same entry feeds on-policy and buffered
/// training alike. When plan_stream is given, the base noise plan is
/// drawn from it instead of the iteration stream (the trainers use this
/// to cycle base plans the way they cycle prompts).
ReplayEntry arcopo_iteration(const ModelParams& params, const PromptSpec& prompt,
                             const RewardSpec& reward, const CopoConfig& cfg,
                             const SamplerConfig& sampler, int L, RngStream iter_stream,
                             const RngStream* plan_stream = nullptr);

struct TrainResult {
    std::vector<IterationRecord> curve;
};

/// On-policy training: each iteration rolls out fresh candidates from
/// the current policy (which therefore also serves as the old policy for
/// that iteration's update) and ascends the clipped objective.
TrainResult train_on_policy(Policy& policy, std::span<const PromptSpec> prompts,
                            const RewardSpec& reward, const CopoConfig& cfg,
                            const SamplerConfig& sampler, int L, int iterations,
                            RngStream run_stream, int plan_cycle = 0);

/// SDE-GRPO baseline trainer: same loop shape, exploration via fresh
/// solver noises instead of initial-noise neighborhoods.
TrainResult train_sde_baseline(Policy& policy, std::span<const PromptSpec> prompts,
                               const RewardSpec& reward, const CopoConfig& cfg,
                               const SamplerConfig& sampler, int L, int iterations,
                               RngStream run_stream, int plan_cycle = 0);

/// CSV with the fixed column set; JSONL carries the full record.
void write_curve_csv(std::span<const IterationRecord> curve, std::uint64_t config_hash,
                     std::uint64_t root_seed, const std::filesystem::path& path);
void write_curve_jsonl(std::span<const IterationRecord> curve, std::uint64_t config_hash,
                       std::uint64_t root_seed, const std::filesystem::path& path);

}  // namespace arcopo
