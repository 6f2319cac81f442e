#pragma once

#include <cstdint>
#include <vector>

#include "arcopo/model.hpp"
#include "arcopo/prompt.hpp"
#include "arcopo/rewards.hpp"

namespace arcopo {

/// Deterministic reward evaluation: seeded fresh noise plans per
/// (prompt, rollout), averaged. Used for held-out checks and the merge
/// sweep.
struct EvalSuite {
    std::vector<PromptSpec> in_domain;  // training prompts
    std::vector<PromptSpec> held_out;   // disjoint prompt seeds
    RewardSpec optimized;               // the trained-against reward
    SamplerConfig sampler;
    int sequence_length = 6;
    int rollouts_per_prompt = 8;
    std::uint64_t eval_seed = 0;
};

struct EvalResult {
    double in_domain = 0.0;
    double held_out = 0.0;
    double monitor_motion = 0.0;   // held-out prompts, motion reward
    double monitor_quality = 0.0;  // held-out prompts, quality reward
};

double eval_mean_reward(const ModelParams& params, std::span<const PromptSpec> prompts,
                        const RewardSpec& spec, const SamplerConfig& sampler,
                        int sequence_length, int rollouts_per_prompt, std::uint64_t eval_seed);

EvalResult evaluate(const ModelParams& params, const EvalSuite& suite);

}  // namespace arcopo
