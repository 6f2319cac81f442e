#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "arcopo/model.hpp"
#include "arcopo/prompt.hpp"
#include "arcopo/rng.hpp"

namespace arcopo {

enum class RewardKind { align, motion, quality, composite, random };

RewardKind reward_kind_from_string(const std::string& s);
std::string to_string(RewardKind kind);

/// Synthetic sequence-level rewards. All kinds are <= 0 with a known
/// optimum: align peaks when the chunk mean hits the prompt target,
/// motion when successive chunk distances equal step_target, quality
/// when chunk norms equal norm_target. composite is the weighted sum;
/// random is a seeded draw that ignores the sequence (the null control).
struct RewardSpec {
    RewardKind kind = RewardKind::align;
    double weight_align = 1.0;
    double weight_motion = 1.0;
    double weight_quality = 1.0;
    double step_target = 4.0;
    double norm_target = 6.0;
};

/// kind=random draws from `noise` and is the only kind that consumes it;
/// passing no stream for random is an error, every other kind ignores it.
double eval_reward(const SequenceLatents& seq, const PromptSpec& prompt,
                   const RewardSpec& spec, RngStream* noise = nullptr);

}  // namespace arcopo
