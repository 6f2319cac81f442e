#include "arcopo/rewards.hpp"

#include <cmath>
#include <stdexcept>

namespace arcopo {

RewardKind reward_kind_from_string(const std::string& s) {
    if (s == "align") return RewardKind::align;
    if (s == "motion") return RewardKind::motion;
    if (s == "quality") return RewardKind::quality;
    if (s == "composite") return RewardKind::composite;
    if (s == "random") return RewardKind::random;
    throw std::invalid_argument("unknown reward kind: " + s);
}

std::string to_string(RewardKind kind) {
    switch (kind) {
        case RewardKind::align: return "align";
        case RewardKind::motion: return "motion";
        case RewardKind::quality: return "quality";
        case RewardKind::composite: return "composite";
        case RewardKind::random: return "random";
    }
    return "?";
}

namespace {

double align_reward(const SequenceLatents& seq, const PromptSpec& prompt) {
    const std::size_t L = seq.chunks.size();
    const std::size_t d = seq.chunks[0].clean.size();
    Vec mean_chunk(d, 0.0);
    for (const auto& c : seq.chunks) axpy(1.0 / static_cast<double>(L), c.clean, mean_chunk);
    return -l2sq_diff(mean_chunk, prompt.target);
}

double motion_reward(const SequenceLatents& seq, double step_target) {
    double acc = 0.0;
    for (std::size_t p = 0; p + 1 < seq.chunks.size(); ++p) {
        const double step = l2_diff(seq.chunks[p + 1].clean, seq.chunks[p].clean);
        const double err = step - step_target;
        acc += err * err;
    }
    return -acc;
}

double quality_reward(const SequenceLatents& seq, double norm_target) {
    double acc = 0.0;
    for (const auto& c : seq.chunks) {
        const double err = l2(c.clean) - norm_target;
        acc += err * err;
    }
    return -acc;
}

}  // namespace

double eval_reward(const SequenceLatents& seq, const PromptSpec& prompt,
                   const RewardSpec& spec, RngStream* noise) {
    if (seq.chunks.empty()) throw std::invalid_argument("eval_reward: empty sequence");
    for (const auto& c : seq.chunks) {
        if (c.clean.size() != prompt.target.size()) {
            throw std::invalid_argument("eval_reward: incomplete or mismatched sequence");
        }
    }
    switch (spec.kind) {
        case RewardKind::align:
            return align_reward(seq, prompt);
        case RewardKind::motion:
            return motion_reward(seq, spec.step_target);
        case RewardKind::quality:
            return quality_reward(seq, spec.norm_target);
        case RewardKind::composite:
            return spec.weight_align * align_reward(seq, prompt) +
                   spec.weight_motion * motion_reward(seq, spec.step_target) +
                   spec.weight_quality * quality_reward(seq, spec.norm_target);
        case RewardKind::random: {
            if (noise == nullptr) {
                throw std::invalid_argument("eval_reward: kind=random needs a noise stream");
            }
            // Negative half-normal keeps the <= 0 contract.
            return -std::abs(noise->gaussian1());
        }
    }
    throw std::invalid_argument("eval_reward: bad kind");
}

}  // namespace arcopo
