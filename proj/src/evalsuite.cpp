#include "arcopo/evalsuite.hpp"

#include <stdexcept>
#include <string>

namespace arcopo {

double eval_mean_reward(const ModelParams& params, std::span<const PromptSpec> prompts,
                        const RewardSpec& spec, const SamplerConfig& sampler,
                        int sequence_length, int rollouts_per_prompt, std::uint64_t eval_seed) {
    if (prompts.empty()) throw std::invalid_argument("eval_mean_reward: no prompts");
    if (rollouts_per_prompt < 1) {
        throw std::invalid_argument("eval_mean_reward: rollouts_per_prompt must be >= 1");
    }
    RngStream root = RngStream(eval_seed).child("eval");
    double acc = 0.0;
    int n = 0;
    for (std::size_t i = 0; i < prompts.size(); ++i) {
        RngStream ps = root.child("prompt." + std::to_string(i));
        for (int r = 0; r < rollouts_per_prompt; ++r) {
            RngStream rs = ps.child("rollout." + std::to_string(r));
            const NoisePlan plan = make_plan(rs.child("plan"), sequence_length,
                                             sampler.steps(), params.dims.chunk_dim);
            const SequenceLatents seq =
                rollout_sequence(params, prompts[i], plan, sampler, sequence_length);
            RngStream noise = rs.child("reward");
            acc += eval_reward(seq, prompts[i], spec, &noise);
            ++n;
        }
    }
    return acc / n;
}

EvalResult evaluate(const ModelParams& params, const EvalSuite& suite) {
    EvalResult out;
    out.in_domain = eval_mean_reward(params, suite.in_domain, suite.optimized, suite.sampler,
                                     suite.sequence_length, suite.rollouts_per_prompt,
                                     suite.eval_seed);
    out.held_out = eval_mean_reward(params, suite.held_out, suite.optimized, suite.sampler,
                                    suite.sequence_length, suite.rollouts_per_prompt,
                                    suite.eval_seed);
    RewardSpec motion = suite.optimized;
    motion.kind = RewardKind::motion;
    RewardSpec quality = suite.optimized;
    quality.kind = RewardKind::quality;
    out.monitor_motion = eval_mean_reward(params, suite.held_out, motion, suite.sampler,
                                          suite.sequence_length, suite.rollouts_per_prompt,
                                          suite.eval_seed);
    out.monitor_quality = eval_mean_reward(params, suite.held_out, quality, suite.sampler,
                                           suite.sequence_length, suite.rollouts_per_prompt,
                                           suite.eval_seed);
    return out;
}

}  // namespace arcopo
