#include "arcopo/rollout.hpp"

#include <chrono>
#include <cmath>
#include <optional>
#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

#include "arcopo/errors.hpp"
#include "arcopo/neighborhood.hpp"

namespace arcopo {

ReplayEntry arcopo_iteration(const ModelParams& params, const PromptSpec& prompt,
                             const RewardSpec& reward, const CopoConfig& cfg,
                             const SamplerConfig& sampler, int L, RngStream iter_stream,
                             const RngStream* plan_stream) {
    cfg.validate();
    sampler.validate();
    if (L < 1) throw std::invalid_argument("arcopo_iteration: L must be >= 1");
    const int T = sampler.steps();
    const int d = params.dims.chunk_dim;
    const int G = cfg.group_size;

    // Pivot and the frozen base noise plan.
    RngStream pivot_stream = iter_stream.child("pivot");
    const int pivot = static_cast<int>(pivot_stream.uniform_index(static_cast<std::size_t>(L)));
    const NoisePlan plan =
        make_plan(plan_stream ? *plan_stream : iter_stream.child("plan"), L, T, d);

    // Neighborhood fork at the pivot.
    const NoiseNeighborhood hood = perturb(plan.init_noises[static_cast<std::size_t>(pivot)],
                                           cfg.sigma, G, iter_stream.child("hood"));
    const BranchPlans branches = fork(plan, pivot, hood);

    // Shared context through chunk pivot-1, generated once.
    ContextCache ctx = initial_context(prompt, params.dims);
    std::vector<ChunkTrajectory> prefix;
    prefix.reserve(static_cast<std::size_t>(pivot));
    for (int q = 0; q < pivot; ++q) {
        std::span<const Vec> solver;
        if (sampler.kind == SamplerKind::consistency) {
            solver = plan.solver_noises[static_cast<std::size_t>(q)];
        }
        ChunkTrajectory traj =
            sample_chunk(params, ctx, plan.init_noises[static_cast<std::size_t>(q)], solver, sampler);
        ctx = extend_context(ctx, traj.clean, params);
        prefix.push_back(std::move(traj));
    }

    ReplayEntry entry;
    entry.pivot = pivot;
    entry.context = ctx;
    entry.base_noise = hood.base;
    entry.member_noises = hood.members;
    if (sampler.kind == SamplerKind::consistency) {
        entry.pivot_solver_noises = plan.solver_noises[static_cast<std::size_t>(pivot)];
    }
    entry.prompt = prompt;
    entry.root_seed = iter_stream.root_seed();
    entry.iter_label = iter_stream.path();
    entry.rewards.resize(static_cast<std::size_t>(G));

    RngStream reward_stream = iter_stream.child("reward");
    for (int i = 0; i < G; ++i) {
        const NoisePlan& bp = branches.plans[static_cast<std::size_t>(i)];
        std::span<const Vec> pivot_solver;
        if (sampler.kind == SamplerKind::consistency) {
            pivot_solver = bp.solver_noises[static_cast<std::size_t>(pivot)];
        }
        SequenceLatents seq;
        seq.chunks = prefix;  // shared pre-pivot chunks, bit-identical across branches
        ChunkTrajectory pivot_traj = sample_chunk(
            params, ctx, bp.init_noises[static_cast<std::size_t>(pivot)], pivot_solver, sampler);
        ContextCache bctx = extend_context(ctx, pivot_traj.clean, params);
        entry.candidates.push_back(pivot_traj);
        seq.chunks.push_back(std::move(pivot_traj));
        for (int q = pivot + 1; q < L; ++q) {
            std::span<const Vec> solver;
            if (sampler.kind == SamplerKind::consistency) {
                solver = bp.solver_noises[static_cast<std::size_t>(q)];
            }
            ChunkTrajectory traj = sample_chunk(
                params, bctx, bp.init_noises[static_cast<std::size_t>(q)], solver, sampler);
            bctx = extend_context(bctx, traj.clean, params);
            seq.chunks.push_back(std::move(traj));
        }
        RngStream branch_reward = reward_stream.child("branch." + std::to_string(i));
        entry.rewards[static_cast<std::size_t>(i)] =
            eval_reward(seq, prompt, reward, &branch_reward);
    }
    return entry;
}

namespace {

TrainResult train_loop(Policy& policy, std::span<const PromptSpec> prompts,
                       const RewardSpec& reward, const CopoConfig& cfg,
                       const SamplerConfig& sampler, int L, int iterations,
                       RngStream run_stream, bool sde, int plan_cycle) {
    if (prompts.empty()) throw std::invalid_argument("train: no prompts");
    if (iterations < 0) throw std::invalid_argument("train: iterations must be >= 0");
    if (plan_cycle < 0) throw std::invalid_argument("train: plan_cycle must be >= 0");

    TrainResult result;
    result.curve.reserve(static_cast<std::size_t>(iterations));
    for (int iter = 0; iter < iterations; ++iter) {
        const auto start = std::chrono::steady_clock::now();
        const PromptSpec& prompt = prompts[static_cast<std::size_t>(iter) % prompts.size()];
        RngStream iter_stream = run_stream.child("iter." + std::to_string(iter));
        // Base plans cycle like prompts so curve windows stay comparable;
        // the neighborhood perturbations remain fresh every iteration.
        std::optional<RngStream> plan_stream;
        if (plan_cycle > 0) {
            plan_stream = run_stream.child("plan.cycle." + std::to_string(iter % plan_cycle));
        }

        IterationRecord rec;
        rec.iteration = iter;
        UpdateStats stats;
        if (sde) {
            const NoisePlan plan =
                make_plan(plan_stream ? *plan_stream : iter_stream.child("plan"), L,
                          sampler.steps(), policy.effective().dims.chunk_dim);
            RngStream reward_stream = iter_stream.child("reward");
            Vec rewards_seen;
            auto reward_fn = [&](const SequenceLatents& seq) {
                RngStream branch_reward =
                    reward_stream.child("branch." + std::to_string(rewards_seen.size()));
                const double r = eval_reward(seq, prompt, reward, &branch_reward);
                rewards_seen.push_back(r);
                return r;
            };
            stats = sde_grpo_update(policy, plan, prompt, reward_fn, cfg, sampler, L,
                                    iter_stream.child("sde"));
            rec.pivot = 0;
            rec.reward_mean = mean(rewards_seen);
            rec.reward_std = pop_stddev(rewards_seen);
        } else {
            // The evolving policy is both the rollout and the old policy.
            const ReplayEntry entry =
                arcopo_iteration(policy.effective(), prompt, reward, cfg, sampler, L,
                                 iter_stream, plan_stream ? &*plan_stream : nullptr);
            stats = copo_update(policy, entry, cfg, sampler, iter_stream.child("anchors"));
            rec.pivot = entry.pivot + 1;
            rec.reward_mean = mean(entry.rewards);
            rec.reward_std = pop_stddev(entry.rewards);
        }
        rec.objective = stats.objective;
        rec.ratio_mean = stats.ratio_mean;
        rec.ratio_max = stats.ratio_max;
        rec.clip_fraction = stats.clip_fraction;
        rec.tau_used = stats.tau_used;
        rec.wall_ms = std::chrono::duration<double, std::milli>(
                          std::chrono::steady_clock::now() - start)
                          .count();
        if (!std::isfinite(rec.reward_mean) || !std::isfinite(rec.objective)) {
            throw NumericError("training diverged at iteration " + std::to_string(iter));
        }
        result.curve.push_back(rec);
    }
    return result;
}

}  // namespace

TrainResult train_on_policy(Policy& policy, std::span<const PromptSpec> prompts,
                            const RewardSpec& reward, const CopoConfig& cfg,
                            const SamplerConfig& sampler, int L, int iterations,
                            RngStream run_stream, int plan_cycle) {
    return train_loop(policy, prompts, reward, cfg, sampler, L, iterations, run_stream,
                      false, plan_cycle);
}

TrainResult train_sde_baseline(Policy& policy, std::span<const PromptSpec> prompts,
                               const RewardSpec& reward, const CopoConfig& cfg,
                               const SamplerConfig& sampler, int L, int iterations,
                               RngStream run_stream, int plan_cycle) {
    return train_loop(policy, prompts, reward, cfg, sampler, L, iterations, run_stream,
                      true, plan_cycle);
}

void write_curve_csv(std::span<const IterationRecord> curve, std::uint64_t config_hash,
                     std::uint64_t root_seed, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot open curve csv for writing: " + path.string());
    char buf[512];
    std::snprintf(buf, sizeof(buf), "# config_hash=%016llx root_seed=%llu\n",
                  static_cast<unsigned long long>(config_hash),
                  static_cast<unsigned long long>(root_seed));
    os << buf;
    os << "iter,pivot,reward_mean,reward_std,objective,clip_frac\n";
    for (const auto& rec : curve) {
        std::snprintf(buf, sizeof(buf), "%d,%d,%.17g,%.17g,%.17g,%.17g\n", rec.iteration,
                      rec.pivot, rec.reward_mean, rec.reward_std, rec.objective,
                      rec.clip_fraction);
        os << buf;
    }
}

void write_curve_jsonl(std::span<const IterationRecord> curve, std::uint64_t config_hash,
                       std::uint64_t root_seed, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot open curve jsonl for writing: " + path.string());
    char hash[32];
    std::snprintf(hash, sizeof(hash), "%016llx", static_cast<unsigned long long>(config_hash));
    nlohmann::json meta;
    meta["config_hash"] = hash;
    meta["root_seed"] = root_seed;
    os << meta.dump() << "\n";
    for (const auto& rec : curve) {
        nlohmann::json j;
        j["iter"] = rec.iteration;
        j["pivot"] = rec.pivot;
        j["reward_mean"] = rec.reward_mean;
        j["reward_std"] = rec.reward_std;
        j["objective"] = rec.objective;
        j["ratio_mean"] = rec.ratio_mean;
        j["ratio_max"] = rec.ratio_max;
        j["clip_frac"] = rec.clip_fraction;
        j["tau"] = rec.tau_used;
        // wall time stays out so reruns are byte-identical
        os << j.dump() << "\n";
    }
}

}  // namespace arcopo
