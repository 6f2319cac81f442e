#include "arcopo/copo.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

#include "arcopo/errors.hpp"
#include "arcopo/finite_diff.hpp"

namespace arcopo {

void CopoConfig::validate() const {
    if (!(clip_eps > 0.0)) throw std::invalid_argument("CopoConfig: clip_eps must be > 0");
    if (tau < 0.0 || tau0 < 0.0) throw std::invalid_argument("CopoConfig: temperatures must be >= 0");
    if (!(tau_auto_scale > 0.0)) throw std::invalid_argument("CopoConfig: tau_auto_scale must be > 0");
    if (group_size < 2) throw std::invalid_argument("CopoConfig: group_size must be >= 2");
    if (!(sigma >= 0.0 && sigma <= 1.0)) throw std::invalid_argument("CopoConfig: sigma in [0,1]");
    if (anchor_batch < 1) throw std::invalid_argument("CopoConfig: anchor_batch must be >= 1");
    if (update_steps < 0) throw std::invalid_argument("CopoConfig: update_steps must be >= 0");
    if (!(degenerate_std_threshold >= 0.0)) {
        throw std::invalid_argument("CopoConfig: degenerate_std_threshold must be >= 0");
    }
    if (fm_distance_step < 0) throw std::invalid_argument("CopoConfig: fm_distance_step must be >= 0");
    if (grad_clip < 0.0) throw std::invalid_argument("CopoConfig: grad_clip must be >= 0");
}

Vec group_advantages(std::span<const double> rewards, double threshold) {
    if (rewards.size() < 2) throw std::invalid_argument("group_advantages: need G >= 2 rewards");
    if (!all_finite(rewards)) throw std::invalid_argument("group_advantages: non-finite reward");
    const double r_mean = mean(rewards);
    const double r_std = pop_stddev(rewards);
    Vec adv(rewards.size(), 0.0);
    if (r_std < threshold) return adv;  // constant group: no preference signal
    for (std::size_t i = 0; i < rewards.size(); ++i) adv[i] = (rewards[i] - r_mean) / r_std;
    return adv;
}

namespace {

Vec candidate_distances(std::span<const Vec> candidates, const Vec& anchor) {
    if (candidates.empty()) throw std::invalid_argument("surrogate: empty candidate set");
    Vec d(candidates.size());
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        if (candidates[i].size() != anchor.size()) {
            throw std::invalid_argument("surrogate: candidate/anchor dimension mismatch");
        }
        d[i] = l2sq_diff(candidates[i], anchor);
    }
    return d;
}

}  // namespace

SurrogatePolicy surrogate_fm(std::span<const Vec> candidates_xt, const Vec& anchor_xt,
                             double tau) {
    SurrogatePolicy p;
    p.space = SurrogatePolicy::Space::x_t;
    p.tau = tau;
    p.distances = candidate_distances(candidates_xt, anchor_xt);
    p.probs = softmax_neg_scaled(p.distances, tau);
    return p;
}

SurrogatePolicy surrogate_cm(std::span<const Vec> candidate_x0_old, const Vec& anchor_x0_current,
                             double tau0) {
    SurrogatePolicy p;
    p.space = SurrogatePolicy::Space::x0;
    p.tau = tau0;
    p.distances = candidate_distances(candidate_x0_old, anchor_x0_current);
    p.probs = softmax_neg_scaled(p.distances, tau0);
    return p;
}

double clipped_objective(std::span<const double> pi_new, std::span<const double> pi_old,
                         std::span<const double> advantages, double clip_eps) {
    if (pi_new.size() != pi_old.size() || pi_new.size() != advantages.size() || pi_new.empty()) {
        throw std::invalid_argument("clipped_objective: length mismatch");
    }
    if (!(clip_eps > 0.0)) throw std::invalid_argument("clipped_objective: clip_eps must be > 0");
    double acc = 0.0;
    for (std::size_t i = 0; i < pi_new.size(); ++i) {
        if (pi_old[i] == 0.0) throw NumericError("clipped_objective: zero old-policy probability");
        const double rho = pi_new[i] / pi_old[i];
        const double clipped = std::clamp(rho, 1.0 - clip_eps, 1.0 + clip_eps);
        acc += std::min(rho * advantages[i], clipped * advantages[i]);
    }
    return acc / static_cast<double>(pi_new.size());
}

// --- Policy ---

Policy::Policy(ModelParams full) : base_(std::move(full)) { refresh_effective(); }

Policy::Policy(ModelParams base, LowRankAdapter adapter)
    : base_(std::move(base)), adapter_(std::move(adapter)) {
    if (!(adapter_->dims == base_.dims)) {
        throw std::invalid_argument("Policy: adapter/base shape mismatch");
    }
    refresh_effective();
}

const LowRankAdapter& Policy::adapter() const {
    if (!adapter_) throw std::invalid_argument("Policy: no adapter attached");
    return *adapter_;
}

void Policy::refresh_effective() {
    if (adapter_) {
        const std::pair<const LowRankAdapter*, double> merge[] = {{&*adapter_, 1.0}};
        effective_ = effective_params(base_, merge);
    } else {
        effective_ = base_;
    }
}

Policy::Staged Policy::stage(Tape& tape) const {
    Staged s;
    if (!adapter_) {
        s.model = stage_params(tape, base_, true);
        s.trainables = {s.model.w1, s.model.b1, s.model.w2, s.model.b2,
                        s.model.w3, s.model.b3, s.model.we, s.model.be};
        return s;
    }
    const LowRankAdapter& a = *adapter_;
    const double factor_scale = a.alpha / a.rank;
    s.model.dims = base_.dims;
    const struct {
        const Matrix* w;
        const LowRankAdapter::Factor* f;
        Tape::Id* out;
    } mats[] = {{&base_.w1, &a.w1, &s.model.w1},
                {&base_.w2, &a.w2, &s.model.w2},
                {&base_.w3, &a.w3, &s.model.w3},
                {&base_.we, &a.we, &s.model.we}};
    for (const auto& m : mats) {
        const Tape::Id u = tape.leaf(m.f->u.a, true);
        const Tape::Id v = tape.leaf(m.f->v.a, true);
        const Tape::Id delta =
            tape.scale(tape.matmul(u, v, m.w->rows, a.rank, m.w->cols), factor_scale);
        *m.out = tape.add(tape.constant(m.w->a), delta);
        s.trainables.push_back(u);
        s.trainables.push_back(v);
    }
    s.model.b1 = tape.constant(base_.b1);
    s.model.b2 = tape.constant(base_.b2);
    s.model.b3 = tape.constant(base_.b3);
    s.model.be = tape.constant(base_.be);
    return s;
}

std::size_t Policy::trainable_count() const {
    return adapter_ ? adapter_->factor_count() : base_.param_count();
}

Vec Policy::trainable_values() const {
    return adapter_ ? adapter_->flatten_factors() : base_.flatten();
}

void Policy::set_trainable_values(const Vec& flat) {
    if (adapter_) {
        adapter_->set_factors(flat);
    } else {
        base_ = ModelParams::unflatten(base_.dims, flat);
    }
    refresh_effective();
}

void Policy::apply_flat_step(const Vec& grad, double step) {
    if (grad.size() != trainable_count()) {
        throw std::invalid_argument("Policy::apply_flat_step: gradient size mismatch");
    }
    Vec values = trainable_values();
    axpy(step, grad, values);
    set_trainable_values(values);
}

// --- objective evaluation ---

namespace {

struct TermStats {
    double ratio_sum = 0.0;
    double ratio_max = 0.0;
    int clipped = 0;
    int terms = 0;
};

// One group sub-objective on the tape: distances from constant candidate
// vectors to the theta-dependent anchor vector, surrogate softmax, ratio
// against the fixed old-policy probabilities, then the (optionally
// clipped) advantage-weighted terms.
Tape::Id group_objective_node(Tape& tape, std::span<const Vec> candidates, Tape::Id anchor,
                              const Vec& pi_old, const Vec& advantages, double tau,
                              double clip_eps, bool clipped, TermStats& stats) {
    std::vector<Tape::Id> dist_nodes;
    dist_nodes.reserve(candidates.size());
    for (const Vec& c : candidates) {
        dist_nodes.push_back(tape.sumsq(tape.sub(tape.constant(c), anchor)));
    }
    const Tape::Id d = tape.concat(dist_nodes);
    const Tape::Id pi_new = tape.softmax_neg_scaled_(d, tau);
    for (double p : pi_old) {
        if (p == 0.0) throw NumericError("copo objective: zero old-policy probability");
    }
    const Tape::Id ratio = tape.div_const(pi_new, pi_old);

    const Vec& rho = tape.value(ratio);
    for (std::size_t i = 0; i < rho.size(); ++i) {
        stats.ratio_sum += rho[i];
        stats.ratio_max = std::max(stats.ratio_max, rho[i]);
        const bool binding = (advantages[i] > 0.0 && rho[i] > 1.0 + clip_eps) ||
                             (advantages[i] < 0.0 && rho[i] < 1.0 - clip_eps);
        stats.clipped += binding ? 1 : 0;
        stats.terms += 1;
    }

    const Tape::Id weighted = tape.mul_const(ratio, advantages);
    if (!clipped) return tape.mean(weighted);
    const Tape::Id clamped =
        tape.mul_const(tape.clamp(ratio, 1.0 - clip_eps, 1.0 + clip_eps), advantages);
    return tape.mean(tape.minimum(weighted, clamped));
}

int resolve_fm_step(const CopoConfig& cfg, int T) {
    const int step = cfg.fm_distance_step == 0 ? T : cfg.fm_distance_step;
    if (step < 1 || step > T) {
        throw std::invalid_argument("CopoConfig: fm_distance_step out of range");
    }
    return step - 1;  // 0-based index into the trajectory records
}

// Anchor latent x_t at the given step index under the staged parameters,
// replaying the flow sampler from the anchor's initial noise. Matches the
// plain sampler's arithmetic exactly.
Tape::Id tape_flow_state(Tape& tape, const StagedModel& m, const Vec& init_noise, const Vec& h,
                         const SamplerConfig& sampler, int step_index) {
    const Tape::Id h_node = tape.constant(h);
    Tape::Id x = tape.constant(init_noise);
    for (int k = 0; k < step_index; ++k) {
        const double t = sampler.timesteps[static_cast<std::size_t>(k)];
        const double t_next = sampler.timesteps[static_cast<std::size_t>(k + 1)];
        const Tape::Id x0 = tape_predict_x0(tape, m, x, h_node, t);
        const Tape::Id v = tape.scale(tape.sub(x, x0), 1.0 / t);
        x = tape.add(x, tape.scale(v, t_next - t));
    }
    return x;
}

void check_entry(const ReplayEntry& entry, const ModelDims& dims, const SamplerConfig& sampler) {
    if (entry.group_size() < 2) throw std::invalid_argument("copo: group needs G >= 2");
    if (static_cast<int>(entry.context.h.size()) != dims.context_dim) {
        throw std::invalid_argument("copo: entry context dimension mismatch");
    }
    if (entry.rewards.size() != entry.candidates.size() ||
        entry.member_noises.size() != entry.candidates.size()) {
        throw std::invalid_argument("copo: inconsistent entry");
    }
    for (const auto& c : entry.candidates) {
        if (static_cast<int>(c.steps.size()) != sampler.steps()) {
            throw std::invalid_argument("copo: trajectory/sampler step mismatch");
        }
        for (const auto& s : c.steps) {
            if (static_cast<int>(s.x0_pred.size()) != dims.chunk_dim) {
                throw std::invalid_argument("copo: entry chunk dimension mismatch");
            }
        }
    }
}

}  // namespace

namespace {

double mean_pairwise_x0_distance(const ReplayEntry& entry, int step) {
    const int G = entry.group_size();
    double acc = 0.0;
    int n = 0;
    for (int i = 0; i < G; ++i) {
        for (int j = i + 1; j < G; ++j) {
            acc += l2sq_diff(entry.candidates[static_cast<std::size_t>(i)]
                                 .steps[static_cast<std::size_t>(step)]
                                 .x0_pred,
                             entry.candidates[static_cast<std::size_t>(j)]
                                 .steps[static_cast<std::size_t>(step)]
                                 .x0_pred);
            ++n;
        }
    }
    return n > 0 ? acc / n : 0.0;
}

}  // namespace

Vec resolve_temperatures(const ReplayEntry& entry, const CopoConfig& cfg,
                         const SamplerConfig& sampler) {
    const bool fm = sampler.kind == SamplerKind::flow_ode;
    const double configured = fm ? cfg.tau : cfg.tau0;
    const int T = fm ? 1 : sampler.steps();
    Vec taus(static_cast<std::size_t>(T), configured);
    if (configured > 0.0) return taus;

    if (fm) {
        const int k = resolve_fm_step(cfg, sampler.steps());
        const int G = entry.group_size();
        double acc = 0.0;
        int n = 0;
        for (int i = 0; i < G; ++i) {
            for (int j = i + 1; j < G; ++j) {
                acc += l2sq_diff(entry.candidates[static_cast<std::size_t>(i)]
                                     .steps[static_cast<std::size_t>(k)]
                                     .x_t,
                                 entry.candidates[static_cast<std::size_t>(j)]
                                     .steps[static_cast<std::size_t>(k)]
                                     .x_t);
                ++n;
            }
        }
        const double tau = cfg.tau_auto_scale * (n > 0 ? acc / n : 0.0);
        taus[0] = tau > 1e-12 ? tau : 1.0;
        return taus;
    }
    for (int k = 0; k < T; ++k) {
        const double tau = cfg.tau_auto_scale * mean_pairwise_x0_distance(entry, k);
        taus[static_cast<std::size_t>(k)] = tau > 1e-12 ? tau : 1.0;
    }
    return taus;
}

double resolve_temperature(const ReplayEntry& entry, const CopoConfig& cfg,
                           const SamplerConfig& sampler) {
    return resolve_temperatures(entry, cfg, sampler)[0];
}

void clip_grad_norm(Vec& grad, double max_norm) {
    if (max_norm <= 0.0) return;
    const double norm = l2(grad);
    if (norm > max_norm) {
        const double s = max_norm / norm;
        for (double& g : grad) g *= s;
    }
}

std::vector<int> select_anchors(int group_size, int anchor_batch, RngStream stream) {
    if (group_size < 1) throw std::invalid_argument("select_anchors: empty group");
    const int take = std::min(anchor_batch, group_size);
    std::vector<int> pool(static_cast<std::size_t>(group_size));
    std::iota(pool.begin(), pool.end(), 0);
    // partial Fisher-Yates
    for (int i = 0; i < take; ++i) {
        const std::size_t j =
            static_cast<std::size_t>(i) +
            stream.uniform_index(static_cast<std::size_t>(group_size - i));
        std::swap(pool[static_cast<std::size_t>(i)], pool[j]);
    }
    pool.resize(static_cast<std::size_t>(take));
    return pool;
}

CopoObjective eval_copo_objective(const Policy& policy, const ReplayEntry& entry,
                                  const CopoConfig& cfg, const SamplerConfig& sampler,
                                  std::span<const int> anchors, std::span<const double> taus,
                                  bool clipped) {
    cfg.validate();
    sampler.validate();
    const ModelDims& dims = policy.effective().dims;
    check_entry(entry, dims, sampler);
    if (anchors.empty()) throw std::invalid_argument("eval_copo_objective: no anchors");
    const std::size_t want_taus =
        sampler.kind == SamplerKind::consistency ? static_cast<std::size_t>(sampler.steps()) : 1;
    if (taus.size() != want_taus) {
        throw std::invalid_argument("eval_copo_objective: temperature count mismatch");
    }

    const int G = entry.group_size();
    const Vec advantages = group_advantages(entry.rewards, cfg.degenerate_std_threshold);

    Tape tape;
    const Policy::Staged staged = policy.stage(tape);
    const Tape::Id h_node = tape.constant(entry.context.h);

    TermStats stats;
    std::vector<Tape::Id> parts;
    if (sampler.kind == SamplerKind::consistency) {
        // x0-space surrogate at every stored denoising step.
        for (int a : anchors) {
            if (a < 0 || a >= G) throw std::invalid_argument("eval_copo_objective: bad anchor");
            for (int k = 0; k < sampler.steps(); ++k) {
                const double tau = taus[static_cast<std::size_t>(k)];
                const StepRecord& rec = entry.candidates[static_cast<std::size_t>(a)]
                                            .steps[static_cast<std::size_t>(k)];
                const Tape::Id anchor_pred =
                    tape_predict_x0(tape, staged.model, tape.constant(rec.x_t), h_node, rec.t);
                std::vector<Vec> cands;
                cands.reserve(static_cast<std::size_t>(G));
                Vec d_old(static_cast<std::size_t>(G));
                for (int i = 0; i < G; ++i) {
                    const Vec& pred_i = entry.candidates[static_cast<std::size_t>(i)]
                                            .steps[static_cast<std::size_t>(k)]
                                            .x0_pred;
                    cands.push_back(pred_i);
                    d_old[static_cast<std::size_t>(i)] = l2sq_diff(pred_i, rec.x0_pred);
                }
                const Vec pi_old = softmax_neg_scaled(d_old, tau);
                parts.push_back(group_objective_node(tape, cands, anchor_pred, pi_old,
                                                     advantages, tau, cfg.clip_eps, clipped,
                                                     stats));
            }
        }
    } else {
        // x_t-space surrogate at the configured intermediate step.
        const int k = resolve_fm_step(cfg, sampler.steps());
        const double tau = taus[0];
        for (int a : anchors) {
            if (a < 0 || a >= G) throw std::invalid_argument("eval_copo_objective: bad anchor");
            const Tape::Id anchor_xt =
                tape_flow_state(tape, staged.model, entry.member_noises[static_cast<std::size_t>(a)],
                                entry.context.h, sampler, k);
            std::vector<Vec> cands;
            cands.reserve(static_cast<std::size_t>(G));
            Vec d_old(static_cast<std::size_t>(G));
            const Vec& anchor_old_xt =
                entry.candidates[static_cast<std::size_t>(a)].steps[static_cast<std::size_t>(k)].x_t;
            for (int i = 0; i < G; ++i) {
                const Vec& xt_i =
                    entry.candidates[static_cast<std::size_t>(i)].steps[static_cast<std::size_t>(k)].x_t;
                cands.push_back(xt_i);
                d_old[static_cast<std::size_t>(i)] = l2sq_diff(xt_i, anchor_old_xt);
            }
            const Vec pi_old = softmax_neg_scaled(d_old, tau);
            parts.push_back(group_objective_node(tape, cands, anchor_xt, pi_old, advantages,
                                                 tau, cfg.clip_eps, clipped, stats));
        }
    }

    const Tape::Id root = tape.mean(tape.concat(parts));
    CopoObjective out;
    out.value = tape.value(root)[0];
    if (!std::isfinite(out.value)) throw NumericError("copo objective diverged");
    tape.backward(root);
    for (Tape::Id id : staged.trainables) {
        const Vec& g = tape.grad(id);
        out.grad.insert(out.grad.end(), g.begin(), g.end());
    }
    require_finite(out.grad, "copo gradient");
    out.ratio_mean = stats.terms > 0 ? stats.ratio_sum / stats.terms : 1.0;
    out.ratio_max = stats.terms > 0 ? stats.ratio_max : 1.0;
    out.clip_fraction = stats.terms > 0 ? static_cast<double>(stats.clipped) / stats.terms : 0.0;
    return out;
}

UpdateStats copo_update(Policy& policy, const ReplayEntry& entry, const CopoConfig& cfg,
                        const SamplerConfig& sampler, RngStream anchor_stream, bool clipped) {
    cfg.validate();
    const Vec advantages = group_advantages(entry.rewards, cfg.degenerate_std_threshold);
    UpdateStats stats;
    const Vec taus = resolve_temperatures(entry, cfg, sampler);
    stats.tau_used = taus[0];
    const bool all_zero =
        std::all_of(advantages.begin(), advantages.end(), [](double a) { return a == 0.0; });
    if (all_zero || cfg.update_steps == 0) {
        // No preference signal: leave the parameters bit-unchanged.
        stats.skipped_degenerate = all_zero;
        return stats;
    }

    const std::vector<int> anchors =
        select_anchors(entry.group_size(), cfg.anchor_batch, anchor_stream);

    double obj_sum = 0.0, ratio_sum = 0.0, clip_sum = 0.0;
    for (int step = 0; step < cfg.update_steps; ++step) {
        CopoObjective obj =
            eval_copo_objective(policy, entry, cfg, sampler, anchors, taus, clipped);
        clip_grad_norm(obj.grad, cfg.grad_clip);
        policy.apply_flat_step(obj.grad, cfg.learning_rate);  // ascent
        obj_sum += obj.value;
        ratio_sum += obj.ratio_mean;
        clip_sum += obj.clip_fraction;
        stats.ratio_max = std::max(stats.ratio_max, obj.ratio_max);
        stats.grad_norm = l2(obj.grad);
        stats.steps += 1;
    }
    stats.objective = obj_sum / cfg.update_steps;
    stats.ratio_mean = ratio_sum / cfg.update_steps;
    stats.clip_fraction = clip_sum / cfg.update_steps;
    return stats;
}

UpdateStats sde_grpo_update(Policy& policy, const NoisePlan& plan, const PromptSpec& prompt,
                            const std::function<double(const SequenceLatents&)>& reward_fn,
                            const CopoConfig& cfg, const SamplerConfig& sampler, int L,
                            RngStream stream) {
    cfg.validate();
    sampler.validate();
    if (sampler.kind != SamplerKind::consistency) {
        throw std::invalid_argument("sde_grpo_update: consistency sampler required");
    }
    const int T = sampler.steps();
    if (T < 2) throw std::invalid_argument("sde_grpo_update: T=1 leaves no solver-noise action space");

    const ModelParams old_params = policy.effective();  // rollout snapshot
    const int G = cfg.group_size;
    const int d = old_params.dims.chunk_dim;

    // Branch rollouts: shared initial noises, fresh solver noises.
    std::vector<SequenceLatents> branches;
    Vec rewards(static_cast<std::size_t>(G));
    branches.reserve(static_cast<std::size_t>(G));
    for (int i = 0; i < G; ++i) {
        NoisePlan p = plan;
        RngStream bs = stream.child("branch." + std::to_string(i));
        for (int q = 0; q < L; ++q) {
            for (int k = 0; k + 1 < T; ++k) {
                RngStream s =
                    bs.child("solver." + std::to_string(q) + "." + std::to_string(k));
                p.solver_noises[static_cast<std::size_t>(q)][static_cast<std::size_t>(k)] =
                    s.gaussian(static_cast<std::size_t>(d));
            }
        }
        SequenceLatents seq = rollout_sequence(old_params, prompt, p, sampler, L);
        rewards[static_cast<std::size_t>(i)] = reward_fn(seq);
        branches.push_back(std::move(seq));
    }

    UpdateStats stats;
    stats.tau_used = 0.0;
    const Vec advantages = group_advantages(rewards, cfg.degenerate_std_threshold);
    const bool all_zero =
        std::all_of(advantages.begin(), advantages.end(), [](double a) { return a == 0.0; });
    if (all_zero || cfg.update_steps == 0) {
        stats.skipped_degenerate = all_zero;
        return stats;
    }

    // Old-policy transition log-probabilities from the stored rollouts
    // (additive constants cancel in the ratio).
    Vec logp_old(static_cast<std::size_t>(G), 0.0);
    for (int i = 0; i < G; ++i) {
        double acc = 0.0;
        for (int q = 0; q < L; ++q) {
            const ChunkTrajectory& traj = branches[static_cast<std::size_t>(i)]
                                              .chunks[static_cast<std::size_t>(q)];
            for (int k = 0; k + 1 < T; ++k) {
                const double t_next = sampler.timesteps[static_cast<std::size_t>(k + 1)];
                acc += l2sq_diff(traj.steps[static_cast<std::size_t>(k + 1)].x_t,
                                 traj.steps[static_cast<std::size_t>(k)].x0_pred) *
                       (-1.0 / (2.0 * t_next * t_next));
            }
        }
        logp_old[static_cast<std::size_t>(i)] = acc;
    }

    double obj_sum = 0.0, ratio_sum = 0.0, clip_sum = 0.0;
    for (int step = 0; step < cfg.update_steps; ++step) {
        Tape tape;
        const Policy::Staged staged = policy.stage(tape);
        std::vector<Tape::Id> ratio_nodes;
        ratio_nodes.reserve(static_cast<std::size_t>(G));
        for (int i = 0; i < G; ++i) {
            const SequenceLatents& seq = branches[static_cast<std::size_t>(i)];
            Tape::Id logp = tape.scalar_constant(0.0);
            for (int q = 0; q < L; ++q) {
                const ChunkTrajectory& traj = seq.chunks[static_cast<std::size_t>(q)];
                const Tape::Id h_node =
                    tape.constant(seq.entry_contexts[static_cast<std::size_t>(q)]);
                for (int k = 0; k + 1 < T; ++k) {
                    const StepRecord& rec = traj.steps[static_cast<std::size_t>(k)];
                    const double t_next = sampler.timesteps[static_cast<std::size_t>(k + 1)];
                    const Tape::Id pred = tape_predict_x0(tape, staged.model,
                                                          tape.constant(rec.x_t), h_node, rec.t);
                    const Tape::Id diff = tape.sub(
                        tape.constant(traj.steps[static_cast<std::size_t>(k + 1)].x_t), pred);
                    logp = tape.add(
                        logp, tape.scale(tape.sumsq(diff), -1.0 / (2.0 * t_next * t_next)));
                }
            }
            ratio_nodes.push_back(tape.exp_(
                tape.sub(logp, tape.scalar_constant(logp_old[static_cast<std::size_t>(i)]))));
        }
        const Tape::Id ratio = tape.concat(ratio_nodes);
        const Vec& rho = tape.value(ratio);
        for (std::size_t i = 0; i < rho.size(); ++i) {
            ratio_sum += rho[i] / G;
            stats.ratio_max = std::max(stats.ratio_max, rho[i]);
            const bool binding = (advantages[i] > 0.0 && rho[i] > 1.0 + cfg.clip_eps) ||
                                 (advantages[i] < 0.0 && rho[i] < 1.0 - cfg.clip_eps);
            clip_sum += binding ? 1.0 / G : 0.0;
        }
        const Tape::Id weighted = tape.mul_const(ratio, advantages);
        const Tape::Id clamped = tape.mul_const(
            tape.clamp(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps), advantages);
        const Tape::Id root = tape.mean(tape.minimum(weighted, clamped));
        const double value = tape.value(root)[0];
        if (!std::isfinite(value)) throw NumericError("sde_grpo objective diverged");
        tape.backward(root);
        Vec grad;
        for (Tape::Id id : staged.trainables) {
            const Vec& g = tape.grad(id);
            grad.insert(grad.end(), g.begin(), g.end());
        }
        require_finite(grad, "sde_grpo gradient");
        clip_grad_norm(grad, cfg.grad_clip);
        policy.apply_flat_step(grad, cfg.learning_rate);
        obj_sum += value;
        stats.grad_norm = l2(grad);
        stats.steps += 1;
    }
    stats.objective = obj_sum / cfg.update_steps;
    stats.ratio_mean = ratio_sum / cfg.update_steps;
    stats.clip_fraction = clip_sum / cfg.update_steps;
    return stats;
}

}  // namespace arcopo
