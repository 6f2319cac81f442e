#pragma once

#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "arcopo/adapters.hpp"
#include "arcopo/model.hpp"
#include "arcopo/replay_entry.hpp"
#include "arcopo/rewards.hpp"
#include "arcopo/rng.hpp"

namespace arcopo {

struct CopoConfig {
    double clip_eps = 1e-4;
    double tau = 0.0;   // flow-matching surrogate temperature; 0 = resolve from data
    double tau0 = 0.0;  // x0-space surrogate temperature; 0 = resolve from data
    double tau_auto_scale = 1.0;  // multiplier on the data-resolved temperature
    double learning_rate = 1e-5;
    int group_size = 12;
    double sigma = 0.5;
    int anchor_batch = 4;
    int update_steps = 2;
    double degenerate_std_threshold = 1e-8;
    double grad_clip = 50.0;  // max gradient L2 norm per update step; 0 = unclipped
    int fm_distance_step = 0;  // 1-based sampler step for x_t distances; 0 = last step

    void validate() const;
};

/// Group-normalized advantages with population std; a group whose reward
/// std falls below `threshold` yields all zeros (a no-op update).
Vec group_advantages(std::span<const double> rewards, double threshold);

struct SurrogatePolicy {
    enum class Space { x_t, x0 };
    Vec probs;
    Vec distances;
    double tau = 0.0;
    Space space = Space::x0;
};

/// Flow-matching form: squared distances between candidate latents and
/// the current-policy anchor latent at one sampler step.
SurrogatePolicy surrogate_fm(std::span<const Vec> candidates_xt, const Vec& anchor_xt,
                             double tau);

/// Consistency-model form: squared distances between old-policy clean
/// predictions on the candidates and the current-policy prediction on
/// the anchor.
SurrogatePolicy surrogate_cm(std::span<const Vec> candidate_x0_old, const Vec& anchor_x0_current,
                             double tau0);

/// J = mean_i min(rho_i A_i, clip(rho_i, 1-eps, 1+eps) A_i),
/// rho_i = pi_new(i)/pi_old(i). Throws NumericError when any pi_old is 0.
double clipped_objective(std::span<const double> pi_new, std::span<const double> pi_old,
                         std::span<const double> advantages, double clip_eps);

/// What the optimizer updates: either the full parameter set or low-rank
/// adapter factors over a frozen base.
class Policy {
public:
    explicit Policy(ModelParams full);
    Policy(ModelParams base, LowRankAdapter adapter);

    const ModelParams& effective() const { return effective_; }
    bool trains_adapter() const { return adapter_.has_value(); }
    const LowRankAdapter& adapter() const;
    const ModelParams& base() const { return base_; }

    struct Staged {
        StagedModel model;
        std::vector<Tape::Id> trainables;  // leaves receiving gradients
    };
    Staged stage(Tape& tape) const;

    std::size_t trainable_count() const;
    Vec trainable_values() const;
    void set_trainable_values(const Vec& flat);
    /// values += step * grad, grad in trainable_values() order.
    void apply_flat_step(const Vec& grad, double step);

private:
    void refresh_effective();

    ModelParams base_;
    std::optional<LowRankAdapter> adapter_;
    ModelParams effective_;
};

struct UpdateStats {
    double objective = 0.0;      // mean J across update steps
    double ratio_mean = 1.0;
    double ratio_max = 1.0;
    double clip_fraction = 0.0;  // fraction of terms with a binding clip
    double grad_norm = 0.0;
    double tau_used = 0.0;
    int steps = 0;
    bool skipped_degenerate = false;
};

/// Value and trainable-parameter gradient of the group objective for a
/// fixed anchor set. Exposed so the finite-difference oracle can probe
/// the exact quantity the update ascends.
struct CopoObjective {
    double value = 0.0;
    Vec grad;                    // w.r.t. Policy trainables
    double ratio_mean = 1.0;
    double ratio_max = 1.0;
    double clip_fraction = 0.0;
};

CopoObjective eval_copo_objective(const Policy& policy, const ReplayEntry& entry,
                                  const CopoConfig& cfg, const SamplerConfig& sampler,
                                  std::span<const int> anchors, std::span<const double> taus,
                                  bool clipped);

/// Resolve the surrogate temperature for an entry: the configured value,
/// or tau_auto_scale times the mean pairwise candidate distance when the
/// config leaves it 0. The x0-space form resolves one value per
/// denoising step (distance scales shrink sharply along the schedule);
/// the x_t form uses its single configured step.
Vec resolve_temperatures(const ReplayEntry& entry, const CopoConfig& cfg,
                         const SamplerConfig& sampler);
double resolve_temperature(const ReplayEntry& entry, const CopoConfig& cfg,
                           const SamplerConfig& sampler);

/// Rescale to max_norm when the gradient exceeds it; 0 disables.
void clip_grad_norm(Vec& grad, double max_norm);

/// Anchor selection, symmetric sampling: anchor_batch distinct candidate
/// indices drawn without replacement.
std::vector<int> select_anchors(int group_size, int anchor_batch, RngStream stream);

/// Ascends the clipped objective for cfg.update_steps steps at
/// cfg.learning_rate; anchors are fixed per call. Groups with degenerate
/// reward std skip the update entirely. `clipped=false` drops the
/// min/clip pair (the off-policy ablation).
UpdateStats copo_update(Policy& policy, const ReplayEntry& entry, const CopoConfig& cfg,
                        const SamplerConfig& sampler, RngStream anchor_stream,
                        bool clipped = true);


/// SDE-style GRPO baseline: branches share the plan's initial noises and
/// draw independent solver noises; Gaussian transition log-probabilities
/// of those injections form the policy ratio. Consistency sampler only;
/// T=1 has an empty action space and is rejected.
UpdateStats sde_grpo_update(Policy& policy, const NoisePlan& plan, const PromptSpec& prompt,
                            const std::function<double(const SequenceLatents&)>& reward_fn,
                            const CopoConfig& cfg, const SamplerConfig& sampler, int L,
                            RngStream stream);

}  // namespace arcopo
