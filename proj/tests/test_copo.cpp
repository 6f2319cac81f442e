#include <doctest.h>

#include <cmath>

#include "arcopo/copo.hpp"
#include "arcopo/errors.hpp"
#include "arcopo/finite_diff.hpp"
#include "arcopo/rollout.hpp"

using namespace arcopo;

namespace {

ModelDims micro_dims() { return ModelDims{1, 1, 2, 2}; }  // 17 trainable params

ModelDims tiny_dims() { return ModelDims{4, 6, 8, 8}; }

SamplerConfig cm_config() { return SamplerConfig{SamplerKind::consistency, {1.0, 0.6, 0.3}}; }
SamplerConfig flow_config() { return SamplerConfig{SamplerKind::flow_ode, {1.0, 0.6, 0.3}}; }

CopoConfig test_cfg() {
    CopoConfig cfg;
    cfg.group_size = 4;
    cfg.anchor_batch = 2;
    return cfg;
}

// A real fork-group entry produced by the rollout path.
ReplayEntry make_entry(const ModelParams& params, const SamplerConfig& sampler,
                       const CopoConfig& cfg, std::uint64_t seed, int L = 3) {
    const PromptSpec prompt = PromptSpec::from_seed(seed + 1, params.dims.chunk_dim);
    RewardSpec reward;
    reward.kind = RewardKind::align;
    return arcopo_iteration(params, prompt, reward, cfg, sampler, L,
                            RngStream(seed).child("iter.0"));
}

}  // namespace

TEST_CASE("group advantages") {
    SUBCASE("constant rewards yield exact zeros") {
        const Vec a = group_advantages(Vec{2.0, 2.0, 2.0}, 1e-8);
        CHECK(a == Vec{0.0, 0.0, 0.0});
    }
    SUBCASE("rewards [0,1] map to [-1,1]") {
        const Vec a = group_advantages(Vec{0.0, 1.0}, 1e-8);
        CHECK(a[0] == doctest::Approx(-1.0));
        CHECK(a[1] == doctest::Approx(1.0));
    }
    SUBCASE("rewards [2,4,6] map to +-sqrt(3/2)") {
        const Vec a = group_advantages(Vec{2.0, 4.0, 6.0}, 1e-8);
        CHECK(a[0] == doctest::Approx(-1.224744871391589).epsilon(1e-12));
        CHECK(a[1] == doctest::Approx(0.0));
        CHECK(a[2] == doctest::Approx(1.224744871391589).epsilon(1e-12));
    }
    SUBCASE("normalization contract on random groups") {
        RngStream s = RngStream(4).child("adv");
        for (int rep = 0; rep < 20; ++rep) {
            Vec r = s.gaussian(12);
            const Vec a = group_advantages(r, 1e-8);
            CHECK(std::abs(mean(a)) < 1e-10);
            CHECK(std::abs(pop_stddev(a) - 1.0) < 1e-10);
        }
    }
    SUBCASE("shift invariance is exact when the additions are exact") {
        // binary-fraction rewards + power-of-two shift: r_i + c rounds
        // nowhere, so the normalization cancels the shift bit-for-bit
        const Vec r{0.25, -1.5, 4.0, 0.875};
        Vec shifted = r;
        for (double& x : shifted) x += 128.0;
        CHECK(group_advantages(r, 1e-8) == group_advantages(shifted, 1e-8));
    }
    SUBCASE("shift invariance holds tightly for generic shifts") {
        const Vec r{0.3, -1.2, 4.0, 0.9};
        Vec shifted = r;
        for (double& x : shifted) x += 100.0;
        const Vec a = group_advantages(r, 1e-8);
        const Vec b = group_advantages(shifted, 1e-8);
        for (std::size_t i = 0; i < a.size(); ++i) {
            CHECK(b[i] == doctest::Approx(a[i]).epsilon(1e-12));
        }
    }
    SUBCASE("G < 2 is rejected") {
        CHECK_THROWS_AS(group_advantages(Vec{1.0}, 1e-8), std::invalid_argument);
    }
}

TEST_CASE("surrogate policies") {
    SUBCASE("equidistant candidates give uniform probabilities") {
        const std::vector<Vec> cands{Vec{1.0, 0.0}, Vec{-1.0, 0.0}, Vec{0.0, 1.0}};
        const SurrogatePolicy p = surrogate_fm(cands, Vec{0.0, 0.0}, 0.5);
        for (double x : p.probs) CHECK(x == doctest::Approx(1.0 / 3.0));
    }
    SUBCASE("anchor on a candidate dominates") {
        const std::vector<Vec> cands{Vec{0.0, 0.0}, Vec{5.0, 5.0}, Vec{-5.0, 4.0}};
        const SurrogatePolicy p = surrogate_fm(cands, Vec{0.0, 0.0}, 1.0);
        CHECK(p.probs[0] > 0.99);
    }
    SUBCASE("distances [0, tau ln2, tau ln2] give [0.5, 0.25, 0.25]") {
        const double tau = 0.8;
        const double r = std::sqrt(tau * std::log(2.0));
        const std::vector<Vec> cands{Vec{0.0}, Vec{r}, Vec{-r}};
        const SurrogatePolicy p = surrogate_fm(cands, Vec{0.0}, tau);
        CHECK(p.probs[0] == doctest::Approx(0.5).epsilon(1e-12));
        CHECK(p.probs[1] == doctest::Approx(0.25).epsilon(1e-12));
        CHECK(p.probs[2] == doctest::Approx(0.25).epsilon(1e-12));
    }
    SUBCASE("temperature-scale invariance of the ranking") {
        const Vec d{0.1, 2.3, 0.7};
        // power-of-two scaling is exact in floating point
        const Vec p1 = softmax_neg_scaled(d, 0.5);
        Vec d2 = d;
        for (double& x : d2) x *= 2.0;
        const Vec p2 = softmax_neg_scaled(d2, 1.0);
        CHECK(p1 == p2);
        // generic positive factor within tolerance
        Vec d3 = d;
        for (double& x : d3) x *= 1.7;
        const Vec p3 = softmax_neg_scaled(d3, 0.5 * 1.7);
        for (std::size_t i = 0; i < p1.size(); ++i) {
            CHECK(p3[i] == doctest::Approx(p1[i]).epsilon(1e-12));
        }
    }
    SUBCASE("dimension mismatch is rejected") {
        const std::vector<Vec> cands{Vec{1.0, 0.0}};
        CHECK_THROWS_AS(surrogate_fm(cands, Vec{0.0}, 1.0), std::invalid_argument);
    }
    SUBCASE("cm variant: anchor equal to a candidate's input under theta_old") {
        const ModelParams params =
            ModelParams::random_init(tiny_dims(), RngStream(70).child("init"));
        const PromptSpec prompt = PromptSpec::from_seed(71, 4);
        const ContextCache ctx = initial_context(prompt, params.dims);
        RngStream s = RngStream(72).child("x");
        std::vector<Vec> old_preds;
        for (int i = 0; i < 4; ++i) {
            old_preds.push_back(predict_x0(params, s.gaussian(4), ctx, 0.6));
        }
        // theta = theta_old and anchor input = candidate 2's input
        const SurrogatePolicy p = surrogate_cm(old_preds, old_preds[2], 1.0);
        CHECK(p.distances[2] == 0.0);
        for (int i = 0; i < 4; ++i) {
            if (i != 2) CHECK(p.probs[2] > p.probs[i]);
        }
        // identical candidate predictions give uniform probabilities
        const std::vector<Vec> same(4, old_preds[0]);
        const SurrogatePolicy u = surrogate_cm(same, old_preds[1], 1.0);
        for (double x : u.probs) CHECK(x == doctest::Approx(0.25));
    }
}

TEST_CASE("surrogate_cm probabilities move smoothly with the current parameters") {
    const ModelParams params = ModelParams::random_init(tiny_dims(), RngStream(80).child("init"));
    const PromptSpec prompt = PromptSpec::from_seed(81, 4);
    const ContextCache ctx = initial_context(prompt, params.dims);
    RngStream s = RngStream(82).child("x");
    const Vec anchor_input = s.gaussian(4);
    std::vector<Vec> old_preds;
    for (int i = 0; i < 3; ++i) old_preds.push_back(predict_x0(params, s.gaussian(4), ctx, 0.6));

    // directional derivative of probs[0] w.r.t. one weight, tape vs FD
    auto prob0 = [&](const ModelParams& theta) {
        const Vec anchor_pred = predict_x0(theta, anchor_input, ctx, 0.6);
        return surrogate_cm(old_preds, anchor_pred, 1.0).probs[0];
    };
    Tape tape;
    const StagedModel m = stage_params(tape, params, true);
    const Tape::Id pred =
        tape_predict_x0(tape, m, tape.constant(anchor_input), tape.constant(ctx.h), 0.6);
    std::vector<Tape::Id> dist_nodes;
    for (const Vec& c : old_preds) dist_nodes.push_back(tape.sumsq(tape.sub(tape.constant(c), pred)));
    const Tape::Id probs = tape.softmax_neg_scaled_(tape.concat(dist_nodes), 1.0);
    const Tape::Id p0 = tape.mean(tape.mul_const(probs, Vec{3.0, 0.0, 0.0}));
    tape.backward(p0);
    const double dw = tape.grad(m.w3)[7];

    const double h = 1e-6;
    ModelParams up = params, down = params;
    up.w3.a[7] += h;
    down.w3.a[7] -= h;
    const double fd = (prob0(up) - prob0(down)) / (2.0 * h);
    CHECK(rel_error(dw, fd, 1e-10) < 1e-3);
}

TEST_CASE("clipped objective hand cases") {
    SUBCASE("identical policies score the mean advantage") {
        const Vec pi{0.2, 0.3, 0.5};
        const Vec adv = group_advantages(Vec{1.0, 2.0, 3.0}, 1e-8);
        CHECK(clipped_objective(pi, pi, adv, 1e-4) == doctest::Approx(0.0).epsilon(1e-12));
    }
    SUBCASE("positive advantage clips from above") {
        // per-term check via a 2-term group holding the other ratio at 1
        const Vec pi_old{0.4, 0.6};
        const Vec pi_new{0.6, 0.6};  // rho = [1.5, 1.0]
        const Vec adv{1.0, 0.0};
        const double j = clipped_objective(pi_new, pi_old, adv, 1e-4);
        CHECK(j == doctest::Approx(1.0001 / 2.0).epsilon(1e-12));
    }
    SUBCASE("negative advantage clips from below") {
        const Vec pi_old{0.4, 0.6};
        const Vec pi_new{0.2, 0.6};  // rho = [0.5, 1.0]
        const Vec adv{-1.0, 0.0};
        const double j = clipped_objective(pi_new, pi_old, adv, 1e-4);
        CHECK(j == doctest::Approx(-0.9999 / 2.0).epsilon(1e-12));
    }
    SUBCASE("zero old probability is a numeric failure") {
        CHECK_THROWS_AS(clipped_objective(Vec{0.5, 0.5}, Vec{1.0, 0.0}, Vec{1.0, -1.0}, 1e-4),
                        NumericError);
    }
}

TEST_CASE("clip trust region zeroes the gradient exactly") {
    // d J / d pi_new(i) == 0 whenever (A>0 and rho>1+eps) or (A<0 and rho<1-eps)
    const double eps = 1e-4;
    const Vec pi_old{0.25, 0.25, 0.25, 0.25};
    const Vec pi_new{0.30, 0.20, 0.2501, 0.2499};  // rho: 1.2, 0.8, ~1.0004, ~0.9996
    const Vec adv{1.0, -1.0, -1.0, 1.0};

    Tape t;
    const Tape::Id pn = t.leaf(pi_new, true);
    const Tape::Id ratio = t.div_const(pn, pi_old);
    const Tape::Id weighted = t.mul_const(ratio, adv);
    const Tape::Id clamped = t.mul_const(t.clamp(ratio, 1.0 - eps, 1.0 + eps), adv);
    const Tape::Id j = t.mean(t.minimum(weighted, clamped));
    t.backward(j);
    const Vec& g = t.grad(pn);
    CHECK(g[0] == 0.0);  // A>0, rho>1+eps
    CHECK(g[1] == 0.0);  // A<0, rho<1-eps
    CHECK(g[2] != 0.0);  // A<0, rho>1-eps: active
    CHECK(g[3] != 0.0);  // A>0, rho<1+eps: active
    CHECK(t.value(j)[0] ==
          doctest::Approx(clipped_objective(pi_new, pi_old, adv, eps)).epsilon(1e-15));
}

TEST_CASE("copo_update basics on a real fork group") {
    const CopoConfig cfg = test_cfg();
    const SamplerConfig sampler = cm_config();
    const ModelParams params = ModelParams::random_init(tiny_dims(), RngStream(90).child("init"));

    SUBCASE("sigma=0 fork gives zero advantages and a bit-identical policy") {
        CopoConfig frozen = cfg;
        frozen.sigma = 0.0;
        const ReplayEntry entry = make_entry(params, sampler, frozen, 91);
        const Vec adv = group_advantages(entry.rewards, frozen.degenerate_std_threshold);
        CHECK(adv == Vec(adv.size(), 0.0));
        Policy policy(params);
        const Vec before = policy.trainable_values();
        const UpdateStats stats =
            copo_update(policy, entry, frozen, sampler, RngStream(92).child("anchors"));
        CHECK(stats.skipped_degenerate);
        CHECK(policy.trainable_values() == before);
    }
    SUBCASE("first update step sees unit ratios and no clipping") {
        CopoConfig one_step = cfg;
        one_step.update_steps = 1;
        const ReplayEntry entry = make_entry(params, sampler, one_step, 93);
        Policy policy(params);
        const UpdateStats stats =
            copo_update(policy, entry, one_step, sampler, RngStream(94).child("anchors"));
        CHECK(stats.ratio_mean == 1.0);
        CHECK(stats.ratio_max == 1.0);
        CHECK(stats.clip_fraction == 0.0);
        CHECK(policy.trainable_values() != params.flatten());
    }
    SUBCASE("second update step moves ratios off 1 and clips") {
        CopoConfig big = cfg;
        big.learning_rate = 1e-3;  // exaggerate so step 2 clips visibly
        const ReplayEntry entry = make_entry(params, sampler, big, 95);
        Policy policy(params);
        const UpdateStats stats =
            copo_update(policy, entry, big, sampler, RngStream(96).child("anchors"));
        CHECK(stats.ratio_max > 1.0);
        CHECK(stats.clip_fraction > 0.0);
    }
}

namespace {

// Relative-error comparison of the copo gradient against central
// differences on the update's own objective function.
void check_objective_gradient(Policy& policy, const ReplayEntry& entry, const CopoConfig& cfg,
                              const SamplerConfig& sampler, double tol) {
    const std::vector<int> anchors =
        select_anchors(entry.group_size(), cfg.anchor_batch, RngStream(7).child("a"));
    const Vec taus = resolve_temperatures(entry, cfg, sampler);
    const CopoObjective obj =
        eval_copo_objective(policy, entry, cfg, sampler, anchors, taus, true);
    const Vec theta = policy.trainable_values();
    const std::function<double(const Vec&)> value = [&](const Vec& v) {
        Policy probe = policy;
        probe.set_trainable_values(v);
        return eval_copo_objective(probe, entry, cfg, sampler, anchors, taus, true).value;
    };
    const Vec fd = finite_diff_grad(value, theta, 1e-5);
    CHECK(max_rel_error(obj.grad, fd, 1e-8) < tol);
}

}  // namespace

TEST_CASE("copo gradient matches finite differences on a micro model") {
    CopoConfig cfg = test_cfg();
    cfg.anchor_batch = 1;
    cfg.update_steps = 1;
    const SamplerConfig sampler{SamplerKind::consistency, {1.0, 0.5}};
    RngStream seeds = RngStream(100).child("pts");
    for (int rep = 0; rep < 3; ++rep) {
        const std::uint64_t seed = 1000 + rep;
        const ModelParams params =
            ModelParams::random_init(micro_dims(), RngStream(seed).child("init"));
        const ReplayEntry entry = make_entry(params, sampler, cfg, seed, 2);
        // probe at a parameter point away from theta_old
        ModelParams moved = params;
        Vec flat = moved.flatten();
        const Vec bump = seeds.gaussian(flat.size());
        axpy(0.05, bump, flat);
        Policy policy(ModelParams::unflatten(micro_dims(), flat));
        check_objective_gradient(policy, entry, cfg, sampler, 1e-3);
    }
}

TEST_CASE("copo gradient matches finite differences for the flow variant") {
    CopoConfig cfg = test_cfg();
    cfg.anchor_batch = 2;
    const SamplerConfig sampler = flow_config();
    const ModelParams params =
        ModelParams::random_init(micro_dims(), RngStream(110).child("init"));
    const ReplayEntry entry = make_entry(params, sampler, cfg, 111, 2);
    ModelParams moved = params;
    moved.w3.a[0] += 0.03;
    Policy policy(moved);
    check_objective_gradient(policy, entry, cfg, sampler, 1e-3);
}

TEST_CASE("copo gradient matches finite differences for adapter training") {
    CopoConfig cfg = test_cfg();
    const SamplerConfig sampler = cm_config();
    const ModelParams base = ModelParams::random_init(tiny_dims(), RngStream(120).child("init"));
    const ReplayEntry entry = make_entry(base, sampler, cfg, 121);
    LowRankAdapter adapter =
        LowRankAdapter::init(tiny_dims(), 2, 4.0, "on_policy", RngStream(122).child("a"));
    // move the factors off the zero-delta point
    Vec factors = adapter.flatten_factors();
    RngStream s = RngStream(123).child("bump");
    axpy(0.05, s.gaussian(factors.size()), factors);
    adapter.set_factors(factors);
    Policy policy(base, adapter);
    check_objective_gradient(policy, entry, cfg, sampler, 1e-3);
}

TEST_CASE("one update pulls the anchor toward the positive candidate and pushes from the negative") {
    // Clean two-candidate configuration: the anchor is candidate 0, so at
    // theta = theta_old its own push/pull term vanishes (the current
    // prediction coincides with its stored one) and the whole gradient
    // acts on the distance to candidate 1.
    CopoConfig cfg = test_cfg();
    cfg.group_size = 2;
    cfg.anchor_batch = 1;
    cfg.update_steps = 1;
    cfg.learning_rate = 1e-3;
    cfg.clip_eps = 10.0;  // wide trust region so the movement is visible in one step
    const SamplerConfig sampler = cm_config();
    const ModelParams params = ModelParams::random_init(tiny_dims(), RngStream(130).child("init"));
    ReplayEntry entry = make_entry(params, sampler, cfg, 131);

    for (bool positive : {true, false}) {
        entry.rewards = positive ? Vec{-1.0, 1.0} : Vec{1.0, -1.0};
        Policy policy(params);
        const std::vector<int> anchors{0};
        const Vec taus = resolve_temperatures(entry, cfg, sampler);

        auto distance_to_target = [&](const Policy& p) {
            double acc = 0.0;
            for (int k = 0; k < sampler.steps(); ++k) {
                const StepRecord& rec = entry.candidates[0].steps[k];
                const Vec anchor_pred = predict_x0(p.effective(), rec.x_t, entry.context, rec.t);
                acc += l2sq_diff(entry.candidates[1].steps[k].x0_pred, anchor_pred);
            }
            return acc;
        };
        const double before = distance_to_target(policy);
        const CopoObjective obj =
            eval_copo_objective(policy, entry, cfg, sampler, anchors, taus, true);
        policy.apply_flat_step(obj.grad, cfg.learning_rate);
        const double after = distance_to_target(policy);
        if (positive) {
            CHECK(after < before);  // pulled toward the high-reward candidate
        } else {
            CHECK(after > before);  // pushed away from the low-reward candidate
        }
    }
}

TEST_CASE("sde_grpo_update basics") {
    CopoConfig cfg = test_cfg();
    const SamplerConfig sampler = cm_config();
    const ModelParams params = ModelParams::random_init(tiny_dims(), RngStream(140).child("init"));
    const PromptSpec prompt = PromptSpec::from_seed(141, 4);
    const NoisePlan plan = make_plan(RngStream(142).child("plan"), 3, 3, 4);
    RewardSpec reward;
    reward.kind = RewardKind::align;
    auto reward_fn = [&](const SequenceLatents& seq) {
        return eval_reward(seq, prompt, reward);
    };

    SUBCASE("T=1 has no action space") {
        const SamplerConfig t1{SamplerKind::consistency, {1.0}};
        Policy policy(params);
        CHECK_THROWS_AS(sde_grpo_update(policy, make_plan(RngStream(143), 3, 1, 4), prompt,
                                        reward_fn, cfg, t1, 3, RngStream(144).child("s")),
                        std::invalid_argument);
    }
    SUBCASE("constant rewards leave the policy bit-identical") {
        Policy policy(params);
        const Vec before = policy.trainable_values();
        auto const_reward = [](const SequenceLatents&) { return 1.0; };
        const UpdateStats stats = sde_grpo_update(policy, plan, prompt, const_reward, cfg,
                                                  sampler, 3, RngStream(145).child("s"));
        CHECK(stats.skipped_degenerate);
        CHECK(policy.trainable_values() == before);
    }
    SUBCASE("first step sees unit ratios") {
        CopoConfig one = cfg;
        one.update_steps = 1;
        Policy policy(params);
        const UpdateStats stats = sde_grpo_update(policy, plan, prompt, reward_fn, one, sampler,
                                                  3, RngStream(146).child("s"));
        CHECK(stats.ratio_mean == 1.0);
        CHECK(stats.ratio_max == 1.0);
        CHECK(stats.clip_fraction == 0.0);
        CHECK(policy.trainable_values() != params.flatten());
    }
    SUBCASE("flow sampler is rejected") {
        Policy policy(params);
        CHECK_THROWS_AS(sde_grpo_update(policy, plan, prompt, reward_fn, cfg, flow_config(), 3,
                                        RngStream(147).child("s")),
                        std::invalid_argument);
    }
}

TEST_CASE("staleness bound: clipped terms never exceed (1+eps)|A|") {
    RngStream s = RngStream(150).child("bound");
    const double eps = 1e-4;
    for (int rep = 0; rep < 50; ++rep) {
        Vec pi_old = softmax_neg_scaled(s.gaussian(6), 1.0);
        Vec pi_new = softmax_neg_scaled(s.gaussian(6), 0.3);
        const Vec adv = group_advantages(s.gaussian(6), 1e-8);
        for (std::size_t i = 0; i < adv.size(); ++i) {
            const double rho = pi_new[i] / pi_old[i];
            const double term =
                std::min(rho * adv[i], std::clamp(rho, 1.0 - eps, 1.0 + eps) * adv[i]);
            CHECK(term <= (1.0 + eps) * std::abs(adv[i]) + 1e-15);
        }
    }
}
