#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "arcopo/errors.hpp"
#include "arcopo/finite_diff.hpp"
#include "arcopo/model.hpp"

using namespace arcopo;
namespace fs = std::filesystem;

namespace {

ModelDims tiny_dims() { return ModelDims{4, 6, 8, 8}; }

ModelParams tiny_params(std::uint64_t seed = 5) {
    return ModelParams::random_init(tiny_dims(), RngStream(seed).child("init"));
}

PromptSpec tiny_prompt(std::uint64_t seed = 21) {
    return PromptSpec::from_seed(seed, tiny_dims().chunk_dim);
}

SamplerConfig cm_config() { return SamplerConfig{SamplerKind::consistency, {1.0, 0.6, 0.3}}; }
SamplerConfig flow_config() { return SamplerConfig{SamplerKind::flow_ode, {1.0, 0.6, 0.3}}; }

}  // namespace

TEST_CASE("zero weights give zero predictions") {
    const ModelParams p = ModelParams::zeros(tiny_dims());
    const ContextCache ctx = initial_context(tiny_prompt(), p.dims);
    RngStream s = RngStream(1).child("x");
    const Vec out = predict_x0(p, s.gaussian(4), ctx, 1.0);
    CHECK(out == Vec(4, 0.0));
}

TEST_CASE("predict_x0 is deterministic and validates shapes") {
    const ModelParams p = tiny_params();
    const ContextCache ctx = initial_context(tiny_prompt(), p.dims);
    RngStream s = RngStream(2).child("x");
    const Vec x = s.gaussian(4);
    CHECK(predict_x0(p, x, ctx, 0.6) == predict_x0(p, x, ctx, 0.6));
    CHECK_THROWS_AS(predict_x0(p, Vec(3, 0.0), ctx, 0.6), std::invalid_argument);
    CHECK_THROWS_AS(predict_x0(p, x, ctx, 0.0), std::invalid_argument);
}

TEST_CASE("weight perturbation matches the tape gradient") {
    const ModelParams p = tiny_params(9);
    const ContextCache ctx = initial_context(tiny_prompt(), p.dims);
    RngStream s = RngStream(3).child("x");
    const Vec x = s.gaussian(4);

    // d(sum of outputs)/d(theta) via tape, then a one-weight bump.
    Tape tape;
    const StagedModel m = stage_params(tape, p, true);
    const Tape::Id pred = tape_predict_x0(tape, m, tape.constant(x), tape.constant(ctx.h), 0.6);
    const Tape::Id root = tape.sum(pred);
    tape.backward(root);
    const double dw = tape.grad(m.w1)[5];

    ModelParams bumped = p;
    const double h = 1e-5;
    bumped.w1.a[5] += h;
    double delta = 0.0;
    const Vec before = predict_x0(p, x, ctx, 0.6);
    const Vec after = predict_x0(bumped, x, ctx, 0.6);
    for (std::size_t i = 0; i < before.size(); ++i) delta += after[i] - before[i];
    CHECK(rel_error(delta / h, dw, 1e-8) < 1e-3);
}

TEST_CASE("plain and taped forward passes agree bit-exactly") {
    const ModelParams p = tiny_params(10);
    const ContextCache ctx = initial_context(tiny_prompt(), p.dims);
    RngStream s = RngStream(4).child("x");
    const Vec x = s.gaussian(4);
    const Vec plain = predict_x0(p, x, ctx, 0.3);
    Tape tape;
    const StagedModel m = stage_params(tape, p, false);
    const Vec taped =
        tape.value(tape_predict_x0(tape, m, tape.constant(x), tape.constant(ctx.h), 0.3));
    CHECK(plain == taped);

    const ContextCache ext = extend_context(ctx, x, p);
    Tape tape2;
    const StagedModel m2 = stage_params(tape2, p, false);
    const Vec taped_ctx =
        tape2.value(tape_extend_context(tape2, m2, tape2.constant(ctx.h), tape2.constant(x)));
    CHECK(ext.h == taped_ctx);
}

TEST_CASE("sample_chunk single-step collapse") {
    const ModelParams p = tiny_params(11);
    const ContextCache ctx = initial_context(tiny_prompt(), p.dims);
    RngStream s = RngStream(5).child("noise");
    const Vec init = s.gaussian(4);
    for (SamplerKind kind : {SamplerKind::consistency, SamplerKind::flow_ode}) {
        SamplerConfig cfg{kind, {1.0}};
        const ChunkTrajectory traj = sample_chunk(p, ctx, init, {}, cfg);
        CHECK(traj.clean == predict_x0(p, init, ctx, 1.0));
        CHECK(traj.steps.size() == 1);
    }
}

TEST_CASE("consistency sampler with zero solver noise hops between predictions") {
    const ModelParams p = tiny_params(12);
    const ContextCache ctx = initial_context(tiny_prompt(), p.dims);
    RngStream s = RngStream(6).child("noise");
    const Vec init = s.gaussian(4);
    const std::vector<Vec> zeros(2, Vec(4, 0.0));
    const ChunkTrajectory traj = sample_chunk(p, ctx, init, zeros, cm_config());
    CHECK(traj.steps[1].x_t == traj.steps[0].x0_pred);
    CHECK(traj.steps[2].x_t == traj.steps[1].x0_pred);
    CHECK(traj.clean == traj.steps[2].x0_pred);
}

TEST_CASE("sample_chunk rejects a wrong solver-noise count") {
    const ModelParams p = tiny_params(13);
    const ContextCache ctx = initial_context(tiny_prompt(), p.dims);
    RngStream s = RngStream(7).child("noise");
    const Vec init = s.gaussian(4);
    const std::vector<Vec> one(1, Vec(4, 0.0));
    CHECK_THROWS_AS(sample_chunk(p, ctx, init, one, cm_config()), std::invalid_argument);
    CHECK_THROWS_AS(sample_chunk(p, ctx, init, one, flow_config()), std::invalid_argument);
}

TEST_CASE("trajectory replay reproduces stored predictions bit-exactly") {
    const ModelParams p = tiny_params(14);
    const ContextCache ctx = initial_context(tiny_prompt(), p.dims);
    RngStream s = RngStream(8).child("noise");
    const Vec init = s.gaussian(4);
    std::vector<Vec> zeta;
    for (int k = 0; k < 2; ++k) zeta.push_back(s.gaussian(4));
    const ChunkTrajectory traj = sample_chunk(p, ctx, init, zeta, cm_config());
    for (const auto& rec : traj.steps) {
        CHECK(predict_x0(p, rec.x_t, ctx, rec.t) == rec.x0_pred);
    }
}

TEST_CASE("extend_context with zero encoder weights depends only on the bias") {
    ModelParams p = ModelParams::zeros(tiny_dims());
    for (std::size_t i = 0; i < p.be.size(); ++i) p.be[i] = 0.1 * (i + 1);
    const ContextCache ctx = initial_context(tiny_prompt(), p.dims);
    RngStream s = RngStream(9).child("c");
    const ContextCache a = extend_context(ctx, s.gaussian(4), p);
    const ContextCache b = extend_context(ctx, s.gaussian(4), p);
    CHECK(a.h == b.h);
    CHECK(a.chunk_index == 1);
    for (std::size_t i = 0; i < a.h.size(); ++i) {
        CHECK(a.h[i] == doctest::Approx(std::tanh(0.1 * (i + 1))));
    }
}

TEST_CASE("different chunks give different contexts under generic weights") {
    const ModelParams p = tiny_params(15);
    const ContextCache ctx = initial_context(tiny_prompt(), p.dims);
    RngStream s = RngStream(10).child("c");
    const ContextCache a = extend_context(ctx, s.gaussian(4), p);
    const ContextCache b = extend_context(ctx, s.gaussian(4), p);
    CHECK(a.h != b.h);
}

TEST_CASE("rollout_sequence basics") {
    const ModelParams p = tiny_params(16);
    const PromptSpec prompt = tiny_prompt();
    const SamplerConfig cfg = cm_config();

    SUBCASE("L=1 equals sample_chunk on the initial context") {
        const NoisePlan plan = make_plan(RngStream(20).child("plan"), 1, 3, 4);
        const SequenceLatents seq = rollout_sequence(p, prompt, plan, cfg, 1);
        const ChunkTrajectory direct =
            sample_chunk(p, initial_context(prompt, p.dims), plan.init_noises[0],
                         plan.solver_noises[0], cfg);
        CHECK(seq.chunks[0].clean == direct.clean);
    }
    SUBCASE("identical plans give identical sequences") {
        const NoisePlan plan = make_plan(RngStream(21).child("plan"), 4, 3, 4);
        const SequenceLatents a = rollout_sequence(p, prompt, plan, cfg, 4);
        const SequenceLatents b = rollout_sequence(p, prompt, plan, cfg, 4);
        CHECK(a.concat_clean() == b.concat_clean());
    }
    SUBCASE("changing chunk-3 init noise leaves chunks 1-2 bit-identical") {
        const NoisePlan plan = make_plan(RngStream(22).child("plan"), 4, 3, 4);
        NoisePlan other = plan;
        RngStream s = RngStream(23).child("swap");
        other.init_noises[2] = s.gaussian(4);
        const SequenceLatents a = rollout_sequence(p, prompt, plan, cfg, 4);
        const SequenceLatents b = rollout_sequence(p, prompt, other, cfg, 4);
        CHECK(a.chunks[0].clean == b.chunks[0].clean);
        CHECK(a.chunks[1].clean == b.chunks[1].clean);
        CHECK(a.chunks[2].clean != b.chunks[2].clean);
        CHECK(a.chunks[3].clean != b.chunks[3].clean);
    }
    SUBCASE("plan/config mismatch is rejected") {
        const NoisePlan plan = make_plan(RngStream(24).child("plan"), 4, 2, 4);
        CHECK_THROWS_AS(rollout_sequence(p, prompt, plan, cfg, 4), std::invalid_argument);
        const NoisePlan short_plan = make_plan(RngStream(25).child("plan"), 3, 3, 4);
        CHECK_THROWS_AS(rollout_sequence(p, prompt, short_plan, cfg, 4), std::invalid_argument);
    }
}

TEST_CASE("pretrain_reference") {
    const ModelDims dims = tiny_dims();
    const SamplerConfig sampler = cm_config();
    PretrainConfig cfg;
    cfg.data_seed = 77;
    cfg.sequence_length = 4;
    cfg.eval_sequences = 4;

    SUBCASE("steps=0 returns the initialization unchanged") {
        cfg.steps = 0;
        const ModelParams a = pretrain_reference(dims, sampler, cfg);
        const ModelParams b = ModelParams::random_init(dims, RngStream(77).child("init"));
        CHECK(a.flatten() == b.flatten());
    }
    SUBCASE("fixed data_seed is reproducible") {
        cfg.steps = 50;
        const ModelParams a = pretrain_reference(dims, sampler, cfg);
        const ModelParams b = pretrain_reference(dims, sampler, cfg);
        CHECK(a.flatten() == b.flatten());
    }
    SUBCASE("denoising MSE at least halves over a real run") {
        cfg.steps = 2000;
        std::vector<PretrainCurvePoint> curve;
        const ModelParams trained = pretrain_reference(dims, sampler, cfg, &curve);
        (void)trained;
        REQUIRE(curve.size() >= 2);
        CHECK(curve.back().eval_mse < 0.5 * curve.front().eval_mse);
    }
}

TEST_CASE("checkpoint round-trip and dimension checks") {
    const ModelParams p = tiny_params(30);
    const fs::path path = fs::temp_directory_path() / "arcopo_test.ckpt";
    save_checkpoint(path, p, {0xABCDULL, 42});

    CheckpointMeta meta;
    const ModelParams loaded = load_checkpoint(path, p.dims, &meta);
    CHECK(loaded.flatten() == p.flatten());
    CHECK(meta.config_hash == 0xABCDULL);
    CHECK(meta.root_seed == 42);

    ModelDims other = p.dims;
    other.chunk_dim += 1;
    CHECK_THROWS_AS(load_checkpoint(path, other), std::invalid_argument);
    CHECK_THROWS_AS(load_checkpoint(path / "missing", p.dims), NotFoundError);

    SUBCASE("re-saving produces byte-identical files") {
        const fs::path path2 = fs::temp_directory_path() / "arcopo_test2.ckpt";
        save_checkpoint(path2, p, {0xABCDULL, 42});
        std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
        const std::string b1((std::istreambuf_iterator<char>(f1)), {});
        const std::string b2((std::istreambuf_iterator<char>(f2)), {});
        CHECK(b1 == b2);
        fs::remove(path2);
    }
    fs::remove(path);
}

TEST_CASE("fingerprint distinguishes parameter snapshots") {
    const ModelParams a = tiny_params(31);
    ModelParams b = a;
    CHECK(params_fingerprint(a) == params_fingerprint(b));
    b.w2.a[0] += 1e-12;
    CHECK(params_fingerprint(a) != params_fingerprint(b));
}
