#include "arcopo/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>

#include "arcopo/errors.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint format is little-endian");

namespace arcopo {

Matrix Matrix::zeros(int rows, int cols) {
    Matrix m;
    m.rows = rows;
    m.cols = cols;
    m.a.assign(static_cast<std::size_t>(rows) * cols, 0.0);
    return m;
}

void ModelDims::validate() const {
    if (chunk_dim < 1 || context_dim < 1 || hidden1 < 1 || hidden2 < 1) {
        throw std::invalid_argument("ModelDims: all dimensions must be >= 1");
    }
    if (context_dim < chunk_dim) {
        throw std::invalid_argument("ModelDims: context_dim must be >= chunk_dim for prompt injection");
    }
}

ModelParams ModelParams::zeros(const ModelDims& dims) {
    dims.validate();
    ModelParams p;
    p.dims = dims;
    p.w1 = Matrix::zeros(dims.hidden1, dims.input_dim());
    p.b1.assign(static_cast<std::size_t>(dims.hidden1), 0.0);
    p.w2 = Matrix::zeros(dims.hidden2, dims.hidden1);
    p.b2.assign(static_cast<std::size_t>(dims.hidden2), 0.0);
    p.w3 = Matrix::zeros(dims.chunk_dim, dims.hidden2);
    p.b3.assign(static_cast<std::size_t>(dims.chunk_dim), 0.0);
    p.we = Matrix::zeros(dims.context_dim, dims.context_dim + dims.chunk_dim);
    p.be.assign(static_cast<std::size_t>(dims.context_dim), 0.0);
    return p;
}

namespace {

void fill_gaussian(Matrix& m, RngStream stream, double scale) {
    Vec g = stream.gaussian(m.a.size());
    for (std::size_t i = 0; i < m.a.size(); ++i) m.a[i] = g[i] * scale;
}

}  // namespace

ModelParams ModelParams::random_init(const ModelDims& dims, RngStream stream) {
    ModelParams p = zeros(dims);
    // fan-in scaled weights, zero biases
    fill_gaussian(p.w1, stream.child("w1"), 1.0 / std::sqrt(dims.input_dim()));
    fill_gaussian(p.w2, stream.child("w2"), 1.0 / std::sqrt(dims.hidden1));
    fill_gaussian(p.w3, stream.child("w3"), 1.0 / std::sqrt(dims.hidden2));
    fill_gaussian(p.we, stream.child("we"), 1.0 / std::sqrt(dims.context_dim + dims.chunk_dim));
    return p;
}

std::size_t ModelParams::param_count() const {
    return w1.a.size() + b1.size() + w2.a.size() + b2.size() + w3.a.size() + b3.size() +
           we.a.size() + be.size();
}

Vec ModelParams::flatten() const {
    Vec out;
    out.reserve(param_count());
    for (const Vec* block : {&w1.a, &b1, &w2.a, &b2, &w3.a, &b3, &we.a, &be}) {
        out.insert(out.end(), block->begin(), block->end());
    }
    return out;
}

ModelParams ModelParams::unflatten(const ModelDims& dims, const Vec& flat) {
    ModelParams p = zeros(dims);
    if (flat.size() != p.param_count()) {
        throw std::invalid_argument("ModelParams::unflatten: size mismatch");
    }
    std::size_t off = 0;
    for (Vec* block : {&p.w1.a, &p.b1, &p.w2.a, &p.b2, &p.w3.a, &p.b3, &p.we.a, &p.be}) {
        std::copy(flat.begin() + off, flat.begin() + off + block->size(), block->begin());
        off += block->size();
    }
    return p;
}

namespace {

std::uint64_t fnv1a_bytes(std::uint64_t h, const void* data, std::size_t n) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001B3ULL;
    }
    return h;
}

}  // namespace

std::uint64_t params_fingerprint(const ModelParams& params) {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    const int dims[4] = {params.dims.chunk_dim, params.dims.context_dim,
                         params.dims.hidden1, params.dims.hidden2};
    h = fnv1a_bytes(h, dims, sizeof(dims));
    const Vec flat = params.flatten();
    h = fnv1a_bytes(h, flat.data(), flat.size() * sizeof(double));
    return h;
}

ContextCache initial_context(const PromptSpec& prompt, const ModelDims& dims) {
    dims.validate();
    if (static_cast<int>(prompt.target.size()) != dims.chunk_dim) {
        throw std::invalid_argument("initial_context: prompt target dimension mismatch");
    }
    ContextCache ctx;
    ctx.h.assign(static_cast<std::size_t>(dims.context_dim), 0.0);
    std::copy(prompt.target.begin(), prompt.target.end(), ctx.h.begin());
    ctx.chunk_index = 0;
    return ctx;
}

void SamplerConfig::validate() const {
    if (timesteps.empty()) throw std::invalid_argument("SamplerConfig: empty timestep schedule");
    for (std::size_t i = 0; i < timesteps.size(); ++i) {
        if (!(timesteps[i] > 0.0)) {
            throw std::invalid_argument("SamplerConfig: timesteps must be positive");
        }
        if (i > 0 && !(timesteps[i] < timesteps[i - 1])) {
            throw std::invalid_argument("SamplerConfig: timesteps must be strictly decreasing");
        }
    }
}

Vec SequenceLatents::concat_clean() const {
    Vec out;
    for (const auto& c : chunks) out.insert(out.end(), c.clean.begin(), c.clean.end());
    return out;
}

namespace {

Vec forward_input(const Vec& x_t, const Vec& h, double t) {
    Vec in;
    in.reserve(x_t.size() + h.size() + 1);
    in.insert(in.end(), x_t.begin(), x_t.end());
    in.insert(in.end(), h.begin(), h.end());
    in.push_back(t);
    return in;
}

}  // namespace

Vec predict_x0(const ModelParams& params, const Vec& x_t, const ContextCache& ctx, double t) {
    const ModelDims& d = params.dims;
    if (static_cast<int>(x_t.size()) != d.chunk_dim ||
        static_cast<int>(ctx.h.size()) != d.context_dim) {
        throw std::invalid_argument("predict_x0: dimension mismatch");
    }
    if (!(t > 0.0)) throw std::invalid_argument("predict_x0: t must be > 0");

    const Vec in = forward_input(x_t, ctx.h, t);
    Vec a1, a2, out;
    affine_apply(params.w1.a, params.b1, in, d.hidden1, d.input_dim(), a1);
    tanh_inplace(a1);
    affine_apply(params.w2.a, params.b2, a1, d.hidden2, d.hidden1, a2);
    tanh_inplace(a2);
    affine_apply(params.w3.a, params.b3, a2, d.chunk_dim, d.hidden2, out);
    return out;
}

ChunkTrajectory sample_chunk(const ModelParams& params, const ContextCache& ctx,
                             const Vec& init_noise, std::span<const Vec> solver_noises,
                             const SamplerConfig& cfg) {
    cfg.validate();
    const int T = cfg.steps();
    if (static_cast<int>(init_noise.size()) != params.dims.chunk_dim) {
        throw std::invalid_argument("sample_chunk: init noise dimension mismatch");
    }
    const std::size_t want_noises =
        cfg.kind == SamplerKind::consistency ? static_cast<std::size_t>(T - 1) : 0;
    if (solver_noises.size() != want_noises) {
        throw std::invalid_argument("sample_chunk: wrong solver-noise count");
    }

    ChunkTrajectory traj;
    traj.steps.reserve(static_cast<std::size_t>(T));
    Vec x = init_noise;
    for (int k = 0; k < T; ++k) {
        const double t = cfg.timesteps[static_cast<std::size_t>(k)];
        Vec x0 = predict_x0(params, x, ctx, t);
        traj.steps.push_back(StepRecord{t, x, x0});
        if (k + 1 == T) {
            // Both samplers land exactly on the final prediction: the CM
            // step returns x0_hat, and the Euler step to t=0 integrates
            // x - t * (x - x0_hat)/t analytically.
            x = std::move(x0);
        } else if (cfg.kind == SamplerKind::consistency) {
            const double t_next = cfg.timesteps[static_cast<std::size_t>(k + 1)];
            x = x0;
            axpy(t_next, solver_noises[static_cast<std::size_t>(k)], x);
        } else {
            const double t_next = cfg.timesteps[static_cast<std::size_t>(k + 1)];
            // x_{t+1} = x + (t_next - t) * (x - x0)/t; the reciprocal is
            // applied as a multiply so the taped replay matches bit-for-bit.
            const double inv_t = 1.0 / t;
            Vec v = sub(x, x0);
            for (double& y : v) y *= inv_t;
            axpy(t_next - t, v, x);
        }
    }
    traj.clean = std::move(x);
    require_finite(traj.clean, "sample_chunk output");
    return traj;
}

ContextCache extend_context(const ContextCache& ctx, const Vec& clean_chunk,
                            const ModelParams& params) {
    const ModelDims& d = params.dims;
    if (static_cast<int>(clean_chunk.size()) != d.chunk_dim ||
        static_cast<int>(ctx.h.size()) != d.context_dim) {
        throw std::invalid_argument("extend_context: dimension mismatch");
    }
    Vec in;
    in.reserve(ctx.h.size() + clean_chunk.size());
    in.insert(in.end(), ctx.h.begin(), ctx.h.end());
    in.insert(in.end(), clean_chunk.begin(), clean_chunk.end());
    ContextCache out;
    affine_apply(params.we.a, params.be, in, d.context_dim, d.context_dim + d.chunk_dim, out.h);
    tanh_inplace(out.h);
    out.chunk_index = ctx.chunk_index + 1;
    return out;
}

SequenceLatents rollout_sequence(const ModelParams& params, const PromptSpec& prompt,
                                 const NoisePlan& plan, const SamplerConfig& cfg, int L) {
    cfg.validate();
    if (plan.chunks() != L) throw std::invalid_argument("rollout_sequence: plan does not cover L chunks");
    if (plan.chunk_dim() != params.dims.chunk_dim) {
        throw std::invalid_argument("rollout_sequence: plan chunk_dim mismatch");
    }
    if (cfg.kind == SamplerKind::consistency && plan.steps() != cfg.steps()) {
        throw std::invalid_argument("rollout_sequence: plan step count mismatch");
    }

    SequenceLatents seq;
    seq.chunks.reserve(static_cast<std::size_t>(L));
    seq.entry_contexts.reserve(static_cast<std::size_t>(L));
    ContextCache ctx = initial_context(prompt, params.dims);
    for (int p = 0; p < L; ++p) {
        seq.entry_contexts.push_back(ctx.h);
        std::span<const Vec> solver;
        if (cfg.kind == SamplerKind::consistency) {
            solver = plan.solver_noises[static_cast<std::size_t>(p)];
        }
        ChunkTrajectory traj =
            sample_chunk(params, ctx, plan.init_noises[static_cast<std::size_t>(p)], solver, cfg);
        ctx = extend_context(ctx, traj.clean, params);
        seq.chunks.push_back(std::move(traj));
    }
    return seq;
}

StagedModel stage_params(Tape& tape, const ModelParams& params, bool trainable) {
    StagedModel m;
    m.dims = params.dims;
    m.w1 = tape.leaf(params.w1.a, trainable);
    m.b1 = tape.leaf(params.b1, trainable);
    m.w2 = tape.leaf(params.w2.a, trainable);
    m.b2 = tape.leaf(params.b2, trainable);
    m.w3 = tape.leaf(params.w3.a, trainable);
    m.b3 = tape.leaf(params.b3, trainable);
    m.we = tape.leaf(params.we.a, trainable);
    m.be = tape.leaf(params.be, trainable);
    return m;
}

Tape::Id tape_predict_x0(Tape& tape, const StagedModel& m, Tape::Id x_t, Tape::Id h, double t) {
    const ModelDims& d = m.dims;
    const Tape::Id t_node = tape.scalar_constant(t);
    const Tape::Id parts[] = {x_t, h, t_node};
    const Tape::Id in = tape.concat(parts);
    Tape::Id a1 = tape.tanh_(tape.affine(m.w1, m.b1, in, d.hidden1, d.input_dim()));
    Tape::Id a2 = tape.tanh_(tape.affine(m.w2, m.b2, a1, d.hidden2, d.hidden1));
    return tape.affine(m.w3, m.b3, a2, d.chunk_dim, d.hidden2);
}

Tape::Id tape_extend_context(Tape& tape, const StagedModel& m, Tape::Id h, Tape::Id chunk) {
    const ModelDims& d = m.dims;
    const Tape::Id parts[] = {h, chunk};
    const Tape::Id in = tape.concat(parts);
    return tape.tanh_(tape.affine(m.we, m.be, in, d.context_dim, d.context_dim + d.chunk_dim));
}

void accumulate_param_grads(const Tape& tape, const StagedModel& m, Vec& grad) {
    Vec flat;
    for (Tape::Id id : {m.w1, m.b1, m.w2, m.b2, m.w3, m.b3, m.we, m.be}) {
        const Vec& g = tape.grad(id);
        flat.insert(flat.end(), g.begin(), g.end());
    }
    if (grad.empty()) grad.assign(flat.size(), 0.0);
    axpy(1.0, flat, grad);
}

void apply_param_step(ModelParams& params, const Vec& g, double step) {
    if (g.size() != params.param_count()) {
        throw std::invalid_argument("apply_param_step: gradient size mismatch");
    }
    std::size_t off = 0;
    for (Vec* block : {&params.w1.a, &params.b1, &params.w2.a, &params.b2, &params.w3.a,
                       &params.b3, &params.we.a, &params.be}) {
        for (double& x : *block) x += step * g[off++];
    }
}

std::vector<Vec> sample_ar_sequence(RngStream stream, const PretrainConfig& cfg, int chunk_dim) {
    std::vector<Vec> chunks;
    chunks.reserve(static_cast<std::size_t>(cfg.sequence_length));
    Vec prev;
    for (int p = 0; p < cfg.sequence_length; ++p) {
        RngStream s = stream.child("chunk." + std::to_string(p));
        const double sign = s.uniform_index(2) == 0 ? 1.0 : -1.0;
        Vec g = s.gaussian(static_cast<std::size_t>(chunk_dim));
        const double damp = p == 0 ? cfg.first_chunk_scale : 1.0;
        Vec c(static_cast<std::size_t>(chunk_dim));
        for (std::size_t j = 0; j < c.size(); ++j) {
            c[j] = damp * (sign * cfg.mix_mean + cfg.mix_std * g[j]);
            if (!prev.empty()) c[j] += cfg.ar_decay * prev[j];
        }
        prev = c;
        chunks.push_back(std::move(c));
    }
    return chunks;
}

namespace {

Vec pretrain_target(RngStream stream, int chunk_dim, double scale) {
    Vec g = stream.gaussian(static_cast<std::size_t>(chunk_dim));
    const double norm = l2(g);
    const double want = scale * std::sqrt(static_cast<double>(chunk_dim));
    return scaled(g, norm < 1e-12 ? 0.0 : want / norm);
}

struct DenoiseCase {
    Vec h;       // entry context (plain value)
    Vec clean;   // regression target
    Vec x_t;     // noised input
    double t;
};

// One teacher-forced sequence expanded into per-chunk denoising cases.
std::vector<DenoiseCase> make_cases(const ModelParams& params, const SamplerConfig& sampler,
                                    const PretrainConfig& cfg, RngStream stream) {
    const int d = params.dims.chunk_dim;
    const Vec target = pretrain_target(stream.child("target"), d, cfg.prompt_scale);
    const std::vector<Vec> seq = sample_ar_sequence(stream.child("seq"), cfg, d);

    PromptSpec prompt;
    prompt.target = target;
    ContextCache ctx = initial_context(prompt, params.dims);

    std::vector<DenoiseCase> cases;
    RngStream tstream = stream.child("t");
    for (int p = 0; p < cfg.sequence_length; ++p) {
        DenoiseCase c;
        c.h = ctx.h;
        c.clean = seq[static_cast<std::size_t>(p)];
        c.t = sampler.timesteps[tstream.uniform_index(sampler.timesteps.size())];
        RngStream ns = stream.child("noise." + std::to_string(p));
        Vec eps = ns.gaussian(static_cast<std::size_t>(d));
        c.x_t = c.clean;
        axpy(c.t, eps, c.x_t);
        cases.push_back(std::move(c));
        ctx = extend_context(ctx, seq[static_cast<std::size_t>(p)], params);
    }
    return cases;
}

}  // namespace

double denoising_mse(const ModelParams& params, const SamplerConfig& sampler,
                     const PretrainConfig& cfg) {
    RngStream eval = RngStream(cfg.data_seed).child("eval");
    double acc = 0.0;
    int n = 0;
    for (int s = 0; s < cfg.eval_sequences; ++s) {
        const auto cases =
            make_cases(params, sampler, cfg, eval.child("seq." + std::to_string(s)));
        for (const auto& c : cases) {
            ContextCache ctx{c.h, 0};
            const Vec pred = predict_x0(params, c.x_t, ctx, c.t);
            acc += l2sq_diff(pred, c.clean) / params.dims.chunk_dim;
            ++n;
        }
    }
    return acc / n;
}

ModelParams pretrain_reference(const ModelDims& dims, const SamplerConfig& sampler,
                               const PretrainConfig& cfg,
                               std::vector<PretrainCurvePoint>* curve) {
    dims.validate();
    sampler.validate();
    if (cfg.steps < 0) throw std::invalid_argument("pretrain_reference: steps must be >= 0");

    RngStream root(cfg.data_seed);
    ModelParams params = ModelParams::random_init(dims, root.child("init"));
    if (curve) curve->push_back({0, denoising_mse(params, sampler, cfg)});
    if (cfg.steps == 0) return params;

    RngStream data = root.child("train");
    const int record_every = std::max(1, cfg.steps / 20);
    for (int step = 0; step < cfg.steps; ++step) {
        // Context is rebuilt on-tape through the encoder so that the
        // encoder weights learn alongside the predictor.
        Tape tape;
        const StagedModel m = stage_params(tape, params, true);
        RngStream s = data.child("step." + std::to_string(step));

        const int d = dims.chunk_dim;
        const Vec target = pretrain_target(s.child("target"), d, cfg.prompt_scale);
        const std::vector<Vec> seq = sample_ar_sequence(s.child("seq"), cfg, d);
        PromptSpec prompt;
        prompt.target = target;
        Tape::Id h = tape.constant(initial_context(prompt, dims).h);

        RngStream tstream = s.child("t");
        std::vector<Tape::Id> losses;
        for (int p = 0; p < cfg.sequence_length; ++p) {
            const Vec& clean = seq[static_cast<std::size_t>(p)];
            const double t = sampler.timesteps[tstream.uniform_index(sampler.timesteps.size())];
            RngStream ns = s.child("noise." + std::to_string(p));
            Vec x_t = clean;
            axpy(t, ns.gaussian(static_cast<std::size_t>(d)), x_t);

            const Tape::Id pred = tape_predict_x0(tape, m, tape.constant(x_t), h, t);
            const Tape::Id err = tape.sub(pred, tape.constant(clean));
            losses.push_back(tape.scale(tape.sumsq(err), 1.0 / d));
            h = tape_extend_context(tape, m, h, tape.constant(clean));
        }
        const Tape::Id loss = tape.mean(tape.concat(losses));
        const double loss_val = tape.value(loss)[0];
        if (!std::isfinite(loss_val)) throw NumericError("pretrain_reference: loss diverged");
        tape.backward(loss);

        Vec g;
        accumulate_param_grads(tape, m, g);
        apply_param_step(params, g, -cfg.learning_rate);

        if (curve && ((step + 1) % record_every == 0 || step + 1 == cfg.steps)) {
            curve->push_back({step + 1, denoising_mse(params, sampler, cfg)});
        }
    }
    return params;
}

namespace {

void write_raw(std::ofstream& os, const void* data, std::size_t n) {
    os.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
}

void read_raw(std::ifstream& is, void* data, std::size_t n, const char* what) {
    is.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
    if (!is) throw IoError(std::string("checkpoint: truncated ") + what);
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params,
                     const CheckpointMeta& meta) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open checkpoint for writing: " + path.string());
    write_raw(os, kCheckpointMagic, sizeof(kCheckpointMagic) - 1);
    write_raw(os, &meta.config_hash, sizeof(meta.config_hash));
    write_raw(os, &meta.root_seed, sizeof(meta.root_seed));
    const std::int32_t dims[4] = {params.dims.chunk_dim, params.dims.context_dim,
                                  params.dims.hidden1, params.dims.hidden2};
    write_raw(os, dims, sizeof(dims));
    const Vec flat = params.flatten();
    write_raw(os, flat.data(), flat.size() * sizeof(double));
    if (!os) throw IoError("checkpoint write failed: " + path.string());
}

ModelParams load_checkpoint(const std::filesystem::path& path, const ModelDims& expected,
                            CheckpointMeta* meta) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw NotFoundError("checkpoint not found: " + path.string());
    char magic[sizeof(kCheckpointMagic) - 1];
    read_raw(is, magic, sizeof(magic), "magic");
    if (std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
        throw IoError("not a checkpoint file: " + path.string());
    }
    CheckpointMeta m;
    read_raw(is, &m.config_hash, sizeof(m.config_hash), "header");
    read_raw(is, &m.root_seed, sizeof(m.root_seed), "header");
    std::int32_t dims[4];
    read_raw(is, dims, sizeof(dims), "dimensions");
    if (dims[0] != expected.chunk_dim || dims[1] != expected.context_dim ||
        dims[2] != expected.hidden1 || dims[3] != expected.hidden2) {
        throw std::invalid_argument("checkpoint dimensions do not match: " + path.string());
    }
    ModelParams params = ModelParams::zeros(expected);
    Vec flat(params.param_count());
    read_raw(is, flat.data(), flat.size() * sizeof(double), "weights");
    if (meta) *meta = m;
    return ModelParams::unflatten(expected, flat);
}

}  // namespace arcopo
