#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "arcopo/neighborhood.hpp"
#include "arcopo/prompt.hpp"
#include "arcopo/rng.hpp"
#include "arcopo/tape.hpp"
#include "arcopo/vecmath.hpp"

namespace arcopo {

struct Matrix {
    int rows = 0;
    int cols = 0;
    Vec a;  // row-major, rows*cols

    static Matrix zeros(int rows, int cols);
};

struct ModelDims {
    int chunk_dim = 8;
    int context_dim = 16;
    int hidden1 = 32;
    int hidden2 = 32;

    int input_dim() const { return chunk_dim + context_dim + 1; }  // +1 timestep scalar
    void validate() const;
    bool operator==(const ModelDims&) const = default;
};

/// Weights of the chunk predictor F(x_t, h, t) -> x0_hat (two tanh hidden
/// layers, affine output) plus the context encoder
/// h' = tanh(We [h; chunk] + be).
struct ModelParams {
    ModelDims dims;
    Matrix w1; Vec b1;  // hidden1 x input_dim
    Matrix w2; Vec b2;  // hidden2 x hidden1
    Matrix w3; Vec b3;  // chunk_dim x hidden2
    Matrix we; Vec be;  // context_dim x (context_dim + chunk_dim)

    static ModelParams zeros(const ModelDims& dims);
    static ModelParams random_init(const ModelDims& dims, RngStream stream);

    std::size_t param_count() const;
    Vec flatten() const;
    static ModelParams unflatten(const ModelDims& dims, const Vec& flat);
};

/// FNV-1a over dims and weight bytes; identifies a parameter snapshot.
std::uint64_t params_fingerprint(const ModelParams& params);

/// Recurrent summary of the clean chunks emitted so far.
struct ContextCache {
    Vec h;               // context_dim
    int chunk_index = 0; // number of chunks absorbed
};

/// Prompt injection: h0 = [target; zeros]. Requires context_dim >= chunk_dim.
ContextCache initial_context(const PromptSpec& prompt, const ModelDims& dims);

enum class SamplerKind { consistency, flow_ode };

struct SamplerConfig {
    SamplerKind kind = SamplerKind::consistency;
    std::vector<double> timesteps = {1.0, 0.6, 0.3};  // strictly decreasing, positive

    int steps() const { return static_cast<int>(timesteps.size()); }
    void validate() const;
};

struct StepRecord {
    double t = 0.0;
    Vec x_t;      // sampler state entering the step
    Vec x0_pred;  // model prediction at that state
};

struct ChunkTrajectory {
    std::vector<StepRecord> steps;  // length T
    Vec clean;                      // final clean chunk
};

struct SequenceLatents {
    std::vector<ChunkTrajectory> chunks;  // L
    std::vector<Vec> entry_contexts;      // h before each chunk, L entries

    Vec concat_clean() const;
};

/// One-step clean prediction x0_hat = F(x_t, h, t).
Vec predict_x0(const ModelParams& params, const Vec& x_t, const ContextCache& ctx, double t);

/// Denoise one chunk. consistency: x_{t1} = init_noise; per step predict
/// x0_hat and re-noise x_{t_{k+1}} = x0_hat + t_{k+1} * zeta_k (needs T-1
/// solver noises). flow_ode: Euler steps of v_hat = (x_t - x0_hat)/t
/// (takes no solver noises); the last step integrates exactly to t=0.
ChunkTrajectory sample_chunk(const ModelParams& params, const ContextCache& ctx,
                             const Vec& init_noise, std::span<const Vec> solver_noises,
                             const SamplerConfig& cfg);

ContextCache extend_context(const ContextCache& ctx, const Vec& clean_chunk,
                            const ModelParams& params);

/// Chunk-by-chunk rollout under a frozen noise plan.
SequenceLatents rollout_sequence(const ModelParams& params, const PromptSpec& prompt,
                                 const NoisePlan& plan, const SamplerConfig& cfg, int L);

// --- tape-side forward passes (identical arithmetic to the plain ones) ---

struct StagedModel {
    Tape::Id w1, b1, w2, b2, w3, b3, we, be;
    ModelDims dims;
};

StagedModel stage_params(Tape& tape, const ModelParams& params, bool trainable);
Tape::Id tape_predict_x0(Tape& tape, const StagedModel& m, Tape::Id x_t, Tape::Id h, double t);
Tape::Id tape_extend_context(Tape& tape, const StagedModel& m, Tape::Id h, Tape::Id chunk);

/// grad += d(root)/d(params) read off the tape after backward.
void accumulate_param_grads(const Tape& tape, const StagedModel& m, Vec& grad);
/// params += step * g, g in flatten() order.
void apply_param_step(ModelParams& params, const Vec& g, double step);

// --- reference pretraining ---

struct PretrainConfig {
    std::uint64_t data_seed = 7;
    int steps = 4000;
    double learning_rate = 0.02;
    int sequence_length = 6;
    double prompt_scale = 1.0;
    // Target process: chunk_p = ar_decay * chunk_{p-1} + innovation, with
    // the innovation a two-component Gaussian mixture (+-mix_mean, mix_std).
    // The opening chunk has no history; it draws a damped innovation so
    // sequences start from a narrower distribution than they continue in.
    double ar_decay = 0.7;
    double mix_mean = 1.3;
    double mix_std = 0.8;
    double first_chunk_scale = 0.75;
    int eval_sequences = 16;
};

struct PretrainCurvePoint {
    int step = 0;         // 0 = before training
    double eval_mse = 0.0;
};

std::vector<Vec> sample_ar_sequence(RngStream stream, const PretrainConfig& cfg, int chunk_dim);

/// Held-out denoising MSE over a fixed seeded eval batch.
double denoising_mse(const ModelParams& params, const SamplerConfig& sampler,
                     const PretrainConfig& cfg);

/// Regress the predictor onto the synthetic target process (VE-noised
/// inputs x_t = x0 + t * eps, matching the sampler's re-noise form).
/// steps = 0 returns the seeded initialization unchanged.
ModelParams pretrain_reference(const ModelDims& dims, const SamplerConfig& sampler,
                               const PretrainConfig& cfg,
                               std::vector<PretrainCurvePoint>* curve = nullptr);

// --- checkpoint file ---

inline constexpr char kCheckpointMagic[] = "ARCOPO-CKPT-1";

struct CheckpointMeta {
    std::uint64_t config_hash = 0;
    std::uint64_t root_seed = 0;
};

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params,
                     const CheckpointMeta& meta);
/// Throws NotFoundError if missing, IoError on malformed content, and
/// std::invalid_argument when stored dimensions differ from `expected`.
ModelParams load_checkpoint(const std::filesystem::path& path, const ModelDims& expected,
                            CheckpointMeta* meta = nullptr);

}  // namespace arcopo
