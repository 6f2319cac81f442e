#include "arcopo/semipolicy.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>

#include "arcopo/errors.hpp"

namespace arcopo {

ReplayBuffer collect_buffer(const ModelParams& ref_params, std::span<const PromptSpec> prompts,
                            const RewardSpec& reward, const CopoConfig& cfg,
                            const SamplerConfig& sampler, int L, int n_groups,
                            RngStream stream) {
    if (n_groups < 1) throw std::invalid_argument("collect_buffer: n_groups must be >= 1");
    if (prompts.empty()) throw std::invalid_argument("collect_buffer: no prompts");
    ReplayBuffer buffer;
    buffer.reference_id = params_fingerprint(ref_params);
    buffer.entries.reserve(static_cast<std::size_t>(n_groups));
    for (int g = 0; g < n_groups; ++g) {
        const PromptSpec& prompt = prompts[static_cast<std::size_t>(g) % prompts.size()];
        buffer.entries.push_back(arcopo_iteration(ref_params, prompt, reward, cfg, sampler, L,
                                                  stream.child("group." + std::to_string(g))));
    }
    return buffer;
}

TrainResult train_semi(Policy& policy, const ReplayBuffer& buffer, const CopoConfig& cfg,
                       const SamplerConfig& sampler, int steps, bool clip_enabled,
                       RngStream batch_stream) {
    if (buffer.entries.empty()) throw std::invalid_argument("train_semi: empty buffer");
    if (steps < 0) throw std::invalid_argument("train_semi: steps must be >= 0");


    TrainResult result;
    result.curve.reserve(static_cast<std::size_t>(steps));
    for (int step = 0; step < steps; ++step) {
        RngStream s = batch_stream.child("step." + std::to_string(step));
        const std::size_t pick = s.uniform_index(buffer.entries.size());
        const ReplayEntry& entry = buffer.entries[pick];
        const UpdateStats stats =
            copo_update(policy, entry, cfg, sampler, s.child("anchors"), clip_enabled);

        IterationRecord rec;
        rec.iteration = step;
        rec.pivot = entry.pivot + 1;
        rec.reward_mean = mean(entry.rewards);
        rec.reward_std = pop_stddev(entry.rewards);
        rec.objective = stats.objective;
        rec.ratio_mean = stats.ratio_mean;
        rec.ratio_max = stats.ratio_max;
        rec.clip_fraction = stats.clip_fraction;
        rec.tau_used = stats.tau_used;
        if (!std::isfinite(rec.objective)) {
            throw NumericError("train_semi diverged at step " + std::to_string(step));
        }
        result.curve.push_back(rec);
    }
    return result;
}

// --- buffer file ---

namespace {

static_assert(std::endian::native == std::endian::little,
              "buffer format is little-endian");

void write_raw(std::ofstream& os, const void* data, std::size_t n) {
    os.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
}

void read_raw(std::ifstream& is, void* data, std::size_t n, const char* what) {
    is.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
    if (!is) throw IoError(std::string("buffer file: truncated ") + what);
}

void write_vec(std::ofstream& os, const Vec& v) {
    const std::uint32_t n = static_cast<std::uint32_t>(v.size());
    write_raw(os, &n, sizeof(n));
    write_raw(os, v.data(), v.size() * sizeof(double));
}

Vec read_vec(std::ifstream& is) {
    std::uint32_t n = 0;
    read_raw(is, &n, sizeof(n), "vector length");
    Vec v(n);
    read_raw(is, v.data(), v.size() * sizeof(double), "vector data");
    return v;
}

void write_string(std::ofstream& os, const std::string& s) {
    const std::uint32_t n = static_cast<std::uint32_t>(s.size());
    write_raw(os, &n, sizeof(n));
    write_raw(os, s.data(), s.size());
}

std::string read_string(std::ifstream& is) {
    std::uint32_t n = 0;
    read_raw(is, &n, sizeof(n), "string length");
    std::string s(n, '\0');
    read_raw(is, s.data(), s.size(), "string data");
    return s;
}

void write_trajectory(std::ofstream& os, const ChunkTrajectory& traj) {
    const std::uint32_t T = static_cast<std::uint32_t>(traj.steps.size());
    write_raw(os, &T, sizeof(T));
    for (const auto& rec : traj.steps) {
        write_raw(os, &rec.t, sizeof(rec.t));
        write_vec(os, rec.x_t);
        write_vec(os, rec.x0_pred);
    }
    write_vec(os, traj.clean);
}

ChunkTrajectory read_trajectory(std::ifstream& is) {
    std::uint32_t T = 0;
    read_raw(is, &T, sizeof(T), "trajectory length");
    ChunkTrajectory traj;
    traj.steps.reserve(T);
    for (std::uint32_t k = 0; k < T; ++k) {
        StepRecord rec;
        read_raw(is, &rec.t, sizeof(rec.t), "step t");
        rec.x_t = read_vec(is);
        rec.x0_pred = read_vec(is);
        traj.steps.push_back(std::move(rec));
    }
    traj.clean = read_vec(is);
    return traj;
}

}  // namespace

void save_buffer(const std::filesystem::path& path, const ReplayBuffer& buffer,
                 std::uint64_t config_hash, std::uint64_t root_seed) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open buffer file for writing: " + path.string());
    write_raw(os, kBufferMagic, sizeof(kBufferMagic) - 1);
    write_raw(os, &config_hash, sizeof(config_hash));
    write_raw(os, &root_seed, sizeof(root_seed));
    write_raw(os, &buffer.reference_id, sizeof(buffer.reference_id));
    const std::uint32_t n = static_cast<std::uint32_t>(buffer.entries.size());
    write_raw(os, &n, sizeof(n));
    for (const auto& e : buffer.entries) {
        const std::int32_t pivot = e.pivot;
        write_raw(os, &pivot, sizeof(pivot));
        write_vec(os, e.context.h);
        const std::int32_t chunk_index = e.context.chunk_index;
        write_raw(os, &chunk_index, sizeof(chunk_index));
        write_vec(os, e.base_noise);
        const std::uint32_t G = static_cast<std::uint32_t>(e.member_noises.size());
        write_raw(os, &G, sizeof(G));
        for (const auto& m : e.member_noises) write_vec(os, m);
        const std::uint32_t S = static_cast<std::uint32_t>(e.pivot_solver_noises.size());
        write_raw(os, &S, sizeof(S));
        for (const auto& z : e.pivot_solver_noises) write_vec(os, z);
        for (const auto& c : e.candidates) write_trajectory(os, c);
        write_vec(os, e.rewards);
        write_raw(os, &e.prompt.prompt_seed, sizeof(e.prompt.prompt_seed));
        write_vec(os, e.prompt.target);
        write_raw(os, &e.root_seed, sizeof(e.root_seed));
        write_string(os, e.iter_label);
    }
    if (!os) throw IoError("buffer write failed: " + path.string());
}

ReplayBuffer load_buffer(const std::filesystem::path& path, const ModelDims& expected,
                         std::uint64_t expected_reference_id) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw NotFoundError("buffer file not found: " + path.string());
    char magic[sizeof(kBufferMagic) - 1];
    read_raw(is, magic, sizeof(magic), "magic");
    if (std::memcmp(magic, kBufferMagic, sizeof(magic)) != 0) {
        throw IoError("not a buffer file: " + path.string());
    }
    std::uint64_t config_hash = 0, root_seed = 0;
    read_raw(is, &config_hash, sizeof(config_hash), "header");
    read_raw(is, &root_seed, sizeof(root_seed), "header");
    ReplayBuffer buffer;
    read_raw(is, &buffer.reference_id, sizeof(buffer.reference_id), "reference id");
    if (expected_reference_id != 0 && buffer.reference_id != expected_reference_id) {
        throw std::invalid_argument("buffer reference checkpoint mismatch: " + path.string());
    }
    std::uint32_t n = 0;
    read_raw(is, &n, sizeof(n), "entry count");
    buffer.entries.reserve(n);
    for (std::uint32_t i = 0; i < n; ++i) {
        ReplayEntry e;
        std::int32_t pivot = 0;
        read_raw(is, &pivot, sizeof(pivot), "pivot");
        e.pivot = pivot;
        e.context.h = read_vec(is);
        std::int32_t chunk_index = 0;
        read_raw(is, &chunk_index, sizeof(chunk_index), "chunk index");
        e.context.chunk_index = chunk_index;
        e.base_noise = read_vec(is);
        std::uint32_t G = 0;
        read_raw(is, &G, sizeof(G), "group size");
        for (std::uint32_t g = 0; g < G; ++g) e.member_noises.push_back(read_vec(is));
        std::uint32_t S = 0;
        read_raw(is, &S, sizeof(S), "solver count");
        for (std::uint32_t s = 0; s < S; ++s) e.pivot_solver_noises.push_back(read_vec(is));
        for (std::uint32_t g = 0; g < G; ++g) e.candidates.push_back(read_trajectory(is));
        e.rewards = read_vec(is);
        read_raw(is, &e.prompt.prompt_seed, sizeof(e.prompt.prompt_seed), "prompt seed");
        e.prompt.target = read_vec(is);
        read_raw(is, &e.root_seed, sizeof(e.root_seed), "root seed");
        e.iter_label = read_string(is);
        if (static_cast<int>(e.context.h.size()) != expected.context_dim ||
            static_cast<int>(e.base_noise.size()) != expected.chunk_dim) {
            throw std::invalid_argument("buffer dimensions do not match: " + path.string());
        }
        buffer.entries.push_back(std::move(e));
    }
    return buffer;
}

}  // namespace arcopo
