#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "arcopo/model.hpp"
#include "arcopo/rng.hpp"

namespace arcopo {

struct EvalSuite;

/// Low-rank delta for every dense layer of the model: per matrix a pair
/// (U: out x r, V: r x in) contributing (alpha/r) * U * V. U starts at
/// zero so a fresh adapter is exactly a no-op.
struct LowRankAdapter {
    int rank = 4;
    double alpha = 8.0;  // alpha = 2*rank by default
    std::string tag;     // "on_policy" | "semi" | free-form

    struct Factor {
        Matrix u;  // out x r, zero-initialized
        Matrix v;  // r x in, random
    };
    Factor w1, w2, w3, we;
    ModelDims dims;

    /// init_scale multiplies the 1/sqrt(in) factor initialization of V.
    static LowRankAdapter init(const ModelDims& dims, int rank, double alpha,
                               std::string tag, RngStream stream, double init_scale = 1.0);

    /// (alpha/r) * U * V for one factor, as a dense rows x cols block.
    static Matrix delta(const Factor& f, double alpha, int rank);

    std::size_t factor_count() const;
    Vec flatten_factors() const;
    void set_factors(const Vec& flat);
};

/// base + sum_k scale_k * delta_k. A zero scale skips the addition so
/// the result is bit-identical to the unmerged weights.
ModelParams effective_params(const ModelParams& base,
                             std::span<const std::pair<const LowRankAdapter*, double>> adapters);

inline constexpr char kAdapterMagic[] = "ARCOPO-LORA-1";

void save_adapter(const std::filesystem::path& path, const LowRankAdapter& adapter,
                  std::uint64_t config_hash, std::uint64_t root_seed);
LowRankAdapter load_adapter(const std::filesystem::path& path, const ModelDims& expected);

// --- merge-scale sweep ---

struct SweepRow {
    double scale = 0.0;
    double in_domain = 0.0;       // optimized reward on training prompts
    double held_out = 0.0;        // optimized reward on unseen prompts
    double monitor_motion = 0.0;  // non-optimized monitors on held-out prompts
    double monitor_quality = 0.0;
    bool selected = false;
};

struct SweepReport {
    std::vector<SweepRow> rows;
    double base_in_domain = 0.0;
    double base_held_out = 0.0;
    double selected_scale = 0.0;
    bool no_improvement = false;
};

/// Dual-improvement selection: marks and returns the LARGEST scale whose
/// in-domain metric strictly improves on the base while the held-out
/// metric is not degraded beyond `heldout_tolerance` (relative). Falls
/// back to s=0 with no_improvement set when nothing qualifies.
void select_dual_improvement(SweepReport& report, double heldout_tolerance);

/// Evaluates base + semi@1 + on@s for each scale, then applies
/// select_dual_improvement against the bare base model's metrics.
SweepReport scale_sweep(const ModelParams& base, const LowRankAdapter& semi_adapter,
                        const LowRankAdapter& on_adapter, std::span<const double> scales,
                        const EvalSuite& suite, double heldout_tolerance = 0.0);

void write_sweep_csv(const SweepReport& report, std::uint64_t config_hash,
                     std::uint64_t root_seed, const std::filesystem::path& path);

}  // namespace arcopo
