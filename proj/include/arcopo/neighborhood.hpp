#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "arcopo/rng.hpp"
#include "arcopo/vecmath.hpp"

namespace arcopo {

struct ModelParams;
struct SamplerConfig;
struct PromptSpec;

/// Every random draw one rollout consumes: per-chunk initial noises plus
/// per-step solver noises. Holding the plan fixed makes the rollout a
/// pure function of the parameters.
struct NoisePlan {
    std::vector<Vec> init_noises;                // L entries of chunk_dim
    std::vector<std::vector<Vec>> solver_noises; // L x (T-1) entries of chunk_dim
    std::uint64_t root_seed = 0;                 // provenance
    std::string label;

    int chunks() const { return static_cast<int>(init_noises.size()); }
    int steps() const;  // T
    int chunk_dim() const;
};

NoisePlan make_plan(RngStream stream, int L, int T, int chunk_dim);

/// G neighbors of a base noise: eps_i = sqrt(1-sigma^2)*base + sigma*delta_i.
struct NoiseNeighborhood {
    Vec base;
    double sigma = 0.0;
    std::vector<Vec> members;  // G
    std::vector<Vec> deltas;   // G
};

/// sigma in [0,1]; the closed boundary values are admitted (0 duplicates
/// the base, 1 ignores it) because tests lean on them. G >= 2.
NoiseNeighborhood perturb(const Vec& base, double sigma, int G, RngStream stream);

/// G noise plans identical to the source plan except for the pivot
/// chunk's initial noise.
struct BranchPlans {
    int pivot = 0;  // 0-based chunk index
    std::vector<NoisePlan> plans;
};

/// `pivot` is 0-based. hood.base must equal plan.init_noises[pivot]
/// bit-exactly; anything else means the caller is about to break noise
/// sharing, so it is rejected.
BranchPlans fork(const NoisePlan& plan, int pivot, const NoiseNeighborhood& hood);

struct SubstitutionSite {
    enum class Kind { init, solver };
    Kind kind = Kind::init;
    int chunk = 0;  // 0-based
    int step = 0;   // 0-based solver-noise index, Kind::solver only

    std::string name() const;
};

struct SiteDivergence {
    SubstitutionSite site;
    std::vector<double> per_chunk;  // mean L2 distance per chunk
    double total = 0.0;             // mean L2 over the concatenated sequence
    int trials = 0;
};

struct DivergenceReport {
    std::vector<SiteDivergence> sites;
    int trials = 0;
};

/// Freezes `plan`, rolls out a reference sequence, then for each site
/// redraws only that noise `trials` times and reports the mean L2
/// distance to the reference, per chunk and total. Redraws come from
/// labeled substreams of `redraw_stream` so the study itself reruns
/// bit-identically.
DivergenceReport substitution_study(const ModelParams& params, const PromptSpec& prompt,
                                    const NoisePlan& plan, const SamplerConfig& cfg,
                                    std::span<const SubstitutionSite> sites, int trials,
                                    RngStream redraw_stream);

/// One JSONL record per site: {"site":..., "per_chunk":[...], "total":..., "trials":...}
void write_jsonl(const DivergenceReport& report, std::ostream& os);

}  // namespace arcopo
