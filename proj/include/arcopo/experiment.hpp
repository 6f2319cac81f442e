#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "arcopo/copo.hpp"
#include "arcopo/model.hpp"
#include "arcopo/rewards.hpp"

namespace arcopo {

/// Flat dotted-key configuration. A persisted config plus the root seed
/// pins every artifact byte.
struct ExperimentConfig {
    std::uint64_t root_seed = 1;
    std::string out_dir = "out";
    int sequence_length = 6;

    ModelDims dims;
    SamplerConfig sampler;
    CopoConfig copo;
    RewardSpec reward;

    // 10 divides both the 100-iteration default and the 10-iteration
    // curve windows, so windowed means always cover whole prompt cycles.
    int prompt_train_count = 10;
    int prompt_heldout_count = 8;
    double prompt_scale = 1.0;

    PretrainConfig pretrain;

    int train_iterations = 100;
    int train_plan_cycle = 10;  // 0 = fresh base plan every iteration

    int adapter_rank = 4;
    double adapter_alpha = 8.0;
    double adapter_init_scale = 1.0;

    int buffer_groups = 100;
    int semi_steps = 100;

    std::vector<double> sweep_scales = {0.0, 0.4, 0.6, 0.8, 1.0};
    int sweep_eval_rollouts = 8;
    double sweep_heldout_tolerance = 0.0;

    int study_trials = 16;
    int study_plans = 8;  // independent base plans averaged per pivot
    std::vector<int> study_pivots = {1, 4};  // 1-based chunk positions

    int eval_rollouts = 8;

    void validate() const;
};

/// Parse `key = value` lines ('#' comments, blank lines allowed).
/// Unknown keys are rejected.
ExperimentConfig parse_config_text(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);

/// Canonical serialization: sorted keys, full precision; re-parsing gives
/// an identical config.
std::string serialize_config(const ExperimentConfig& cfg);

/// FNV-1a over the canonical serialization.
std::uint64_t config_hash(const ExperimentConfig& cfg);

/// Commented reference config with the default values.
std::string example_config_text();

}  // namespace arcopo
