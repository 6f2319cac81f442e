#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "arcopo/experiment.hpp"
#include "arcopo/neighborhood.hpp"

namespace arcopo {

enum class TrainMode { on_policy, semi, off_policy_ablation, sde_baseline };

TrainMode train_mode_from_string(const std::string& s);
std::string to_string(TrainMode mode);

// Exit codes shared by all commands.
inline constexpr int kExitOk = 0;
inline constexpr int kExitInvalidConfig = 2;
inline constexpr int kExitMissingArtifact = 3;
inline constexpr int kExitNumericFailure = 4;

// Artifact locations inside cfg.out_dir.
std::filesystem::path reference_path(const ExperimentConfig& cfg);
std::filesystem::path buffer_path(const ExperimentConfig& cfg);
std::filesystem::path adapter_path(const ExperimentConfig& cfg, TrainMode mode);
std::filesystem::path curve_csv_path(const ExperimentConfig& cfg, TrainMode mode);
std::filesystem::path curve_jsonl_path(const ExperimentConfig& cfg, TrainMode mode);

/// Per-pivot outcome of the entropy-source study.
struct PivotStudy {
    int pivot = 0;  // 1-based
    SiteDivergence init_site;
    std::vector<SiteDivergence> solver_sites;
    double dominance_ratio = 0.0;  // init total / mean solver total
};

/// The substitution study over init and every solver site at each
/// configured pivot, on the given parameters.
std::vector<PivotStudy> run_entropy_study(const ExperimentConfig& cfg,
                                          const ModelParams& params);

int cmd_pretrain(const ExperimentConfig& cfg);
int cmd_train(const ExperimentConfig& cfg, TrainMode mode);
int cmd_entropy_study(const ExperimentConfig& cfg);
int cmd_sweep(const ExperimentConfig& cfg);
int cmd_eval(const ExperimentConfig& cfg);

}  // namespace arcopo
