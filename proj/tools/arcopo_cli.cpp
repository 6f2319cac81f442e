// Experiment runner: pretrain the reference generator, run the training
// modes, the entropy-source study, the merge-scale sweep and reward
// evaluation, all driven by a flat key-value config.

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>

#include "arcopo/commands.hpp"
#include "arcopo/errors.hpp"
#include "arcopo/experiment.hpp"

namespace {

struct GlobalArgs {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out_dir;
};

int load_and_override(const GlobalArgs& args, arcopo::ExperimentConfig& cfg) {
    try {
        if (!args.config_path.empty()) {
            cfg = arcopo::load_config(args.config_path);
        } else {
            cfg = arcopo::ExperimentConfig{};
        }
        if (args.seed) cfg.root_seed = *args.seed;
        if (args.out_dir) cfg.out_dir = *args.out_dir;
        cfg.validate();
    } catch (const arcopo::NotFoundError& e) {
        std::cerr << e.what() << "\n";
        return arcopo::kExitMissingArtifact;
    } catch (const std::exception& e) {
        std::cerr << "invalid config: " << e.what() << "\n";
        return arcopo::kExitInvalidConfig;
    }
    return arcopo::kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"arcopo: chunk-level contrastive policy optimization lab"};
    app.require_subcommand(1);
    app.fallthrough();

    GlobalArgs args;
    app.add_option("--config", args.config_path, "configuration file (key = value lines)");
    std::uint64_t seed_value = 0;
    auto* seed_opt = app.add_option("--seed", seed_value, "override root_seed");
    std::string out_value;
    auto* out_opt = app.add_option("--out", out_value, "override out_dir");

    auto* pretrain = app.add_subcommand("pretrain", "train the reference generator");
    std::string mode_str = "on";
    auto* train = app.add_subcommand("train", "run a training mode against the reference");
    train->add_option("--mode", mode_str, "on | semi | off | sde")->required();
    auto* study = app.add_subcommand("entropy-study", "noise-substitution divergence study");
    auto* sweep = app.add_subcommand("sweep", "adapter merge-scale sweep");
    auto* eval = app.add_subcommand("eval", "reward evaluation of stored artifacts");
    auto* print_config =
        app.add_subcommand("print-config", "print a commented default configuration");

    CLI11_PARSE(app, argc, argv);

    if (print_config->parsed()) {
        std::cout << arcopo::example_config_text();
        return arcopo::kExitOk;
    }

    if (*seed_opt) args.seed = seed_value;
    if (*out_opt) args.out_dir = out_value;

    arcopo::ExperimentConfig cfg;
    if (const int rc = load_and_override(args, cfg); rc != arcopo::kExitOk) return rc;

    if (pretrain->parsed()) return arcopo::cmd_pretrain(cfg);
    if (train->parsed()) {
        arcopo::TrainMode mode;
        try {
            mode = arcopo::train_mode_from_string(mode_str);
        } catch (const std::exception& e) {
            std::cerr << e.what() << "\n";
            return arcopo::kExitInvalidConfig;
        }
        return arcopo::cmd_train(cfg, mode);
    }
    if (study->parsed()) return arcopo::cmd_entropy_study(cfg);
    if (sweep->parsed()) return arcopo::cmd_sweep(cfg);
    if (eval->parsed()) return arcopo::cmd_eval(cfg);
    return arcopo::kExitInvalidConfig;
}
