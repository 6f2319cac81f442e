#include "arcopo/commands.hpp"

#include <cstdio>
#include <fstream>
#include <iostream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "arcopo/adapters.hpp"
#include "arcopo/errors.hpp"
#include "arcopo/evalsuite.hpp"
#include "arcopo/rollout.hpp"
#include "arcopo/semipolicy.hpp"

namespace fs = std::filesystem;

namespace arcopo {

TrainMode train_mode_from_string(const std::string& s) {
    if (s == "on" || s == "on_policy") return TrainMode::on_policy;
    if (s == "semi") return TrainMode::semi;
    if (s == "off" || s == "off_policy_ablation") return TrainMode::off_policy_ablation;
    if (s == "sde" || s == "sde_baseline") return TrainMode::sde_baseline;
    throw std::invalid_argument("unknown train mode: " + s);
}

std::string to_string(TrainMode mode) {
    switch (mode) {
        case TrainMode::on_policy: return "on_policy";
        case TrainMode::semi: return "semi";
        case TrainMode::off_policy_ablation: return "off_policy";
        case TrainMode::sde_baseline: return "sde";
    }
    return "?";
}

fs::path reference_path(const ExperimentConfig& cfg) {
    return fs::path(cfg.out_dir) / "reference.ckpt";
}
fs::path buffer_path(const ExperimentConfig& cfg) {
    return fs::path(cfg.out_dir) / "buffer.bin";
}
fs::path adapter_path(const ExperimentConfig& cfg, TrainMode mode) {
    return fs::path(cfg.out_dir) / ("adapter_" + to_string(mode) + ".bin");
}
fs::path curve_csv_path(const ExperimentConfig& cfg, TrainMode mode) {
    return fs::path(cfg.out_dir) / ("curves_" + to_string(mode) + ".csv");
}
fs::path curve_jsonl_path(const ExperimentConfig& cfg, TrainMode mode) {
    return fs::path(cfg.out_dir) / ("curves_" + to_string(mode) + ".jsonl");
}

namespace {

int guard(const char* what, const std::function<int()>& fn) {
    try {
        return fn();
    } catch (const NotFoundError& e) {
        std::cerr << what << ": " << e.what() << "\n";
        return kExitMissingArtifact;
    } catch (const NumericError& e) {
        std::cerr << what << ": " << e.what() << "\n";
        return kExitNumericFailure;
    } catch (const std::invalid_argument& e) {
        std::cerr << what << ": " << e.what() << "\n";
        return kExitInvalidConfig;
    } catch (const IoError& e) {
        std::cerr << what << ": " << e.what() << "\n";
        return kExitInvalidConfig;
    }
}

ModelParams load_reference(const ExperimentConfig& cfg) {
    return load_checkpoint(reference_path(cfg), cfg.dims);
}

std::vector<PromptSpec> train_prompts(const ExperimentConfig& cfg) {
    return make_prompt_set(cfg.root_seed, "prompts.train", cfg.prompt_train_count,
                           cfg.dims.chunk_dim, cfg.prompt_scale);
}

std::vector<PromptSpec> heldout_prompts(const ExperimentConfig& cfg) {
    return make_prompt_set(cfg.root_seed, "prompts.heldout", cfg.prompt_heldout_count,
                           cfg.dims.chunk_dim, cfg.prompt_scale);
}

EvalSuite make_eval_suite(const ExperimentConfig& cfg, int rollouts) {
    EvalSuite suite;
    suite.in_domain = train_prompts(cfg);
    suite.held_out = heldout_prompts(cfg);
    suite.optimized = cfg.reward;
    suite.sampler = cfg.sampler;
    suite.sequence_length = cfg.sequence_length;
    suite.rollouts_per_prompt = rollouts;
    suite.eval_seed = RngStream(cfg.root_seed).child("eval-suite").root_seed() ^ 0x5EEDULL;
    return suite;
}

ReplayBuffer obtain_buffer(const ExperimentConfig& cfg, const ModelParams& ref) {
    const fs::path path = buffer_path(cfg);
    const std::uint64_t ref_id = params_fingerprint(ref);
    if (fs::exists(path)) {
        return load_buffer(path, cfg.dims, ref_id);
    }
    ReplayBuffer buffer =
        collect_buffer(ref, train_prompts(cfg), cfg.reward, cfg.copo, cfg.sampler,
                       cfg.sequence_length, cfg.buffer_groups,
                       RngStream(cfg.root_seed).child("buffer"));
    save_buffer(path, buffer, config_hash(cfg), cfg.root_seed);
    return buffer;
}

}  // namespace

int cmd_pretrain(const ExperimentConfig& cfg) {
    return guard("pretrain", [&]() {
        cfg.validate();
        fs::create_directories(cfg.out_dir);
        std::vector<PretrainCurvePoint> curve;
        const ModelParams params = pretrain_reference(cfg.dims, cfg.sampler, cfg.pretrain, &curve);
        save_checkpoint(reference_path(cfg), params, {config_hash(cfg), cfg.root_seed});

        std::ofstream os(fs::path(cfg.out_dir) / "pretrain_curve.csv", std::ios::trunc);
        if (!os) throw IoError("cannot write pretrain curve");
        char buf[256];
        std::snprintf(buf, sizeof(buf), "# config_hash=%016llx root_seed=%llu\n",
                      static_cast<unsigned long long>(config_hash(cfg)),
                      static_cast<unsigned long long>(cfg.root_seed));
        os << buf << "step,eval_mse\n";
        for (const auto& pt : curve) {
            std::snprintf(buf, sizeof(buf), "%d,%.17g\n", pt.step, pt.eval_mse);
            os << buf;
        }
        const double first = curve.front().eval_mse;
        const double last = curve.back().eval_mse;
        std::cout << "pretrain: wrote " << reference_path(cfg).string() << " (eval mse " << first
                  << " -> " << last << ")\n";
        return kExitOk;
    });
}

int cmd_train(const ExperimentConfig& cfg, TrainMode mode) {
    return guard("train", [&]() {
        cfg.validate();
        fs::create_directories(cfg.out_dir);
        const ModelParams ref = load_reference(cfg);

        LowRankAdapter adapter = LowRankAdapter::init(
            cfg.dims, cfg.adapter_rank, cfg.adapter_alpha, to_string(mode),
            RngStream(cfg.root_seed).child("adapter." + to_string(mode)),
            cfg.adapter_init_scale);
        Policy policy(ref, std::move(adapter));

        const std::vector<PromptSpec> prompts = train_prompts(cfg);
        TrainResult result;
        switch (mode) {
            case TrainMode::on_policy:
                // the fresh-rollout modes share one stream so a paired
                // comparison sees identical pivots, plans and prompts
                result = train_on_policy(policy, prompts, cfg.reward, cfg.copo, cfg.sampler,
                                         cfg.sequence_length, cfg.train_iterations,
                                         RngStream(cfg.root_seed).child("train.fresh"),
                                         cfg.train_plan_cycle);
                break;
            case TrainMode::sde_baseline:
                result = train_sde_baseline(policy, prompts, cfg.reward, cfg.copo, cfg.sampler,
                                            cfg.sequence_length, cfg.train_iterations,
                                            RngStream(cfg.root_seed).child("train.fresh"),
                                            cfg.train_plan_cycle);
                break;
            case TrainMode::semi:
            case TrainMode::off_policy_ablation: {
                const ReplayBuffer buffer = obtain_buffer(cfg, ref);
                // Both buffered modes share the batch stream so a paired
                // run differs only in the clipping.
                result = train_semi(policy, buffer, cfg.copo, cfg.sampler, cfg.semi_steps,
                                    mode == TrainMode::semi,
                                    RngStream(cfg.root_seed).child("train.buffered"));
                break;
            }
        }

        save_adapter(adapter_path(cfg, mode), policy.adapter(), config_hash(cfg), cfg.root_seed);
        write_curve_csv(result.curve, config_hash(cfg), cfg.root_seed, curve_csv_path(cfg, mode));
        write_curve_jsonl(result.curve, config_hash(cfg), cfg.root_seed,
                          curve_jsonl_path(cfg, mode));
        std::cout << "train[" << to_string(mode) << "]: wrote "
                  << adapter_path(cfg, mode).string() << " and curves ("
                  << result.curve.size() << " iterations)\n";
        return kExitOk;
    });
}

std::vector<PivotStudy> run_entropy_study(const ExperimentConfig& cfg,
                                          const ModelParams& params) {
    const int T = cfg.sampler.steps();
    std::vector<PivotStudy> out;
    RngStream root = RngStream(cfg.root_seed).child("study");
    const std::vector<PromptSpec> prompts = make_prompt_set(
        cfg.root_seed, "prompts.study", cfg.study_plans, cfg.dims.chunk_dim, cfg.prompt_scale);
    for (int pivot1 : cfg.study_pivots) {
        const int pivot = pivot1 - 1;
        RngStream ps = root.child("pivot." + std::to_string(pivot1));

        std::vector<SubstitutionSite> sites;
        sites.push_back({SubstitutionSite::Kind::init, pivot, 0});
        for (int k = 0; k + 1 < T; ++k) {
            sites.push_back({SubstitutionSite::Kind::solver, pivot, k});
        }

        // Averaging over independent plans (and prompts) estimates the
        // model's expected divergence per site rather than one plan's.
        std::vector<SiteDivergence> mean_sites(sites.size());
        for (std::size_t s = 0; s < sites.size(); ++s) {
            mean_sites[s].site = sites[s];
            mean_sites[s].trials = cfg.study_trials;
            mean_sites[s].per_chunk.assign(static_cast<std::size_t>(cfg.sequence_length), 0.0);
        }
        for (int j = 0; j < cfg.study_plans; ++j) {
            RngStream js = ps.child("plan." + std::to_string(j));
            const NoisePlan plan =
                make_plan(js.child("draws"), cfg.sequence_length, T, cfg.dims.chunk_dim);
            const DivergenceReport report = substitution_study(
                params, prompts[static_cast<std::size_t>(j)], plan, cfg.sampler, sites,
                cfg.study_trials, js.child("redraw"));
            for (std::size_t s = 0; s < sites.size(); ++s) {
                mean_sites[s].total += report.sites[s].total / cfg.study_plans;
                for (int q = 0; q < cfg.sequence_length; ++q) {
                    mean_sites[s].per_chunk[static_cast<std::size_t>(q)] +=
                        report.sites[s].per_chunk[static_cast<std::size_t>(q)] / cfg.study_plans;
                }
            }
        }

        PivotStudy study;
        study.pivot = pivot1;
        study.init_site = mean_sites.front();
        double solver_total = 0.0;
        for (std::size_t i = 1; i < mean_sites.size(); ++i) {
            study.solver_sites.push_back(mean_sites[i]);
            solver_total += mean_sites[i].total;
        }
        const double solver_mean =
            study.solver_sites.empty() ? 0.0 : solver_total / study.solver_sites.size();
        study.dominance_ratio = solver_mean > 0.0 ? study.init_site.total / solver_mean : 0.0;
        out.push_back(std::move(study));
    }
    return out;
}

int cmd_entropy_study(const ExperimentConfig& cfg) {
    return guard("entropy-study", [&]() {
        cfg.validate();
        fs::create_directories(cfg.out_dir);
        const ModelParams params = load_reference(cfg);
        const std::vector<PivotStudy> studies = run_entropy_study(cfg, params);

        std::ofstream os(fs::path(cfg.out_dir) / "entropy_study.jsonl", std::ios::trunc);
        if (!os) throw IoError("cannot write entropy study report");
        char hash[32];
        std::snprintf(hash, sizeof(hash), "%016llx",
                      static_cast<unsigned long long>(config_hash(cfg)));
        nlohmann::json meta;
        meta["config_hash"] = hash;
        meta["root_seed"] = cfg.root_seed;
        os << meta.dump() << "\n";
        for (const auto& study : studies) {
            auto site_json = [&study](const SiteDivergence& d) {
                nlohmann::json j;
                j["pivot"] = study.pivot;
                j["site"] = d.site.name();
                j["per_chunk"] = d.per_chunk;
                j["total"] = d.total;
                j["trials"] = d.trials;
                return j;
            };
            os << site_json(study.init_site).dump() << "\n";
            for (const auto& s : study.solver_sites) os << site_json(s).dump() << "\n";
            nlohmann::json summary;
            summary["pivot"] = study.pivot;
            summary["dominance_ratio"] = study.dominance_ratio;
            os << summary.dump() << "\n";
            std::cout << "entropy-study: pivot " << study.pivot << " init total "
                      << study.init_site.total << ", dominance ratio " << study.dominance_ratio
                      << "\n";
        }
        return kExitOk;
    });
}

int cmd_sweep(const ExperimentConfig& cfg) {
    return guard("sweep", [&]() {
        cfg.validate();
        fs::create_directories(cfg.out_dir);
        const ModelParams ref = load_reference(cfg);
        const LowRankAdapter semi = load_adapter(adapter_path(cfg, TrainMode::semi), cfg.dims);
        const LowRankAdapter on = load_adapter(adapter_path(cfg, TrainMode::on_policy), cfg.dims);

        const EvalSuite suite = make_eval_suite(cfg, cfg.sweep_eval_rollouts);
        const SweepReport report = scale_sweep(ref, semi, on, cfg.sweep_scales, suite,
                                               cfg.sweep_heldout_tolerance);
        write_sweep_csv(report, config_hash(cfg), cfg.root_seed,
                        fs::path(cfg.out_dir) / "sweep.csv");
        std::cout << "sweep: selected scale " << report.selected_scale
                  << (report.no_improvement ? " (no improvement)" : "") << "\n";
        return kExitOk;
    });
}

int cmd_eval(const ExperimentConfig& cfg) {
    return guard("eval", [&]() {
        cfg.validate();
        fs::create_directories(cfg.out_dir);
        const ModelParams ref = load_reference(cfg);
        const EvalSuite suite = make_eval_suite(cfg, cfg.eval_rollouts);

        std::ofstream os(fs::path(cfg.out_dir) / "eval.csv", std::ios::trunc);
        if (!os) throw IoError("cannot write eval report");
        char buf[512];
        std::snprintf(buf, sizeof(buf), "# config_hash=%016llx root_seed=%llu\n",
                      static_cast<unsigned long long>(config_hash(cfg)),
                      static_cast<unsigned long long>(cfg.root_seed));
        os << buf << "model,in_domain,held_out,monitor_motion,monitor_quality\n";

        auto emit = [&](const std::string& name, const ModelParams& params) {
            const EvalResult r = evaluate(params, suite);
            std::snprintf(buf, sizeof(buf), "%s,%.17g,%.17g,%.17g,%.17g\n", name.c_str(),
                          r.in_domain, r.held_out, r.monitor_motion, r.monitor_quality);
            os << buf;
            std::cout << "eval[" << name << "]: in_domain " << r.in_domain << " held_out "
                      << r.held_out << "\n";
        };
        emit("reference", ref);
        const fs::path semi_path = adapter_path(cfg, TrainMode::semi);
        const fs::path on_path = adapter_path(cfg, TrainMode::on_policy);
        if (fs::exists(on_path)) {
            const LowRankAdapter on = load_adapter(on_path, cfg.dims);
            const std::pair<const LowRankAdapter*, double> merge_on[] = {{&on, 1.0}};
            emit("on_policy", effective_params(ref, merge_on));
        }
        if (fs::exists(semi_path)) {
            const LowRankAdapter semi = load_adapter(semi_path, cfg.dims);
            const std::pair<const LowRankAdapter*, double> merge_semi[] = {{&semi, 1.0}};
            emit("semi", effective_params(ref, merge_semi));
            if (fs::exists(on_path)) {
                const LowRankAdapter on = load_adapter(on_path, cfg.dims);
                for (double s : cfg.sweep_scales) {
                    if (s == 0.0) continue;
                    const std::pair<const LowRankAdapter*, double> merged[] = {{&semi, 1.0},
                                                                               {&on, s}};
                    char name[64];
                    std::snprintf(name, sizeof(name), "merged@%g", s);
                    emit(name, effective_params(ref, merged));
                }
            }
        }
        return kExitOk;
    });
}

}  // namespace arcopo
