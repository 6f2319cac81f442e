#include "arcopo/neighborhood.hpp"

#include <cmath>
#include <ostream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "arcopo/model.hpp"
#include "arcopo/prompt.hpp"

namespace arcopo {

int NoisePlan::steps() const {
    if (solver_noises.empty()) return 1;
    return static_cast<int>(solver_noises[0].size()) + 1;
}

int NoisePlan::chunk_dim() const {
    return init_noises.empty() ? 0 : static_cast<int>(init_noises[0].size());
}

NoisePlan make_plan(RngStream stream, int L, int T, int chunk_dim) {
    if (L < 1 || T < 1 || chunk_dim < 1) {
        throw std::invalid_argument("make_plan: L, T, chunk_dim must be >= 1");
    }
    NoisePlan plan;
    plan.root_seed = stream.root_seed();
    plan.label = stream.path();
    plan.init_noises.reserve(static_cast<std::size_t>(L));
    for (int q = 0; q < L; ++q) {
        RngStream s = stream.child("init." + std::to_string(q));
        plan.init_noises.push_back(s.gaussian(static_cast<std::size_t>(chunk_dim)));
    }
    plan.solver_noises.resize(static_cast<std::size_t>(L));
    for (int q = 0; q < L; ++q) {
        for (int k = 0; k + 1 < T; ++k) {
            RngStream s = stream.child("solver." + std::to_string(q) + "." + std::to_string(k));
            plan.solver_noises[static_cast<std::size_t>(q)].push_back(
                s.gaussian(static_cast<std::size_t>(chunk_dim)));
        }
    }
    return plan;
}

NoiseNeighborhood perturb(const Vec& base, double sigma, int G, RngStream stream) {
    if (!(sigma >= 0.0 && sigma <= 1.0)) {
        throw std::invalid_argument("perturb: sigma must lie in [0, 1]");
    }
    if (G < 2) throw std::invalid_argument("perturb: group needs G >= 2");
    if (base.empty()) throw std::invalid_argument("perturb: empty base noise");

    NoiseNeighborhood hood;
    hood.base = base;
    hood.sigma = sigma;
    const double keep = std::sqrt(1.0 - sigma * sigma);
    for (int i = 0; i < G; ++i) {
        RngStream s = stream.child("delta." + std::to_string(i));
        Vec delta = s.gaussian(base.size());
        Vec member(base.size());
        for (std::size_t j = 0; j < base.size(); ++j) {
            member[j] = keep * base[j] + sigma * delta[j];
        }
        hood.deltas.push_back(std::move(delta));
        hood.members.push_back(std::move(member));
    }
    return hood;
}

BranchPlans fork(const NoisePlan& plan, int pivot, const NoiseNeighborhood& hood) {
    if (pivot < 0 || pivot >= plan.chunks()) {
        throw std::invalid_argument("fork: pivot out of range");
    }
    if (hood.base != plan.init_noises[static_cast<std::size_t>(pivot)]) {
        throw std::invalid_argument("fork: neighborhood base does not match the plan's pivot noise");
    }
    BranchPlans out;
    out.pivot = pivot;
    out.plans.reserve(hood.members.size());
    for (const Vec& member : hood.members) {
        NoisePlan p = plan;
        p.init_noises[static_cast<std::size_t>(pivot)] = member;
        out.plans.push_back(std::move(p));
    }
    return out;
}

std::string SubstitutionSite::name() const {
    if (kind == Kind::init) return "init." + std::to_string(chunk);
    return "solver." + std::to_string(chunk) + "." + std::to_string(step);
}

namespace {

void validate_site(const SubstitutionSite& site, const NoisePlan& plan) {
    if (site.chunk < 0 || site.chunk >= plan.chunks()) {
        throw std::invalid_argument("substitution_study: site chunk out of range");
    }
    if (site.kind == SubstitutionSite::Kind::solver) {
        const auto& sol = plan.solver_noises[static_cast<std::size_t>(site.chunk)];
        if (site.step < 0 || site.step >= static_cast<int>(sol.size())) {
            throw std::invalid_argument("substitution_study: site solver step out of range");
        }
    }
}

}  // namespace

DivergenceReport substitution_study(const ModelParams& params, const PromptSpec& prompt,
                                    const NoisePlan& plan, const SamplerConfig& cfg,
                                    std::span<const SubstitutionSite> sites, int trials,
                                    RngStream redraw_stream) {
    if (trials < 0) throw std::invalid_argument("substitution_study: trials must be >= 0");
    for (const auto& site : sites) validate_site(site, plan);

    const int L = plan.chunks();
    const SequenceLatents reference = rollout_sequence(params, prompt, plan, cfg, L);

    DivergenceReport report;
    report.trials = trials;
    for (const auto& site : sites) {
        SiteDivergence div;
        div.site = site;
        div.trials = trials;
        div.per_chunk.assign(static_cast<std::size_t>(L), 0.0);
        RngStream site_stream = redraw_stream.child(site.name());
        for (int trial = 0; trial < trials; ++trial) {
            RngStream s = site_stream.child("trial." + std::to_string(trial));
            NoisePlan perturbed = plan;
            Vec fresh = s.gaussian(static_cast<std::size_t>(plan.chunk_dim()));
            if (site.kind == SubstitutionSite::Kind::init) {
                perturbed.init_noises[static_cast<std::size_t>(site.chunk)] = std::move(fresh);
            } else {
                perturbed.solver_noises[static_cast<std::size_t>(site.chunk)]
                                       [static_cast<std::size_t>(site.step)] = std::move(fresh);
            }
            const SequenceLatents run = rollout_sequence(params, prompt, perturbed, cfg, L);
            double total_sq = 0.0;
            for (int q = 0; q < L; ++q) {
                const double dsq = l2sq_diff(run.chunks[static_cast<std::size_t>(q)].clean,
                                             reference.chunks[static_cast<std::size_t>(q)].clean);
                div.per_chunk[static_cast<std::size_t>(q)] += std::sqrt(dsq);
                total_sq += dsq;
            }
            div.total += std::sqrt(total_sq);
        }
        if (trials > 0) {
            for (double& d : div.per_chunk) d /= trials;
            div.total /= trials;
        }
        report.sites.push_back(std::move(div));
    }
    return report;
}

void write_jsonl(const DivergenceReport& report, std::ostream& os) {
    for (const auto& div : report.sites) {
        nlohmann::json rec;
        rec["site"] = div.site.name();
        rec["per_chunk"] = div.per_chunk;
        rec["total"] = div.total;
        rec["trials"] = div.trials;
        os << rec.dump() << "\n";
    }
}

}  // namespace arcopo
