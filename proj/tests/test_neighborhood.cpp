#include <doctest.h>

#include <cmath>
#include <sstream>

#include "arcopo/model.hpp"
#include "arcopo/neighborhood.hpp"
#include "arcopo/prompt.hpp"

using namespace arcopo;

TEST_CASE("make_plan shapes and determinism") {
    const NoisePlan a = make_plan(RngStream(1).child("p"), 4, 3, 8);
    const NoisePlan b = make_plan(RngStream(1).child("p"), 4, 3, 8);
    CHECK(a.chunks() == 4);
    CHECK(a.steps() == 3);
    CHECK(a.chunk_dim() == 8);
    CHECK(a.init_noises == b.init_noises);
    CHECK(a.solver_noises == b.solver_noises);

    const NoisePlan tiny = make_plan(RngStream(2).child("p"), 1, 1, 3);
    CHECK(tiny.chunks() == 1);
    CHECK(tiny.steps() == 1);
    CHECK(tiny.solver_noises[0].empty());

    const NoisePlan c = make_plan(RngStream(3).child("p"), 4, 3, 8);
    for (int q = 0; q < 4; ++q) {
        CHECK(a.init_noises[q] != c.init_noises[q]);
    }
    CHECK_THROWS_AS(make_plan(RngStream(1), 0, 1, 1), std::invalid_argument);
}

TEST_CASE("perturb respects the interpolation identity") {
    RngStream base_stream = RngStream(5).child("base");
    const Vec base = base_stream.gaussian(16);

    SUBCASE("sigma=0 copies the base") {
        const NoiseNeighborhood hood = perturb(base, 0.0, 4, RngStream(6).child("h"));
        for (const Vec& m : hood.members) CHECK(m == base);
    }
    SUBCASE("sigma=1 copies the deltas") {
        const NoiseNeighborhood hood = perturb(base, 1.0, 4, RngStream(7).child("h"));
        for (int i = 0; i < 4; ++i) CHECK(hood.members[i] == hood.deltas[i]);
    }
    SUBCASE("hand-evaluated member") {
        const NoiseNeighborhood hood = perturb(Vec{1.0, 0.0}, 0.5, 2, RngStream(8).child("h"));
        for (int i = 0; i < 2; ++i) {
            const Vec& m = hood.members[i];
            const Vec& d = hood.deltas[i];
            CHECK(m[0] == doctest::Approx(0.8660254037844386 + 0.5 * d[0]).epsilon(1e-15));
            CHECK(m[1] == doctest::Approx(0.5 * d[1]).epsilon(1e-15));
        }
    }
    SUBCASE("identity holds exactly for generic sigma") {
        const double sigma = 0.5;
        const NoiseNeighborhood hood = perturb(base, sigma, 6, RngStream(9).child("h"));
        const double keep = std::sqrt(1.0 - sigma * sigma);
        for (int i = 0; i < 6; ++i) {
            for (std::size_t j = 0; j < base.size(); ++j) {
                CHECK(hood.members[i][j] == keep * base[j] + sigma * hood.deltas[i][j]);
            }
        }
    }
    SUBCASE("invalid arguments") {
        CHECK_THROWS_AS(perturb(base, -0.1, 4, RngStream(1)), std::invalid_argument);
        CHECK_THROWS_AS(perturb(base, 1.1, 4, RngStream(1)), std::invalid_argument);
        CHECK_THROWS_AS(perturb(base, 0.5, 1, RngStream(1)), std::invalid_argument);
    }
}

TEST_CASE("perturbed members preserve the standard normal marginal") {
    // 1e5 member coordinates per sigma; variance within 0.05 of 1 and
    // corr(member, base) within 0.05 of sqrt(1-sigma^2).
    for (double sigma : {0.25, 0.5, 0.9}) {
        RngStream s = RngStream(42).child("marginal");
        const int dim = 10000;
        const int G = 10;
        const Vec base = s.child("base").gaussian(dim);
        const NoiseNeighborhood hood = perturb(base, sigma, G, s.child("hood"));
        double sum = 0.0, sumsq = 0.0, cross = 0.0;
        double base_sumsq = 0.0;
        const int n = dim * G;
        for (int i = 0; i < G; ++i) {
            for (int j = 0; j < dim; ++j) {
                const double x = hood.members[i][j];
                sum += x;
                sumsq += x * x;
                cross += x * base[j];
            }
        }
        for (double b : base) base_sumsq += b * b;
        const double mean_x = sum / n;
        const double var_x = sumsq / n - mean_x * mean_x;
        CHECK(std::abs(var_x - 1.0) < 0.05);
        const double corr = (cross / n) / std::sqrt((base_sumsq / dim) * var_x);
        CHECK(std::abs(corr - std::sqrt(1.0 - sigma * sigma)) < 0.05);
    }
}

TEST_CASE("fork shares every non-pivot draw bit-exactly") {
    const NoisePlan plan = make_plan(RngStream(11).child("p"), 5, 3, 8);

    SUBCASE("base mismatch is rejected") {
        RngStream s = RngStream(12).child("x");
        NoiseNeighborhood hood = perturb(s.gaussian(8), 0.5, 4, RngStream(13).child("h"));
        CHECK_THROWS_AS(fork(plan, 2, hood), std::invalid_argument);
        CHECK_THROWS_AS(fork(plan, 9, hood), std::invalid_argument);
    }
    SUBCASE("sigma=0 gives identical plans") {
        const NoiseNeighborhood hood =
            perturb(plan.init_noises[2], 0.0, 4, RngStream(14).child("h"));
        const BranchPlans branches = fork(plan, 2, hood);
        for (const NoisePlan& p : branches.plans) {
            CHECK(p.init_noises == plan.init_noises);
            CHECK(p.solver_noises == plan.solver_noises);
        }
    }
    SUBCASE("plans differ only at the pivot") {
        for (int pivot : {0, 4}) {
            const NoiseNeighborhood hood =
                perturb(plan.init_noises[pivot], 0.5, 3, RngStream(15).child("h"));
            const BranchPlans branches = fork(plan, pivot, hood);
            REQUIRE(branches.plans.size() == 3);
            for (int i = 0; i < 3; ++i) {
                const NoisePlan& p = branches.plans[i];
                CHECK(p.init_noises[pivot] == hood.members[i]);
                for (int q = 0; q < 5; ++q) {
                    if (q != pivot) CHECK(p.init_noises[q] == plan.init_noises[q]);
                }
                CHECK(p.solver_noises == plan.solver_noises);
            }
        }
    }
}

TEST_CASE("fork locality: branch rollouts agree before the pivot") {
    const ModelDims dims{4, 6, 8, 8};
    const ModelParams params = ModelParams::random_init(dims, RngStream(50).child("init"));
    const PromptSpec prompt = PromptSpec::from_seed(51, 4);
    const SamplerConfig cfg{SamplerKind::consistency, {1.0, 0.6, 0.3}};
    const NoisePlan plan = make_plan(RngStream(52).child("p"), 5, 3, 4);
    const int pivot = 3;
    const NoiseNeighborhood hood =
        perturb(plan.init_noises[pivot], 0.7, 3, RngStream(53).child("h"));
    const BranchPlans branches = fork(plan, pivot, hood);

    std::vector<SequenceLatents> rollouts;
    for (const NoisePlan& p : branches.plans) {
        rollouts.push_back(rollout_sequence(params, prompt, p, cfg, 5));
    }
    for (int q = 0; q < pivot; ++q) {
        for (std::size_t i = 1; i < rollouts.size(); ++i) {
            CHECK(rollouts[i].chunks[q].clean == rollouts[0].chunks[q].clean);
            CHECK(rollouts[i].entry_contexts[q] == rollouts[0].entry_contexts[q]);
        }
    }
    bool pivot_differs = false;
    for (std::size_t i = 1; i < rollouts.size(); ++i) {
        if (rollouts[i].chunks[pivot].clean != rollouts[0].chunks[pivot].clean) {
            pivot_differs = true;
        }
    }
    CHECK(pivot_differs);
}

TEST_CASE("substitution_study") {
    const ModelDims dims{4, 6, 8, 8};
    const ModelParams params = ModelParams::random_init(dims, RngStream(60).child("init"));
    const PromptSpec prompt = PromptSpec::from_seed(61, 4);
    const SamplerConfig cfg{SamplerKind::consistency, {1.0, 0.6, 0.3}};
    const NoisePlan plan = make_plan(RngStream(62).child("p"), 4, 3, 4);

    SUBCASE("zero sites give an empty report") {
        const DivergenceReport r =
            substitution_study(params, prompt, plan, cfg, {}, 4, RngStream(63).child("r"));
        CHECK(r.sites.empty());
    }
    SUBCASE("redrawing an identical noise diverges by zero") {
        // trials=0 means no redraws; per-site stats stay zero.
        const SubstitutionSite site{SubstitutionSite::Kind::init, 1, 0};
        const DivergenceReport r =
            substitution_study(params, prompt, plan, cfg, {&site, 1}, 0,
                               RngStream(64).child("r"));
        CHECK(r.sites[0].total == 0.0);
    }
    SUBCASE("init substitution diverges, and only from the site onward") {
        const SubstitutionSite site{SubstitutionSite::Kind::init, 2, 0};
        const DivergenceReport r =
            substitution_study(params, prompt, plan, cfg, {&site, 1}, 3,
                               RngStream(65).child("r"));
        CHECK(r.sites[0].per_chunk[0] == 0.0);
        CHECK(r.sites[0].per_chunk[1] == 0.0);
        CHECK(r.sites[0].per_chunk[2] > 0.0);
        CHECK(r.sites[0].total > 0.0);
    }
    SUBCASE("study is reproducible and serializes to JSONL") {
        const SubstitutionSite sites[] = {{SubstitutionSite::Kind::init, 0, 0},
                                          {SubstitutionSite::Kind::solver, 0, 1}};
        const DivergenceReport a =
            substitution_study(params, prompt, plan, cfg, sites, 2, RngStream(66).child("r"));
        const DivergenceReport b =
            substitution_study(params, prompt, plan, cfg, sites, 2, RngStream(66).child("r"));
        CHECK(a.sites[0].total == b.sites[0].total);
        CHECK(a.sites[1].per_chunk == b.sites[1].per_chunk);
        std::ostringstream os;
        write_jsonl(a, os);
        CHECK(os.str().find("\"site\":\"init.0\"") != std::string::npos);
        CHECK(os.str().find("\"site\":\"solver.0.1\"") != std::string::npos);
    }
    SUBCASE("invalid sites are rejected") {
        const SubstitutionSite bad_chunk{SubstitutionSite::Kind::init, 9, 0};
        CHECK_THROWS_AS(substitution_study(params, prompt, plan, cfg, {&bad_chunk, 1}, 1,
                                           RngStream(67).child("r")),
                        std::invalid_argument);
        const SubstitutionSite bad_step{SubstitutionSite::Kind::solver, 0, 5};
        CHECK_THROWS_AS(substitution_study(params, prompt, plan, cfg, {&bad_step, 1}, 1,
                                           RngStream(67).child("r")),
                        std::invalid_argument);
    }
}
