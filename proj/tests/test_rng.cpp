#include <doctest.h>

#include <cmath>
#include <stdexcept>
#include <vector>

#include "arcopo/rng.hpp"
#include "arcopo/vecmath.hpp"

using namespace arcopo;

TEST_CASE("equal seed and path produce identical draw sequences") {
    RngStream a = RngStream(7).child("a");
    RngStream b = RngStream(7).child("a");
    CHECK(a.gaussian(3) == b.gaussian(3));
    CHECK(a.counter() == 3);
}

TEST_CASE("distinct label paths differ") {
    RngStream a = RngStream(7).child("a");
    RngStream b = RngStream(7).child("b");
    const Vec va = a.gaussian(8);
    const Vec vb = b.gaussian(8);
    CHECK(va != vb);
}

TEST_CASE("label boundaries matter, not just concatenation") {
    RngStream a = RngStream(3).child("ab").child("c");
    RngStream b = RngStream(3).child("a").child("bc");
    CHECK(a.gaussian(4) != b.gaussian(4));
}

TEST_CASE("gaussian n=0 is rejected") {
    RngStream s(1);
    CHECK_THROWS_AS(s.gaussian(0), std::invalid_argument);
}

TEST_CASE("counter advances by exactly n") {
    RngStream s = RngStream(11).child("x");
    (void)s.gaussian(5);
    CHECK(s.counter() == 5);
    (void)s.gaussian1();
    CHECK(s.counter() == 6);
}

TEST_CASE("sample moments of 1e5 draws") {
    RngStream s = RngStream(123).child("moments");
    const Vec v = s.gaussian(100000);
    CHECK(std::abs(mean(v)) < 0.02);
    CHECK(std::abs(pop_variance(v) - 1.0) < 0.05);
}

TEST_CASE("chi-square independence of sibling streams") {
    // 4x4 contingency table over normal quartiles; 1e4 paired draws.
    // Critical value for df=9 at p=0.01 is 21.666: independence holds at
    // p > 0.01 when the statistic stays below it.
    const double quartiles[3] = {-0.6744897501960817, 0.0, 0.6744897501960817};
    auto bin_of = [&](double x) {
        int b = 0;
        while (b < 3 && x > quartiles[b]) ++b;
        return b;
    };
    RngStream a = RngStream(99).child("ind.a");
    RngStream b = RngStream(99).child("ind.b");
    const int n = 10000;
    const Vec va = a.gaussian(n);
    const Vec vb = b.gaussian(n);
    int counts[4][4] = {};
    for (int i = 0; i < n; ++i) counts[bin_of(va[i])][bin_of(vb[i])]++;
    const double expected = n / 16.0;
    double stat = 0.0;
    for (auto& row : counts)
        for (int c : row) {
            const double d = c - expected;
            stat += d * d / expected;
        }
    CHECK(stat < 21.666);
}

TEST_CASE("uniform_index stays in range and is deterministic") {
    RngStream a = RngStream(5).child("u");
    RngStream b = RngStream(5).child("u");
    for (int i = 0; i < 100; ++i) {
        const std::size_t x = a.uniform_index(6);
        CHECK(x < 6);
        CHECK(x == b.uniform_index(6));
    }
}

TEST_CASE("uniform_index covers all residues") {
    RngStream s = RngStream(17).child("cover");
    std::vector<int> seen(5, 0);
    for (int i = 0; i < 500; ++i) seen[s.uniform_index(5)]++;
    for (int c : seen) CHECK(c > 50);
}
