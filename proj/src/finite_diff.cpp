#include "arcopo/finite_diff.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "arcopo/errors.hpp"

namespace arcopo {

Vec finite_diff_grad(const std::function<double(const Vec&)>& loss,
                     const Vec& params, double h) {
    if (!(h > 0.0)) throw std::invalid_argument("finite_diff_grad: h must be > 0");
    Vec g(params.size());
    Vec p = params;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double orig = p[i];
        p[i] = orig + h;
        const double up = loss(p);
        p[i] = orig - h;
        const double down = loss(p);
        p[i] = orig;
        if (!std::isfinite(up) || !std::isfinite(down)) {
            throw NumericError("finite_diff_grad: non-finite loss");
        }
        g[i] = (up - down) / (2.0 * h);
    }
    return g;
}

Vec grad(const std::function<Tape::Id(Tape&, Tape::Id)>& build, const Vec& params) {
    Tape tape;
    const Tape::Id p = tape.leaf(params, true);
    const Tape::Id root = build(tape, p);
    tape.backward(root);
    return tape.grad(p);
}

double rel_error(double got, double want, double floor) {
    return std::abs(got - want) / std::max(std::abs(want), floor);
}

double max_rel_error(const Vec& got, const Vec& want, double floor) {
    if (got.size() != want.size()) throw std::invalid_argument("max_rel_error: size mismatch");
    double worst = 0.0;
    for (std::size_t i = 0; i < got.size(); ++i) {
        worst = std::max(worst, rel_error(got[i], want[i], floor));
    }
    return worst;
}

}  // namespace arcopo
