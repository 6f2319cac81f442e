#pragma once

#include <functional>

#include "arcopo/tape.hpp"
#include "arcopo/vecmath.hpp"

namespace arcopo {

/// Central-difference gradient of a deterministic scalar function, one
/// coordinate at a time. Independent of the tape; used as the oracle the
/// tape is checked against.
Vec finite_diff_grad(const std::function<double(const Vec&)>& loss,
                     const Vec& params, double h = 1e-5);

/// Reverse-mode gradient of a scalar built by `build` from a single
/// trainable leaf holding `params`.
Vec grad(const std::function<Tape::Id(Tape&, Tape::Id)>& build, const Vec& params);

/// Relative error with an absolute floor, for comparing gradients whose
/// entries may be near zero.
double rel_error(double got, double want, double floor = 1e-8);
double max_rel_error(const Vec& got, const Vec& want, double floor = 1e-8);

}  // namespace arcopo
