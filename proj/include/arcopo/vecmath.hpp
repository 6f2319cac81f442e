#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace arcopo {

// All latents, noises, predictions and parameter blocks are stored as
// flat vectors of 64-bit floats.
using Vec = std::vector<double>;

bool all_finite(std::span<const double> v);

// Throws NumericError if any entry is NaN/Inf. `what` names the offender.
void require_finite(std::span<const double> v, const std::string& what);

Vec add(std::span<const double> a, std::span<const double> b);
Vec sub(std::span<const double> a, std::span<const double> b);
Vec scaled(std::span<const double> a, double c);
void axpy(double c, std::span<const double> x, Vec& y);  // y += c*x

double dot(std::span<const double> a, std::span<const double> b);
double l2sq(std::span<const double> a);
double l2(std::span<const double> a);
double l2sq_diff(std::span<const double> a, std::span<const double> b);
double l2_diff(std::span<const double> a, std::span<const double> b);

double mean(std::span<const double> a);
// Population variance (no Bessel correction).
double pop_variance(std::span<const double> a);
double pop_stddev(std::span<const double> a);

// out = W*x + b with W row-major (rows x cols). Accumulation order is
// fixed (ascending column index) so independent callers produce
// bit-identical results.
void affine_apply(std::span<const double> w, std::span<const double> b,
                  std::span<const double> x, int rows, int cols, Vec& out);

void tanh_inplace(Vec& v);

// Stable softmax over -d[i]/tau with max-subtraction. Entries positive,
// sum within 1e-12 of 1. Throws std::invalid_argument on tau <= 0 or
// non-finite distances.
Vec softmax_neg_scaled(std::span<const double> distances, double tau);

}  // namespace arcopo
