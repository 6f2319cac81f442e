#include "arcopo/vecmath.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "arcopo/errors.hpp"

namespace arcopo {

bool all_finite(std::span<const double> v) {
    for (double x : v) {
        if (!std::isfinite(x)) return false;
    }
    return true;
}

void require_finite(std::span<const double> v, const std::string& what) {
    if (!all_finite(v)) throw NumericError("non-finite values in " + what);
}

Vec add(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw std::invalid_argument("add: size mismatch");
    Vec out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
    return out;
}

Vec sub(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw std::invalid_argument("sub: size mismatch");
    Vec out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
    return out;
}

Vec scaled(std::span<const double> a, double c) {
    Vec out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * c;
    return out;
}

void axpy(double c, std::span<const double> x, Vec& y) {
    if (x.size() != y.size()) throw std::invalid_argument("axpy: size mismatch");
    for (std::size_t i = 0; i < x.size(); ++i) y[i] += c * x[i];
}

double dot(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw std::invalid_argument("dot: size mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

double l2sq(std::span<const double> a) {
    double acc = 0.0;
    for (double x : a) acc += x * x;
    return acc;
}

double l2(std::span<const double> a) { return std::sqrt(l2sq(a)); }

double l2sq_diff(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw std::invalid_argument("l2sq_diff: size mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        acc += d * d;
    }
    return acc;
}

double l2_diff(std::span<const double> a, std::span<const double> b) {
    return std::sqrt(l2sq_diff(a, b));
}

double mean(std::span<const double> a) {
    if (a.empty()) throw std::invalid_argument("mean: empty");
    double acc = 0.0;
    for (double x : a) acc += x;
    return acc / static_cast<double>(a.size());
}

double pop_variance(std::span<const double> a) {
    const double m = mean(a);
    double acc = 0.0;
    for (double x : a) {
        const double d = x - m;
        acc += d * d;
    }
    return acc / static_cast<double>(a.size());
}

double pop_stddev(std::span<const double> a) { return std::sqrt(pop_variance(a)); }

void affine_apply(std::span<const double> w, std::span<const double> b,
                  std::span<const double> x, int rows, int cols, Vec& out) {
    if (static_cast<int>(w.size()) != rows * cols || static_cast<int>(b.size()) != rows ||
        static_cast<int>(x.size()) != cols) {
        throw std::invalid_argument("affine_apply: shape mismatch");
    }
    out.assign(static_cast<std::size_t>(rows), 0.0);
    for (int r = 0; r < rows; ++r) {
        double acc = b[static_cast<std::size_t>(r)];
        const double* wr = w.data() + static_cast<std::size_t>(r) * cols;
        for (int c = 0; c < cols; ++c) acc += wr[c] * x[static_cast<std::size_t>(c)];
        out[static_cast<std::size_t>(r)] = acc;
    }
}

void tanh_inplace(Vec& v) {
    for (double& x : v) x = std::tanh(x);
}

Vec softmax_neg_scaled(std::span<const double> distances, double tau) {
    if (!(tau > 0.0)) throw std::invalid_argument("softmax_neg_scaled: tau must be > 0");
    if (distances.empty()) throw std::invalid_argument("softmax_neg_scaled: empty input");
    if (!all_finite(distances)) {
        throw std::invalid_argument("softmax_neg_scaled: non-finite distance");
    }
    // z_i = -d_i/tau; subtract max(z) before exponentiating.
    Vec z(distances.size());
    for (std::size_t i = 0; i < distances.size(); ++i) z[i] = -distances[i] / tau;
    const double zmax = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    Vec out(z.size());
    for (std::size_t i = 0; i < z.size(); ++i) {
        out[i] = std::exp(z[i] - zmax);
        sum += out[i];
    }
    for (double& p : out) p /= sum;
    return out;
}

}  // namespace arcopo
