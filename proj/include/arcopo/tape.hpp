#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "arcopo/vecmath.hpp"

namespace arcopo {

/// Reverse-mode gradient tape over vector-valued nodes.
///
/// Carries exactly the primitives the toy model and the training
/// objectives need: affine maps, tanh, elementwise arithmetic,
/// reductions, concat, the stable distance softmax, and the piecewise
/// min/clamp pair the clipped objective is built from. Forward values
/// for model evaluation go through the same kernels as the plain
/// (untaped) evaluation paths so both produce bit-identical results.
class Tape {
public:
    using Id = std::int32_t;

    Id leaf(Vec value, bool trainable);
    Id constant(Vec value) { return leaf(std::move(value), false); }
    Id scalar_constant(double v) { return constant(Vec{v}); }

    Id add(Id a, Id b);
    Id sub(Id a, Id b);
    Id mul(Id a, Id b);                     // elementwise
    Id scale(Id a, double c);
    Id mul_const(Id a, Vec c);              // elementwise by a constant vector
    Id div_const(Id a, Vec c);              // elementwise by a constant vector
    Id tanh_(Id a);
    Id exp_(Id a);

    /// y = W x + b, W row-major (rows x cols).
    Id affine(Id w, Id b, Id x, int rows, int cols);
    /// C = A B with A (m x k), B (k x n), all row-major flats.
    Id matmul(Id a, Id b, int m, int k, int n);

    Id concat(std::span<const Id> parts);
    Id sum(Id a);                           // scalar
    Id mean(Id a);                          // scalar
    Id sumsq(Id a);                         // scalar, sum of squares
    Id dot(Id a, Id b);                     // scalar

    /// softmax over -a[i]/tau; forward value identical to
    /// softmax_neg_scaled(value(a), tau).
    Id softmax_neg_scaled_(Id a, double tau);

    /// Elementwise min; on ties the gradient follows the first argument.
    Id minimum(Id a, Id b);
    /// Elementwise clamp to [lo, hi]; gradient is zero where saturated.
    Id clamp(Id a, double lo, double hi);

    const Vec& value(Id id) const;
    std::size_t size() const { return nodes_.size(); }

    /// Backpropagate from a scalar root. Throws UnsupportedOperation if
    /// the root is not scalar. May be called once per tape.
    void backward(Id root);
    const Vec& grad(Id id) const;

private:
    struct Node {
        Vec val;
        Vec adj;
        std::function<void(Tape&)> back;  // null for leaves/constants
        bool needs_grad = false;
    };

    Id push(Vec val, bool needs_grad, std::function<void(Tape&)> back);
    Node& node(Id id) { return nodes_[static_cast<std::size_t>(id)]; }
    const Node& node(Id id) const { return nodes_[static_cast<std::size_t>(id)]; }
    void check(Id id) const;

    std::vector<Node> nodes_;
    bool ran_backward_ = false;
};

}  // namespace arcopo
