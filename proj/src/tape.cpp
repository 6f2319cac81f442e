#include "arcopo/tape.hpp"

#include <cmath>
#include <stdexcept>

#include "arcopo/errors.hpp"

namespace arcopo {

Tape::Id Tape::push(Vec val, bool needs_grad, std::function<void(Tape&)> back) {
    Node n;
    n.val = std::move(val);
    n.adj.assign(n.val.size(), 0.0);
    n.back = std::move(back);
    n.needs_grad = needs_grad;
    nodes_.push_back(std::move(n));
    return static_cast<Id>(nodes_.size() - 1);
}

void Tape::check(Id id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size()) {
        throw std::invalid_argument("tape: bad node id");
    }
}

Tape::Id Tape::leaf(Vec value, bool trainable) {
    return push(std::move(value), trainable, nullptr);
}

const Vec& Tape::value(Id id) const {
    check(id);
    return node(id).val;
}

const Vec& Tape::grad(Id id) const {
    check(id);
    if (!ran_backward_) throw UnsupportedOperation("tape: grad before backward");
    return node(id).adj;
}

void Tape::backward(Id root) {
    check(root);
    if (node(root).val.size() != 1) {
        throw UnsupportedOperation("tape: backward requires a scalar root");
    }
    if (ran_backward_) throw UnsupportedOperation("tape: backward may run once");
    ran_backward_ = true;
    node(root).adj[0] = 1.0;
    for (Id id = root; id >= 0; --id) {
        Node& n = node(id);
        if (n.back && n.needs_grad) n.back(*this);
    }
}

Tape::Id Tape::add(Id a, Id b) {
    check(a); check(b);
    const bool ng = node(a).needs_grad || node(b).needs_grad;
    Id out = push(arcopo::add(node(a).val, node(b).val), ng, nullptr);
    node(out).back = [a, b, out](Tape& t) {
        const Vec& g = t.node(out).adj;
        if (t.node(a).needs_grad) axpy(1.0, g, t.node(a).adj);
        if (t.node(b).needs_grad) axpy(1.0, g, t.node(b).adj);
    };
    return out;
}

Tape::Id Tape::sub(Id a, Id b) {
    check(a); check(b);
    const bool ng = node(a).needs_grad || node(b).needs_grad;
    Id out = push(arcopo::sub(node(a).val, node(b).val), ng, nullptr);
    node(out).back = [a, b, out](Tape& t) {
        const Vec& g = t.node(out).adj;
        if (t.node(a).needs_grad) axpy(1.0, g, t.node(a).adj);
        if (t.node(b).needs_grad) axpy(-1.0, g, t.node(b).adj);
    };
    return out;
}

Tape::Id Tape::mul(Id a, Id b) {
    check(a); check(b);
    const Vec& va = node(a).val;
    const Vec& vb = node(b).val;
    if (va.size() != vb.size()) throw std::invalid_argument("tape mul: size mismatch");
    Vec v(va.size());
    for (std::size_t i = 0; i < va.size(); ++i) v[i] = va[i] * vb[i];
    const bool ng = node(a).needs_grad || node(b).needs_grad;
    Id out = push(std::move(v), ng, nullptr);
    node(out).back = [a, b, out](Tape& t) {
        const Vec& g = t.node(out).adj;
        const Vec& va2 = t.node(a).val;
        const Vec& vb2 = t.node(b).val;
        if (t.node(a).needs_grad) {
            Vec& ga = t.node(a).adj;
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * vb2[i];
        }
        if (t.node(b).needs_grad) {
            Vec& gb = t.node(b).adj;
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * va2[i];
        }
    };
    return out;
}

Tape::Id Tape::scale(Id a, double c) {
    check(a);
    Id out = push(scaled(node(a).val, c), node(a).needs_grad, nullptr);
    node(out).back = [a, c, out](Tape& t) {
        if (t.node(a).needs_grad) axpy(c, t.node(out).adj, t.node(a).adj);
    };
    return out;
}

Tape::Id Tape::mul_const(Id a, Vec c) {
    check(a);
    const Vec& va = node(a).val;
    if (va.size() != c.size()) throw std::invalid_argument("tape mul_const: size mismatch");
    Vec v(va.size());
    for (std::size_t i = 0; i < va.size(); ++i) v[i] = va[i] * c[i];
    Id out = push(std::move(v), node(a).needs_grad, nullptr);
    node(out).back = [a, c = std::move(c), out](Tape& t) {
        if (!t.node(a).needs_grad) return;
        const Vec& g = t.node(out).adj;
        Vec& ga = t.node(a).adj;
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c[i];
    };
    return out;
}

Tape::Id Tape::div_const(Id a, Vec c) {
    check(a);
    const Vec& va = node(a).val;
    if (va.size() != c.size()) throw std::invalid_argument("tape div_const: size mismatch");
    for (double x : c) {
        if (x == 0.0) throw NumericError("tape div_const: division by zero");
    }
    Vec v(va.size());
    for (std::size_t i = 0; i < va.size(); ++i) v[i] = va[i] / c[i];
    Id out = push(std::move(v), node(a).needs_grad, nullptr);
    node(out).back = [a, c = std::move(c), out](Tape& t) {
        if (!t.node(a).needs_grad) return;
        const Vec& g = t.node(out).adj;
        Vec& ga = t.node(a).adj;
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / c[i];
    };
    return out;
}

Tape::Id Tape::tanh_(Id a) {
    check(a);
    Vec v = node(a).val;
    tanh_inplace(v);
    Id out = push(std::move(v), node(a).needs_grad, nullptr);
    node(out).back = [a, out](Tape& t) {
        if (!t.node(a).needs_grad) return;
        const Vec& g = t.node(out).adj;
        const Vec& y = t.node(out).val;
        Vec& ga = t.node(a).adj;
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (1.0 - y[i] * y[i]);
    };
    return out;
}

Tape::Id Tape::exp_(Id a) {
    check(a);
    Vec v = node(a).val;
    for (double& x : v) x = std::exp(x);
    Id out = push(std::move(v), node(a).needs_grad, nullptr);
    node(out).back = [a, out](Tape& t) {
        if (!t.node(a).needs_grad) return;
        const Vec& g = t.node(out).adj;
        const Vec& y = t.node(out).val;
        Vec& ga = t.node(a).adj;
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
    };
    return out;
}

Tape::Id Tape::affine(Id w, Id b, Id x, int rows, int cols) {
    check(w); check(b); check(x);
    Vec v;
    affine_apply(node(w).val, node(b).val, node(x).val, rows, cols, v);
    const bool ng = node(w).needs_grad || node(b).needs_grad || node(x).needs_grad;
    Id out = push(std::move(v), ng, nullptr);
    node(out).back = [w, b, x, rows, cols, out](Tape& t) {
        const Vec& g = t.node(out).adj;
        const Vec& vw = t.node(w).val;
        const Vec& vx = t.node(x).val;
        if (t.node(w).needs_grad) {
            Vec& gw = t.node(w).adj;
            for (int r = 0; r < rows; ++r) {
                const double gr = g[static_cast<std::size_t>(r)];
                double* row = gw.data() + static_cast<std::size_t>(r) * cols;
                for (int c = 0; c < cols; ++c) row[c] += gr * vx[static_cast<std::size_t>(c)];
            }
        }
        if (t.node(b).needs_grad) axpy(1.0, g, t.node(b).adj);
        if (t.node(x).needs_grad) {
            Vec& gx = t.node(x).adj;
            for (int r = 0; r < rows; ++r) {
                const double gr = g[static_cast<std::size_t>(r)];
                const double* row = vw.data() + static_cast<std::size_t>(r) * cols;
                for (int c = 0; c < cols; ++c) gx[static_cast<std::size_t>(c)] += gr * row[c];
            }
        }
    };
    return out;
}

Tape::Id Tape::matmul(Id a, Id b, int m, int k, int n) {
    check(a); check(b);
    const Vec& va = node(a).val;
    const Vec& vb = node(b).val;
    if (static_cast<int>(va.size()) != m * k || static_cast<int>(vb.size()) != k * n) {
        throw std::invalid_argument("tape matmul: shape mismatch");
    }
    Vec v(static_cast<std::size_t>(m) * n, 0.0);
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int p = 0; p < k; ++p) acc += va[i * k + p] * vb[p * n + j];
            v[static_cast<std::size_t>(i) * n + j] = acc;
        }
    }
    const bool ng = node(a).needs_grad || node(b).needs_grad;
    Id out = push(std::move(v), ng, nullptr);
    node(out).back = [a, b, m, k, n, out](Tape& t) {
        const Vec& g = t.node(out).adj;
        const Vec& va2 = t.node(a).val;
        const Vec& vb2 = t.node(b).val;
        if (t.node(a).needs_grad) {
            Vec& ga = t.node(a).adj;  // dA = dC * B^T
            for (int i = 0; i < m; ++i)
                for (int p = 0; p < k; ++p) {
                    double acc = 0.0;
                    for (int j = 0; j < n; ++j) acc += g[i * n + j] * vb2[p * n + j];
                    ga[static_cast<std::size_t>(i) * k + p] += acc;
                }
        }
        if (t.node(b).needs_grad) {
            Vec& gb = t.node(b).adj;  // dB = A^T * dC
            for (int p = 0; p < k; ++p)
                for (int j = 0; j < n; ++j) {
                    double acc = 0.0;
                    for (int i = 0; i < m; ++i) acc += va2[i * k + p] * g[i * n + j];
                    gb[static_cast<std::size_t>(p) * n + j] += acc;
                }
        }
    };
    return out;
}

Tape::Id Tape::concat(std::span<const Id> parts) {
    if (parts.empty()) throw std::invalid_argument("tape concat: empty");
    Vec v;
    bool ng = false;
    std::vector<Id> ids(parts.begin(), parts.end());
    for (Id p : ids) {
        check(p);
        const Vec& vp = node(p).val;
        v.insert(v.end(), vp.begin(), vp.end());
        ng = ng || node(p).needs_grad;
    }
    Id out = push(std::move(v), ng, nullptr);
    node(out).back = [ids = std::move(ids), out](Tape& t) {
        const Vec& g = t.node(out).adj;
        std::size_t off = 0;
        for (Id p : ids) {
            Vec& gp = t.node(p).adj;
            const std::size_t len = t.node(p).val.size();
            if (t.node(p).needs_grad) {
                for (std::size_t i = 0; i < len; ++i) gp[i] += g[off + i];
            }
            off += len;
        }
    };
    return out;
}

Tape::Id Tape::sum(Id a) {
    check(a);
    double acc = 0.0;
    for (double x : node(a).val) acc += x;
    Id out = push(Vec{acc}, node(a).needs_grad, nullptr);
    node(out).back = [a, out](Tape& t) {
        if (!t.node(a).needs_grad) return;
        const double g = t.node(out).adj[0];
        for (double& x : t.node(a).adj) x += g;
    };
    return out;
}

Tape::Id Tape::mean(Id a) {
    check(a);
    const std::size_t n = node(a).val.size();
    if (n == 0) throw std::invalid_argument("tape mean: empty");
    double acc = 0.0;
    for (double x : node(a).val) acc += x;
    Id out = push(Vec{acc / static_cast<double>(n)}, node(a).needs_grad, nullptr);
    node(out).back = [a, n, out](Tape& t) {
        if (!t.node(a).needs_grad) return;
        const double g = t.node(out).adj[0] / static_cast<double>(n);
        for (double& x : t.node(a).adj) x += g;
    };
    return out;
}

Tape::Id Tape::sumsq(Id a) {
    check(a);
    Id out = push(Vec{l2sq(node(a).val)}, node(a).needs_grad, nullptr);
    node(out).back = [a, out](Tape& t) {
        if (!t.node(a).needs_grad) return;
        const double g = t.node(out).adj[0];
        const Vec& va = t.node(a).val;
        Vec& ga = t.node(a).adj;
        for (std::size_t i = 0; i < va.size(); ++i) ga[i] += 2.0 * g * va[i];
    };
    return out;
}

Tape::Id Tape::dot(Id a, Id b) {
    check(a); check(b);
    Id out = push(Vec{arcopo::dot(node(a).val, node(b).val)},
                  node(a).needs_grad || node(b).needs_grad, nullptr);
    node(out).back = [a, b, out](Tape& t) {
        const double g = t.node(out).adj[0];
        if (t.node(a).needs_grad) axpy(g, t.node(b).val, t.node(a).adj);
        if (t.node(b).needs_grad) axpy(g, t.node(a).val, t.node(b).adj);
    };
    return out;
}

Tape::Id Tape::softmax_neg_scaled_(Id a, double tau) {
    check(a);
    Id out = push(softmax_neg_scaled(node(a).val, tau), node(a).needs_grad, nullptr);
    node(out).back = [a, tau, out](Tape& t) {
        if (!t.node(a).needs_grad) return;
        const Vec& g = t.node(out).adj;
        const Vec& y = t.node(out).val;
        // y = softmax(z), z = -d/tau: dL/dd_j = -(y_j (g_j - sum_k g_k y_k))/tau
        double gy = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) gy += g[i] * y[i];
        Vec& ga = t.node(a).adj;
        for (std::size_t j = 0; j < g.size(); ++j) ga[j] += -(y[j] * (g[j] - gy)) / tau;
    };
    return out;
}

Tape::Id Tape::minimum(Id a, Id b) {
    check(a); check(b);
    const Vec& va = node(a).val;
    const Vec& vb = node(b).val;
    if (va.size() != vb.size()) throw std::invalid_argument("tape minimum: size mismatch");
    Vec v(va.size());
    std::vector<char> take_a(va.size());
    for (std::size_t i = 0; i < va.size(); ++i) {
        take_a[i] = va[i] <= vb[i];  // ties follow the first argument
        v[i] = take_a[i] ? va[i] : vb[i];
    }
    const bool ng = node(a).needs_grad || node(b).needs_grad;
    Id out = push(std::move(v), ng, nullptr);
    node(out).back = [a, b, take_a = std::move(take_a), out](Tape& t) {
        const Vec& g = t.node(out).adj;
        if (t.node(a).needs_grad) {
            Vec& ga = t.node(a).adj;
            for (std::size_t i = 0; i < g.size(); ++i)
                if (take_a[i]) ga[i] += g[i];
        }
        if (t.node(b).needs_grad) {
            Vec& gb = t.node(b).adj;
            for (std::size_t i = 0; i < g.size(); ++i)
                if (!take_a[i]) gb[i] += g[i];
        }
    };
    return out;
}

Tape::Id Tape::clamp(Id a, double lo, double hi) {
    check(a);
    if (!(lo <= hi)) throw std::invalid_argument("tape clamp: lo > hi");
    const Vec& va = node(a).val;
    Vec v(va.size());
    std::vector<char> pass(va.size());
    for (std::size_t i = 0; i < va.size(); ++i) {
        if (va[i] < lo) {
            v[i] = lo;
            pass[i] = 0;
        } else if (va[i] > hi) {
            v[i] = hi;
            pass[i] = 0;
        } else {
            v[i] = va[i];
            pass[i] = 1;
        }
    }
    Id out = push(std::move(v), node(a).needs_grad, nullptr);
    node(out).back = [a, pass = std::move(pass), out](Tape& t) {
        if (!t.node(a).needs_grad) return;
        const Vec& g = t.node(out).adj;
        Vec& ga = t.node(a).adj;
        for (std::size_t i = 0; i < g.size(); ++i)
            if (pass[i]) ga[i] += g[i];
    };
    return out;
}

}  // namespace arcopo
