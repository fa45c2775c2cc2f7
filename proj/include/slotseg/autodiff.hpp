#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "slotseg/params.hpp"
#include "slotseg/tensor.hpp"

namespace slotseg {

// Handle into a Graph's tape.
struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

// Reverse-mode automatic differentiation on a tape of tensor nodes.
//
// Conventions:
//  - values are rank-1 or rank-2 tensors; scalars are shape {1}
//  - every op validates shapes eagerly and throws ShapeError naming the op
//  - backward closures capture node ids only and resolve storage through the
//    graph at call time, so tape growth never invalidates them
//  - gradient accumulation order is fixed by tape order, which makes backward
//    bit-reproducible for a given build sequence
//
// A graph constructed with grad_enabled=false records no closures and rejects
// backward(); use it for evaluation-only forward passes.
class Graph {
  public:
    explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) { nodes_.reserve(1024); }

    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;
    Graph(Graph&&) = delete;
    Graph& operator=(Graph&&) = delete;

    // ---- leaves ----

    Var constant(Tensor t) { return make(std::move(t), false, nullptr); }

    Var input(Tensor t, bool requires_grad = false) {
        return make(std::move(t), requires_grad, nullptr);
    }

    // Parameter leaf. The value is read through the registry (no copy); the
    // registry must outlive the graph and must not be mutated while the graph
    // is alive.
    Var param(const ParamRegistry& reg, const std::string& name) { return param(reg, reg.index(name)); }

    Var param(const ParamRegistry& reg, int idx) {
        Node n;
        n.ext = &reg.value(idx);
        n.requires_grad = grad_enabled_;
        n.pidx = idx;
        nodes_.push_back(std::move(n));
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    // ---- access ----

    const Tensor& value(Var v) const { return value_of(check(v, "value")); }

    bool requires_grad(Var v) const { return nodes_[static_cast<size_t>(check(v, "requires_grad"))].requires_grad; }

    bool has_grad(Var v) const {
        return !nodes_[static_cast<size_t>(check(v, "has_grad"))].grad.shape.empty();
    }

    const Tensor& grad(Var v) const {
        const Node& n = nodes_[static_cast<size_t>(check(v, "grad"))];
        if (n.grad.shape.empty()) throw NumericError("grad: no gradient recorded for this node");
        return n.grad;
    }

    int num_nodes() const { return static_cast<int>(nodes_.size()); }

    void check_finite(Var v, const std::string& where) const {
        if (!value(v).all_finite())
            throw NumericError("non-finite values detected in " + where);
    }

    // ---- elementwise ----

    Var add(Var a, Var b) {
        const Tensor& A = value(a);
        const Tensor& B = value(b);
        require_same("add", A, B);
        Tensor out = A;
        add_scaled(out, B);
        return binary_passthrough("add", std::move(out), a, b, 1.0, 1.0);
    }

    Var sub(Var a, Var b) {
        const Tensor& A = value(a);
        const Tensor& B = value(b);
        require_same("sub", A, B);
        Tensor out = A;
        add_scaled(out, B, -1.0);
        return binary_passthrough("sub", std::move(out), a, b, 1.0, -1.0);
    }

    // Elementwise product. Shapes must match, except that either operand may
    // be a scalar, which broadcasts.
    Var mul(Var a, Var b) {
        const Tensor& A = value(a);
        const Tensor& B = value(b);
        const bool a_scalar = A.size() == 1;
        const bool b_scalar = B.size() == 1;
        if (!a_scalar && !b_scalar && !A.same_shape(B))
            throw ShapeError("mul: shape mismatch " + A.describe() + " vs " + B.describe());
        Tensor out;
        if (b_scalar && !a_scalar) {
            out = A;
            for (double& x : out.v) x *= B.v[0];
        } else if (a_scalar && !b_scalar) {
            out = B;
            for (double& x : out.v) x *= A.v[0];
        } else {
            out = A;
            for (size_t i = 0; i < out.v.size(); ++i) out.v[i] *= B.v[i];
        }
        const int oid = next_id();
        return make(std::move(out), wants_any(a, b), closure(a, b, [this, a, b, oid] {
            const Tensor& go = nodes_[static_cast<size_t>(oid)].grad;
            const Tensor& A = value_of(a.id);
            const Tensor& B = value_of(b.id);
            if (wants(a)) {
                Tensor& ga = gref(a.id);
                if (B.size() == 1 && A.size() != 1) {
                    add_scaled(ga, go, B.v[0]);
                } else if (A.size() == 1 && B.size() != 1) {
                    double acc = 0.0;
                    for (size_t i = 0; i < go.v.size(); ++i) acc += go.v[i] * B.v[i];
                    ga.v[0] += acc;
                } else {
                    for (size_t i = 0; i < go.v.size(); ++i) ga.v[i] += go.v[i] * B.v[i];
                }
            }
            if (wants(b)) {
                Tensor& gb = gref(b.id);
                if (A.size() == 1 && B.size() != 1) {
                    add_scaled(gb, go, A.v[0]);
                } else if (B.size() == 1 && A.size() != 1) {
                    double acc = 0.0;
                    for (size_t i = 0; i < go.v.size(); ++i) acc += go.v[i] * A.v[i];
                    gb.v[0] += acc;
                } else {
                    for (size_t i = 0; i < go.v.size(); ++i) gb.v[i] += go.v[i] * A.v[i];
                }
            }
        }));
    }

    // y = a*x + b with compile-time scalars.
    Var affine(Var x, double a, double b) {
        Tensor out = value(x);
        for (double& t : out.v) t = a * t + b;
        const int oid = next_id();
        return make(std::move(out), wants_any(x), closure(x, [this, x, oid, a] {
            if (!wants(x)) return;
            add_scaled(gref(x.id), nodes_[static_cast<size_t>(oid)].grad, a);
        }));
    }

    Var relu(Var x) {
        Tensor out = value(x);
        for (double& t : out.v) t = t > 0.0 ? t : 0.0;
        const int oid = next_id();
        return make(std::move(out), wants_any(x), closure(x, [this, x, oid] {
            if (!wants(x)) return;
            const Tensor& go = nodes_[static_cast<size_t>(oid)].grad;
            const Tensor& X = value_of(x.id);
            Tensor& gx = gref(x.id);
            for (size_t i = 0; i < go.v.size(); ++i)
                if (X.v[i] > 0.0) gx.v[i] += go.v[i];
        }));
    }

    Var sigmoid(Var x) {
        Tensor out = value(x);
        for (double& t : out.v) t = 1.0 / (1.0 + std::exp(-t));
        const int oid = next_id();
        return make(std::move(out), wants_any(x), closure(x, [this, x, oid] {
            if (!wants(x)) return;
            const Tensor& go = nodes_[static_cast<size_t>(oid)].grad;
            const Tensor& Y = nodes_[static_cast<size_t>(oid)].owned;
            Tensor& gx = gref(x.id);
            for (size_t i = 0; i < go.v.size(); ++i) gx.v[i] += go.v[i] * Y.v[i] * (1.0 - Y.v[i]);
        }));
    }

    Var tanh(Var x) {
        Tensor out = value(x);
        for (double& t : out.v) t = std::tanh(t);
        const int oid = next_id();
        return make(std::move(out), wants_any(x), closure(x, [this, x, oid] {
            if (!wants(x)) return;
            const Tensor& go = nodes_[static_cast<size_t>(oid)].grad;
            const Tensor& Y = nodes_[static_cast<size_t>(oid)].owned;
            Tensor& gx = gref(x.id);
            for (size_t i = 0; i < go.v.size(); ++i) gx.v[i] += go.v[i] * (1.0 - Y.v[i] * Y.v[i]);
        }));
    }

    // ---- linear algebra ----

    Var matmul(Var a, Var b) {
        Tensor out = matmul_v(value(a), value(b));
        const int oid = next_id();
        return make(std::move(out), wants_any(a, b), closure(a, b, [this, a, b, oid] {
            const Tensor& go = nodes_[static_cast<size_t>(oid)].grad;
            if (wants(a)) add_scaled(gref(a.id), matmul_nt_v(go, value_of(b.id)));
            if (wants(b)) add_scaled(gref(b.id), matmul_tn_v(value_of(a.id), go));
        }));
    }

    // C = A * B^T.
    Var matmul_nt(Var a, Var b) {
        Tensor out = matmul_nt_v(value(a), value(b));
        const int oid = next_id();
        return make(std::move(out), wants_any(a, b), closure(a, b, [this, a, b, oid] {
            const Tensor& go = nodes_[static_cast<size_t>(oid)].grad;
            if (wants(a)) add_scaled(gref(a.id), matmul_v(go, value_of(b.id)));
            if (wants(b)) add_scaled(gref(b.id), matmul_tn_v(go, value_of(a.id)));
        }));
    }

    // C = A^T * B.
    Var matmul_tn(Var a, Var b) {
        Tensor out = matmul_tn_v(value(a), value(b));
        const int oid = next_id();
        return make(std::move(out), wants_any(a, b), closure(a, b, [this, a, b, oid] {
            const Tensor& go = nodes_[static_cast<size_t>(oid)].grad;
            if (wants(a)) add_scaled(gref(a.id), matmul_nt_v(value_of(b.id), go));
            if (wants(b)) add_scaled(gref(b.id), matmul_v(value_of(a.id), go));
        }));
    }

    // x: (M,N), b: (N) -> x + b broadcast over rows.
    Var add_rowvec(Var x, Var b) {
        const Tensor& X = value(x);
        const Tensor& B = value(b);
        require_rank2(X, "add_rowvec");
        if (B.rank() != 1 || B.shape[0] != X.cols())
            throw ShapeError("add_rowvec: expected row vector of size " + std::to_string(X.cols()) +
                             ", got " + B.describe());
        Tensor out = X;
        const int R = X.rows(), C = X.cols();
        for (int i = 0; i < R; ++i)
            for (int j = 0; j < C; ++j) out(i, j) += B.v[static_cast<size_t>(j)];
        const int oid = next_id();
        return make(std::move(out), wants_any(x, b), closure(x, b, [this, x, b, oid] {
            const Tensor& go = nodes_[static_cast<size_t>(oid)].grad;
            if (wants(x)) add_scaled(gref(x.id), go);
            if (wants(b)) {
                Tensor& gb = gref(b.id);
                const int R = go.rows(), C = go.cols();
                for (int i = 0; i < R; ++i)
                    for (int j = 0; j < C; ++j) gb.v[static_cast<size_t>(j)] += go(i, j);
            }
        }));
    }

    // x: (M,N), m: (M) -> x scaled per row by m (column-vector broadcast).
    Var mul_colvec(Var x, Var m) {
        const Tensor& X = value(x);
        const Tensor& M = value(m);
        require_rank2(X, "mul_colvec");
        if (M.rank() != 1 || M.shape[0] != X.rows())
            throw ShapeError("mul_colvec: expected column vector of size " + std::to_string(X.rows()) +
                             ", got " + M.describe());
        Tensor out = X;
        const int R = X.rows(), C = X.cols();
        for (int i = 0; i < R; ++i)
            for (int j = 0; j < C; ++j) out(i, j) *= M.v[static_cast<size_t>(i)];
        const int oid = next_id();
        return make(std::move(out), wants_any(x, m), closure(x, m, [this, x, m, oid] {
            const Tensor& go = nodes_[static_cast<size_t>(oid)].grad;
            const Tensor& X = value_of(x.id);
            const Tensor& M = value_of(m.id);
            const int R = go.rows(), C = go.cols();
            if (wants(x)) {
                Tensor& gx = gref(x.id);
                for (int i = 0; i < R; ++i)
                    for (int j = 0; j < C; ++j) gx(i, j) += go(i, j) * M.v[static_cast<size_t>(i)];
            }
            if (wants(m)) {
                Tensor& gm = gref(m.id);
                for (int i = 0; i < R; ++i) {
                    double acc = 0.0;
                    for (int j = 0; j < C; ++j) acc += go(i, j) * X(i, j);
                    gm.v[static_cast<size_t>(i)] += acc;
                }
            }
        }));
    }

    // ---- structural ----

    Var concat_cols(const std::vector<Var>& xs) {
        if (xs.empty()) throw ShapeError("concat_cols: empty input list");
        int R = -1, Ctot = 0;
        for (Var v : xs) {
            const Tensor& T = value(v);
            require_rank2(T, "concat_cols");
            if (R < 0) R = T.rows();
            if (T.rows() != R)
                throw ShapeError("concat_cols: row mismatch " + std::to_string(T.rows()) + " vs " +
                                 std::to_string(R));
            Ctot += T.cols();
        }
        Tensor out({R, Ctot});
        int off = 0;
        for (Var v : xs) {
            const Tensor& T = value(v);
            const int C = T.cols();
            for (int i = 0; i < R; ++i)
                for (int j = 0; j < C; ++j) out(i, off + j) = T(i, j);
            off += C;
        }
        bool rg = false;
        for (Var v : xs) rg = rg || wants_any(v);
        const int oid = next_id();
        std::function<void()> back;
        if (rg && grad_enabled_) {
            std::vector<Var> deps = xs;
            back = [this, deps, oid] {
                const Tensor& go = nodes_[static_cast<size_t>(oid)].grad;
                const int R = go.rows();
                int off = 0;
                for (Var v : deps) {
                    const int C = value_of(v.id).cols();
                    if (wants(v)) {
                        Tensor& gx = gref(v.id);
                        for (int i = 0; i < R; ++i)
                            for (int j = 0; j < C; ++j) gx(i, j) += go(i, off + j);
                    }
                    off += C;
                }
            };
        }
        return make(std::move(out), rg, std::move(back));
    }

    Var slice_cols(Var x, int c0, int c1) {
        const Tensor& X = value(x);
        require_rank2(X, "slice_cols");
        if (c0 < 0 || c1 > X.cols() || c0 >= c1)
            throw ShapeError("slice_cols: bad range [" + std::to_string(c0) + "," +
                             std::to_string(c1) + ") for " + X.describe());
        const int R = X.rows(), C = c1 - c0;
        Tensor out({R, C});
        for (int i = 0; i < R; ++i)
            for (int j = 0; j < C; ++j) out(i, j) = X(i, c0 + j);
        const int oid = next_id();
        return make(std::move(out), wants_any(x), closure(x, [this, x, oid, c0] {
            if (!wants(x)) return;
            const Tensor& go = nodes_[static_cast<size_t>(oid)].grad;
            Tensor& gx = gref(x.id);
            const int R = go.rows(), C = go.cols();
            for (int i = 0; i < R; ++i)
                for (int j = 0; j < C; ++j) gx(i, c0 + j) += go(i, j);
        }));
    }

    Var slice_rows(Var x, int r0, int r1) {
        const Tensor& X = value(x);
        require_rank2(X, "slice_rows");
        if (r0 < 0 || r1 > X.rows() || r0 >= r1)
            throw ShapeError("slice_rows: bad range [" + std::to_string(r0) + "," +
                             std::to_string(r1) + ") for " + X.describe());
        const int R = r1 - r0, C = X.cols();
        Tensor out({R, C});
        for (int i = 0; i < R; ++i)
            for (int j = 0; j < C; ++j) out(i, j) = X(r0 + i, j);
        const int oid = next_id();
        return make(std::move(out), wants_any(x), closure(x, [this, x, oid, r0] {
            if (!wants(x)) return;
            const Tensor& go = nodes_[static_cast<size_t>(oid)].grad;
            Tensor& gx = gref(x.id);
            const int R = go.rows(), C = go.cols();
            for (int i = 0; i < R; ++i)
                for (int j = 0; j < C; ++j) gx(r0 + i, j) += go(i, j);
        }));
    }

    Var reshape(Var x, std::vector<int> shape) {
        const Tensor& X = value(x);
        if (Tensor::numel(shape) != X.size())
            throw ShapeError("reshape: cannot reshape " + X.describe() + " to " +
                             Tensor::shape_str(shape));
        Tensor out(shape, X.v);
        const int oid = next_id();
        return make(std::move(out), wants_any(x), closure(x, [this, x, oid] {
            if (!wants(x)) return;
            const Tensor& go = nodes_[static_cast<size_t>(oid)].grad;
            Tensor& gx = gref(x.id);
            for (size_t i = 0; i < go.v.size(); ++i) gx.v[i] += go.v[i];
        }));
    }

    // x: (N) or (1,N) -> (M,N) by repetition.
    Var repeat_rows(Var x, int m) {
        const Tensor& X = value(x);
        int N = 0;
        if (X.rank() == 1)
            N = X.shape[0];
        else if (X.rank() == 2 && X.rows() == 1)
            N = X.cols();
        else
            throw ShapeError("repeat_rows: expected vector or single row, got " + X.describe());
        if (m < 1) throw ShapeError("repeat_rows: m must be positive");
        Tensor out({m, N});
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < N; ++j) out(i, j) = X.v[static_cast<size_t>(j)];
        const int oid = next_id();
        return make(std::move(out), wants_any(x), closure(x, [this, x, oid] {
            if (!wants(x)) return;
            const Tensor& go = nodes_[static_cast<size_t>(oid)].grad;
            Tensor& gx = gref(x.id);
            const int R = go.rows(), C = go.cols();
            for (int i = 0; i < R; ++i)
                for (int j = 0; j < C; ++j) gx.v[static_cast<size_t>(j)] += go(i, j);
        }));
    }

    Var stack_scalars(const std::vector<Var>& xs) {
        if (xs.empty()) throw ShapeError("stack_scalars: empty input list");
        Tensor out({static_cast<int>(xs.size())});
        bool rg = false;
        for (size_t i = 0; i < xs.size(); ++i) {
            const Tensor& T = value(xs[i]);
            if (T.size() != 1)
                throw ShapeError("stack_scalars: element " + std::to_string(i) + " has shape " +
                                 T.describe());
            out.v[i] = T.v[0];
            rg = rg || wants_any(xs[i]);
        }
        const int oid = next_id();
        std::function<void()> back;
        if (rg && grad_enabled_) {
            std::vector<Var> deps = xs;
            back = [this, deps, oid] {
                const Tensor& go = nodes_[static_cast<size_t>(oid)].grad;
                for (size_t i = 0; i < deps.size(); ++i)
                    if (wants(deps[i])) gref(deps[i].id).v[0] += go.v[i];
            };
        }
        return make(std::move(out), rg, std::move(back));
    }

    // Extract element i of a vector as a scalar.
    Var index(Var x, int i) {
        const Tensor& X = value(x);
        if (X.rank() != 1) throw ShapeError("index: expected rank-1, got " + X.describe());
        if (i < 0 || i >= X.shape[0])
            throw ShapeError("index: position " + std::to_string(i) + " out of range for " +
                             X.describe());
        Tensor out = Tensor::scalar(X.v[static_cast<size_t>(i)]);
        const int oid = next_id();
        return make(std::move(out), wants_any(x), closure(x, [this, x, oid, i] {
            if (!wants(x)) return;
            gref(x.id).v[static_cast<size_t>(i)] += nodes_[static_cast<size_t>(oid)].grad.v[0];
        }));
    }

    // ---- reductions & normalizations ----

    Var sum(Var x) {
        const Tensor& X = value(x);
        double s = 0.0;
        for (double t : X.v) s += t;
        Tensor out = Tensor::scalar(s);
        const int oid = next_id();
        return make(std::move(out), wants_any(x), closure(x, [this, x, oid] {
            if (!wants(x)) return;
            const double g = nodes_[static_cast<size_t>(oid)].grad.v[0];
            Tensor& gx = gref(x.id);
            for (double& t : gx.v) t += g;
        }));
    }

    // Softmax along `axis` of a rank-2 tensor (0 = down columns, 1 = along
    // rows); rank-1 tensors are normalized over their single axis.
    Var softmax(Var x, int axis) {
        const Tensor& X = value(x);
        auto [ng, gs, stride, bstep] = axis_layout(X, axis, "softmax");
        Tensor out = X;
        for (int g = 0; g < ng; ++g) {
            const int64_t base = static_cast<int64_t>(g) * bstep;
            double m = -1e300;
            for (int i = 0; i < gs; ++i) m = std::max(m, out.v[static_cast<size_t>(base + i * stride)]);
            double s = 0.0;
            for (int i = 0; i < gs; ++i) {
                double& t = out.v[static_cast<size_t>(base + i * stride)];
                t = std::exp(t - m);
                s += t;
            }
            for (int i = 0; i < gs; ++i) out.v[static_cast<size_t>(base + i * stride)] /= s;
        }
        const int oid = next_id();
        return make(std::move(out), wants_any(x),
                    closure(x, [this, x, oid, ng = ng, gs = gs, stride = stride, bstep = bstep] {
                        if (!wants(x)) return;
                        const Tensor& go = nodes_[static_cast<size_t>(oid)].grad;
                        const Tensor& Y = nodes_[static_cast<size_t>(oid)].owned;
                        Tensor& gx = gref(x.id);
                        for (int g = 0; g < ng; ++g) {
                            const int64_t base = static_cast<int64_t>(g) * bstep;
                            double dot = 0.0;
                            for (int i = 0; i < gs; ++i) {
                                const size_t k = static_cast<size_t>(base + i * stride);
                                dot += go.v[k] * Y.v[k];
                            }
                            for (int i = 0; i < gs; ++i) {
                                const size_t k = static_cast<size_t>(base + i * stride);
                                gx.v[k] += Y.v[k] * (go.v[k] - dot);
                            }
                        }
                    }));
    }

    // y = x / sum(x) along `axis`. Groups must have nonzero sums.
    Var normalize_sum(Var x, int axis) {
        const Tensor& X = value(x);
        auto [ng, gs, stride, bstep] = axis_layout(X, axis, "normalize_sum");
        Tensor out = X;
        for (int g = 0; g < ng; ++g) {
            const int64_t base = static_cast<int64_t>(g) * bstep;
            double s = 0.0;
            for (int i = 0; i < gs; ++i) s += out.v[static_cast<size_t>(base + i * stride)];
            if (s == 0.0) throw NumericError("normalize_sum: group sums to zero");
            for (int i = 0; i < gs; ++i) out.v[static_cast<size_t>(base + i * stride)] /= s;
        }
        const int oid = next_id();
        return make(std::move(out), wants_any(x),
                    closure(x, [this, x, oid, ng = ng, gs = gs, stride = stride, bstep = bstep] {
                        if (!wants(x)) return;
                        const Tensor& go = nodes_[static_cast<size_t>(oid)].grad;
                        const Tensor& Y = nodes_[static_cast<size_t>(oid)].owned;
                        const Tensor& X = value_of(x.id);
                        Tensor& gx = gref(x.id);
                        for (int g = 0; g < ng; ++g) {
                            const int64_t base = static_cast<int64_t>(g) * bstep;
                            double s = 0.0, dot = 0.0;
                            for (int i = 0; i < gs; ++i) {
                                const size_t k = static_cast<size_t>(base + i * stride);
                                s += X.v[k];
                                dot += go.v[k] * Y.v[k];
                            }
                            for (int i = 0; i < gs; ++i) {
                                const size_t k = static_cast<size_t>(base + i * stride);
                                gx.v[k] += (go.v[k] - dot) / s;
                            }
                        }
                    }));
    }

    // Inclusive cumulative sum along `axis`.
    Var cumsum(Var x, int axis) {
        const Tensor& X = value(x);
        auto [ng, gs, stride, bstep] = axis_layout(X, axis, "cumsum");
        Tensor out = X;
        for (int g = 0; g < ng; ++g) {
            const int64_t base = static_cast<int64_t>(g) * bstep;
            double acc = 0.0;
            for (int i = 0; i < gs; ++i) {
                double& t = out.v[static_cast<size_t>(base + i * stride)];
                acc += t;
                t = acc;
            }
        }
        const int oid = next_id();
        return make(std::move(out), wants_any(x),
                    closure(x, [this, x, oid, ng = ng, gs = gs, stride = stride, bstep = bstep] {
                        if (!wants(x)) return;
                        const Tensor& go = nodes_[static_cast<size_t>(oid)].grad;
                        Tensor& gx = gref(x.id);
                        for (int g = 0; g < ng; ++g) {
                            const int64_t base = static_cast<int64_t>(g) * bstep;
                            double acc = 0.0;
                            for (int i = gs - 1; i >= 0; --i) {
                                const size_t k = static_cast<size_t>(base + i * stride);
                                acc += go.v[k];
                                gx.v[k] += acc;
                            }
                        }
                    }));
    }

    // Layer normalization over the last axis, with learnable gamma/beta of
    // size equal to that axis.
    Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5) {
        const Tensor& X = value(x);
        const Tensor& G = value(gamma);
        const Tensor& B = value(beta);
        const int n = X.rank() == 2 ? X.cols() : X.shape.at(0);
        const int R = X.rank() == 2 ? X.rows() : 1;
        if (G.rank() != 1 || G.shape[0] != n || B.rank() != 1 || B.shape[0] != n)
            throw ShapeError("layer_norm: gamma/beta must be vectors of size " + std::to_string(n) +
                             ", got " + G.describe() + " and " + B.describe());
        Tensor out = X;
        for (int r = 0; r < R; ++r) {
            double* row = out.v.data() + static_cast<size_t>(r) * n;
            double mu = 0.0;
            for (int j = 0; j < n; ++j) mu += row[j];
            mu /= n;
            double var = 0.0;
            for (int j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
            var /= n;
            const double inv = 1.0 / std::sqrt(var + eps);
            for (int j = 0; j < n; ++j)
                row[j] = G.v[static_cast<size_t>(j)] * (row[j] - mu) * inv + B.v[static_cast<size_t>(j)];
        }
        const int oid = next_id();
        return make(std::move(out), wants_any(x, gamma, beta),
                    closure3(x, gamma, beta, [this, x, gamma, beta, oid, n, R, eps] {
                        const Tensor& go = nodes_[static_cast<size_t>(oid)].grad;
                        const Tensor& X = value_of(x.id);
                        const Tensor& G = value_of(gamma.id);
                        std::vector<double> xhat(static_cast<size_t>(n));
                        for (int r = 0; r < R; ++r) {
                            const double* row = X.v.data() + static_cast<size_t>(r) * n;
                            const double* grow = go.v.data() + static_cast<size_t>(r) * n;
                            double mu = 0.0;
                            for (int j = 0; j < n; ++j) mu += row[j];
                            mu /= n;
                            double var = 0.0;
                            for (int j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
                            var /= n;
                            const double inv = 1.0 / std::sqrt(var + eps);
                            for (int j = 0; j < n; ++j) xhat[static_cast<size_t>(j)] = (row[j] - mu) * inv;
                            if (wants(gamma)) {
                                Tensor& gg = gref(gamma.id);
                                for (int j = 0; j < n; ++j)
                                    gg.v[static_cast<size_t>(j)] += grow[j] * xhat[static_cast<size_t>(j)];
                            }
                            if (wants(beta)) {
                                Tensor& gb = gref(beta.id);
                                for (int j = 0; j < n; ++j) gb.v[static_cast<size_t>(j)] += grow[j];
                            }
                            if (wants(x)) {
                                Tensor& gx = gref(x.id);
                                double mg = 0.0, mgx = 0.0;
                                for (int j = 0; j < n; ++j) {
                                    const double h = grow[j] * G.v[static_cast<size_t>(j)];
                                    mg += h;
                                    mgx += h * xhat[static_cast<size_t>(j)];
                                }
                                mg /= n;
                                mgx /= n;
                                double* gxr = gx.v.data() + static_cast<size_t>(r) * n;
                                for (int j = 0; j < n; ++j) {
                                    const double h = grow[j] * G.v[static_cast<size_t>(j)];
                                    gxr[j] += (h - mg - xhat[static_cast<size_t>(j)] * mgx) * inv;
                                }
                            }
                        }
                    }));
    }

    // ---- task-specific ops ----

    // table: (V,D), tokens in [0,V) -> (L,D).
    Var embedding_lookup(Var table, const std::vector<int>& tokens) {
        const Tensor& T = value(table);
        require_rank2(T, "embedding_lookup");
        const int V = T.rows(), D = T.cols(), L = static_cast<int>(tokens.size());
        if (L == 0) throw ShapeError("embedding_lookup: empty token list");
        for (int l = 0; l < L; ++l)
            if (tokens[static_cast<size_t>(l)] < 0 || tokens[static_cast<size_t>(l)] >= V)
                throw DataError("embedding_lookup: token " + std::to_string(tokens[static_cast<size_t>(l)]) +
                                " at position " + std::to_string(l) + " outside vocabulary of size " +
                                std::to_string(V));
        Tensor out({L, D});
        for (int l = 0; l < L; ++l)
            for (int j = 0; j < D; ++j) out(l, j) = T(tokens[static_cast<size_t>(l)], j);
        const int oid = next_id();
        return make(std::move(out), wants_any(table),
                    closure(table, [this, table, oid, tokens] {
                        if (!wants(table)) return;
                        const Tensor& go = nodes_[static_cast<size_t>(oid)].grad;
                        Tensor& gt = gref(table.id);
                        const int L = go.rows(), D = go.cols();
                        for (int l = 0; l < L; ++l)
                            for (int j = 0; j < D; ++j) gt(tokens[static_cast<size_t>(l)], j) += go(l, j);
                    }));
    }

    // Mean cross-entropy of logits (L,A) against integer targets (length L).
    Var cross_entropy(Var logits, const std::vector<int>& targets) {
        const Tensor& X = value(logits);
        require_rank2(X, "cross_entropy");
        const int L = X.rows(), A = X.cols();
        if (static_cast<int>(targets.size()) != L)
            throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                             std::to_string(L) + " rows");
        for (int l = 0; l < L; ++l)
            if (targets[static_cast<size_t>(l)] < 0 || targets[static_cast<size_t>(l)] >= A)
                throw DataError("cross_entropy: target " + std::to_string(targets[static_cast<size_t>(l)]) +
                                " at row " + std::to_string(l) + " outside [0," + std::to_string(A) + ")");
        double total = 0.0;
        for (int l = 0; l < L; ++l) {
            double m = -1e300;
            for (int j = 0; j < A; ++j) m = std::max(m, X(l, j));
            double s = 0.0;
            for (int j = 0; j < A; ++j) s += std::exp(X(l, j) - m);
            total += (m + std::log(s)) - X(l, targets[static_cast<size_t>(l)]);
        }
        Tensor out = Tensor::scalar(total / L);
        const int oid = next_id();
        return make(std::move(out), wants_any(logits),
                    closure(logits, [this, logits, oid, targets] {
                        if (!wants(logits)) return;
                        const double g = nodes_[static_cast<size_t>(oid)].grad.v[0];
                        const Tensor& X = value_of(logits.id);
                        Tensor& gx = gref(logits.id);
                        const int L = X.rows(), A = X.cols();
                        const double scale = g / L;
                        for (int l = 0; l < L; ++l) {
                            double m = -1e300;
                            for (int j = 0; j < A; ++j) m = std::max(m, X(l, j));
                            double s = 0.0;
                            for (int j = 0; j < A; ++j) s += std::exp(X(l, j) - m);
                            for (int j = 0; j < A; ++j)
                                gx(l, j) += scale * (std::exp(X(l, j) - m) / s);
                            gx(l, targets[static_cast<size_t>(l)]) -= scale;
                        }
                    }));
    }

    // KL(p || prior + eps) = sum_k p_k * ln(p_k / (prior_k + eps)), with the
    // convention 0 * ln 0 = 0. p must be a nonnegative vector; the prior is a
    // fixed tensor of the same length.
    Var kl_to_prior(Var p, const Tensor& prior, double eps) {
        const Tensor& P = value(p);
        if (P.rank() != 1 || prior.rank() != 1 || prior.shape[0] != P.shape[0])
            throw ShapeError("kl_to_prior: shape mismatch " + P.describe() + " vs " + prior.describe());
        const int K = P.shape[0];
        double kl = 0.0;
        for (int k = 0; k < K; ++k) {
            const double pk = P.v[static_cast<size_t>(k)];
            if (pk < -1e-12) throw NumericError("kl_to_prior: negative probability");
            if (pk > 0.0) kl += pk * (std::log(pk) - std::log(prior.v[static_cast<size_t>(k)] + eps));
        }
        Tensor out = Tensor::scalar(kl);
        const int oid = next_id();
        return make(std::move(out), wants_any(p), closure(p, [this, p, oid, prior, eps] {
            if (!wants(p)) return;
            const double g = nodes_[static_cast<size_t>(oid)].grad.v[0];
            const Tensor& P = value_of(p.id);
            Tensor& gp = gref(p.id);
            const int K = P.shape[0];
            for (int k = 0; k < K; ++k) {
                const double pk = P.v[static_cast<size_t>(k)];
                if (pk > 0.0)
                    gp.v[static_cast<size_t>(k)] +=
                        g * (std::log(pk) + 1.0 - std::log(prior.v[static_cast<size_t>(k)] + eps));
            }
        }));
    }

    // ---- backward ----

    void backward(Var loss) {
        if (!grad_enabled_) throw NumericError("backward: graph was built with gradients disabled");
        if (backward_done_) throw NumericError("backward: already called on this graph");
        const int lid = check(loss, "backward");
        const Tensor& L = value_of(lid);
        if (L.size() != 1) throw ShapeError("backward: loss must be scalar, got " + L.describe());
        if (!nodes_[static_cast<size_t>(lid)].requires_grad)
            throw NumericError("backward: loss does not depend on any differentiable leaf");
        backward_done_ = true;
        gref(lid).v[0] = 1.0;
        for (int id = lid; id >= 0; --id) {
            Node& n = nodes_[static_cast<size_t>(id)];
            if (n.back && !n.grad.shape.empty()) n.back();
        }
    }

    // Accumulate parameter gradients into a registry-aligned buffer.
    void export_grads(GradBuffer& out) const {
        for (const Node& n : nodes_) {
            if (n.pidx >= 0 && !n.grad.shape.empty()) {
                if (static_cast<size_t>(n.pidx) >= out.g.size())
                    throw ShapeError("export_grads: buffer not aligned with registry");
                add_scaled(out.g[static_cast<size_t>(n.pidx)], n.grad);
            }
        }
    }

  private:
    struct Node {
        Tensor owned;
        const Tensor* ext = nullptr;  // set for parameter leaves
        Tensor grad;                  // empty shape == not yet accumulated
        std::function<void()> back;
        bool requires_grad = false;
        int pidx = -1;
    };

    std::vector<Node> nodes_;
    bool grad_enabled_;
    bool backward_done_ = false;

    int check(Var v, const char* op) const {
        if (v.id < 0 || v.id >= static_cast<int>(nodes_.size()))
            throw ShapeError(std::string(op) + ": invalid graph handle");
        return v.id;
    }

    const Tensor& value_of(int id) const {
        const Node& n = nodes_[static_cast<size_t>(id)];
        return n.ext ? *n.ext : n.owned;
    }

    bool wants(Var v) const { return nodes_[static_cast<size_t>(v.id)].requires_grad; }

    bool wants_any(Var a) const { return grad_enabled_ && wants(a); }
    bool wants_any(Var a, Var b) const { return grad_enabled_ && (wants(a) || wants(b)); }
    bool wants_any(Var a, Var b, Var c) const {
        return grad_enabled_ && (wants(a) || wants(b) || wants(c));
    }

    Tensor& gref(int id) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (n.grad.shape.empty()) n.grad = Tensor(value_of(id).shape);
        return n.grad;
    }

    int next_id() const { return static_cast<int>(nodes_.size()); }

    Var make(Tensor val, bool rg, std::function<void()> back) {
        Node n;
        n.owned = std::move(val);
        n.requires_grad = rg && grad_enabled_;
        if (n.requires_grad) n.back = std::move(back);
        nodes_.push_back(std::move(n));
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    template <class F>
    std::function<void()> closure(Var a, F f) {
        return wants_any(a) ? std::function<void()>(std::move(f)) : nullptr;
    }
    template <class F>
    std::function<void()> closure(Var a, Var b, F f) {
        return wants_any(a, b) ? std::function<void()>(std::move(f)) : nullptr;
    }
    template <class F>
    std::function<void()> closure3(Var a, Var b, Var c, F f) {
        return wants_any(a, b, c) ? std::function<void()>(std::move(f)) : nullptr;
    }

    Var binary_passthrough(const char*, Tensor out, Var a, Var b, double sa, double sb) {
        const int oid = next_id();
        return make(std::move(out), wants_any(a, b), closure(a, b, [this, a, b, oid, sa, sb] {
            const Tensor& go = nodes_[static_cast<size_t>(oid)].grad;
            if (wants(a)) add_scaled(gref(a.id), go, sa);
            if (wants(b)) add_scaled(gref(b.id), go, sb);
        }));
    }

    static void require_same(const char* op, const Tensor& a, const Tensor& b) {
        if (!a.same_shape(b))
            throw ShapeError(std::string(op) + ": shape mismatch " + a.describe() + " vs " +
                             b.describe());
    }

    // Returns (num_groups, group_size, element_stride, group_base_stride).
    static std::tuple<int, int, int64_t, int64_t> axis_layout(const Tensor& t, int axis,
                                                              const char* op) {
        if (t.rank() == 1) return {1, t.shape[0], 1, 0};
        if (t.rank() == 2) {
            if (axis == 1) return {t.rows(), t.cols(), 1, t.cols()};
            if (axis == 0) return {t.cols(), t.rows(), t.cols(), 1};
            throw ShapeError(std::string(op) + ": axis must be 0 or 1 for rank-2");
        }
        throw ShapeError(std::string(op) + ": unsupported rank for " + t.describe());
    }
};

}  // namespace slotseg
