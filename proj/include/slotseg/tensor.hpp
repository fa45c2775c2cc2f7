#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "slotseg/common.hpp"

namespace slotseg {

// Dense row-major tensor of doubles. Rank 1 and 2 cover everything the model
// needs; scalars are rank-1 tensors with a single element.
struct Tensor {
    std::vector<int> shape;
    std::vector<double> v;

    Tensor() = default;

    explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
        v.assign(static_cast<size_t>(numel(shape)), 0.0);
    }

    Tensor(std::vector<int> s, std::vector<double> data) : shape(std::move(s)), v(std::move(data)) {
        if (static_cast<int64_t>(v.size()) != numel(shape))
            throw ShapeError("Tensor: data size " + std::to_string(v.size()) +
                             " does not match shape " + shape_str(shape));
    }

    static int64_t numel(const std::vector<int>& s) {
        int64_t n = 1;
        for (int d : s) {
            if (d < 0) throw ShapeError("Tensor: negative dimension in shape " + shape_str(s));
            n *= d;
        }
        return n;
    }

    static std::string shape_str(const std::vector<int>& s) {
        std::ostringstream os;
        os << "(";
        for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
        os << ")";
        return os.str();
    }

    static Tensor scalar(double x) { return Tensor({1}, {x}); }

    static Tensor full(std::vector<int> s, double x) {
        Tensor t(std::move(s));
        std::fill(t.v.begin(), t.v.end(), x);
        return t;
    }

    int64_t size() const { return static_cast<int64_t>(v.size()); }
    int rank() const { return static_cast<int>(shape.size()); }

    int rows() const {
        if (rank() != 2) throw ShapeError("Tensor::rows: rank-" + std::to_string(rank()) + " tensor");
        return shape[0];
    }
    int cols() const {
        if (rank() != 2) throw ShapeError("Tensor::cols: rank-" + std::to_string(rank()) + " tensor");
        return shape[1];
    }

    double& operator()(int i, int j) { return v[static_cast<size_t>(i) * shape[1] + j]; }
    double operator()(int i, int j) const { return v[static_cast<size_t>(i) * shape[1] + j]; }
    double& operator[](int64_t i) { return v[static_cast<size_t>(i)]; }
    double operator[](int64_t i) const { return v[static_cast<size_t>(i)]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (double x : v)
            if (!std::isfinite(x)) return false;
        return true;
    }

    std::string describe() const { return shape_str(shape); }
};

using EigenMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using EigenCMap =
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

inline EigenCMap as_matrix(const Tensor& t, int r, int c) { return EigenCMap(t.v.data(), r, c); }
inline EigenMap as_matrix(Tensor& t, int r, int c) { return EigenMap(t.v.data(), r, c); }

inline void require_rank2(const Tensor& t, const char* op) {
    if (t.rank() != 2) throw ShapeError(std::string(op) + ": expected rank-2, got " + t.describe());
}

// C = A * B, shapes (m,k) x (k,n) -> (m,n).
inline Tensor matmul_v(const Tensor& a, const Tensor& b) {
    require_rank2(a, "matmul");
    require_rank2(b, "matmul");
    if (a.cols() != b.rows())
        throw ShapeError("matmul: inner dimensions disagree, " + a.describe() + " x " + b.describe());
    Tensor c({a.rows(), b.cols()});
    as_matrix(c, c.rows(), c.cols()).noalias() =
        as_matrix(a, a.rows(), a.cols()) * as_matrix(b, b.rows(), b.cols());
    return c;
}

// C = A * B^T, shapes (m,k) x (n,k) -> (m,n).
inline Tensor matmul_nt_v(const Tensor& a, const Tensor& b) {
    require_rank2(a, "matmul_nt");
    require_rank2(b, "matmul_nt");
    if (a.cols() != b.cols())
        throw ShapeError("matmul_nt: inner dimensions disagree, " + a.describe() + " x " +
                         b.describe() + "^T");
    Tensor c({a.rows(), b.rows()});
    as_matrix(c, c.rows(), c.cols()).noalias() =
        as_matrix(a, a.rows(), a.cols()) * as_matrix(b, b.rows(), b.cols()).transpose();
    return c;
}

// C = A^T * B, shapes (k,m) x (k,n) -> (m,n).
inline Tensor matmul_tn_v(const Tensor& a, const Tensor& b) {
    require_rank2(a, "matmul_tn");
    require_rank2(b, "matmul_tn");
    if (a.rows() != b.rows())
        throw ShapeError("matmul_tn: inner dimensions disagree, " + a.describe() + "^T x " +
                         b.describe());
    Tensor c({a.cols(), b.cols()});
    as_matrix(c, c.rows(), c.cols()).noalias() =
        as_matrix(a, a.rows(), a.cols()).transpose() * as_matrix(b, b.rows(), b.cols());
    return c;
}

// dst += scale * src, elementwise over equal-sized buffers.
inline void add_scaled(Tensor& dst, const Tensor& src, double scale = 1.0) {
    if (dst.size() != src.size())
        throw ShapeError("add_scaled: size mismatch " + dst.describe() + " vs " + src.describe());
    const size_t n = dst.v.size();
    for (size_t i = 0; i < n; ++i) dst.v[i] += scale * src.v[i];
}

}  // namespace slotseg
