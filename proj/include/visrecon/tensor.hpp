#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <new>
#include <vector>

#include "visrecon/errors.hpp"
#include "visrecon/rng.hpp"

namespace visrecon {

using MatMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstMatMap = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using VecMap = Eigen::Map<Eigen::VectorXd>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;

// 64-byte-aligned allocator for tensor storage. SIMD reductions peel to an
// aligned boundary, so reduction order (and therefore the rounded result)
// would otherwise depend on where the heap happened to place the buffer.
// Fixing the alignment keeps every run bit-identical.
template <class T>
struct AlignedAlloc {
    using value_type = T;
    static constexpr std::size_t alignment = 64;
    AlignedAlloc() noexcept = default;
    template <class U>
    AlignedAlloc(const AlignedAlloc<U>&) noexcept {}
    T* allocate(std::size_t n) {
        return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t{alignment}));
    }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, std::align_val_t{alignment}); }
    template <class U>
    bool operator==(const AlignedAlloc<U>&) const noexcept {
        return true;
    }
    template <class U>
    bool operator!=(const AlignedAlloc<U>&) const noexcept {
        return false;
    }
};

using AlignedVec = std::vector<double, AlignedAlloc<double>>;

// Dense double tensor, row-major flat storage. Rank is dynamic but everything
// in this codebase is rank 1..4.
struct Tensor {
    std::vector<int> shape;
    AlignedVec v;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)), v(numel_of(shape), 0.0) {}
    Tensor(std::vector<int> s, std::initializer_list<double> data) : shape(std::move(s)), v(data) {
        check(static_cast<int>(v.size()) == numel_of(shape), "tensor data does not match shape");
    }
    Tensor(std::vector<int> s, const std::vector<double>& data)
        : shape(std::move(s)), v(data.begin(), data.end()) {
        check(static_cast<int>(v.size()) == numel_of(shape), "tensor data does not match shape");
    }

    static int numel_of(const std::vector<int>& s) {
        int n = 1;
        for (int d : s) {
            check(d > 0, "tensor dims must be positive");
            n *= d;
        }
        return n;
    }

    static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }

    static Tensor full(std::vector<int> s, double val) {
        Tensor t(std::move(s));
        std::fill(t.v.begin(), t.v.end(), val);
        return t;
    }

    static Tensor scalar(double val) { return Tensor({1}, {val}); }

    static Tensor randn(std::vector<int> s, Rng& rng, double stddev = 1.0) {
        Tensor t(std::move(s));
        for (double& x : t.v) x = stddev * rng.normal();
        return t;
    }

    int numel() const { return static_cast<int>(v.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape.at(i); }

    double& operator[](int i) { return v[i]; }
    double operator[](int i) const { return v[i]; }

    double& at2(int i, int j) { return v[i * shape[1] + j]; }
    double at2(int i, int j) const { return v[i * shape[1] + j]; }
    double& at3(int i, int j, int k) { return v[(i * shape[1] + j) * shape[2] + k]; }
    double at3(int i, int j, int k) const { return v[(i * shape[1] + j) * shape[2] + k]; }
    double& at4(int i, int j, int k, int l) { return v[((i * shape[1] + j) * shape[2] + k) * shape[3] + l]; }
    double at4(int i, int j, int k, int l) const { return v[((i * shape[1] + j) * shape[2] + k) * shape[3] + l]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    Tensor reshaped(std::vector<int> s) const {
        check(numel_of(s) == numel(), "reshape changes element count");
        Tensor t = *this;
        t.shape = std::move(s);
        return t;
    }

    // map as rows x cols, where rows is the leading dim and cols the rest
    MatMap mat(int rows, int cols) {
        check(rows * cols == numel(), "matrix view size mismatch");
        return MatMap(v.data(), rows, cols);
    }
    ConstMatMap mat(int rows, int cols) const {
        check(rows * cols == numel(), "matrix view size mismatch");
        return ConstMatMap(v.data(), rows, cols);
    }
    VecMap vec() { return VecMap(v.data(), numel()); }
    ConstVecMap vec() const { return ConstVecMap(v.data(), numel()); }

    Tensor& operator+=(const Tensor& o) {
        check(same_shape(o), "shape mismatch in +=");
        vec() += o.vec();
        return *this;
    }
    Tensor& operator-=(const Tensor& o) {
        check(same_shape(o), "shape mismatch in -=");
        vec() -= o.vec();
        return *this;
    }
    Tensor& operator*=(double s) {
        vec() *= s;
        return *this;
    }

    friend Tensor operator+(Tensor a, const Tensor& b) { return a += b; }
    friend Tensor operator-(Tensor a, const Tensor& b) { return a -= b; }
    friend Tensor operator*(double s, Tensor a) { return a *= s; }

    double sum() const { return vec().sum(); }
    double mean() const { return vec().mean(); }
    double min() const { return vec().minCoeff(); }
    double max() const { return vec().maxCoeff(); }
    double norm() const { return vec().norm(); }
    double dot(const Tensor& o) const {
        check(numel() == o.numel(), "dot size mismatch");
        return vec().dot(o.vec());
    }

    bool all_finite() const {
        for (double x : v)
            if (!std::isfinite(x)) return false;
        return true;
    }
};

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    check(a.numel() == b.numel(), "max_abs_diff size mismatch");
    double m = 0.0;
    for (int i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.v[i] - b.v[i]));
    return m;
}

inline bool bit_identical(const Tensor& a, const Tensor& b) {
    if (a.shape != b.shape) return false;
    for (int i = 0; i < a.numel(); ++i)
        if (std::memcmp(&a.v[i], &b.v[i], sizeof(double)) != 0) return false;
    return true;
}

}  // namespace visrecon
