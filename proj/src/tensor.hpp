#pragma once

#include <cstdint>
#include <initializer_list>
#include <vector>

#include "common.hpp"

namespace hpn::nn {

// Dense row-major tensor of 64-bit reals. Shape is dynamic; all training and
// inference in this project run in double precision so oracle comparisons are
// meaningful.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
        v_.assign(static_cast<size_t>(numel_of(shape_)), 0.0);
    }
    Tensor(std::vector<int> shape, std::vector<double> values)
        : shape_(std::move(shape)), v_(std::move(values)) {
        if (numel_of(shape_) != static_cast<int64_t>(v_.size()))
            throw ShapeError("tensor: shape does not match value count");
    }

    static Tensor scalar(double x) { return Tensor({1}, {x}); }

    static int64_t numel_of(const std::vector<int>& shape) {
        int64_t n = 1;
        for (int d : shape) {
            if (d < 0) throw ShapeError("tensor: negative dimension");
            n *= d;
        }
        return n;
    }

    const std::vector<int>& shape() const { return shape_; }
    int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int64_t numel() const { return static_cast<int64_t>(v_.size()); }

    double* data() { return v_.data(); }
    const double* data() const { return v_.data(); }
    std::vector<double>& values() { return v_; }
    const std::vector<double>& values() const { return v_; }

    double& operator[](int64_t i) { return v_[static_cast<size_t>(i)]; }
    double operator[](int64_t i) const { return v_[static_cast<size_t>(i)]; }

    // 2-D accessors (row-major)
    double& at(int i, int j) { return v_[static_cast<size_t>(i) * dim(1) + j]; }
    double at(int i, int j) const { return v_[static_cast<size_t>(i) * dim(1) + j]; }

    void fill(double x) { v_.assign(v_.size(), x); }
    void zero() { fill(0.0); }

    Tensor reshaped(std::vector<int> shape) const {
        if (numel_of(shape) != numel()) throw ShapeError("reshape: element count mismatch");
        Tensor t;
        t.shape_ = std::move(shape);
        t.v_ = v_;
        return t;
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    void add_(const Tensor& o) {
        if (!same_shape(o)) throw ShapeError("add_: shape mismatch");
        for (size_t i = 0; i < v_.size(); ++i) v_[i] += o.v_[i];
    }

private:
    std::vector<int> shape_;
    std::vector<double> v_;
};

// C(n,m) += op(A) * op(B). A and B are row-major buffers of the pre-op shapes.
void gemm_acc(const double* a, const double* b, double* c, int n, int k, int m,
              bool trans_a, bool trans_b);

// Max-subtracted softmax over the first `valid` entries; the rest become 0.
// Shared by the autodiff ops and the cached inference path so both produce
// bit-identical probabilities.
void softmax_span(const double* x, double* y, int m, int valid);

}  // namespace hpn::nn
