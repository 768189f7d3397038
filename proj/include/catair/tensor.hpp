#pragma once

#include <memory>
#include <numeric>
#include <sstream>
#include <vector>

#include "catair/common.hpp"
#include "catair/rng.hpp"

namespace catair {

// Dense row-major tensor of Real. Copies are shallow (storage is shared);
// use clone() for a deep copy. Feature maps are laid out [B, H, W, C] with C
// contiguous, images as [H, W, 3].
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int> shape)
        : shape_(std::move(shape)),
          data_(std::make_shared<std::vector<Real>>(count(shape_), Real(0))) {}

    Tensor(std::vector<int> shape, Real fill)
        : shape_(std::move(shape)),
          data_(std::make_shared<std::vector<Real>>(count(shape_), fill)) {}

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
    static Tensor full(std::vector<int> shape, Real v) { return Tensor(std::move(shape), v); }

    static Tensor scalar(Real v) {
        Tensor t({1});
        (*t.data_)[0] = v;
        return t;
    }

    static Tensor gaussian(std::vector<int> shape, Rng& rng, Real stddev = 1.0) {
        Tensor t(std::move(shape));
        for (auto& x : *t.data_) x = stddev * rng.gaussian();
        return t;
    }

    static Tensor uniform(std::vector<int> shape, Rng& rng, Real lo, Real hi) {
        Tensor t(std::move(shape));
        for (auto& x : *t.data_) x = rng.uniform(lo, hi);
        return t;
    }

    bool defined() const { return static_cast<bool>(data_); }
    const std::vector<int>& shape() const { return shape_; }
    int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    int rank() const { return static_cast<int>(shape_.size()); }

    int numel() const { return data_ ? static_cast<int>(data_->size()) : 0; }

    Real* data() { return data_->data(); }
    const Real* data() const { return data_->data(); }

    Real& operator[](int i) { return (*data_)[static_cast<size_t>(i)]; }
    const Real& operator[](int i) const { return (*data_)[static_cast<size_t>(i)]; }

    Real& at(int a, int b) { return (*data_)[static_cast<size_t>(a) * shape_[1] + b]; }
    const Real& at(int a, int b) const { return (*data_)[static_cast<size_t>(a) * shape_[1] + b]; }

    Real& at(int a, int b, int c) {
        return (*data_)[(static_cast<size_t>(a) * shape_[1] + b) * shape_[2] + c];
    }
    const Real& at(int a, int b, int c) const {
        return (*data_)[(static_cast<size_t>(a) * shape_[1] + b) * shape_[2] + c];
    }

    Real& at(int a, int b, int c, int d) {
        return (*data_)[((static_cast<size_t>(a) * shape_[1] + b) * shape_[2] + c) * shape_[3] + d];
    }
    const Real& at(int a, int b, int c, int d) const {
        return (*data_)[((static_cast<size_t>(a) * shape_[1] + b) * shape_[2] + c) * shape_[3] + d];
    }

    // View with a new shape over the same storage.
    Tensor reshaped(std::vector<int> shape) const {
        if (count(shape) != numel())
            throw ShapeError("reshape: element count mismatch, " + shape_str(shape_) +
                             " -> " + shape_str(shape));
        Tensor t;
        t.shape_ = std::move(shape);
        t.data_ = data_;
        return t;
    }

    Tensor clone() const {
        Tensor t;
        t.shape_ = shape_;
        t.data_ = std::make_shared<std::vector<Real>>(*data_);
        return t;
    }

    void fill(Real v) { std::fill(data_->begin(), data_->end(), v); }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    static std::string shape_str(const std::vector<int>& s) {
        std::ostringstream os;
        os << "[";
        for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
        os << "]";
        return os.str();
    }

    std::string shape_str() const { return shape_str(shape_); }

private:
    static int count(const std::vector<int>& shape) {
        int n = 1;
        for (int d : shape) {
            if (d < 0) throw ShapeError("negative dimension in " + shape_str(shape));
            n *= d;
        }
        return n;
    }

    std::vector<int> shape_;
    std::shared_ptr<std::vector<Real>> data_;
};

inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) return false;
    for (int i = 0; i < a.numel(); ++i)
        if (a[i] != b[i]) return false;
    return true;
}

inline Real max_abs_diff(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw ShapeError("max_abs_diff: shape mismatch");
    Real m = 0;
    for (int i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace catair
