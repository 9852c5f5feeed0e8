#pragma once

#include <cassert>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace difftraj {

/// Dense row-major n-d array. Value semantics; ops live in ad/ops.hpp.
template <class T>
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
        data_.assign(numel_of(shape_), T(0));
    }
    Tensor(std::vector<int> shape, T fill) : shape_(std::move(shape)) {
        data_.assign(numel_of(shape_), fill);
    }
    Tensor(std::vector<int> shape, std::vector<T> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (static_cast<std::int64_t>(data_.size()) != numel_of(shape_))
            throw std::invalid_argument("tensor: data size does not match shape");
    }

    const std::vector<int>& shape() const { return shape_; }
    int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    int ndim() const { return static_cast<int>(shape_.size()); }
    std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::vector<T>& vec() { return data_; }
    const std::vector<T>& vec() const { return data_; }

    T& operator[](std::int64_t i) { return data_[static_cast<size_t>(i)]; }
    const T& operator[](std::int64_t i) const { return data_[static_cast<size_t>(i)]; }

    // NCHW-style accessors; bounds unchecked in release.
    T& at2(int i, int j) { return data_[static_cast<size_t>(i) * shape_[1] + j]; }
    const T& at2(int i, int j) const { return data_[static_cast<size_t>(i) * shape_[1] + j]; }
    T& at3(int i, int j, int k) {
        return data_[(static_cast<size_t>(i) * shape_[1] + j) * shape_[2] + k];
    }
    const T& at3(int i, int j, int k) const {
        return data_[(static_cast<size_t>(i) * shape_[1] + j) * shape_[2] + k];
    }
    T& at4(int n, int c, int h, int w) {
        return data_[((static_cast<size_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
    }
    const T& at4(int n, int c, int h, int w) const {
        return data_[((static_cast<size_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
    }

    Tensor reshaped(std::vector<int> new_shape) const {
        if (numel_of(new_shape) != numel())
            throw std::invalid_argument("tensor: reshape changes element count");
        Tensor out = *this;
        out.shape_ = std::move(new_shape);
        return out;
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    bool all_finite() const {
        for (const T& v : data_)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    static std::int64_t numel_of(const std::vector<int>& shape) {
        std::int64_t n = 1;
        for (int d : shape) {
            if (d < 0) throw std::invalid_argument("tensor: negative dimension");
            n *= d;
        }
        return n;
    }

    static std::string shape_str(const std::vector<int>& shape) {
        std::string s = "(";
        for (size_t i = 0; i < shape.size(); ++i) {
            if (i) s += ",";
            s += std::to_string(shape[i]);
        }
        return s + ")";
    }

private:
    std::vector<int> shape_;
    std::vector<T> data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

template <class U, class T>
Tensor<U> cast_tensor(const Tensor<T>& t) {
    Tensor<U> out(t.shape());
    for (std::int64_t i = 0; i < t.numel(); ++i) out[i] = static_cast<U>(t[i]);
    return out;
}

}  // namespace difftraj
