#pragma once

#include <algorithm>
#include <array>
#include <cassert>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace mdba {

/// Dense n-dimensional array, C order (last axis fastest).
template <typename T>
class NdArray {
public:
    NdArray() = default;

    explicit NdArray(std::vector<int64_t> shape, T fill_value = T{})
        : shape_(std::move(shape)) {
        for (int64_t d : shape_) {
            if (d < 1) throw std::invalid_argument("NdArray: dimensions must be >= 1");
        }
        compute_strides();
        data_.assign(static_cast<size_t>(size_), fill_value);
    }

    static NdArray zeros_like(const NdArray& o) { return NdArray(o.shape_); }

    int rank() const { return static_cast<int>(shape_.size()); }
    const std::vector<int64_t>& shape() const { return shape_; }
    int64_t dim(int axis) const { return shape_[static_cast<size_t>(axis)]; }
    int64_t stride(int axis) const { return strides_[static_cast<size_t>(axis)]; }
    int64_t size() const { return size_; }
    bool empty() const { return size_ == 0; }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }

    T& operator[](int64_t flat) { return data_[static_cast<size_t>(flat)]; }
    const T& operator[](int64_t flat) const { return data_[static_cast<size_t>(flat)]; }

    T& at(int64_t i) { return data_[idx1(i)]; }
    const T& at(int64_t i) const { return data_[idx1(i)]; }
    T& at(int64_t i, int64_t j) { return data_[idx2(i, j)]; }
    const T& at(int64_t i, int64_t j) const { return data_[idx2(i, j)]; }
    T& at(int64_t i, int64_t j, int64_t k) { return data_[idx3(i, j, k)]; }
    const T& at(int64_t i, int64_t j, int64_t k) const { return data_[idx3(i, j, k)]; }
    T& at(int64_t i, int64_t j, int64_t k, int64_t l) { return data_[idx4(i, j, k, l)]; }
    const T& at(int64_t i, int64_t j, int64_t k, int64_t l) const { return data_[idx4(i, j, k, l)]; }
    T& at(int64_t i, int64_t j, int64_t k, int64_t l, int64_t m) { return data_[idx5(i, j, k, l, m)]; }
    const T& at(int64_t i, int64_t j, int64_t k, int64_t l, int64_t m) const { return data_[idx5(i, j, k, l, m)]; }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    bool same_shape(const NdArray& o) const { return shape_ == o.shape_; }

    template <typename U>
    NdArray<U> cast() const {
        NdArray<U> out(shape_);
        for (int64_t i = 0; i < size_; ++i) out[i] = static_cast<U>(data_[static_cast<size_t>(i)]);
        return out;
    }

    std::string shape_string() const {
        std::string s = "(";
        for (size_t i = 0; i < shape_.size(); ++i) {
            if (i) s += ",";
            s += std::to_string(shape_[i]);
        }
        return s + ")";
    }

private:
    void compute_strides() {
        strides_.assign(shape_.size(), 1);
        size_ = 1;
        for (int i = static_cast<int>(shape_.size()) - 1; i >= 0; --i) {
            strides_[static_cast<size_t>(i)] = size_;
            size_ *= shape_[static_cast<size_t>(i)];
        }
    }

    size_t idx1(int64_t i) const {
        assert(rank() == 1 && i >= 0 && i < shape_[0]);
        return static_cast<size_t>(i);
    }
    size_t idx2(int64_t i, int64_t j) const {
        assert(rank() == 2 && i >= 0 && i < shape_[0] && j >= 0 && j < shape_[1]);
        return static_cast<size_t>(i * strides_[0] + j);
    }
    size_t idx3(int64_t i, int64_t j, int64_t k) const {
        assert(rank() == 3 && i >= 0 && i < shape_[0] && j >= 0 && j < shape_[1] && k >= 0 && k < shape_[2]);
        return static_cast<size_t>(i * strides_[0] + j * strides_[1] + k);
    }
    size_t idx4(int64_t i, int64_t j, int64_t k, int64_t l) const {
        assert(rank() == 4 && l >= 0 && l < shape_[3]);
        return static_cast<size_t>(i * strides_[0] + j * strides_[1] + k * strides_[2] + l);
    }
    size_t idx5(int64_t i, int64_t j, int64_t k, int64_t l, int64_t m) const {
        assert(rank() == 5 && m >= 0 && m < shape_[4]);
        return static_cast<size_t>(i * strides_[0] + j * strides_[1] + k * strides_[2] + l * strides_[3] + m);
    }

    std::vector<int64_t> shape_;
    std::vector<int64_t> strides_;
    int64_t size_ = 0;
    std::vector<T> data_;
};

using Tensor = NdArray<float>;

}  // namespace mdba
