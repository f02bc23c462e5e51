#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace sgcn {

/// Dense row-major tensor over a flat buffer. Ranks used in this project
/// are 1 (vectors), 2 (matrices / per-joint features) and 3 (channels x
/// frames x joints).
template <typename T>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
        data_.assign(static_cast<size_t>(count(shape_)), T(0));
    }

    Tensor(std::vector<int> shape, std::vector<T> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (static_cast<std::int64_t>(data_.size()) != count(shape_)) {
            throw std::invalid_argument("Tensor: data length does not match shape");
        }
    }

    static Tensor full(std::vector<int> shape, T value) {
        Tensor t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), value);
        return t;
    }

    const std::vector<int>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_.at(static_cast<size_t>(i)); }
    std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::vector<T>& raw() { return data_; }
    const std::vector<T>& raw() const { return data_; }

    T& operator[](std::int64_t i) { return data_[static_cast<size_t>(i)]; }
    const T& operator[](std::int64_t i) const { return data_[static_cast<size_t>(i)]; }

    T& operator()(int i) { return data_[static_cast<size_t>(i)]; }
    const T& operator()(int i) const { return data_[static_cast<size_t>(i)]; }

    T& operator()(int i, int j) { return data_[static_cast<size_t>(i) * shape_[1] + j]; }
    const T& operator()(int i, int j) const {
        return data_[static_cast<size_t>(i) * shape_[1] + j];
    }

    T& operator()(int i, int j, int k) {
        return data_[(static_cast<size_t>(i) * shape_[1] + j) * shape_[2] + k];
    }
    const T& operator()(int i, int j, int k) const {
        return data_[(static_cast<size_t>(i) * shape_[1] + j) * shape_[2] + k];
    }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

    bool all_finite() const {
        for (const T& v : data_) {
            if (!std::isfinite(static_cast<double>(v))) return false;
        }
        return true;
    }

    template <typename U>
    Tensor<U> cast() const {
        std::vector<U> out(data_.size());
        for (size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
        return Tensor<U>(shape_, std::move(out));
    }

    static std::int64_t count(const std::vector<int>& shape) {
        std::int64_t n = 1;
        for (int d : shape) {
            if (d <= 0) throw std::invalid_argument("Tensor: non-positive extent");
            n *= d;
        }
        return n;
    }

private:
    std::vector<int> shape_;
    std::vector<T> data_;
};

template <typename T>
std::string shape_string(const Tensor<T>& t) {
    std::string s = "(";
    for (int i = 0; i < t.rank(); ++i) {
        if (i) s += ",";
        s += std::to_string(t.dim(i));
    }
    return s + ")";
}

}  // namespace sgcn
