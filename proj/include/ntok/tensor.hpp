#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "ntok/errors.hpp"

namespace ntok {

// Dense row-major tensor. float for training/inference, double for
// finite-difference gradient checks.
template <typename T>
struct Tensor {
    std::vector<int> dims;
    std::vector<T> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> d) : dims(std::move(d)) {
        data.assign(numel_of(dims), T(0));
    }
    Tensor(std::vector<int> d, std::vector<T> values) : dims(std::move(d)), data(std::move(values)) {
        if (numel_of(dims) != data.size())
            throw DimensionError("tensor data length does not match dims");
    }

    static size_t numel_of(const std::vector<int>& d) {
        size_t n = 1;
        for (int v : d) {
            if (v <= 0) throw DimensionError("tensor dims must be positive");
            n *= static_cast<size_t>(v);
        }
        return n;
    }

    static Tensor zeros(std::vector<int> d) { return Tensor(std::move(d)); }

    static Tensor full(std::vector<int> d, T v) {
        Tensor t(std::move(d));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }

    size_t numel() const { return data.size(); }
    int rank() const { return static_cast<int>(dims.size()); }
    int dim(int i) const { return dims[static_cast<size_t>(i)]; }
    bool empty() const { return data.empty(); }

    T* ptr() { return data.data(); }
    const T* ptr() const { return data.data(); }

    bool same_shape(const Tensor& o) const { return dims == o.dims; }

    T& at(std::initializer_list<int> idx) {
        return data[offset(idx)];
    }
    T at(std::initializer_list<int> idx) const {
        return data[offset(idx)];
    }

    size_t offset(std::initializer_list<int> idx) const {
        size_t off = 0;
        size_t i = 0;
        for (int v : idx) {
            off = off * static_cast<size_t>(dims[i]) + static_cast<size_t>(v);
            ++i;
        }
        return off;
    }

    bool all_finite() const {
        for (T v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    void fill(T v) { std::fill(data.begin(), data.end(), v); }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out;
        out.dims = dims;
        out.data.resize(data.size());
        for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }

    std::string shape_str() const {
        std::ostringstream os;
        os << "[";
        for (size_t i = 0; i < dims.size(); ++i) {
            if (i) os << ",";
            os << dims[i];
        }
        os << "]";
        return os.str();
    }
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

template <typename T>
void require_finite(const Tensor<T>& t, const std::string& where) {
    if (!t.all_finite())
        throw NumericError("non-finite values in " + where);
}

template <typename T>
void require_shape(const Tensor<T>& t, const std::vector<int>& dims, const std::string& where) {
    if (t.dims != dims) {
        Tensor<T> probe;
        probe.dims = dims;
        throw DimensionError(where + ": expected " + probe.shape_str() + ", got " + t.shape_str());
    }
}

template <typename T>
bool bitwise_equal(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.dims != b.dims) return false;
    for (size_t i = 0; i < a.data.size(); ++i) {
        // bit compare, not value compare: distinguishes -0.0 and NaN payloads
        if (std::memcmp(&a.data[i], &b.data[i], sizeof(T)) != 0) return false;
    }
    return true;
}

} // namespace ntok
