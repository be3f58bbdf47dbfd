#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "protosal/common.hpp"

namespace protosal {

// Dense row-major n-d array. Instantiated with float for the training path
// and with double for verification (gradient checks run in 64-bit through
// the same templated kernels).
template <class S>
struct TensorT {
    std::vector<std::int64_t> shape;
    std::vector<S> data;
    bool requires_grad = false;
    std::vector<S> grad;  // empty, or same length as data

    TensorT() = default;

    explicit TensorT(std::vector<std::int64_t> shp) : shape(std::move(shp)) {
        data.assign(static_cast<std::size_t>(numel_of(shape)), S(0));
    }

    TensorT(std::vector<std::int64_t> shp, std::vector<S> values)
        : shape(std::move(shp)), data(std::move(values)) {
        if (numel_of(shape) != static_cast<std::int64_t>(data.size()))
            throw Error("tensor: shape " + shape_str() + " does not match " +
                        std::to_string(data.size()) + " values");
    }

    static std::int64_t numel_of(const std::vector<std::int64_t>& shp) {
        std::int64_t n = 1;
        for (auto d : shp) {
            if (d < 0) throw Error("tensor: negative dimension");
            n *= d;
        }
        return n;
    }

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
    std::int64_t dim(std::size_t i) const { return shape.at(i); }
    std::size_t ndim() const { return shape.size(); }

    S& operator[](std::size_t i) { return data[i]; }
    const S& operator[](std::size_t i) const { return data[i]; }

    void fill(S v) { std::fill(data.begin(), data.end(), v); }

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), S(0));
    }

    void zero_grad() { std::fill(grad.begin(), grad.end(), S(0)); }

    bool same_shape(const TensorT& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (const S v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    std::string shape_str() const {
        std::ostringstream os;
        os << "[";
        for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
        os << "]";
        return os.str();
    }

    template <class T2>
    TensorT<T2> cast() const {
        TensorT<T2> r;
        r.shape = shape;
        r.data.resize(data.size());
        for (std::size_t i = 0; i < data.size(); ++i) r.data[i] = static_cast<T2>(data[i]);
        return r;
    }
};

using Tensor = TensorT<float>;
using Tensor64 = TensorT<double>;

}  // namespace protosal
