#pragma once

// Dense row-major tensor value type shared by the whole model.

#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace treecaps {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    out += ")";
    return out;
}

template <typename T>
struct Tensor {
    Shape shape;
    std::vector<T> data;

    Tensor() = default;

    explicit Tensor(Shape s, T fill = T(0))
        : shape(std::move(s)), data(static_cast<std::size_t>(shape_numel(shape)), fill) {
        for (auto d : shape) {
            if (d <= 0) throw std::invalid_argument("tensor dimension must be positive, got " + shape_str(shape));
        }
    }

    static Tensor from(Shape s, std::vector<T> values) {
        Tensor t;
        t.shape = std::move(s);
        t.data = std::move(values);
        if (shape_numel(t.shape) != static_cast<std::int64_t>(t.data.size())) {
            throw std::invalid_argument("tensor data length " + std::to_string(t.data.size()) +
                                        " does not match shape " + shape_str(t.shape));
        }
        return t;
    }

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
    std::size_t rank() const { return shape.size(); }

    std::int64_t rows() const { return shape.empty() ? 1 : shape[0]; }
    std::int64_t cols() const {
        if (shape.size() < 2) throw std::logic_error("cols() on tensor of shape " + shape_str(shape));
        std::int64_t c = 1;
        for (std::size_t i = 1; i < shape.size(); ++i) c *= shape[i];
        return c;
    }

    T& operator[](std::int64_t i) { return data[static_cast<std::size_t>(i)]; }
    const T& operator[](std::int64_t i) const { return data[static_cast<std::size_t>(i)]; }

    T& at2(std::int64_t i, std::int64_t j) { return data[static_cast<std::size_t>(i * cols() + j)]; }
    const T& at2(std::int64_t i, std::int64_t j) const { return data[static_cast<std::size_t>(i * cols() + j)]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (const T& v : data) {
            if (!std::isfinite(static_cast<double>(v))) return false;
        }
        return true;
    }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out;
        out.shape = shape;
        out.data.resize(data.size());
        for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }
};

template <typename T>
inline double l2_norm_of(const Tensor<T>& t) {
    double s = 0.0;
    for (const T& v : t.data) s += static_cast<double>(v) * static_cast<double>(v);
    return std::sqrt(s);
}

}  // namespace treecaps
