// Dense n-dimensional tensor of doubles, row-major, batch dimension first.
#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "evgen/common.hpp"

namespace evgen::nn {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
    return out + "]";
}

struct Tensor {
    Shape shape;
    std::vector<double> v;

    Tensor() = default;
    explicit Tensor(Shape s) : shape(std::move(s)), v(shape_numel(shape), 0.0) {}
    Tensor(Shape s, std::vector<double> data) : shape(std::move(s)), v(std::move(data)) {
        if (v.size() != shape_numel(shape)) throw ValidationError("tensor data/shape mismatch");
    }

    static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
    static Tensor full(Shape s, double value) {
        Tensor t(std::move(s));
        std::fill(t.v.begin(), t.v.end(), value);
        return t;
    }

    std::size_t numel() const { return v.size(); }
    double& operator[](std::size_t i) { return v[i]; }
    double operator[](std::size_t i) const { return v[i]; }

    void fill(double value) { std::fill(v.begin(), v.end(), value); }

    Tensor reshaped(Shape s) const {
        if (shape_numel(s) != numel())
            throw ValidationError("cannot reshape " + shape_str(shape) + " to " + shape_str(s));
        Tensor t;
        t.shape = std::move(s);
        t.v = v;
        return t;
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    void assert_finite(const std::string& what) const {
        for (double x : v)
            if (!std::isfinite(x)) throw ValidationError("non-finite value in " + what);
    }
};

}  // namespace evgen::nn
