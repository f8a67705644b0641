#pragma once

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <vector>

#include "cimsim/error.hpp"

namespace cimsim {

/// Dense row-major double tensor. Shapes follow [N, C, H, W] for feature
/// maps and [N, F] for flattened features.
struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
        data.assign(static_cast<size_t>(numel_of(shape)), 0.0);
    }

    static std::int64_t numel_of(const std::vector<int>& s) {
        std::int64_t n = 1;
        for (int d : s) {
            if (d < 0) throw ConfigError("Tensor: negative dimension");
            n *= d;
        }
        return n;
    }

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
    int dim(int i) const { return shape[i]; }

    double* ptr() { return data.data(); }
    const double* ptr() const { return data.data(); }

    double& operator[](std::int64_t i) { return data[i]; }
    double operator[](std::int64_t i) const { return data[i]; }

    Tensor reshaped(std::vector<int> s) const {
        if (numel_of(s) != numel()) throw ConfigError("Tensor: reshape element count mismatch");
        Tensor t = *this;
        t.shape = std::move(s);
        return t;
    }
};

} // namespace cimsim
