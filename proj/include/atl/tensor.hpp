#pragma once

#include <Eigen/Dense>
#include <Eigen/StdVector>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "atl/error.hpp"

namespace atl {

using MatRM = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatRM>;
using CMapRM = Eigen::Map<const MatRM>;
using VecMap = Eigen::Map<Eigen::VectorXf>;
using CVecMap = Eigen::Map<const Eigen::VectorXf>;

// Dense float tensor with an explicit shape. Contiguous, row-major.
// Storage is Eigen-aligned so vectorized kernels peel identically across
// allocations; forward/backward stay bitwise deterministic.
struct Tensor {
    std::vector<int> shape;
    std::vector<float, Eigen::aligned_allocator<float>> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)), data(numel_of(shape), 0.0f) {}
    Tensor(std::vector<int> s, float fill)
        : shape(std::move(s)), data(numel_of(shape), fill) {}

    static size_t numel_of(const std::vector<int>& s) {
        size_t n = 1;
        for (int d : s) n *= static_cast<size_t>(d);
        return n;
    }

    size_t numel() const { return data.size(); }
    float* ptr() { return data.data(); }
    const float* ptr() const { return data.data(); }

    float& operator[](size_t i) { return data[i]; }
    float operator[](size_t i) const { return data[i]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    // view as a (rows, cols) row-major matrix; rows*cols must equal numel
    MapRM mat(int rows, int cols) {
        if (static_cast<size_t>(rows) * cols != numel())
            throw dimension_error("tensor view size mismatch");
        return MapRM(data.data(), rows, cols);
    }
    CMapRM mat(int rows, int cols) const {
        if (static_cast<size_t>(rows) * cols != numel())
            throw dimension_error("tensor view size mismatch");
        return CMapRM(data.data(), rows, cols);
    }
    VecMap vec() { return VecMap(data.data(), static_cast<Eigen::Index>(numel())); }
    CVecMap vec() const { return CVecMap(data.data(), static_cast<Eigen::Index>(numel())); }

    void zero() { std::fill(data.begin(), data.end(), 0.0f); }
};

inline std::string shape_str(const std::vector<int>& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

}  // namespace atl
