#pragma once

#include <cstdint>
#include <vector>

#include "refine3d/tensor.hpp"

namespace refine3d {

// D^3 occupancy grid. Values are probabilities in [0,1], or {0,1} after
// thresholding. Layout matches tensor [D,H,W] volumes: index (z*D + y)*D + x.
struct VoxelGrid {
    int64_t dim = 0;
    std::vector<float> values;

    VoxelGrid() = default;
    explicit VoxelGrid(int64_t d) : dim(d), values(static_cast<size_t>(d * d * d), 0.0f) {}

    float& at(int64_t x, int64_t y, int64_t z) {
        return values[static_cast<size_t>((z * dim + y) * dim + x)];
    }
    float at(int64_t x, int64_t y, int64_t z) const {
        return values[static_cast<size_t>((z * dim + y) * dim + x)];
    }

    int64_t size() const { return static_cast<int64_t>(values.size()); }

    int64_t occupied_count() const {
        int64_t n = 0;
        for (float v : values)
            if (v > 0.5f) ++n;
        return n;
    }
};

// Model volumes travel as [1,1,D,D,D] (or [D,D,D]) tensors.
template <typename T>
VoxelGrid to_voxel_grid(const TensorT<T>& t) {
    int64_t d = t.shape().back();
    if (t.numel() != d * d * d)
        throw DimensionError("to_voxel_grid: tensor is not a cube, shape " + shape_str(t.shape()));
    VoxelGrid g(d);
    for (int64_t i = 0; i < t.numel(); ++i)
        g.values[static_cast<size_t>(i)] = static_cast<float>(t.data()[static_cast<size_t>(i)]);
    return g;
}

template <typename T>
TensorT<T> voxel_tensor(const VoxelGrid& g, bool batched = true) {
    std::vector<T> vals(g.values.begin(), g.values.end());
    std::vector<int64_t> shape = batched ? std::vector<int64_t>{1, 1, g.dim, g.dim, g.dim}
                                         : std::vector<int64_t>{g.dim, g.dim, g.dim};
    return TensorT<T>::from_data(std::move(shape), std::move(vals));
}

}  // namespace refine3d
