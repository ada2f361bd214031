#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "refine3d/synthdata.hpp"
#include "refine3d/tensor.hpp"
#include "refine3d/voxel.hpp"

namespace refine3d {

enum class Split { train = 0, val = 1, test = 2 };

struct Sample {
    std::string category;
    std::string id;
    Split split = Split::train;
    uint64_t seed = 0;
    std::vector<Tensor> views;  // each [3,S,S] in [0,1]
    VoxelGrid gt;
};

// Whole dataset held in memory; desk-scale data is a few megabytes.
struct Dataset {
    int64_t image_size = 0;
    int64_t voxel_dim = 0;
    std::vector<Sample> samples;
    std::vector<size_t> train_indices, val_indices, test_indices;
    std::map<std::string, std::vector<size_t>> train_by_category;

    const std::vector<size_t>& split_indices(Split s) const {
        return s == Split::train ? train_indices : s == Split::val ? val_indices : test_indices;
    }
};

Dataset load_dataset(const std::filesystem::path& root);

}  // namespace refine3d
