#pragma once

#include <filesystem>
#include <string>

#include "refine3d/voxel.hpp"

namespace refine3d {

// binvox v1: ASCII header (#binvox 1 / dim / translate / scale / data),
// then run-length pairs (value byte, count byte 1..255) over voxels in
// x-outer, z-middle, y-inner order.
std::string binvox_bytes(const VoxelGrid& grid);
VoxelGrid parse_binvox(const std::string& bytes);

void write_binvox(const VoxelGrid& grid, const std::filesystem::path& path);
VoxelGrid read_binvox(const std::filesystem::path& path);

}  // namespace refine3d
