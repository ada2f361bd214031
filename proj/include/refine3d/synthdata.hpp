#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "refine3d/png_io.hpp"
#include "refine3d/rng.hpp"
#include "refine3d/voxel.hpp"

namespace refine3d {

inline const std::array<std::string, 4> kShapeCategories = {"sphere", "box", "cylinder",
                                                            "union2"};

// Procedural ground-truth solid: category + seed fully determine the shape.
struct ShapeSpec {
    std::string category;
    uint64_t seed = 0;
};

// Analytic solid voxelized by a centre-point inclusion test. The result
// occupies 2..60% of the grid and keeps a one-voxel margin to every face.
VoxelGrid gen_shape(const ShapeSpec& spec, int64_t dim);

// The primitive voxelizers gen_shape draws from, with explicit geometry in
// voxel units (centre-point inclusion test).
VoxelGrid voxelize_sphere(std::array<double, 3> center, double radius, int64_t dim);
VoxelGrid voxelize_box(std::array<double, 3> center, std::array<double, 3> half_extents,
                       int64_t dim);
VoxelGrid voxelize_cylinder(std::array<double, 3> center, int axis, double radius,
                            double half_height, int64_t dim);

// Orthographic camera on the view sphere. y is up; elevation is capped well
// below the poles.
struct Camera {
    double azimuth_deg = 0.0;
    double elevation_deg = 0.0;
    double ortho_scale = 0.9;  // half-width of the view volume in grid units
};

Camera camera_for_view(uint64_t sample_seed, int64_t view_index, int64_t views_total);

// Ray-cast Lambertian rendering on a white background. Surface normals come
// from the central-difference gradient of the occupancy field.
Image render(const VoxelGrid& grid, const Camera& cam, int64_t image_size);

// Hit mask of the same ray casting: true where a ray strikes an occupied
// voxel. The rendered silhouette equals this mask exactly.
std::vector<uint8_t> render_hit_mask(const VoxelGrid& grid, const Camera& cam,
                                     int64_t image_size);

struct DatasetParams {
    int64_t num_samples = 8;
    int64_t views_per_sample = 4;
    int64_t voxel_dim = 16;
    int64_t image_size = 32;
    uint64_t seed = 0;
};

struct ManifestView {
    std::string file;
    double azimuth_deg = 0.0;
    double elevation_deg = 0.0;
};

struct ManifestSample {
    std::string category;
    std::string id;
    std::string split;  // train | val | test
    std::string gt;
    uint64_t seed = 0;
    std::vector<ManifestView> views;
};

struct DatasetManifest {
    DatasetParams params;
    std::vector<ManifestSample> samples;
};

// Writes <root>/<category>/<id>/view_<k>.png, gt.binvox and manifest.json.
// Byte-identical for identical (params, seed).
DatasetManifest gen_dataset(const DatasetParams& params, const std::filesystem::path& out_root);

DatasetManifest load_manifest(const std::filesystem::path& root);

}  // namespace refine3d
