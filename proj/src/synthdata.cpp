#include "refine3d/synthdata.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "refine3d/binvox.hpp"
#include "refine3d/errors.hpp"
#include "refine3d/fsio.hpp"
#include "refine3d/parallel.hpp"

namespace refine3d {

namespace {

constexpr double kPi = 3.14159265358979323846;

struct Vec3 {
    double x = 0, y = 0, z = 0;
};

Vec3 operator-(Vec3 a, Vec3 b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
Vec3 operator+(Vec3 a, Vec3 b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
Vec3 operator*(Vec3 a, double s) { return {a.x * s, a.y * s, a.z * s}; }
double dot(Vec3 a, Vec3 b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
Vec3 cross(Vec3 a, Vec3 b) {
    return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}
Vec3 normalize(Vec3 a) {
    const double n = std::sqrt(dot(a, a));
    return {a.x / n, a.y / n, a.z / n};
}

// Analytic primitives over grid coordinates. Centre-point tests use the
// voxel centre (x+0.5, y+0.5, z+0.5).
struct Primitive {
    enum Kind { sphere, box, cylinder } kind = sphere;
    Vec3 center;
    Vec3 half;       // box half extents
    double radius = 0;
    double half_height = 0;
    int axis = 1;  // cylinder axis: 0=x, 1=y, 2=z

    bool contains(Vec3 p) const {
        switch (kind) {
            case sphere: {
                const Vec3 d = p - center;
                return dot(d, d) <= radius * radius;
            }
            case box:
                return std::abs(p.x - center.x) <= half.x &&
                       std::abs(p.y - center.y) <= half.y && std::abs(p.z - center.z) <= half.z;
            case cylinder: {
                const double c[3] = {p.x - center.x, p.y - center.y, p.z - center.z};
                const double axial = c[axis];
                double r2 = 0;
                for (int i = 0; i < 3; ++i)
                    if (i != axis) r2 += c[i] * c[i];
                return r2 <= radius * radius && std::abs(axial) <= half_height;
            }
        }
        return false;
    }
};

Primitive random_sphere(Rng& rng, double d, double radius_lo = 0.2, double radius_hi = 0.32) {
    Primitive p;
    p.kind = Primitive::sphere;
    p.radius = rng.next_range(radius_lo * d, radius_hi * d);
    const double margin = p.radius + 1.5;
    p.center = {rng.next_range(margin, d - margin), rng.next_range(margin, d - margin),
                rng.next_range(margin, d - margin)};
    return p;
}

Primitive random_box(Rng& rng, double d, double lo = 0.15, double hi = 0.3) {
    Primitive p;
    p.kind = Primitive::box;
    p.half = {rng.next_range(lo * d, hi * d), rng.next_range(lo * d, hi * d),
              rng.next_range(lo * d, hi * d)};
    p.center = {rng.next_range(p.half.x + 1.5, d - p.half.x - 1.5),
                rng.next_range(p.half.y + 1.5, d - p.half.y - 1.5),
                rng.next_range(p.half.z + 1.5, d - p.half.z - 1.5)};
    return p;
}

Primitive random_cylinder(Rng& rng, double d, double r_lo = 0.15, double r_hi = 0.28) {
    Primitive p;
    p.kind = Primitive::cylinder;
    p.axis = static_cast<int>(rng.next_below(3));
    p.radius = rng.next_range(r_lo * d, r_hi * d);
    p.half_height = rng.next_range(0.2 * d, 0.35 * d);
    double margin[3];
    for (int i = 0; i < 3; ++i)
        margin[i] = (i == p.axis ? p.half_height : p.radius) + 1.5;
    p.center = {rng.next_range(margin[0], d - margin[0]),
                rng.next_range(margin[1], d - margin[1]),
                rng.next_range(margin[2], d - margin[2])};
    return p;
}

VoxelGrid voxelize(const std::vector<Primitive>& solids, int64_t dim) {
    VoxelGrid grid(dim);
    for (int64_t z = 0; z < dim; ++z)
        for (int64_t y = 0; y < dim; ++y)
            for (int64_t x = 0; x < dim; ++x) {
                const Vec3 p{x + 0.5, y + 0.5, z + 0.5};
                for (const Primitive& s : solids) {
                    if (s.contains(p)) {
                        grid.at(x, y, z) = 1.0f;
                        break;
                    }
                }
            }
    return grid;
}

}  // namespace

VoxelGrid voxelize_sphere(std::array<double, 3> center, double radius, int64_t dim) {
    Primitive p;
    p.kind = Primitive::sphere;
    p.center = {center[0], center[1], center[2]};
    p.radius = radius;
    return voxelize({p}, dim);
}

VoxelGrid voxelize_box(std::array<double, 3> center, std::array<double, 3> half_extents,
                       int64_t dim) {
    Primitive p;
    p.kind = Primitive::box;
    p.center = {center[0], center[1], center[2]};
    p.half = {half_extents[0], half_extents[1], half_extents[2]};
    return voxelize({p}, dim);
}

VoxelGrid voxelize_cylinder(std::array<double, 3> center, int axis, double radius,
                            double half_height, int64_t dim) {
    Primitive p;
    p.kind = Primitive::cylinder;
    p.center = {center[0], center[1], center[2]};
    p.axis = axis;
    p.radius = radius;
    p.half_height = half_height;
    return voxelize({p}, dim);
}

VoxelGrid gen_shape(const ShapeSpec& spec, int64_t dim) {
    if (dim < 8) throw ConfigError("gen_shape: grid dimension too small: " + std::to_string(dim));
    Rng rng = substream(spec.seed, 0x73686170ULL);
    const double d = static_cast<double>(dim);

    const int64_t total = dim * dim * dim;
    for (int attempt = 0; attempt < 16; ++attempt) {
        std::vector<Primitive> solids;
        if (spec.category == "sphere") {
            solids.push_back(random_sphere(rng, d));
        } else if (spec.category == "box") {
            solids.push_back(random_box(rng, d));
        } else if (spec.category == "cylinder") {
            solids.push_back(random_cylinder(rng, d));
        } else if (spec.category == "union2") {
            for (int i = 0; i < 2; ++i) {
                switch (rng.next_below(3)) {
                    case 0: solids.push_back(random_sphere(rng, d, 0.14, 0.22)); break;
                    case 1: solids.push_back(random_box(rng, d, 0.1, 0.2)); break;
                    default: solids.push_back(random_cylinder(rng, d, 0.1, 0.18)); break;
                }
            }
        } else {
            throw ConfigError("gen_shape: unknown category '" + spec.category + "'");
        }
        VoxelGrid grid = voxelize(solids, dim);
        const int64_t occ = grid.occupied_count();
        if (occ * 50 >= total && occ * 100 <= total * 60) return grid;  // 2%..60%
    }
    throw ConfigError("gen_shape: could not satisfy occupancy bounds for category '" +
                      spec.category + "'");
}

Camera camera_for_view(uint64_t sample_seed, int64_t view_index, int64_t views_total) {
    Rng rng = substream(sample_seed, 0x63616dULL, static_cast<uint64_t>(view_index));
    Camera cam;
    // stratified azimuths cover the circle; jitter keeps them off-axis
    const double slot = 360.0 / static_cast<double>(std::max<int64_t>(1, views_total));
    cam.azimuth_deg = std::fmod(static_cast<double>(view_index) * slot +
                                    rng.next_range(0.07, 0.93) * slot,
                                360.0);
    cam.elevation_deg = rng.next_range(-30.0, 30.0);
    return cam;
}

namespace {

struct RayHit {
    bool hit = false;
    int64_t x = 0, y = 0, z = 0;
    int face_axis = 0;
    int face_sign = 0;
};

// Amanatides-Woo traversal over the [0,D]^3 cell grid.
RayHit cast_ray(const VoxelGrid& grid, Vec3 origin, Vec3 dir) {
    const double D = static_cast<double>(grid.dim);
    double t0 = 0.0, t1 = 1e30;
    int enter_axis = 0;
    const double o[3] = {origin.x, origin.y, origin.z};
    const double v[3] = {dir.x, dir.y, dir.z};
    for (int a = 0; a < 3; ++a) {
        if (std::abs(v[a]) < 1e-12) {
            if (o[a] <= 0.0 || o[a] >= D) return {};
            continue;
        }
        double lo = (0.0 - o[a]) / v[a];
        double hi = (D - o[a]) / v[a];
        if (lo > hi) std::swap(lo, hi);
        if (lo > t0) {
            t0 = lo;
            enter_axis = a;
        }
        t1 = std::min(t1, hi);
    }
    if (t0 > t1) return {};

    const double start = t0 + 1e-9;
    double px = o[0] + v[0] * start, py = o[1] + v[1] * start, pz = o[2] + v[2] * start;
    int64_t ix = std::clamp<int64_t>(static_cast<int64_t>(std::floor(px)), 0, grid.dim - 1);
    int64_t iy = std::clamp<int64_t>(static_cast<int64_t>(std::floor(py)), 0, grid.dim - 1);
    int64_t iz = std::clamp<int64_t>(static_cast<int64_t>(std::floor(pz)), 0, grid.dim - 1);

    const int64_t step[3] = {v[0] > 0 ? 1 : -1, v[1] > 0 ? 1 : -1, v[2] > 0 ? 1 : -1};
    double t_max[3], t_delta[3];
    const int64_t idx0[3] = {ix, iy, iz};
    for (int a = 0; a < 3; ++a) {
        if (std::abs(v[a]) < 1e-12) {
            t_max[a] = 1e30;
            t_delta[a] = 1e30;
        } else {
            const double boundary = static_cast<double>(idx0[a] + (step[a] > 0 ? 1 : 0));
            t_max[a] = (boundary - o[a]) / v[a];
            t_delta[a] = 1.0 / std::abs(v[a]);
        }
    }

    int last_axis = enter_axis;
    while (ix >= 0 && ix < grid.dim && iy >= 0 && iy < grid.dim && iz >= 0 && iz < grid.dim) {
        if (grid.at(ix, iy, iz) > 0.5f) {
            RayHit hit;
            hit.hit = true;
            hit.x = ix;
            hit.y = iy;
            hit.z = iz;
            hit.face_axis = last_axis;
            hit.face_sign = -static_cast<int>(step[last_axis]);
            return hit;
        }
        if (t_max[0] <= t_max[1] && t_max[0] <= t_max[2]) {
            ix += step[0];
            t_max[0] += t_delta[0];
            last_axis = 0;
        } else if (t_max[1] <= t_max[2]) {
            iy += step[1];
            t_max[1] += t_delta[1];
            last_axis = 1;
        } else {
            iz += step[2];
            t_max[2] += t_delta[2];
            last_axis = 2;
        }
    }
    return {};
}

struct CameraFrame {
    Vec3 forward, right, up;
};

CameraFrame camera_frame(const Camera& cam) {
    const double az = cam.azimuth_deg * kPi / 180.0;
    const double el = cam.elevation_deg * kPi / 180.0;
    const Vec3 eye_dir{std::cos(el) * std::sin(az), std::sin(el), std::cos(el) * std::cos(az)};
    CameraFrame f;
    f.forward = eye_dir * -1.0;
    f.right = normalize(cross(f.forward, Vec3{0, 1, 0}));
    f.up = cross(f.right, f.forward);
    return f;
}

float occupancy_at(const VoxelGrid& g, int64_t x, int64_t y, int64_t z) {
    if (x < 0 || y < 0 || z < 0 || x >= g.dim || y >= g.dim || z >= g.dim) return 0.0f;
    return g.at(x, y, z);
}

template <typename PixelFn>
void for_each_ray(const VoxelGrid& grid, const Camera& cam, int64_t S, PixelFn&& fn) {
    const CameraFrame frame = camera_frame(cam);
    const double D = static_cast<double>(grid.dim);
    const Vec3 center{D / 2, D / 2, D / 2};
    const double half_width = cam.ortho_scale * D;
    const Vec3 eye = center - frame.forward * (2.0 * D);

    parallel_for(S, [&](int64_t row0, int64_t row1) {
        for (int64_t j = row0; j < row1; ++j)
            for (int64_t i = 0; i < S; ++i) {
                const double sx = ((i + 0.5) / static_cast<double>(S) * 2.0 - 1.0) * half_width;
                const double sy = (1.0 - (j + 0.5) / static_cast<double>(S) * 2.0) * half_width;
                const Vec3 origin = eye + frame.right * sx + frame.up * sy;
                fn(i, j, cast_ray(grid, origin, frame.forward), frame);
            }
    });
}

}  // namespace

Image render(const VoxelGrid& grid, const Camera& cam, int64_t image_size) {
    if (grid.occupied_count() == 0) throw DimensionError("render: empty voxel grid");
    Image img(image_size, image_size);
    const Vec3 to_light = normalize({0.4, 0.75, 0.55});
    const double albedo[3] = {0.82, 0.79, 0.72};

    for_each_ray(grid, cam, image_size,
                 [&](int64_t i, int64_t j, const RayHit& hit, const CameraFrame& frame) {
                     uint8_t* px = img.pixel(i, j);
                     if (!hit.hit) {
                         px[0] = px[1] = px[2] = 255;
                         return;
                     }
                     // central-difference gradient of occupancy; the surface
                     // normal points against it (out of the solid)
                     Vec3 g{
                         occupancy_at(grid, hit.x + 1, hit.y, hit.z) -
                             occupancy_at(grid, hit.x - 1, hit.y, hit.z),
                         occupancy_at(grid, hit.x, hit.y + 1, hit.z) -
                             occupancy_at(grid, hit.x, hit.y - 1, hit.z),
                         occupancy_at(grid, hit.x, hit.y, hit.z + 1) -
                             occupancy_at(grid, hit.x, hit.y, hit.z - 1),
                     };
                     Vec3 normal;
                     if (dot(g, g) > 1e-12) {
                         normal = normalize(g * -1.0);
                     } else {
                         normal = {0, 0, 0};
                         (hit.face_axis == 0 ? normal.x
                          : hit.face_axis == 1 ? normal.y
                                               : normal.z) = hit.face_sign;
                     }
                     if (dot(normal, frame.forward) > 0) normal = normal * -1.0;
                     const double lambert = std::max(0.0, dot(normal, to_light));
                     const double b = 0.3 + 0.7 * lambert;
                     for (int c = 0; c < 3; ++c)
                         px[c] = static_cast<uint8_t>(
                             std::lround(std::clamp(b * albedo[c], 0.0, 1.0) * 255.0));
                 });
    return img;
}

std::vector<uint8_t> render_hit_mask(const VoxelGrid& grid, const Camera& cam,
                                     int64_t image_size) {
    std::vector<uint8_t> mask(static_cast<size_t>(image_size * image_size), 0);
    for_each_ray(grid, cam, image_size,
                 [&](int64_t i, int64_t j, const RayHit& hit, const CameraFrame&) {
                     mask[static_cast<size_t>(j * image_size + i)] = hit.hit ? 1 : 0;
                 });
    return mask;
}

namespace {

std::string split_name(int code) { return code == 0 ? "train" : code == 1 ? "val" : "test"; }

}  // namespace

DatasetManifest gen_dataset(const DatasetParams& params, const std::filesystem::path& out_root) {
    if (params.num_samples < 1 || params.views_per_sample < 1)
        throw ConfigError("gen_dataset: need at least one sample and one view");
    std::filesystem::create_directories(out_root);

    const int64_t n = params.num_samples;
    // 80:20 train-pool/test by seeded shuffle; val is carved from the pool
    std::vector<int64_t> order(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
    Rng shuffle_rng = substream(params.seed, 0x73706c6974ULL);
    for (int64_t i = n - 1; i > 0; --i)
        std::swap(order[static_cast<size_t>(i)],
                  order[static_cast<size_t>(shuffle_rng.next_below(static_cast<uint64_t>(i + 1)))]);
    const int64_t n_test = static_cast<int64_t>(std::llround(0.2 * static_cast<double>(n)));
    const int64_t n_val = (n - n_test) / 10;
    std::vector<int> split_of(static_cast<size_t>(n), 0);
    for (int64_t i = 0; i < n; ++i) {
        const int64_t sample = order[static_cast<size_t>(i)];
        split_of[static_cast<size_t>(sample)] = i < n_test ? 2 : (i < n_test + n_val ? 1 : 0);
    }

    DatasetManifest manifest;
    manifest.params = params;
    manifest.samples.resize(static_cast<size_t>(n));

    parallel_for(n, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) {
            ManifestSample& sample = manifest.samples[static_cast<size_t>(i)];
            sample.category = kShapeCategories[static_cast<size_t>(i) % kShapeCategories.size()];
            char idbuf[16];
            std::snprintf(idbuf, sizeof(idbuf), "%04lld", static_cast<long long>(i));
            sample.id = idbuf;
            sample.seed = mix_seed(params.seed, static_cast<uint64_t>(i));
            sample.split = split_name(split_of[static_cast<size_t>(i)]);

            const auto dir = out_root / sample.category / sample.id;
            std::filesystem::create_directories(dir);

            VoxelGrid gt = gen_shape({sample.category, sample.seed}, params.voxel_dim);
            sample.gt = sample.category + "/" + sample.id + "/gt.binvox";
            write_binvox(gt, out_root / sample.gt);

            for (int64_t k = 0; k < params.views_per_sample; ++k) {
                const Camera cam = camera_for_view(sample.seed, k, params.views_per_sample);
                Image view = render(gt, cam, params.image_size);
                ManifestView mv;
                mv.file = sample.category + "/" + sample.id + "/view_" + std::to_string(k) +
                          ".png";
                mv.azimuth_deg = cam.azimuth_deg;
                mv.elevation_deg = cam.elevation_deg;
                write_png(view, out_root / mv.file);
                sample.views.push_back(std::move(mv));
            }
        }
    });

    nlohmann::ordered_json root;
    root["params"] = {{"num_samples", params.num_samples},
                      {"views_per_sample", params.views_per_sample},
                      {"voxel_dim", params.voxel_dim},
                      {"image_size", params.image_size},
                      {"seed", params.seed}};
    nlohmann::ordered_json samples = nlohmann::ordered_json::array();
    for (const auto& s : manifest.samples) {
        nlohmann::ordered_json views = nlohmann::ordered_json::array();
        for (const auto& v : s.views)
            views.push_back({{"file", v.file},
                             {"azimuth_deg", v.azimuth_deg},
                             {"elevation_deg", v.elevation_deg}});
        samples.push_back({{"category", s.category},
                           {"id", s.id},
                           {"split", s.split},
                           {"seed", s.seed},
                           {"views", views},
                           {"gt", s.gt}});
    }
    root["samples"] = samples;
    write_file_atomic(out_root / "manifest.json", root.dump(2) + "\n");
    return manifest;
}

DatasetManifest load_manifest(const std::filesystem::path& root) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(read_file(root / "manifest.json"));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("manifest.json: " + std::string(e.what()));
    }
    DatasetManifest manifest;
    try {
        const auto& p = doc.at("params");
        manifest.params.num_samples = p.at("num_samples").get<int64_t>();
        manifest.params.views_per_sample = p.at("views_per_sample").get<int64_t>();
        manifest.params.voxel_dim = p.at("voxel_dim").get<int64_t>();
        manifest.params.image_size = p.at("image_size").get<int64_t>();
        manifest.params.seed = p.at("seed").get<uint64_t>();
        for (const auto& s : doc.at("samples")) {
            ManifestSample sample;
            sample.category = s.at("category").get<std::string>();
            sample.id = s.at("id").get<std::string>();
            sample.split = s.at("split").get<std::string>();
            sample.seed = s.at("seed").get<uint64_t>();
            sample.gt = s.at("gt").get<std::string>();
            for (const auto& v : s.at("views")) {
                ManifestView mv;
                mv.file = v.at("file").get<std::string>();
                mv.azimuth_deg = v.at("azimuth_deg").get<double>();
                mv.elevation_deg = v.at("elevation_deg").get<double>();
                sample.views.push_back(std::move(mv));
            }
            manifest.samples.push_back(std::move(sample));
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("manifest.json: missing or mistyped field: " + std::string(e.what()));
    }
    return manifest;
}

}  // namespace refine3d
