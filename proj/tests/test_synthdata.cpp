#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <unistd.h>

#include <cmath>
#include <filesystem>
#include <map>
#include <set>

#include "refine3d/binvox.hpp"
#include "refine3d/dataset.hpp"
#include "refine3d/fsio.hpp"
#include "refine3d/png_io.hpp"
#include "refine3d/synthdata.hpp"

using namespace refine3d;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) {
        path = fs::temp_directory_path() /
               ("refine3d_test_" + tag + "_" + std::to_string(::getpid()));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

VoxelGrid random_grid(int64_t dim, Rng& rng, double density = 0.3) {
    VoxelGrid g(dim);
    for (auto& v : g.values) v = rng.next_double() < density ? 1.0f : 0.0f;
    return g;
}

std::map<std::string, std::string> snapshot_tree(const fs::path& root) {
    std::map<std::string, std::string> snap;
    for (const auto& entry : fs::recursive_directory_iterator(root)) {
        if (!entry.is_regular_file()) continue;
        snap[fs::relative(entry.path(), root).string()] = read_file(entry.path());
    }
    return snap;
}

// Independent silhouette oracle: a pixel is covered iff its ray intersects
// the axis-aligned cube of any occupied voxel (slab test per voxel).
std::vector<uint8_t> projection_oracle(const VoxelGrid& grid, const Camera& cam, int64_t S) {
    const double pi = 3.14159265358979323846;
    const double az = cam.azimuth_deg * pi / 180.0, el = cam.elevation_deg * pi / 180.0;
    const double eye[3] = {std::cos(el) * std::sin(az), std::sin(el),
                           std::cos(el) * std::cos(az)};
    const double fwd[3] = {-eye[0], -eye[1], -eye[2]};
    double right[3] = {-fwd[2], 0.0, fwd[0]};  // cross(fwd, up=(0,1,0))
    const double rn = std::sqrt(right[0] * right[0] + right[1] * right[1] + right[2] * right[2]);
    for (double& v : right) v /= rn;
    const double up[3] = {right[1] * fwd[2] - right[2] * fwd[1],
                          right[2] * fwd[0] - right[0] * fwd[2],
                          right[0] * fwd[1] - right[1] * fwd[0]};
    const double D = static_cast<double>(grid.dim);
    const double half_width = cam.ortho_scale * D;

    std::vector<uint8_t> mask(static_cast<size_t>(S * S), 0);
    for (int64_t j = 0; j < S; ++j)
        for (int64_t i = 0; i < S; ++i) {
            const double sx = ((i + 0.5) / S * 2.0 - 1.0) * half_width;
            const double sy = (1.0 - (j + 0.5) / S * 2.0) * half_width;
            double origin[3];
            for (int a = 0; a < 3; ++a)
                origin[a] = D / 2 + sx * right[a] + sy * up[a] - 2.0 * D * fwd[a];
            bool hit = false;
            for (int64_t z = 0; z < grid.dim && !hit; ++z)
                for (int64_t y = 0; y < grid.dim && !hit; ++y)
                    for (int64_t x = 0; x < grid.dim && !hit; ++x) {
                        if (grid.at(x, y, z) < 0.5f) continue;
                        const double lo[3] = {double(x), double(y), double(z)};
                        double t0 = -1e30, t1 = 1e30;
                        bool miss = false;
                        for (int a = 0; a < 3 && !miss; ++a) {
                            if (std::abs(fwd[a]) < 1e-12) {
                                if (origin[a] <= lo[a] || origin[a] >= lo[a] + 1) miss = true;
                                continue;
                            }
                            double ta = (lo[a] - origin[a]) / fwd[a];
                            double tb = (lo[a] + 1 - origin[a]) / fwd[a];
                            if (ta > tb) std::swap(ta, tb);
                            t0 = std::max(t0, ta);
                            t1 = std::min(t1, tb);
                        }
                        if (!miss && t0 <= t1 && t1 > 0) hit = true;
                    }
            mask[static_cast<size_t>(j * S + i)] = hit ? 1 : 0;
        }
    return mask;
}

}  // namespace

TEST_CASE("sphere occupancy tracks the analytic volume") {
    for (double r : {4.0, 6.0, 9.0}) {
        const int64_t dim = 32;
        VoxelGrid g = voxelize_sphere({16.0, 16.0, 16.0}, r, dim);
        const double expected = 4.0 / 3.0 * 3.14159265358979 * r * r * r;
        const double count = static_cast<double>(g.occupied_count());
        CHECK(count >= 0.85 * expected);
        CHECK(count <= 1.15 * expected);
    }
}

TEST_CASE("box occupancy is the product of per-axis extents") {
    const int64_t dim = 24;
    VoxelGrid g = voxelize_box({11.3, 12.7, 10.2}, {4.1, 3.3, 5.6}, dim);
    int64_t nx = 0, ny = 0, nz = 0;
    for (int64_t i = 0; i < dim; ++i) {
        if (std::abs(i + 0.5 - 11.3) <= 4.1) ++nx;
        if (std::abs(i + 0.5 - 12.7) <= 3.3) ++ny;
        if (std::abs(i + 0.5 - 10.2) <= 5.6) ++nz;
    }
    CHECK(g.occupied_count() == nx * ny * nz);
}

TEST_CASE("gen_shape determinism, occupancy bounds, margins, categories") {
    for (const std::string& category : kShapeCategories) {
        for (uint64_t seed : {1ULL, 2ULL, 77ULL}) {
            VoxelGrid a = gen_shape({category, seed}, 16);
            VoxelGrid b = gen_shape({category, seed}, 16);
            CHECK(a.values == b.values);

            const int64_t total = 16 * 16 * 16;
            const int64_t occ = a.occupied_count();
            CHECK(occ * 50 >= total);
            CHECK(occ * 100 <= total * 60);

            // one-voxel empty margin on every face
            for (int64_t u = 0; u < 16; ++u)
                for (int64_t v = 0; v < 16; ++v) {
                    CHECK(a.at(0, u, v) == 0.0f);
                    CHECK(a.at(15, u, v) == 0.0f);
                    CHECK(a.at(u, 0, v) == 0.0f);
                    CHECK(a.at(u, 15, v) == 0.0f);
                    CHECK(a.at(u, v, 0) == 0.0f);
                    CHECK(a.at(u, v, 15) == 0.0f);
                }
        }
    }
    CHECK_THROWS_AS(gen_shape({"torus", 1}, 16), ConfigError);
}

TEST_CASE("render: disc silhouette of a centred sphere") {
    const int64_t dim = 32, S = 96;
    const double r = 10.0;
    VoxelGrid sphere = voxelize_sphere({16.0, 16.0, 16.0}, r, dim);
    Rng rng(9);
    for (int trial = 0; trial < 5; ++trial) {
        Camera cam;
        cam.azimuth_deg = rng.next_range(0.0, 360.0);
        cam.elevation_deg = rng.next_range(-30.0, 30.0);
        auto mask = render_hit_mask(sphere, cam, S);
        int64_t area = 0;
        for (uint8_t m : mask) area += m;
        const double px_per_unit = static_cast<double>(S) / (2.0 * cam.ortho_scale * dim);
        const double expected = 3.14159265358979 * (r * px_per_unit) * (r * px_per_unit);
        CHECK(static_cast<double>(area) >= 0.85 * expected);
        CHECK(static_cast<double>(area) <= 1.15 * expected);
    }
}

TEST_CASE("render determinism and non-empty output") {
    VoxelGrid g = gen_shape({"union2", 42}, 16);
    Camera cam{123.4, 17.0};
    Image a = render(g, cam, 32);
    Image b = render(g, cam, 32);
    CHECK(a.rgb == b.rgb);

    int64_t non_background = 0;
    for (int64_t i = 0; i < 32 * 32; ++i) {
        const uint8_t* px = a.rgb.data() + 3 * i;
        if (!(px[0] == 255 && px[1] == 255 && px[2] == 255)) ++non_background;
    }
    CHECK(non_background >= 1);

    CHECK_THROWS_AS(render(VoxelGrid(8), cam, 16), DimensionError);
}

TEST_CASE("rendered silhouette equals the orthographic projection oracle") {
    Rng rng(21);
    for (int trial = 0; trial < 3; ++trial) {
        VoxelGrid g = random_grid(8, rng, 0.18);
        if (g.occupied_count() == 0) g.at(3, 4, 2) = 1.0f;
        Camera cam;
        cam.azimuth_deg = rng.next_range(5.0, 355.0);
        cam.elevation_deg = rng.next_range(-28.0, 28.0);
        const int64_t S = 24;
        auto got = render_hit_mask(g, cam, S);
        auto want = projection_oracle(g, cam, S);
        CHECK(got == want);

        // the image background matches the mask exactly
        Image img = render(g, cam, S);
        for (int64_t i = 0; i < S * S; ++i) {
            const uint8_t* px = img.rgb.data() + 3 * i;
            const bool background = px[0] == 255 && px[1] == 255 && px[2] == 255;
            CHECK(background == (got[static_cast<size_t>(i)] == 0));
        }
    }
}

TEST_CASE("binvox round trip on random grids") {
    Rng rng(31);
    for (int trial = 0; trial < 50; ++trial) {
        VoxelGrid g = random_grid(16, rng, rng.next_range(0.05, 0.7));
        VoxelGrid back = parse_binvox(binvox_bytes(g));
        CHECK(back.dim == g.dim);
        CHECK(back.values == g.values);
    }
    VoxelGrid big = random_grid(64, rng, 0.4);
    CHECK(parse_binvox(binvox_bytes(big)).values == big.values);
}

TEST_CASE("binvox RLE of the empty grid sums to the full volume of zeros") {
    VoxelGrid empty(16);
    std::string bytes = binvox_bytes(empty);
    const size_t payload = bytes.find("data\n") + 5;
    int64_t zeros = 0;
    for (size_t i = payload; i < bytes.size(); i += 2) {
        CHECK(static_cast<uint8_t>(bytes[i]) == 0);
        zeros += static_cast<uint8_t>(bytes[i + 1]);
    }
    CHECK(zeros == 4096);
}

TEST_CASE("binvox malformed inputs raise format errors") {
    VoxelGrid g(4);
    g.at(1, 2, 3) = 1.0f;
    std::string good = binvox_bytes(g);

    CHECK_THROWS_AS(parse_binvox(good.substr(0, good.size() - 1)), FormatError);
    CHECK_THROWS_AS(parse_binvox("#binvox 2\ndim 4 4 4\ndata\n"), FormatError);
    CHECK_THROWS_AS(parse_binvox("#binvox 1\ndata\n"), FormatError);
    CHECK_THROWS_AS(parse_binvox("#binvox 1\ndim 4 4 2\ndata\n"), FormatError);

    std::string overrun = "#binvox 1\ndim 2 2 2\ndata\n";
    overrun.push_back('\x01');
    overrun.push_back('\xff');  // 255 > 8
    CHECK_THROWS_AS(parse_binvox(overrun), FormatError);
    try {
        parse_binvox(overrun);
    } catch (const FormatError& e) {
        CHECK(std::string(e.what()).find("byte") != std::string::npos);
    }
}

TEST_CASE("png round trip within quantization") {
    TempDir tmp("png");
    Rng rng(41);
    Tensor t = Tensor::zeros({3, 16, 16});
    for (auto& v : t.data()) v = static_cast<float>(rng.next_double());

    const auto path = tmp.path / "img.png";
    write_png(tensor_to_image(t), path);
    Tensor back = image_to_tensor<float>(read_png(path));
    REQUIRE(back.shape() == t.shape());
    float max_err = 0.0f;
    for (size_t i = 0; i < t.data().size(); ++i)
        max_err = std::max(max_err, std::abs(t.data()[i] - back.data()[i]));
    CHECK(max_err <= 1.0f / 255.0f);
}

TEST_CASE("png white image, paper size, malformed input") {
    TempDir tmp("png2");
    Image white(32, 32);
    std::fill(white.rgb.begin(), white.rgb.end(), 255);
    const auto path = tmp.path / "white.png";
    write_png(white, path);

    std::string bytes = read_file(path);
    const uint8_t sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
    REQUIRE(bytes.size() >= 8);
    for (int i = 0; i < 8; ++i) CHECK(static_cast<uint8_t>(bytes[i]) == sig[i]);

    Image back = read_png(path);
    CHECK(back.width == 32);
    CHECK(back.rgb == white.rgb);

    Image big(127, 127);
    for (size_t i = 0; i < big.rgb.size(); ++i) big.rgb[i] = static_cast<uint8_t>(i * 31 % 256);
    const auto path2 = tmp.path / "big.png";
    write_png(big, path2);
    Image big_back = read_png(path2);
    CHECK(big_back.width == 127);
    CHECK(big_back.rgb == big.rgb);

    write_file_atomic(tmp.path / "junk.png", "not a png at all");
    CHECK_THROWS_AS(read_png(tmp.path / "junk.png"), FormatError);
}

TEST_CASE("gen_dataset layout, determinism, splits, manifest completeness") {
    TempDir tmp("ds");
    DatasetParams params{8, 4, 16, 32, 7};
    DatasetManifest manifest = gen_dataset(params, tmp.path / "a");

    CHECK(manifest.samples.size() == 8);
    for (const auto& s : manifest.samples)
        CHECK(fs::is_directory(tmp.path / "a" / s.category / s.id));

    gen_dataset(params, tmp.path / "b");
    CHECK(snapshot_tree(tmp.path / "a") == snapshot_tree(tmp.path / "b"));

    std::set<std::string> listed = {"manifest.json"};
    for (const auto& s : manifest.samples) {
        listed.insert(s.gt);
        for (const auto& v : s.views) listed.insert(v.file);
    }
    std::set<std::string> on_disk;
    for (const auto& entry : fs::recursive_directory_iterator(tmp.path / "a"))
        if (entry.is_regular_file())
            on_disk.insert(fs::relative(entry.path(), tmp.path / "a").string());
    CHECK(listed == on_disk);

    DatasetManifest ten = gen_dataset({10, 2, 16, 32, 3}, tmp.path / "c");
    int64_t pool = 0, test = 0;
    for (const auto& s : ten.samples) (s.split == "test" ? test : pool) += 1;
    CHECK(pool == 8);
    CHECK(test == 2);
}

TEST_CASE("dataset loads back with consistent shapes and splits") {
    TempDir tmp("load");
    gen_dataset({8, 3, 16, 32, 11}, tmp.path);
    Dataset ds = load_dataset(tmp.path);
    CHECK(ds.samples.size() == 8);
    CHECK(ds.image_size == 32);
    CHECK(ds.voxel_dim == 16);
    CHECK(ds.train_indices.size() + ds.val_indices.size() + ds.test_indices.size() == 8);
    for (const auto& s : ds.samples) {
        CHECK(s.views.size() == 3);
        CHECK(s.views[0].shape() == std::vector<int64_t>{3, 32, 32});
        CHECK(s.gt.dim == 16);
        for (float v : s.views[0].data()) {
            CHECK(v >= 0.0f);
            CHECK(v <= 1.0f);
        }
    }
    CHECK_THROWS_AS(load_dataset(tmp.path / "missing"), IoError);
}
