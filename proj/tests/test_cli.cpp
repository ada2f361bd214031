#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <map>
#include <string>

#include "refine3d/binvox.hpp"
#include "refine3d/fsio.hpp"
#include "refine3d/metrics.hpp"
#include "refine3d/png_io.hpp"

using namespace refine3d;
namespace fs = std::filesystem;

namespace {

std::string cli_path() {
    const char* env = std::getenv("REFINE3D_CLI");
    REQUIRE_MESSAGE(env != nullptr, "REFINE3D_CLI must point at the refine3d binary");
    return env;
}

int run_cli(const std::string& args) {
    const std::string cmd = cli_path() + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    REQUIRE(status != -1);
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) {
        path = fs::temp_directory_path() /
               ("refine3d_cli_" + tag + "_" + std::to_string(::getpid()));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string operator/(const std::string& leaf) const { return (path / leaf).string(); }
};

std::map<std::string, std::string> snapshot_tree(const fs::path& root) {
    std::map<std::string, std::string> snap;
    for (const auto& entry : fs::recursive_directory_iterator(root))
        if (entry.is_regular_file())
            snap[fs::relative(entry.path(), root).string()] = read_file(entry.path());
    return snap;
}

// shared fixture: one small dataset + one short training run per process
const TempDir& workspace() {
    static TempDir tmp("ws");
    static bool ready = false;
    if (!ready) {
        REQUIRE(run_cli("gen-data --out " + (tmp / "ds") +
                        " --num 8 --views 4 --dim 16 --img 32 --seed 7") == 0);
        REQUIRE(run_cli("train --data " + (tmp / "ds") + " --phase all --out " + (tmp / "m.ckpt") +
                        " --metrics " + (tmp / "metrics.csv") +
                        " --seed 9 --steps1 8 --steps2 4 --steps3 4 --eval-every 4") == 0);
        ready = true;
    }
    return tmp;
}

}  // namespace

TEST_CASE("gen-data: layout, determinism, 24 views, bad flags") {
    TempDir tmp("gen");
    CHECK(run_cli("gen-data --out " + (tmp / "a") +
                  " --num 8 --views 4 --dim 16 --img 32 --seed 7") == 0);
    int64_t sample_dirs = 0;
    for (const auto& e : fs::recursive_directory_iterator(tmp.path / "a"))
        if (e.is_regular_file() && e.path().filename() == "gt.binvox") ++sample_dirs;
    CHECK(sample_dirs == 8);

    CHECK(run_cli("gen-data --out " + (tmp / "b") +
                  " --num 8 --views 4 --dim 16 --img 32 --seed 7") == 0);
    CHECK(snapshot_tree(tmp.path / "a") == snapshot_tree(tmp.path / "b"));

    CHECK(run_cli("gen-data --out " + (tmp / "c") +
                  " --num 2 --views 24 --dim 16 --img 32 --seed 1") == 0);
    int64_t views = 0;
    for (const auto& e : fs::recursive_directory_iterator(tmp.path / "c"))
        if (e.path().extension() == ".png") ++views;
    CHECK(views == 48);

    CHECK(run_cli("gen-data --num 8") == 2);                       // missing --out
    CHECK(run_cli("gen-data --out x --num notanumber") == 2);      // bad value
    CHECK(run_cli("made-up-subcommand") == 2);
}

TEST_CASE("train: phase checkpoints, metrics, determinism") {
    const TempDir& tmp = workspace();
    for (const char* leaf : {"m.ckpt", "m.ckpt.phase1", "m.ckpt.phase2", "m.ckpt.phase3"})
        CHECK(fs::exists(tmp.path / leaf));

    const std::string metrics = read_file(tmp.path / "metrics.csv");
    std::istringstream in(metrics);
    std::string line;
    std::getline(in, line);
    CHECK(line == "step,phase,l_p,l_r,l_m,val_iou,lr");
    int64_t prev = 0, rows = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        ++rows;
        const int64_t step = std::stoll(line.substr(0, line.find(',')));
        CHECK(step > prev);
        prev = step;
    }
    CHECK(rows == 16);

    // identical second invocation gives identical bytes
    TempDir again("train2");
    CHECK(run_cli("train --data " + (tmp / "ds") + " --phase all --out " + (again / "m.ckpt") +
                  " --metrics " + (again / "metrics.csv") +
                  " --seed 9 --steps1 8 --steps2 4 --steps3 4 --eval-every 4") == 0);
    CHECK(read_file(again.path / "metrics.csv") == metrics);
    CHECK(read_file(again.path / "m.ckpt") == read_file(tmp.path / "m.ckpt"));
}

TEST_CASE("train: phase order, resume, config file") {
    const TempDir& tmp = workspace();
    TempDir local("order");
    CHECK(run_cli("train --data " + (tmp / "ds") + " --phase 2 --out " + (local / "x.ckpt")) ==
          3);
    CHECK(run_cli("train --data " + (tmp / "ds") + " --phase 2 --resume " + (tmp / "m.ckpt") +
                  " --out " + (local / "r.ckpt") + " --steps2 2 --eval-every 10") == 0);
    CHECK(run_cli("train --data " + (tmp / "ds") + " --phase 2 --force-phase --out " +
                  (local / "f.ckpt") + " --steps2 2 --eval-every 10") == 0);

    write_file_atomic(local.path / "cfg.json",
                      "{\"preset\": \"desk\", \"seed\": 5, \"phase1_steps\": 2, "
                      "\"eval_every\": 10}\n");
    CHECK(run_cli("train --config " + (local / "cfg.json") + " --data " + (tmp / "ds") +
                  " --phase 1 --out " + (local / "c.ckpt")) == 0);
    write_file_atomic(local.path / "bad.json", "{\"no_such_key\": 1}\n");
    CHECK(run_cli("train --config " + (local / "bad.json") + " --data " + (tmp / "ds") +
                  " --phase 1 --out " + (local / "d.ckpt")) == 2);
    CHECK(run_cli("train --data " + (local / "nonexistent") + " --phase 1 --out " +
                  (local / "e.ckpt")) == 1);
}

TEST_CASE("train: exploding loss aborts with the numeric exit code") {
    const TempDir& tmp = workspace();
    TempDir local("nan");
    write_file_atomic(local.path / "boom.json", "{\"lr_base\": 1e30, \"phase1_steps\": 6}\n");
    CHECK(run_cli("train --config " + (local / "boom.json") + " --data " + (tmp / "ds") +
                  " --phase 1 --out " + (local / "b.ckpt")) == 4);
    CHECK_FALSE(fs::exists(local.path / "b.ckpt"));  // no partial output
}

TEST_CASE("eval: tables, determinism, structure, bad requests") {
    const TempDir& tmp = workspace();
    TempDir local("eval");
    const std::string base = "eval --checkpoint " + (tmp / "m.ckpt") + " --data " + (tmp / "ds") +
                             " --split train --views 1,2,4 --out ";
    CHECK(run_cli(base + (local / "a.csv") + " --compare-refiner") == 0);
    CHECK(run_cli(base + (local / "b.csv") + " --compare-refiner") == 0);
    CHECK(read_file(local.path / "a.csv") == read_file(local.path / "b.csv"));

    auto refined = read_iou_csv(local.path / "a.csv");
    auto decoder = read_iou_csv(local.path / "a.csv.decoder.csv");
    REQUIRE(refined.size() == decoder.size());
    for (size_t i = 0; i < refined.size(); ++i) {
        CHECK(refined[i].category == decoder[i].category);
        CHECK(refined[i].views == decoder[i].views);
        CHECK(refined[i].mean_iou >= 0.0);
        CHECK(refined[i].mean_iou <= 1.0);
    }
    int overall = 0;
    for (const auto& row : refined) overall += row.category == "__overall__" ? 1 : 0;
    CHECK(overall == 3);  // one per view count

    CHECK(run_cli(base + (local / "c.csv") + " --views 9") == 2);   // more views than exist
    CHECK(run_cli("eval --checkpoint " + (local / "missing.ckpt") + " --data " + (tmp / "ds") +
                  " --out " + (local / "d.csv")) == 1);
}

TEST_CASE("reconstruct: permutation-stable bytes, single image, round trip") {
    const TempDir& tmp = workspace();
    TempDir local("rec");
    const std::string ds = tmp / "ds";
    std::string v0, v1, v2;
    for (const auto& e : fs::recursive_directory_iterator(ds)) {
        if (e.path().filename() == "view_0.png" && v0.empty()) {
            v0 = e.path().string();
            v1 = (e.path().parent_path() / "view_1.png").string();
            v2 = (e.path().parent_path() / "view_2.png").string();
        }
    }
    REQUIRE_FALSE(v0.empty());

    const std::string ckpt = "reconstruct --checkpoint " + (tmp / "m.ckpt");
    CHECK(run_cli(ckpt + " --images " + v0 + "," + v1 + "," + v2 + " --out " + (local / "a.binvox") +
                  " --probs " + (local / "a.f32")) == 0);
    CHECK(run_cli(ckpt + " --images " + v2 + "," + v0 + "," + v1 + " --out " +
                  (local / "b.binvox")) == 0);
    CHECK(read_file(local.path / "a.binvox") == read_file(local.path / "b.binvox"));

    VoxelGrid grid = read_binvox(local.path / "a.binvox");
    CHECK(grid.dim == 16);
    for (float v : grid.values) CHECK((v == 0.0f || v == 1.0f));
    CHECK(fs::file_size(local.path / "a.f32") == 16 * 16 * 16 * 4);

    CHECK(run_cli(ckpt + " --images " + v0 + " --out " + (local / "single.binvox")) == 0);

    // an image of the wrong extent is refused with the usage exit code
    Image small(16, 16);
    write_png(small, local.path / "small.png");
    CHECK(run_cli(ckpt + " --images " + (local / "small.png") + " --out " +
                  (local / "x.binvox")) == 2);
}

TEST_CASE("report: well-formed SVGs with one polyline per category plus overall") {
    const TempDir& tmp = workspace();
    TempDir local("rep");
    REQUIRE(run_cli("eval --checkpoint " + (tmp / "m.ckpt") + " --data " + (tmp / "ds") +
                    " --split train --views 1,2 --out " + (local / "eval.csv") +
                    " --compare-refiner") == 0);
    CHECK(run_cli("report --metrics " + (tmp / "metrics.csv") + " --eval " +
                  (local / "eval.csv") + " --eval-decoder " + (local / "eval.csv.decoder.csv") +
                  " --out " + (local / "charts")) == 0);

    for (const char* name : {"loss_curves.svg", "iou_vs_views.svg", "refiner_gap.svg"}) {
        const std::string svg = read_file(local.path / "charts" / name);
        CHECK(svg.rfind("<?xml", 0) == 0);
        CHECK(svg.find("</svg>") != std::string::npos);
        // crude well-formedness: every opened tag closes or self-closes
        size_t opens = 0, closes = 0, selfs = 0;
        for (size_t i = 0; i + 1 < svg.size(); ++i) {
            if (svg[i] == '<' && svg[i + 1] != '/' && svg[i + 1] != '?') ++opens;
            if (svg[i] == '<' && svg[i + 1] == '/') ++closes;
            if (svg[i] == '/' && svg[i + 1] == '>') ++selfs;
        }
        CHECK(opens == closes + selfs);
    }

    const std::string iou_svg = read_file(local.path / "charts" / "iou_vs_views.svg");
    size_t polylines = 0;
    for (size_t pos = iou_svg.find("<polyline"); pos != std::string::npos;
         pos = iou_svg.find("<polyline", pos + 1))
        ++polylines;
    auto rows = read_iou_csv(local.path / "eval.csv");
    size_t categories = 0;
    for (const auto& row : rows) categories += row.views == rows[0].views ? 1 : 0;
    CHECK(polylines == categories);  // per category + __overall__

    // header-only eval csv: usage error, no partial chart files
    write_file_atomic(local.path / "empty.csv", "category,views,threshold,mean_iou\n");
    CHECK(run_cli("report --eval " + (local / "empty.csv") + " --out " + (local / "empty")) == 2);
    if (fs::exists(local.path / "empty")) {
        size_t files = 0;
        for (const auto& e : fs::directory_iterator(local.path / "empty")) (void)e, ++files;
        CHECK(files == 0);
    }

    write_file_atomic(local.path / "garbled.csv",
                      "category,views,threshold,mean_iou\nbox,NOTANUMBER,0.25,0.5\n");
    CHECK(run_cli("report --eval " + (local / "garbled.csv") + " --out " + (local / "g")) == 2);
}

TEST_CASE("help text lists flags for every command") {
    for (const char* sub : {"gen-data", "train", "eval", "reconstruct", "report"}) {
        const std::string cmd = cli_path() + " " + sub + " --help > /tmp/refine3d_help.txt 2>&1";
        REQUIRE(std::system(cmd.c_str()) == 0);
        const std::string help = read_file("/tmp/refine3d_help.txt");
        CHECK(help.find("--help") != std::string::npos);
        CHECK(help.find("--out") != std::string::npos);
    }
}
