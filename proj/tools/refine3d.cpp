// refine3d: multi-view voxel reconstruction pipeline driver.
// Subcommands: gen-data, train, eval, reconstruct, report.
// Exit codes: 0 ok, 1 I/O failure, 2 usage/malformed input, 3 state, 4 numeric.

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <iostream>
#include <sstream>

#include "refine3d/binvox.hpp"
#include "refine3d/dataset.hpp"
#include "refine3d/fsio.hpp"
#include "refine3d/metrics.hpp"
#include "refine3d/model.hpp"
#include "refine3d/png_io.hpp"
#include "refine3d/svg_report.hpp"
#include "refine3d/synthdata.hpp"
#include "refine3d/trainer.hpp"

namespace fs = std::filesystem;
using namespace refine3d;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitIo = 1;
constexpr int kExitUsage = 2;
constexpr int kExitState = 3;
constexpr int kExitNumeric = 4;

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::vector<int64_t> parse_int_list(const std::string& text) {
    std::vector<int64_t> out;
    std::istringstream in(text);
    std::string part;
    while (std::getline(in, part, ',')) {
        try {
            size_t used = 0;
            const int64_t v = std::stoll(part, &used);
            if (used != part.size() || v < 1) throw std::invalid_argument(part);
            out.push_back(v);
        } catch (const std::exception&) {
            throw UsageError("unparseable view count '" + part + "' in '" + text + "'");
        }
    }
    if (out.empty()) throw UsageError("empty view-count list");
    return out;
}

struct RunConfig {
    std::string preset = "desk";
    TrainOptions train;
};

// Strict JSON config: every key must be known; flags override file values.
RunConfig load_run_config(const fs::path& path) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("config " + path.string() + ": " + e.what());
    }
    RunConfig cfg;
    for (const auto& [key, value] : doc.items()) {
        try {
            if (key == "preset")
                cfg.preset = value.get<std::string>();
            else if (key == "seed")
                cfg.train.seed = value.get<uint64_t>();
            else if (key == "batch_size")
                cfg.train.batch_size = value.get<int64_t>();
            else if (key == "views_max")
                cfg.train.views_max = value.get<int64_t>();
            else if (key == "threshold")
                cfg.train.threshold = value.get<float>();
            else if (key == "eval_every")
                cfg.train.eval_every = value.get<int64_t>();
            else if (key == "patience")
                cfg.train.patience = value.get<int64_t>();
            else if (key == "improve_tol")
                cfg.train.improve_tol = value.get<double>();
            else if (key == "phase1_steps")
                cfg.train.phase_steps[0] = value.get<int64_t>();
            else if (key == "phase2_steps")
                cfg.train.phase_steps[1] = value.get<int64_t>();
            else if (key == "phase3_steps")
                cfg.train.phase_steps[2] = value.get<int64_t>();
            else if (key == "lr_base")
                cfg.train.lr.base = value.get<double>();
            else if (key == "lr_decay_factor")
                cfg.train.lr.decay_factor = value.get<double>();
            else if (key == "lr_boundary_epoch")
                cfg.train.lr.boundary_epoch = value.get<int64_t>();
            else
                throw FormatError("config " + path.string() + ": unknown key '" + key + "'");
        } catch (const nlohmann::json::exception& e) {
            throw FormatError("config " + path.string() + ": key '" + key + "': " + e.what());
        }
    }
    return cfg;
}

Model load_model_for(const fs::path& checkpoint, AdamState* base = nullptr,
                     AdamState* att = nullptr, AdamState* ref = nullptr,
                     CheckpointInfo* info_out = nullptr) {
    const std::string preset = checkpoint_preset(checkpoint);
    Model model(ModelConfig::preset(preset), 0);
    CheckpointInfo info = load_checkpoint(checkpoint, model, base, att, ref);
    if (info_out) *info_out = info;
    return model;
}

struct MetricsRow {
    int64_t step = 0;
    int phase = 0;
    double l_p = 0, l_r = 0, l_m = 0, val_iou = 0, lr = 0;
};

std::vector<MetricsRow> parse_metrics_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line != "step,phase,l_p,l_r,l_m,val_iou,lr")
        throw FormatError("metrics csv: bad or missing header row");
    std::vector<MetricsRow> rows;
    int lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string field;
        std::vector<std::string> fields;
        while (std::getline(ls, field, ',')) fields.push_back(field);
        if (fields.size() != 7)
            throw FormatError("metrics csv: expected 7 fields on row " + std::to_string(lineno));
        try {
            MetricsRow row;
            row.step = std::stoll(fields[0]);
            row.phase = std::stoi(fields[1]);
            row.l_p = std::stod(fields[2]);
            row.l_r = std::stod(fields[3]);
            row.l_m = std::stod(fields[4]);
            row.val_iou = std::stod(fields[5]);
            row.lr = std::stod(fields[6]);
            rows.push_back(row);
        } catch (const std::exception&) {
            throw FormatError("metrics csv: unparseable number on row " + std::to_string(lineno));
        }
    }
    return rows;
}

int cmd_gen_data(const fs::path& out, int64_t num, int64_t views, int64_t dim, int64_t img,
                 uint64_t seed) {
    DatasetParams params{num, views, dim, img, seed};
    DatasetManifest manifest = gen_dataset(params, out);
    int64_t train = 0, val = 0, test = 0;
    for (const auto& s : manifest.samples)
        (s.split == "train" ? train : s.split == "val" ? val : test) += 1;
    std::cout << "wrote " << manifest.samples.size() << " samples (" << train << " train, " << val
              << " val, " << test << " test), " << views << " views each, " << dim
              << "^3 voxels, " << img << "x" << img << " px -> " << out.string() << "\n";
    return kExitOk;
}

int cmd_train(const RunConfig& cfg, const fs::path& data_dir, const std::string& phase,
              const fs::path& out, const fs::path& metrics_path, const fs::path& resume,
              bool force_phase) {
    Dataset data = load_dataset(data_dir);
    Model model(ModelConfig::preset(cfg.preset), cfg.train.seed);
    JtsoTrainer trainer(model, data, cfg.train);
    if (!resume.empty()) trainer.restore(resume);

    std::vector<int> phases;
    if (phase == "all")
        phases = {1, 2, 3};
    else if (phase == "1" || phase == "2" || phase == "3")
        phases = {phase[0] - '0'};
    else
        throw UsageError("--phase must be 1, 2, 3 or all");

    for (int p : phases) {
        std::cout << "phase " << p << ": up to " << cfg.train.phase_steps[p - 1]
                  << " steps (batch " << cfg.train.batch_size << ")\n";
        trainer.run_phase(p, force_phase);
        if (phases.size() > 1) {
            fs::path boundary = out;
            boundary += ".phase" + std::to_string(p);
            trainer.save(boundary);
        }
        std::cout << "phase " << p << " done at step " << trainer.state().global_step << "\n";
    }
    trainer.save(out);
    if (!metrics_path.empty()) write_file_atomic(metrics_path, trainer.metrics_csv());
    std::cout << "checkpoint -> " << out.string() << "\n";
    return kExitOk;
}

int cmd_eval(const fs::path& checkpoint, const fs::path& data_dir, const std::string& views,
             const fs::path& out, bool compare_refiner, fs::path out_decoder,
             const std::string& split_name, float threshold) {
    Model model = load_model_for(checkpoint);
    Dataset data = load_dataset(data_dir);
    const std::vector<int64_t> view_counts = parse_int_list(views);
    Split split = split_name == "train"  ? Split::train
                  : split_name == "val" ? Split::val
                                        : Split::test;
    if (data.split_indices(split).empty())
        throw UsageError("split '" + split_name + "' has no samples in " + data_dir.string());

    std::vector<IouRow> refined_rows, decoder_rows;
    for (int64_t v : view_counts) {
        EvalScores scores = evaluate_split(model, data, split, v, threshold);
        IouReport refined = aggregate(scores.refined, static_cast<int>(v), threshold);
        IouReport decoder = aggregate(scores.decoder, static_cast<int>(v), threshold);
        for (const IouRow& row : report_rows(refined)) refined_rows.push_back(row);
        for (const IouRow& row : report_rows(decoder)) decoder_rows.push_back(row);
    }

    // table to stdout: rows = categories + overall, columns = view counts
    std::cout << "mean IoU (refined) @ threshold " << threshold << ", split " << split_name
              << "\n";
    std::vector<std::string> categories;
    for (const auto& row : refined_rows)
        if (row.views == view_counts[0]) categories.push_back(row.category);
    std::cout << "category";
    for (int64_t v : view_counts) std::cout << "\t" << v << "v";
    std::cout << "\n";
    for (const std::string& category : categories) {
        std::cout << category;
        for (int64_t v : view_counts)
            for (const auto& row : refined_rows)
                if (row.category == category && row.views == v)
                    std::cout << "\t" << format_double(row.mean_iou);
        std::cout << "\n";
    }

    write_iou_csv(out, refined_rows);
    std::cout << "eval table -> " << out.string() << "\n";
    if (compare_refiner) {
        if (out_decoder.empty()) {
            out_decoder = out;
            out_decoder += ".decoder.csv";
        }
        write_iou_csv(out_decoder, decoder_rows);
        std::cout << "decoder table -> " << out_decoder.string() << "\n";
    }
    return kExitOk;
}

int cmd_reconstruct(const fs::path& checkpoint, std::vector<std::string> images,
                    const fs::path& out, const fs::path& probs, float threshold) {
    Model model = load_model_for(checkpoint);
    const int64_t want = model.config().input_size;

    // a view set is unordered; canonical order makes the output byte-stable
    std::sort(images.begin(), images.end());
    std::vector<Tensor> views;
    for (const std::string& path : images) {
        Image img = read_png(path);
        if (img.width != want || img.height != want)
            throw UsageError("image " + path + " is " + std::to_string(img.width) + "x" +
                             std::to_string(img.height) + ", expected " + std::to_string(want) +
                             "x" + std::to_string(want));
        views.push_back(image_to_tensor<float>(img));
    }
    auto [dec, ref] = model.forward(views, false);
    VoxelGrid grid = to_voxel_grid(ref);
    VoxelGrid solid = binarize(grid, threshold);
    write_binvox(solid, out);
    std::cout << "voxels -> " << out.string() << " (" << solid.occupied_count()
              << " occupied of " << grid.size() << ")\n";
    if (!probs.empty()) {
        std::string raw(grid.values.size() * sizeof(float), '\0');
        std::memcpy(raw.data(), grid.values.data(), raw.size());
        write_file_atomic(probs, raw);
        std::cout << "probabilities -> " << probs.string() << "\n";
    }
    return kExitOk;
}

int cmd_report(const fs::path& metrics_path, const fs::path& eval_path,
               const fs::path& eval_decoder_path, const fs::path& out_dir) {
    std::vector<MetricsRow> metrics;
    if (!metrics_path.empty()) metrics = parse_metrics_csv(read_file(metrics_path));
    std::vector<IouRow> eval_rows = read_iou_csv(eval_path);
    if (eval_rows.empty()) throw FormatError("eval csv " + eval_path.string() + " has no rows");
    std::vector<IouRow> decoder_rows;
    if (!eval_decoder_path.empty()) decoder_rows = read_iou_csv(eval_decoder_path);

    fs::create_directories(out_dir);

    if (!metrics.empty()) {
        LineChart losses;
        losses.title = "Training loss";
        losses.x_label = "step";
        losses.y_label = "voxel cross-entropy";
        ChartSeries lp{"l_p", {}}, lr{"l_r", {}}, lm{"l_m", {}};
        for (const auto& row : metrics) {
            lp.points.emplace_back(static_cast<double>(row.step), row.l_p);
            lr.points.emplace_back(static_cast<double>(row.step), row.l_r);
            lm.points.emplace_back(static_cast<double>(row.step), row.l_m);
        }
        losses.series = {lp, lr, lm};
        write_svg(out_dir / "loss_curves.svg", losses);
    }

    auto series_by_category = [](const std::vector<IouRow>& rows) {
        std::vector<ChartSeries> series;
        for (const auto& row : rows) {
            auto it = std::find_if(series.begin(), series.end(),
                                   [&](const ChartSeries& s) { return s.label == row.category; });
            if (it == series.end()) {
                series.push_back({row.category, {}});
                it = series.end() - 1;
            }
            it->points.emplace_back(static_cast<double>(row.views), row.mean_iou);
        }
        for (auto& s : series) std::sort(s.points.begin(), s.points.end());
        return series;
    };

    LineChart iou_chart;
    iou_chart.title = "Mean IoU vs number of views";
    iou_chart.x_label = "views";
    iou_chart.y_label = "mean IoU";
    iou_chart.series = series_by_category(eval_rows);
    write_svg(out_dir / "iou_vs_views.svg", iou_chart);

    if (!decoder_rows.empty()) {
        LineChart gap_chart;
        gap_chart.title = "Refined minus decoder IoU vs number of views";
        gap_chart.x_label = "views";
        gap_chart.y_label = "IoU gap";
        auto refined = series_by_category(eval_rows);
        auto decoder = series_by_category(decoder_rows);
        for (const auto& rs : refined) {
            auto it = std::find_if(decoder.begin(), decoder.end(),
                                   [&](const ChartSeries& s) { return s.label == rs.label; });
            if (it == decoder.end() || it->points.size() != rs.points.size()) continue;
            ChartSeries gap{rs.label, {}};
            for (size_t i = 0; i < rs.points.size(); ++i)
                gap.points.emplace_back(rs.points[i].first,
                                        rs.points[i].second - it->points[i].second);
            gap_chart.series.push_back(std::move(gap));
        }
        write_svg(out_dir / "refiner_gap.svg", gap_chart);
    }
    std::cout << "charts -> " << out_dir.string() << "\n";
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"refine3d: multi-view 3D voxel reconstruction (synthetic desk-scale pipeline).\n"
                 "Set REFINE3D_THREADS to cap worker threads (0 = auto)."};
    app.require_subcommand(1);

    auto* gen = app.add_subcommand("gen-data", "Generate a synthetic multi-view dataset");
    fs::path gen_out;
    int64_t gen_num = 8, gen_views = 4, gen_dim = 16, gen_img = 32;
    uint64_t gen_seed = 0;
    gen->add_option("--out", gen_out, "output dataset directory")->required();
    gen->add_option("--num", gen_num, "number of samples")->capture_default_str();
    gen->add_option("--views", gen_views, "views per sample")->capture_default_str();
    gen->add_option("--dim", gen_dim, "voxel grid extent")->capture_default_str();
    gen->add_option("--img", gen_img, "image extent in pixels")->capture_default_str();
    gen->add_option("--seed", gen_seed, "generation seed")->capture_default_str();

    auto* train = app.add_subcommand("train", "Run JTSO training phases");
    fs::path train_config, train_data, train_out, train_metrics, train_resume;
    std::string train_phase = "all";
    std::string train_preset = "desk";
    uint64_t train_seed = 0;
    int64_t train_batch = 4, train_views_max = 4, train_eval_every = 50, train_patience = 10;
    int64_t steps1 = 400, steps2 = 200, steps3 = 200;
    bool force_phase = false;
    train->add_option("--config", train_config, "JSON run configuration (flags override)");
    train->add_option("--data", train_data, "dataset directory")->required();
    train->add_option("--phase", train_phase, "1|2|3|all")->capture_default_str();
    train->add_option("--out", train_out, "checkpoint output path")->required();
    train->add_option("--metrics", train_metrics, "metrics CSV output path");
    train->add_option("--resume", train_resume, "checkpoint to resume from");
    train->add_option("--preset", train_preset, "model preset: paper|desk")->capture_default_str();
    train->add_option("--seed", train_seed, "training seed")->capture_default_str();
    train->add_option("--batch", train_batch, "batch size")->capture_default_str();
    train->add_option("--views-max", train_views_max, "max views per multi-view batch")
        ->capture_default_str();
    train->add_option("--steps1", steps1, "phase 1 step budget")->capture_default_str();
    train->add_option("--steps2", steps2, "phase 2 step budget")->capture_default_str();
    train->add_option("--steps3", steps3, "phase 3 step budget")->capture_default_str();
    train->add_option("--eval-every", train_eval_every, "steps between validation checks")
        ->capture_default_str();
    train->add_option("--patience", train_patience, "stale validations before early stop")
        ->capture_default_str();
    train->add_flag("--force-phase", force_phase, "skip the phase-order check");

    auto* eval = app.add_subcommand("eval", "Evaluate IoU against ground truth");
    fs::path eval_ckpt, eval_data, eval_out, eval_out_decoder;
    std::string eval_views = "1,2,3,4", eval_split = "test";
    bool compare_refiner = false;
    float eval_threshold = kVoxelThreshold;
    eval->add_option("--checkpoint", eval_ckpt, "trained checkpoint")->required();
    eval->add_option("--data", eval_data, "dataset directory")->required();
    eval->add_option("--views", eval_views, "comma-separated view counts")->capture_default_str();
    eval->add_option("--out", eval_out, "IoU CSV output path")->required();
    eval->add_flag("--compare-refiner", compare_refiner,
                   "also write the decoder-output IoU table");
    eval->add_option("--out-decoder", eval_out_decoder,
                     "decoder table path (default: <out>.decoder.csv)");
    eval->add_option("--split", eval_split, "train|val|test")->capture_default_str();
    eval->add_option("--threshold", eval_threshold, "binarization threshold")
        ->capture_default_str();

    auto* rec = app.add_subcommand("reconstruct", "Reconstruct voxels from images");
    fs::path rec_ckpt, rec_out, rec_probs;
    std::vector<std::string> rec_images;
    float rec_threshold = kVoxelThreshold;
    rec->add_option("--checkpoint", rec_ckpt, "trained checkpoint")->required();
    rec->add_option("--images", rec_images, "input PNG paths (comma separated or repeated)")
        ->required()
        ->delimiter(',');
    rec->add_option("--out", rec_out, "output binvox path")->required();
    rec->add_option("--probs", rec_probs, "optional raw float32 probability dump");
    rec->add_option("--threshold", rec_threshold, "binarization threshold")
        ->capture_default_str();

    auto* rep = app.add_subcommand("report", "Render SVG charts from CSV outputs");
    fs::path rep_metrics, rep_eval, rep_eval_decoder, rep_out;
    rep->add_option("--metrics", rep_metrics, "training metrics CSV");
    rep->add_option("--eval", rep_eval, "IoU CSV from eval")->required();
    rep->add_option("--eval-decoder", rep_eval_decoder, "decoder IoU CSV from eval");
    rep->add_option("--out", rep_out, "output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    try {
        if (gen->parsed())
            return cmd_gen_data(gen_out, gen_num, gen_views, gen_dim, gen_img, gen_seed);
        if (train->parsed()) {
            RunConfig cfg;
            if (!train_config.empty()) cfg = load_run_config(train_config);
            if (train->count("--preset")) cfg.preset = train_preset;
            if (train->count("--seed")) cfg.train.seed = train_seed;
            if (train->count("--batch")) cfg.train.batch_size = train_batch;
            if (train->count("--views-max")) cfg.train.views_max = train_views_max;
            if (train->count("--steps1")) cfg.train.phase_steps[0] = steps1;
            if (train->count("--steps2")) cfg.train.phase_steps[1] = steps2;
            if (train->count("--steps3")) cfg.train.phase_steps[2] = steps3;
            if (train->count("--eval-every")) cfg.train.eval_every = train_eval_every;
            if (train->count("--patience")) cfg.train.patience = train_patience;
            return cmd_train(cfg, train_data, train_phase, train_out, train_metrics,
                             train_resume, force_phase);
        }
        if (eval->parsed())
            return cmd_eval(eval_ckpt, eval_data, eval_views, eval_out, compare_refiner,
                            eval_out_decoder, eval_split, eval_threshold);
        if (rec->parsed())
            return cmd_reconstruct(rec_ckpt, rec_images, rec_out, rec_probs, rec_threshold);
        if (rep->parsed()) return cmd_report(rep_metrics, rep_eval, rep_eval_decoder, rep_out);
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const DimensionError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const FormatError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const StateError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitState;
    } catch (const NumericError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitIo;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitIo;
    }
    return kExitOk;
}
