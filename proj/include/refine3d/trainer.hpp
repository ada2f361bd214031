#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include "refine3d/dataset.hpp"
#include "refine3d/metrics.hpp"
#include "refine3d/model.hpp"

namespace refine3d {

// Single decay by the configured factor once the boundary epoch is reached.
struct LrSchedule {
    double base = 0.001;
    double decay_factor = 2.0;
    int64_t boundary_epoch = 150;
};

double lr_at(const LrSchedule& schedule, int64_t epoch);
double lr_at(int64_t epoch);  // default schedule

// Adam moments for the trainable tensors of one partition, in registry
// order. tau counts applied steps and drives bias correction.
class AdamState {
public:
    AdamState() = default;
    AdamState(const Registry& params, Partition partition);

    // theta -= lr * mhat / (sqrt(vhat) + eps). grad_scale multiplies the
    // stored gradients before use (the refiner trains on l_r, whose gradient
    // is exactly twice the recorded l_m gradient).
    void step(Registry& params, double lr, double grad_scale = 1.0);

    Partition partition() const { return partition_; }
    int64_t tau() const { return tau_; }
    void set_tau(int64_t t) { tau_ = t; }

    struct Moments {
        std::string param_name;
        std::vector<float> m, v;
    };
    std::vector<Moments>& moments() { return moments_; }
    const std::vector<Moments>& moments() const { return moments_; }

    static constexpr double kBeta1 = 0.9;
    static constexpr double kBeta2 = 0.999;
    static constexpr double kEps = 1e-8;

private:
    Partition partition_ = Partition::theta_base;
    std::vector<Moments> moments_;
    int64_t tau_ = 0;
};

struct TrainState {
    int phases_completed = 0;  // highest fully trained phase
    int64_t global_step = 0;
    int64_t patience_counter = 0;
    double best_val = std::numeric_limits<double>::infinity();
};

struct TrainOptions {
    int64_t batch_size = 4;
    int64_t phase_steps[3] = {400, 200, 200};  // hard budgets per phase
    int64_t eval_every = 50;
    int64_t patience = 10;      // evaluations without improvement before stopping
    double improve_tol = 1e-4;  // "improvement" means best_val drops by more
    int64_t views_max = 4;
    float threshold = kVoxelThreshold;
    LrSchedule lr;
    uint64_t seed = 0;
};

// Deterministic per-(sample, view-count) subset of view indices.
std::vector<size_t> eval_view_subset(uint64_t sample_seed, size_t available, int64_t count);

struct EvalScores {
    std::vector<std::pair<std::string, double>> refined;  // (category, IoU) per sample
    std::vector<std::pair<std::string, double>> decoder;
};

// Eval-mode IoU of every sample in a split at a fixed view count.
EvalScores evaluate_split(Model& model, const Dataset& data, Split split, int64_t views,
                          float threshold);

// Three-phase training: phase 1 fits the encoder-decoder on single views,
// phase 2 fits the attention fuser on multi-view batches, phase 3 alternates
// single-view base updates with same-category multi-view attention updates.
// The refiner trains on its own output loss throughout.
class JtsoTrainer {
public:
    JtsoTrainer(Model& model, const Dataset& data, TrainOptions opts);

    // Runs one phase to convergence or budget. Appends metrics rows.
    void run_phase(int phase, bool force_order = false);

    // Single-step entry points (freeze and loss-descent tests).
    LossTriple phase1_step();
    LossTriple phase2_step();
    LossTriple phase3_substep_a();
    LossTriple phase3_substep_b();

    double validation_lm(int phase);
    double validation_iou(int phase);

    Model& model() { return model_; }
    TrainState& state() { return state_; }
    const TrainOptions& options() const { return opts_; }
    AdamState& adam_base() { return adam_base_; }
    AdamState& adam_att() { return adam_att_; }
    AdamState& adam_ref() { return adam_ref_; }

    // Accumulated metrics stream: step,phase,l_p,l_r,l_m,val_iou,lr.
    const std::string& metrics_csv() const { return metrics_; }

    // Category shared by the current phase-3 A/B sub-step pair.
    const std::string& phase3_category() const { return phase3_category_; }

    void save(const std::filesystem::path& path) const;
    void restore(const std::filesystem::path& path);

    int64_t steps_per_epoch() const;
    double current_lr() const;

private:
    struct Batch {
        std::vector<size_t> samples;
        std::vector<std::vector<size_t>> view_indices;  // per sample
    };
    Batch draw_batch_single(uint64_t tag, const std::vector<size_t>& pool);
    Batch draw_batch_multi(uint64_t tag, const std::vector<size_t>& pool);
    LossTriple run_batch(const Batch& batch, const std::vector<Partition>& update_partitions);
    void append_metrics_row(int phase, const LossTriple& loss, double val_iou, double lr);
    const std::vector<size_t>& train_pool_for_category(const std::string& category) const;

    Model& model_;
    const Dataset& data_;
    TrainOptions opts_;
    TrainState state_;
    AdamState adam_base_, adam_att_, adam_ref_;
    std::string metrics_ = "step,phase,l_p,l_r,l_m,val_iou,lr\n";
    double last_val_iou_ = 0.0;
    std::string phase3_category_;  // shared by each A/B sub-step pair
};

// Checkpoint file: magic R3DN, version u32 LE, preset name, then every
// model tensor (partition tags 0..2) and optimizer/state tensors (tag 3),
// each as name, tag u8, rank u8, dims u32 x rank, raw little-endian f32.
void save_checkpoint(const std::filesystem::path& path, const Model& model,
                     const AdamState& base, const AdamState& att, const AdamState& ref,
                     const TrainState& state, uint64_t seed);

struct CheckpointInfo {
    std::string preset;
    TrainState state;
    uint64_t seed = 0;
};

// Loads into an already-constructed model of the same preset. Optimizer
// states are filled when given. The file is parsed fully before any
// destination is touched.
CheckpointInfo load_checkpoint(const std::filesystem::path& path, Model& model,
                               AdamState* base = nullptr, AdamState* att = nullptr,
                               AdamState* ref = nullptr);

// Reads just the preset name, for constructing the right model first.
std::string checkpoint_preset(const std::filesystem::path& path);

}  // namespace refine3d
