#include "refine3d/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>

#include "refine3d/errors.hpp"
#include "refine3d/ops.hpp"

namespace refine3d {

double lr_at(const LrSchedule& schedule, int64_t epoch) {
    if (epoch < 0) throw DimensionError("lr_at: negative epoch");
    return epoch < schedule.boundary_epoch ? schedule.base
                                           : schedule.base / schedule.decay_factor;
}

double lr_at(int64_t epoch) { return lr_at(LrSchedule{}, epoch); }

AdamState::AdamState(const Registry& params, Partition partition) : partition_(partition) {
    for (const auto& e : params.entries()) {
        if (e.partition != partition || !e.trainable) continue;
        Moments m;
        m.param_name = e.name;
        m.m.assign(static_cast<size_t>(e.tensor.numel()), 0.0f);
        m.v.assign(static_cast<size_t>(e.tensor.numel()), 0.0f);
        moments_.push_back(std::move(m));
    }
}

void AdamState::step(Registry& params, double lr, double grad_scale) {
    ++tau_;
    const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(tau_));
    const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(tau_));
    for (Moments& mom : moments_) {
        Tensor& t = params.get(mom.param_name);
        if (!t.requires_grad())
            throw StateError("adam: parameter " + mom.param_name + " has no gradient buffer");
        auto& theta = t.data();
        const auto& grad = t.grad();
        for (size_t i = 0; i < theta.size(); ++i) {
            const float g = grad[i] * static_cast<float>(grad_scale);
            mom.m[i] = static_cast<float>(kBeta1) * mom.m[i] +
                       static_cast<float>(1.0 - kBeta1) * g;
            mom.v[i] = static_cast<float>(kBeta2) * mom.v[i] +
                       static_cast<float>(1.0 - kBeta2) * g * g;
            const double mhat = static_cast<double>(mom.m[i]) / bc1;
            const double vhat = static_cast<double>(mom.v[i]) / bc2;
            theta[i] -= static_cast<float>(lr * mhat / (std::sqrt(vhat) + kEps));
        }
    }
}

std::vector<size_t> eval_view_subset(uint64_t sample_seed, size_t available, int64_t count) {
    if (count < 1 || static_cast<size_t>(count) > available)
        throw DimensionError("eval_view_subset: requested " + std::to_string(count) +
                             " views of " + std::to_string(available));
    std::vector<size_t> order(available);
    for (size_t i = 0; i < available; ++i) order[i] = i;
    Rng rng = substream(sample_seed, 0x6576616cULL, static_cast<uint64_t>(count));
    for (size_t i = available - 1; i > 0; --i)
        std::swap(order[i], order[rng.next_below(i + 1)]);
    order.resize(static_cast<size_t>(count));
    return order;
}

EvalScores evaluate_split(Model& model, const Dataset& data, Split split, int64_t views,
                          float threshold) {
    EvalScores scores;
    for (size_t idx : data.split_indices(split)) {
        const Sample& sample = data.samples[idx];
        std::vector<Tensor> chosen;
        for (size_t vi : eval_view_subset(sample.seed, sample.views.size(), views))
            chosen.push_back(sample.views[vi]);
        auto [dec, ref] = model.forward(chosen, false);
        scores.refined.emplace_back(sample.category,
                                    iou(to_voxel_grid(ref), sample.gt, threshold));
        scores.decoder.emplace_back(sample.category,
                                    iou(to_voxel_grid(dec), sample.gt, threshold));
    }
    return scores;
}

JtsoTrainer::JtsoTrainer(Model& model, const Dataset& data, TrainOptions opts)
    : model_(model),
      data_(data),
      opts_(opts),
      adam_base_(model.params(), Partition::theta_base),
      adam_att_(model.params(), Partition::phi_att),
      adam_ref_(model.params(), Partition::phi_ref) {
    if (data_.train_indices.empty()) throw StateError("trainer: dataset has no training samples");
}

int64_t JtsoTrainer::steps_per_epoch() const {
    const int64_t n = static_cast<int64_t>(data_.train_indices.size());
    return std::max<int64_t>(1, (n + opts_.batch_size - 1) / opts_.batch_size);
}

double JtsoTrainer::current_lr() const {
    return lr_at(opts_.lr, state_.global_step / steps_per_epoch());
}

JtsoTrainer::Batch JtsoTrainer::draw_batch_single(uint64_t tag, const std::vector<size_t>& pool) {
    Batch batch;
    Rng rng = substream(opts_.seed, tag, static_cast<uint64_t>(state_.global_step));
    for (int64_t b = 0; b < opts_.batch_size; ++b) {
        const size_t idx = pool[rng.next_below(pool.size())];
        const Sample& s = data_.samples[idx];
        batch.samples.push_back(idx);
        batch.view_indices.push_back({static_cast<size_t>(rng.next_below(s.views.size()))});
    }
    return batch;
}

JtsoTrainer::Batch JtsoTrainer::draw_batch_multi(uint64_t tag, const std::vector<size_t>& pool) {
    Batch batch;
    Rng rng = substream(opts_.seed, tag, static_cast<uint64_t>(state_.global_step));
    const int64_t span = std::max<int64_t>(1, opts_.views_max - 1);
    const int64_t n_views = 2 + static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(span)));
    int64_t attempts = 0;
    while (static_cast<int64_t>(batch.samples.size()) < opts_.batch_size &&
           attempts < opts_.batch_size * 8) {
        ++attempts;
        const size_t idx = pool[rng.next_below(pool.size())];
        const Sample& s = data_.samples[idx];
        if (s.views.size() < 2) {
            std::cerr << "warning: sample " << s.category << "/" << s.id
                      << " has fewer than 2 views; skipped\n";
            continue;
        }
        const int64_t use = std::min<int64_t>(n_views, static_cast<int64_t>(s.views.size()));
        // seeded draw of `use` distinct views
        std::vector<size_t> order(s.views.size());
        for (size_t i = 0; i < order.size(); ++i) order[i] = i;
        for (size_t i = order.size() - 1; i > 0; --i)
            std::swap(order[i], order[rng.next_below(i + 1)]);
        order.resize(static_cast<size_t>(use));
        batch.samples.push_back(idx);
        batch.view_indices.push_back(std::move(order));
    }
    if (batch.samples.empty())
        throw StateError("trainer: no sample with >= 2 views available for a multi-view batch");
    return batch;
}

LossTriple JtsoTrainer::run_batch(const Batch& batch,
                                  const std::vector<Partition>& update_partitions) {
    model_.params().zero_grads();
    const double lr = current_lr();

    Graph graph;
    Tensor l_p_sum, l_r_sum;
    for (size_t b = 0; b < batch.samples.size(); ++b) {
        const Sample& sample = data_.samples[batch.samples[b]];
        std::vector<Tensor> views;
        for (size_t vi : batch.view_indices[b]) views.push_back(sample.views[vi]);
        auto [dec, ref] = model_.forward(views, true);
        Tensor gt = voxel_tensor<float>(sample.gt);
        Tensor lp = voxel_cross_entropy(dec, gt);
        Tensor lr_term = voxel_cross_entropy(ref, gt);
        l_p_sum = b == 0 ? lp : add(l_p_sum, lp);
        l_r_sum = b == 0 ? lr_term : add(l_r_sum, lr_term);
    }
    const float inv_b = 1.0f / static_cast<float>(batch.samples.size());
    Tensor l_p = scalar_mul(l_p_sum, inv_b);
    Tensor l_r = scalar_mul(l_r_sum, inv_b);
    Tensor l_m = scalar_mul(add(l_p, l_r), 0.5f);
    graph.backward(l_m);

    LossTriple loss = LossTriple::of(l_p.item(), l_r.item());
    if (!std::isfinite(loss.l_m)) throw NumericError("trainer: non-finite loss");

    // frozen partitions simply skip their update; d l_m / d phi_ref is half
    // of d l_r / d phi_ref because l_p never reaches the refiner
    for (Partition p : update_partitions) {
        switch (p) {
            case Partition::theta_base: adam_base_.step(model_.params(), lr); break;
            case Partition::phi_att: adam_att_.step(model_.params(), lr); break;
            case Partition::phi_ref: adam_ref_.step(model_.params(), lr, 2.0); break;
            case Partition::optimizer: throw StateError("trainer: cannot update optimizer tag");
        }
    }
    ++state_.global_step;
    return loss;
}

LossTriple JtsoTrainer::phase1_step() {
    Batch batch = draw_batch_single(0x7031ULL, data_.train_indices);
    return run_batch(batch, {Partition::theta_base, Partition::phi_ref});
}

LossTriple JtsoTrainer::phase2_step() {
    Batch batch = draw_batch_multi(0x7032ULL, data_.train_indices);
    return run_batch(batch, {Partition::phi_att, Partition::phi_ref});
}

const std::vector<size_t>& JtsoTrainer::train_pool_for_category(
    const std::string& category) const {
    auto it = data_.train_by_category.find(category);
    if (it == data_.train_by_category.end() || it->second.empty())
        throw StateError("trainer: no training samples in category " + category);
    return it->second;
}

LossTriple JtsoTrainer::phase3_substep_a() {
    // category is drawn per A/B pair, before the A step
    Rng rng = substream(opts_.seed, 0x703363ULL, static_cast<uint64_t>(state_.global_step));
    std::vector<std::string> categories;
    for (const auto& [category, pool] : data_.train_by_category) categories.push_back(category);
    phase3_category_ = categories[rng.next_below(categories.size())];
    Batch batch = draw_batch_single(0x703361ULL, train_pool_for_category(phase3_category_));
    return run_batch(batch, {Partition::theta_base, Partition::phi_ref});
}

LossTriple JtsoTrainer::phase3_substep_b() {
    const auto& pool = train_pool_for_category(phase3_category_);
    bool any_multi = false;
    for (size_t idx : pool) any_multi = any_multi || data_.samples[idx].views.size() >= 2;
    if (!any_multi) {
        std::cerr << "warning: category " << phase3_category_
                  << " has no multi-view sample; B-step skipped\n";
        return {};
    }
    Batch batch = draw_batch_multi(0x703362ULL, pool);
    return run_batch(batch, {Partition::phi_att, Partition::phi_ref});
}

double JtsoTrainer::validation_lm(int phase) {
    const std::vector<size_t>& pool =
        data_.val_indices.empty() ? data_.train_indices : data_.val_indices;
    double total = 0.0;
    for (size_t idx : pool) {
        const Sample& sample = data_.samples[idx];
        const int64_t n_views =
            phase == 1 ? 1
                       : std::min<int64_t>(opts_.views_max,
                                           static_cast<int64_t>(sample.views.size()));
        std::vector<Tensor> views;
        for (size_t vi : eval_view_subset(sample.seed, sample.views.size(), n_views))
            views.push_back(sample.views[vi]);
        auto [dec, ref] = model_.forward(views, false);
        Tensor gt = voxel_tensor<float>(sample.gt);
        const double lp = voxel_cross_entropy(dec, gt).item();
        const double lr = voxel_cross_entropy(ref, gt).item();
        total += (lp + lr) / 2.0;
    }
    return total / static_cast<double>(pool.size());
}

double JtsoTrainer::validation_iou(int phase) {
    const bool has_val = !data_.val_indices.empty();
    const Split split = has_val ? Split::val : Split::train;
    const int64_t views = phase == 1 ? 1 : opts_.views_max;
    double total = 0.0;
    int64_t count = 0;
    for (size_t idx : data_.split_indices(split)) {
        const Sample& sample = data_.samples[idx];
        const int64_t use = std::min<int64_t>(views, static_cast<int64_t>(sample.views.size()));
        std::vector<Tensor> chosen;
        for (size_t vi : eval_view_subset(sample.seed, sample.views.size(), use))
            chosen.push_back(sample.views[vi]);
        auto [dec, ref] = model_.forward(chosen, false);
        total += iou(to_voxel_grid(ref), sample.gt, opts_.threshold);
        ++count;
    }
    return count ? total / static_cast<double>(count) : 0.0;
}

void JtsoTrainer::append_metrics_row(int phase, const LossTriple& loss, double val_iou,
                                     double lr) {
    metrics_ += std::to_string(state_.global_step);
    metrics_ += ',' + std::to_string(phase);
    metrics_ += ',' + format_double(loss.l_p);
    metrics_ += ',' + format_double(loss.l_r);
    metrics_ += ',' + format_double(loss.l_m);
    metrics_ += ',' + format_double(val_iou);
    metrics_ += ',' + format_double(lr);
    metrics_ += '\n';
}

void JtsoTrainer::run_phase(int phase, bool force_order) {
    if (phase < 1 || phase > 3) throw StateError("trainer: phase must be 1, 2 or 3");
    if (!force_order && state_.phases_completed < phase - 1)
        throw StateError("trainer: phase " + std::to_string(phase) +
                         " requires phase " + std::to_string(phase - 1) +
                         " to complete first");

    state_.best_val = std::numeric_limits<double>::infinity();
    state_.patience_counter = 0;
    last_val_iou_ = validation_iou(phase);

    const int64_t budget = opts_.phase_steps[phase - 1];
    bool b_turn = false;  // phase 3 alternates A,B,A,B,...
    for (int64_t step = 0; step < budget; ++step) {
        LossTriple loss;
        switch (phase) {
            case 1: loss = phase1_step(); break;
            case 2: loss = phase2_step(); break;
            default:
                loss = b_turn ? phase3_substep_b() : phase3_substep_a();
                b_turn = !b_turn;
                break;
        }
        append_metrics_row(phase, loss, last_val_iou_, current_lr());

        if ((step + 1) % opts_.eval_every == 0) {
            const double val = validation_lm(phase);
            last_val_iou_ = validation_iou(phase);
            if (val < state_.best_val - opts_.improve_tol) {
                state_.best_val = val;
                state_.patience_counter = 0;
            } else {
                ++state_.patience_counter;
                if (state_.patience_counter >= opts_.patience) break;
            }
        }
    }
    state_.phases_completed = std::max(state_.phases_completed, phase);
}

void JtsoTrainer::save(const std::filesystem::path& path) const {
    save_checkpoint(path, model_, adam_base_, adam_att_, adam_ref_, state_, opts_.seed);
}

void JtsoTrainer::restore(const std::filesystem::path& path) {
    CheckpointInfo info = load_checkpoint(path, model_, &adam_base_, &adam_att_, &adam_ref_);
    state_ = info.state;
}

}  // namespace refine3d
