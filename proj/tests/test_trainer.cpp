#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <unistd.h>

#include <cmath>
#include <filesystem>

#include "refine3d/fsio.hpp"
#include "refine3d/parallel.hpp"
#include "refine3d/synthdata.hpp"
#include "refine3d/trainer.hpp"

using namespace refine3d;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) {
        path = fs::temp_directory_path() /
               ("refine3d_trainer_" + tag + "_" + std::to_string(::getpid()));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

// In-memory dataset over real generated shapes and renders; no disk.
Dataset make_dataset(int64_t n_samples, int64_t n_views, uint64_t seed,
                     int64_t image_size = 32, int64_t voxel_dim = 16) {
    Dataset ds;
    ds.image_size = image_size;
    ds.voxel_dim = voxel_dim;
    for (int64_t i = 0; i < n_samples; ++i) {
        Sample s;
        s.category = kShapeCategories[static_cast<size_t>(i) % kShapeCategories.size()];
        s.id = std::to_string(i);
        s.seed = mix_seed(seed, static_cast<uint64_t>(i));
        s.split = Split::train;
        s.gt = gen_shape({s.category, s.seed}, voxel_dim);
        for (int64_t k = 0; k < n_views; ++k) {
            Camera cam = camera_for_view(s.seed, k, n_views);
            s.views.push_back(image_to_tensor<float>(render(s.gt, cam, image_size)));
        }
        ds.train_indices.push_back(ds.samples.size());
        ds.train_by_category[s.category].push_back(ds.samples.size());
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

Registry single_param_registry(float init) {
    Registry reg;
    reg.add("w", Partition::theta_base, Tensor::from_data({3}, {init, init, init}, true), true);
    return reg;
}

}  // namespace

TEST_CASE("learning-rate schedule boundary") {
    CHECK(lr_at(0) == 0.001);
    CHECK(lr_at(149) == 0.001);
    CHECK(lr_at(150) == 0.0005);
    CHECK(lr_at(1000) == 0.0005);
    CHECK_THROWS_AS(lr_at(-1), DimensionError);

    LrSchedule custom{0.01, 4.0, 10};
    CHECK(lr_at(custom, 9) == 0.01);
    CHECK(lr_at(custom, 10) == 0.0025);
}

TEST_CASE("adam first step matches the closed form") {
    Registry reg = single_param_registry(0.5f);
    Tensor& w = reg.get("w");
    std::fill(w.grad().begin(), w.grad().end(), 1.0f);

    AdamState adam(reg, Partition::theta_base);
    adam.step(reg, 0.001);
    CHECK(adam.tau() == 1);
    // mhat = 1, vhat = 1 -> delta = -lr / (1 + 1e-8)
    for (float v : w.data()) CHECK(v == doctest::Approx(0.5 - 0.001).epsilon(1e-7));
}

TEST_CASE("adam zero gradient with zero moments leaves parameters bitwise") {
    Registry reg = single_param_registry(0.25f);
    AdamState adam(reg, Partition::theta_base);
    adam.step(reg, 0.001);
    for (float v : reg.get("w").data()) CHECK(v == 0.25f);
    CHECK(adam.tau() == 1);
}

TEST_CASE("adam two steps match a hand-unrolled recurrence") {
    Registry reg = single_param_registry(1.0f);
    Tensor& w = reg.get("w");
    AdamState adam(reg, Partition::theta_base);

    const double g1[3] = {0.3, -0.7, 1.1}, g2[3] = {-0.2, 0.5, 0.9};
    for (int i = 0; i < 3; ++i) w.grad()[i] = static_cast<float>(g1[i]);
    adam.step(reg, 0.01);
    for (int i = 0; i < 3; ++i) w.grad()[i] = static_cast<float>(g2[i]);
    adam.step(reg, 0.01);

    for (int i = 0; i < 3; ++i) {
        double m = 0, v = 0, theta = 1.0;
        const double gs[2] = {g1[i], g2[i]};
        for (int t = 1; t <= 2; ++t) {
            m = 0.9 * m + 0.1 * gs[t - 1];
            v = 0.999 * v + 0.001 * gs[t - 1] * gs[t - 1];
            const double mhat = m / (1.0 - std::pow(0.9, t));
            const double vhat = v / (1.0 - std::pow(0.999, t));
            theta -= 0.01 * mhat / (std::sqrt(vhat) + 1e-8);
        }
        const double got = w.data()[i];
        CHECK(std::abs(got - theta) / std::abs(theta) <= 1e-6);
    }
}

TEST_CASE("adam with lr 0 keeps parameters bitwise while advancing state") {
    Registry reg = single_param_registry(0.75f);
    Tensor& w = reg.get("w");
    std::fill(w.grad().begin(), w.grad().end(), 0.42f);
    AdamState adam(reg, Partition::theta_base);
    adam.step(reg, 0.0);
    for (float v : w.data()) CHECK(v == 0.75f);
    CHECK(adam.tau() == 1);
    CHECK(adam.moments()[0].m[0] != 0.0f);
}

TEST_CASE("adam rejects parameters without gradient buffers") {
    Registry reg;
    reg.add("w", Partition::theta_base, Tensor::zeros({2}, false), true);
    AdamState adam(reg, Partition::theta_base);
    CHECK_THROWS_AS(adam.step(reg, 0.001), StateError);
}

TEST_CASE("eval view subsets are deterministic, distinct, bounded") {
    auto a = eval_view_subset(99, 6, 3);
    auto b = eval_view_subset(99, 6, 3);
    CHECK(a == b);
    CHECK(a.size() == 3);
    std::sort(a.begin(), a.end());
    CHECK(std::unique(a.begin(), a.end()) == a.end());
    for (size_t v : a) CHECK(v < 6);
    CHECK(eval_view_subset(99, 6, 2) != std::vector<size_t>(a.begin(), a.begin() + 2));
    CHECK_THROWS_AS(eval_view_subset(99, 4, 5), DimensionError);
}

TEST_CASE("phase freezing is bitwise") {
    Dataset data = make_dataset(8, 3, 1001);
    Model model(ModelConfig::desk(), 2002);
    TrainOptions opts;
    opts.seed = 3003;
    JtsoTrainer trainer(model, data, opts);

    const auto att_before = model.params().partition_bytes(Partition::phi_att);
    const auto base_before = model.params().partition_bytes(Partition::theta_base);
    const auto ref_before = model.params().partition_bytes(Partition::phi_ref);

    SUBCASE("phase 1 freezes the attention partition") {
        trainer.phase1_step();
        trainer.phase1_step();
        CHECK(model.params().partition_bytes(Partition::phi_att) == att_before);
        CHECK(model.params().partition_bytes(Partition::theta_base) != base_before);
        CHECK(model.params().partition_bytes(Partition::phi_ref) != ref_before);
    }

    SUBCASE("phase 2 freezes the base partition") {
        trainer.phase2_step();
        trainer.phase2_step();
        CHECK(model.params().partition_bytes(Partition::theta_base) == base_before);
        CHECK(model.params().partition_bytes(Partition::phi_att) != att_before);
        CHECK(model.params().partition_bytes(Partition::phi_ref) != ref_before);
    }

    SUBCASE("phase 3 sub-steps freeze their counterpart") {
        trainer.phase3_substep_a();
        CHECK(model.params().partition_bytes(Partition::phi_att) == att_before);
        const auto base_after_a = model.params().partition_bytes(Partition::theta_base);
        CHECK(base_after_a != base_before);

        const std::string category = trainer.phase3_category();
        trainer.phase3_substep_b();
        CHECK(trainer.phase3_category() == category);  // A/B pair shares the category
        CHECK(model.params().partition_bytes(Partition::theta_base) == base_after_a);
    }
}

TEST_CASE("loss decreases over 50 steps on a fixed batch") {
    TrainOptions opts;
    opts.seed = 11;
    opts.batch_size = 4;

    SUBCASE("phase 1, single view") {
        Dataset data = make_dataset(1, 1, 5005);
        Model model(ModelConfig::desk(), 6006);
        JtsoTrainer trainer(model, data, opts);
        const double first = trainer.phase1_step().l_m;
        double last = first;
        for (int i = 0; i < 49; ++i) last = trainer.phase1_step().l_m;
        CHECK(last < first);
    }

    SUBCASE("phase 2, multi view") {
        Dataset data = make_dataset(1, 3, 7007);
        Model model(ModelConfig::desk(), 8008);
        JtsoTrainer trainer(model, data, opts);
        const double first = trainer.phase2_step().l_m;
        double last = first;
        for (int i = 0; i < 49; ++i) last = trainer.phase2_step().l_m;
        CHECK(last < first);
    }
}

TEST_CASE("phase order is enforced unless forced") {
    Dataset data = make_dataset(4, 2, 13);
    Model model(ModelConfig::desk(), 14);
    TrainOptions opts;
    opts.seed = 15;
    opts.phase_steps[0] = 2;
    opts.phase_steps[1] = 2;
    opts.phase_steps[2] = 2;
    opts.eval_every = 100;
    JtsoTrainer trainer(model, data, opts);

    CHECK_THROWS_AS(trainer.run_phase(2), StateError);
    CHECK_THROWS_AS(trainer.run_phase(3), StateError);
    CHECK_NOTHROW(trainer.run_phase(2, true));  // explicit override

    JtsoTrainer fresh(model, data, opts);
    fresh.run_phase(1);
    CHECK(fresh.state().phases_completed == 1);
    fresh.run_phase(2);
    CHECK(fresh.state().phases_completed == 2);
    fresh.run_phase(3);
    CHECK(fresh.state().phases_completed == 3);
}

TEST_CASE("convergence monitor stops after patience evaluations without improvement") {
    Dataset data = make_dataset(4, 2, 21);
    Model model(ModelConfig::desk(), 22);
    TrainOptions opts;
    opts.seed = 23;
    opts.phase_steps[0] = 100;
    opts.eval_every = 1;
    opts.patience = 2;
    opts.improve_tol = 1e18;  // nothing ever counts as an improvement twice
    JtsoTrainer trainer(model, data, opts);
    trainer.run_phase(1);
    CHECK(trainer.state().global_step < 100);
    CHECK(trainer.state().patience_counter >= 2);
}

TEST_CASE("metrics stream is deterministic across runs and thread counts") {
    TrainOptions opts;
    opts.seed = 31;
    opts.phase_steps[0] = 6;
    opts.eval_every = 3;

    auto run_once = [&] {
        Dataset data = make_dataset(4, 2, 33);
        Model model(ModelConfig::desk(), 34);
        JtsoTrainer trainer(model, data, opts);
        trainer.run_phase(1);
        return trainer.metrics_csv();
    };
    const std::string a = run_once();
    const std::string b = run_once();
    CHECK(a == b);

    const int saved = worker_threads();
    set_worker_threads(3);
    const std::string c = run_once();
    set_worker_threads(saved);
    CHECK(a == c);

    // monotone step column
    auto rows = 0;
    std::istringstream in(a);
    std::string line;
    std::getline(in, line);
    CHECK(line == "step,phase,l_p,l_r,l_m,val_iou,lr");
    int64_t prev = 0;
    while (std::getline(in, line)) {
        ++rows;
        const int64_t step = std::stoll(line.substr(0, line.find(',')));
        CHECK(step > prev);
        prev = step;
    }
    CHECK(rows == 6);
}

TEST_CASE("checkpoint round trip is bitwise and rejects damage") {
    TempDir tmp("ckpt");
    Dataset data = make_dataset(4, 2, 41);
    Model model(ModelConfig::desk(), 42);
    TrainOptions opts;
    opts.seed = 43;
    JtsoTrainer trainer(model, data, opts);
    trainer.phase1_step();
    trainer.phase1_step();

    const auto path = tmp.path / "model.ckpt";
    trainer.save(path);

    Rng rng(44);
    Tensor probe = Tensor::zeros({3, 32, 32});
    for (auto& v : probe.data()) v = static_cast<float>(rng.next_double());
    auto [dec_before, ref_before] = model.forward({probe}, false);

    // restore into a fresh model built from a different seed
    Model other(ModelConfig::desk(), 999);
    JtsoTrainer other_trainer(other, data, opts);
    other_trainer.restore(path);

    for (Partition p : {Partition::theta_base, Partition::phi_att, Partition::phi_ref})
        CHECK(other.params().partition_bytes(p) == model.params().partition_bytes(p));
    CHECK(other_trainer.state().global_step == trainer.state().global_step);
    CHECK(other_trainer.adam_base().tau() == trainer.adam_base().tau());
    CHECK(other_trainer.adam_base().moments()[2].m == trainer.adam_base().moments()[2].m);

    auto [dec_after, ref_after] = other.forward({probe}, false);
    CHECK(dec_after.data() == dec_before.data());
    CHECK(ref_after.data() == ref_before.data());

    SUBCASE("truncated file fails cleanly without mutating state") {
        const std::string bytes = read_file(path);
        write_file_atomic(tmp.path / "trunc.ckpt", bytes.substr(0, bytes.size() / 2));
        Model untouched(ModelConfig::desk(), 777);
        const auto before = untouched.params().partition_bytes(Partition::theta_base);
        CHECK_THROWS_AS(load_checkpoint(tmp.path / "trunc.ckpt", untouched), FormatError);
        CHECK(untouched.params().partition_bytes(Partition::theta_base) == before);
    }

    SUBCASE("bad magic is a format error") {
        std::string bytes = read_file(path);
        bytes[0] = 'X';
        write_file_atomic(tmp.path / "magic.ckpt", bytes);
        Model m2(ModelConfig::desk(), 1);
        CHECK_THROWS_AS(load_checkpoint(tmp.path / "magic.ckpt", m2), FormatError);
    }

    SUBCASE("cross-preset load is rejected") {
        Model paper_model(ModelConfig::paper(), 5);
        CHECK_THROWS_AS(load_checkpoint(path, paper_model), ConfigError);
        CHECK(checkpoint_preset(path) == "desk");
    }
}

TEST_CASE("refiner gradients recovered from the mean loss equal the refiner-loss gradients") {
    // d l_m / d phi_ref is exactly half of d l_r / d phi_ref, and the factor
    // 1/2 is a power of two, so doubling recovers l_r gradients bitwise
    Dataset data = make_dataset(1, 1, 61);
    Model model(ModelConfig::desk(), 62);
    const Sample& sample = data.samples[0];
    Tensor gt = voxel_tensor<float>(sample.gt);

    model.params().zero_grads();
    {
        Graph g;
        auto [dec, ref] = model.forward({sample.views[0]}, true);
        Tensor l_m = scalar_mul(add(voxel_cross_entropy(dec, gt), voxel_cross_entropy(ref, gt)),
                                0.5f);
        g.backward(l_m);
    }
    std::vector<std::vector<float>> from_lm;
    for (auto& e : model.params().entries())
        if (e.trainable && e.partition == Partition::phi_ref) {
            from_lm.push_back(e.tensor.grad());
            for (float& v : from_lm.back()) v *= 2.0f;
        }

    model.params().zero_grads();
    {
        Graph g;
        auto [dec, ref] = model.forward({sample.views[0]}, true);
        Tensor l_r = voxel_cross_entropy(ref, gt);
        g.backward(l_r);
    }
    size_t i = 0;
    for (auto& e : model.params().entries())
        if (e.trainable && e.partition == Partition::phi_ref) {
            CHECK(e.tensor.grad() == from_lm[i]);
            ++i;
        }
    CHECK(i == from_lm.size());
}

TEST_CASE("evaluate_split scores every sample of the split") {
    Dataset data = make_dataset(6, 3, 51);
    // move two samples to the test split by hand
    data.samples[0].split = Split::test;
    data.samples[1].split = Split::test;
    data.test_indices = {0, 1};
    data.train_indices = {2, 3, 4, 5};

    Model model(ModelConfig::desk(), 52);
    EvalScores scores = evaluate_split(model, data, Split::test, 2, 0.25f);
    CHECK(scores.refined.size() == 2);
    CHECK(scores.decoder.size() == 2);
    for (const auto& [category, value] : scores.refined) {
        CHECK(value >= 0.0);
        CHECK(value <= 1.0);
    }
}
