#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "refine3d/tensor.hpp"
#include "refine3d/voxel.hpp"

namespace refine3d {

// Default binarization threshold for IoU evaluation.
inline constexpr float kVoxelThreshold = 0.25f;
// Predictions are clipped to [eps, 1-eps] before the logs in the loss.
inline constexpr double kProbClipEps = 1e-7;

// Decoder loss, refiner loss, and their mean.
struct LossTriple {
    double l_p = 0.0;
    double l_r = 0.0;
    double l_m = 0.0;

    static LossTriple of(double lp, double lr) { return {lp, lr, (lp + lr) / 2.0}; }
};

// Average voxel-wise cross-entropy, negated so lower is better and L >= 0.
// pred holds probabilities, gt must be binary {0,1}; differentiable in pred.
template <typename T>
TensorT<T> voxel_cross_entropy(const TensorT<T>& pred, const TensorT<T>& gt) {
    if (pred.shape() != gt.shape())
        throw DimensionError("voxel_cross_entropy: shape mismatch " + shape_str(pred.shape()) +
                             " vs " + shape_str(gt.shape()));
    const T eps = static_cast<T>(kProbClipEps);
    const auto& pv = pred.data();
    const auto& gv = gt.data();
    for (T g : gv) {
        if (g != T(0) && g != T(1))
            throw NumericError("voxel_cross_entropy: ground truth is not binary");
    }
    const int64_t V = pred.numel();
    bool rg = detail::tracing<T>(pred.requires_grad());
    TensorT<T> out = TensorT<T>::zeros({1}, rg);
    double total = 0.0;
    for (int64_t i = 0; i < V; ++i) {
        T p = std::clamp(pv[static_cast<size_t>(i)], eps, T(1) - eps);
        const T g = gv[static_cast<size_t>(i)];
        total += static_cast<double>(g) * std::log(static_cast<double>(p)) +
                 (1.0 - static_cast<double>(g)) * std::log(1.0 - static_cast<double>(p));
    }
    out.data()[0] = static_cast<T>(-total / static_cast<double>(V));
    detail::debug_check_finite(out, "voxel_cross_entropy");
    if (rg) {
        GraphT<T>::current()->record([pn = pred.handle(), gn = gt.handle(), on = out.handle(), V,
                                      eps] {
            const T go = on->grad[0];
            const T inv_v = T(1) / static_cast<T>(V);
            for (int64_t i = 0; i < V; ++i) {
                const T p = pn->data[static_cast<size_t>(i)];
                if (p <= eps || p >= T(1) - eps) continue;  // clipped region has zero slope
                const T g = gn->data[static_cast<size_t>(i)];
                pn->grad[static_cast<size_t>(i)] +=
                    go * (-(g / p - (T(1) - g) / (T(1) - p)) * inv_v);
            }
        });
    }
    return out;
}

// 1 where p > t, else 0 (strict inequality; p == t maps to 0).
VoxelGrid binarize(const VoxelGrid& pred, float t = kVoxelThreshold);

// Intersection over union of binarize(pred, t) against binary gt.
// Both sets empty -> 1.0.
double iou(const VoxelGrid& pred, const VoxelGrid& gt, float t = kVoxelThreshold);

struct IouReport {
    int views = 0;
    float threshold = kVoxelThreshold;
    std::vector<std::pair<std::string, double>> per_category;  // sorted by name
    double overall = 0.0;                                      // mean of category means
};

IouReport aggregate(const std::vector<std::pair<std::string, double>>& per_sample, int views,
                    float threshold = kVoxelThreshold);

// CSV rows: header `category,views,threshold,mean_iou`, one row per category
// plus a `__overall__` row per report.
struct IouRow {
    std::string category;
    int views = 0;
    float threshold = 0.0f;
    double mean_iou = 0.0;
};

std::vector<IouRow> report_rows(const IouReport& report);
std::string iou_csv(const std::vector<IouRow>& rows);
void write_iou_csv(const std::filesystem::path& path, const std::vector<IouRow>& rows);
std::vector<IouRow> parse_iou_csv(const std::string& text);
std::vector<IouRow> read_iou_csv(const std::filesystem::path& path);

// Deterministic short float formatting shared by the CSV writers.
std::string format_double(double v);

}  // namespace refine3d
