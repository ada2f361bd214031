#pragma once

// Test-only reference implementations: literal loop transcriptions used to
// cross-check the library kernels. Deliberately naive and kept independent
// of the production code paths.

#include <cmath>
#include <cstdint>
#include <vector>

namespace oracle {

// Plain triple loop, no blocking.
inline std::vector<double> matmul(const std::vector<double>& a, const std::vector<double>& b,
                                  int64_t m, int64_t k, int64_t n) {
    std::vector<double> out(static_cast<size_t>(m * n), 0.0);
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (int64_t p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
            out[i * n + j] = s;
        }
    return out;
}

// Six nested loops, direct summation, zero padding, cross-correlation.
inline std::vector<double> conv2d(const std::vector<double>& x, const std::vector<double>& w,
                                  const std::vector<double>& bias, int64_t N, int64_t C, int64_t H,
                                  int64_t W, int64_t K, int64_t kh, int64_t kw, int64_t stride,
                                  int64_t pad) {
    const int64_t OH = (H + 2 * pad - kh) / stride + 1;
    const int64_t OW = (W + 2 * pad - kw) / stride + 1;
    std::vector<double> out(static_cast<size_t>(N * K * OH * OW), 0.0);
    for (int64_t n = 0; n < N; ++n)
        for (int64_t k = 0; k < K; ++k)
            for (int64_t oy = 0; oy < OH; ++oy)
                for (int64_t ox = 0; ox < OW; ++ox) {
                    double s = bias[k];
                    for (int64_t c = 0; c < C; ++c)
                        for (int64_t py = 0; py < kh; ++py)
                            for (int64_t px = 0; px < kw; ++px) {
                                const int64_t iy = oy * stride - pad + py;
                                const int64_t ix = ox * stride - pad + px;
                                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                                s += x[((n * C + c) * H + iy) * W + ix] *
                                     w[((k * C + c) * kh + py) * kw + px];
                            }
                    out[((n * K + k) * OH + oy) * OW + ox] = s;
                }
    return out;
}

inline std::vector<double> conv3d(const std::vector<double>& x, const std::vector<double>& w,
                                  const std::vector<double>& bias, int64_t N, int64_t C, int64_t D,
                                  int64_t H, int64_t W, int64_t K, int64_t kd, int64_t kh,
                                  int64_t kw, int64_t stride, int64_t pad) {
    const int64_t OD = (D + 2 * pad - kd) / stride + 1;
    const int64_t OH = (H + 2 * pad - kh) / stride + 1;
    const int64_t OW = (W + 2 * pad - kw) / stride + 1;
    std::vector<double> out(static_cast<size_t>(N * K * OD * OH * OW), 0.0);
    for (int64_t n = 0; n < N; ++n)
        for (int64_t k = 0; k < K; ++k)
            for (int64_t oz = 0; oz < OD; ++oz)
                for (int64_t oy = 0; oy < OH; ++oy)
                    for (int64_t ox = 0; ox < OW; ++ox) {
                        double s = bias[k];
                        for (int64_t c = 0; c < C; ++c)
                            for (int64_t pz = 0; pz < kd; ++pz)
                                for (int64_t py = 0; py < kh; ++py)
                                    for (int64_t px = 0; px < kw; ++px) {
                                        const int64_t iz = oz * stride - pad + pz;
                                        const int64_t iy = oy * stride - pad + py;
                                        const int64_t ix = ox * stride - pad + px;
                                        if (iz < 0 || iz >= D || iy < 0 || iy >= H || ix < 0 ||
                                            ix >= W)
                                            continue;
                                        s += x[(((n * C + c) * D + iz) * H + iy) * W + ix] *
                                             w[(((k * C + c) * kd + pz) * kh + py) * kw + px];
                                    }
                        out[(((n * K + k) * OD + oz) * OH + oy) * OW + ox] = s;
                    }
    return out;
}

// Scatter form straight from the definition: every input element stamps the
// kernel into the output.
inline std::vector<double> conv_transpose3d(const std::vector<double>& x,
                                            const std::vector<double>& w,
                                            const std::vector<double>& bias, int64_t N, int64_t C,
                                            int64_t D, int64_t H, int64_t W, int64_t K, int64_t kd,
                                            int64_t kh, int64_t kw, int64_t stride, int64_t pad,
                                            int64_t output_padding) {
    const int64_t OD = (D - 1) * stride - 2 * pad + kd + output_padding;
    const int64_t OH = (H - 1) * stride - 2 * pad + kh + output_padding;
    const int64_t OW = (W - 1) * stride - 2 * pad + kw + output_padding;
    std::vector<double> out(static_cast<size_t>(N * K * OD * OH * OW), 0.0);
    for (int64_t n = 0; n < N; ++n)
        for (int64_t k = 0; k < K; ++k)
            for (int64_t i = 0; i < OD * OH * OW; ++i)
                out[(n * K + k) * OD * OH * OW + i] = bias[k];
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c)
            for (int64_t tz = 0; tz < D; ++tz)
                for (int64_t ty = 0; ty < H; ++ty)
                    for (int64_t tx = 0; tx < W; ++tx) {
                        const double xval = x[(((n * C + c) * D + tz) * H + ty) * W + tx];
                        for (int64_t k = 0; k < K; ++k)
                            for (int64_t pz = 0; pz < kd; ++pz)
                                for (int64_t py = 0; py < kh; ++py)
                                    for (int64_t px = 0; px < kw; ++px) {
                                        const int64_t oz = tz * stride - pad + pz;
                                        const int64_t oy = ty * stride - pad + py;
                                        const int64_t ox = tx * stride - pad + px;
                                        if (oz < 0 || oz >= OD || oy < 0 || oy >= OH || ox < 0 ||
                                            ox >= OW)
                                            continue;
                                        out[(((n * K + k) * OD + oz) * OH + oy) * OW + ox] +=
                                            xval *
                                            w[(((c * K + k) * kd + pz) * kh + py) * kw + px];
                                    }
                    }
    return out;
}

// Two-pass mean/variance batch normalization, train-mode statistics.
inline std::vector<double> batchnorm_train(const std::vector<double>& x,
                                           const std::vector<double>& gamma,
                                           const std::vector<double>& beta, int64_t N, int64_t C,
                                           int64_t spatial, double eps) {
    std::vector<double> out(x.size(), 0.0);
    for (int64_t c = 0; c < C; ++c) {
        double mu = 0.0;
        for (int64_t n = 0; n < N; ++n)
            for (int64_t s = 0; s < spatial; ++s) mu += x[(n * C + c) * spatial + s];
        mu /= static_cast<double>(N * spatial);
        double var = 0.0;
        for (int64_t n = 0; n < N; ++n)
            for (int64_t s = 0; s < spatial; ++s) {
                const double d = x[(n * C + c) * spatial + s] - mu;
                var += d * d;
            }
        var /= static_cast<double>(N * spatial);
        for (int64_t n = 0; n < N; ++n)
            for (int64_t s = 0; s < spatial; ++s) {
                const int64_t i = (n * C + c) * spatial + s;
                out[i] = gamma[c] * (x[i] - mu) / std::sqrt(var + eps) + beta[c];
            }
    }
    return out;
}

// Voxel-wise binary cross-entropy by direct summation.
inline double voxel_cross_entropy(const std::vector<double>& pred, const std::vector<double>& gt,
                                  double clip_eps = 1e-7) {
    double total = 0.0;
    for (size_t i = 0; i < pred.size(); ++i) {
        double p = std::min(1.0 - clip_eps, std::max(clip_eps, pred[i]));
        total += gt[i] * std::log(p) + (1.0 - gt[i]) * std::log(1.0 - p);
    }
    return -total / static_cast<double>(pred.size());
}

// Set-based IoU over explicitly enumerated voxel sets.
inline double iou_sets(const std::vector<float>& pred_probs, const std::vector<float>& gt,
                       float threshold) {
    int64_t inter = 0, uni = 0;
    for (size_t i = 0; i < pred_probs.size(); ++i) {
        const bool p = pred_probs[i] > threshold;
        const bool g = gt[i] > 0.5f;
        if (p && g) ++inter;
        if (p || g) ++uni;
    }
    if (uni == 0) return 1.0;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

}  // namespace oracle
