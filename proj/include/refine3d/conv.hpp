#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "refine3d/parallel.hpp"
#include "refine3d/tensor.hpp"

namespace refine3d {

namespace detail {

inline int64_t div_floor(int64_t a, int64_t b) {
    return a >= 0 ? a / b : -((-a + b - 1) / b);
}
inline int64_t div_ceil(int64_t a, int64_t b) { return a >= 0 ? (a + b - 1) / b : -((-a) / b); }

inline int64_t conv_out_extent(int64_t in, int64_t k, int64_t stride, int64_t pad,
                               const char* op) {
    int64_t out = (in + 2 * pad - k) / stride + 1;
    if (k > in + 2 * pad || out < 1) {
        throw DimensionError(std::string(op) + ": kernel " + std::to_string(k) +
                             " too large for input extent " + std::to_string(in) + " with pad " +
                             std::to_string(pad));
    }
    return out;
}

}  // namespace detail

// Cross-correlation (no kernel flip), zero padding.
// x [N,C,H,W], w [K,C,kh,kw], bias [K] -> [N,K,H',W']
// A default-constructed bias tensor means no bias term.
template <typename T>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& bias,
                  int64_t stride, int64_t pad) {
    if (x.rank() != 4 || w.rank() != 4 || (bias.defined() && bias.rank() != 1))
        throw DimensionError("conv2d: expected x[N,C,H,W], w[K,C,kh,kw], bias[K]");
    if (x.dim(1) != w.dim(1) || (bias.defined() && w.dim(0) != bias.dim(0)))
        throw DimensionError("conv2d: channel mismatch " + shape_str(x.shape()) + " vs " +
                             shape_str(w.shape()));
    const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int64_t K = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    const int64_t OH = detail::conv_out_extent(H, kh, stride, pad, "conv2d");
    const int64_t OW = detail::conv_out_extent(W, kw, stride, pad, "conv2d");

    bool rg = detail::tracing<T>(x.requires_grad() || w.requires_grad() ||
                                 (bias.defined() && bias.requires_grad()));
    TensorT<T> out = TensorT<T>::zeros({N, K, OH, OW}, rg);
    const T* xv = x.data().data();
    const T* wv = w.data().data();
    const T* bv = bias.defined() ? bias.data().data() : nullptr;
    T* ov = out.data().data();

    parallel_for(N * K, [&](int64_t nk0, int64_t nk1) {
        for (int64_t nk = nk0; nk < nk1; ++nk) {
            const int64_t n = nk / K, k = nk % K;
            T* oplane = ov + (n * K + k) * OH * OW;
            std::fill(oplane, oplane + OH * OW, bv ? bv[k] : T(0));
            for (int64_t c = 0; c < C; ++c) {
                const T* xplane = xv + (n * C + c) * H * W;
                const T* wplane = wv + (k * C + c) * kh * kw;
                for (int64_t py = 0; py < kh; ++py)
                    for (int64_t px = 0; px < kw; ++px) {
                        const T wval = wplane[py * kw + px];
                        for (int64_t oy = 0; oy < OH; ++oy) {
                            const int64_t iy = oy * stride - pad + py;
                            if (iy < 0 || iy >= H) continue;
                            const T* xrow = xplane + iy * W;
                            T* orow = oplane + oy * OW;
                            if (stride == 1) {
                                const int64_t off = px - pad;
                                const int64_t lo = std::max<int64_t>(0, -off);
                                const int64_t hi = std::min(OW, W - off);
                                for (int64_t ox = lo; ox < hi; ++ox)
                                    orow[ox] += wval * xrow[ox + off];
                            } else {
                                for (int64_t ox = 0; ox < OW; ++ox) {
                                    const int64_t ix = ox * stride - pad + px;
                                    if (ix >= 0 && ix < W) orow[ox] += wval * xrow[ix];
                                }
                            }
                        }
                    }
            }
        }
    });
    detail::debug_check_finite(out, "conv2d");

    if (rg) {
        GraphT<T>::current()->record([xn = x.handle(), wn = w.handle(), bn = bias.handle(),
                                      on = out.handle(), N, C, H, W, K, kh, kw, OH, OW, stride,
                                      pad] {
            const T* g = on->grad.data();
            auto o_lo = [stride, pad](int64_t p) {
                return std::max<int64_t>(0, detail::div_ceil(pad - p, stride));
            };
            auto o_hi = [stride, pad](int64_t p, int64_t in, int64_t out) {
                return std::min(out, detail::div_floor(in - 1 + pad - p, stride) + 1);
            };
            if (xn->requires_grad) {
                T* dx = xn->grad.data();
                const T* wv = wn->data.data();
                parallel_for(N * C, [&](int64_t nc0, int64_t nc1) {
                    for (int64_t nc = nc0; nc < nc1; ++nc) {
                        const int64_t n = nc / C, c = nc % C;
                        T* dxplane = dx + (n * C + c) * H * W;
                        for (int64_t k = 0; k < K; ++k) {
                            const T* gplane = g + (n * K + k) * OH * OW;
                            const T* wplane = wv + (k * C + c) * kh * kw;
                            for (int64_t py = 0; py < kh; ++py)
                                for (int64_t px = 0; px < kw; ++px) {
                                    const T wval = wplane[py * kw + px];
                                    const int64_t yl = o_lo(py), yh = o_hi(py, H, OH);
                                    const int64_t xl = o_lo(px), xh = o_hi(px, W, OW);
                                    for (int64_t oy = yl; oy < yh; ++oy) {
                                        const int64_t iy = oy * stride - pad + py;
                                        T* dxrow = dxplane + iy * W;
                                        const T* grow = gplane + oy * OW;
                                        if (stride == 1) {
                                            const int64_t off = px - pad;
                                            for (int64_t ox = xl; ox < xh; ++ox)
                                                dxrow[ox + off] += wval * grow[ox];
                                        } else {
                                            for (int64_t ox = xl; ox < xh; ++ox)
                                                dxrow[ox * stride - pad + px] += wval * grow[ox];
                                        }
                                    }
                                }
                        }
                    }
                });
            }
            if (wn->requires_grad) {
                T* dw = wn->grad.data();
                const T* xv = xn->data.data();
                parallel_for(K, [&](int64_t k0, int64_t k1) {
                    for (int64_t k = k0; k < k1; ++k)
                        for (int64_t n = 0; n < N; ++n) {
                            const T* gplane = g + (n * K + k) * OH * OW;
                            for (int64_t c = 0; c < C; ++c) {
                                const T* xplane = xv + (n * C + c) * H * W;
                                T* dwplane = dw + (k * C + c) * kh * kw;
                                for (int64_t py = 0; py < kh; ++py)
                                    for (int64_t px = 0; px < kw; ++px) {
                                        const int64_t yl = o_lo(py), yh = o_hi(py, H, OH);
                                        const int64_t xl = o_lo(px), xh = o_hi(px, W, OW);
                                        T s = 0;
                                        for (int64_t oy = yl; oy < yh; ++oy) {
                                            const int64_t iy = oy * stride - pad + py;
                                            const T* xrow = xplane + iy * W;
                                            const T* grow = gplane + oy * OW;
                                            if (stride == 1) {
                                                const int64_t off = px - pad;
                                                for (int64_t ox = xl; ox < xh; ++ox)
                                                    s += xrow[ox + off] * grow[ox];
                                            } else {
                                                for (int64_t ox = xl; ox < xh; ++ox)
                                                    s += xrow[ox * stride - pad + px] * grow[ox];
                                            }
                                        }
                                        dwplane[py * kw + px] += s;
                                    }
                            }
                        }
                });
            }
            if (bn && bn->requires_grad) {
                for (int64_t k = 0; k < K; ++k) {
                    T s = 0;
                    for (int64_t n = 0; n < N; ++n) {
                        const T* gplane = g + (n * K + k) * OH * OW;
                        for (int64_t i = 0; i < OH * OW; ++i) s += gplane[i];
                    }
                    bn->grad[k] += s;
                }
            }
        });
    }
    return out;
}

// x [N,C,D,H,W], w [K,C,kd,kh,kw], bias [K] -> [N,K,D',H',W']
template <typename T>
TensorT<T> conv3d(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& bias,
                  int64_t stride, int64_t pad) {
    if (x.rank() != 5 || w.rank() != 5 || (bias.defined() && bias.rank() != 1))
        throw DimensionError("conv3d: expected x[N,C,D,H,W], w[K,C,kd,kh,kw], bias[K]");
    if (x.dim(1) != w.dim(1) || (bias.defined() && w.dim(0) != bias.dim(0)))
        throw DimensionError("conv3d: channel mismatch " + shape_str(x.shape()) + " vs " +
                             shape_str(w.shape()));
    const int64_t N = x.dim(0), C = x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4);
    const int64_t K = w.dim(0), kd = w.dim(2), kh = w.dim(3), kw = w.dim(4);
    const int64_t OD = detail::conv_out_extent(D, kd, stride, pad, "conv3d");
    const int64_t OH = detail::conv_out_extent(H, kh, stride, pad, "conv3d");
    const int64_t OW = detail::conv_out_extent(W, kw, stride, pad, "conv3d");

    bool rg = detail::tracing<T>(x.requires_grad() || w.requires_grad() ||
                                 (bias.defined() && bias.requires_grad()));
    TensorT<T> out = TensorT<T>::zeros({N, K, OD, OH, OW}, rg);
    const T* xv = x.data().data();
    const T* wv = w.data().data();
    const T* bv = bias.defined() ? bias.data().data() : nullptr;
    T* ov = out.data().data();

    parallel_for(N * K, [&](int64_t nk0, int64_t nk1) {
        for (int64_t nk = nk0; nk < nk1; ++nk) {
            const int64_t n = nk / K, k = nk % K;
            T* ovol = ov + (n * K + k) * OD * OH * OW;
            std::fill(ovol, ovol + OD * OH * OW, bv ? bv[k] : T(0));
            for (int64_t c = 0; c < C; ++c) {
                const T* xvol = xv + (n * C + c) * D * H * W;
                const T* wvol = wv + (k * C + c) * kd * kh * kw;
                for (int64_t pz = 0; pz < kd; ++pz)
                    for (int64_t py = 0; py < kh; ++py)
                        for (int64_t px = 0; px < kw; ++px) {
                            const T wval = wvol[(pz * kh + py) * kw + px];
                            for (int64_t oz = 0; oz < OD; ++oz) {
                                const int64_t iz = oz * stride - pad + pz;
                                if (iz < 0 || iz >= D) continue;
                                for (int64_t oy = 0; oy < OH; ++oy) {
                                    const int64_t iy = oy * stride - pad + py;
                                    if (iy < 0 || iy >= H) continue;
                                    const T* xrow = xvol + (iz * H + iy) * W;
                                    T* orow = ovol + (oz * OH + oy) * OW;
                                    if (stride == 1) {
                                        const int64_t off = px - pad;
                                        const int64_t lo = std::max<int64_t>(0, -off);
                                        const int64_t hi = std::min(OW, W - off);
                                        for (int64_t ox = lo; ox < hi; ++ox)
                                            orow[ox] += wval * xrow[ox + off];
                                    } else {
                                        for (int64_t ox = 0; ox < OW; ++ox) {
                                            const int64_t ix = ox * stride - pad + px;
                                            if (ix >= 0 && ix < W) orow[ox] += wval * xrow[ix];
                                        }
                                    }
                                }
                            }
                        }
            }
        }
    });
    detail::debug_check_finite(out, "conv3d");

    if (rg) {
        GraphT<T>::current()->record([xn = x.handle(), wn = w.handle(), bn = bias.handle(),
                                      on = out.handle(), N, C, D, H, W, K, kd, kh, kw, OD, OH, OW,
                                      stride, pad] {
            const T* g = on->grad.data();
            // valid output range for one kernel tap p on an input axis of
            // extent `in`: o*stride - pad + p must land inside [0, in)
            auto o_lo = [stride, pad](int64_t p) {
                return std::max<int64_t>(0, detail::div_ceil(pad - p, stride));
            };
            auto o_hi = [stride, pad](int64_t p, int64_t in, int64_t out) {
                return std::min(out, detail::div_floor(in - 1 + pad - p, stride) + 1);
            };
            if (xn->requires_grad) {
                T* dx = xn->grad.data();
                const T* wv = wn->data.data();
                parallel_for(N * C, [&](int64_t nc0, int64_t nc1) {
                    for (int64_t nc = nc0; nc < nc1; ++nc) {
                        const int64_t n = nc / C, c = nc % C;
                        T* dxvol = dx + (n * C + c) * D * H * W;
                        for (int64_t k = 0; k < K; ++k) {
                            const T* gvol = g + (n * K + k) * OD * OH * OW;
                            const T* wvol = wv + (k * C + c) * kd * kh * kw;
                            for (int64_t pz = 0; pz < kd; ++pz)
                                for (int64_t py = 0; py < kh; ++py)
                                    for (int64_t px = 0; px < kw; ++px) {
                                        const T wval = wvol[(pz * kh + py) * kw + px];
                                        const int64_t zl = o_lo(pz), zh = o_hi(pz, D, OD);
                                        const int64_t yl = o_lo(py), yh = o_hi(py, H, OH);
                                        const int64_t xl = o_lo(px), xh = o_hi(px, W, OW);
                                        for (int64_t oz = zl; oz < zh; ++oz) {
                                            const int64_t iz = oz * stride - pad + pz;
                                            for (int64_t oy = yl; oy < yh; ++oy) {
                                                const int64_t iy = oy * stride - pad + py;
                                                T* dxrow = dxvol + (iz * H + iy) * W;
                                                const T* grow = gvol + (oz * OH + oy) * OW;
                                                if (stride == 1) {
                                                    const int64_t off = px - pad;
                                                    for (int64_t ox = xl; ox < xh; ++ox)
                                                        dxrow[ox + off] += wval * grow[ox];
                                                } else {
                                                    for (int64_t ox = xl; ox < xh; ++ox)
                                                        dxrow[ox * stride - pad + px] +=
                                                            wval * grow[ox];
                                                }
                                            }
                                        }
                                    }
                        }
                    }
                });
            }
            if (wn->requires_grad) {
                T* dw = wn->grad.data();
                const T* xv = xn->data.data();
                parallel_for(K, [&](int64_t k0, int64_t k1) {
                    for (int64_t k = k0; k < k1; ++k)
                        for (int64_t n = 0; n < N; ++n) {
                            const T* gvol = g + (n * K + k) * OD * OH * OW;
                            for (int64_t c = 0; c < C; ++c) {
                                const T* xvol = xv + (n * C + c) * D * H * W;
                                T* dwvol = dw + (k * C + c) * kd * kh * kw;
                                for (int64_t pz = 0; pz < kd; ++pz)
                                    for (int64_t py = 0; py < kh; ++py)
                                        for (int64_t px = 0; px < kw; ++px) {
                                            const int64_t zl = o_lo(pz), zh = o_hi(pz, D, OD);
                                            const int64_t yl = o_lo(py), yh = o_hi(py, H, OH);
                                            const int64_t xl = o_lo(px), xh = o_hi(px, W, OW);
                                            T s = 0;
                                            for (int64_t oz = zl; oz < zh; ++oz) {
                                                const int64_t iz = oz * stride - pad + pz;
                                                for (int64_t oy = yl; oy < yh; ++oy) {
                                                    const int64_t iy = oy * stride - pad + py;
                                                    const T* xrow = xvol + (iz * H + iy) * W;
                                                    const T* grow = gvol + (oz * OH + oy) * OW;
                                                    if (stride == 1) {
                                                        const int64_t off = px - pad;
                                                        for (int64_t ox = xl; ox < xh; ++ox)
                                                            s += xrow[ox + off] * grow[ox];
                                                    } else {
                                                        for (int64_t ox = xl; ox < xh; ++ox)
                                                            s += xrow[ox * stride - pad + px] *
                                                                 grow[ox];
                                                    }
                                                }
                                            }
                                            dwvol[(pz * kh + py) * kw + px] += s;
                                        }
                            }
                        }
                });
            }
            if (bn && bn->requires_grad) {
                const int64_t vol = OD * OH * OW;
                for (int64_t k = 0; k < K; ++k) {
                    T s = 0;
                    for (int64_t n = 0; n < N; ++n) {
                        const T* gvol = g + (n * K + k) * vol;
                        for (int64_t i = 0; i < vol; ++i) s += gvol[i];
                    }
                    bn->grad[k] += s;
                }
            }
        });
    }
    return out;
}

// Transposed 3D convolution. x [N,C,D,H,W], w [C,K,kd,kh,kw], bias [K].
// Output extent = (in-1)*stride - 2*pad + k + output_padding.
template <typename T>
TensorT<T> conv_transpose3d(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& bias,
                            int64_t stride, int64_t pad, int64_t output_padding = 0) {
    if (x.rank() != 5 || w.rank() != 5 || (bias.defined() && bias.rank() != 1))
        throw DimensionError("conv_transpose3d: expected x[N,C,D,H,W], w[C,K,kd,kh,kw], bias[K]");
    if (x.dim(1) != w.dim(0) || (bias.defined() && w.dim(1) != bias.dim(0)))
        throw DimensionError("conv_transpose3d: channel mismatch " + shape_str(x.shape()) +
                             " vs " + shape_str(w.shape()));
    if (output_padding < 0 || output_padding >= stride)
        throw DimensionError("conv_transpose3d: output_padding must be in [0, stride)");
    const int64_t N = x.dim(0), C = x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4);
    const int64_t K = w.dim(1), kd = w.dim(2), kh = w.dim(3), kw = w.dim(4);
    const int64_t OD = (D - 1) * stride - 2 * pad + kd + output_padding;
    const int64_t OH = (H - 1) * stride - 2 * pad + kh + output_padding;
    const int64_t OW = (W - 1) * stride - 2 * pad + kw + output_padding;
    if (OD < 1 || OH < 1 || OW < 1)
        throw DimensionError("conv_transpose3d: non-positive output extent for input " +
                             shape_str(x.shape()));

    bool rg = detail::tracing<T>(x.requires_grad() || w.requires_grad() ||
                                 (bias.defined() && bias.requires_grad()));
    TensorT<T> out = TensorT<T>::zeros({N, K, OD, OH, OW}, rg);
    const T* xv = x.data().data();
    const T* wv = w.data().data();
    const T* bv = bias.defined() ? bias.data().data() : nullptr;
    T* ov = out.data().data();

    // Each (n,k) output volume is written by exactly one parallel_for
    // invocation with a fixed loop order, so the result is deterministic.
    // stride 1 runs as a correlation with reversed taps (contiguous inner
    // rows); larger strides scatter each input element through the kernel.
    parallel_for(N * K, [&](int64_t nk0, int64_t nk1) {
        for (int64_t nk = nk0; nk < nk1; ++nk) {
            const int64_t n = nk / K, k = nk % K;
            T* ovol = ov + (n * K + k) * OD * OH * OW;
            std::fill(ovol, ovol + OD * OH * OW, bv ? bv[k] : T(0));
            for (int64_t c = 0; c < C; ++c) {
                const T* xvol = xv + (n * C + c) * D * H * W;
                const T* wvol = wv + (c * K + k) * kd * kh * kw;
                if (stride == 1) {
                    for (int64_t pz = 0; pz < kd; ++pz)
                        for (int64_t py = 0; py < kh; ++py)
                            for (int64_t px = 0; px < kw; ++px) {
                                const T wval = wvol[(pz * kh + py) * kw + px];
                                for (int64_t oz = std::max<int64_t>(0, pz - pad);
                                     oz < std::min(OD, D + pz - pad); ++oz) {
                                    const int64_t tz = oz + pad - pz;
                                    for (int64_t oy = std::max<int64_t>(0, py - pad);
                                         oy < std::min(OH, H + py - pad); ++oy) {
                                        const int64_t ty = oy + pad - py;
                                        const T* xrow = xvol + (tz * H + ty) * W;
                                        T* orow = ovol + (oz * OH + oy) * OW;
                                        const int64_t off = pad - px;
                                        const int64_t lo = std::max<int64_t>(0, px - pad);
                                        const int64_t hi = std::min(OW, W - off);
                                        for (int64_t ox = lo; ox < hi; ++ox)
                                            orow[ox] += wval * xrow[ox + off];
                                    }
                                }
                            }
                } else {
                    for (int64_t tz = 0; tz < D; ++tz)
                        for (int64_t ty = 0; ty < H; ++ty)
                            for (int64_t tx = 0; tx < W; ++tx) {
                                const T xval = xvol[(tz * H + ty) * W + tx];
                                if (xval == T(0)) continue;
                                for (int64_t pz = 0; pz < kd; ++pz) {
                                    const int64_t oz = tz * stride - pad + pz;
                                    if (oz < 0 || oz >= OD) continue;
                                    for (int64_t py = 0; py < kh; ++py) {
                                        const int64_t oy = ty * stride - pad + py;
                                        if (oy < 0 || oy >= OH) continue;
                                        T* orow = ovol + (oz * OH + oy) * OW;
                                        const T* wrow = wvol + (pz * kh + py) * kw;
                                        const int64_t base = tx * stride - pad;
                                        const int64_t lo = std::max<int64_t>(0, -base);
                                        const int64_t hi = std::min(kw, OW - base);
                                        for (int64_t px = lo; px < hi; ++px)
                                            orow[base + px] += xval * wrow[px];
                                    }
                                }
                            }
                }
            }
        }
    });
    detail::debug_check_finite(out, "conv_transpose3d");

    if (rg) {
        GraphT<T>::current()->record([xn = x.handle(), wn = w.handle(), bn = bias.handle(),
                                      on = out.handle(), N, C, D, H, W, K, kd, kh, kw, OD, OH, OW,
                                      stride, pad] {
            const T* g = on->grad.data();
            // valid input range for one tap p: t*stride - pad + p in [0, out)
            auto t_lo = [stride, pad](int64_t p) {
                return std::max<int64_t>(0, detail::div_ceil(pad - p, stride));
            };
            auto t_hi = [stride, pad](int64_t p, int64_t in, int64_t out) {
                return std::min(in, detail::div_floor(out - 1 + pad - p, stride) + 1);
            };
            if (xn->requires_grad) {
                // dx is a plain strided convolution of g with w
                T* dx = xn->grad.data();
                const T* wv = wn->data.data();
                parallel_for(N * C, [&](int64_t nc0, int64_t nc1) {
                    for (int64_t nc = nc0; nc < nc1; ++nc) {
                        const int64_t n = nc / C, c = nc % C;
                        T* dxvol = dx + (n * C + c) * D * H * W;
                        for (int64_t k = 0; k < K; ++k) {
                            const T* gvol = g + (n * K + k) * OD * OH * OW;
                            const T* wvol = wv + (c * K + k) * kd * kh * kw;
                            for (int64_t pz = 0; pz < kd; ++pz)
                                for (int64_t py = 0; py < kh; ++py)
                                    for (int64_t px = 0; px < kw; ++px) {
                                        const T wval = wvol[(pz * kh + py) * kw + px];
                                        const int64_t zl = t_lo(pz), zh = t_hi(pz, D, OD);
                                        const int64_t yl = t_lo(py), yh = t_hi(py, H, OH);
                                        const int64_t xl = t_lo(px), xh = t_hi(px, W, OW);
                                        for (int64_t tz = zl; tz < zh; ++tz) {
                                            const int64_t oz = tz * stride - pad + pz;
                                            for (int64_t ty = yl; ty < yh; ++ty) {
                                                const int64_t oy = ty * stride - pad + py;
                                                T* dxrow = dxvol + (tz * H + ty) * W;
                                                const T* grow = gvol + (oz * OH + oy) * OW;
                                                if (stride == 1) {
                                                    const int64_t off = px - pad;
                                                    for (int64_t tx = xl; tx < xh; ++tx)
                                                        dxrow[tx] += wval * grow[tx + off];
                                                } else {
                                                    for (int64_t tx = xl; tx < xh; ++tx)
                                                        dxrow[tx] +=
                                                            wval *
                                                            grow[tx * stride - pad + px];
                                                }
                                            }
                                        }
                                    }
                        }
                    }
                });
            }
            if (wn->requires_grad) {
                T* dw = wn->grad.data();
                const T* xv = xn->data.data();
                parallel_for(C, [&](int64_t c0, int64_t c1) {
                    for (int64_t c = c0; c < c1; ++c)
                        for (int64_t k = 0; k < K; ++k) {
                            T* dwvol = dw + (c * K + k) * kd * kh * kw;
                            for (int64_t n = 0; n < N; ++n) {
                                const T* xvol = xv + (n * C + c) * D * H * W;
                                const T* gvol = g + (n * K + k) * OD * OH * OW;
                                for (int64_t pz = 0; pz < kd; ++pz)
                                    for (int64_t py = 0; py < kh; ++py)
                                        for (int64_t px = 0; px < kw; ++px) {
                                            const int64_t zl = t_lo(pz), zh = t_hi(pz, D, OD);
                                            const int64_t yl = t_lo(py), yh = t_hi(py, H, OH);
                                            const int64_t xl = t_lo(px), xh = t_hi(px, W, OW);
                                            T s = 0;
                                            for (int64_t tz = zl; tz < zh; ++tz) {
                                                const int64_t oz = tz * stride - pad + pz;
                                                for (int64_t ty = yl; ty < yh; ++ty) {
                                                    const int64_t oy = ty * stride - pad + py;
                                                    const T* xrow = xvol + (tz * H + ty) * W;
                                                    const T* grow = gvol + (oz * OH + oy) * OW;
                                                    if (stride == 1) {
                                                        const int64_t off = px - pad;
                                                        for (int64_t tx = xl; tx < xh; ++tx)
                                                            s += xrow[tx] * grow[tx + off];
                                                    } else {
                                                        for (int64_t tx = xl; tx < xh; ++tx)
                                                            s += xrow[tx] *
                                                                 grow[tx * stride - pad + px];
                                                    }
                                                }
                                            }
                                            dwvol[(pz * kh + py) * kw + px] += s;
                                        }
                            }
                        }
                });
            }
            if (bn && bn->requires_grad) {
                const int64_t vol = OD * OH * OW;
                for (int64_t k = 0; k < K; ++k) {
                    T s = 0;
                    for (int64_t n = 0; n < N; ++n) {
                        const T* gvol = g + (n * K + k) * vol;
                        for (int64_t i = 0; i < vol; ++i) s += gvol[i];
                    }
                    bn->grad[k] += s;
                }
            }
        });
    }
    return out;
}

// 2x2 max pooling, stride 2, floor semantics; ties break to the first
// element in scan order. x [N,C,H,W].
template <typename T>
TensorT<T> maxpool2d(const TensorT<T>& x) {
    if (x.rank() != 4) throw DimensionError("maxpool2d: expected x[N,C,H,W]");
    const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (H < 2 || W < 2)
        throw DimensionError("maxpool2d: extent < 2 in " + shape_str(x.shape()));
    const int64_t OH = H / 2, OW = W / 2;
    bool rg = detail::tracing<T>(x.requires_grad());
    TensorT<T> out = TensorT<T>::zeros({N, C, OH, OW}, rg);
    auto argmax = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(N * C * OH * OW));
    const T* xv = x.data().data();
    T* ov = out.data().data();
    for (int64_t nc = 0; nc < N * C; ++nc) {
        const T* xplane = xv + nc * H * W;
        T* oplane = ov + nc * OH * OW;
        int64_t* aplane = argmax->data() + nc * OH * OW;
        for (int64_t oy = 0; oy < OH; ++oy)
            for (int64_t ox = 0; ox < OW; ++ox) {
                int64_t best = (2 * oy) * W + 2 * ox;
                T bestv = xplane[best];
                const int64_t cand[3] = {(2 * oy) * W + 2 * ox + 1, (2 * oy + 1) * W + 2 * ox,
                                         (2 * oy + 1) * W + 2 * ox + 1};
                for (int64_t idx : cand) {
                    if (xplane[idx] > bestv) {
                        bestv = xplane[idx];
                        best = idx;
                    }
                }
                oplane[oy * OW + ox] = bestv;
                aplane[oy * OW + ox] = best;
            }
    }
    if (rg) {
        GraphT<T>::current()->record([xn = x.handle(), on = out.handle(), argmax, N, C, H, W, OH,
                                      OW] {
            const T* g = on->grad.data();
            T* dx = xn->grad.data();
            for (int64_t nc = 0; nc < N * C; ++nc)
                for (int64_t i = 0; i < OH * OW; ++i)
                    dx[nc * H * W + (*argmax)[nc * OH * OW + i]] += g[nc * OH * OW + i];
        });
    }
    return out;
}

// 2x2x2 max pooling, stride 2. x [N,C,D,H,W].
template <typename T>
TensorT<T> maxpool3d(const TensorT<T>& x) {
    if (x.rank() != 5) throw DimensionError("maxpool3d: expected x[N,C,D,H,W]");
    const int64_t N = x.dim(0), C = x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4);
    if (D < 2 || H < 2 || W < 2)
        throw DimensionError("maxpool3d: extent < 2 in " + shape_str(x.shape()));
    const int64_t OD = D / 2, OH = H / 2, OW = W / 2;
    bool rg = detail::tracing<T>(x.requires_grad());
    TensorT<T> out = TensorT<T>::zeros({N, C, OD, OH, OW}, rg);
    auto argmax =
        std::make_shared<std::vector<int64_t>>(static_cast<size_t>(N * C * OD * OH * OW));
    const T* xv = x.data().data();
    T* ov = out.data().data();
    for (int64_t nc = 0; nc < N * C; ++nc) {
        const T* xvol = xv + nc * D * H * W;
        T* ovol = ov + nc * OD * OH * OW;
        int64_t* avol = argmax->data() + nc * OD * OH * OW;
        for (int64_t oz = 0; oz < OD; ++oz)
            for (int64_t oy = 0; oy < OH; ++oy)
                for (int64_t ox = 0; ox < OW; ++ox) {
                    int64_t best = -1;
                    T bestv = 0;
                    for (int64_t dz = 0; dz < 2; ++dz)
                        for (int64_t dy = 0; dy < 2; ++dy)
                            for (int64_t dxx = 0; dxx < 2; ++dxx) {
                                const int64_t idx =
                                    ((2 * oz + dz) * H + 2 * oy + dy) * W + 2 * ox + dxx;
                                if (best < 0 || xvol[idx] > bestv) {
                                    bestv = xvol[idx];
                                    best = idx;
                                }
                            }
                    ovol[(oz * OH + oy) * OW + ox] = bestv;
                    avol[(oz * OH + oy) * OW + ox] = best;
                }
    }
    if (rg) {
        GraphT<T>::current()->record([xn = x.handle(), on = out.handle(), argmax, N, C, D, H, W,
                                      OD, OH, OW] {
            const T* g = on->grad.data();
            T* dx = xn->grad.data();
            const int64_t ovol = OD * OH * OW;
            for (int64_t nc = 0; nc < N * C; ++nc)
                for (int64_t i = 0; i < ovol; ++i)
                    dx[nc * D * H * W + (*argmax)[nc * ovol + i]] += g[nc * ovol + i];
        });
    }
    return out;
}

// Batch normalization over batch + spatial axes per channel.
// x [N,C,spatial...]; gamma/beta/running_mean/running_var [C].
// Train mode normalizes with batch statistics and updates the running
// buffers in place (running = momentum*running + (1-momentum)*batch).
template <typename T>
TensorT<T> batchnorm(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta,
                     TensorT<T>& running_mean, TensorT<T>& running_var, bool train,
                     T momentum = T(0.9), T eps = T(1e-5)) {
    if (x.rank() < 2) throw DimensionError("batchnorm: expected x[N,C,...]");
    const int64_t N = x.dim(0), C = x.dim(1);
    if (gamma.numel() != C || beta.numel() != C || running_mean.numel() != C ||
        running_var.numel() != C)
        throw DimensionError("batchnorm: parameter length must equal channel count " +
                             std::to_string(C));
    int64_t spatial = 1;
    for (size_t i = 2; i < x.rank(); ++i) spatial *= x.dim(i);
    const int64_t M = N * spatial;

    bool rg = detail::tracing<T>(x.requires_grad() || gamma.requires_grad() ||
                                 beta.requires_grad());
    TensorT<T> out = TensorT<T>::zeros(x.shape(), rg);
    const T* xv = x.data().data();
    T* ov = out.data().data();
    const T* gv = gamma.data().data();
    const T* btv = beta.data().data();

    auto mean_used = std::make_shared<std::vector<T>>(C);
    auto invstd_used = std::make_shared<std::vector<T>>(C);

    auto channel_at = [&](int64_t n, int64_t c, int64_t s) -> int64_t {
        return (n * C + c) * spatial + s;
    };

    parallel_for(C, [&](int64_t c0, int64_t c1) {
        for (int64_t c = c0; c < c1; ++c) {
            T mu, var;
            if (train) {
                T s = 0;
                for (int64_t n = 0; n < N; ++n)
                    for (int64_t sp = 0; sp < spatial; ++sp) s += xv[channel_at(n, c, sp)];
                mu = s / static_cast<T>(M);
                T v = 0;
                for (int64_t n = 0; n < N; ++n)
                    for (int64_t sp = 0; sp < spatial; ++sp) {
                        T d = xv[channel_at(n, c, sp)] - mu;
                        v += d * d;
                    }
                var = v / static_cast<T>(M);
            } else {
                mu = running_mean.data()[c];
                var = running_var.data()[c];
            }
            const T invstd = T(1) / std::sqrt(var + eps);
            (*mean_used)[c] = mu;
            (*invstd_used)[c] = invstd;
            for (int64_t n = 0; n < N; ++n)
                for (int64_t sp = 0; sp < spatial; ++sp) {
                    const int64_t i = channel_at(n, c, sp);
                    ov[i] = gv[c] * (xv[i] - mu) * invstd + btv[c];
                }
            if (train) {
                running_mean.data()[c] = momentum * running_mean.data()[c] + (T(1) - momentum) * mu;
                running_var.data()[c] = momentum * running_var.data()[c] + (T(1) - momentum) * var;
            }
        }
    });
    detail::debug_check_finite(out, "batchnorm");

    if (rg) {
        GraphT<T>::current()->record([xn = x.handle(), gn = gamma.handle(), bn = beta.handle(),
                                      on = out.handle(), mean_used, invstd_used, N, C, spatial,
                                      train] {
            const T* g = on->grad.data();
            const T* xv = xn->data.data();
            const int64_t M = N * spatial;
            auto at = [&](int64_t n, int64_t c, int64_t s) -> int64_t {
                return (n * C + c) * spatial + s;
            };
            parallel_for(C, [&](int64_t c0, int64_t c1) {
                for (int64_t c = c0; c < c1; ++c) {
                    const T mu = (*mean_used)[c];
                    const T invstd = (*invstd_used)[c];
                    T sum_g = 0, sum_gx = 0;
                    for (int64_t n = 0; n < N; ++n)
                        for (int64_t sp = 0; sp < spatial; ++sp) {
                            const int64_t i = at(n, c, sp);
                            sum_g += g[i];
                            sum_gx += g[i] * (xv[i] - mu) * invstd;
                        }
                    if (gn->requires_grad) gn->grad[c] += sum_gx;
                    if (bn->requires_grad) bn->grad[c] += sum_g;
                    if (xn->requires_grad) {
                        const T gamma_c = gn->data[c];
                        if (train) {
                            const T mg = sum_g / static_cast<T>(M);
                            const T mgx = sum_gx / static_cast<T>(M);
                            for (int64_t n = 0; n < N; ++n)
                                for (int64_t sp = 0; sp < spatial; ++sp) {
                                    const int64_t i = at(n, c, sp);
                                    const T xhat = (xv[i] - mu) * invstd;
                                    xn->grad[i] += gamma_c * invstd * (g[i] - mg - xhat * mgx);
                                }
                        } else {
                            for (int64_t n = 0; n < N; ++n)
                                for (int64_t sp = 0; sp < spatial; ++sp) {
                                    const int64_t i = at(n, c, sp);
                                    xn->grad[i] += gamma_c * invstd * g[i];
                                }
                        }
                    }
                }
            });
        });
    }
    return out;
}

// Nearest-neighbour upsampling by 2 in all three spatial axes. x [N,C,D,H,W].
template <typename T>
TensorT<T> upsample_nearest3d(const TensorT<T>& x) {
    if (x.rank() != 5) throw DimensionError("upsample_nearest3d: expected x[N,C,D,H,W]");
    const int64_t N = x.dim(0), C = x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4);
    const int64_t OD = 2 * D, OH = 2 * H, OW = 2 * W;
    bool rg = detail::tracing<T>(x.requires_grad());
    TensorT<T> out = TensorT<T>::zeros({N, C, OD, OH, OW}, rg);
    const T* xv = x.data().data();
    T* ov = out.data().data();
    for (int64_t nc = 0; nc < N * C; ++nc) {
        const T* xvol = xv + nc * D * H * W;
        T* ovol = ov + nc * OD * OH * OW;
        for (int64_t z = 0; z < OD; ++z)
            for (int64_t y = 0; y < OH; ++y)
                for (int64_t xx = 0; xx < OW; ++xx)
                    ovol[(z * OH + y) * OW + xx] = xvol[((z / 2) * H + y / 2) * W + xx / 2];
    }
    if (rg) {
        GraphT<T>::current()->record([xn = x.handle(), on = out.handle(), N, C, D, H, W, OD, OH,
                                      OW] {
            const T* g = on->grad.data();
            T* dx = xn->grad.data();
            for (int64_t nc = 0; nc < N * C; ++nc) {
                const T* gvol = g + nc * OD * OH * OW;
                T* dxvol = dx + nc * D * H * W;
                for (int64_t z = 0; z < D; ++z)
                    for (int64_t y = 0; y < H; ++y)
                        for (int64_t xx = 0; xx < W; ++xx) {
                            T s = 0;
                            for (int64_t dz = 0; dz < 2; ++dz)
                                for (int64_t dy = 0; dy < 2; ++dy)
                                    for (int64_t dxx = 0; dxx < 2; ++dxx)
                                        s += gvol[((2 * z + dz) * OH + 2 * y + dy) * OW + 2 * xx +
                                                  dxx];
                            dxvol[(z * H + y) * W + xx] += s;
                        }
            }
        });
    }
    return out;
}

}  // namespace refine3d
