#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "refine3d/parallel.hpp"
#include "refine3d/tensor.hpp"

namespace refine3d {

namespace detail {

template <typename T>
void check_same_shape(const TensorT<T>& a, const TensorT<T>& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
    }
}

inline void check_axis(size_t rank, int axis, const char* op) {
    if (axis < 0 || static_cast<size_t>(axis) >= rank) {
        throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) +
                             " out of range for rank " + std::to_string(rank));
    }
}

inline int64_t outer_extent(const std::vector<int64_t>& shape, int axis) {
    int64_t n = 1;
    for (int i = 0; i < axis; ++i) n *= shape[i];
    return n;
}

inline int64_t inner_extent(const std::vector<int64_t>& shape, int axis) {
    int64_t n = 1;
    for (size_t i = static_cast<size_t>(axis) + 1; i < shape.size(); ++i) n *= shape[i];
    return n;
}

}  // namespace detail

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
    detail::check_same_shape(a, b, "add");
    bool rg = detail::tracing<T>(a.requires_grad() || b.requires_grad());
    TensorT<T> out = TensorT<T>::zeros(a.shape(), rg);
    const auto& av = a.data();
    const auto& bv = b.data();
    auto& ov = out.data();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
    detail::debug_check_finite(out, "add");
    if (rg) {
        GraphT<T>::current()->record([an = a.handle(), bn = b.handle(), on = out.handle()] {
            const auto& g = on->grad;
            if (an->requires_grad)
                for (size_t i = 0; i < g.size(); ++i) an->grad[i] += g[i];
            if (bn->requires_grad)
                for (size_t i = 0; i < g.size(); ++i) bn->grad[i] += g[i];
        });
    }
    return out;
}

// x[m,n] + bias[n], broadcast over rows.
template <typename T>
TensorT<T> add_bias(const TensorT<T>& x, const TensorT<T>& bias) {
    if (x.rank() != 2 || bias.rank() != 1 || x.dim(1) != bias.dim(0)) {
        throw DimensionError("add_bias: incompatible shapes " + shape_str(x.shape()) + " vs " +
                             shape_str(bias.shape()));
    }
    bool rg = detail::tracing<T>(x.requires_grad() || bias.requires_grad());
    TensorT<T> out = TensorT<T>::zeros(x.shape(), rg);
    int64_t m = x.dim(0), n = x.dim(1);
    const auto& xv = x.data();
    const auto& bv = bias.data();
    auto& ov = out.data();
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) ov[i * n + j] = xv[i * n + j] + bv[j];
    detail::debug_check_finite(out, "add_bias");
    if (rg) {
        GraphT<T>::current()->record([xn = x.handle(), bn = bias.handle(), on = out.handle(), m, n] {
            const auto& g = on->grad;
            if (xn->requires_grad)
                for (size_t i = 0; i < g.size(); ++i) xn->grad[i] += g[i];
            if (bn->requires_grad)
                for (int64_t j = 0; j < n; ++j) {
                    T s = 0;
                    for (int64_t i = 0; i < m; ++i) s += g[i * n + j];
                    bn->grad[j] += s;
                }
        });
    }
    return out;
}

template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
    detail::check_same_shape(a, b, "mul");
    bool rg = detail::tracing<T>(a.requires_grad() || b.requires_grad());
    TensorT<T> out = TensorT<T>::zeros(a.shape(), rg);
    const auto& av = a.data();
    const auto& bv = b.data();
    auto& ov = out.data();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
    detail::debug_check_finite(out, "mul");
    if (rg) {
        GraphT<T>::current()->record([an = a.handle(), bn = b.handle(), on = out.handle()] {
            const auto& g = on->grad;
            if (an->requires_grad)
                for (size_t i = 0; i < g.size(); ++i) an->grad[i] += g[i] * bn->data[i];
            if (bn->requires_grad)
                for (size_t i = 0; i < g.size(); ++i) bn->grad[i] += g[i] * an->data[i];
        });
    }
    return out;
}

template <typename T>
TensorT<T> scalar_mul(const TensorT<T>& a, T c) {
    bool rg = detail::tracing<T>(a.requires_grad());
    TensorT<T> out = TensorT<T>::zeros(a.shape(), rg);
    const auto& av = a.data();
    auto& ov = out.data();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * c;
    detail::debug_check_finite(out, "scalar_mul");
    if (rg) {
        GraphT<T>::current()->record([an = a.handle(), on = out.handle(), c] {
            const auto& g = on->grad;
            for (size_t i = 0; i < g.size(); ++i) an->grad[i] += g[i] * c;
        });
    }
    return out;
}

template <typename T>
TensorT<T> sum(const TensorT<T>& a) {
    bool rg = detail::tracing<T>(a.requires_grad());
    TensorT<T> out = TensorT<T>::zeros({1}, rg);
    T s = 0;
    for (T v : a.data()) s += v;
    out.data()[0] = s;
    detail::debug_check_finite(out, "sum");
    if (rg) {
        GraphT<T>::current()->record([an = a.handle(), on = out.handle()] {
            T g = on->grad[0];
            for (size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += g;
        });
    }
    return out;
}

template <typename T>
TensorT<T> mean(const TensorT<T>& a) {
    bool rg = detail::tracing<T>(a.requires_grad());
    TensorT<T> out = TensorT<T>::zeros({1}, rg);
    T s = 0;
    for (T v : a.data()) s += v;
    T inv = T(1) / static_cast<T>(a.numel());
    out.data()[0] = s * inv;
    detail::debug_check_finite(out, "mean");
    if (rg) {
        GraphT<T>::current()->record([an = a.handle(), on = out.handle(), inv] {
            T g = on->grad[0] * inv;
            for (size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += g;
        });
    }
    return out;
}

// Mean over one axis; the axis is removed from the shape.
template <typename T>
TensorT<T> mean_axis(const TensorT<T>& a, int axis) {
    detail::check_axis(a.rank(), axis, "mean_axis");
    int64_t outer = detail::outer_extent(a.shape(), axis);
    int64_t extent = a.dim(axis);
    int64_t inner = detail::inner_extent(a.shape(), axis);
    std::vector<int64_t> out_shape;
    for (size_t i = 0; i < a.rank(); ++i)
        if (static_cast<int>(i) != axis) out_shape.push_back(a.dim(i));
    if (out_shape.empty()) out_shape = {1};
    bool rg = detail::tracing<T>(a.requires_grad());
    TensorT<T> out = TensorT<T>::zeros(out_shape, rg);
    const auto& av = a.data();
    auto& ov = out.data();
    T inv = T(1) / static_cast<T>(extent);
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t i = 0; i < inner; ++i) {
            T s = 0;
            for (int64_t k = 0; k < extent; ++k) s += av[(o * extent + k) * inner + i];
            ov[o * inner + i] = s * inv;
        }
    detail::debug_check_finite(out, "mean_axis");
    if (rg) {
        GraphT<T>::current()->record(
            [an = a.handle(), on = out.handle(), outer, extent, inner, inv] {
                const auto& g = on->grad;
                for (int64_t o = 0; o < outer; ++o)
                    for (int64_t k = 0; k < extent; ++k)
                        for (int64_t i = 0; i < inner; ++i)
                            an->grad[(o * extent + k) * inner + i] += g[o * inner + i] * inv;
            });
    }
    return out;
}

template <typename T>
TensorT<T> reshape(const TensorT<T>& a, std::vector<int64_t> new_shape) {
    if (shape_numel(new_shape) != a.numel()) {
        throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                             shape_str(new_shape));
    }
    bool rg = detail::tracing<T>(a.requires_grad());
    TensorT<T> out = TensorT<T>::from_data(std::move(new_shape), a.data(), rg);
    if (rg) {
        GraphT<T>::current()->record([an = a.handle(), on = out.handle()] {
            const auto& g = on->grad;
            for (size_t i = 0; i < g.size(); ++i) an->grad[i] += g[i];
        });
    }
    return out;
}

template <typename T>
TensorT<T> flatten(const TensorT<T>& a) {
    return reshape(a, {a.numel()});
}

template <typename T>
TensorT<T> concat(const std::vector<TensorT<T>>& parts, int axis) {
    if (parts.empty()) throw DimensionError("concat: empty input list");
    detail::check_axis(parts[0].rank(), axis, "concat");
    std::vector<int64_t> out_shape = parts[0].shape();
    bool any_rg = false;
    int64_t axis_total = 0;
    for (const auto& p : parts) {
        if (p.rank() != parts[0].rank())
            throw DimensionError("concat: rank mismatch between inputs");
        for (size_t i = 0; i < p.rank(); ++i) {
            if (static_cast<int>(i) != axis && p.dim(i) != out_shape[i]) {
                throw DimensionError("concat: shape mismatch " + shape_str(p.shape()) + " vs " +
                                     shape_str(parts[0].shape()) + " on axis " +
                                     std::to_string(axis));
            }
        }
        axis_total += p.dim(axis);
        any_rg = any_rg || p.requires_grad();
    }
    out_shape[axis] = axis_total;
    bool rg = detail::tracing<T>(any_rg);
    TensorT<T> out = TensorT<T>::zeros(out_shape, rg);

    int64_t outer = detail::outer_extent(out_shape, axis);
    int64_t inner = detail::inner_extent(out_shape, axis);
    auto& ov = out.data();
    int64_t offset = 0;
    for (const auto& p : parts) {
        int64_t extent = p.dim(axis);
        const auto& pv = p.data();
        for (int64_t o = 0; o < outer; ++o) {
            std::copy(pv.begin() + o * extent * inner, pv.begin() + (o + 1) * extent * inner,
                      ov.begin() + (o * axis_total + offset) * inner);
        }
        offset += extent;
    }
    if (rg) {
        std::vector<std::shared_ptr<TensorDataT<T>>> handles;
        std::vector<int64_t> extents;
        for (const auto& p : parts) {
            handles.push_back(p.handle());
            extents.push_back(p.dim(axis));
        }
        GraphT<T>::current()->record(
            [handles, extents, on = out.handle(), outer, inner, axis_total] {
                const auto& g = on->grad;
                int64_t offset = 0;
                for (size_t pi = 0; pi < handles.size(); ++pi) {
                    int64_t extent = extents[pi];
                    if (handles[pi]->requires_grad) {
                        auto& pg = handles[pi]->grad;
                        for (int64_t o = 0; o < outer; ++o)
                            for (int64_t k = 0; k < extent * inner; ++k)
                                pg[o * extent * inner + k] +=
                                    g[(o * axis_total + offset) * inner + k];
                    }
                    offset += extent;
                }
            });
    }
    return out;
}

// Stacks N vectors of equal length into a [N, len] matrix.
template <typename T>
TensorT<T> stack_rows(const std::vector<TensorT<T>>& rows) {
    if (rows.empty()) throw DimensionError("stack_rows: empty input list");
    std::vector<TensorT<T>> as_rows;
    as_rows.reserve(rows.size());
    for (const auto& r : rows) as_rows.push_back(reshape(r, {int64_t{1}, r.numel()}));
    return concat(as_rows, 0);
}

template <typename T>
TensorT<T> slice(const TensorT<T>& a, int axis, int64_t start, int64_t len) {
    detail::check_axis(a.rank(), axis, "slice");
    if (start < 0 || len <= 0 || start + len > a.dim(axis)) {
        throw DimensionError("slice: range [" + std::to_string(start) + "," +
                             std::to_string(start + len) + ") out of bounds for extent " +
                             std::to_string(a.dim(axis)));
    }
    std::vector<int64_t> out_shape = a.shape();
    out_shape[axis] = len;
    bool rg = detail::tracing<T>(a.requires_grad());
    TensorT<T> out = TensorT<T>::zeros(out_shape, rg);
    int64_t outer = detail::outer_extent(a.shape(), axis);
    int64_t extent = a.dim(axis);
    int64_t inner = detail::inner_extent(a.shape(), axis);
    const auto& av = a.data();
    auto& ov = out.data();
    for (int64_t o = 0; o < outer; ++o)
        std::copy(av.begin() + (o * extent + start) * inner,
                  av.begin() + (o * extent + start + len) * inner, ov.begin() + o * len * inner);
    if (rg) {
        GraphT<T>::current()->record(
            [an = a.handle(), on = out.handle(), outer, extent, inner, start, len] {
                const auto& g = on->grad;
                for (int64_t o = 0; o < outer; ++o)
                    for (int64_t k = 0; k < len * inner; ++k)
                        an->grad[(o * extent + start) * inner + k] += g[o * len * inner + k];
            });
    }
    return out;
}

template <typename T>
TensorT<T> transpose2d(const TensorT<T>& a) {
    if (a.rank() != 2) throw DimensionError("transpose2d: expected rank 2, got " + shape_str(a.shape()));
    int64_t m = a.dim(0), n = a.dim(1);
    bool rg = detail::tracing<T>(a.requires_grad());
    TensorT<T> out = TensorT<T>::zeros({n, m}, rg);
    const auto& av = a.data();
    auto& ov = out.data();
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) ov[j * m + i] = av[i * n + j];
    if (rg) {
        GraphT<T>::current()->record([an = a.handle(), on = out.handle(), m, n] {
            const auto& g = on->grad;
            for (int64_t i = 0; i < m; ++i)
                for (int64_t j = 0; j < n; ++j) an->grad[i * n + j] += g[j * m + i];
        });
    }
    return out;
}

template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
    int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    bool rg = detail::tracing<T>(a.requires_grad() || b.requires_grad());
    TensorT<T> out = TensorT<T>::zeros({m, n}, rg);
    const T* av = a.data().data();
    const T* bv = b.data().data();
    T* ov = out.data().data();
    parallel_for(m, [&](int64_t i0, int64_t i1) {
        for (int64_t i = i0; i < i1; ++i)
            for (int64_t p = 0; p < k; ++p) {
                T aval = av[i * k + p];
                const T* brow = bv + p * n;
                T* orow = ov + i * n;
                for (int64_t j = 0; j < n; ++j) orow[j] += aval * brow[j];
            }
    });
    detail::debug_check_finite(out, "matmul");
    if (rg) {
        GraphT<T>::current()->record([an = a.handle(), bn = b.handle(), on = out.handle(), m, k, n] {
            const auto& g = on->grad;
            if (an->requires_grad) {
                // da = g . b^T
                for (int64_t i = 0; i < m; ++i)
                    for (int64_t p = 0; p < k; ++p) {
                        T s = 0;
                        for (int64_t j = 0; j < n; ++j) s += g[i * n + j] * bn->data[p * n + j];
                        an->grad[i * k + p] += s;
                    }
            }
            if (bn->requires_grad) {
                // db = a^T . g
                for (int64_t p = 0; p < k; ++p)
                    for (int64_t j = 0; j < n; ++j) {
                        T s = 0;
                        for (int64_t i = 0; i < m; ++i) s += an->data[i * k + p] * g[i * n + j];
                        bn->grad[p * n + j] += s;
                    }
            }
        });
    }
    return out;
}

template <typename T>
TensorT<T> relu(const TensorT<T>& a) {
    bool rg = detail::tracing<T>(a.requires_grad());
    TensorT<T> out = TensorT<T>::zeros(a.shape(), rg);
    const auto& av = a.data();
    auto& ov = out.data();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] > T(0) ? av[i] : T(0);
    if (rg) {
        GraphT<T>::current()->record([an = a.handle(), on = out.handle()] {
            const auto& g = on->grad;
            for (size_t i = 0; i < g.size(); ++i)
                if (an->data[i] > T(0)) an->grad[i] += g[i];
        });
    }
    return out;
}

template <typename T>
TensorT<T> leaky_relu(const TensorT<T>& a, T alpha = T(0.1)) {
    bool rg = detail::tracing<T>(a.requires_grad());
    TensorT<T> out = TensorT<T>::zeros(a.shape(), rg);
    const auto& av = a.data();
    auto& ov = out.data();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] > T(0) ? av[i] : av[i] * alpha;
    if (rg) {
        GraphT<T>::current()->record([an = a.handle(), on = out.handle(), alpha] {
            const auto& g = on->grad;
            for (size_t i = 0; i < g.size(); ++i)
                an->grad[i] += g[i] * (an->data[i] > T(0) ? T(1) : alpha);
        });
    }
    return out;
}

template <typename T>
TensorT<T> sigmoid(const TensorT<T>& a) {
    bool rg = detail::tracing<T>(a.requires_grad());
    TensorT<T> out = TensorT<T>::zeros(a.shape(), rg);
    const auto& av = a.data();
    auto& ov = out.data();
    for (size_t i = 0; i < ov.size(); ++i) {
        T x = av[i];
        if (x >= T(0)) {
            ov[i] = T(1) / (T(1) + std::exp(-x));
        } else {
            T e = std::exp(x);
            ov[i] = e / (T(1) + e);
        }
    }
    detail::debug_check_finite(out, "sigmoid");
    if (rg) {
        GraphT<T>::current()->record([an = a.handle(), on = out.handle()] {
            const auto& g = on->grad;
            for (size_t i = 0; i < g.size(); ++i) {
                T y = on->data[i];
                an->grad[i] += g[i] * y * (T(1) - y);
            }
        });
    }
    return out;
}

// Row-max is subtracted before exponentiation; rows along `axis` sum to 1.
template <typename T>
TensorT<T> softmax(const TensorT<T>& a, int axis) {
    detail::check_axis(a.rank(), axis, "softmax");
    int64_t outer = detail::outer_extent(a.shape(), axis);
    int64_t extent = a.dim(axis);
    int64_t inner = detail::inner_extent(a.shape(), axis);
    bool rg = detail::tracing<T>(a.requires_grad());
    TensorT<T> out = TensorT<T>::zeros(a.shape(), rg);
    const auto& av = a.data();
    auto& ov = out.data();
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t i = 0; i < inner; ++i) {
            auto at = [&](int64_t k) -> int64_t { return (o * extent + k) * inner + i; };
            T mx = av[at(0)];
            for (int64_t k = 1; k < extent; ++k) mx = std::max(mx, av[at(k)]);
            T denom = 0;
            for (int64_t k = 0; k < extent; ++k) {
                T e = std::exp(av[at(k)] - mx);
                ov[at(k)] = e;
                denom += e;
            }
            T inv = T(1) / denom;
            for (int64_t k = 0; k < extent; ++k) ov[at(k)] *= inv;
        }
    detail::debug_check_finite(out, "softmax");
    if (rg) {
        GraphT<T>::current()->record([an = a.handle(), on = out.handle(), outer, extent, inner] {
            const auto& g = on->grad;
            const auto& y = on->data;
            for (int64_t o = 0; o < outer; ++o)
                for (int64_t i = 0; i < inner; ++i) {
                    auto at = [&](int64_t k) -> int64_t { return (o * extent + k) * inner + i; };
                    T dot = 0;
                    for (int64_t k = 0; k < extent; ++k) dot += g[at(k)] * y[at(k)];
                    for (int64_t k = 0; k < extent; ++k)
                        an->grad[at(k)] += y[at(k)] * (g[at(k)] - dot);
                }
        });
    }
    return out;
}

}  // namespace refine3d
