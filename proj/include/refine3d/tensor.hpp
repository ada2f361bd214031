#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "refine3d/errors.hpp"
#include "refine3d/rng.hpp"

namespace refine3d {

inline std::string shape_str(const std::vector<int64_t>& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << "]";
    return os.str();
}

inline int64_t shape_numel(const std::vector<int64_t>& shape) {
    int64_t n = 1;
    for (int64_t e : shape) n *= e;
    return n;
}

template <typename T>
struct TensorDataT {
    std::vector<int64_t> shape;
    std::vector<T> data;
    std::vector<T> grad;  // sized like data iff requires_grad
    bool requires_grad = false;
};

// Value-semantics handle onto a shared buffer participating in the tape.
template <typename T>
class TensorT {
public:
    TensorT() = default;

    static TensorT zeros(std::vector<int64_t> shape, bool requires_grad = false) {
        return full(std::move(shape), T(0), requires_grad);
    }

    static TensorT full(std::vector<int64_t> shape, T value, bool requires_grad = false) {
        check_shape(shape);
        auto d = std::make_shared<TensorDataT<T>>();
        d->shape = std::move(shape);
        d->data.assign(static_cast<size_t>(shape_numel(d->shape)), value);
        set_rg(*d, requires_grad);
        return TensorT(std::move(d));
    }

    static TensorT from_data(std::vector<int64_t> shape, std::vector<T> values,
                             bool requires_grad = false) {
        check_shape(shape);
        if (shape_numel(shape) != static_cast<int64_t>(values.size())) {
            throw DimensionError("tensor data length " + std::to_string(values.size()) +
                                 " does not match shape " + shape_str(shape));
        }
        auto d = std::make_shared<TensorDataT<T>>();
        d->shape = std::move(shape);
        d->data = std::move(values);
        set_rg(*d, requires_grad);
        return TensorT(std::move(d));
    }

    static TensorT scalar(T value, bool requires_grad = false) {
        return from_data({1}, {value}, requires_grad);
    }

    static TensorT randn(std::vector<int64_t> shape, Rng& rng, T stddev,
                         bool requires_grad = false) {
        TensorT t = zeros(std::move(shape), requires_grad);
        for (T& v : t.data()) v = static_cast<T>(rng.next_normal()) * stddev;
        return t;
    }

    bool defined() const { return static_cast<bool>(d_); }
    const std::vector<int64_t>& shape() const { return d_->shape; }
    int64_t numel() const { return static_cast<int64_t>(d_->data.size()); }
    int64_t dim(size_t i) const { return d_->shape[i]; }
    size_t rank() const { return d_->shape.size(); }

    std::vector<T>& data() { return d_->data; }
    const std::vector<T>& data() const { return d_->data; }

    bool requires_grad() const { return d_->requires_grad; }

    std::vector<T>& grad() {
        require_grad_buffer();
        return d_->grad;
    }
    const std::vector<T>& grad() const {
        require_grad_buffer();
        return d_->grad;
    }

    void zero_grad() {
        if (d_->requires_grad) std::fill(d_->grad.begin(), d_->grad.end(), T(0));
    }

    T item() const {
        if (numel() != 1) {
            throw DimensionError("item() requires a scalar tensor, got shape " +
                                 shape_str(d_->shape));
        }
        return d_->data[0];
    }

    TensorDataT<T>* node() const { return d_.get(); }
    const std::shared_ptr<TensorDataT<T>>& handle() const { return d_; }

private:
    explicit TensorT(std::shared_ptr<TensorDataT<T>> d) : d_(std::move(d)) {}

    static void check_shape(const std::vector<int64_t>& shape) {
        for (int64_t e : shape) {
            if (e <= 0) throw DimensionError("non-positive extent in shape " + shape_str(shape));
        }
    }

    static void set_rg(TensorDataT<T>& d, bool rg) {
        d.requires_grad = rg;
        if (rg) d.grad.assign(d.data.size(), T(0));
    }

    void require_grad_buffer() const {
        if (!d_->requires_grad) {
            throw StateError("tensor does not track gradients (requires_grad is false)");
        }
    }

    std::shared_ptr<TensorDataT<T>> d_;
};

// Define-by-run tape. One forward pass records onto one graph; backward
// replays the records in exact reverse execution order, once.
template <typename T>
class GraphT {
public:
    GraphT() : prev_(current_) { current_ = this; }
    ~GraphT() { current_ = prev_; }
    GraphT(const GraphT&) = delete;
    GraphT& operator=(const GraphT&) = delete;

    static GraphT* current() { return current_; }

    void record(std::function<void()> backward_step) {
        if (consumed_) {
            throw StateError("graph already backpropagated; run a new forward pass on a fresh graph");
        }
        steps_.push_back(std::move(backward_step));
    }

    void backward(const TensorT<T>& loss) {
        if (loss.numel() != 1) {
            throw DimensionError("backward requires a scalar loss, got shape " +
                                 shape_str(loss.shape()));
        }
        if (consumed_) {
            throw StateError("backward called twice on the same graph");
        }
        consumed_ = true;
        if (loss.requires_grad()) loss.node()->grad[0] += T(1);
        for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
    }

    size_t size() const { return steps_.size(); }
    bool consumed() const { return consumed_; }

private:
    static inline thread_local GraphT* current_ = nullptr;
    std::vector<std::function<void()>> steps_;
    GraphT* prev_ = nullptr;
    bool consumed_ = false;
};

using Tensor = TensorT<float>;
using Graph = GraphT<float>;
using Tensor64 = TensorT<double>;
using Graph64 = GraphT<double>;

template <typename T>
bool all_finite(const TensorT<T>& t) {
    for (T v : t.data()) {
        if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
}

namespace detail {

// Forward outputs of ops are scanned for NaN/Inf in debug builds.
template <typename T>
inline void debug_check_finite(const TensorT<T>& t, const char* op) {
#ifndef NDEBUG
    if (!all_finite(t)) throw NumericError(std::string(op) + " produced a non-finite value");
#else
    (void)t;
    (void)op;
#endif
}

template <typename T>
inline bool tracing(bool any_input_rg) {
    return any_input_rg && GraphT<T>::current() != nullptr;
}

}  // namespace detail

}  // namespace refine3d
