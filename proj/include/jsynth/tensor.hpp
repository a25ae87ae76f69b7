#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "jsynth/common.hpp"

namespace jsynth {

// Dense N-d value buffer with an optional same-shape gradient buffer.
// Copying a Tensor copies the handle; values are shared. Use clone()/detach()
// for deep copies.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return full(std::move(shape), 0.0, requires_grad);
    }

    static Tensor full(Shape shape, double value, bool requires_grad = false) {
        Tensor t;
        t.d_ = std::make_shared<Data>();
        t.d_->shape = std::move(shape);
        t.d_->values.assign(static_cast<std::size_t>(shape_numel(t.d_->shape)), value);
        t.d_->requires_grad = requires_grad;
        return t;
    }

    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
        if (shape_numel(shape) != static_cast<Dim>(values.size()))
            throw ShapeError(detail::msg("tensor: shape ", shape_str(shape), " does not hold ",
                                         values.size(), " values"));
        Tensor t;
        t.d_ = std::make_shared<Data>();
        t.d_->shape = std::move(shape);
        t.d_->values = std::move(values);
        t.d_->requires_grad = requires_grad;
        return t;
    }

    static Tensor scalar(double value, bool requires_grad = false) {
        return from(Shape{}, {value}, requires_grad);
    }

    bool defined() const { return static_cast<bool>(d_); }
    const Shape& shape() const { return d_->shape; }
    int rank() const { return static_cast<int>(d_->shape.size()); }
    Dim dim(int i) const { return d_->shape[static_cast<std::size_t>(i)]; }
    Dim numel() const { return static_cast<Dim>(d_->values.size()); }

    bool requires_grad() const { return d_->requires_grad; }
    void set_requires_grad(bool rg) { d_->requires_grad = rg; }

    std::vector<double>& values() { return d_->values; }
    const std::vector<double>& values() const { return d_->values; }

    double item() const {
        if (numel() != 1)
            throw ShapeError(detail::msg("item(): tensor has ", numel(), " elements"));
        return d_->values[0];
    }

    // Gradient buffer, allocated (zeroed) on first access.
    std::vector<double>& grad() {
        if (d_->grad.size() != d_->values.size()) d_->grad.assign(d_->values.size(), 0.0);
        return d_->grad;
    }
    const std::vector<double>& grad() const {
        if (d_->grad.size() != d_->values.size())
            throw ValueError("grad(): gradient has not been populated");
        return d_->grad;
    }
    bool has_grad() const { return d_->grad.size() == d_->values.size(); }
    void zero_grad() {
        if (has_grad()) std::fill(d_->grad.begin(), d_->grad.end(), 0.0);
    }

    // Deep copy with requires_grad cleared; breaks the gradient path.
    Tensor detach() const { return from(d_->shape, d_->values, false); }

    Tensor clone() const {
        Tensor t = from(d_->shape, d_->values, d_->requires_grad);
        if (has_grad()) t.d_->grad = d_->grad;
        return t;
    }

    bool same_storage(const Tensor& other) const { return d_ == other.d_; }

    bool all_finite() const {
        for (double v : d_->values)
            if (!std::isfinite(v)) return false;
        return true;
    }

private:
    struct Data {
        Shape shape;
        std::vector<double> values;
        std::vector<double> grad;  // empty until populated
        bool requires_grad = false;
    };
    std::shared_ptr<Data> d_;
};

// Ordered record of executed differentiable operations. Backward replays the
// record in reverse, visiting each step exactly once. Gradients of op outputs
// are transient (reset per backward call); only leaf tensors -- those not
// produced by a recorded op -- accumulate across calls.
class Tape {
public:
    void record(Tensor output, std::function<void()> backward_step) {
        outputs_.push_back(std::move(output));
        steps_.push_back(std::move(backward_step));
    }

    std::size_t size() const { return steps_.size(); }

    void backward(const Tensor& loss) {
        if (!loss.defined() || loss.numel() != 1)
            throw ShapeError("backward: loss must be a defined scalar tensor");
        for (auto& out : outputs_) {
            out.grad();  // ensure allocated
            out.zero_grad();
        }
        Tensor seed = loss;
        seed.grad()[0] = 1.0;
        for (std::size_t i = steps_.size(); i-- > 0;) steps_[i]();
    }

    void clear() {
        steps_.clear();
        outputs_.clear();
    }

private:
    std::vector<std::function<void()>> steps_;
    std::vector<Tensor> outputs_;
};

namespace detail {

inline Tape*& tape_slot() {
    thread_local Tape* t = nullptr;
    return t;
}

}  // namespace detail

inline Tape* active_tape() { return detail::tape_slot(); }

// RAII activation of a tape on the current thread. Ops record themselves only
// while a tape is active; without one, forward passes build no graph.
class TapeScope {
public:
    explicit TapeScope(Tape& tape) : prev_(detail::tape_slot()) { detail::tape_slot() = &tape; }
    ~TapeScope() { detail::tape_slot() = prev_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape* prev_;
};

namespace detail {

inline bool track(const Tensor& t) { return t.requires_grad(); }

template <class... Ts>
bool any_track(const Ts&... ts) {
    return (track(ts) || ...);
}

inline void add_to_grad(Tensor t, const std::vector<double>& contribution) {
    auto& g = t.grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += contribution[i];
}

}  // namespace detail

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(detail::msg(op, ": shape mismatch ", shape_str(a.shape()), " vs ",
                                     shape_str(b.shape())));
}

// ---- elementwise / reduction ops --------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    std::vector<double> out(a.values().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
    Tape* tape = active_tape();
    Tensor result = Tensor::from(a.shape(), std::move(out),
                                 tape && detail::any_track(a, b));
    if (tape && result.requires_grad()) {
        tape->record(result, [a = a, b = b, result = result]() mutable {
            if (a.requires_grad()) detail::add_to_grad(a, result.grad());
            if (b.requires_grad()) detail::add_to_grad(b, result.grad());
        });
    }
    return result;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    std::vector<double> out(a.values().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
    Tape* tape = active_tape();
    Tensor result = Tensor::from(a.shape(), std::move(out),
                                 tape && detail::any_track(a, b));
    if (tape && result.requires_grad()) {
        tape->record(result, [a = a, b = b, result = result]() mutable {
            const auto& g = result.grad();
            if (a.requires_grad()) {
                auto& ga = a.grad();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b.values()[i];
            }
            if (b.requires_grad()) {
                auto& gb = b.grad();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a.values()[i];
            }
        });
    }
    return result;
}

inline Tensor scale(const Tensor& a, double factor) {
    std::vector<double> out(a.values().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * factor;
    Tape* tape = active_tape();
    Tensor result = Tensor::from(a.shape(), std::move(out), tape && a.requires_grad());
    if (tape && result.requires_grad()) {
        tape->record(result, [a = a, result = result, factor]() mutable {
            auto& ga = a.grad();
            const auto& g = result.grad();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
        });
    }
    return result;
}

inline Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.values()) s += v;
    Tape* tape = active_tape();
    Tensor result = Tensor::from(Shape{}, {s}, tape && a.requires_grad());
    if (tape && result.requires_grad()) {
        tape->record(result, [a = a, result = result]() mutable {
            auto& ga = a.grad();
            const double g = result.grad()[0];
            for (double& v : ga) v += g;
        });
    }
    return result;
}

inline Tensor mean(const Tensor& a) {
    if (a.numel() == 0) throw ShapeError("mean: empty tensor");
    return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

inline void check_finite(const Tensor& t, const char* where) {
    if (!t.all_finite())
        throw NumericError(detail::msg(where, ": non-finite value in tensor ",
                                       shape_str(t.shape())));
}

}  // namespace jsynth
