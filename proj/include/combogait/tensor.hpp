// Dense row-major tensors with tape-based reverse-mode differentiation.
//
// Design notes:
//  * TensorT<S> is a cheap handle onto shared storage; operations are free
//    functions returning fresh tensors. Nothing mutates an input tensor's
//    values, so handles may be shared freely.
//  * Passing a Tape records an adjoint closure per operation. Passing
//    nullptr runs pure inference with zero bookkeeping.
//  * Gradient flow is tracked per tensor: a closure only computes input
//    gradients for tensors that participate in differentiation, so e.g.
//    the gradient w.r.t. raw input images is never materialized.
//  * Scalar type is a template parameter: float for training throughput,
//    double for finite-difference verification.

#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "combogait/common.hpp"

namespace combogait {

// ---------------------------------------------------------------------------
// Storage and handle
// ---------------------------------------------------------------------------

template <typename S>
struct TensorData {
    std::vector<int64_t> shape;
    std::vector<S> values;
    std::vector<S> grad;        // empty until gradient flow reaches this tensor
    bool track = false;         // participates in differentiation
    bool is_leaf = true;        // false for operation outputs
};

inline std::string shape_str(const std::vector<int64_t>& shape) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << ")";
    return os.str();
}

inline int64_t shape_numel(const std::vector<int64_t>& shape) {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    return n;
}

template <typename S>
class TensorT {
public:
    TensorT() : d_(std::make_shared<TensorData<S>>()) {}

    static TensorT zeros(std::vector<int64_t> shape) {
        return filled(std::move(shape), S(0));
    }

    static TensorT filled(std::vector<int64_t> shape, S value) {
        validate_shape(shape);
        TensorT t;
        t.d_->shape = std::move(shape);
        t.d_->values.assign(size_t(shape_numel(t.d_->shape)), value);
        return t;
    }

    static TensorT from_values(std::vector<int64_t> shape, std::vector<S> values) {
        validate_shape(shape);
        if (int64_t(values.size()) != shape_numel(shape)) {
            throw DimensionError("tensor: " + std::to_string(values.size()) +
                                 " values cannot fill shape " + shape_str(shape));
        }
        TensorT t;
        t.d_->shape = std::move(shape);
        t.d_->values = std::move(values);
        return t;
    }

    static TensorT scalar(S value) { return filled({1}, value); }

    // Identity matrix (n, n); used by the multiplicative fusion rule.
    static TensorT identity(int64_t n) {
        TensorT t = zeros({n, n});
        for (int64_t i = 0; i < n; ++i) t.d_->values[size_t(i * n + i)] = S(1);
        return t;
    }

    const std::vector<int64_t>& shape() const { return d_->shape; }
    int ndim() const { return int(d_->shape.size()); }
    int64_t dim(int i) const { return d_->shape[size_t(i)]; }
    int64_t numel() const { return int64_t(d_->values.size()); }

    std::vector<S>& values() { return d_->values; }
    const std::vector<S>& values() const { return d_->values; }

    S value_at(std::initializer_list<int64_t> idx) const {
        return d_->values[flat_index(idx)];
    }

    bool tracked() const { return d_->track; }
    bool is_leaf() const { return d_->is_leaf; }

    void set_requires_grad(bool on = true) {
        d_->track = on;
        if (on) ensure_grad();
    }

    bool has_grad() const { return !d_->grad.empty(); }
    std::vector<S>& grad() {
        ensure_grad();
        return d_->grad;
    }
    const std::vector<S>& grad() const {
        if (d_->grad.empty()) {
            throw ContractError("tensor: gradient requested but never populated");
        }
        return d_->grad;
    }

    void ensure_grad() {
        if (d_->grad.empty()) d_->grad.assign(d_->values.size(), S(0));
    }

    void zero_grad() {
        if (!d_->grad.empty()) std::fill(d_->grad.begin(), d_->grad.end(), S(0));
    }

    std::shared_ptr<TensorData<S>> data_ptr() const { return d_; }

    // Deep copy of values (gradient state is not copied).
    TensorT clone() const {
        TensorT t;
        t.d_->shape = d_->shape;
        t.d_->values = d_->values;
        return t;
    }

private:
    static void validate_shape(const std::vector<int64_t>& shape) {
        for (int64_t d : shape) {
            if (d <= 0) throw DimensionError("tensor: non-positive extent in " + shape_str(shape));
        }
    }

    size_t flat_index(std::initializer_list<int64_t> idx) const {
        if (int(idx.size()) != ndim()) {
            throw DimensionError("tensor: index rank mismatch for " + shape_str(d_->shape));
        }
        size_t flat = 0;
        int i = 0;
        for (int64_t v : idx) {
            flat = flat * size_t(d_->shape[size_t(i)]) + size_t(v);
            ++i;
        }
        return flat;
    }

    std::shared_ptr<TensorData<S>> d_;
};

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

// Records one adjoint closure per operation, in execution order (which is a
// topological order of the value graph). backward() replays them reversed.
template <typename S>
class Tape {
public:
    void record(std::shared_ptr<TensorData<S>> output, std::function<void()> adjoint) {
        outputs_.push_back(std::move(output));
        adjoints_.push_back(std::move(adjoint));
    }

    size_t size() const { return adjoints_.size(); }

    void clear() {
        outputs_.clear();
        adjoints_.clear();
    }

    // Zeroes interior gradients (operation outputs); leaf gradients are the
    // caller's responsibility so that accumulation across calls works.
    void reset_interior_grads() {
        for (auto& out : outputs_) {
            if (out->grad.empty()) {
                out->grad.assign(out->values.size(), S(0));
            } else {
                std::fill(out->grad.begin(), out->grad.end(), S(0));
            }
        }
    }

    void replay_reverse() {
        for (auto it = adjoints_.rbegin(); it != adjoints_.rend(); ++it) (*it)();
    }

private:
    std::vector<std::shared_ptr<TensorData<S>>> outputs_;
    std::vector<std::function<void()>> adjoints_;
};

// Seeds d(loss)/d(loss) = 1 and replays the tape in reverse. Leaf gradients
// accumulate across calls; interior gradients are reset on every call.
template <typename S>
inline void backward(TensorT<S>& loss, Tape<S>& tape) {
    if (loss.numel() != 1) {
        throw ContractError("backward: loss must be scalar, got " + shape_str(loss.shape()));
    }
    tape.reset_interior_grads();
    loss.ensure_grad();
    loss.grad()[0] = S(1);
    tape.replay_reverse();
}

// ---------------------------------------------------------------------------
// Broadcast and indexing helpers
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<int64_t> row_major_strides(const std::vector<int64_t>& shape) {
    std::vector<int64_t> strides(shape.size(), 1);
    for (int i = int(shape.size()) - 2; i >= 0; --i) {
        strides[size_t(i)] = strides[size_t(i + 1)] * shape[size_t(i + 1)];
    }
    return strides;
}

inline std::vector<int64_t> broadcast_shape(const std::vector<int64_t>& a,
                                            const std::vector<int64_t>& b,
                                            const char* op) {
    const size_t rank = std::max(a.size(), b.size());
    std::vector<int64_t> out(rank, 1);
    for (size_t i = 0; i < rank; ++i) {
        const int64_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
        const int64_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
        if (da != db && da != 1 && db != 1) {
            throw DimensionError(std::string(op) + ": shapes " + shape_str(a) + " and " +
                                 shape_str(b) + " do not broadcast");
        }
        out[i] = std::max(da, db);
    }
    return out;
}

// Element strides of `in` aligned to a broadcast result of rank `rank`;
// stretched axes get stride zero.
inline std::vector<int64_t> broadcast_strides(const std::vector<int64_t>& in_shape,
                                              const std::vector<int64_t>& out_shape) {
    const size_t rank = out_shape.size();
    std::vector<int64_t> strides(rank, 0);
    const std::vector<int64_t> in_strides = row_major_strides(in_shape);
    const size_t off = rank - in_shape.size();
    for (size_t i = 0; i < in_shape.size(); ++i) {
        strides[off + i] = in_shape[i] == 1 ? 0 : in_strides[i];
    }
    return strides;
}

// Iterates a shape in row-major order maintaining two broadcast input
// offsets. fn(out_flat, a_off, b_off).
template <typename Fn>
void zip_broadcast(const std::vector<int64_t>& out_shape,
                   const std::vector<int64_t>& sa,
                   const std::vector<int64_t>& sb,
                   Fn&& fn) {
    const int rank = int(out_shape.size());
    const int64_t n = shape_numel(out_shape);
    if (rank == 0) {
        if (n > 0) fn(0, 0, 0);
        return;
    }
    std::vector<int64_t> idx(size_t(rank), 0);
    int64_t oa = 0, ob = 0;
    for (int64_t flat = 0; flat < n; ++flat) {
        fn(flat, oa, ob);
        for (int ax = rank - 1; ax >= 0; --ax) {
            idx[size_t(ax)]++;
            oa += sa[size_t(ax)];
            ob += sb[size_t(ax)];
            if (idx[size_t(ax)] < out_shape[size_t(ax)]) break;
            oa -= sa[size_t(ax)] * out_shape[size_t(ax)];
            ob -= sb[size_t(ax)] * out_shape[size_t(ax)];
            idx[size_t(ax)] = 0;
        }
    }
}

// Splits a shape around `axis` into (outer, extent, inner) loop bounds.
struct AxisSplit {
    int64_t outer = 1;
    int64_t extent = 1;
    int64_t inner = 1;
};

inline AxisSplit split_axis(const std::vector<int64_t>& shape, int axis) {
    AxisSplit s;
    for (int i = 0; i < axis; ++i) s.outer *= shape[size_t(i)];
    s.extent = shape[size_t(axis)];
    for (size_t i = size_t(axis) + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

inline void check_axis(const std::vector<int64_t>& shape, int axis, const char* op) {
    if (axis < 0 || axis >= int(shape.size())) {
        throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) +
                             " out of range for " + shape_str(shape));
    }
}

template <typename S>
using EigenRowMat =
    Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

}  // namespace detail

// Marks `out` as an operation output and records `adjoint` when any input
// participates in differentiation. Inputs that participate get gradient
// storage allocated up front so the closure can accumulate into it.
template <typename S, typename Adjoint>
inline void record_op(Tape<S>* tape, TensorT<S>& out,
                      std::initializer_list<TensorT<S>> inputs, Adjoint&& adjoint) {
    if (!tape) return;
    bool any = false;
    for (const auto& in : inputs) any = any || in.tracked();
    if (!any) return;
    for (auto in : inputs) {
        if (in.tracked()) in.ensure_grad();
    }
    out.data_ptr()->track = true;
    out.data_ptr()->is_leaf = false;
    out.ensure_grad();
    tape->record(out.data_ptr(), std::forward<Adjoint>(adjoint));
}

// ---------------------------------------------------------------------------
// Elementwise binary operations (numpy-style broadcast)
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> add(Tape<S>* tape, const TensorT<S>& a, const TensorT<S>& b) {
    const auto out_shape = detail::broadcast_shape(a.shape(), b.shape(), "add");
    TensorT<S> out = TensorT<S>::zeros(out_shape);
    const auto sa = detail::broadcast_strides(a.shape(), out_shape);
    const auto sb = detail::broadcast_strides(b.shape(), out_shape);
    {
        const S* av = a.values().data();
        const S* bv = b.values().data();
        S* ov = out.values().data();
        if (a.shape() == b.shape()) {
            const int64_t n = out.numel();
            for (int64_t i = 0; i < n; ++i) ov[i] = av[i] + bv[i];
        } else {
            detail::zip_broadcast(out_shape, sa, sb, [&](int64_t o, int64_t ia, int64_t ib) {
                ov[o] = av[ia] + bv[ib];
            });
        }
    }
    auto ad = a.data_ptr();
    auto bd = b.data_ptr();
    auto od = out.data_ptr();
    record_op(tape, out, {a, b}, [ad, bd, od, out_shape, sa, sb]() {
        const S* g = od->grad.data();
        S* ga = ad->grad.empty() ? nullptr : ad->grad.data();
        S* gb = bd->grad.empty() ? nullptr : bd->grad.data();
        if (ad->shape == bd->shape) {
            const int64_t n = int64_t(od->values.size());
            if (ga)
                for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
            if (gb)
                for (int64_t i = 0; i < n; ++i) gb[i] += g[i];
        } else {
            detail::zip_broadcast(out_shape, sa, sb, [&](int64_t o, int64_t ia, int64_t ib) {
                if (ga) ga[ia] += g[o];
                if (gb) gb[ib] += g[o];
            });
        }
    });
    return out;
}

template <typename S>
TensorT<S> mul(Tape<S>* tape, const TensorT<S>& a, const TensorT<S>& b) {
    const auto out_shape = detail::broadcast_shape(a.shape(), b.shape(), "mul");
    TensorT<S> out = TensorT<S>::zeros(out_shape);
    const auto sa = detail::broadcast_strides(a.shape(), out_shape);
    const auto sb = detail::broadcast_strides(b.shape(), out_shape);
    {
        const S* av = a.values().data();
        const S* bv = b.values().data();
        S* ov = out.values().data();
        if (a.shape() == b.shape()) {
            const int64_t n = out.numel();
            for (int64_t i = 0; i < n; ++i) ov[i] = av[i] * bv[i];
        } else {
            detail::zip_broadcast(out_shape, sa, sb, [&](int64_t o, int64_t ia, int64_t ib) {
                ov[o] = av[ia] * bv[ib];
            });
        }
    }
    auto ad = a.data_ptr();
    auto bd = b.data_ptr();
    auto od = out.data_ptr();
    record_op(tape, out, {a, b}, [ad, bd, od, out_shape, sa, sb]() {
        const S* g = od->grad.data();
        const S* av = ad->values.data();
        const S* bv = bd->values.data();
        S* ga = ad->grad.empty() ? nullptr : ad->grad.data();
        S* gb = bd->grad.empty() ? nullptr : bd->grad.data();
        detail::zip_broadcast(out_shape, sa, sb, [&](int64_t o, int64_t ia, int64_t ib) {
            if (ga) ga[ia] += g[o] * bv[ib];
            if (gb) gb[ib] += g[o] * av[ia];
        });
    });
    return out;
}

template <typename S>
TensorT<S> divide(Tape<S>* tape, const TensorT<S>& a, const TensorT<S>& b) {
    const auto out_shape = detail::broadcast_shape(a.shape(), b.shape(), "divide");
    TensorT<S> out = TensorT<S>::zeros(out_shape);
    const auto sa = detail::broadcast_strides(a.shape(), out_shape);
    const auto sb = detail::broadcast_strides(b.shape(), out_shape);
    {
        const S* av = a.values().data();
        const S* bv = b.values().data();
        S* ov = out.values().data();
        detail::zip_broadcast(out_shape, sa, sb, [&](int64_t o, int64_t ia, int64_t ib) {
            ov[o] = av[ia] / bv[ib];
        });
    }
    auto ad = a.data_ptr();
    auto bd = b.data_ptr();
    auto od = out.data_ptr();
    record_op(tape, out, {a, b}, [ad, bd, od, out_shape, sa, sb]() {
        const S* g = od->grad.data();
        const S* av = ad->values.data();
        const S* bv = bd->values.data();
        S* ga = ad->grad.empty() ? nullptr : ad->grad.data();
        S* gb = bd->grad.empty() ? nullptr : bd->grad.data();
        detail::zip_broadcast(out_shape, sa, sb, [&](int64_t o, int64_t ia, int64_t ib) {
            if (g[o] == S(0)) return;
            const S inv = S(1) / bv[ib];
            if (ga) ga[ia] += g[o] * inv;
            if (gb) gb[ib] -= g[o] * av[ia] * inv * inv;
        });
    });
    return out;
}

template <typename S>
TensorT<S> sub(Tape<S>* tape, const TensorT<S>& a, const TensorT<S>& b);

// ---------------------------------------------------------------------------
// Elementwise unary operations
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> scale(Tape<S>* tape, const TensorT<S>& a, S k) {
    TensorT<S> out = TensorT<S>::zeros(a.shape());
    const int64_t n = a.numel();
    const S* av = a.values().data();
    S* ov = out.values().data();
    for (int64_t i = 0; i < n; ++i) ov[i] = av[i] * k;
    auto ad = a.data_ptr();
    auto od = out.data_ptr();
    record_op(tape, out, {a}, [ad, od, k]() {
        const S* g = od->grad.data();
        S* ga = ad->grad.data();
        const int64_t n = int64_t(od->values.size());
        for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * k;
    });
    return out;
}

template <typename S>
TensorT<S> add_const(Tape<S>* tape, const TensorT<S>& a, S c) {
    TensorT<S> out = TensorT<S>::zeros(a.shape());
    const int64_t n = a.numel();
    const S* av = a.values().data();
    S* ov = out.values().data();
    for (int64_t i = 0; i < n; ++i) ov[i] = av[i] + c;
    auto ad = a.data_ptr();
    auto od = out.data_ptr();
    record_op(tape, out, {a}, [ad, od]() {
        const S* g = od->grad.data();
        S* ga = ad->grad.data();
        const int64_t n = int64_t(od->values.size());
        for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
    });
    return out;
}

template <typename S>
TensorT<S> sub(Tape<S>* tape, const TensorT<S>& a, const TensorT<S>& b) {
    return add(tape, a, scale(tape, b, S(-1)));
}

template <typename S>
TensorT<S> relu(Tape<S>* tape, const TensorT<S>& a) {
    TensorT<S> out = TensorT<S>::zeros(a.shape());
    const int64_t n = a.numel();
    const S* av = a.values().data();
    S* ov = out.values().data();
    for (int64_t i = 0; i < n; ++i) ov[i] = av[i] > S(0) ? av[i] : S(0);
    auto ad = a.data_ptr();
    auto od = out.data_ptr();
    record_op(tape, out, {a}, [ad, od]() {
        const S* g = od->grad.data();
        const S* av = ad->values.data();
        S* ga = ad->grad.data();
        const int64_t n = int64_t(od->values.size());
        for (int64_t i = 0; i < n; ++i) {
            if (av[i] > S(0)) ga[i] += g[i];
        }
    });
    return out;
}

// Elementwise square root. Inputs must be non-negative; the derivative is
// only propagated where the upstream gradient is non-zero, so exact zeros
// with zero upstream gradient (e.g. a distance of a point to itself) are
// safe.
template <typename S>
TensorT<S> sqrt_elem(Tape<S>* tape, const TensorT<S>& a) {
    TensorT<S> out = TensorT<S>::zeros(a.shape());
    const int64_t n = a.numel();
    const S* av = a.values().data();
    S* ov = out.values().data();
    for (int64_t i = 0; i < n; ++i) {
        if (av[i] < S(0)) {
            throw ValidationError("sqrt: negative input " + std::to_string(double(av[i])));
        }
        ov[i] = std::sqrt(av[i]);
    }
    auto ad = a.data_ptr();
    auto od = out.data_ptr();
    record_op(tape, out, {a}, [ad, od]() {
        const S* g = od->grad.data();
        const S* yv = od->values.data();
        S* ga = ad->grad.data();
        const int64_t n = int64_t(od->values.size());
        for (int64_t i = 0; i < n; ++i) {
            if (g[i] != S(0)) ga[i] += g[i] * S(0.5) / yv[i];
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> reshape(Tape<S>* tape, const TensorT<S>& a, std::vector<int64_t> new_shape) {
    if (shape_numel(new_shape) != a.numel()) {
        throw ContractError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                            shape_str(new_shape));
    }
    TensorT<S> out = TensorT<S>::from_values(std::move(new_shape), a.values());
    auto ad = a.data_ptr();
    auto od = out.data_ptr();
    record_op(tape, out, {a}, [ad, od]() {
        const S* g = od->grad.data();
        S* ga = ad->grad.data();
        const int64_t n = int64_t(od->values.size());
        for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
    });
    return out;
}

template <typename S>
TensorT<S> permute(Tape<S>* tape, const TensorT<S>& a, std::vector<int> perm) {
    const int rank = a.ndim();
    if (int(perm.size()) != rank) {
        throw ContractError("permute: permutation rank " + std::to_string(perm.size()) +
                            " does not match tensor rank " + std::to_string(rank));
    }
    std::vector<bool> seen(size_t(rank), false);
    for (int p : perm) {
        if (p < 0 || p >= rank || seen[size_t(p)]) {
            throw ContractError("permute: invalid permutation for rank " + std::to_string(rank));
        }
        seen[size_t(p)] = true;
    }
    std::vector<int64_t> out_shape(static_cast<size_t>(rank));
    for (int i = 0; i < rank; ++i) out_shape[size_t(i)] = a.dim(perm[size_t(i)]);

    TensorT<S> out = TensorT<S>::zeros(out_shape);
    const auto in_strides = detail::row_major_strides(a.shape());
    // Walk the output row-major while tracking the input offset.
    std::vector<int64_t> strides(static_cast<size_t>(rank));
    for (int i = 0; i < rank; ++i) strides[size_t(i)] = in_strides[size_t(perm[size_t(i)])];

    const S* av = a.values().data();
    S* ov = out.values().data();
    const int64_t n = a.numel();
    if (n > 0) {
        std::vector<int64_t> idx(size_t(rank), 0);
        int64_t src = 0;
        for (int64_t flat = 0; flat < n; ++flat) {
            ov[flat] = av[src];
            for (int ax = rank - 1; ax >= 0; --ax) {
                idx[size_t(ax)]++;
                src += strides[size_t(ax)];
                if (idx[size_t(ax)] < out_shape[size_t(ax)]) break;
                src -= strides[size_t(ax)] * out_shape[size_t(ax)];
                idx[size_t(ax)] = 0;
            }
        }
    }
    auto ad = a.data_ptr();
    auto od = out.data_ptr();
    record_op(tape, out, {a}, [ad, od, out_shape, strides, rank]() {
        const S* g = od->grad.data();
        S* ga = ad->grad.data();
        const int64_t n = int64_t(od->values.size());
        if (n == 0) return;
        std::vector<int64_t> idx(size_t(rank), 0);
        int64_t src = 0;
        for (int64_t flat = 0; flat < n; ++flat) {
            ga[src] += g[flat];
            for (int ax = rank - 1; ax >= 0; --ax) {
                idx[size_t(ax)]++;
                src += strides[size_t(ax)];
                if (idx[size_t(ax)] < out_shape[size_t(ax)]) break;
                src -= strides[size_t(ax)] * out_shape[size_t(ax)];
                idx[size_t(ax)] = 0;
            }
        }
    });
    return out;
}

// Zero-pads the last two axes at the bottom/right.
template <typename S>
TensorT<S> pad_bottom_right(Tape<S>* tape, const TensorT<S>& a, int64_t add_rows,
                            int64_t add_cols) {
    if (a.ndim() < 2) {
        throw DimensionError("pad: input must have at least 2 axes, got " +
                             shape_str(a.shape()));
    }
    if (add_rows < 0 || add_cols < 0) {
        throw ContractError("pad: negative padding");
    }
    const int rank = a.ndim();
    const int64_t h = a.dim(rank - 2);
    const int64_t w = a.dim(rank - 1);
    const int64_t oh = h + add_rows;
    const int64_t ow = w + add_cols;
    std::vector<int64_t> out_shape = a.shape();
    out_shape[size_t(rank - 2)] = oh;
    out_shape[size_t(rank - 1)] = ow;
    TensorT<S> out = TensorT<S>::zeros(out_shape);
    const int64_t planes = a.numel() / (h * w);
    const S* av = a.values().data();
    S* ov = out.values().data();
    for (int64_t p = 0; p < planes; ++p) {
        for (int64_t r = 0; r < h; ++r) {
            std::memcpy(ov + (p * oh + r) * ow, av + (p * h + r) * w, size_t(w) * sizeof(S));
        }
    }
    auto ad = a.data_ptr();
    auto od = out.data_ptr();
    record_op(tape, out, {a}, [ad, od, planes, h, w, oh, ow]() {
        const S* g = od->grad.data();
        S* ga = ad->grad.data();
        for (int64_t p = 0; p < planes; ++p) {
            for (int64_t r = 0; r < h; ++r) {
                const S* gr = g + (p * oh + r) * ow;
                S* gar = ga + (p * h + r) * w;
                for (int64_t c = 0; c < w; ++c) gar[c] += gr[c];
            }
        }
    });
    return out;
}

// Repeats an axis of extent 1 to extent n.
template <typename S>
TensorT<S> broadcast_axis(Tape<S>* tape, const TensorT<S>& a, int axis, int64_t n) {
    detail::check_axis(a.shape(), axis, "broadcast_axis");
    if (a.dim(axis) != 1) {
        throw DimensionError("broadcast_axis: axis " + std::to_string(axis) +
                             " of " + shape_str(a.shape()) + " must have extent 1");
    }
    if (n < 1) throw ContractError("broadcast_axis: target extent must be positive");
    std::vector<int64_t> out_shape = a.shape();
    out_shape[size_t(axis)] = n;
    TensorT<S> out = TensorT<S>::zeros(out_shape);
    const auto split = detail::split_axis(out_shape, axis);
    const S* av = a.values().data();
    S* ov = out.values().data();
    for (int64_t o = 0; o < split.outer; ++o) {
        const S* src = av + o * split.inner;
        for (int64_t j = 0; j < split.extent; ++j) {
            std::memcpy(ov + (o * split.extent + j) * split.inner, src,
                        size_t(split.inner) * sizeof(S));
        }
    }
    auto ad = a.data_ptr();
    auto od = out.data_ptr();
    record_op(tape, out, {a}, [ad, od, split]() {
        const S* g = od->grad.data();
        S* ga = ad->grad.data();
        for (int64_t o = 0; o < split.outer; ++o) {
            S* dst = ga + o * split.inner;
            for (int64_t j = 0; j < split.extent; ++j) {
                const S* src = g + (o * split.extent + j) * split.inner;
                for (int64_t i = 0; i < split.inner; ++i) dst[i] += src[i];
            }
        }
    });
    return out;
}

// Extracts the sub-tensor at `index` along `axis`, dropping that axis.
template <typename S>
TensorT<S> select_index(Tape<S>* tape, const TensorT<S>& a, int axis, int64_t index) {
    detail::check_axis(a.shape(), axis, "select_index");
    if (index < 0 || index >= a.dim(axis)) {
        throw DimensionError("select_index: index " + std::to_string(index) +
                             " out of range for axis of extent " + std::to_string(a.dim(axis)));
    }
    std::vector<int64_t> out_shape = a.shape();
    out_shape.erase(out_shape.begin() + axis);
    const auto split = detail::split_axis(a.shape(), axis);
    TensorT<S> out = TensorT<S>::zeros(out_shape);
    const S* av = a.values().data();
    S* ov = out.values().data();
    for (int64_t o = 0; o < split.outer; ++o) {
        std::memcpy(ov + o * split.inner, av + (o * split.extent + index) * split.inner,
                    size_t(split.inner) * sizeof(S));
    }
    auto ad = a.data_ptr();
    auto od = out.data_ptr();
    record_op(tape, out, {a}, [ad, od, split, index]() {
        const S* g = od->grad.data();
        S* ga = ad->grad.data();
        for (int64_t o = 0; o < split.outer; ++o) {
            S* dst = ga + (o * split.extent + index) * split.inner;
            const S* src = g + o * split.inner;
            for (int64_t i = 0; i < split.inner; ++i) dst[i] += src[i];
        }
    });
    return out;
}

// Gathers flat indices into a 1-D tensor; the adjoint scatter-adds.
template <typename S>
TensorT<S> take(Tape<S>* tape, const TensorT<S>& a, std::vector<int64_t> indices) {
    const int64_t n = a.numel();
    for (int64_t idx : indices) {
        if (idx < 0 || idx >= n) {
            throw ContractError("take: flat index " + std::to_string(idx) +
                                " out of range for " + std::to_string(n) + " elements");
        }
    }
    TensorT<S> out = TensorT<S>::zeros({int64_t(indices.size())});
    const S* av = a.values().data();
    S* ov = out.values().data();
    for (size_t i = 0; i < indices.size(); ++i) ov[i] = av[indices[i]];
    auto ad = a.data_ptr();
    auto od = out.data_ptr();
    record_op(tape, out, {a}, [ad, od, indices = std::move(indices)]() {
        const S* g = od->grad.data();
        S* ga = ad->grad.data();
        for (size_t i = 0; i < indices.size(); ++i) ga[indices[i]] += g[i];
    });
    return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> sum_all(Tape<S>* tape, const TensorT<S>& a) {
    S total = S(0);
    for (S v : a.values()) total += v;
    TensorT<S> out = TensorT<S>::scalar(total);
    auto ad = a.data_ptr();
    auto od = out.data_ptr();
    record_op(tape, out, {a}, [ad, od]() {
        const S g = od->grad[0];
        S* ga = ad->grad.data();
        const int64_t n = int64_t(ad->values.size());
        for (int64_t i = 0; i < n; ++i) ga[i] += g;
    });
    return out;
}

template <typename S>
TensorT<S> mean_all(Tape<S>* tape, const TensorT<S>& a) {
    if (a.numel() == 0) throw DimensionError("mean: empty tensor");
    return scale(tape, sum_all(tape, a), S(1) / S(a.numel()));
}

template <typename S>
TensorT<S> sum_axis(Tape<S>* tape, const TensorT<S>& a, int axis, bool keepdim = false) {
    detail::check_axis(a.shape(), axis, "sum_axis");
    const auto split = detail::split_axis(a.shape(), axis);
    std::vector<int64_t> out_shape = a.shape();
    if (keepdim) {
        out_shape[size_t(axis)] = 1;
    } else {
        out_shape.erase(out_shape.begin() + axis);
    }
    TensorT<S> out = TensorT<S>::zeros(out_shape);
    const S* av = a.values().data();
    S* ov = out.values().data();
    for (int64_t o = 0; o < split.outer; ++o) {
        for (int64_t j = 0; j < split.extent; ++j) {
            const S* src = av + (o * split.extent + j) * split.inner;
            S* dst = ov + o * split.inner;
            for (int64_t i = 0; i < split.inner; ++i) dst[i] += src[i];
        }
    }
    auto ad = a.data_ptr();
    auto od = out.data_ptr();
    record_op(tape, out, {a}, [ad, od, split]() {
        const S* g = od->grad.data();
        S* ga = ad->grad.data();
        for (int64_t o = 0; o < split.outer; ++o) {
            const S* src = g + o * split.inner;
            for (int64_t j = 0; j < split.extent; ++j) {
                S* dst = ga + (o * split.extent + j) * split.inner;
                for (int64_t i = 0; i < split.inner; ++i) dst[i] += src[i];
            }
        }
    });
    return out;
}

template <typename S>
TensorT<S> mean_axis(Tape<S>* tape, const TensorT<S>& a, int axis, bool keepdim = false) {
    detail::check_axis(a.shape(), axis, "mean_axis");
    return scale(tape, sum_axis(tape, a, axis, keepdim), S(1) / S(a.dim(axis)));
}

// Maximum along an axis; ties resolve to the first (lowest-index) maximum,
// which also receives the full gradient.
template <typename S>
TensorT<S> max_axis(Tape<S>* tape, const TensorT<S>& a, int axis, bool keepdim = false) {
    detail::check_axis(a.shape(), axis, "max_axis");
    const auto split = detail::split_axis(a.shape(), axis);
    if (split.extent == 0) throw DataError("max_axis: reduction over empty axis");
    std::vector<int64_t> out_shape = a.shape();
    if (keepdim) {
        out_shape[size_t(axis)] = 1;
    } else {
        out_shape.erase(out_shape.begin() + axis);
    }
    TensorT<S> out = TensorT<S>::zeros(out_shape);
    std::vector<int32_t> argmax(size_t(split.outer * split.inner), 0);
    const S* av = a.values().data();
    S* ov = out.values().data();
    for (int64_t o = 0; o < split.outer; ++o) {
        for (int64_t i = 0; i < split.inner; ++i) {
            S best = av[(o * split.extent) * split.inner + i];
            int32_t best_j = 0;
            for (int64_t j = 1; j < split.extent; ++j) {
                const S v = av[(o * split.extent + j) * split.inner + i];
                if (v > best) {
                    best = v;
                    best_j = int32_t(j);
                }
            }
            ov[o * split.inner + i] = best;
            argmax[size_t(o * split.inner + i)] = best_j;
        }
    }
    auto ad = a.data_ptr();
    auto od = out.data_ptr();
    record_op(tape, out, {a}, [ad, od, split, argmax = std::move(argmax)]() {
        const S* g = od->grad.data();
        S* ga = ad->grad.data();
        for (int64_t o = 0; o < split.outer; ++o) {
            for (int64_t i = 0; i < split.inner; ++i) {
                const int64_t j = argmax[size_t(o * split.inner + i)];
                ga[(o * split.extent + j) * split.inner + i] += g[o * split.inner + i];
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Softmax family (last axis, max-subtracted for stability)
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> softmax(Tape<S>* tape, const TensorT<S>& a) {
    if (a.ndim() < 1) throw DimensionError("softmax: rank-0 input");
    const int64_t cols = a.dim(a.ndim() - 1);
    const int64_t rows = a.numel() / cols;
    TensorT<S> out = TensorT<S>::zeros(a.shape());
    const S* av = a.values().data();
    S* ov = out.values().data();
    for (int64_t r = 0; r < rows; ++r) {
        const S* x = av + r * cols;
        S* y = ov + r * cols;
        S m = x[0];
        for (int64_t c = 1; c < cols; ++c) m = std::max(m, x[c]);
        S sum = S(0);
        for (int64_t c = 0; c < cols; ++c) {
            y[c] = std::exp(x[c] - m);
            sum += y[c];
        }
        const S inv = S(1) / sum;
        for (int64_t c = 0; c < cols; ++c) y[c] *= inv;
    }
    auto ad = a.data_ptr();
    auto od = out.data_ptr();
    record_op(tape, out, {a}, [ad, od, rows, cols]() {
        const S* g = od->grad.data();
        const S* y = od->values.data();
        S* ga = ad->grad.data();
        for (int64_t r = 0; r < rows; ++r) {
            const S* gr = g + r * cols;
            const S* yr = y + r * cols;
            S* gar = ga + r * cols;
            S dot = S(0);
            for (int64_t c = 0; c < cols; ++c) dot += gr[c] * yr[c];
            for (int64_t c = 0; c < cols; ++c) gar[c] += yr[c] * (gr[c] - dot);
        }
    });
    return out;
}

template <typename S>
TensorT<S> log_softmax(Tape<S>* tape, const TensorT<S>& a) {
    if (a.ndim() < 1) throw DimensionError("log_softmax: rank-0 input");
    const int64_t cols = a.dim(a.ndim() - 1);
    const int64_t rows = a.numel() / cols;
    TensorT<S> out = TensorT<S>::zeros(a.shape());
    const S* av = a.values().data();
    S* ov = out.values().data();
    for (int64_t r = 0; r < rows; ++r) {
        const S* x = av + r * cols;
        S* y = ov + r * cols;
        S m = x[0];
        for (int64_t c = 1; c < cols; ++c) m = std::max(m, x[c]);
        S sum = S(0);
        for (int64_t c = 0; c < cols; ++c) sum += std::exp(x[c] - m);
        const S lse = m + std::log(sum);
        for (int64_t c = 0; c < cols; ++c) y[c] = x[c] - lse;
    }
    auto ad = a.data_ptr();
    auto od = out.data_ptr();
    record_op(tape, out, {a}, [ad, od, rows, cols]() {
        const S* g = od->grad.data();
        const S* y = od->values.data();
        S* ga = ad->grad.data();
        for (int64_t r = 0; r < rows; ++r) {
            const S* gr = g + r * cols;
            const S* yr = y + r * cols;
            S* gar = ga + r * cols;
            S gsum = S(0);
            for (int64_t c = 0; c < cols; ++c) gsum += gr[c];
            for (int64_t c = 0; c < cols; ++c) gar[c] += gr[c] - std::exp(yr[c]) * gsum;
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Matrix multiplication (batched, broadcast batch dimensions; Eigen GEMM)
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> matmul(Tape<S>* tape, const TensorT<S>& a, const TensorT<S>& b) {
    if (a.ndim() < 2 || b.ndim() < 2) {
        throw DimensionError("matmul: operands must have rank >= 2, got " +
                             shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    const int64_t m = a.dim(a.ndim() - 2);
    const int64_t k = a.dim(a.ndim() - 1);
    const int64_t k2 = b.dim(b.ndim() - 2);
    const int64_t n = b.dim(b.ndim() - 1);
    if (k != k2) {
        throw DimensionError("matmul: inner dimensions disagree: " + shape_str(a.shape()) +
                             " x " + shape_str(b.shape()));
    }
    const std::vector<int64_t> batch_a(a.shape().begin(), a.shape().end() - 2);
    const std::vector<int64_t> batch_b(b.shape().begin(), b.shape().end() - 2);
    const auto batch = detail::broadcast_shape(batch_a, batch_b, "matmul");

    // Per-batch-axis strides in units of matrix slices.
    auto slice_strides = [](const std::vector<int64_t>& in_batch,
                            const std::vector<int64_t>& out_batch) {
        return detail::broadcast_strides(in_batch, out_batch);
    };
    const auto sa = slice_strides(batch_a, batch);
    const auto sb = slice_strides(batch_b, batch);

    std::vector<int64_t> out_shape = batch;
    out_shape.push_back(m);
    out_shape.push_back(n);
    TensorT<S> out = TensorT<S>::zeros(out_shape);

    using Mat = detail::EigenRowMat<S>;
    const int64_t a_slice = m * k, b_slice = k * n, o_slice = m * n;
    {
        const S* av = a.values().data();
        const S* bv = b.values().data();
        S* ov = out.values().data();
        detail::zip_broadcast(batch, sa, sb, [&](int64_t o, int64_t ia, int64_t ib) {
            Eigen::Map<const Mat> A(av + ia * a_slice, m, k);
            Eigen::Map<const Mat> B(bv + ib * b_slice, k, n);
            Eigen::Map<Mat> O(ov + o * o_slice, m, n);
            O.noalias() = A * B;
        });
    }
    auto ad = a.data_ptr();
    auto bd = b.data_ptr();
    auto od = out.data_ptr();
    record_op(tape, out, {a, b},
              [ad, bd, od, batch, sa, sb, m, n, k, a_slice, b_slice, o_slice]() {
        const S* g = od->grad.data();
        const S* av = ad->values.data();
        const S* bv = bd->values.data();
        S* ga = ad->grad.empty() ? nullptr : ad->grad.data();
        S* gb = bd->grad.empty() ? nullptr : bd->grad.data();
        detail::zip_broadcast(batch, sa, sb, [&](int64_t o, int64_t ia, int64_t ib) {
            Eigen::Map<const Mat> G(g + o * o_slice, m, n);
            if (ga) {
                Eigen::Map<const Mat> B(bv + ib * b_slice, k, n);
                Eigen::Map<Mat> GA(ga + ia * a_slice, m, k);
                GA.noalias() += G * B.transpose();
            }
            if (gb) {
                Eigen::Map<const Mat> A(av + ia * a_slice, m, k);
                Eigen::Map<Mat> GB(gb + ib * b_slice, k, n);
                GB.noalias() += A.transpose() * G;
            }
        });
    });
    return out;
}

// ---------------------------------------------------------------------------
// 2-D convolution (cross-correlation) and pooling
// ---------------------------------------------------------------------------

namespace detail {

// Unpacks conv patches of one image into col (rows = oh*ow, cols = cin*kh*kw).
template <typename S>
void im2col(const S* img, int64_t cin, int64_t h, int64_t w, int64_t kh, int64_t kw,
            int64_t stride, int64_t pad, int64_t oh, int64_t ow, S* col) {
    for (int64_t oy = 0; oy < oh; ++oy) {
        for (int64_t ox = 0; ox < ow; ++ox) {
            S* row = col + (oy * ow + ox) * (cin * kh * kw);
            for (int64_t c = 0; c < cin; ++c) {
                for (int64_t ky = 0; ky < kh; ++ky) {
                    const int64_t iy = oy * stride - pad + ky;
                    for (int64_t kx = 0; kx < kw; ++kx) {
                        const int64_t ix = ox * stride - pad + kx;
                        const bool inside = iy >= 0 && iy < h && ix >= 0 && ix < w;
                        row[(c * kh + ky) * kw + kx] =
                            inside ? img[(c * h + iy) * w + ix] : S(0);
                    }
                }
            }
        }
    }
}

// Scatter-adds col-layout gradients back into an image gradient.
template <typename S>
void col2im_add(const S* col, int64_t cin, int64_t h, int64_t w, int64_t kh, int64_t kw,
                int64_t stride, int64_t pad, int64_t oh, int64_t ow, S* img_grad) {
    for (int64_t oy = 0; oy < oh; ++oy) {
        for (int64_t ox = 0; ox < ow; ++ox) {
            const S* row = col + (oy * ow + ox) * (cin * kh * kw);
            for (int64_t c = 0; c < cin; ++c) {
                for (int64_t ky = 0; ky < kh; ++ky) {
                    const int64_t iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= h) continue;
                    for (int64_t kx = 0; kx < kw; ++kx) {
                        const int64_t ix = ox * stride - pad + kx;
                        if (ix < 0 || ix >= w) continue;
                        img_grad[(c * h + iy) * w + ix] += row[(c * kh + ky) * kw + kx];
                    }
                }
            }
        }
    }
}

}  // namespace detail

// x: (B, Cin, H, W), kernel: (Cout, Cin, kh, kw), bias: (Cout) or empty
// tensor for no bias. Output: (B, Cout, OH, OW).
template <typename S>
TensorT<S> conv2d(Tape<S>* tape, const TensorT<S>& x, const TensorT<S>& kernel,
                  const TensorT<S>& bias, int64_t stride, int64_t pad) {
    if (x.ndim() != 4 || kernel.ndim() != 4) {
        throw DimensionError("conv2d: need 4-D input and kernel, got " +
                             shape_str(x.shape()) + " and " + shape_str(kernel.shape()));
    }
    const int64_t bsz = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
    const int64_t cout = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
    if (kernel.dim(1) != cin) {
        throw DimensionError("conv2d: kernel expects " + std::to_string(kernel.dim(1)) +
                             " input channels, image has " + std::to_string(cin));
    }
    if (stride < 1) throw ContractError("conv2d: stride must be >= 1");
    if (pad < 0) throw ContractError("conv2d: negative padding");
    const int64_t oh = (h + 2 * pad - kh) / stride + 1;
    const int64_t ow = (w + 2 * pad - kw) / stride + 1;
    if (oh < 1 || ow < 1) {
        throw DimensionError("conv2d: kernel " + shape_str(kernel.shape()) +
                             " does not fit input " + shape_str(x.shape()));
    }
    const bool has_bias = bias.numel() > 0;
    if (has_bias && (bias.ndim() != 1 || bias.dim(0) != cout)) {
        throw DimensionError("conv2d: bias shape " + shape_str(bias.shape()) +
                             " does not match " + std::to_string(cout) + " output channels");
    }

    TensorT<S> out = TensorT<S>::zeros({bsz, cout, oh, ow});
    using Mat = detail::EigenRowMat<S>;
    const int64_t ckk = cin * kh * kw;
    {
        std::vector<S> col(size_t(oh * ow * ckk));
        const S* xv = x.values().data();
        const S* kv = kernel.values().data();
        const S* bv = has_bias ? bias.values().data() : nullptr;
        S* ov = out.values().data();
        Eigen::Map<const Mat> K(kv, cout, ckk);
        for (int64_t b = 0; b < bsz; ++b) {
            detail::im2col(xv + b * cin * h * w, cin, h, w, kh, kw, stride, pad, oh, ow,
                           col.data());
            Eigen::Map<const Mat> C(col.data(), oh * ow, ckk);
            Eigen::Map<Mat> O(ov + b * cout * oh * ow, cout, oh * ow);
            O.noalias() = K * C.transpose();
            if (bv) {
                for (int64_t c = 0; c < cout; ++c) {
                    S* oc = ov + (b * cout + c) * oh * ow;
                    for (int64_t i = 0; i < oh * ow; ++i) oc[i] += bv[c];
                }
            }
        }
    }
    auto xd = x.data_ptr();
    auto kd = kernel.data_ptr();
    auto bd = bias.data_ptr();
    auto od = out.data_ptr();
    record_op(tape, out, {x, kernel, bias},
              [xd, kd, bd, od, bsz, cin, h, w, cout, kh, kw, stride, pad, oh, ow, ckk,
               has_bias]() {
        const S* g = od->grad.data();
        const S* xv = xd->values.data();
        const S* kv = kd->values.data();
        S* gx = xd->grad.empty() ? nullptr : xd->grad.data();
        S* gk = kd->grad.empty() ? nullptr : kd->grad.data();
        S* gb = (has_bias && !bd->grad.empty()) ? bd->grad.data() : nullptr;
        std::vector<S> col(size_t(oh * ow * ckk));
        std::vector<S> dcol(gx ? size_t(oh * ow * ckk) : 0);
        Eigen::Map<const Mat> K(kv, cout, ckk);
        for (int64_t b = 0; b < bsz; ++b) {
            Eigen::Map<const Mat> G(g + b * cout * oh * ow, cout, oh * ow);
            if (gk) {
                detail::im2col(xv + b * cin * h * w, cin, h, w, kh, kw, stride, pad, oh, ow,
                               col.data());
                Eigen::Map<const Mat> C(col.data(), oh * ow, ckk);
                Eigen::Map<Mat> GK(gk, cout, ckk);
                GK.noalias() += G * C;
            }
            if (gx) {
                Eigen::Map<Mat> DC(dcol.data(), oh * ow, ckk);
                DC.noalias() = G.transpose() * K;
                detail::col2im_add(dcol.data(), cin, h, w, kh, kw, stride, pad, oh, ow,
                                   gx + b * cin * h * w);
            }
            if (gb) {
                for (int64_t c = 0; c < cout; ++c) {
                    const S* gc = g + (b * cout + c) * oh * ow;
                    S acc = S(0);
                    for (int64_t i = 0; i < oh * ow; ++i) acc += gc[i];
                    gb[c] += acc;
                }
            }
        }
    });
    return out;
}

// Non-overlapping max pooling with a square window; trailing rows/columns
// that do not fill a window are dropped. Ties resolve to the first element
// in row-major window order.
template <typename S>
TensorT<S> maxpool2d(Tape<S>* tape, const TensorT<S>& x, int64_t window) {
    if (x.ndim() != 4) {
        throw DimensionError("maxpool2d: need 4-D input, got " + shape_str(x.shape()));
    }
    if (window < 1) throw ContractError("maxpool2d: window must be >= 1");
    const int64_t bsz = x.dim(0), ch = x.dim(1), h = x.dim(2), w = x.dim(3);
    const int64_t oh = h / window, ow = w / window;
    if (oh < 1 || ow < 1) {
        throw DimensionError("maxpool2d: window " + std::to_string(window) +
                             " larger than input " + shape_str(x.shape()));
    }
    TensorT<S> out = TensorT<S>::zeros({bsz, ch, oh, ow});
    std::vector<int32_t> argmax(size_t(out.numel()));
    const S* xv = x.values().data();
    S* ov = out.values().data();
    const int64_t planes = bsz * ch;
    for (int64_t p = 0; p < planes; ++p) {
        const S* img = xv + p * h * w;
        S* dst = ov + p * oh * ow;
        int32_t* am = argmax.data() + p * oh * ow;
        for (int64_t oy = 0; oy < oh; ++oy) {
            for (int64_t ox = 0; ox < ow; ++ox) {
                S best = img[(oy * window) * w + ox * window];
                int32_t best_off = int32_t((oy * window) * w + ox * window);
                for (int64_t dy = 0; dy < window; ++dy) {
                    for (int64_t dx = 0; dx < window; ++dx) {
                        const int64_t off = (oy * window + dy) * w + ox * window + dx;
                        if (img[off] > best) {
                            best = img[off];
                            best_off = int32_t(off);
                        }
                    }
                }
                dst[oy * ow + ox] = best;
                am[oy * ow + ox] = best_off;
            }
        }
    }
    auto xd = x.data_ptr();
    auto od = out.data_ptr();
    record_op(tape, out, {x}, [xd, od, planes, h, w, oh, ow, argmax = std::move(argmax)]() {
        const S* g = od->grad.data();
        S* gx = xd->grad.data();
        for (int64_t p = 0; p < planes; ++p) {
            const S* gp = g + p * oh * ow;
            const int32_t* am = argmax.data() + p * oh * ow;
            S* gxp = gx + p * h * w;
            for (int64_t i = 0; i < oh * ow; ++i) gxp[am[i]] += gp[i];
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

// Normalizes over all axes except axis 1 (the channel/feature axis), so the
// same primitive serves (N, F) dense layers and (N, C, H, W) feature maps.
// In training mode batch statistics are used and running statistics updated
// in place (running <- momentum * running + (1 - momentum) * batch); in
// inference mode the running statistics are used. gamma/beta are learned,
// running_mean/running_var are buffers and never receive gradients.
template <typename S>
TensorT<S> batch_norm(Tape<S>* tape, const TensorT<S>& x, const TensorT<S>& gamma,
                      const TensorT<S>& beta, TensorT<S>& running_mean,
                      TensorT<S>& running_var, bool training, S momentum = S(0.9),
                      S eps = S(1e-5)) {
    if (x.ndim() < 2) {
        throw DimensionError("batch_norm: need rank >= 2 input, got " + shape_str(x.shape()));
    }
    const int64_t ch = x.dim(1);
    auto check_param = [&](const TensorT<S>& p, const char* name) {
        if (p.ndim() != 1 || p.dim(0) != ch) {
            throw DimensionError(std::string("batch_norm: ") + name + " shape " +
                                 shape_str(p.shape()) + " does not match " +
                                 std::to_string(ch) + " channels");
        }
    };
    check_param(gamma, "gamma");
    check_param(beta, "beta");
    check_param(running_mean, "running_mean");
    check_param(running_var, "running_var");

    const int64_t bsz = x.dim(0);
    int64_t inner = 1;
    for (int i = 2; i < x.ndim(); ++i) inner *= x.dim(i);
    const int64_t count = bsz * inner;

    TensorT<S> out = TensorT<S>::zeros(x.shape());
    const S* xv = x.values().data();
    const S* gv = gamma.values().data();
    const S* bv = beta.values().data();
    S* ov = out.values().data();

    auto x_off = [=](int64_t n, int64_t c, int64_t i) { return (n * ch + c) * inner + i; };

    if (training) {
        if (count < 2) {
            throw DegenerateBatchError(
                "batch_norm: training-mode statistics need at least 2 values per channel, got " +
                std::to_string(count));
        }
        std::vector<S> mu(size_t(ch), S(0)), ivar(size_t(ch), S(0));
        for (int64_t c = 0; c < ch; ++c) {
            S sum = S(0);
            for (int64_t n = 0; n < bsz; ++n)
                for (int64_t i = 0; i < inner; ++i) sum += xv[x_off(n, c, i)];
            const S m = sum / S(count);
            S var = S(0);
            for (int64_t n = 0; n < bsz; ++n)
                for (int64_t i = 0; i < inner; ++i) {
                    const S d = xv[x_off(n, c, i)] - m;
                    var += d * d;
                }
            var /= S(count);
            mu[size_t(c)] = m;
            ivar[size_t(c)] = S(1) / std::sqrt(var + eps);
            running_mean.values()[size_t(c)] =
                momentum * running_mean.values()[size_t(c)] + (S(1) - momentum) * m;
            running_var.values()[size_t(c)] =
                momentum * running_var.values()[size_t(c)] + (S(1) - momentum) * var;
        }
        for (int64_t n = 0; n < bsz; ++n)
            for (int64_t c = 0; c < ch; ++c)
                for (int64_t i = 0; i < inner; ++i) {
                    const int64_t off = x_off(n, c, i);
                    ov[off] = gv[c] * (xv[off] - mu[size_t(c)]) * ivar[size_t(c)] + bv[c];
                }

        auto xd = x.data_ptr();
        auto gd = gamma.data_ptr();
        auto bd = beta.data_ptr();
        auto od = out.data_ptr();
        record_op(tape, out, {x, gamma, beta},
                  [xd, gd, bd, od, bsz, ch, inner, count, mu = std::move(mu),
                   ivar = std::move(ivar), x_off]() {
            const S* g = od->grad.data();
            const S* xv = xd->values.data();
            const S* gv = gd->values.data();
            S* gx = xd->grad.empty() ? nullptr : xd->grad.data();
            S* gg = gd->grad.empty() ? nullptr : gd->grad.data();
            S* gb = bd->grad.empty() ? nullptr : bd->grad.data();
            for (int64_t c = 0; c < ch; ++c) {
                const S m = mu[size_t(c)];
                const S iv = ivar[size_t(c)];
                // Accumulate the per-channel sums the adjoint needs.
                S sum_g = S(0), sum_gx = S(0);
                for (int64_t n = 0; n < bsz; ++n)
                    for (int64_t i = 0; i < inner; ++i) {
                        const int64_t off = x_off(n, c, i);
                        const S xh = (xv[off] - m) * iv;
                        sum_g += g[off];
                        sum_gx += g[off] * xh;
                    }
                if (gb) gb[c] += sum_g;
                if (gg) gg[c] += sum_gx;
                if (gx) {
                    const S gam = gv[c];
                    const S inv_count = S(1) / S(count);
                    for (int64_t n = 0; n < bsz; ++n)
                        for (int64_t i = 0; i < inner; ++i) {
                            const int64_t off = x_off(n, c, i);
                            const S xh = (xv[off] - m) * iv;
                            gx[off] += gam * iv * inv_count *
                                       (S(count) * g[off] - sum_g - xh * sum_gx);
                        }
                }
            }
        });
        return out;
    }

    // Inference: a per-channel affine map using the running statistics.
    const S* rm = running_mean.values().data();
    const S* rv = running_var.values().data();
    std::vector<S> ivar(static_cast<size_t>(ch));
    for (int64_t c = 0; c < ch; ++c) ivar[size_t(c)] = S(1) / std::sqrt(rv[c] + eps);
    for (int64_t n = 0; n < bsz; ++n)
        for (int64_t c = 0; c < ch; ++c)
            for (int64_t i = 0; i < inner; ++i) {
                const int64_t off = x_off(n, c, i);
                ov[off] = gv[c] * (xv[off] - rm[c]) * ivar[size_t(c)] + bv[c];
            }
    auto xd = x.data_ptr();
    auto gd = gamma.data_ptr();
    auto bd = beta.data_ptr();
    auto rmd = running_mean.data_ptr();
    auto od = out.data_ptr();
    record_op(tape, out, {x, gamma, beta},
              [xd, gd, bd, rmd, od, bsz, ch, inner, ivar = std::move(ivar), x_off]() {
        const S* g = od->grad.data();
        const S* xv = xd->values.data();
        const S* gv = gd->values.data();
        const S* rm = rmd->values.data();
        S* gx = xd->grad.empty() ? nullptr : xd->grad.data();
        S* gg = gd->grad.empty() ? nullptr : gd->grad.data();
        S* gb = bd->grad.empty() ? nullptr : bd->grad.data();
        for (int64_t c = 0; c < ch; ++c) {
            const S iv = ivar[size_t(c)];
            for (int64_t n = 0; n < bsz; ++n)
                for (int64_t i = 0; i < inner; ++i) {
                    const int64_t off = x_off(n, c, i);
                    if (gx) gx[off] += g[off] * gv[c] * iv;
                    if (gg) gg[c] += g[off] * (xv[off] - rm[c]) * iv;
                    if (gb) gb[c] += g[off];
                }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Dropout (inverted scaling)
// ---------------------------------------------------------------------------

// In training mode each element is zeroed with probability `rate` and the
// survivors are scaled by 1/(1-rate); in inference mode (or rate 0) the
// input tensor is returned unchanged, bit for bit.
template <typename S>
TensorT<S> dropout(Tape<S>* tape, const TensorT<S>& x, double rate, bool training,
                   Rng& rng) {
    if (rate < 0.0 || rate >= 1.0) {
        throw ContractError("dropout: rate must lie in [0, 1), got " + std::to_string(rate));
    }
    if (!training || rate == 0.0) return x;
    TensorT<S> out = TensorT<S>::zeros(x.shape());
    const int64_t n = x.numel();
    std::vector<uint8_t> mask(static_cast<size_t>(n));
    const S keep_scale = S(1.0 / (1.0 - rate));
    const S* xv = x.values().data();
    S* ov = out.values().data();
    for (int64_t i = 0; i < n; ++i) {
        const bool keep = rng.uniform() >= rate;
        mask[size_t(i)] = keep ? 1 : 0;
        ov[i] = keep ? xv[i] * keep_scale : S(0);
    }
    auto xd = x.data_ptr();
    auto od = out.data_ptr();
    record_op(tape, out, {x}, [xd, od, keep_scale, mask = std::move(mask)]() {
        const S* g = od->grad.data();
        S* gx = xd->grad.data();
        const int64_t n = int64_t(od->values.size());
        for (int64_t i = 0; i < n; ++i) {
            if (mask[size_t(i)]) gx[i] += g[i] * keep_scale;
        }
    });
    return out;
}

}  // namespace combogait
