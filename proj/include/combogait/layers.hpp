// Parameterized building blocks: linear, batch-norm, layer-norm, dropout.
//
// Each block exposes visit_params / visit_buffers with stable, prefixed
// names; checkpointing and the optimizer rely on that ordering.

#pragma once

#include <functional>
#include <string>

#include "combogait/tensor.hpp"

namespace combogait {

template <typename S>
using ParamVisitor = std::function<void(const std::string&, TensorT<S>&)>;

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

template <typename S>
inline void fill_gaussian(TensorT<S>& t, Rng& rng, double stddev, double mean = 0.0) {
    for (S& v : t.values()) v = S(rng.gaussian(mean, stddev));
}

// Kaiming-style scaling for layers feeding a rectifier.
template <typename S>
inline void init_he(TensorT<S>& t, Rng& rng, int64_t fan_in) {
    fill_gaussian(t, rng, std::sqrt(2.0 / double(fan_in)));
}

// Milder scaling for projection/readout layers.
template <typename S>
inline void init_xavier(TensorT<S>& t, Rng& rng, int64_t fan_in) {
    fill_gaussian(t, rng, std::sqrt(1.0 / double(fan_in)));
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

// y = x @ weight + bias with weight stored (in, out); accepts any input of
// shape (..., in).
template <typename S>
struct LinearT {
    TensorT<S> weight;
    TensorT<S> bias;
    bool has_bias = true;

    LinearT() = default;

    LinearT(int64_t in, int64_t out, Rng& rng, bool with_bias = true, bool rectified = true)
        : has_bias(with_bias) {
        weight = TensorT<S>::zeros({in, out});
        if (rectified) {
            init_he(weight, rng, in);
        } else {
            init_xavier(weight, rng, in);
        }
        weight.set_requires_grad(true);
        if (has_bias) {
            bias = TensorT<S>::zeros({out});
            bias.set_requires_grad(true);
        }
    }

    TensorT<S> forward(Tape<S>* tape, const TensorT<S>& x) const {
        TensorT<S> y = matmul(tape, x, weight);
        if (has_bias) y = add(tape, y, bias);
        return y;
    }

    void visit_params(const std::string& prefix, const ParamVisitor<S>& fn) {
        fn(prefix + ".weight", weight);
        if (has_bias) fn(prefix + ".bias", bias);
    }
};

// ---------------------------------------------------------------------------
// Batch normalization over axis 1
// ---------------------------------------------------------------------------

template <typename S>
struct BatchNormT {
    TensorT<S> gamma;
    TensorT<S> beta;
    TensorT<S> running_mean;
    TensorT<S> running_var;
    S momentum = S(0.9);
    S eps = S(1e-5);

    BatchNormT() = default;

    explicit BatchNormT(int64_t channels) {
        gamma = TensorT<S>::filled({channels}, S(1));
        beta = TensorT<S>::zeros({channels});
        gamma.set_requires_grad(true);
        beta.set_requires_grad(true);
        running_mean = TensorT<S>::zeros({channels});
        running_var = TensorT<S>::filled({channels}, S(1));
    }

    TensorT<S> forward(Tape<S>* tape, const TensorT<S>& x, bool training) {
        return batch_norm(tape, x, gamma, beta, running_mean, running_var, training,
                          momentum, eps);
    }

    void visit_params(const std::string& prefix, const ParamVisitor<S>& fn) {
        fn(prefix + ".gamma", gamma);
        fn(prefix + ".beta", beta);
    }

    void visit_buffers(const std::string& prefix, const ParamVisitor<S>& fn) {
        fn(prefix + ".running_mean", running_mean);
        fn(prefix + ".running_var", running_var);
    }
};

// ---------------------------------------------------------------------------
// Layer normalization over the last axis
// ---------------------------------------------------------------------------

template <typename S>
struct LayerNormT {
    TensorT<S> gain;
    TensorT<S> bias;
    S eps = S(1e-5);

    LayerNormT() = default;

    explicit LayerNormT(int64_t features) {
        gain = TensorT<S>::filled({features}, S(1));
        bias = TensorT<S>::zeros({features});
        gain.set_requires_grad(true);
        bias.set_requires_grad(true);
    }

    TensorT<S> forward(Tape<S>* tape, const TensorT<S>& x) const {
        const int last = x.ndim() - 1;
        if (last < 0 || x.dim(last) != gain.dim(0)) {
            throw DimensionError("layer_norm: input " + shape_str(x.shape()) +
                                 " does not end in " + std::to_string(gain.dim(0)) +
                                 " features");
        }
        TensorT<S> mu = mean_axis(tape, x, last, /*keepdim=*/true);
        TensorT<S> centered = sub(tape, x, mu);
        TensorT<S> var = mean_axis(tape, mul(tape, centered, centered), last, true);
        TensorT<S> denom = sqrt_elem(tape, add_const(tape, var, eps));
        TensorT<S> normed = divide(tape, centered, denom);
        return add(tape, mul(tape, normed, gain), bias);
    }

    void visit_params(const std::string& prefix, const ParamVisitor<S>& fn) {
        fn(prefix + ".gain", gain);
        fn(prefix + ".bias", bias);
    }
};

// ---------------------------------------------------------------------------
// Dropout
// ---------------------------------------------------------------------------

template <typename S>
struct DropoutT {
    double rate = 0.0;

    DropoutT() = default;
    explicit DropoutT(double r) : rate(r) {
        if (r < 0.0 || r >= 1.0) {
            throw ConfigError("dropout rate must lie in [0, 1), got " + std::to_string(r));
        }
    }

    TensorT<S> forward(Tape<S>* tape, const TensorT<S>& x, bool training, Rng* rng) const {
        if (!training || rate == 0.0) return x;
        if (rng == nullptr) {
            throw ContractError("dropout: training-mode forward needs a random stream");
        }
        return dropout(tape, x, rate, true, *rng);
    }
};

}  // namespace combogait
