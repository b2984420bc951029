// Finite-difference gradient oracle. Every differentiable operation, and
// the composed end-to-end micro model, is checked against central
// differences in double precision: analytic and numeric partials must
// agree to a relative error below 1e-4.

#pragma once

#include <functional>

#include "combogait/training.hpp"

namespace combogait {

// The oracle computes at the widest precision the hardware offers so that
// central-difference cancellation noise stays far below the acceptance
// threshold even in directions whose true gradient is (near) zero, e.g. a
// bias feeding batch norm.
using Wide = long double;

using GradFn = std::function<TensorT<Wide>(Tape<Wide>*)>;

struct GradcheckResult {
    std::string name;
    double max_rel_err = 0.0;
    int64_t coords = 0;

    bool pass(double threshold = 1e-4) const { return max_rel_err < threshold; }
};

// Relative disagreement between analytic and numeric partials.
inline double grad_rel_err(Wide analytic, Wide numeric) {
    return double(std::abs(analytic - numeric) /
                  std::max<Wide>(1e-8L, std::abs(analytic) + std::abs(numeric)));
}

// Checks d(f)/d(input) for every coordinate of every listed input. f must
// rebuild its graph on each call from the inputs' current values and
// return a scalar. Inputs are restored after probing.
inline GradcheckResult gradcheck(const std::string& name, const GradFn& f,
                                 const std::vector<TensorT<Wide>*>& inputs,
                                 double h = 1e-4) {
    GradcheckResult res;
    res.name = name;
    for (auto* in : inputs) {
        in->set_requires_grad(true);
        in->zero_grad();
    }
    {
        Tape<Wide> tape;
        auto loss = f(&tape);
        if (loss.numel() != 1) {
            throw ContractError("gradcheck: objective for '" + name + "' is not scalar");
        }
        backward(loss, tape);
    }
    for (auto* in : inputs) {
        auto& vals = in->values();
        std::vector<Wide> analytic = in->grad();
        if (analytic.empty()) analytic.assign(vals.size(), 0.0L);
        for (size_t i = 0; i < vals.size(); ++i) {
            const Wide keep = vals[i];
            vals[i] = keep + Wide(h);
            const Wide up = f(nullptr).value_at({0});
            vals[i] = keep - Wide(h);
            const Wide dn = f(nullptr).value_at({0});
            vals[i] = keep;
            const Wide numeric = (up - dn) / (Wide(2.0) * Wide(h));
            res.max_rel_err = std::max(res.max_rel_err, grad_rel_err(analytic[i], numeric));
            ++res.coords;
        }
        in->zero_grad();
    }
    return res;
}

namespace detail {

inline TensorT<Wide> rand_tensor(std::vector<int64_t> shape, Rng& rng,
                                   double scale = 1.0, double offset = 0.0) {
    auto t = TensorT<Wide>::zeros(std::move(shape));
    for (auto& v : t.values()) v = rng.gaussian() * scale + offset;
    return t;
}

// Weighted-sum scalarization so every output coordinate carries a
// distinct gradient.
inline TensorT<Wide> pin(Tape<Wide>* tape, const TensorT<Wide>& out,
                           const TensorT<Wide>& weights) {
    return sum_all(tape, mul(tape, out, weights));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Per-operation suite
// ---------------------------------------------------------------------------

struct GradcheckSuite {
    std::vector<GradcheckResult> results;

    double max_rel_err() const {
        double m = 0.0;
        for (const auto& r : results) m = std::max(m, r.max_rel_err);
        return m;
    }
    bool pass(double threshold = 1e-4) const { return max_rel_err() < threshold; }
};

// One seeded instance of every differentiable-op check. Inputs that feed
// kinked ops (relu, max, hinge) are random gaussians, so ties sit a
// measure-zero set away from the probe step.
inline void run_op_checks(GradcheckSuite& suite, uint64_t seed) {
    Rng rng(Rng::mix(seed, 0x6f7263686bULL));
    using detail::pin;
    using detail::rand_tensor;
    auto add_check = [&](GradcheckResult r) { suite.results.push_back(std::move(r)); };

    {
        auto a = rand_tensor({2, 3, 1}, rng);
        auto b = rand_tensor({1, 3, 4}, rng);
        auto w = rand_tensor({2, 3, 4}, rng);
        add_check(gradcheck("add.broadcast",
                            [&](Tape<Wide>* t) { return pin(t, add(t, a, b), w); },
                            {&a, &b}));
    }
    {
        auto a = rand_tensor({3, 4}, rng);
        auto b = rand_tensor({3, 4}, rng);
        auto w = rand_tensor({3, 4}, rng);
        add_check(gradcheck("mul", [&](Tape<Wide>* t) { return pin(t, mul(t, a, b), w); },
                            {&a, &b}));
        add_check(gradcheck("sub", [&](Tape<Wide>* t) { return pin(t, sub(t, a, b), w); },
                            {&a, &b}));
    }
    {
        auto a = rand_tensor({3, 4}, rng);
        auto b = rand_tensor({3, 4}, rng, 0.4, 2.0);  // bounded away from zero
        auto w = rand_tensor({3, 4}, rng);
        add_check(gradcheck("divide",
                            [&](Tape<Wide>* t) { return pin(t, divide(t, a, b), w); },
                            {&a, &b}));
    }
    {
        auto a = rand_tensor({2, 5}, rng);
        auto w = rand_tensor({2, 5}, rng);
        add_check(gradcheck("scale",
                            [&](Tape<Wide>* t) { return pin(t, scale(t, a, Wide(1.7)), w); },
                            {&a}));
        add_check(gradcheck("add_const",
                            [&](Tape<Wide>* t) { return pin(t, add_const(t, a, Wide(0.3)), w); },
                            {&a}));
        add_check(gradcheck("relu",
                            [&](Tape<Wide>* t) { return pin(t, relu(t, a), w); }, {&a}));
    }
    {
        auto a = rand_tensor({2, 5}, rng, 0.3, 1.5);  // positive, away from the root's pole
        auto w = rand_tensor({2, 5}, rng);
        add_check(gradcheck("sqrt",
                            [&](Tape<Wide>* t) { return pin(t, sqrt_elem(t, a), w); },
                            {&a}));
    }
    {
        auto a = rand_tensor({2, 6}, rng);
        auto w = rand_tensor({3, 4}, rng);
        add_check(gradcheck(
            "reshape", [&](Tape<Wide>* t) { return pin(t, reshape(t, a, {3, 4}), w); },
            {&a}));
    }
    {
        auto a = rand_tensor({2, 3, 4}, rng);
        auto w = rand_tensor({4, 2, 3}, rng);
        add_check(gradcheck(
            "permute", [&](Tape<Wide>* t) { return pin(t, permute(t, a, {2, 0, 1}), w); },
            {&a}));
    }
    {
        auto a = rand_tensor({2, 1, 2, 3, 2}, rng);
        auto w = rand_tensor({2, 1, 2, 4, 4}, rng);
        add_check(gradcheck(
            "pad_bottom_right",
            [&](Tape<Wide>* t) { return pin(t, pad_bottom_right(t, a, 1, 2), w); }, {&a}));
    }
    {
        auto a = rand_tensor({2, 1, 3}, rng);
        auto w = rand_tensor({2, 4, 3}, rng);
        add_check(gradcheck(
            "broadcast_axis",
            [&](Tape<Wide>* t) { return pin(t, broadcast_axis(t, a, 1, 4), w); }, {&a}));
    }
    {
        auto a = rand_tensor({2, 3, 4}, rng);
        auto w = rand_tensor({2, 4}, rng);
        add_check(gradcheck(
            "select_index",
            [&](Tape<Wide>* t) { return pin(t, select_index(t, a, 1, 1), w); }, {&a}));
    }
    {
        auto a = rand_tensor({3, 4}, rng);
        auto w = rand_tensor({5}, rng);
        std::vector<int64_t> idx = {0, 5, 11, 3, 5};  // includes a repeat
        add_check(gradcheck(
            "take", [&](Tape<Wide>* t) { return pin(t, take(t, a, idx), w); }, {&a}));
    }
    {
        auto a = rand_tensor({3, 4}, rng);
        add_check(gradcheck("sum_all", [&](Tape<Wide>* t) { return sum_all(t, a); }, {&a}));
        add_check(gradcheck("mean_all", [&](Tape<Wide>* t) { return mean_all(t, a); },
                            {&a}));
    }
    {
        auto a = rand_tensor({2, 3, 4}, rng);
        auto w = rand_tensor({2, 4}, rng);
        auto wk = rand_tensor({2, 1, 4}, rng);
        add_check(gradcheck(
            "sum_axis", [&](Tape<Wide>* t) { return pin(t, sum_axis(t, a, 1), w); }, {&a}));
        add_check(gradcheck(
            "mean_axis.keepdim",
            [&](Tape<Wide>* t) { return pin(t, mean_axis(t, a, 1, true), wk); }, {&a}));
        add_check(gradcheck(
            "max_axis", [&](Tape<Wide>* t) { return pin(t, max_axis(t, a, 1), w); }, {&a}));
    }
    {
        auto a = rand_tensor({2, 5}, rng);
        auto w = rand_tensor({2, 5}, rng);
        add_check(gradcheck("softmax",
                            [&](Tape<Wide>* t) { return pin(t, softmax(t, a), w); }, {&a}));
        add_check(gradcheck(
            "log_softmax", [&](Tape<Wide>* t) { return pin(t, log_softmax(t, a), w); },
            {&a}));
    }
    {
        auto a = rand_tensor({3, 4}, rng);
        auto b = rand_tensor({4, 2}, rng);
        auto w = rand_tensor({3, 2}, rng);
        add_check(gradcheck("matmul.2d",
                            [&](Tape<Wide>* t) { return pin(t, matmul(t, a, b), w); },
                            {&a, &b}));
    }
    {
        auto a = rand_tensor({2, 3, 4}, rng);
        auto b = rand_tensor({2, 4, 2}, rng);
        auto w = rand_tensor({2, 3, 2}, rng);
        add_check(gradcheck("matmul.batched",
                            [&](Tape<Wide>* t) { return pin(t, matmul(t, a, b), w); },
                            {&a, &b}));
    }
    {
        // The modality-fusion pattern: per-channel stack times a shared
        // (broadcast) square matrix.
        auto a = rand_tensor({2, 2, 2, 3, 3}, rng);
        auto b = rand_tensor({2, 1, 2, 3, 3}, rng);
        auto w = rand_tensor({2, 2, 2, 3, 3}, rng);
        add_check(gradcheck("matmul.broadcast",
                            [&](Tape<Wide>* t) { return pin(t, matmul(t, a, b), w); },
                            {&a, &b}));
    }
    {
        auto x = rand_tensor({2, 2, 5, 4}, rng);
        auto k = rand_tensor({3, 2, 3, 3}, rng, 0.5);
        auto bias = rand_tensor({3}, rng, 0.2);
        auto w = rand_tensor({2, 3, 5, 4}, rng);
        add_check(gradcheck(
            "conv2d",
            [&](Tape<Wide>* t) { return pin(t, conv2d(t, x, k, bias, 1, 1), w); },
            {&x, &k, &bias}));
        auto w2 = rand_tensor({2, 3, 2, 1}, rng);
        add_check(gradcheck(
            "conv2d.stride2",
            [&](Tape<Wide>* t) { return pin(t, conv2d(t, x, k, bias, 2, 0), w2); },
            {&x, &k, &bias}));
    }
    {
        auto x = rand_tensor({2, 2, 6, 4}, rng);
        auto w = rand_tensor({2, 2, 3, 2}, rng);
        add_check(gradcheck(
            "maxpool2d", [&](Tape<Wide>* t) { return pin(t, maxpool2d(t, x, 2), w); },
            {&x}));
    }
    {
        auto x = rand_tensor({4, 3, 2}, rng);
        auto gamma = rand_tensor({3}, rng, 0.3, 1.0);
        auto beta = rand_tensor({3}, rng, 0.3);
        auto w = rand_tensor({4, 3, 2}, rng);
        auto rm = TensorT<Wide>::zeros({3});
        auto rv = TensorT<Wide>::filled({3}, 1.0);
        add_check(gradcheck("batch_norm.train",
                            [&](Tape<Wide>* t) {
                                return pin(t, batch_norm(t, x, gamma, beta, rm, rv, true), w);
                            },
                            {&x, &gamma, &beta}));
        add_check(gradcheck("batch_norm.eval",
                            [&](Tape<Wide>* t) {
                                return pin(t, batch_norm(t, x, gamma, beta, rm, rv, false), w);
                            },
                            {&x, &gamma, &beta}));
    }
    {
        auto x = rand_tensor({3, 5}, rng);
        auto w = rand_tensor({3, 5}, rng);
        const uint64_t mask_seed = rng.next();
        add_check(gradcheck("dropout.train",
                            [&](Tape<Wide>* t) {
                                Rng mask_rng(mask_seed);  // same mask on every probe
                                return pin(t, dropout(t, x, 0.4, true, mask_rng), w);
                            },
                            {&x}));
    }
    {
        auto x = rand_tensor({2, 3, 8}, rng);
        LayerNormT<Wide> ln(8);
        for (auto& v : ln.gain.values()) v = 1.0 + 0.2 * rng.gaussian();
        for (auto& v : ln.bias.values()) v = 0.2 * rng.gaussian();
        auto w = rand_tensor({2, 3, 8}, rng);
        add_check(gradcheck("layer_norm",
                            [&](Tape<Wide>* t) { return pin(t, ln.forward(t, x), w); },
                            {&x, &ln.gain, &ln.bias}));
    }
    {
        // Batch-all triplet over random part embeddings (4 samples, 2 ids).
        auto f = rand_tensor({4, 3, 2}, rng);
        std::vector<int64_t> ids = {0, 0, 1, 1};
        add_check(gradcheck(
            "batch_all_triplet",
            [&](Tape<Wide>* t) { return batch_all_triplet(t, f, ids, 0.2); }, {&f}));
    }
    {
        auto logits = rand_tensor({3, 5}, rng);
        std::vector<int64_t> labels = {1, 4, 0};
        add_check(gradcheck(
            "cross_entropy",
            [&](Tape<Wide>* t) { return cross_entropy(t, logits, labels); }, {&logits}));
    }
}

// ---------------------------------------------------------------------------
// Composed micro-model check
// ---------------------------------------------------------------------------

inline ModelConfig micro_model_config(int64_t identities) {
    ModelConfig cfg;
    cfg.encoder.input_h = 16;  // pooled twice -> 4x2, so Hmax = 4
    cfg.encoder.input_w = 8;
    cfg.encoder.channels = {2, 2, 2};
    cfg.smpl_hidden1 = 8;
    cfg.smpl_hidden2 = 8;
    cfg.smpl_embed_dim = 16;  // 4^2
    cfg.dropout = 0.1;
    cfg.token_dim = 8;
    cfg.heads = 2;
    cfg.blocks = 2;
    cfg.gait_embed_dim = 4;
    cfg.n_train_identities = identities;
    return cfg;
}

// End-to-end check: the full training loss of a micro model
// differentiated against every parameter. batch=2 exercises the composed
// network; batch=4 additionally makes the triplet term live.
inline GradcheckResult gradcheck_micro_model(int64_t batch, uint64_t seed) {
    const int64_t t_frames = 2;
    auto cfg = micro_model_config(2);
    auto model = ComboGaitModelT<Wide>::create(cfg, seed);

    Rng rng(Rng::mix(seed, 0x6d6963726fULL));
    auto sil = TensorT<Wide>::zeros({batch, t_frames, cfg.encoder.input_h,
                                       cfg.encoder.input_w});
    for (auto& v : sil.values()) v = rng.bernoulli(0.35) ? 1.0 : 0.0;
    auto smpl = detail::rand_tensor({batch, t_frames, kSmplParamDim}, rng, 0.5);

    std::vector<int64_t> ids, age_cls, sex_cls, bmi_cls;
    for (int64_t i = 0; i < batch; ++i) {
        ids.push_back(i * 2 / batch);  // two identity groups
        age_cls.push_back(i % kAgeClasses);
        sex_cls.push_back(i % kSexClasses);
        bmi_cls.push_back(i % kBmiClasses);
    }
    LossWeights weights;
    const uint64_t drop_seed = rng.next();

    GradFn objective = [&](Tape<Wide>* tape) {
        Rng drop_rng(drop_seed);  // identical dropout mask on every probe
        auto out = model.forward(tape, sil, smpl, /*training=*/true, &drop_rng);
        auto tri = batch_all_triplet(tape, out.f_gait, ids, 0.2);
        auto ce = gait_ce(tape, out.f_gait, ids, model.id_classifier);
        auto attr = attribute_ce(tape, out.attrs, age_cls, sex_cls, bmi_cls);
        return combo_loss(tape, tri, ce, attr.age, attr.sex, attr.bmi, weights);
    };

    std::vector<TensorT<Wide>*> params;
    model.visit_params([&](const std::string&, TensorT<Wide>& p) { params.push_back(&p); });

    // Batch-norm running stats drift as the objective is re-evaluated;
    // training-mode outputs depend only on batch stats, so the probes are
    // unaffected. The probe step is narrower than the per-op default: the
    // stacked attention softmaxes give the composed objective third
    // derivatives around 1e4, so central differences at the default step
    // carry truncation error h^2*f'''/6 on the order of the pass threshold.
    // Extended-precision evaluation keeps cancellation noise negligible at
    // the narrower step, including on directions whose true gradient is
    // exactly zero (biases feeding batch norm).
    return gradcheck("micro_model.batch" + std::to_string(batch), objective, params, 1e-5);
}

// ---------------------------------------------------------------------------
// Full suite
// ---------------------------------------------------------------------------

inline GradcheckSuite run_gradcheck_suite(int64_t op_seeds = 10) {
    GradcheckSuite suite;
    for (int64_t s = 0; s < op_seeds; ++s) run_op_checks(suite, uint64_t(s) + 1);
    suite.results.push_back(gradcheck_micro_model(2, 11));
    suite.results.push_back(gradcheck_micro_model(4, 12));
    return suite;
}

}  // namespace combogait
