// Task-token refinement and prediction heads.
//
// Three learnable task tokens (age, sex, bmi) are refined by a stack of
// blocks, each applying self-attention over the tokens, cross-attention
// against gait tokens (the pooled fused feature map flattened into a
// sequence of Hmax^2 spatial tokens of width C'), and a two-layer MLP.
// Every sublayer is wrapped in residual + post-layer-norm. In parallel,
// Horizontal Pyramid Pooling collapses the pooled map into P = Hmax part
// descriptors which a per-part bias-free linear head turns into the gait
// representation. When the token blocks are disabled, attribute logits come
// from three plain MLPs over the flattened part descriptors instead.

#pragma once

#include <vector>

#include "combogait/layers.hpp"

namespace combogait {

constexpr int64_t kNumTasks = 3;  // token order: age, sex, bmi
constexpr int64_t kAgeClasses = 5;
constexpr int64_t kSexClasses = 2;
constexpr int64_t kBmiClasses = 4;

// (J, M) learnable tokens, i.i.d. N(0, sigma^2).
template <typename S>
inline TensorT<S> init_task_tokens(int64_t j, int64_t m, double sigma, Rng& rng) {
    if (j < 1 || m < 1) {
        throw ContractError("task tokens: J and M must be >= 1");
    }
    if (sigma <= 0.0) {
        throw ContractError("task tokens: sigma must be positive");
    }
    TensorT<S> t = TensorT<S>::zeros({j, m});
    fill_gaussian(t, rng, sigma);
    t.set_requires_grad(true);
    return t;
}

// (B, C', H, H) -> (B, H*H, C'): spatial positions become a row-major token
// sequence, channels become the token dimension.
template <typename S>
inline TensorT<S> gait_tokens(Tape<S>* tape, const TensorT<S>& g) {
    if (g.ndim() != 4) {
        throw DimensionError("gait_tokens: need (B, C, H, W), got " + shape_str(g.shape()));
    }
    TensorT<S> t = permute(tape, g, {0, 2, 3, 1});  // (B, H, W, C)
    return reshape(tape, t, {g.dim(0), g.dim(2) * g.dim(3), g.dim(1)});
}

// ---------------------------------------------------------------------------
// Multi-head scaled dot-product attention
// ---------------------------------------------------------------------------

template <typename S>
struct MultiheadAttentionT {
    LinearT<S> q_proj, k_proj, v_proj, out_proj;
    int64_t model_dim = 0;
    int64_t heads = 1;

    MultiheadAttentionT() = default;

    MultiheadAttentionT(int64_t m, int64_t kv_dim, int64_t n_heads, Rng& rng)
        : model_dim(m), heads(n_heads) {
        if (n_heads < 1 || m % n_heads != 0) {
            throw ConfigError("attention: token dim " + std::to_string(m) +
                              " not divisible by " + std::to_string(n_heads) + " heads");
        }
        q_proj = LinearT<S>(m, m, rng, true, /*rectified=*/false);
        k_proj = LinearT<S>(kv_dim, m, rng, true, false);
        v_proj = LinearT<S>(kv_dim, m, rng, true, false);
        out_proj = LinearT<S>(m, m, rng, true, false);
    }

    // queries: (B, J, M); keys_values: (B, L, kv_dim) -> (B, J, M).
    // When attn_out is non-null the post-softmax attention weights
    // (B, heads, J, L) are appended for inspection.
    TensorT<S> forward(Tape<S>* tape, const TensorT<S>& queries,
                       const TensorT<S>& keys_values,
                       std::vector<TensorT<S>>* attn_out = nullptr) const {
        const int64_t b = queries.dim(0), j = queries.dim(1);
        const int64_t l = keys_values.dim(1);
        const int64_t dh = model_dim / heads;

        TensorT<S> q = q_proj.forward(tape, queries);      // (B, J, M)
        TensorT<S> k = k_proj.forward(tape, keys_values);  // (B, L, M)
        TensorT<S> v = v_proj.forward(tape, keys_values);  // (B, L, M)

        q = permute(tape, reshape(tape, q, {b, j, heads, dh}), {0, 2, 1, 3});  // (B,h,J,dh)
        k = permute(tape, reshape(tape, k, {b, l, heads, dh}), {0, 2, 3, 1});  // (B,h,dh,L)
        v = permute(tape, reshape(tape, v, {b, l, heads, dh}), {0, 2, 1, 3});  // (B,h,L,dh)

        TensorT<S> scores = matmul(tape, q, k);  // (B, h, J, L)
        scores = scale(tape, scores, S(1) / S(std::sqrt(double(dh))));
        TensorT<S> attn = softmax(tape, scores);
        if (attn_out) attn_out->push_back(attn);

        TensorT<S> ctx = matmul(tape, attn, v);                    // (B, h, J, dh)
        ctx = permute(tape, ctx, {0, 2, 1, 3});                    // (B, J, h, dh)
        ctx = reshape(tape, ctx, {b, j, model_dim});
        return out_proj.forward(tape, ctx);
    }

    void visit_params(const std::string& prefix, const ParamVisitor<S>& fn) {
        q_proj.visit_params(prefix + ".q", fn);
        k_proj.visit_params(prefix + ".k", fn);
        v_proj.visit_params(prefix + ".v", fn);
        out_proj.visit_params(prefix + ".out", fn);
    }
};

// ---------------------------------------------------------------------------
// Token refinement block: self-attention -> cross-attention -> MLP
// ---------------------------------------------------------------------------

template <typename S>
struct FusionBlockT {
    MultiheadAttentionT<S> self_attn;
    MultiheadAttentionT<S> cross_attn;
    LinearT<S> mlp1, mlp2;
    LayerNormT<S> ln_self, ln_cross, ln_mlp;
    bool use_self_attention = true;

    FusionBlockT() = default;

    FusionBlockT(int64_t m, int64_t gait_dim, int64_t n_heads, bool with_self, Rng& rng)
        : use_self_attention(with_self) {
        self_attn = MultiheadAttentionT<S>(m, m, n_heads, rng);
        cross_attn = MultiheadAttentionT<S>(m, gait_dim, n_heads, rng);
        mlp1 = LinearT<S>(m, m, rng, true, /*rectified=*/true);
        mlp2 = LinearT<S>(m, m, rng, true, /*rectified=*/false);
        ln_self = LayerNormT<S>(m);
        ln_cross = LayerNormT<S>(m);
        ln_mlp = LayerNormT<S>(m);
    }

    TensorT<S> forward(Tape<S>* tape, const TensorT<S>& tokens, const TensorT<S>& gait,
                       std::vector<TensorT<S>>* attn_out = nullptr) const {
        TensorT<S> t = tokens;
        if (use_self_attention) {
            TensorT<S> sa = self_attn.forward(tape, t, t, attn_out);
            t = ln_self.forward(tape, add(tape, t, sa));
        }
        TensorT<S> ca = cross_attn.forward(tape, t, gait, attn_out);
        t = ln_cross.forward(tape, add(tape, t, ca));
        TensorT<S> h = mlp2.forward(tape, relu(tape, mlp1.forward(tape, t)));
        return ln_mlp.forward(tape, add(tape, t, h));
    }

    void visit_params(const std::string& prefix, const ParamVisitor<S>& fn) {
        if (use_self_attention) {
            self_attn.visit_params(prefix + ".self_attn", fn);
            ln_self.visit_params(prefix + ".ln_self", fn);
        }
        cross_attn.visit_params(prefix + ".cross_attn", fn);
        ln_cross.visit_params(prefix + ".ln_cross", fn);
        mlp1.visit_params(prefix + ".mlp1", fn);
        mlp2.visit_params(prefix + ".mlp2", fn);
        ln_mlp.visit_params(prefix + ".ln_mlp", fn);
    }
};

template <typename S>
inline TensorT<S> run_blocks(Tape<S>* tape, const TensorT<S>& tokens, const TensorT<S>& gait,
                             const std::vector<FusionBlockT<S>>& blocks,
                             std::vector<TensorT<S>>* attn_out = nullptr) {
    if (blocks.empty()) {
        throw ConfigError("run_blocks: at least one token block required");
    }
    TensorT<S> t = tokens;
    for (const auto& blk : blocks) t = blk.forward(tape, t, gait, attn_out);
    return t;
}

// ---------------------------------------------------------------------------
// Horizontal pyramid pooling and gait head
// ---------------------------------------------------------------------------

// (B, C', H, H) -> (B, C', P=H): each horizontal band pooled by max + mean
// over its columns.
template <typename S>
inline TensorT<S> hpp(Tape<S>* tape, const TensorT<S>& g) {
    if (g.ndim() != 4) {
        throw DimensionError("hpp: need (B, C, H, W), got " + shape_str(g.shape()));
    }
    TensorT<S> mx = max_axis(tape, g, 3);
    TensorT<S> mn = mean_axis(tape, g, 3);
    return add(tape, mx, mn);
}

// Independent bias-free linear map C' -> C'' per part; weights (P, C', C'').
template <typename S>
struct GaitHeadT {
    TensorT<S> weights;
    int64_t parts = 0, in_dim = 0, out_dim = 0;

    GaitHeadT() = default;

    GaitHeadT(int64_t p, int64_t c_in, int64_t c_out, Rng& rng)
        : parts(p), in_dim(c_in), out_dim(c_out) {
        weights = TensorT<S>::zeros({p, c_in, c_out});
        init_xavier(weights, rng, c_in);
        weights.set_requires_grad(true);
    }

    // g_tilde: (B, C', P) -> (B, C'', P).
    TensorT<S> forward(Tape<S>* tape, const TensorT<S>& g_tilde) const {
        if (g_tilde.ndim() != 3 || g_tilde.dim(1) != in_dim || g_tilde.dim(2) != parts) {
            throw DimensionError("gait head: expected (B, " + std::to_string(in_dim) + ", " +
                                 std::to_string(parts) + "), got " + shape_str(g_tilde.shape()));
        }
        TensorT<S> x = permute(tape, g_tilde, {2, 0, 1});   // (P, B, C')
        TensorT<S> y = matmul(tape, x, weights);            // (P, B, C'')
        return permute(tape, y, {1, 2, 0});                 // (B, C'', P)
    }

    void visit_params(const std::string& prefix, const ParamVisitor<S>& fn) {
        fn(prefix + ".weights", weights);
    }
};

// ---------------------------------------------------------------------------
// Attribute heads
// ---------------------------------------------------------------------------

template <typename S>
struct AttributeLogitsT {
    TensorT<S> age;  // (B, 5)
    TensorT<S> sex;  // (B, 2)
    TensorT<S> bmi;  // (B, 4)
};

// Token-driven heads: one linear map per task token.
template <typename S>
struct AttributeHeadsT {
    LinearT<S> age_head, sex_head, bmi_head;

    AttributeHeadsT() = default;

    AttributeHeadsT(int64_t m, Rng& rng) {
        age_head = LinearT<S>(m, kAgeClasses, rng, true, /*rectified=*/false);
        sex_head = LinearT<S>(m, kSexClasses, rng, true, false);
        bmi_head = LinearT<S>(m, kBmiClasses, rng, true, false);
    }

    // tokens: (B, 3, M), ordered (age, sex, bmi).
    AttributeLogitsT<S> forward(Tape<S>* tape, const TensorT<S>& tokens) const {
        if (tokens.ndim() != 3 || tokens.dim(1) != kNumTasks) {
            throw DimensionError("attribute heads: need (B, 3, M), got " +
                                 shape_str(tokens.shape()));
        }
        AttributeLogitsT<S> out;
        out.age = age_head.forward(tape, select_index(tape, tokens, 1, 0));
        out.sex = sex_head.forward(tape, select_index(tape, tokens, 1, 1));
        out.bmi = bmi_head.forward(tape, select_index(tape, tokens, 1, 2));
        return out;
    }

    void visit_params(const std::string& prefix, const ParamVisitor<S>& fn) {
        age_head.visit_params(prefix + ".age", fn);
        sex_head.visit_params(prefix + ".sex", fn);
        bmi_head.visit_params(prefix + ".bmi", fn);
    }
};

// Baseline heads used when the token blocks are disabled: three separate
// three-layer MLPs (batch-norm + relu between layers) over flattened part
// descriptors.
template <typename S>
struct DirectAttributeHeadsT {
    struct Mlp {
        LinearT<S> fc1, fc2, fc3;
        BatchNormT<S> bn1, bn2;
    };
    Mlp age, sex, bmi;
    int64_t in_dim = 0;
    int64_t hidden1 = 256, hidden2 = 128;

    DirectAttributeHeadsT() = default;

    DirectAttributeHeadsT(int64_t flat_dim, Rng& rng) : in_dim(flat_dim) {
        age = make_mlp(flat_dim, kAgeClasses, rng);
        sex = make_mlp(flat_dim, kSexClasses, rng);
        bmi = make_mlp(flat_dim, kBmiClasses, rng);
    }

    // g_tilde: (B, C', P) flattened internally to (B, C'*P).
    AttributeLogitsT<S> forward(Tape<S>* tape, const TensorT<S>& g_tilde, bool training) {
        if (g_tilde.ndim() != 3 || g_tilde.dim(1) * g_tilde.dim(2) != in_dim) {
            throw DimensionError("direct attribute heads: expected (B, C', P) with C'*P = " +
                                 std::to_string(in_dim) + ", got " + shape_str(g_tilde.shape()));
        }
        TensorT<S> flat = reshape(tape, g_tilde, {g_tilde.dim(0), in_dim});
        AttributeLogitsT<S> out;
        out.age = run_mlp(tape, age, flat, training);
        out.sex = run_mlp(tape, sex, flat, training);
        out.bmi = run_mlp(tape, bmi, flat, training);
        return out;
    }

    void visit_params(const std::string& prefix, const ParamVisitor<S>& fn) {
        visit_mlp_params(prefix + ".age", age, fn);
        visit_mlp_params(prefix + ".sex", sex, fn);
        visit_mlp_params(prefix + ".bmi", bmi, fn);
    }

    void visit_buffers(const std::string& prefix, const ParamVisitor<S>& fn) {
        visit_mlp_buffers(prefix + ".age", age, fn);
        visit_mlp_buffers(prefix + ".sex", sex, fn);
        visit_mlp_buffers(prefix + ".bmi", bmi, fn);
    }

private:
    Mlp make_mlp(int64_t flat_dim, int64_t classes, Rng& rng) {
        Mlp m;
        m.fc1 = LinearT<S>(flat_dim, hidden1, rng);
        m.bn1 = BatchNormT<S>(hidden1);
        m.fc2 = LinearT<S>(hidden1, hidden2, rng);
        m.bn2 = BatchNormT<S>(hidden2);
        m.fc3 = LinearT<S>(hidden2, classes, rng, true, /*rectified=*/false);
        return m;
    }

    TensorT<S> run_mlp(Tape<S>* tape, Mlp& m, const TensorT<S>& x, bool training) {
        TensorT<S> h = relu(tape, m.bn1.forward(tape, m.fc1.forward(tape, x), training));
        h = relu(tape, m.bn2.forward(tape, m.fc2.forward(tape, h), training));
        return m.fc3.forward(tape, h);
    }

    void visit_mlp_params(const std::string& prefix, Mlp& m, const ParamVisitor<S>& fn) {
        m.fc1.visit_params(prefix + ".fc1", fn);
        m.bn1.visit_params(prefix + ".bn1", fn);
        m.fc2.visit_params(prefix + ".fc2", fn);
        m.bn2.visit_params(prefix + ".bn2", fn);
        m.fc3.visit_params(prefix + ".fc3", fn);
    }

    void visit_mlp_buffers(const std::string& prefix, Mlp& m, const ParamVisitor<S>& fn) {
        m.bn1.visit_buffers(prefix + ".bn1", fn);
        m.bn2.visit_buffers(prefix + ".bn2", fn);
    }
};

}  // namespace combogait
