// Whole-model assembly: configuration, forward pass, parameter registry,
// and the versioned checkpoint container.

#pragma once

#include <cstdio>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "combogait/encoders.hpp"
#include "combogait/fusion.hpp"
#include "combogait/io.hpp"
#include "combogait/multitask.hpp"

namespace combogait {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct ModelConfig {
    EncoderConfig encoder;
    int64_t smpl_hidden1 = 128;
    int64_t smpl_hidden2 = 256;
    int64_t smpl_embed_dim = 256;   // D'; must equal Hmax^2
    double dropout = 0.2;
    int64_t token_dim = 512;        // M
    int64_t heads = 4;
    int64_t blocks = 2;
    double token_sigma = 0.02;
    bool multitask_fusion = true;   // token blocks on/off (off -> direct MLP heads)
    bool self_attention = true;     // self-attention sublayer on/off
    int64_t gait_embed_dim = 256;   // C''
    int64_t n_train_identities = 0; // 0 -> no identity classifier attached

    int64_t out_h() const { return encoder.input_h / 4; }
    int64_t out_w() const { return encoder.input_w / 4; }
    int64_t hmax() const { return std::max(out_h(), out_w()); }
    int64_t parts() const { return hmax(); }
    int64_t channels() const { return encoder.channels.back(); }

    void validate() const {
        encoder.validate();
        if (smpl_embed_dim != hmax() * hmax()) {
            throw ConfigError("model: smpl embedding width " + std::to_string(smpl_embed_dim) +
                              " must equal " + std::to_string(hmax()) + "^2 = " +
                              std::to_string(hmax() * hmax()) +
                              " so it can be reshaped into a square fusion matrix");
        }
        if (smpl_hidden1 < 1 || smpl_hidden2 < 1) {
            throw ConfigError("model: smpl hidden widths must be positive");
        }
        if (dropout < 0.0 || dropout >= 1.0) {
            throw ConfigError("model: dropout must lie in [0, 1)");
        }
        if (token_dim < 1) throw ConfigError("model: token dim must be positive");
        if (heads < 1 || token_dim % heads != 0) {
            throw ConfigError("model: token dim " + std::to_string(token_dim) +
                              " not divisible by " + std::to_string(heads) + " heads");
        }
        if (blocks < 1) throw ConfigError("model: at least one token block required");
        if (token_sigma <= 0.0) throw ConfigError("model: token sigma must be positive");
        if (gait_embed_dim < 1) throw ConfigError("model: gait embedding dim must be positive");
        if (n_train_identities < 0) {
            throw ConfigError("model: identity count cannot be negative");
        }
    }

    // Canonical text form; the checkpoint embeds this and digests it.
    std::string canonical_text() const {
        std::ostringstream os;
        os << "encoder.kind=" << encoder.kind << "\n";
        os << "encoder.input_h=" << encoder.input_h << "\n";
        os << "encoder.input_w=" << encoder.input_w << "\n";
        os << "encoder.channels=";
        for (size_t i = 0; i < encoder.channels.size(); ++i) {
            if (i) os << ",";
            os << encoder.channels[i];
        }
        os << "\n";
        os << "smpl_hidden1=" << smpl_hidden1 << "\n";
        os << "smpl_hidden2=" << smpl_hidden2 << "\n";
        os << "smpl_embed_dim=" << smpl_embed_dim << "\n";
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%.17g", dropout);
        os << "dropout=" << buf << "\n";
        os << "token_dim=" << token_dim << "\n";
        os << "heads=" << heads << "\n";
        os << "blocks=" << blocks << "\n";
        std::snprintf(buf, sizeof(buf), "%.17g", token_sigma);
        os << "token_sigma=" << buf << "\n";
        os << "multitask_fusion=" << (multitask_fusion ? "true" : "false") << "\n";
        os << "self_attention=" << (self_attention ? "true" : "false") << "\n";
        os << "gait_embed_dim=" << gait_embed_dim << "\n";
        os << "n_train_identities=" << n_train_identities << "\n";
        return os.str();
    }

    static ModelConfig from_canonical_text(const std::string& text);

    // The full-scale instantiation (silhouette channels raised to 512,
    // token dim 512); used by the shape-conformance checks.
    static ModelConfig full_scale() {
        ModelConfig cfg;
        cfg.encoder.channels = {64, 128, 512};
        cfg.token_dim = 512;
        return cfg;
    }
};

inline ModelConfig ModelConfig::from_canonical_text(const std::string& text) {
    ModelConfig cfg;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos) {
            throw FormatError("checkpoint config: missing '=' in line '" + line + "'", 0);
        }
        const std::string key = line.substr(0, eq);
        const std::string val = line.substr(eq + 1);
        if (key == "encoder.kind") {
            cfg.encoder.kind = val;
        } else if (key == "encoder.input_h") {
            cfg.encoder.input_h = std::stoll(val);
        } else if (key == "encoder.input_w") {
            cfg.encoder.input_w = std::stoll(val);
        } else if (key == "encoder.channels") {
            cfg.encoder.channels.clear();
            std::istringstream cs(val);
            std::string tok;
            while (std::getline(cs, tok, ',')) cfg.encoder.channels.push_back(std::stoll(tok));
        } else if (key == "smpl_hidden1") {
            cfg.smpl_hidden1 = std::stoll(val);
        } else if (key == "smpl_hidden2") {
            cfg.smpl_hidden2 = std::stoll(val);
        } else if (key == "smpl_embed_dim") {
            cfg.smpl_embed_dim = std::stoll(val);
        } else if (key == "dropout") {
            cfg.dropout = std::stod(val);
        } else if (key == "token_dim") {
            cfg.token_dim = std::stoll(val);
        } else if (key == "heads") {
            cfg.heads = std::stoll(val);
        } else if (key == "blocks") {
            cfg.blocks = std::stoll(val);
        } else if (key == "token_sigma") {
            cfg.token_sigma = std::stod(val);
        } else if (key == "multitask_fusion") {
            cfg.multitask_fusion = (val == "true");
        } else if (key == "self_attention") {
            cfg.self_attention = (val == "true");
        } else if (key == "gait_embed_dim") {
            cfg.gait_embed_dim = std::stoll(val);
        } else if (key == "n_train_identities") {
            cfg.n_train_identities = std::stoll(val);
        } else {
            throw FormatError("checkpoint config: unknown key '" + key + "'", 0);
        }
    }
    return cfg;
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

template <typename S>
struct ForwardOutT {
    TensorT<S> f_gait;            // (B, C'', P)
    AttributeLogitsT<S> attrs;
};

// Optional intermediate capture for tests and diagnostics.
template <typename S>
struct ForwardTraceT {
    TensorT<S> e_sil;         // (B, C, T, H', W')
    TensorT<S> e_smpl;        // (B, T, D')
    TensorT<S> sil_padded;    // (B, C, T, Hmax, Hmax)
    TensorT<S> e_fused;       // (B, C, T, Hmax, Hmax)
    TensorT<S> g_fused;       // (B, C, Hmax, Hmax)
    TensorT<S> g_tilde;       // (B, C', P)
    TensorT<S> tokens_final;  // (B, 3, M) when token blocks enabled
    std::vector<TensorT<S>> attn_weights;  // one (B, h, J, L) per attention call
};

// Per-part identity logits for the training-time gait cross-entropy.
template <typename S>
struct IdentityClassifierT {
    TensorT<S> weights;  // (P, C'', N)
    int64_t parts = 0, in_dim = 0, n_ids = 0;

    IdentityClassifierT() = default;

    IdentityClassifierT(int64_t p, int64_t c, int64_t n, Rng& rng)
        : parts(p), in_dim(c), n_ids(n) {
        weights = TensorT<S>::zeros({p, c, n});
        init_xavier(weights, rng, c);
        weights.set_requires_grad(true);
    }

    // f_gait: (B, C'', P) -> logits (P, B, N).
    TensorT<S> forward(Tape<S>* tape, const TensorT<S>& f_gait) const {
        TensorT<S> x = permute(tape, f_gait, {2, 0, 1});  // (P, B, C'')
        return matmul(tape, x, weights);
    }

    void visit_params(const std::string& prefix, const ParamVisitor<S>& fn) {
        fn(prefix + ".weights", weights);
    }
};

template <typename S>
struct ComboGaitModelT {
    ModelConfig cfg;
    std::unique_ptr<SilhouetteEncoderT<S>> sil_encoder;
    SmplEncoderT<S> smpl_encoder;
    TensorT<S> task_tokens;                   // (3, M)
    std::vector<FusionBlockT<S>> blocks;
    GaitHeadT<S> gait_head;
    AttributeHeadsT<S> attr_heads;            // token path
    DirectAttributeHeadsT<S> direct_heads;    // baseline path
    IdentityClassifierT<S> id_classifier;     // present iff n_train_identities > 0

    static ComboGaitModelT create(const ModelConfig& config, uint64_t init_seed) {
        ModelConfig cfg = config;
        cfg.validate();
        Rng rng(Rng::mix(init_seed, 0x6d6f64656cULL));
        ComboGaitModelT m;
        m.cfg = cfg;
        m.sil_encoder = make_encoder<S>(cfg.encoder, rng);
        m.smpl_encoder = SmplEncoderT<S>(cfg.smpl_hidden1, cfg.smpl_hidden2,
                                         cfg.smpl_embed_dim, cfg.dropout, rng);
        const int64_t c_prime = m.sil_encoder->out_channels();
        if (cfg.multitask_fusion) {
            m.task_tokens = init_task_tokens<S>(kNumTasks, cfg.token_dim, cfg.token_sigma, rng);
            m.blocks.reserve(size_t(cfg.blocks));
            for (int64_t i = 0; i < cfg.blocks; ++i) {
                m.blocks.emplace_back(cfg.token_dim, c_prime, cfg.heads,
                                      cfg.self_attention, rng);
            }
            m.attr_heads = AttributeHeadsT<S>(cfg.token_dim, rng);
        } else {
            m.direct_heads = DirectAttributeHeadsT<S>(c_prime * cfg.parts(), rng);
        }
        m.gait_head = GaitHeadT<S>(cfg.parts(), c_prime, cfg.gait_embed_dim, rng);
        if (cfg.n_train_identities > 0) {
            m.id_classifier = IdentityClassifierT<S>(cfg.parts(), cfg.gait_embed_dim,
                                                     cfg.n_train_identities, rng);
        }
        return m;
    }

    // sil: (B, T, H, W) binary masks; smpl: (B, T, 82).
    ForwardOutT<S> forward(Tape<S>* tape, const TensorT<S>& sil, const TensorT<S>& smpl,
                           bool training, Rng* dropout_rng,
                           ForwardTraceT<S>* trace = nullptr) {
        if (sil.ndim() != 4 || smpl.ndim() != 3 || sil.dim(0) != smpl.dim(0) ||
            sil.dim(1) != smpl.dim(1)) {
            throw DimensionError("model: silhouette " + shape_str(sil.shape()) +
                                 " and smpl " + shape_str(smpl.shape()) +
                                 " batches are misaligned");
        }
        TensorT<S> e_sil = sil_encoder->forward(tape, sil, training);
        TensorT<S> e_smpl = smpl_encoder.forward(tape, smpl, training, dropout_rng);

        TensorT<S> sil_sq = pad_to_square(tape, e_sil);
        TensorT<S> m = smpl_to_matrix(tape, e_smpl, sil_sq.dim(3));
        m = broadcast_channels(tape, m, sil_sq.dim(1));
        TensorT<S> e_fused = fuse_multiplicative(tape, sil_sq, m);
        TensorT<S> g_fused = temporal_pool(tape, e_fused);

        TensorT<S> g_tilde = hpp(tape, g_fused);
        ForwardOutT<S> out;
        out.f_gait = gait_head.forward(tape, g_tilde);

        if (trace) {
            trace->e_sil = e_sil;
            trace->e_smpl = e_smpl;
            trace->sil_padded = sil_sq;
            trace->e_fused = e_fused;
            trace->g_fused = g_fused;
            trace->g_tilde = g_tilde;
        }

        if (cfg.multitask_fusion) {
            TensorT<S> tokens = reshape(tape, task_tokens, {1, kNumTasks, cfg.token_dim});
            tokens = broadcast_axis(tape, tokens, 0, sil.dim(0));
            TensorT<S> gt = gait_tokens(tape, g_fused);
            tokens = run_blocks(tape, tokens, gt, blocks,
                                trace ? &trace->attn_weights : nullptr);
            if (trace) trace->tokens_final = tokens;
            out.attrs = attr_heads.forward(tape, tokens);
        } else {
            out.attrs = direct_heads.forward(tape, g_tilde, training);
        }
        return out;
    }

    void visit_params(const ParamVisitor<S>& fn) {
        sil_encoder->visit_params("sil_encoder", fn);
        smpl_encoder.visit_params("smpl_encoder", fn);
        if (cfg.multitask_fusion) {
            fn("task_tokens", task_tokens);
            for (size_t i = 0; i < blocks.size(); ++i) {
                blocks[i].visit_params("block" + std::to_string(i), fn);
            }
            attr_heads.visit_params("attr_heads", fn);
        } else {
            direct_heads.visit_params("direct_heads", fn);
        }
        gait_head.visit_params("gait_head", fn);
        if (cfg.n_train_identities > 0) {
            id_classifier.visit_params("id_classifier", fn);
        }
    }

    void visit_buffers(const ParamVisitor<S>& fn) {
        sil_encoder->visit_buffers("sil_encoder", fn);
        smpl_encoder.visit_buffers("smpl_encoder", fn);
        if (!cfg.multitask_fusion) {
            direct_heads.visit_buffers("direct_heads", fn);
        }
    }

    void zero_grads() {
        visit_params([](const std::string&, TensorT<S>& t) { t.zero_grad(); });
    }

    int64_t param_count() {
        int64_t n = 0;
        visit_params([&n](const std::string&, TensorT<S>& t) { n += t.numel(); });
        return n;
    }
};

// ---------------------------------------------------------------------------
// Checkpoint container
// ---------------------------------------------------------------------------
//
// Layout (all integers little-endian):
//   magic "CGCK" | u16 version=1 | u64 config digest | u32 config text length
//   | config text | u32 tensor count | tensors
// Each tensor: u16 name length | name | u8 ndim | u32 dims[ndim]
//   | f32 values (row-major)

constexpr uint16_t kCheckpointVersion = 1;

template <typename S>
inline void save_checkpoint(const std::string& path, ComboGaitModelT<S>& model) {
    std::string out;
    out += "CGCK";
    detail::put_u16(out, kCheckpointVersion);
    const std::string cfg_text = model.cfg.canonical_text();
    detail::put_u64(out, fnv1a64(cfg_text));
    detail::put_u32(out, uint32_t(cfg_text.size()));
    out += cfg_text;

    std::vector<std::pair<std::string, TensorT<S>*>> tensors;
    model.visit_params([&](const std::string& name, TensorT<S>& t) {
        tensors.emplace_back(name, &t);
    });
    model.visit_buffers([&](const std::string& name, TensorT<S>& t) {
        tensors.emplace_back(name, &t);
    });
    detail::put_u32(out, uint32_t(tensors.size()));
    for (auto& [name, t] : tensors) {
        detail::put_u16(out, uint16_t(name.size()));
        out += name;
        out.push_back(char(t->ndim()));
        for (int i = 0; i < t->ndim(); ++i) detail::put_u32(out, uint32_t(t->dim(i)));
        for (S v : t->values()) detail::put_f32(out, float(v));
    }
    detail::write_file_bytes(path, out);
}

// Reconstructs the model from the embedded config, then fills every named
// tensor. Name or shape mismatches indicate a corrupted or foreign file.
template <typename S>
inline ComboGaitModelT<S> load_checkpoint(const std::string& path) {
    const std::string buf = detail::read_file_bytes(path);
    detail::ByteReader r(buf);
    if (r.bytes(4, "magic") != "CGCK") {
        throw FormatError("checkpoint: bad magic, expected 'CGCK'", 0);
    }
    const uint16_t version = r.u16("version");
    if (version != kCheckpointVersion) {
        throw FormatError("checkpoint: unsupported version " + std::to_string(version), 4);
    }
    const uint64_t digest = r.u64("config digest");
    const uint32_t cfg_len = r.u32("config length");
    const size_t cfg_at = r.pos;
    const std::string cfg_text = r.bytes(cfg_len, "config text");
    if (fnv1a64(cfg_text) != digest) {
        throw FormatError("checkpoint: config digest mismatch", cfg_at);
    }
    const ModelConfig cfg = ModelConfig::from_canonical_text(cfg_text);

    ComboGaitModelT<S> model = ComboGaitModelT<S>::create(cfg, /*init_seed=*/0);
    std::map<std::string, TensorT<S>*> by_name;
    model.visit_params([&](const std::string& name, TensorT<S>& t) { by_name[name] = &t; });
    model.visit_buffers([&](const std::string& name, TensorT<S>& t) { by_name[name] = &t; });

    const uint32_t count = r.u32("tensor count");
    if (count != by_name.size()) {
        throw FormatError("checkpoint: holds " + std::to_string(count) + " tensors, model has " +
                          std::to_string(by_name.size()), r.pos - 4);
    }
    for (uint32_t i = 0; i < count; ++i) {
        const size_t entry_at = r.pos;
        const uint16_t name_len = r.u16("tensor name length");
        const std::string name = r.bytes(name_len, "tensor name");
        auto it = by_name.find(name);
        if (it == by_name.end()) {
            throw FormatError("checkpoint: unknown tensor '" + name + "'", entry_at);
        }
        const uint8_t ndim = r.u8("tensor rank");
        std::vector<int64_t> dims(ndim);
        for (uint8_t d = 0; d < ndim; ++d) dims[d] = int64_t(r.u32("tensor extent"));
        TensorT<S>* dst = it->second;
        if (dims != dst->shape()) {
            throw FormatError("checkpoint: tensor '" + name + "' has shape " + shape_str(dims) +
                              ", model expects " + shape_str(dst->shape()), entry_at);
        }
        for (S& v : dst->values()) v = S(r.f32("tensor values"));
    }
    if (r.pos != buf.size()) {
        throw FormatError("checkpoint: trailing bytes after last tensor", r.pos);
    }
    return model;
}

}  // namespace combogait
