// Training stack: in-memory dataset, identity-balanced batch sampling,
// the combined loss (batch-all triplet + identity cross-entropy +
// attribute cross-entropies), SGD with momentum and weight decay, and the
// deterministic training loop with checkpointing and a loss trace.

#pragma once

#include <cmath>
#include <filesystem>
#include <iostream>
#include <map>

#include "combogait/data.hpp"
#include "combogait/model.hpp"

namespace combogait {

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

struct DatasetItem {
    ManifestEntry entry;
    SilhouetteSequence sil;
    SmplSequence smpl;
    AttributeLabels labels;
    int64_t identity = -1;  // training identity index; -1 outside the train split
};

struct Dataset {
    std::string base_dir;
    std::vector<DatasetItem> items;
    std::vector<std::string> identity_names;  // train subjects, first-appearance order
    std::map<std::string, int64_t> identity_of;
    std::vector<std::vector<int64_t>> train_items_by_identity;  // item indices
    int64_t input_h = 0;
    int64_t input_w = 0;

    int64_t n_identities() const { return int64_t(identity_names.size()); }

    static Dataset load(const std::string& manifest_path) {
        Dataset ds;
        ds.base_dir = std::filesystem::path(manifest_path).parent_path().string();
        const auto entries = read_manifest(manifest_path);
        if (entries.empty()) throw DataError("dataset: manifest lists no sequences");
        for (const auto& e : entries) {
            DatasetItem item;
            item.entry = e;
            const std::string prefix = ds.base_dir.empty() ? "" : ds.base_dir + "/";
            item.sil = read_silhouette(prefix + e.sequence_path);
            item.smpl = read_smpl(prefix + e.smpl_path);
            if (item.sil.frames != item.smpl.frames) {
                throw DataError("dataset: '" + e.sequence_path + "' has " +
                                std::to_string(item.sil.frames) + " silhouette frames but '" +
                                e.smpl_path + "' has " + std::to_string(item.smpl.frames));
            }
            if (ds.items.empty()) {
                ds.input_h = item.sil.height;
                ds.input_w = item.sil.width;
            } else if (item.sil.height != ds.input_h || item.sil.width != ds.input_w) {
                throw DataError("dataset: '" + e.sequence_path + "' frame size " +
                                std::to_string(item.sil.height) + "x" +
                                std::to_string(item.sil.width) + " differs from " +
                                std::to_string(ds.input_h) + "x" + std::to_string(ds.input_w));
            }
            item.labels = labels_from_meta(e.meta());
            if (e.split == "train") {
                auto it = ds.identity_of.find(e.subject_id);
                if (it == ds.identity_of.end()) {
                    it = ds.identity_of.emplace(e.subject_id, ds.n_identities()).first;
                    ds.identity_names.push_back(e.subject_id);
                    ds.train_items_by_identity.emplace_back();
                }
                item.identity = it->second;
                ds.train_items_by_identity[size_t(it->second)].push_back(
                    int64_t(ds.items.size()));
            }
            ds.items.push_back(std::move(item));
        }
        return ds;
    }
};

// ---------------------------------------------------------------------------
// Batch sampling
// ---------------------------------------------------------------------------

template <typename S>
struct BatchT {
    TensorT<S> sil;   // (B, T, H, W)
    TensorT<S> smpl;  // (B, T, 82)
    std::vector<int64_t> ids;      // identity index per sample
    std::vector<int64_t> age_cls;
    std::vector<int64_t> sex_cls;
    std::vector<int64_t> bmi_cls;
};

// P identities uniformly without replacement, K sequences each (without
// replacement when the identity has at least K, otherwise with), and a
// contiguous T-frame window per sequence (wrap-around when shorter).
template <typename S>
BatchT<S> sample_batch(const Dataset& ds, int64_t n_subjects, int64_t seqs_per_subject,
                       int64_t frames, Rng& rng) {
    if (ds.items.empty()) throw DataError("sample_batch: empty dataset");
    if (n_subjects < 1 || seqs_per_subject < 1 || frames < 1) {
        throw ValidationError("sample_batch: batch dimensions must be positive");
    }
    if (n_subjects > ds.n_identities()) {
        throw ValidationError("sample_batch: requested " + std::to_string(n_subjects) +
                              " identities but the train split has only " +
                              std::to_string(ds.n_identities()));
    }

    // Partial Fisher-Yates for the identity draw.
    std::vector<int64_t> pool(size_t(ds.n_identities()));
    for (size_t i = 0; i < pool.size(); ++i) pool[i] = int64_t(i);
    for (int64_t i = 0; i < n_subjects; ++i) {
        const int64_t j = i + int64_t(rng.uniform_int(uint64_t(pool.size()) - uint64_t(i)));
        std::swap(pool[size_t(i)], pool[size_t(j)]);
    }

    const int64_t batch = n_subjects * seqs_per_subject;
    BatchT<S> out;
    out.sil = TensorT<S>::zeros({batch, frames, ds.input_h, ds.input_w});
    out.smpl = TensorT<S>::zeros({batch, frames, kSmplParamDim});
    S* sil_data = out.sil.values().data();
    S* smpl_data = out.smpl.values().data();

    int64_t row = 0;
    for (int64_t pi = 0; pi < n_subjects; ++pi) {
        const int64_t ident = pool[size_t(pi)];
        const auto& seqs = ds.train_items_by_identity[size_t(ident)];
        std::vector<int64_t> chosen;
        if (int64_t(seqs.size()) >= seqs_per_subject) {
            std::vector<int64_t> local(seqs);
            for (int64_t i = 0; i < seqs_per_subject; ++i) {
                const int64_t j =
                    i + int64_t(rng.uniform_int(uint64_t(local.size()) - uint64_t(i)));
                std::swap(local[size_t(i)], local[size_t(j)]);
                chosen.push_back(local[size_t(i)]);
            }
        } else {
            for (int64_t i = 0; i < seqs_per_subject; ++i) {
                chosen.push_back(seqs[rng.uniform_int(uint64_t(seqs.size()))]);
            }
        }
        for (const int64_t item_idx : chosen) {
            const DatasetItem& item = ds.items[size_t(item_idx)];
            const int64_t len = item.sil.frames;
            const int64_t frame_px = ds.input_h * ds.input_w;
            int64_t start;
            if (len >= frames) {
                start = int64_t(rng.uniform_int(uint64_t(len - frames + 1)));
            } else {
                start = int64_t(rng.uniform_int(uint64_t(len)));
            }
            for (int64_t t = 0; t < frames; ++t) {
                const int64_t src = (start + t) % len;
                const uint8_t* mf = item.sil.mask.data() + src * frame_px;
                S* dst = sil_data + (row * frames + t) * frame_px;
                for (int64_t i = 0; i < frame_px; ++i) dst[i] = S(mf[i]);
                const float* sf = item.smpl.values.data() + src * kSmplParamDim;
                S* sd = smpl_data + (row * frames + t) * kSmplParamDim;
                for (int64_t i = 0; i < kSmplParamDim; ++i) sd[i] = S(sf[i]);
            }
            out.ids.push_back(ident);
            out.age_cls.push_back(item.labels.age_class);
            out.sex_cls.push_back(item.labels.sex_class);
            out.bmi_cls.push_back(item.labels.bmi_class);
            ++row;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

struct LossWeights {
    double alpha1 = 1.0;   // triplet
    double alpha2 = 1.0;   // identity cross-entropy
    double beta1 = 0.01;   // age
    double beta2 = 0.01;   // sex
    double beta3 = 0.01;   // bmi

    void validate() const {
        for (double w : {alpha1, alpha2, beta1, beta2, beta3}) {
            if (w < 0.0 || !std::isfinite(w)) {
                throw ConfigError("loss weights must be finite and non-negative");
            }
        }
    }
};

// Batch-all triplet loss over part embeddings. f_gait is (B, C'', P); per
// part, every valid (anchor, positive, negative) triple contributes
// max(0, d_ap - d_an + margin); the part loss averages the triples whose
// hinge is strictly positive, and the total averages the parts. A batch
// with no valid triple yields a constant 0 with a warning.
template <typename S>
TensorT<S> batch_all_triplet(Tape<S>* tape, const TensorT<S>& f_gait,
                             const std::vector<int64_t>& ids, double margin = 0.2) {
    if (f_gait.ndim() != 3) {
        throw DimensionError("batch_all_triplet: embeddings must be (batch, dim, parts)");
    }
    const int64_t b = f_gait.shape()[0];
    const int64_t parts = f_gait.shape()[2];
    if (int64_t(ids.size()) != b) {
        throw DimensionError("batch_all_triplet: " + std::to_string(ids.size()) +
                             " labels for batch of " + std::to_string(b));
    }

    std::vector<std::pair<int64_t, int64_t>> anchor_pos;
    std::vector<int64_t> triple_a, triple_p, triple_n;
    for (int64_t a = 0; a < b; ++a) {
        for (int64_t p = 0; p < b; ++p) {
            if (p == a || ids[size_t(p)] != ids[size_t(a)]) continue;
            for (int64_t n = 0; n < b; ++n) {
                if (ids[size_t(n)] == ids[size_t(a)]) continue;
                triple_a.push_back(a);
                triple_p.push_back(p);
                triple_n.push_back(n);
            }
        }
    }
    if (triple_a.empty()) {
        warn_once("batch holds no valid (anchor, positive, negative) triple; "
                  "triplet loss is 0");
        return TensorT<S>::scalar(S(0));
    }

    // Pairwise squared distances per part via the Gram matrix.
    auto fp = permute(tape, f_gait, {2, 0, 1});                    // (P, B, C'')
    auto sq = sum_axis(tape, mul(tape, fp, fp), 2, false);         // (P, B)
    auto gram = matmul(tape, fp, permute(tape, fp, {0, 2, 1}));    // (P, B, B)
    auto d2 = add(tape, add(tape, reshape(tape, sq, {parts, b, 1}),
                            reshape(tape, sq, {parts, 1, b})),
                  scale(tape, gram, S(-2)));
    auto dist = sqrt_elem(tape, add_const(tape, relu(tape, d2), S(1e-12)));  // (P, B, B)

    const int64_t n_tri = int64_t(triple_a.size());
    std::vector<int64_t> ap_idx, an_idx;
    ap_idx.reserve(size_t(parts * n_tri));
    an_idx.reserve(size_t(parts * n_tri));
    for (int64_t p = 0; p < parts; ++p) {
        const int64_t base = p * b * b;
        for (int64_t i = 0; i < n_tri; ++i) {
            ap_idx.push_back(base + triple_a[size_t(i)] * b + triple_p[size_t(i)]);
            an_idx.push_back(base + triple_a[size_t(i)] * b + triple_n[size_t(i)]);
        }
    }
    auto d_ap = take(tape, dist, ap_idx);
    auto d_an = take(tape, dist, an_idx);
    auto hinge = relu(tape, add_const(tape, sub(tape, d_ap, d_an), S(margin)));

    // Per-part mean over strictly positive hinges, then mean over parts.
    // The counts are read off the forward values and treated as constants.
    std::vector<S> weights(size_t(parts * n_tri), S(0));
    const auto& hv = hinge.values();
    for (int64_t p = 0; p < parts; ++p) {
        int64_t count = 0;
        for (int64_t i = 0; i < n_tri; ++i) {
            if (hv[size_t(p * n_tri + i)] > S(0)) ++count;
        }
        if (count == 0) continue;
        const S w = S(1) / (S(count) * S(parts));
        for (int64_t i = 0; i < n_tri; ++i) weights[size_t(p * n_tri + i)] = w;
    }
    auto w_const = TensorT<S>::from_values({parts * n_tri}, std::move(weights));
    return sum_all(tape, mul(tape, hinge, w_const));
}

// Mean softmax cross-entropy of (B, Q) logits against integer labels.
template <typename S>
TensorT<S> cross_entropy(Tape<S>* tape, const TensorT<S>& logits,
                         const std::vector<int64_t>& labels) {
    if (logits.ndim() != 2) throw DimensionError("cross_entropy: logits must be 2-D");
    const int64_t b = logits.shape()[0];
    const int64_t q = logits.shape()[1];
    if (int64_t(labels.size()) != b) {
        throw DimensionError("cross_entropy: " + std::to_string(labels.size()) +
                             " labels for batch of " + std::to_string(b));
    }
    std::vector<int64_t> idx(static_cast<size_t>(b));
    for (int64_t i = 0; i < b; ++i) {
        const int64_t lab = labels[size_t(i)];
        if (lab < 0 || lab >= q) {
            throw LabelError("cross_entropy: label " + std::to_string(lab) +
                             " outside [0, " + std::to_string(q) + ")");
        }
        idx[size_t(i)] = i * q + lab;
    }
    auto picked = take(tape, log_softmax(tape, logits), idx);
    return scale(tape, mean_all(tape, picked), S(-1));
}

// Identity cross-entropy through the per-part classifier: mean over parts
// and batch of the per-part softmax CE.
template <typename S>
TensorT<S> gait_ce(Tape<S>* tape, const TensorT<S>& f_gait, const std::vector<int64_t>& ids,
                   IdentityClassifierT<S>& clf) {
    const int64_t n_classes = clf.weights.shape()[2];
    for (const int64_t ident : ids) {
        if (ident < 0 || ident >= n_classes) {
            throw LabelError("gait_ce: identity " + std::to_string(ident) + " outside [0, " +
                             std::to_string(n_classes) + ")");
        }
    }
    auto logits = clf.forward(tape, f_gait);  // (P, B, N)
    const int64_t parts = logits.shape()[0];
    const int64_t b = logits.shape()[1];
    auto logp = log_softmax(tape, logits);
    std::vector<int64_t> idx;
    idx.reserve(size_t(parts * b));
    for (int64_t p = 0; p < parts; ++p) {
        for (int64_t i = 0; i < b; ++i) {
            idx.push_back(p * b * n_classes + i * n_classes + ids[size_t(i)]);
        }
    }
    auto picked = take(tape, logp, idx);
    return scale(tape, mean_all(tape, picked), S(-1));
}

template <typename S>
struct AttributeLossesT {
    TensorT<S> age, sex, bmi;
};

template <typename S>
AttributeLossesT<S> attribute_ce(Tape<S>* tape, const AttributeLogitsT<S>& logits,
                                 const std::vector<int64_t>& age_cls,
                                 const std::vector<int64_t>& sex_cls,
                                 const std::vector<int64_t>& bmi_cls) {
    AttributeLossesT<S> out;
    out.age = cross_entropy(tape, logits.age, age_cls);
    out.sex = cross_entropy(tape, logits.sex, sex_cls);
    out.bmi = cross_entropy(tape, logits.bmi, bmi_cls);
    return out;
}

// Weighted sum of the five loss terms.
template <typename S>
TensorT<S> combo_loss(Tape<S>* tape, const TensorT<S>& tri, const TensorT<S>& ce_gait,
                      const TensorT<S>& age, const TensorT<S>& sex, const TensorT<S>& bmi,
                      const LossWeights& w) {
    w.validate();
    auto total = add(tape, scale(tape, tri, S(w.alpha1)), scale(tape, ce_gait, S(w.alpha2)));
    total = add(tape, total, scale(tape, age, S(w.beta1)));
    total = add(tape, total, scale(tape, sex, S(w.beta2)));
    total = add(tape, total, scale(tape, bmi, S(w.beta3)));
    return total;
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

struct TrainConfig {
    int64_t iterations = 500;
    double lr = 0.01;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    int64_t batch_p = 16;  // identities per batch
    int64_t batch_k = 4;   // sequences per identity
    int64_t frames = 30;   // sampled window length
    double margin = 0.2;
    uint64_t seed = 1;
    int64_t checkpoint_every = 0;  // 0: only the final checkpoint
    std::string checkpoint_path;
    std::string trace_path;

    void validate() const {
        if (iterations < 0) throw ConfigError("train: iterations cannot be negative");
        if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("train: lr must be positive");
        if (momentum < 0.0 || momentum >= 1.0) {
            throw ConfigError("train: momentum must lie in [0, 1)");
        }
        if (weight_decay < 0.0) throw ConfigError("train: weight decay cannot be negative");
        if (batch_p < 1 || batch_k < 1) throw ConfigError("train: batch shape must be positive");
        if (frames < 1) throw ConfigError("train: frame window must be positive");
        if (margin < 0.0) throw ConfigError("train: margin cannot be negative");
        if (checkpoint_every < 0) {
            throw ConfigError("train: checkpoint interval cannot be negative");
        }
    }
};

template <typename S>
struct SgdStateT {
    std::map<std::string, std::vector<S>> velocity;
};

// v <- momentum*v + (grad + weight_decay*param); param <- param - lr*v.
template <typename S>
void sgd_update(std::vector<S>& param, const std::vector<S>& grad, std::vector<S>& velocity,
                double lr, double momentum, double weight_decay) {
    if (velocity.size() != param.size()) velocity.assign(param.size(), S(0));
    for (size_t i = 0; i < param.size(); ++i) {
        velocity[i] = S(momentum) * velocity[i] + (grad[i] + S(weight_decay) * param[i]);
        param[i] -= S(lr) * velocity[i];
    }
}

template <typename S>
void sgd_step(ComboGaitModelT<S>& model, const TrainConfig& cfg, SgdStateT<S>& state) {
    model.visit_params([&](const std::string& name, TensorT<S>& p) {
        if (!p.has_grad()) return;  // parameter did not participate in this graph
        sgd_update(p.values(), p.grad(), state.velocity[name], cfg.lr, cfg.momentum,
                   cfg.weight_decay);
    });
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TraceRow {
    int64_t iteration = 0;
    double loss_total = 0, loss_tri = 0, loss_ce_gait = 0;
    double loss_age = 0, loss_sex = 0, loss_bmi = 0;
};

inline void write_trace(const std::string& path, const std::vector<TraceRow>& rows) {
    std::string text = "iteration,loss_total,loss_tri,loss_ce_gait,loss_age,loss_sex,loss_bmi\n";
    char buf[64];
    for (const auto& r : rows) {
        text += std::to_string(r.iteration);
        for (double v : {r.loss_total, r.loss_tri, r.loss_ce_gait, r.loss_age, r.loss_sex,
                         r.loss_bmi}) {
            std::snprintf(buf, sizeof(buf), ",%.17g", v);
            text += buf;
        }
        text += "\n";
    }
    write_file_bytes(path, text);
}

// Runs the sample -> forward -> loss -> backward -> SGD loop. Aborts on a
// non-finite loss naming the first offending term. Returns the loss trace;
// persists it and checkpoints when the config carries paths.
template <typename S>
std::vector<TraceRow> train(ComboGaitModelT<S>& model, const Dataset& ds,
                            const TrainConfig& cfg, const LossWeights& weights) {
    cfg.validate();
    weights.validate();
    if (ds.items.empty()) throw DataError("train: empty dataset");
    if (ds.n_identities() == 0) throw DataError("train: no train-split sequences");
    if (model.cfg.n_train_identities != ds.n_identities()) {
        throw ConfigError("train: model was built for " +
                          std::to_string(model.cfg.n_train_identities) +
                          " identities but the dataset has " +
                          std::to_string(ds.n_identities()));
    }

    Rng batch_rng(Rng::mix(cfg.seed, 0xba7c68a11dULL));
    Rng dropout_rng(Rng::mix(cfg.seed, 0xd26f0a57ULL));
    SgdStateT<S> state;
    std::vector<TraceRow> trace;
    trace.reserve(size_t(cfg.iterations));

    for (int64_t it = 1; it <= cfg.iterations; ++it) {
        auto batch = sample_batch<S>(ds, cfg.batch_p, cfg.batch_k, cfg.frames, batch_rng);
        Tape<S> tape;
        auto out = model.forward(&tape, batch.sil, batch.smpl, /*training=*/true,
                                 &dropout_rng);
        auto tri = batch_all_triplet(&tape, out.f_gait, batch.ids, cfg.margin);
        auto ce = gait_ce(&tape, out.f_gait, batch.ids, model.id_classifier);
        auto attr = attribute_ce(&tape, out.attrs, batch.age_cls, batch.sex_cls,
                                 batch.bmi_cls);
        auto total = combo_loss(&tape, tri, ce, attr.age, attr.sex, attr.bmi, weights);

        TraceRow row;
        row.iteration = it;
        row.loss_tri = double(tri.value_at({0}));
        row.loss_ce_gait = double(ce.value_at({0}));
        row.loss_age = double(attr.age.value_at({0}));
        row.loss_sex = double(attr.sex.value_at({0}));
        row.loss_bmi = double(attr.bmi.value_at({0}));
        row.loss_total = double(total.value_at({0}));
        const std::pair<const char*, double> terms[] = {
            {"loss_tri", row.loss_tri},   {"loss_ce_gait", row.loss_ce_gait},
            {"loss_age", row.loss_age},   {"loss_sex", row.loss_sex},
            {"loss_bmi", row.loss_bmi},   {"loss_total", row.loss_total}};
        for (const auto& [name, value] : terms) {
            if (!std::isfinite(value)) {
                throw Error("train: aborted at iteration " + std::to_string(it) + ": " +
                            std::string(name) + " is not finite");
            }
        }

        backward(total, tape);
        sgd_step(model, cfg, state);
        model.zero_grads();
        trace.push_back(row);

        if (cfg.checkpoint_every > 0 && !cfg.checkpoint_path.empty() &&
            it % cfg.checkpoint_every == 0) {
            save_checkpoint(cfg.checkpoint_path, model);
        }
    }

    if (!cfg.checkpoint_path.empty()) save_checkpoint(cfg.checkpoint_path, model);
    if (!cfg.trace_path.empty()) write_trace(cfg.trace_path, trace);
    return trace;
}

}  // namespace combogait
