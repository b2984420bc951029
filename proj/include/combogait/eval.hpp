// Identification evaluation: embedding extraction, cumulative match
// characteristic (CMC) against a gallery, attribute accuracies, and the
// per-range report. The protocol: the gallery holds the first train-split
// sequence of every subject (manifest order); the probe set holds every
// sequence of the chosen split, so probing the train split includes exact
// self-matches.

#pragma once

#include <cmath>
#include <iostream>
#include <map>

#include "combogait/training.hpp"

namespace combogait {

struct GalleryEntry {
    std::string subject_id;
    std::vector<double> embedding;
};

struct AttributePrediction {
    int64_t age_class = 0;
    int64_t sex_class = 0;
    int64_t bmi_class = 0;
};

namespace detail {

template <typename S>
int64_t argmax_row(const TensorT<S>& logits, int64_t row) {
    const int64_t q = logits.shape()[1];
    const auto& v = logits.values();
    int64_t best = 0;
    for (int64_t j = 1; j < q; ++j) {
        if (v[size_t(row * q + j)] > v[size_t(row * q + best)]) best = j;
    }
    return best;
}

}  // namespace detail

// Full eval-mode forward over one sequence pair. The embedding is F_gait
// flattened part-major (all channels of part 0, then part 1, ...).
template <typename S>
std::pair<std::vector<double>, AttributePrediction> extract_embedding(
    ComboGaitModelT<S>& model, const SilhouetteSequence& sil, const SmplSequence& smpl) {
    if (sil.frames != smpl.frames) {
        throw DataError("extract_embedding: " + std::to_string(sil.frames) +
                        " silhouette frames but " + std::to_string(smpl.frames) +
                        " pose/shape frames");
    }
    auto sil_t = TensorT<S>::zeros({1, sil.frames, sil.height, sil.width});
    for (size_t i = 0; i < sil.mask.size(); ++i) sil_t.values()[i] = S(sil.mask[i]);
    auto smpl_t = TensorT<S>::zeros({1, smpl.frames, kSmplParamDim});
    for (size_t i = 0; i < smpl.values.size(); ++i) smpl_t.values()[i] = S(smpl.values[i]);

    auto out = model.forward(nullptr, sil_t, smpl_t, /*training=*/false, nullptr);
    const int64_t dim = out.f_gait.shape()[1];    // C''
    const int64_t parts = out.f_gait.shape()[2];  // P
    auto flat = permute<S>(nullptr, out.f_gait, {0, 2, 1});  // (1, P, C'')
    std::vector<double> embedding(size_t(parts * dim));
    for (size_t i = 0; i < embedding.size(); ++i) embedding[i] = double(flat.values()[i]);

    AttributePrediction pred;
    pred.age_class = detail::argmax_row(out.attrs.age, 0);
    pred.sex_class = detail::argmax_row(out.attrs.sex, 0);
    pred.bmi_class = detail::argmax_row(out.attrs.bmi, 0);
    return {std::move(embedding), pred};
}

inline double euclidean(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) {
        throw DimensionError("euclidean: embedding lengths " + std::to_string(a.size()) +
                             " and " + std::to_string(b.size()) + " differ");
    }
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return std::sqrt(s);
}

// Rank-1..maxrank accuracies in percent. Per probe the gallery is sorted
// by ascending distance (ties keep gallery insertion order); Rank-k is a
// hit iff a matching identity appears among the k nearest.
inline std::vector<double> cmc(const std::vector<GalleryEntry>& probes,
                               const std::vector<GalleryEntry>& gallery, int64_t maxrank) {
    if (gallery.empty()) throw ValidationError("cmc: empty gallery");
    if (probes.empty()) throw ValidationError("cmc: empty probe set");
    if (maxrank < 1) throw ValidationError("cmc: maxrank must be positive");

    std::vector<std::string> missing;
    for (const auto& p : probes) {
        bool found = false;
        for (const auto& g : gallery) {
            if (g.subject_id == p.subject_id) {
                found = true;
                break;
            }
        }
        if (!found) missing.push_back(p.subject_id);
    }
    if (!missing.empty()) {
        std::sort(missing.begin(), missing.end());
        missing.erase(std::unique(missing.begin(), missing.end()), missing.end());
        std::string msg = "cmc: probe identities absent from gallery:";
        for (const auto& m : missing) msg += " " + m;
        throw ProtocolError(msg);
    }

    std::vector<int64_t> hits(size_t(maxrank), 0);
    std::vector<std::pair<double, size_t>> order(gallery.size());
    for (const auto& p : probes) {
        for (size_t g = 0; g < gallery.size(); ++g) {
            order[g] = {euclidean(p.embedding, gallery[g].embedding), g};
        }
        std::stable_sort(order.begin(), order.end(),
                         [](const auto& x, const auto& y) { return x.first < y.first; });
        const int64_t upto = std::min<int64_t>(maxrank, int64_t(order.size()));
        for (int64_t k = 0; k < upto; ++k) {
            if (gallery[order[size_t(k)].second].subject_id == p.subject_id) {
                for (int64_t r = k; r < maxrank; ++r) ++hits[size_t(r)];
                break;
            }
        }
    }
    std::vector<double> acc(static_cast<size_t>(maxrank));
    for (int64_t k = 0; k < maxrank; ++k) {
        acc[size_t(k)] = 100.0 * double(hits[size_t(k)]) / double(probes.size());
    }
    return acc;
}

// Per-task exact-match accuracy in percent: (age, bmi, sex).
inline std::tuple<double, double, double> attribute_accuracy(
    const std::vector<AttributePrediction>& preds,
    const std::vector<AttributeLabels>& labels) {
    if (preds.size() != labels.size()) {
        throw DataError("attribute_accuracy: " + std::to_string(preds.size()) +
                        " predictions vs " + std::to_string(labels.size()) + " labels");
    }
    if (preds.empty()) throw DataError("attribute_accuracy: empty input");
    int64_t age = 0, bmi = 0, sex = 0;
    for (size_t i = 0; i < preds.size(); ++i) {
        age += preds[i].age_class == labels[i].age_class;
        bmi += preds[i].bmi_class == labels[i].bmi_class;
        sex += preds[i].sex_class == labels[i].sex_class;
    }
    const double n = double(preds.size());
    return {100.0 * double(age) / n, 100.0 * double(bmi) / n, 100.0 * double(sex) / n};
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

constexpr int64_t kReportMaxRank = 10;

struct EvalScopeRow {
    std::string scope;             // "all" or a range tag
    std::vector<double> ranks;     // Rank-1..10, percent
    double accu_age = 0, accu_bmi = 0, accu_sex = 0;
    int64_t n_probes = 0;
};

struct EvalReport {
    std::vector<EvalScopeRow> rows;
};

inline std::string report_header() {
    std::string h = "scope";
    for (int64_t k = 1; k <= kReportMaxRank; ++k) h += ",rank" + std::to_string(k);
    h += ",accu_age,accu_bmi,accu_sex,n_probes";
    return h;
}

inline std::string report_to_csv(const EvalReport& report) {
    std::string text = report_header() + "\n";
    char buf[64];
    for (const auto& row : report.rows) {
        text += row.scope;
        for (double r : row.ranks) {
            std::snprintf(buf, sizeof(buf), ",%.17g", r);
            text += buf;
        }
        for (double v : {row.accu_age, row.accu_bmi, row.accu_sex}) {
            std::snprintf(buf, sizeof(buf), ",%.17g", v);
            text += buf;
        }
        text += "," + std::to_string(row.n_probes) + "\n";
    }
    return text;
}

inline void write_report(const std::string& path, const EvalReport& report) {
    write_file_bytes(path, report_to_csv(report));
}

// Gallery = first train-split sequence of each subject in manifest order;
// probes = every sequence of probe_split. Emits the overall row followed
// by per-range rows in the fixed range order (empty ranges are skipped
// with a warning).
template <typename S>
EvalReport run_eval(ComboGaitModelT<S>& model, const Dataset& ds,
                    const std::string& probe_split) {
    if (probe_split != "train" && probe_split != "test") {
        throw ValidationError("eval: probe split must be 'train' or 'test', got '" +
                              probe_split + "'");
    }

    std::vector<int64_t> gallery_items;
    {
        std::map<std::string, bool> seen;
        for (size_t i = 0; i < ds.items.size(); ++i) {
            const auto& e = ds.items[i].entry;
            if (e.split != "train" || seen.count(e.subject_id)) continue;
            seen[e.subject_id] = true;
            gallery_items.push_back(int64_t(i));
        }
    }
    if (gallery_items.empty()) throw DataError("eval: no train-split sequences for a gallery");

    std::vector<int64_t> probe_items;
    for (size_t i = 0; i < ds.items.size(); ++i) {
        if (ds.items[i].entry.split == probe_split) probe_items.push_back(int64_t(i));
    }
    if (probe_items.empty()) {
        throw DataError("eval: probe split '" + probe_split + "' has no sequences");
    }

    std::map<int64_t, std::pair<std::vector<double>, AttributePrediction>> cache;
    auto embed = [&](int64_t item) -> const std::pair<std::vector<double>, AttributePrediction>& {
        auto it = cache.find(item);
        if (it == cache.end()) {
            const auto& d = ds.items[size_t(item)];
            it = cache.emplace(item, extract_embedding(model, d.sil, d.smpl)).first;
        }
        return it->second;
    };

    std::vector<GalleryEntry> gallery;
    for (int64_t gi : gallery_items) {
        gallery.push_back({ds.items[size_t(gi)].entry.subject_id, embed(gi).first});
    }

    auto scope_row = [&](const std::string& scope,
                         const std::vector<int64_t>& items) -> EvalScopeRow {
        std::vector<GalleryEntry> probes;
        std::vector<AttributePrediction> preds;
        std::vector<AttributeLabels> labels;
        for (int64_t pi : items) {
            const auto& [emb, pred] = embed(pi);
            probes.push_back({ds.items[size_t(pi)].entry.subject_id, emb});
            preds.push_back(pred);
            labels.push_back(ds.items[size_t(pi)].labels);
        }
        EvalScopeRow row;
        row.scope = scope;
        row.ranks = cmc(probes, gallery, kReportMaxRank);
        std::tie(row.accu_age, row.accu_bmi, row.accu_sex) = attribute_accuracy(preds, labels);
        row.n_probes = int64_t(items.size());
        return row;
    };

    EvalReport report;
    report.rows.push_back(scope_row("all", probe_items));
    for (const auto& tag : range_tags()) {
        bool in_manifest = false;
        for (const auto& item : ds.items) {
            if (item.entry.range_tag == tag) {
                in_manifest = true;
                break;
            }
        }
        if (!in_manifest) continue;
        std::vector<int64_t> group;
        for (int64_t pi : probe_items) {
            if (ds.items[size_t(pi)].entry.range_tag == tag) group.push_back(pi);
        }
        if (group.empty()) {
            std::cerr << "[combogait] warning: range '" << tag
                      << "' has no probes; row omitted\n";
            continue;
        }
        report.rows.push_back(scope_row(tag, group));
    }
    return report;
}

}  // namespace combogait
