// Probe-gallery identification: distances, CMC curves (with an independent
// rank-counting oracle), attribute accuracy, the report format, and the
// end-to-end protocol over a dataset.
#include <gtest/gtest.h>

#include <cmath>
#include <string>
#include <vector>

#include "combogait/eval.hpp"
#include "combogait/generator.hpp"

namespace combogait {
namespace {

// Independent CMC formulation: the rank of a probe is the number of gallery
// entries ordered before its best-ranked correct entry (strictly closer, or
// equally close with a smaller insertion index), plus one.
std::vector<double> cmc_oracle(const std::vector<GalleryEntry>& probes,
                               const std::vector<GalleryEntry>& gallery, int64_t maxrank) {
    std::vector<int64_t> hits(size_t(maxrank), 0);
    for (const auto& p : probes) {
        int64_t best_rank = int64_t(gallery.size()) + 1;
        for (size_t g = 0; g < gallery.size(); ++g) {
            if (gallery[g].subject_id != p.subject_id) continue;
            const double dg = euclidean(p.embedding, gallery[g].embedding);
            int64_t before = 0;
            for (size_t h = 0; h < gallery.size(); ++h) {
                if (h == g) continue;
                const double dh = euclidean(p.embedding, gallery[h].embedding);
                if (dh < dg || (dh == dg && h < g)) ++before;
            }
            best_rank = std::min(best_rank, before + 1);
        }
        for (int64_t k = best_rank; k <= maxrank; ++k) ++hits[size_t(k - 1)];
    }
    std::vector<double> acc(static_cast<size_t>(maxrank));
    for (int64_t k = 0; k < maxrank; ++k) {
        acc[size_t(k)] = 100.0 * double(hits[size_t(k)]) / double(probes.size());
    }
    return acc;
}

GalleryEntry entry(const std::string& id, std::vector<double> e) {
    return GalleryEntry{id, std::move(e)};
}

// ---------------------------------------------------------------------------
// Distance
// ---------------------------------------------------------------------------

TEST(Euclidean, HandValueAndMismatch) {
    EXPECT_DOUBLE_EQ(euclidean({0, 0}, {3, 4}), 5.0);
    EXPECT_DOUBLE_EQ(euclidean({1, 2, 3}, {1, 2, 3}), 0.0);
    EXPECT_THROW(euclidean({1, 2}, {1, 2, 3}), DimensionError);
}

// ---------------------------------------------------------------------------
// CMC
// ---------------------------------------------------------------------------

TEST(Cmc, ExactSelfMatchesScoreFullMarks) {
    std::vector<GalleryEntry> gallery = {entry("a", {0, 0}), entry("b", {5, 5}),
                                         entry("c", {-3, 2})};
    auto acc = cmc(gallery, gallery, 3);
    for (double v : acc) EXPECT_DOUBLE_EQ(v, 100.0);
}

TEST(Cmc, NearestWrongIdentityCostsRankOne) {
    std::vector<GalleryEntry> gallery = {entry("a", {0, 0}), entry("b", {1, 0})};
    std::vector<GalleryEntry> probes = {entry("b", {0.1, 0})};  // closer to a
    auto acc = cmc(probes, gallery, 2);
    EXPECT_DOUBLE_EQ(acc[0], 0.0);
    EXPECT_DOUBLE_EQ(acc[1], 100.0);
}

TEST(Cmc, TiesResolveByGalleryInsertionOrder) {
    // the probe sits exactly between two gallery entries
    std::vector<GalleryEntry> g1 = {entry("a", {1, 0}), entry("b", {-1, 0})};
    std::vector<GalleryEntry> g2 = {entry("b", {-1, 0}), entry("a", {1, 0})};
    std::vector<GalleryEntry> probe = {entry("b", {0, 0})};
    EXPECT_DOUBLE_EQ(cmc(probe, g1, 1)[0], 0.0);    // "a" inserted first wins the tie
    EXPECT_DOUBLE_EQ(cmc(probe, g2, 1)[0], 100.0);  // "b" inserted first wins the tie
}

TEST(Cmc, MatchesRankCountingOracleOnRandomInstances) {
    Rng rng(1);
    for (int trial = 0; trial < 20; ++trial) {
        const int64_t n_ids = 2 + int64_t(rng.uniform_int(4));
        const int64_t dim = 3;
        std::vector<GalleryEntry> gallery;
        for (int64_t i = 0; i < n_ids; ++i) {
            std::vector<double> e(static_cast<size_t>(dim));
            for (auto& v : e) v = rng.gaussian();
            gallery.push_back(entry("s" + std::to_string(i), std::move(e)));
        }
        if (trial % 5 == 0) gallery.push_back(gallery[0]);  // duplicate-id gallery
        std::vector<GalleryEntry> probes;
        const int64_t n_probes = 1 + int64_t(rng.uniform_int(4));
        for (int64_t i = 0; i < n_probes; ++i) {
            std::vector<double> e(static_cast<size_t>(dim));
            for (auto& v : e) v = rng.gaussian();
            probes.push_back(
                entry("s" + std::to_string(rng.uniform_int(uint64_t(n_ids))), std::move(e)));
        }
        const int64_t maxrank = 1 + int64_t(rng.uniform_int(uint64_t(n_ids) + 2));
        const auto got = cmc(probes, gallery, maxrank);
        const auto want = cmc_oracle(probes, gallery, maxrank);
        ASSERT_EQ(got.size(), want.size());
        for (size_t k = 0; k < got.size(); ++k) {
            ASSERT_DOUBLE_EQ(got[k], want[k]) << "trial " << trial << " rank " << k + 1;
        }
        for (size_t k = 1; k < got.size(); ++k) {
            ASSERT_GE(got[k], got[k - 1]) << "cmc must be non-decreasing";
        }
    }
}

TEST(Cmc, GalleryPermutationDoesNotChangeTheCurve) {
    Rng rng(2);
    std::vector<GalleryEntry> gallery;
    for (int i = 0; i < 5; ++i) {
        gallery.push_back(entry("s" + std::to_string(i),
                                {rng.gaussian(), rng.gaussian(), rng.gaussian()}));
    }
    std::vector<GalleryEntry> probes;
    for (int i = 0; i < 5; ++i) {
        auto e = gallery[size_t(i)].embedding;
        for (auto& v : e) v += 0.05 * rng.gaussian();  // distinct distances, no ties
        probes.push_back(entry(gallery[size_t(i)].subject_id, std::move(e)));
    }
    auto base = cmc(probes, gallery, 5);
    auto shuffled = gallery;
    std::swap(shuffled[0], shuffled[3]);
    std::swap(shuffled[1], shuffled[4]);
    auto perm = cmc(probes, shuffled, 5);
    for (size_t k = 0; k < base.size(); ++k) EXPECT_DOUBLE_EQ(base[k], perm[k]);

    auto probes_rev(probes);
    std::reverse(probes_rev.begin(), probes_rev.end());
    auto rev = cmc(probes_rev, gallery, 5);
    for (size_t k = 0; k < base.size(); ++k) EXPECT_DOUBLE_EQ(base[k], rev[k]);
}

TEST(Cmc, ProbesAbsentFromGalleryAreListedSorted) {
    std::vector<GalleryEntry> gallery = {entry("a", {0})};
    std::vector<GalleryEntry> probes = {entry("zz", {0}), entry("aa", {1}),
                                        entry("zz", {2}), entry("a", {3})};
    try {
        cmc(probes, gallery, 1);
        FAIL() << "unknown probe identities accepted";
    } catch (const ProtocolError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("absent"), std::string::npos);
        EXPECT_NE(msg.find("aa zz"), std::string::npos);  // sorted, deduplicated
    }
}

TEST(Cmc, DegenerateInputsRejected) {
    std::vector<GalleryEntry> some = {entry("a", {0})};
    EXPECT_THROW(cmc(some, {}, 1), ValidationError);
    EXPECT_THROW(cmc({}, some, 1), ValidationError);
    EXPECT_THROW(cmc(some, some, 0), ValidationError);
}

// ---------------------------------------------------------------------------
// Attribute accuracy
// ---------------------------------------------------------------------------

TEST(AttributeAccuracy, HandCounts) {
    std::vector<AttributePrediction> preds = {{1, 0, 2}, {3, 1, 0}, {1, 1, 3}, {0, 0, 1}};
    std::vector<AttributeLabels> labels = {{1, 1, 2}, {3, 1, 1}, {2, 1, 3}, {0, 0, 2}};
    auto [age, bmi, sex] = attribute_accuracy(preds, labels);
    EXPECT_DOUBLE_EQ(age, 75.0);  // rows 0, 1, 3
    EXPECT_DOUBLE_EQ(bmi, 50.0);  // rows 0, 2
    EXPECT_DOUBLE_EQ(sex, 75.0);  // rows 1, 2, 3
}

TEST(AttributeAccuracy, DegenerateInputsRejected) {
    std::vector<AttributePrediction> preds = {{0, 0, 0}};
    std::vector<AttributeLabels> labels;
    EXPECT_THROW(attribute_accuracy(preds, labels), DataError);
    EXPECT_THROW(attribute_accuracy({}, {}), DataError);
}

// ---------------------------------------------------------------------------
// Report format
// ---------------------------------------------------------------------------

TEST(Report, HeaderNamesEveryColumn) {
    EXPECT_EQ(report_header(),
              "scope,rank1,rank2,rank3,rank4,rank5,rank6,rank7,rank8,rank9,rank10,"
              "accu_age,accu_bmi,accu_sex,n_probes");
}

TEST(Report, CsvCarriesOneLinePerRow) {
    EvalReport rep;
    EvalScopeRow row;
    row.scope = "all";
    row.ranks.assign(10, 50.0);
    row.accu_age = 20.0;
    row.accu_bmi = 30.0;
    row.accu_sex = 40.0;
    row.n_probes = 12;
    rep.rows.push_back(row);
    row.scope = "close";
    rep.rows.push_back(row);
    const std::string text = report_to_csv(rep);
    EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 3);
    EXPECT_NE(text.find("\nall,50,"), std::string::npos);
    EXPECT_NE(text.find("\nclose,50,"), std::string::npos);
    EXPECT_NE(text.find(",20,30,40,12\n"), std::string::npos);
}

// ---------------------------------------------------------------------------
// End-to-end protocol
// ---------------------------------------------------------------------------

ModelConfig small_config(int64_t identities) {
    ModelConfig cfg;
    cfg.encoder.channels = {2, 2, 2};
    cfg.smpl_hidden1 = 8;
    cfg.smpl_hidden2 = 8;
    cfg.smpl_embed_dim = 256;
    cfg.dropout = 0.0;
    cfg.token_dim = 8;
    cfg.heads = 2;
    cfg.blocks = 1;
    cfg.gait_embed_dim = 4;
    cfg.n_train_identities = identities;
    return cfg;
}

Dataset make_dataset(const std::string& name, uint64_t seed, int64_t subjects,
                     int64_t seqs, int64_t train_per_subject,
                     std::vector<std::string> ranges = {"close"}) {
    GenerateOptions opt;
    opt.seed = seed;
    opt.subjects = subjects;
    opt.sequences_per_subject = seqs;
    opt.frames = 8;
    opt.train_per_subject = train_per_subject;
    opt.ranges = std::move(ranges);
    opt.out_dir = testing::TempDir() + name;
    return Dataset::load(generate_dataset(opt));
}

TEST(ExtractEmbedding, LayoutIsPartMajorFlattenedGaitFeature) {
    auto ds = make_dataset("eval_ds_a", 51, 2, 1, -1);
    auto model = ComboGaitModelT<double>::create(small_config(2), 1);
    const auto& item = ds.items[0];
    auto [emb, pred] = extract_embedding(model, item.sil, item.smpl);
    ASSERT_EQ(emb.size(), size_t(16 * 4));  // P parts x C'' channels

    auto sil_t = TensorT<double>::zeros({1, item.sil.frames, 64, 44});
    for (size_t i = 0; i < item.sil.mask.size(); ++i) {
        sil_t.values()[i] = double(item.sil.mask[i]);
    }
    auto smpl_t = TensorT<double>::zeros({1, item.smpl.frames, kSmplParamDim});
    for (size_t i = 0; i < item.smpl.values.size(); ++i) {
        smpl_t.values()[i] = double(item.smpl.values[i]);
    }
    auto out = model.forward(nullptr, sil_t, smpl_t, false, nullptr);
    for (int64_t p = 0; p < 16; ++p) {
        for (int64_t c = 0; c < 4; ++c) {
            EXPECT_EQ(emb[size_t(p * 4 + c)], out.f_gait.value_at({0, c, p}));
        }
    }
    EXPECT_GE(pred.age_class, 0);
    EXPECT_LE(pred.age_class, 4);

    auto bad_smpl = item.smpl;
    bad_smpl.frames -= 1;
    bad_smpl.values.resize(size_t(bad_smpl.frames) * 82);
    EXPECT_THROW(extract_embedding(model, item.sil, bad_smpl), DataError);
}

TEST(RunEval, SingleSequenceSubjectsSelfMatchPerfectly) {
    // every probe is its own gallery entry -> distance exactly 0
    auto ds = make_dataset("eval_ds_b", 52, 4, 1, -1);
    auto model = ComboGaitModelT<double>::create(small_config(4), 2);
    auto report = run_eval(model, ds, "train");
    ASSERT_FALSE(report.rows.empty());
    EXPECT_EQ(report.rows[0].scope, "all");
    EXPECT_EQ(report.rows[0].n_probes, 4);
    for (double r : report.rows[0].ranks) EXPECT_DOUBLE_EQ(r, 100.0);

    EXPECT_THROW(run_eval(model, ds, "test"), DataError);        // no test sequences
    EXPECT_THROW(run_eval(model, ds, "validation"), ValidationError);
}

TEST(RunEval, RangeRowsFollowTheFixedOrder) {
    auto ds = make_dataset("eval_ds_c", 53, 3, 2, -1, {"400m", "close"});
    auto model = ComboGaitModelT<double>::create(small_config(3), 3);
    auto report = run_eval(model, ds, "train");
    ASSERT_EQ(report.rows.size(), 3u);
    EXPECT_EQ(report.rows[0].scope, "all");
    EXPECT_EQ(report.rows[1].scope, "close");  // fixed tag order, not manifest order
    EXPECT_EQ(report.rows[2].scope, "400m");
    EXPECT_EQ(report.rows[0].n_probes, 6);
    EXPECT_EQ(report.rows[1].n_probes, 3);
    EXPECT_EQ(report.rows[2].n_probes, 3);
}

TEST(RunEval, RangesWithoutProbesAreOmitted) {
    // q0 -> "close"/train, q1 -> "400m"/test: probing the test split leaves
    // the close row empty
    auto ds = make_dataset("eval_ds_d", 54, 2, 2, 1, {"close", "400m"});
    auto model = ComboGaitModelT<double>::create(small_config(2), 3);
    auto report = run_eval(model, ds, "test");
    ASSERT_EQ(report.rows.size(), 2u);
    EXPECT_EQ(report.rows[0].scope, "all");
    EXPECT_EQ(report.rows[1].scope, "400m");
}

TEST(RunEval, ReportIsDeterministic) {
    auto ds = make_dataset("eval_ds_e", 55, 3, 2, 1);
    auto model = ComboGaitModelT<double>::create(small_config(3), 4);
    auto r1 = run_eval(model, ds, "test");
    auto r2 = run_eval(model, ds, "test");
    EXPECT_EQ(report_to_csv(r1), report_to_csv(r2));
}

}  // namespace
}  // namespace combogait
