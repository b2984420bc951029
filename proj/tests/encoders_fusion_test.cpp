// Silhouette CNN encoder, pose/shape MLP encoder, and the multiplicative
// fusion stage: shapes, null propagation, frame independence, and the
// residual-identity guarantee.
#include <gtest/gtest.h>

#include <cmath>
#include <memory>
#include <vector>

#include "combogait/encoders.hpp"
#include "combogait/fusion.hpp"
#include "combogait/gradcheck.hpp"

namespace combogait {
namespace {

using Tensor = TensorT<double>;

Tensor random_tensor(std::vector<int64_t> shape, Rng& rng, double s = 1.0) {
    auto t = Tensor::zeros(std::move(shape));
    for (auto& v : t.values()) v = rng.gaussian() * s;
    return t;
}

Tensor random_masks(std::vector<int64_t> shape, Rng& rng, double p = 0.4) {
    auto t = Tensor::zeros(std::move(shape));
    for (auto& v : t.values()) v = rng.bernoulli(p) ? 1.0 : 0.0;
    return t;
}

// ---------------------------------------------------------------------------
// Silhouette encoder
// ---------------------------------------------------------------------------

TEST(SilhouetteEncoder, ReferenceConfigShape) {
    Rng rng(1);
    EncoderConfig cfg;  // 64x44, channels {16, 32, 32}
    auto enc = make_encoder<double>(cfg, rng);
    auto x = random_masks({2, 30, 64, 44}, rng);
    auto e = enc->forward(nullptr, x, /*training=*/false);
    EXPECT_EQ(e.shape(), (std::vector<int64_t>{2, 32, 30, 16, 11}));
}

TEST(SilhouetteEncoder, WideConfigReaches512Channels) {
    Rng rng(2);
    EncoderConfig cfg;
    cfg.channels = {64, 128, 512};
    auto enc = make_encoder<double>(cfg, rng);
    EXPECT_EQ(enc->out_channels(), 512);
    EXPECT_EQ(enc->out_h(), 16);
    EXPECT_EQ(enc->out_w(), 11);
    auto x = random_masks({1, 2, 64, 44}, rng);
    auto e = enc->forward(nullptr, x, false);
    EXPECT_EQ(e.shape(), (std::vector<int64_t>{1, 512, 2, 16, 11}));
}

TEST(SilhouetteEncoder, ZeroMasksAndZeroBiasesGiveZeroFeatures) {
    Rng rng(3);
    EncoderConfig cfg;
    cfg.channels = {4, 4, 4};
    auto enc = make_encoder<double>(cfg, rng);
    enc->visit_params("enc", [](const std::string& name, Tensor& t) {
        if (name.find(".bias") != std::string::npos) {
            for (auto& v : t.values()) v = 0.0;
        }
    });
    auto x = Tensor::zeros({1, 2, 64, 44});
    for (bool training : {false, true}) {
        auto e = enc->forward(nullptr, x, training);
        for (double v : e.values()) {
            ASSERT_EQ(v, 0.0) << "training=" << training;
        }
    }
}

TEST(SilhouetteEncoder, FramePermutationPermutesFeatures) {
    Rng rng(4);
    EncoderConfig cfg;
    cfg.channels = {2, 2, 2};
    auto enc = make_encoder<double>(cfg, rng);
    auto x = random_masks({1, 3, 64, 44}, rng);
    auto e = enc->forward(nullptr, x, false);

    const std::vector<int> perm = {2, 0, 1};
    auto xp = Tensor::zeros({1, 3, 64, 44});
    const int64_t frame = 64 * 44;
    for (int64_t t = 0; t < 3; ++t)
        for (int64_t i = 0; i < frame; ++i)
            xp.values()[size_t(t * frame + i)] = x.values()[size_t(perm[size_t(t)] * frame + i)];
    auto ep = enc->forward(nullptr, xp, false);

    // (B, C, T, H', W'): frame t of the permuted batch equals frame perm[t].
    const int64_t spatial = 16 * 11;
    for (int64_t c = 0; c < 2; ++c)
        for (int64_t t = 0; t < 3; ++t)
            for (int64_t i = 0; i < spatial; ++i) {
                const size_t at = size_t((c * 3 + t) * spatial + i);
                const size_t src = size_t((c * 3 + perm[size_t(t)]) * spatial + i);
                ASSERT_EQ(ep.values()[at], e.values()[src]);
            }
}

TEST(SilhouetteEncoder, BatchOrderInvariantInEvalMode) {
    Rng rng(5);
    EncoderConfig cfg;
    cfg.channels = {2, 2, 2};
    auto enc = make_encoder<double>(cfg, rng);
    auto a = random_masks({1, 2, 64, 44}, rng);
    auto b = random_masks({1, 2, 64, 44}, rng);

    auto stacked = Tensor::zeros({2, 2, 64, 44});
    std::copy(a.values().begin(), a.values().end(), stacked.values().begin());
    std::copy(b.values().begin(), b.values().end(), stacked.values().begin() + a.numel());
    auto swapped = Tensor::zeros({2, 2, 64, 44});
    std::copy(b.values().begin(), b.values().end(), swapped.values().begin());
    std::copy(a.values().begin(), a.values().end(), swapped.values().begin() + b.numel());

    auto e1 = enc->forward(nullptr, stacked, false);
    auto e2 = enc->forward(nullptr, swapped, false);
    const int64_t per_sample = e1.numel() / 2;
    for (int64_t i = 0; i < per_sample; ++i) {
        ASSERT_EQ(e1.values()[size_t(i)], e2.values()[size_t(per_sample + i)]);
        ASSERT_EQ(e1.values()[size_t(per_sample + i)], e2.values()[size_t(i)]);
    }
}

TEST(SilhouetteEncoder, RejectsWrongSpatialSizeAndNonBinaryMasks) {
    Rng rng(6);
    EncoderConfig cfg;
    cfg.channels = {2, 2, 2};
    auto enc = make_encoder<double>(cfg, rng);
    EXPECT_THROW(enc->forward(nullptr, Tensor::zeros({1, 2, 32, 44}), false), DimensionError);
    auto x = Tensor::zeros({1, 1, 64, 44});
    x.values()[100] = 0.5;
    EXPECT_THROW(enc->forward(nullptr, x, false), ValidationError);
}

// A stand-in backbone proving the encoder slot is pluggable.
class StubEncoder final : public SilhouetteEncoderT<double> {
public:
    explicit StubEncoder(const EncoderConfig& cfg) : cfg_(cfg) {}
    TensorT<double> forward(Tape<double>*, const TensorT<double>& x, bool) override {
        return TensorT<double>::filled(
            {x.dim(0), out_channels(), x.dim(1), out_h(), out_w()}, 7.0);
    }
    int64_t out_channels() const override { return cfg_.channels.back(); }
    int64_t out_h() const override { return cfg_.input_h / 4; }
    int64_t out_w() const override { return cfg_.input_w / 4; }
    void visit_params(const std::string&, const ParamVisitor<double>&) override {}
    void visit_buffers(const std::string&, const ParamVisitor<double>&) override {}

private:
    EncoderConfig cfg_;
};

TEST(SilhouetteEncoder, RegistryDispatchesCustomBackbones) {
    Rng rng(7);
    EncoderConfig cfg;
    cfg.kind = "nonexistent-backbone";
    EXPECT_THROW(make_encoder<double>(cfg, rng), ConfigError);

    register_encoder<double>("stub", [](const EncoderConfig& c, Rng&) {
        return std::unique_ptr<SilhouetteEncoderT<double>>(new StubEncoder(c));
    });
    cfg.kind = "stub";
    auto enc = make_encoder<double>(cfg, rng);
    auto e = enc->forward(nullptr, Tensor::zeros({1, 1, 64, 44}), false);
    EXPECT_EQ(e.shape(), (std::vector<int64_t>{1, 32, 1, 16, 11}));
    EXPECT_EQ(e.values()[0], 7.0);
}

// ---------------------------------------------------------------------------
// Pose/shape parameter encoder
// ---------------------------------------------------------------------------

TEST(SmplEncoder, DefaultWidthsProduce256Embedding) {
    Rng rng(8);
    SmplEncoderT<double> enc(128, 256, 256, 0.2, rng);
    auto y = random_tensor({8, 30, kSmplParamDim}, rng, 0.5);
    auto e = enc.forward(nullptr, y, /*training=*/false, nullptr);
    EXPECT_EQ(e.shape(), (std::vector<int64_t>{8, 30, 256}));
}

TEST(SmplEncoder, EvalModeIsDeterministicDespiteDropout) {
    Rng rng(9);
    SmplEncoderT<double> enc(16, 16, 16, 0.5, rng);
    auto y = random_tensor({1, 1, kSmplParamDim}, rng);
    auto e1 = enc.forward(nullptr, y, false, nullptr);
    auto e2 = enc.forward(nullptr, y, false, nullptr);
    EXPECT_EQ(e1.values(), e2.values());  // bitwise
}

TEST(SmplEncoder, MicroMlpMatchesHandComputedAffineChain) {
    Rng rng(10);
    SmplEncoderT<double> enc(1, 1, 1, 0.0, rng);
    for (auto& v : enc.fc1.weight.values()) v = 0.5;
    enc.fc1.bias.values()[0] = 0.25;
    enc.fc2.weight.values()[0] = 2.0;
    enc.fc2.bias.values()[0] = 0.5;
    enc.fc3.weight.values()[0] = -1.0;
    enc.fc3.bias.values()[0] = 0.1;

    auto y = Tensor::filled({1, 1, kSmplParamDim}, 1.0);
    auto e = enc.forward(nullptr, y, false, nullptr);

    const double bn_scale = 1.0 / std::sqrt(1.0 + 1e-5);  // eval stats (0, 1)
    const double h1 = (82 * 0.5 + 0.25) * bn_scale;       // positive: relu no-op
    const double h2 = (2.0 * h1 + 0.5) * bn_scale;
    const double expect = -1.0 * h2 + 0.1;
    ASSERT_EQ(e.numel(), 1);
    EXPECT_NEAR(e.values()[0], expect, 1e-12);
}

TEST(SmplEncoder, RejectsWrongParameterWidth) {
    Rng rng(11);
    SmplEncoderT<double> enc(4, 4, 4, 0.0, rng);
    EXPECT_THROW(enc.forward(nullptr, Tensor::zeros({1, 1, 80}), false, nullptr),
                 DimensionError);
}

// ---------------------------------------------------------------------------
// Fusion stage
// ---------------------------------------------------------------------------

TEST(Fusion, PadToSquareAppendsZerosOnShortEdge) {
    auto e = Tensor::from_values({1, 1, 1, 3, 2}, {1, 2, 3, 4, 5, 6});
    auto p = pad_to_square<double>(nullptr, e);
    ASSERT_EQ(p.shape(), (std::vector<int64_t>{1, 1, 1, 3, 3}));
    // original block bit-identical
    for (int64_t r = 0; r < 3; ++r)
        for (int64_t c = 0; c < 2; ++c)
            EXPECT_EQ(p.value_at({0, 0, 0, r, c}), e.value_at({0, 0, 0, r, c}));
    // padding adds nothing
    double sum_e = 0, sum_p = 0;
    for (double v : e.values()) sum_e += v;
    for (double v : p.values()) sum_p += v;
    EXPECT_EQ(sum_e, sum_p);

    // wide-side padding grows the row axis instead
    auto w = Tensor::from_values({1, 1, 1, 2, 3}, {1, 2, 3, 4, 5, 6});
    auto pw = pad_to_square<double>(nullptr, w);
    EXPECT_EQ(pw.shape(), (std::vector<int64_t>{1, 1, 1, 3, 3}));
    EXPECT_EQ(pw.value_at({0, 0, 0, 2, 0}), 0.0);
}

TEST(Fusion, PadToSquareIsIdentityOnSquareInput) {
    Rng rng(12);
    auto e = random_tensor({1, 2, 2, 4, 4}, rng);
    auto p = pad_to_square<double>(nullptr, e);
    EXPECT_EQ(p.shape(), e.shape());
    EXPECT_EQ(p.values(), e.values());
}

TEST(Fusion, SmplToMatrixIsRowMajor) {
    auto e = Tensor::zeros({1, 1, 256});
    for (int64_t i = 0; i < 256; ++i) e.values()[size_t(i)] = double(i);
    auto m = smpl_to_matrix<double>(nullptr, e, 16);
    ASSERT_EQ(m.shape(), (std::vector<int64_t>{1, 1, 1, 16, 16}));
    for (int64_t r = 0; r < 16; ++r)
        for (int64_t c = 0; c < 16; ++c)
            EXPECT_EQ(m.value_at({0, 0, 0, r, c}), double(16 * r + c));
}

TEST(Fusion, SmplToMatrixRejectsNonSquareWidth) {
    auto e = Tensor::zeros({1, 1, 256});
    EXPECT_THROW(smpl_to_matrix<double>(nullptr, e, 15), DimensionError);
}

TEST(Fusion, BroadcastChannelsRepeatsSlice) {
    Rng rng(13);
    auto m = random_tensor({1, 1, 2, 3, 3}, rng);
    auto one = broadcast_channels<double>(nullptr, m, 1);
    EXPECT_EQ(one.values(), m.values());

    auto four = broadcast_channels<double>(nullptr, m, 4);
    ASSERT_EQ(four.shape(), (std::vector<int64_t>{1, 4, 2, 3, 3}));
    const int64_t slice = 2 * 3 * 3;
    for (int64_t c = 0; c < 4; ++c)
        for (int64_t i = 0; i < slice; ++i)
            ASSERT_EQ(four.values()[size_t(c * slice + i)], m.values()[size_t(i)]);
}

TEST(Fusion, BroadcastChannelsBackwardSumsOverChannels) {
    Rng rng(14);
    auto m = random_tensor({1, 1, 1, 2, 2}, rng);
    m.set_requires_grad(true);
    Tape<double> tape;
    auto b = broadcast_channels(&tape, m, 5);
    auto loss = sum_all(&tape, b);
    backward(loss, tape);
    for (double g : m.grad()) EXPECT_DOUBLE_EQ(g, 5.0);
}

TEST(Fusion, ZeroMatrixLeavesSilhouetteFeaturesExactly) {
    Rng rng(15);
    auto s = random_tensor({2, 3, 2, 4, 4}, rng);
    auto m = Tensor::zeros({2, 3, 2, 4, 4});
    auto fused = fuse_multiplicative<double>(nullptr, s, m);
    EXPECT_EQ(fused.values(), s.values());  // bitwise residual identity
}

TEST(Fusion, LeftIdentitySilhouettePassesMatrixThrough) {
    Rng rng(16);
    auto s = Tensor::zeros({1, 1, 1, 4, 4});
    for (int64_t i = 0; i < 4; ++i) s.values()[size_t(i * 4 + i)] = 1.0;
    auto a = random_tensor({1, 1, 1, 4, 4}, rng);
    auto fused = fuse_multiplicative<double>(nullptr, s, a);
    for (int64_t r = 0; r < 4; ++r)
        for (int64_t c = 0; c < 4; ++c) {
            const double expect = a.value_at({0, 0, 0, r, c}) + (r == c ? 1.0 : 0.0);
            EXPECT_DOUBLE_EQ(fused.value_at({0, 0, 0, r, c}), expect);
        }
}

TEST(Fusion, MatchesDistributivityOracle) {
    Rng rng(17);
    auto s = random_tensor({1, 1, 1, 4, 4}, rng);
    auto m = random_tensor({1, 1, 1, 4, 4}, rng);
    auto fused = fuse_multiplicative<double>(nullptr, s, m);
    // oracle: S + S*M by explicit loops
    for (int64_t r = 0; r < 4; ++r)
        for (int64_t c = 0; c < 4; ++c) {
            double acc = s.value_at({0, 0, 0, r, c});
            for (int64_t k = 0; k < 4; ++k)
                acc += s.value_at({0, 0, 0, r, k}) * m.value_at({0, 0, 0, k, c});
            EXPECT_NEAR(fused.value_at({0, 0, 0, r, c}), acc, 1e-10);
        }
}

TEST(Fusion, LinearInSilhouetteOperand) {
    Rng rng(18);
    auto s1 = random_tensor({1, 2, 2, 4, 4}, rng);
    auto s2 = random_tensor({1, 2, 2, 4, 4}, rng);
    auto m = random_tensor({1, 2, 2, 4, 4}, rng);
    const double a = 0.7, b = -1.3;

    auto lhs_in = Tensor::zeros({1, 2, 2, 4, 4});
    for (size_t i = 0; i < lhs_in.values().size(); ++i)
        lhs_in.values()[i] = a * s1.values()[i] + b * s2.values()[i];
    auto lhs = fuse_multiplicative<double>(nullptr, lhs_in, m);
    auto f1 = fuse_multiplicative<double>(nullptr, s1, m);
    auto f2 = fuse_multiplicative<double>(nullptr, s2, m);
    for (size_t i = 0; i < lhs.values().size(); ++i) {
        EXPECT_NEAR(lhs.values()[i], a * f1.values()[i] + b * f2.values()[i], 1e-6);
    }
}

TEST(Fusion, RejectsNonSquareSpatialExtent) {
    auto s = Tensor::zeros({1, 1, 1, 3, 4});
    auto m = Tensor::zeros({1, 1, 1, 3, 4});
    EXPECT_THROW(fuse_multiplicative<double>(nullptr, s, m), DimensionError);
}

TEST(TemporalPool, SingleFrameSqueezesUnchanged) {
    Rng rng(19);
    auto e = random_tensor({2, 3, 1, 4, 4}, rng);
    auto g = temporal_pool<double>(nullptr, e);
    EXPECT_EQ(g.shape(), (std::vector<int64_t>{2, 3, 4, 4}));
    EXPECT_EQ(g.values(), e.values());
}

TEST(TemporalPool, DominantFrameWins) {
    auto e = Tensor::zeros({1, 1, 3, 2, 2});
    for (int64_t i = 0; i < 4; ++i) e.values()[size_t(4 + i)] = 9.0;  // frame 1
    auto g = temporal_pool<double>(nullptr, e);
    for (double v : g.values()) EXPECT_EQ(v, 9.0);
}

TEST(TemporalPool, MatchesLoopMaxOracle) {
    Rng rng(20);
    auto e = random_tensor({2, 3, 5, 4, 4}, rng);
    auto g = temporal_pool<double>(nullptr, e);
    ASSERT_EQ(g.shape(), (std::vector<int64_t>{2, 3, 4, 4}));
    for (int64_t b = 0; b < 2; ++b)
        for (int64_t c = 0; c < 3; ++c)
            for (int64_t i = 0; i < 16; ++i) {
                double mx = -1e300;
                for (int64_t t = 0; t < 5; ++t) {
                    mx = std::max(mx, e.values()[size_t((((b * 3 + c) * 5 + t) * 16) + i)]);
                }
                ASSERT_EQ(g.values()[size_t((b * 3 + c) * 16 + i)], mx);
            }
}

TEST(TemporalPool, FramePermutationInvariant) {
    Rng rng(21);
    auto e = random_tensor({1, 2, 4, 3, 3}, rng);
    auto g = temporal_pool<double>(nullptr, e);

    const std::vector<int> perm = {3, 1, 0, 2};
    auto ep = Tensor::zeros({1, 2, 4, 3, 3});
    for (int64_t c = 0; c < 2; ++c)
        for (int64_t t = 0; t < 4; ++t)
            for (int64_t i = 0; i < 9; ++i)
                ep.values()[size_t((c * 4 + t) * 9 + i)] =
                    e.values()[size_t((c * 4 + perm[size_t(t)]) * 9 + i)];
    auto gp = temporal_pool<double>(nullptr, ep);
    EXPECT_EQ(g.values(), gp.values());  // exact
}

TEST(Fusion, PipelineShapesAndGradientCheck) {
    // B=1, C=2, T=2, H'=4, W'=3 -> Hmax=4, so the pose embedding width is 16.
    Rng rng(22);
    auto e_sil = detail::rand_tensor({1, 2, 2, 4, 3}, rng);
    auto e_smpl = detail::rand_tensor({1, 2, 16}, rng);
    {
        auto g = fuse_modalities<Wide>(nullptr, e_sil, e_smpl);
        EXPECT_EQ(g.shape(), (std::vector<int64_t>{1, 2, 4, 4}));
    }
    auto w = detail::rand_tensor({1, 2, 4, 4}, rng);
    auto res = gradcheck(
        "fusion.pipeline",
        [&](Tape<Wide>* t) {
            return detail::pin(t, fuse_modalities(t, e_sil, e_smpl), w);
        },
        {&e_sil, &e_smpl});
    EXPECT_LT(res.max_rel_err, 1e-4);
}

}  // namespace
}  // namespace combogait
