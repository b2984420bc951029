// Differentiable tensor core: forward semantics against brute-force oracles,
// adjoint bookkeeping, and error contracts.
#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "combogait/tensor.hpp"

namespace combogait {
namespace {

using Tensor = TensorT<double>;

// ---------------------------------------------------------------------------
// Oracles: independent re-implementations kept deliberately naive.
// ---------------------------------------------------------------------------

// Plain triple-loop matrix product, no blocking, no library calls.
std::vector<double> matmul_oracle(const std::vector<double>& a,
                                  const std::vector<double>& b, int64_t m,
                                  int64_t k, int64_t n) {
    std::vector<double> out(static_cast<size_t>(m * n), 0.0);
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j)
            for (int64_t p = 0; p < k; ++p)
                out[size_t(i * n + j)] += a[size_t(i * k + p)] * b[size_t(p * n + j)];
    return out;
}

// Direct six-nested-loop cross-correlation with zero padding.
std::vector<double> conv2d_oracle(const std::vector<double>& x,
                                  const std::vector<double>& k, int64_t b,
                                  int64_t cin, int64_t h, int64_t w,
                                  int64_t cout, int64_t kh, int64_t kw,
                                  int64_t stride, int64_t pad, int64_t oh,
                                  int64_t ow, const std::vector<double>& bias) {
    std::vector<double> out(static_cast<size_t>(b * cout * oh * ow), 0.0);
    for (int64_t n = 0; n < b; ++n)
        for (int64_t co = 0; co < cout; ++co)
            for (int64_t oy = 0; oy < oh; ++oy)
                for (int64_t ox = 0; ox < ow; ++ox) {
                    double acc = bias.empty() ? 0.0 : bias[size_t(co)];
                    for (int64_t ci = 0; ci < cin; ++ci)
                        for (int64_t ky = 0; ky < kh; ++ky)
                            for (int64_t kx = 0; kx < kw; ++kx) {
                                const int64_t iy = oy * stride + ky - pad;
                                const int64_t ix = ox * stride + kx - pad;
                                if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                                acc += x[size_t(((n * cin + ci) * h + iy) * w + ix)] *
                                       k[size_t(((co * cin + ci) * kh + ky) * kw + kx)];
                            }
                    out[size_t(((n * cout + co) * oh + oy) * ow + ox)] = acc;
                }
    return out;
}

Tensor random_tensor(std::vector<int64_t> shape, Rng& rng, double s = 1.0) {
    auto t = Tensor::zeros(std::move(shape));
    for (auto& v : t.values()) v = rng.gaussian() * s;
    return t;
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
    auto i2 = Tensor::identity(2);
    auto b = Tensor::from_values({2, 2}, {1, 2, 3, 4});
    auto out = matmul<double>(nullptr, i2, b);
    EXPECT_EQ(out.values(), b.values());
}

TEST(Matmul, RowTimesColumnIsDotProduct) {
    auto a = Tensor::from_values({1, 2}, {1, 2});
    auto b = Tensor::from_values({2, 1}, {3, 4});
    auto out = matmul<double>(nullptr, a, b);
    ASSERT_EQ(out.numel(), 1);
    EXPECT_DOUBLE_EQ(out.values()[0], 11.0);
}

TEST(Matmul, MatchesTripleLoopOracleSeed7) {
    Rng rng(7);
    auto a = random_tensor({3, 4}, rng);
    auto b = random_tensor({4, 2}, rng);
    auto out = matmul<double>(nullptr, a, b);
    auto ref = matmul_oracle(a.values(), b.values(), 3, 4, 2);
    for (size_t i = 0; i < ref.size(); ++i) {
        EXPECT_NEAR(out.values()[i], ref[i], 1e-12 * std::max(1.0, std::abs(ref[i])));
    }
}

TEST(Matmul, MatchesTripleLoopOracleUpTo8x8x8) {
    Rng rng(21);
    for (int64_t m : {1, 3, 8})
        for (int64_t k : {1, 5, 8})
            for (int64_t n : {2, 8}) {
                auto a = random_tensor({m, k}, rng);
                auto b = random_tensor({k, n}, rng);
                auto out = matmul<double>(nullptr, a, b);
                auto ref = matmul_oracle(a.values(), b.values(), m, k, n);
                for (size_t i = 0; i < ref.size(); ++i) {
                    EXPECT_NEAR(out.values()[i], ref[i],
                                1e-10 * std::max(1.0, std::abs(ref[i])))
                        << "shape " << m << "x" << k << "x" << n;
                }
            }
}

TEST(Matmul, BatchedSlicesMatchOracle) {
    Rng rng(3);
    auto a = random_tensor({2, 3, 4, 5}, rng);
    auto b = random_tensor({2, 3, 5, 2}, rng);
    auto out = matmul<double>(nullptr, a, b);
    ASSERT_EQ(out.shape(), (std::vector<int64_t>{2, 3, 4, 2}));
    for (int64_t s = 0; s < 6; ++s) {
        std::vector<double> as(a.values().begin() + s * 20, a.values().begin() + (s + 1) * 20);
        std::vector<double> bs(b.values().begin() + s * 10, b.values().begin() + (s + 1) * 10);
        auto ref = matmul_oracle(as, bs, 4, 5, 2);
        for (size_t i = 0; i < ref.size(); ++i) {
            EXPECT_NEAR(out.values()[size_t(s * 8) + i], ref[i], 1e-12);
        }
    }
}

TEST(Matmul, BroadcastsSingletonBatchAxes) {
    Rng rng(4);
    auto a = random_tensor({2, 2, 3, 3}, rng);
    auto b = random_tensor({1, 2, 3, 3}, rng);  // broadcast along axis 0
    auto out = matmul<double>(nullptr, a, b);
    ASSERT_EQ(out.shape(), (std::vector<int64_t>{2, 2, 3, 3}));
    for (int64_t i = 0; i < 2; ++i)
        for (int64_t j = 0; j < 2; ++j) {
            std::vector<double> as(a.values().begin() + (i * 2 + j) * 9,
                                   a.values().begin() + (i * 2 + j + 1) * 9);
            std::vector<double> bs(b.values().begin() + j * 9,
                                   b.values().begin() + (j + 1) * 9);
            auto ref = matmul_oracle(as, bs, 3, 3, 3);
            for (size_t p = 0; p < 9; ++p) {
                EXPECT_NEAR(out.values()[size_t((i * 2 + j) * 9) + p], ref[p], 1e-12);
            }
        }
}

TEST(Matmul, InnerDimensionMismatchNamesBothShapes) {
    auto a = Tensor::zeros({2, 3});
    auto b = Tensor::zeros({4, 2});
    try {
        matmul<double>(nullptr, a, b);
        FAIL() << "expected DimensionError";
    } catch (const DimensionError& e) {
        std::string msg = e.what();
        EXPECT_NE(msg.find("(2,3)"), std::string::npos) << msg;
        EXPECT_NE(msg.find("(4,2)"), std::string::npos) << msg;
    }
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

TEST(Conv2d, ScalarKernelScalesEveryPixel) {
    auto x = Tensor::filled({1, 1, 3, 3}, 1.0);
    auto k = Tensor::from_values({1, 1, 1, 1}, {2.0});
    auto out = conv2d<double>(nullptr, x, k, Tensor(), 1, 0);
    ASSERT_EQ(out.shape(), (std::vector<int64_t>{1, 1, 3, 3}));
    for (double v : out.values()) EXPECT_DOUBLE_EQ(v, 2.0);
}

TEST(Conv2d, StrideTwoHalvesSpatialExtent) {
    auto x = Tensor::zeros({1, 1, 4, 4});
    auto k = Tensor::zeros({1, 1, 2, 2});
    auto out = conv2d<double>(nullptr, x, k, Tensor(), 2, 0);
    EXPECT_EQ(out.shape(), (std::vector<int64_t>{1, 1, 2, 2}));
}

TEST(Conv2d, MatchesSixLoopOracle) {
    Rng rng(17);
    auto x = random_tensor({2, 3, 8, 8}, rng);
    auto k = random_tensor({4, 3, 3, 3}, rng);
    auto out = conv2d<double>(nullptr, x, k, Tensor(), 1, 1);
    ASSERT_EQ(out.shape(), (std::vector<int64_t>{2, 4, 8, 8}));
    auto ref = conv2d_oracle(x.values(), k.values(), 2, 3, 8, 8, 4, 3, 3, 1, 1, 8, 8, {});
    for (size_t i = 0; i < ref.size(); ++i) {
        EXPECT_NEAR(out.values()[i], ref[i], 1e-10 * std::max(1.0, std::abs(ref[i])));
    }
}

TEST(Conv2d, BiasAndStrideMatchOracle) {
    Rng rng(18);
    auto x = random_tensor({2, 2, 7, 5}, rng);
    auto k = random_tensor({3, 2, 3, 3}, rng);
    auto bias = random_tensor({3}, rng);
    auto out = conv2d<double>(nullptr, x, k, bias, 2, 1);
    const int64_t oh = (7 + 2 - 3) / 2 + 1, ow = (5 + 2 - 3) / 2 + 1;
    ASSERT_EQ(out.shape(), (std::vector<int64_t>{2, 3, oh, ow}));
    auto ref = conv2d_oracle(x.values(), k.values(), 2, 2, 7, 5, 3, 3, 3, 2, 1, oh, ow,
                             bias.values());
    for (size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(out.values()[i], ref[i], 1e-10);
}

TEST(Conv2d, KernelLargerThanPaddedInputIsRejected) {
    auto x = Tensor::zeros({1, 1, 2, 2});
    auto k = Tensor::zeros({1, 1, 5, 5});
    EXPECT_THROW(conv2d<double>(nullptr, x, k, Tensor(), 1, 1), DimensionError);
}

// ---------------------------------------------------------------------------
// softmax
// ---------------------------------------------------------------------------

TEST(Softmax, UniformInputGivesUniformOutput) {
    auto x = Tensor::from_values({3}, {0, 0, 0});
    auto out = softmax<double>(nullptr, x);
    for (double v : out.values()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-12);
}

TEST(Softmax, LargeLogitsDoNotOverflow) {
    auto x = Tensor::from_values({2}, {1000.0, 0.0});
    auto out = softmax<double>(nullptr, x);
    EXPECT_TRUE(std::isfinite(out.values()[0]));
    EXPECT_NEAR(out.values()[0], 1.0, 1e-12);
    EXPECT_NEAR(out.values()[1], 0.0, 1e-12);
}

TEST(Softmax, MatchesExtendedPrecisionFormula) {
    Rng rng(9);
    auto x = random_tensor({5}, rng, 2.0);
    auto out = softmax<double>(nullptr, x);
    long double denom = 0;
    for (double v : x.values()) denom += std::exp((long double)v);
    for (size_t i = 0; i < 5; ++i) {
        const long double ref = std::exp((long double)x.values()[i]) / denom;
        EXPECT_NEAR(out.values()[i], double(ref), 1e-9);
    }
}

TEST(Softmax, SlicesSumToOneAndLieInUnitInterval) {
    Rng rng(10);
    auto x = random_tensor({4, 6}, rng, 3.0);
    auto out = softmax<double>(nullptr, x);
    for (int64_t r = 0; r < 4; ++r) {
        double sum = 0;
        for (int64_t c = 0; c < 6; ++c) {
            const double v = out.values()[size_t(r * 6 + c)];
            EXPECT_GT(v, 0.0);
            EXPECT_LE(v, 1.0);
            sum += v;
        }
        EXPECT_NEAR(sum, 1.0, 1e-6);
    }
}

// ---------------------------------------------------------------------------
// elementwise suite
// ---------------------------------------------------------------------------

TEST(Elementwise, ReluClampsNegatives) {
    auto x = Tensor::from_values({2}, {-1.0, 2.0});
    auto out = relu<double>(nullptr, x);
    EXPECT_DOUBLE_EQ(out.values()[0], 0.0);
    EXPECT_DOUBLE_EQ(out.values()[1], 2.0);
}

TEST(Elementwise, MaxAxisTiesRouteGradientToFirstWinner) {
    auto x = Tensor::from_values({3}, {3, 7, 7});
    x.set_requires_grad(true);
    Tape<double> tape;
    auto m = max_axis(&tape, x, 0);
    ASSERT_EQ(m.numel(), 1);
    EXPECT_DOUBLE_EQ(m.values()[0], 7.0);
    backward(m, tape);
    EXPECT_EQ(x.grad(), (std::vector<double>{0, 1, 0}));
}

TEST(Elementwise, MeanOfOneThroughEight) {
    auto x = Tensor::from_values({8}, {1, 2, 3, 4, 5, 6, 7, 8});
    auto out = mean_all<double>(nullptr, x);
    EXPECT_DOUBLE_EQ(out.values()[0], 4.5);
}

TEST(Elementwise, IncompatibleShapesAreRejected) {
    auto a = Tensor::zeros({2, 3});
    auto b = Tensor::zeros({4});
    EXPECT_THROW(add<double>(nullptr, a, b), DimensionError);
    EXPECT_THROW(mul<double>(nullptr, a, b), DimensionError);
}

TEST(Elementwise, BroadcastAddsTrailingRow) {
    auto a = Tensor::from_values({2, 3}, {1, 2, 3, 4, 5, 6});
    auto b = Tensor::from_values({3}, {10, 20, 30});
    auto out = add<double>(nullptr, a, b);
    EXPECT_EQ(out.values(), (std::vector<double>{11, 22, 33, 14, 25, 36}));
}

// ---------------------------------------------------------------------------
// batch_norm
// ---------------------------------------------------------------------------

TEST(BatchNorm, ConstantBatchCollapsesToBeta) {
    auto x = Tensor::filled({4, 3}, 5.0);
    auto gamma = Tensor::filled({3}, 2.0);
    auto beta = Tensor::from_values({3}, {0.5, -1.0, 3.0});
    auto rm = Tensor::zeros({3});
    auto rv = Tensor::filled({3}, 1.0);
    auto out = batch_norm<double>(nullptr, x, gamma, beta, rm, rv, true);
    for (int64_t r = 0; r < 4; ++r)
        for (int64_t c = 0; c < 3; ++c)
            EXPECT_NEAR(out.values()[size_t(r * 3 + c)], beta.values()[size_t(c)], 1e-9);
}

TEST(BatchNorm, TrainModeNormalizesBatchStatistics) {
    Rng rng(5);
    auto x = Tensor::zeros({64, 2});
    for (auto& v : x.values()) v = 5.0 + 2.0 * rng.gaussian();  // mean 5, var 4
    auto gamma = Tensor::filled({2}, 1.0);
    auto beta = Tensor::zeros({2});
    auto rm = Tensor::zeros({2});
    auto rv = Tensor::filled({2}, 1.0);
    auto out = batch_norm<double>(nullptr, x, gamma, beta, rm, rv, true);
    for (int64_t c = 0; c < 2; ++c) {
        double mean = 0, var = 0;
        for (int64_t r = 0; r < 64; ++r) mean += out.values()[size_t(r * 2 + c)];
        mean /= 64;
        for (int64_t r = 0; r < 64; ++r) {
            const double d = out.values()[size_t(r * 2 + c)] - mean;
            var += d * d;
        }
        var /= 64;
        EXPECT_NEAR(mean, 0.0, 1e-9);
        EXPECT_NEAR(var, 1.0, 1e-3);  // eps in the denominator shifts it slightly
    }
}

TEST(BatchNorm, EvalModeWithUnitStatsIsAffineIdentity) {
    Rng rng(6);
    auto x = random_tensor({3, 4}, rng);
    auto gamma = random_tensor({4}, rng);
    auto beta = random_tensor({4}, rng);
    auto rm = Tensor::zeros({4});
    auto rv = Tensor::filled({4}, 1.0);
    auto out = batch_norm<double>(nullptr, x, gamma, beta, rm, rv, false);
    for (int64_t r = 0; r < 3; ++r)
        for (int64_t c = 0; c < 4; ++c) {
            const double expect =
                gamma.values()[size_t(c)] * x.values()[size_t(r * 4 + c)] /
                    std::sqrt(1.0 + 1e-5) +
                beta.values()[size_t(c)];
            EXPECT_NEAR(out.values()[size_t(r * 4 + c)], expect, 1e-12);
        }
}

TEST(BatchNorm, SingleSampleTrainBatchIsRejected) {
    auto x = Tensor::zeros({1, 3});
    auto gamma = Tensor::filled({3}, 1.0);
    auto beta = Tensor::zeros({3});
    auto rm = Tensor::zeros({3});
    auto rv = Tensor::filled({3}, 1.0);
    EXPECT_THROW(batch_norm<double>(nullptr, x, gamma, beta, rm, rv, true),
                 DegenerateBatchError);
}

TEST(BatchNorm, RunningStatsUpdateWithMomentum) {
    auto x = Tensor::from_values({2, 1}, {0.0, 2.0});  // batch mean 1, var 1
    auto gamma = Tensor::filled({1}, 1.0);
    auto beta = Tensor::zeros({1});
    auto rm = Tensor::zeros({1});
    auto rv = Tensor::filled({1}, 1.0);
    batch_norm<double>(nullptr, x, gamma, beta, rm, rv, true);
    EXPECT_NEAR(rm.values()[0], 0.9 * 0.0 + 0.1 * 1.0, 1e-12);
    EXPECT_NEAR(rv.values()[0], 0.9 * 1.0 + 0.1 * 1.0, 1e-12);
}

// ---------------------------------------------------------------------------
// dropout
// ---------------------------------------------------------------------------

TEST(Dropout, RateZeroIsIdentity) {
    Rng rng(1);
    auto x = random_tensor({10}, rng);
    auto out = dropout<double>(nullptr, x, 0.0, true, rng);
    EXPECT_EQ(out.values(), x.values());
}

TEST(Dropout, EvalModeIsIdentity) {
    Rng rng(2);
    auto x = random_tensor({10}, rng);
    auto out = dropout<double>(nullptr, x, 0.7, false, rng);
    EXPECT_EQ(out.values(), x.values());
}

TEST(Dropout, SurvivorScalingPreservesMeanWithinThreeSigma) {
    Rng rng(42);
    auto x = Tensor::filled({10000}, 1.0);
    auto out = dropout<double>(nullptr, x, 0.5, true, rng);
    double mean = 0;
    for (double v : out.values()) mean += v;
    mean /= 10000;
    // each survivor contributes 2, kept with p=0.5: sd of the mean = 1/100
    EXPECT_NEAR(mean, 1.0, 3.0 * 0.01);
}

// ---------------------------------------------------------------------------
// backward / tape
// ---------------------------------------------------------------------------

TEST(Backward, SumHasUnitGradient) {
    auto x = Tensor::from_values({3}, {1, 2, 3});
    x.set_requires_grad(true);
    Tape<double> tape;
    auto loss = sum_all(&tape, x);
    backward(loss, tape);
    EXPECT_EQ(x.grad(), (std::vector<double>{1, 1, 1}));
}

TEST(Backward, QuadraticGradientIsTwoX) {
    auto x = Tensor::from_values({2}, {1, 2});
    x.set_requires_grad(true);
    Tape<double> tape;
    auto loss = sum_all(&tape, mul(&tape, x, x));
    backward(loss, tape);
    EXPECT_EQ(x.grad(), (std::vector<double>{2, 4}));
}

TEST(Backward, NonScalarLossIsRejected) {
    auto x = Tensor::from_values({2}, {1, 2});
    x.set_requires_grad(true);
    Tape<double> tape;
    auto y = mul(&tape, x, x);
    EXPECT_THROW(backward(y, tape), ContractError);
}

TEST(Backward, RepeatedCallsAccumulateLeafGradients) {
    auto x = Tensor::from_values({2}, {1, 2});
    x.set_requires_grad(true);
    Tape<double> tape;
    auto loss = sum_all(&tape, mul(&tape, x, x));
    backward(loss, tape);
    backward(loss, tape);
    EXPECT_EQ(x.grad(), (std::vector<double>{4, 8}));
}

TEST(Backward, ResetBetweenRunsIsBitwiseDeterministic) {
    Rng rng(12);
    auto x = random_tensor({4, 4}, rng);
    x.set_requires_grad(true);
    auto w = random_tensor({4, 4}, rng);
    w.set_requires_grad(true);

    auto run = [&]() {
        x.zero_grad();
        w.zero_grad();
        Tape<double> tape;
        auto h = softmax(&tape, matmul(&tape, x, w));
        auto loss = sum_all(&tape, mul(&tape, h, h));
        backward(loss, tape);
        return std::make_pair(x.grad(), w.grad());
    };
    auto first = run();
    auto second = run();
    EXPECT_EQ(first.first, second.first);    // bitwise
    EXPECT_EQ(first.second, second.second);  // bitwise
}

TEST(Backward, GradientFlowsThroughReshapePermutePad) {
    auto x = Tensor::from_values({2, 3}, {1, 2, 3, 4, 5, 6});
    x.set_requires_grad(true);
    Tape<double> tape;
    auto y = permute(&tape, reshape(&tape, x, {3, 2}), {1, 0});
    auto z = pad_bottom_right(&tape, y, 1, 2);
    ASSERT_EQ(z.shape(), (std::vector<int64_t>{3, 5}));
    auto loss = sum_all(&tape, z);
    backward(loss, tape);
    EXPECT_EQ(x.grad(), (std::vector<double>(6, 1.0)));
}

// ---------------------------------------------------------------------------
// shape plumbing
// ---------------------------------------------------------------------------

TEST(Shape, NumelMatchesProductAndValueCount) {
    auto t = Tensor::zeros({2, 3, 4});
    EXPECT_EQ(t.numel(), 24);
    EXPECT_EQ(t.values().size(), 24u);
}

TEST(Shape, NonPositiveExtentIsRejected) {
    EXPECT_THROW(Tensor::zeros({2, 0}), DimensionError);
    EXPECT_THROW(Tensor::zeros({-1}), DimensionError);
}

TEST(Shape, FromValuesLengthMismatchIsRejected) {
    EXPECT_THROW(Tensor::from_values({2, 2}, {1, 2, 3}), DimensionError);
}

}  // namespace
}  // namespace combogait
