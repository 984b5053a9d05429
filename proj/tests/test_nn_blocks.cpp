#include <gtest/gtest.h>

#include <set>

#include "oracles.hpp"
#include "repformer/repformer.hpp"

using namespace repformer;
using T64 = Tensor<double>;

namespace {

T64 randn(Shape s, Rng& rng, bool rg = false) {
    std::vector<double> v(numel(s));
    for (auto& x : v) x = rng.normal();
    return T64(std::move(s), std::move(v), rg);
}

constexpr double kOracleTol = 1e-6;

}  // namespace

TEST(LayerNorm, Examples) {
    const T64 g = T64::full({4}, 1.0), b = T64::zeros({4});
    const auto flat = layer_norm(T64({1, 4}, {5, 5, 5, 5}), g, b);
    for (double v : flat.data()) EXPECT_EQ(v, 0.0);
    const auto y = layer_norm(T64({1, 2}, {1, -1}), T64::full({2}, 1.0), T64::zeros({2}));
    // eps = 1e-5 in the variance keeps this a hair below unit magnitude
    EXPECT_NEAR(y.at(0), 1.0, 1e-5);
    EXPECT_NEAR(y.at(1), -1.0, 1e-5);
}

TEST(LayerNorm, RowStatistics) {
    Rng rng(1);
    auto x = randn({6, 16}, rng);
    for (auto& v : x.mutable_data()) v = 3 * v + 2;
    const auto y = layer_norm(x, T64::full({16}, 1.0), T64::zeros({16}));
    for (std::size_t r = 0; r < 6; ++r) {
        double m = 0, var = 0;
        for (std::size_t c = 0; c < 16; ++c) m += y.at(r * 16 + c);
        m /= 16;
        for (std::size_t c = 0; c < 16; ++c) var += (y.at(r * 16 + c) - m) * (y.at(r * 16 + c) - m);
        var /= 16;
        EXPECT_LT(std::abs(m), 1e-6);
        EXPECT_LT(std::abs(var - 1), 1e-4);
    }
}

TEST(Mha, SingleKeyReducesToValuePath) {
    Rng rng(2);
    auto p = MhaParams<double>::init(8, 2, rng);
    const auto q = randn({3, 8}, rng), kv = randn({1, 8}, rng);
    const auto out = mha(q, kv, kv, p).output;
    const auto ref = oracle::linear(oracle::linear(oracle::values(kv), 1, p.v), 1, p.o);
    for (std::size_t r = 0; r < 3; ++r)
        for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(out.at(r * 8 + c), ref[c], 1e-12);
}

TEST(Mha, IdenticalKeysGiveUniformWeights) {
    Rng rng(3);
    auto p = MhaParams<double>::init(8, 4, rng);
    const auto q = randn({2, 8}, rng), row = randn({1, 8}, rng);
    const auto k = concat<double>({row, row, row, row, row}, 0);
    const auto w = mha(q, k, randn({5, 8}, rng), p).weights;
    for (double v : w.data()) EXPECT_NEAR(v, 0.2, 1e-12);
}

TEST(Mha, MatchesLoopOracle) {
    Rng rng(4);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t heads = trial % 2 ? 2 : 4, lq = 1 + trial % 4, lk = 2 + trial % 5;
        auto p = MhaParams<double>::init(8, heads, rng);
        const auto q = randn({lq, 8}, rng), k = randn({lk, 8}, rng), v = randn({lk, 8}, rng);
        const auto ref = oracle::mha(oracle::values(q), lq, oracle::values(k), oracle::values(v), lk, p);
        EXPECT_LT(oracle::max_abs_diff(oracle::values(mha(q, k, v, p).output), ref), kOracleTol);
    }
}

TEST(Mha, RandomThreeByEight) {
    Rng rng(5);
    auto p = MhaParams<double>::init(8, 2, rng);
    const auto q = randn({3, 8}, rng), k = randn({3, 8}, rng), v = randn({3, 8}, rng);
    const auto ref = oracle::mha(oracle::values(q), 3, oracle::values(k), oracle::values(v), 3, p);
    EXPECT_LT(oracle::max_abs_diff(oracle::values(mha(q, k, v, p).output), ref), kOracleTol);
}

TEST(Mha, WeightRowsSumToOne) {
    Rng rng(6);
    auto p = MhaParams<double>::init(16, 4, rng);
    const auto w = mha(randn({5, 16}, rng), randn({9, 16}, rng), randn({9, 16}, rng), p).weights;
    ASSERT_EQ(w.shape(), (Shape{4, 5, 9}));
    for (std::size_t r = 0; r < 20; ++r) {
        double s = 0;
        for (std::size_t c = 0; c < 9; ++c) s += w.at(r * 9 + c);
        EXPECT_NEAR(s, 1.0, 1e-6);
    }
}

TEST(Mha, PermutationEquivariantInQueries) {
    Rng rng(7);
    auto p = MhaParams<double>::init(8, 2, rng);
    const auto q = randn({4, 8}, rng), k = randn({6, 8}, rng), v = randn({6, 8}, rng);
    const std::vector<std::size_t> perm{2, 0, 3, 1};
    std::vector<double> qp;
    for (auto i : perm) qp.insert(qp.end(), q.data().begin() + static_cast<long>(i * 8), q.data().begin() + static_cast<long>(i * 8 + 8));
    const auto a = mha(q, k, v, p).output, b = mha(T64({4, 8}, qp), k, v, p).output;
    for (std::size_t r = 0; r < 4; ++r)
        for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(b.at(r * 8 + c), a.at(perm[r] * 8 + c), 1e-12);
}

TEST(Mha, BadWidth) {
    Rng rng(8);
    EXPECT_THROW(MhaParams<double>::init(10, 4, rng), BadWidth);
    auto p = MhaParams<double>::init(8, 2, rng);
    EXPECT_THROW(mha(T64::zeros({2, 6}), T64::zeros({2, 8}), T64::zeros({2, 8}), p), ShapeMismatch);
}

TEST(Blocks, GradCheck) {
    Rng rng(9);
    auto p = MhaParams<double>::init(8, 2, rng);
    auto f = FfnParams<double>::init(8, 12, 8, rng);
    auto q = randn({3, 8}, rng, true), k = randn({4, 8}, rng, true);
    NamedTensors<double> in{{"q", q}, {"k", k}};
    p.collect(in, "mha");
    f.collect(in, "ffn");
    const T64 w = randn({3, 8}, rng);
    GradCheckOptions opt;
    opt.abs_floor = 1e-6;  // key biases get an identically zero gradient
    const auto r = grad_check<double>([&] { return sum(mul(f(mha(q, k, k, p).output), w)); }, in, opt);
    EXPECT_LT(r.max_rel_error, 1e-4) << r;
}

TEST(SinCos, RangeDistinctDeterministic) {
    const auto a = sincos_pos2d<double>(16, 16, 64);
    ASSERT_EQ(a.shape(), (Shape{256, 64}));
    for (double v : a.data()) {
        EXPECT_GE(v, -1.0);
        EXPECT_LE(v, 1.0);
    }
    std::set<std::vector<double>> rows;
    for (std::size_t i = 0; i < 256; ++i)
        rows.insert(std::vector<double>(a.data().begin() + static_cast<long>(i * 64), a.data().begin() + static_cast<long>(i * 64 + 64)));
    EXPECT_EQ(rows.size(), 256u);
    const auto b = sincos_pos2d<double>(16, 16, 64);
    EXPECT_EQ(oracle::values(a), oracle::values(b));
    EXPECT_LT(oracle::max_abs_diff(oracle::values(a), oracle::sincos(16, 16, 64)), 1e-12);
    EXPECT_THROW(sincos_pos2d<double>(4, 4, 30), BadWidth);
}

TEST(SinCos, AtPointsScalarOracle) {
    const auto e = sincos_pos_at(Tensor<double>({2, 2}, {0.0, 0.0, 0.125, 0.25}), 8);
    ASSERT_EQ(e.shape(), (Shape{2, 8}));
    const std::vector<double> origin{0, 1, 0, 1, 0, 1, 0, 1};
    for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(e.at(i), origin[i], 1e-15);
    // y = 0.25 occupies the first half, x = 0.125 the second
    EXPECT_NEAR(e.at(8 + 0), 1.0, 1e-12);
    EXPECT_NEAR(e.at(8 + 1), 0.0, 1e-12);
    EXPECT_NEAR(e.at(8 + 2), std::sin(std::numbers::pi / 2 / 100), 1e-12);
    EXPECT_NEAR(e.at(8 + 4), std::sin(std::numbers::pi / 4), 1e-12);
    EXPECT_NEAR(e.at(8 + 7), std::cos(std::numbers::pi / 4 / 100), 1e-12);
    EXPECT_THROW(sincos_pos_at(Tensor<double>::zeros({1, 2}), 6), BadWidth);
    EXPECT_THROW(sincos_pos_at(Tensor<double>::zeros({2}), 8), ShapeMismatch);
}

TEST(Bilinear, ConstantStaysConstant) {
    const auto y = bilinear_upsample(T64::full({3, 2, 2}, 7.0), 7, 5);
    ASSERT_EQ(y.shape(), (Shape{7, 5, 2}));
    for (double v : y.data()) EXPECT_NEAR(v, 7.0, 1e-12);
}

TEST(Bilinear, HalfPixelRampExample) {
    // half-pixel centers with edge clamping; same values as
    // torch.nn.functional.interpolate(mode="bilinear", align_corners=False)
    const auto y = bilinear_upsample(T64({1, 2, 1}, {0, 1}), 1, 4);
    EXPECT_EQ(oracle::values(y), (oracle::Vec{0.0, 0.25, 0.75, 1.0}));
}

TEST(Bilinear, MatchesLoopOracle) {
    Rng rng(10);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t h = 1 + trial % 4, w = 1 + (trial / 2) % 4, c = 1 + trial % 3;
        const std::size_t H = h * (1 + trial % 3) + trial % 2, W = w * 2 + (trial % 3);
        const auto x = randn({h, w, c}, rng);
        const auto ref = oracle::bilinear(oracle::values(x), h, w, c, H, W);
        EXPECT_LT(oracle::max_abs_diff(oracle::values(bilinear_upsample(x, H, W)), ref), 1e-12);
    }
}

TEST(Bilinear, GradientAndErrors) {
    Rng rng(11);
    auto x = randn({3, 2, 2}, rng, true);
    const T64 w = randn({6, 5, 2}, rng);
    const auto r = grad_check<double>([&] { return sum(mul(bilinear_upsample(x, 6, 5), w)); }, {{"x", x}});
    EXPECT_LT(r.max_rel_error, 1e-5) << r;
    EXPECT_THROW(bilinear_upsample(x, 2, 5), BadTarget);
}
