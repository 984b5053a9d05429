#include <gtest/gtest.h>

#include <algorithm>

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

T64 rand_coords(std::size_t n, Rng& rng, bool rg = false) {
    std::vector<double> v(2 * n);
    for (auto& x : v) x = rng.uniform(0.05, 0.95);
    return T64({n, 2}, std::move(v), rg);
}

T64 rows(const T64& x, const std::vector<std::size_t>& order) {
    const std::size_t d = x.dim(1);
    std::vector<double> v;
    for (auto i : order) v.insert(v.end(), x.data().begin() + static_cast<long>(i * d), x.data().begin() + static_cast<long>((i + 1) * d));
    return T64({order.size(), d}, v);
}

}  // namespace

TEST(InitLandmarks, ZeroHeadGivesCenter) {
    Rng rng(1);
    InitializerParams<double> p{randn({3, 8}, rng), Linear<double>::zeros(8, 6)};
    const auto s = init_landmarks(randn({4, 8}, rng), p);
    ASSERT_EQ(s.coords.shape(), (Shape{3, 2}));
    for (double v : s.coords.data()) EXPECT_EQ(v, 0.5);
}

TEST(InitLandmarks, InsideUnitSquareAndGradientReachesMemory) {
    Rng rng(2);
    InitializerParams<double> p{randn({3, 8}, rng), Linear<double>::xavier(8, 6, rng)};
    auto mem = randn({4, 8}, rng, true);
    for (auto& v : mem.mutable_data()) v *= 5;
    const auto s = init_landmarks(mem, p);
    for (double v : s.coords.data()) {
        EXPECT_GT(v, 0.0);
        EXPECT_LT(v, 1.0);
    }
    for (auto& v : mem.mutable_data()) v /= 5;
    backward(sum(init_landmarks(mem, p).coords));
    double mag = 0;
    for (double g : mem.grad()) mag += std::abs(g);
    EXPECT_GT(mag, 0.0);
}

TEST(PthStage, SingleQuery) {
    Rng rng(3);
    auto p = DecoderStageParams<double>::init(8, 2, 16, rng);
    const auto e = randn({1, 8}, rng), mem = randn({6, 8}, rng);
    const auto ref = oracle::decoder_stage(oracle::values(e), 1, oracle::values(mem), 6, 8, p);
    EXPECT_LT(oracle::max_abs_diff(oracle::values(pth_stage(e, mem, p)), ref), 1e-9);
}

TEST(PthStage, PermutationEquivariant) {
    Rng rng(4);
    auto p = DecoderStageParams<double>::init(16, 4, 32, rng);
    const auto e = randn({5, 16}, rng), mem = randn({16, 16}, rng);
    const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
    const auto a = pth_stage(e, mem, p), b = pth_stage(rows(e, perm), mem, p);
    EXPECT_LT(oracle::max_abs_diff(oracle::values(b), oracle::values(rows(a, perm))), 1e-12);
}

TEST(PthStage, MatchesLoopOracle) {
    Rng rng(5);
    for (int trial = 0; trial < 5; ++trial) {
        auto p = DecoderStageParams<double>::init(16, 4, 32, rng);
        const auto e = randn({5, 16}, rng), mem = randn({16, 16}, rng);
        const auto ref = oracle::decoder_stage(oracle::values(e), 5, oracle::values(mem), 16, 16, p);
        EXPECT_LT(oracle::max_abs_diff(oracle::values(pth_stage(e, mem, p)), ref), 1e-6);
    }
    auto p = DecoderStageParams<double>::init(16, 4, 32, rng);
    EXPECT_THROW(pth_stage(randn({5, 16}, rng), randn({4, 8}, rng), p), ShapeMismatch);
}

TEST(DynamicAggregate, SinglePixel) {
    Rng rng(6);
    const auto mem = randn({1, 4}, rng);
    for (double tau : {1e-3, 1.0, 1e6}) {
        const auto a = dynamic_aggregate(rand_coords(3, rng), mem, pixel_centers<double>(1, 1), tau);
        for (double w : a.weights.data()) EXPECT_EQ(w, 1.0);
        for (std::size_t j = 0; j < 3; ++j)
            for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(a.queries.at(j * 4 + c), mem.at(c));
    }
}

TEST(DynamicAggregate, EquidistantPixels) {
    Rng rng(7);
    const auto a = dynamic_aggregate(T64({1, 2}, {0.5, 0.3}), randn({2, 3}, rng), pixel_centers<double>(1, 2), 1000.0);
    EXPECT_NEAR(a.weights.at(0), 0.5, 1e-15);
    EXPECT_NEAR(a.weights.at(1), 0.5, 1e-15);
}

TEST(DynamicAggregate, TwoByTwoExample) {
    Rng rng(8);
    const auto a = dynamic_aggregate(T64({1, 2}, {0.25, 0.25}), randn({4, 3}, rng), pixel_centers<double>(2, 2), 1000.0);
    const auto ref = oracle::softmax_row({0.0, -1000 * 0.25, -1000 * 0.25, -1000 * 0.5});
    for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(a.weights.at(k), ref[k], 1e-7);
    EXPECT_NEAR(a.weights.at(0), 1.0 - 2 * std::exp(-250.0), 1e-15);
}

TEST(DynamicAggregate, MatchesLoopOracle) {
    Rng rng(9);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t n = 1 + trial % 5, h = 2 + trial % 4, w = 3 + trial % 3, d = 4;
        const double tau = std::pow(10.0, 1 + trial % 4);
        const auto coords = rand_coords(n, rng), mem = randn({h * w, d}, rng);
        const auto pix = pixel_centers<double>(h, w);
        oracle::Vec ref_w;
        const auto ref = oracle::aggregate(oracle::values(coords), n, oracle::values(mem), h * w, d, oracle::values(pix), tau, &ref_w);
        const auto a = dynamic_aggregate(coords, mem, pix, tau);
        EXPECT_LT(oracle::max_abs_diff(oracle::values(a.queries), ref), 1e-5);
        EXPECT_LT(oracle::max_abs_diff(oracle::values(a.weights), ref_w), 1e-5);
    }
}

TEST(DynamicAggregate, SimplexAndConvexBounds) {
    Rng rng(10);
    for (int trial = 0; trial < 20; ++trial) {
        const auto mem = randn({64, 5}, rng);
        const auto a = dynamic_aggregate(rand_coords(4, rng), mem, pixel_centers<double>(8, 8), 1000.0);
        for (std::size_t j = 0; j < 4; ++j) {
            double s = 0;
            for (std::size_t k = 0; k < 64; ++k) {
                EXPECT_GE(a.weights.at(j * 64 + k), 0.0);
                s += a.weights.at(j * 64 + k);
            }
            EXPECT_NEAR(s, 1.0, 1e-6);
            for (std::size_t c = 0; c < 5; ++c) {
                double lo = 1e300, hi = -1e300;
                for (std::size_t k = 0; k < 64; ++k) lo = std::min(lo, mem.at(k * 5 + c)), hi = std::max(hi, mem.at(k * 5 + c));
                EXPECT_GE(a.queries.at(j * 5 + c), lo - 1e-12);
                EXPECT_LE(a.queries.at(j * 5 + c), hi + 1e-12);
            }
        }
    }
}

TEST(DynamicAggregate, TranslationPairing) {
    Rng rng(11);
    for (int trial = 0; trial < 10; ++trial) {
        const auto coords = rand_coords(3, rng), mem = randn({16, 4}, rng);
        const auto pix = pixel_centers<double>(4, 4);
        const double dx = rng.uniform(-2, 2), dy = rng.uniform(-2, 2);
        auto shift = [&](const T64& t) {
            std::vector<double> v(t.data().begin(), t.data().end());
            for (std::size_t i = 0; i < v.size(); i += 2) v[i] += dx, v[i + 1] += dy;
            return T64(t.shape(), v);
        };
        const auto a = dynamic_aggregate(coords, mem, pix, 100.0);
        const auto b = dynamic_aggregate(shift(coords), mem, shift(pix), 100.0);
        EXPECT_LT(oracle::max_abs_diff(oracle::values(a.weights), oracle::values(b.weights)), 1e-9);
    }
}

TEST(DynamicAggregate, MonotoneSharpening) {
    Rng rng(12);
    for (int trial = 0; trial < 50; ++trial) {
        const auto coords = rand_coords(2, rng), mem = randn({64, 2}, rng);
        const auto pix = pixel_centers<double>(8, 8);
        std::vector<double> prev(2, 0.0);
        for (double tau : {10.0, 100.0, 1000.0, 10000.0}) {
            const auto w = dynamic_aggregate(coords, mem, pix, tau).weights;
            for (std::size_t j = 0; j < 2; ++j) {
                const double mx = *std::max_element(w.data().begin() + static_cast<long>(j * 64), w.data().begin() + static_cast<long>(j * 64 + 64));
                EXPECT_GE(mx, prev[j] - 1e-15);
                prev[j] = mx;
            }
        }
    }
}

TEST(DynamicAggregate, HardCropLimit) {
    Rng rng(13);
    const auto pix = pixel_centers<double>(16, 16);
    for (int trial = 0; trial < 100; ++trial) {
        const auto mem = randn({256, 3}, rng);
        T64 c;
        std::size_t nearest = 0;
        for (;;) {
            c = rand_coords(1, rng);
            std::vector<std::pair<double, std::size_t>> d;
            for (std::size_t k = 0; k < 256; ++k) {
                const double dx = c.at(0) - pix.at(2 * k), dy = c.at(1) - pix.at(2 * k + 1);
                d.push_back({dx * dx + dy * dy, k});
            }
            std::sort(d.begin(), d.end());
            nearest = d[0].second;
            if (d[1].first - d[0].first > 1e-4) break;
        }
        const auto q = dynamic_aggregate(c, mem, pix, 1e6).queries;
        for (std::size_t ch = 0; ch < 3; ++ch) EXPECT_LT(std::abs(q.at(ch) - mem.at(nearest * 3 + ch)), 1e-6);
    }
}

TEST(DynamicAggregate, Errors) {
    Rng rng(14);
    const auto mem = randn({4, 2}, rng);
    const auto pix = pixel_centers<double>(2, 2);
    EXPECT_THROW(dynamic_aggregate(rand_coords(1, rng), mem, pix, 0.0), BadTemperature);
    EXPECT_THROW(dynamic_aggregate(rand_coords(1, rng), mem, pix, -5.0), BadTemperature);
    EXPECT_THROW(dynamic_aggregate(rand_coords(1, rng), randn({3, 2}, rng), pix, 1.0), ShapeMismatch);
}

TEST(DynamicAggregate, DifferentiableInTemperatureAndMemory) {
    Rng rng(15);
    auto coords = rand_coords(2, rng, true);
    auto mem = randn({9, 3}, rng, true);
    T64 tau({1}, {20.0}, true);
    const auto pix = pixel_centers<double>(3, 3);
    const T64 w = randn({2, 3}, rng);
    const auto r = grad_check<double>([&] { return sum(mul(dynamic_aggregate(coords, mem, pix, tau).queries, w)); },
                                      {{"coords", coords}, {"memory", mem}, {"tau", tau}});
    EXPECT_LT(r.max_rel_error, 1e-4) << r;
}

TEST(PredictResiduals, ZeroOutputAndRowSharing) {
    Rng rng(16);
    const auto zero = FfnParams<double>::init(8, 8, 2, rng, true);
    const auto none = predict_residuals(randn({4, 8}, rng), zero);
    for (double v : none.data()) EXPECT_EQ(v, 0.0);
    const auto p = FfnParams<double>::init(8, 8, 2, rng);
    const auto e = randn({3, 8}, rng);
    const auto u = predict_residuals(rows(e, {0, 1, 1, 2}), p);
    EXPECT_EQ(u.at(2), u.at(4));
    EXPECT_EQ(u.at(3), u.at(5));
    auto q = randn({3, 8}, rng, true);
    NamedTensors<double> in{{"queries", q}};
    p.collect(in, "predictor");
    const T64 w = randn({3, 2}, rng);
    GradCheckOptions opt;
    opt.tol = 1e-5;
    const auto r = grad_check<double>([&] { return sum(mul(predict_residuals(q, p), w)); }, in, opt);
    EXPECT_LT(r.max_rel_error, 1e-5) << r;
}

namespace {

struct HeadFixture {
    ModelConfig cfg;
    Model<double> model;
    Tensor<double> image;

    explicit HeadFixture(std::uint64_t seed, std::size_t stages = 3) {
        cfg.image_size = 32;
        cfg.levels = 3;
        cfg.stages = stages;
        cfg.landmarks = 4;
        cfg.d_model = 16;
        cfg.n_heads = 2;
        cfg.d_ff = 32;
        cfg.backbone_width = 4;
        model = Model<double>(cfg, seed);
        Rng rng(seed);
        image = randn({32, 32, 1}, rng);
    }

    void randomize_predictors(Rng& rng) {
        for (auto& s : model.head().stages)
            if (s.predictor)
                for (auto& v : s.predictor->out.weight.mutable_data()) v = 0.05 * rng.normal();
    }
};

}  // namespace

TEST(Refine, ZeroPredictorsKeepInitialLandmarks) {
    HeadFixture f(17);
    const auto states = f.model.predict(f.image);
    ASSERT_EQ(states.size(), 4u);
    for (std::size_t i = 1; i < states.size(); ++i) {
        EXPECT_EQ(states[i].stage, i);
        EXPECT_EQ(oracle::values(states[i].coords), oracle::values(states[0].coords));
    }
}

TEST(Refine, Telescoping) {
    HeadFixture f(18);
    Rng rng(18);
    f.randomize_predictors(rng);
    const auto states = f.model.predict(f.image);
    oracle::Vec total(8, 0.0);
    for (std::size_t i = 1; i < states.size(); ++i) {
        oracle::Vec step(8);
        for (std::size_t k = 0; k < 8; ++k) {
            step[k] = states[i - 1].coords.at(k) + states[i].residuals.at(k);
            total[k] += states[i].residuals.at(k);
        }
        EXPECT_EQ(oracle::values(states[i].coords), step);
    }
    for (std::size_t k = 0; k < 8; ++k) EXPECT_NEAR(states.back().coords.at(k) - states[0].coords.at(k), total[k], 1e-14);
    EXPECT_NE(states.back().coords.at(0), states[0].coords.at(0));
}

TEST(Refine, StagesUseDescendingLevelsAndAggregateFromStageTwo) {
    HeadFixture f(19);
    const auto r = f.model.forward(f.image);
    EXPECT_FALSE(r.states[1].weights.defined());
    ASSERT_TRUE(r.states[2].weights.defined());
    EXPECT_EQ(r.states[2].weights.dim(1), r.memories.level(2).memory.dim(0));
    EXPECT_EQ(r.states[3].weights.dim(1), r.memories.level(1).memory.dim(0));
    for (const auto& s : r.states) EXPECT_EQ(s.coords.dim(0), 4u);
}

TEST(Refine, SingleStageMatchesComposition) {
    HeadFixture f(20, 1);
    Rng rng(20);
    f.randomize_predictors(rng);
    const auto r = f.model.forward(f.image);
    ASSERT_EQ(r.states.size(), 2u);
    const auto& top = r.memories.level(3).memory;
    const auto& head = f.model.head();
    const auto q = oracle::decoder_stage(oracle::values(head.init.embeddings), 4, oracle::values(top), top.dim(0), 16,
                                         head.stages[0].decoder);
    const auto u = oracle::ffn(q, 4, *head.stages[0].predictor);
    // L0 from the pooled top memory
    oracle::Vec pooled(16, 0.0);
    for (std::size_t k = 0; k < top.dim(0); ++k)
        for (std::size_t c = 0; c < 16; ++c) pooled[c] += top.at(k * 16 + c) / static_cast<double>(top.dim(0));
    auto l0 = oracle::linear(pooled, 1, head.init.coord_head);
    for (double& v : l0) v = 1 / (1 + std::exp(-v));
    for (std::size_t k = 0; k < 8; ++k) {
        EXPECT_NEAR(r.states[0].coords.at(k), l0[k], 1e-12);
        EXPECT_NEAR(r.states[1].coords.at(k), l0[k] + u[k], 1e-9);
    }
}

TEST(Refine, StageCountErrors) {
    HeadFixture f(21);
    const auto r = f.model.forward(f.image);
    EXPECT_THROW(refine(r.memories, f.model.head(), 4, 1000.0), BadStageCount);
    EXPECT_THROW(refine(r.memories, f.model.head(), 0, 1000.0), BadStageCount);
    EXPECT_THROW(refine(r.memories, f.model.head(), 3, 0.0), BadTemperature);
    ModelConfig bad = f.cfg;
    bad.stages = 4;
    EXPECT_THROW(Model<double>(bad, 1), BadStageCount);
}

TEST(Refine, BackboneWeightsReachFinalLandmarks) {
    HeadFixture f(22);
    Rng rng(22);
    f.randomize_predictors(rng);
    const auto before = oracle::values(f.model.predict(f.image).back().coords);
    for (auto& [name, t] : f.model.parameters())
        if (name.find("backbone") == 0 && name.ends_with("weight")) {
            auto v = Tensor<double>(t).mutable_data();
            const std::vector<double> old(v.begin(), v.end());
            for (auto& x : v) x += 0.1 * rng.normal();
            const auto after = oracle::values(f.model.predict(f.image).back().coords);
            std::copy(old.begin(), old.end(), v.begin());
            EXPECT_GT(oracle::max_abs_diff(before, after), 0.0) << name;
        }
}

TEST(Refine, VariantsShapeTheOutput) {
    for (auto [pyramid, dlr] : {std::pair{false, false}, {true, false}, {false, true}}) {
        HeadFixture f(23);
        f.cfg.pyramid = pyramid;
        f.cfg.dlr = dlr;
        Model<double> m(f.cfg, 23);
        const auto states = m.predict(f.image);
        EXPECT_EQ(states.size(), dlr ? 4u : 1u);
        EXPECT_EQ(states.back().stage, 3u);
        for (const auto& [name, t] : m.parameters()) {
            if (!pyramid) EXPECT_EQ(name.find("cross_scale"), std::string::npos);
            if (!dlr) EXPECT_EQ(name.find("coord_head"), std::string::npos);
        }
    }
}
