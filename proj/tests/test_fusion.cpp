#include <gtest/gtest.h>

#include <random>

#include "block_check.hpp"
#include "reference.hpp"
#include "schvpp/error.hpp"
#include "schvpp/fusion.hpp"
#include "test_support.hpp"

using namespace schvpp;
using schvpp::testing::random_tensor;
using schvpp::testing::tiny_config;

namespace {

using V = Var<double>;

reference::Map to_map(const Tensor<double>& t) {
    reference::Map m(t.dim(0), t.dim(1), t.dim(2));
    m.v.assign(t.data.begin(), t.data.end());
    return m;
}

ParameterStore fusion_store(const ModelConfig& cfg, std::uint64_t seed = 5) {
    ParamLayout layout;
    declare_safm(layout, "safm", cfg.channels);
    declare_cafm(layout, "cafm", cfg.channels, cfg.cafm_reduction);
    return schvpp::testing::jittered_store(layout, seed, 0.3);
}

ParameterStore hafm_store(const ModelConfig& cfg, std::uint64_t seed = 6) {
    ParamLayout layout;
    declare_hafm(layout, "hafm", cfg);
    return schvpp::testing::jittered_store(layout, seed);
}

void expect_passes(const GradCheckReport& r) {
    EXPECT_TRUE(r.passed()) << r.name << ": max relative error " << r.max_rel_error << " in " << r.worst_array;
}

void expect_passes(const std::vector<GradCheckReport>& reports) {
    for (const auto& r : reports) expect_passes(r);
}

constexpr FusionMode kModes[] = {FusionMode::hybrid, FusionMode::sequential, FusionMode::parallel,
                                 FusionMode::spatial_only, FusionMode::channel_only};

} // namespace

TEST(Fusion, ModeNamesRoundTrip) {
    for (auto m : kModes) EXPECT_EQ(parse_fusion_mode(to_string(m)), m);
    EXPECT_THROW(parse_fusion_mode("serial"), InvalidArgument);
}

TEST(Fusion, SafmAndCafmMatchReference) {
    const auto cfg = tiny_config();
    const auto store = fusion_store(cfg);
    std::mt19937_64 rng(1);
    const auto lf = random_tensor<double>({cfg.channels, 5, 6}, rng);
    const auto gf = random_tensor<double>({cfg.channels, 5, 6}, rng);
    const ParamBinding<double> b(store, false);
    const BlockParams<double> root(b, "");
    const reference::Model ref(store, cfg);

    const auto sw = safm(constant(lf), constant(gf), root.sub("safm"));
    const auto [rl, rg] = ref.safm(to_map(lf), to_map(gf), "safm");
    ASSERT_EQ(sw.lf.shape(), (Shape{5, 6}));
    for (std::size_t i = 0; i < rl.size(); ++i) {
        EXPECT_NEAR(sw.lf.value()[i], rl[i], 1e-14);
        EXPECT_NEAR(sw.gf.value()[i], rg[i], 1e-14);
    }
    const auto cw = cafm(constant(lf), constant(gf), root.sub("cafm"));
    const auto [cl, cg] = ref.cafm(to_map(lf), to_map(gf), "cafm");
    ASSERT_EQ(cw.lf.shape(), (Shape{cfg.channels}));
    for (std::size_t i = 0; i < cl.size(); ++i) {
        EXPECT_NEAR(cw.lf.value()[i], cl[i], 1e-14);
        EXPECT_NEAR(cw.gf.value()[i], cg[i], 1e-14);
    }
}

TEST(Fusion, WeightsAreSimplices) {
    const auto cfg = tiny_config();
    std::mt19937_64 rng(2);
    for (int trial = 0; trial < 200; ++trial) {
        const auto store = fusion_store(cfg, 100 + trial);
        const ParamBinding<float> b(store, false);
        const BlockParams<float> root(b, "");
        const auto lf = constant(random_tensor<float>({cfg.channels, 4, 8}, rng, -3, 3));
        const auto gf = constant(random_tensor<float>({cfg.channels, 4, 8}, rng, -3, 3));
        const auto sw = safm(lf, gf, root.sub("safm"));
        for (const auto* map : {&sw.lf, &sw.gf}) {
            double s = 0;
            for (float v : map->value().data) s += v;
            ASSERT_NEAR(s, 1.0, 1e-6);
        }
        const auto cw = cafm(lf, gf, root.sub("cafm"));
        for (std::size_t c = 0; c < cfg.channels; ++c)
            ASSERT_NEAR(double(cw.lf.value()[c]) + cw.gf.value()[c], 1.0, 1e-6);
    }
}

TEST(Fusion, FactoredAndNestedHybridAgree) {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t c = 2 + trial % 7, h = 1 + trial % 5, w = 1 + trial % 6;
        const auto lf = constant(random_tensor<float>({c, h, w}, rng, -4, 4));
        const auto gf = constant(random_tensor<float>({c, h, w}, rng, -4, 4));
        const SpatialWeightPair<float> sw{constant(random_tensor<float>({h, w}, rng, 0, 1)),
                                          constant(random_tensor<float>({h, w}, rng, 0, 1))};
        const ChannelWeightPair<float> cw{constant(random_tensor<float>({c}, rng, 0, 1)),
                                          constant(random_tensor<float>({c}, rng, 0, 1))};
        const auto a = fuse_hybrid(lf, gf, sw, cw).value();
        const auto b = fuse_hybrid_nested(lf, gf, sw, cw).value();
        for (std::size_t i = 0; i < a.numel(); ++i) ASSERT_LE(std::abs(a[i] - b[i]), 1e-6f);
    }
}

TEST(Fusion, SingleWeightVariantsAreConvexCombinations) {
    std::mt19937_64 rng(4);
    const auto lf = random_tensor<double>({3, 2, 2}, rng);
    const auto gf = random_tensor<double>({3, 2, 2}, rng);
    const Tensor<double> half(Shape{2, 2}, 0.5), halfc(Shape{3}, 0.5);
    const auto s = fuse_spatial(constant(lf), constant(gf), {constant(half), constant(half)}).value();
    const auto c = fuse_channel(constant(lf), constant(gf), {constant(halfc), constant(halfc)}).value();
    const auto p =
        fuse_parallel(constant(lf), constant(gf), {constant(half), constant(half)}, {constant(halfc), constant(halfc)})
            .value();
    for (std::size_t i = 0; i < lf.numel(); ++i) {
        const double mean = 0.5 * (lf[i] + gf[i]);
        EXPECT_NEAR(s[i], mean, 1e-15);
        EXPECT_NEAR(c[i], mean, 1e-15);
        EXPECT_NEAR(p[i], 2 * mean, 1e-15);
    }
    EXPECT_THROW(fuse_spatial(constant(lf), constant(random_tensor<double>({3, 2, 3}, rng)),
                              {constant(half), constant(half)}),
                 InvalidArgument);
}

TEST(Fusion, HafmMatchesReferenceInEveryMode) {
    std::mt19937_64 rng(5);
    for (bool rescale : {false, true})
        for (auto mode : kModes) {
            auto cfg = tiny_config();
            cfg.fusion_mode = mode;
            cfg.rescale_spatial = rescale;
            const auto store = hafm_store(cfg);
            const auto x = random_tensor<double>({cfg.channels, 8, 16}, rng);
            const ParamBinding<double> b(store, false);
            const auto got = hafm(constant(x), BlockParams<double>(b, "hafm"), cfg).value();
            const auto want = reference::Model(store, cfg).hafm(to_map(x), "hafm");
            double worst = 0;
            for (std::size_t i = 0; i < want.v.size(); ++i) worst = std::max(worst, std::abs(got[i] - want.v[i]));
            EXPECT_LT(worst, 1e-11) << to_string(mode) << " rescale=" << rescale;
        }
}

TEST(Fusion, LayoutFollowsMode) {
    for (auto mode : kModes) {
        auto cfg = tiny_config();
        cfg.fusion_mode = mode;
        ParamLayout layout;
        declare_hafm(layout, "h", cfg);
        bool has_safm = false, has_cafm = false;
        for (const auto& s : layout.specs()) {
            has_safm |= s.name.rfind("h.safm.", 0) == 0;
            has_cafm |= s.name.rfind("h.cafm.", 0) == 0;
        }
        EXPECT_EQ(has_safm, mode != FusionMode::channel_only) << to_string(mode);
        EXPECT_EQ(has_cafm, mode != FusionMode::spatial_only) << to_string(mode);
    }
}

TEST(Fusion, TraceExposesWeights) {
    auto cfg = tiny_config();
    cfg.fusion_mode = FusionMode::sequential;
    const auto store = hafm_store(cfg);
    std::mt19937_64 rng(6);
    const ParamBinding<double> b(store, false);
    HafmTrace<double> trace;
    hafm(constant(random_tensor<double>({cfg.channels, 8, 8}, rng)), BlockParams<double>(b, "hafm"), cfg, &trace);
    ASSERT_TRUE(trace.spatial.has_value());
    ASSERT_TRUE(trace.channel.has_value());
    EXPECT_EQ(trace.f_lf.shape(), (Shape{cfg.channels, 8, 8}));
    double s = 0;
    for (double v : trace.spatial->lf.value().data) s += v;
    EXPECT_NEAR(s, 1.0, 1e-12);

    cfg.fusion_mode = FusionMode::channel_only;
    const auto store2 = hafm_store(cfg);
    const ParamBinding<double> b2(store2, false);
    HafmTrace<double> t2;
    hafm(constant(random_tensor<double>({cfg.channels, 8, 8}, rng)), BlockParams<double>(b2, "hafm"), cfg, &t2);
    EXPECT_FALSE(t2.spatial.has_value());
    EXPECT_TRUE(t2.channel.has_value());
}

TEST(Fusion, RescaleMultipliesSpatialPathByPositions) {
    auto cfg = tiny_config();
    cfg.fusion_mode = FusionMode::spatial_only;
    const auto store = hafm_store(cfg);
    std::mt19937_64 rng(7);
    const auto x = random_tensor<double>({cfg.channels, 8, 8}, rng);
    const ParamBinding<double> b(store, false);
    const auto plain = hafm(constant(x), BlockParams<double>(b, "hafm"), cfg).value();
    cfg.rescale_spatial = true;
    const auto scaled = hafm(constant(x), BlockParams<double>(b, "hafm"), cfg).value();
    for (std::size_t i = 0; i < plain.numel(); ++i) EXPECT_NEAR(scaled[i], 64.0 * plain[i], 1e-12);
}

class FusionGradients : public ::testing::Test {
protected:
    ModelConfig cfg = tiny_config();
    std::mt19937_64 rng{21};
};

TEST_F(FusionGradients, Safm) {
    const auto store = fusion_store(cfg);
    expect_passes(schvpp::testing::check_block_all(
        "safm", store, {"f_lf", "f_gf"},
        {random_tensor<double>({cfg.channels, 4, 4}, rng), random_tensor<double>({cfg.channels, 4, 4}, rng)},
        [](const auto& b, const auto& in) {
            const auto sw = safm(in[0], in[1], BlockParams(b, "safm"));
            return ops::concat_channels(ops::reshape(sw.lf, Shape{1, 4, 4}), ops::reshape(sw.gf, Shape{1, 4, 4}));
        }));
}

TEST_F(FusionGradients, Cafm) {
    const auto store = fusion_store(cfg);
    expect_passes(schvpp::testing::check_block_all(
        "cafm", store, {"f_lf", "f_gf"},
        {random_tensor<double>({cfg.channels, 4, 4}, rng), random_tensor<double>({cfg.channels, 4, 4}, rng)},
        [](const auto& b, const auto& in) {
            const auto cw = cafm(in[0], in[1], BlockParams(b, "cafm"));
            return ops::concat_channels(ops::reshape(cw.lf, Shape{8, 1, 1}), ops::reshape(cw.gf, Shape{8, 1, 1}));
        }));
}

TEST_F(FusionGradients, FuseHybrid) {
    expect_passes(schvpp::testing::check_fn_all(
        "fuse_hybrid", {"f_lf", "f_gf", "s_lf", "s_gf", "c_lf", "c_gf"},
        {random_tensor<double>({3, 4, 5}, rng), random_tensor<double>({3, 4, 5}, rng),
         random_tensor<double>({4, 5}, rng), random_tensor<double>({4, 5}, rng), random_tensor<double>({3}, rng),
         random_tensor<double>({3}, rng)},
        [](const auto& v) { return fuse_hybrid(v[0], v[1], {v[2], v[3]}, {v[4], v[5]}); }));
}

TEST_F(FusionGradients, HafmEveryMode) {
    for (auto mode : kModes) {
        auto c = cfg;
        c.fusion_mode = mode;
        const auto store = hafm_store(c);
        expect_passes(schvpp::testing::check_block_all(
            "hafm_" + std::string(to_string(mode)), store, {"x"}, {random_tensor<double>({c.channels, 8, 8}, rng)},
            [c](const auto& b, const auto& in) { return hafm(in[0], BlockParams(b, "hafm"), c); }));
    }
}
