#include <gtest/gtest.h>

#include <numeric>
#include <random>
#include <set>

#include "block_check.hpp"
#include "reference.hpp"
#include "schvpp/blocks.hpp"
#include "schvpp/error.hpp"
#include "test_support.hpp"

using namespace schvpp;
using schvpp::testing::random_tensor;
using schvpp::testing::tiny_config;

namespace {

reference::Map to_map(const Tensor<double>& t) {
    reference::Map m(t.dim(0), t.dim(1), t.dim(2));
    m.v.assign(t.data.begin(), t.data.end());
    return m;
}

void expect_close(const Tensor<double>& got, const reference::Map& want, double tol) {
    ASSERT_EQ(got.shape, (Shape{want.c, want.h, want.w}));
    double worst = 0;
    for (std::size_t i = 0; i < want.v.size(); ++i) worst = std::max(worst, std::abs(got[i] - want.v[i]));
    EXPECT_LT(worst, tol);
}

void expect_passes(const GradCheckReport& r) {
    EXPECT_TRUE(r.passed()) << r.name << ": max relative error " << r.max_rel_error << " in " << r.worst_array;
}

void expect_passes(const std::vector<GradCheckReport>& reports) {
    for (const auto& r : reports) expect_passes(r);
}

ParameterStore block_store(const std::function<void(ParamLayout&)>& declare, std::uint64_t seed = 3) {
    ParamLayout layout;
    declare(layout);
    return schvpp::testing::jittered_store(layout, seed);
}

} // namespace

TEST(WindowGeometry, RasterAndWindowOrderAreInverse) {
    const WindowGeometry g{6, 8, 2};
    EXPECT_EQ(g.windows(), 12u);
    const auto w2r = g.window_to_raster();
    const auto r2w = g.raster_to_window();
    for (std::size_t i = 0; i < g.tokens(); ++i) {
        EXPECT_EQ(r2w[w2r[i]], i);
        EXPECT_EQ(w2r[r2w[i]], i);
    }
    // The first window holds raster positions (0,0), (0,1), (1,0), (1,1).
    EXPECT_EQ((std::vector<std::size_t>(w2r.begin(), w2r.begin() + 4)), (std::vector<std::size_t>{0, 1, 8, 9}));
}

TEST(WindowGeometry, ShiftPermutationMatchesRolledGrid) {
    const WindowGeometry g{4, 6, 2};
    const std::size_t s = 1;
    const auto perm = g.shift_permutation(s);
    ASSERT_EQ(std::set<std::size_t>(perm.begin(), perm.end()).size(), perm.size());
    for (std::size_t i = 0; i < g.tokens(); ++i) {
        const std::size_t p = g.raster_of(i);
        const std::size_t src_r = (p / 6 + s) % 4, src_c = (p % 6 + s) % 6;
        EXPECT_EQ(g.raster_of(perm[i]), src_r * 6 + src_c) << i;
    }
    const auto inv = invert_permutation(perm);
    for (std::size_t i = 0; i < perm.size(); ++i) EXPECT_EQ(inv[perm[i]], i);
}

TEST(Blocks, PartitionMergeRoundTrip) {
    std::mt19937_64 rng(1);
    const auto x = random_tensor<double>({3, 4, 6}, rng);
    const auto tokens = partition_windows(constant(x), 2);
    ASSERT_EQ(tokens.tokens.shape(), (Shape{24, 3}));
    // token 1 of window 0 is raster (0,1)
    EXPECT_EQ(tokens.tokens.value()[1 * 3 + 2], x.at(2, 0, 1));
    EXPECT_EQ(merge_windows(tokens).value().data, x.data);
    EXPECT_THROW(partition_windows(constant(x), 4), InvalidArgument);
}

TEST(Blocks, ResidualBlockMatchesReference) {
    const auto cfg = tiny_config();
    const auto store = block_store([&](ParamLayout& l) { declare_residual_block(l, "rb", cfg.channels); });
    std::mt19937_64 rng(2);
    const auto x = random_tensor<double>({cfg.channels, 6, 5}, rng);
    const ParamBinding<double> b(store, false);
    const auto got = residual_block(constant(x), BlockParams<double>(b, "rb")).value();
    expect_close(got, reference::Model(store, cfg).residual_block(to_map(x), "rb"), 1e-12);
}

TEST(Blocks, LfemMatchesReference) {
    const auto cfg = tiny_config();
    const auto store = block_store([&](ParamLayout& l) { declare_lfem(l, "lfem", cfg.channels, cfg.lfem_depth); });
    std::mt19937_64 rng(3);
    const auto x = random_tensor<double>({cfg.channels, 5, 7}, rng);
    const ParamBinding<double> b(store, false);
    const auto got = lfem(constant(x), BlockParams<double>(b, "lfem"), cfg.lfem_depth).value();
    expect_close(got, reference::Model(store, cfg).lfem(to_map(x), "lfem"), 1e-12);
}

TEST(Blocks, GfemMatchesReferenceWithShiftedWindows) {
    auto cfg = tiny_config();
    cfg.n_swin = 2;
    const auto store = block_store([&](ParamLayout& l) { declare_gfem(l, "gfem", cfg); });
    std::mt19937_64 rng(4);
    // 16x24 input -> 4x6 patch grid -> 2x3 windows of 2x2 patches
    const auto x = random_tensor<double>({cfg.channels, 16, 24}, rng);
    const ParamBinding<double> b(store, false);
    for (bool shift : {false, true}) {
        cfg.shift_windows = shift;
        const reference::Model r(store, cfg);
        const auto got = gfem(constant(x), BlockParams<double>(b, "gfem"), cfg).value();
        expect_close(got, r.gfem(to_map(x), "gfem"), 1e-11);
    }
}

TEST(Blocks, ShiftIsInertWithASingleWindow) {
    // Attention without position bias is permutation-equivariant inside a
    // window, so a cyclic shift within one window changes nothing.
    const auto cfg = tiny_config();
    const auto store = block_store([&](ParamLayout& l) { declare_swin_block(l, "blk", cfg.channels, cfg.mlp_ratio); });
    std::mt19937_64 rng(5);
    const auto x = random_tensor<double>({cfg.channels, 2, 2}, rng);
    const ParamBinding<double> b(store, false);
    const auto tokens = partition_windows(constant(x), 2);
    const auto plain = swin_block(tokens, BlockParams<double>(b, "blk"), cfg.heads, false).tokens.value();
    const auto shifted = swin_block(tokens, BlockParams<double>(b, "blk"), cfg.heads, true).tokens.value();
    for (std::size_t i = 0; i < plain.numel(); ++i) EXPECT_NEAR(plain[i], shifted[i], 1e-12);
}

TEST(Blocks, ShiftChangesOutputWithSeveralWindows) {
    const auto cfg = tiny_config();
    const auto store = block_store([&](ParamLayout& l) { declare_swin_block(l, "blk", cfg.channels, cfg.mlp_ratio); });
    std::mt19937_64 rng(6);
    const auto tokens = partition_windows(constant(random_tensor<double>({cfg.channels, 4, 4}, rng)), 2);
    const ParamBinding<double> b(store, false);
    const auto plain = swin_block(tokens, BlockParams<double>(b, "blk"), cfg.heads, false).tokens.value();
    const auto shifted = swin_block(tokens, BlockParams<double>(b, "blk"), cfg.heads, true).tokens.value();
    double diff = 0;
    for (std::size_t i = 0; i < plain.numel(); ++i) diff = std::max(diff, std::abs(plain[i] - shifted[i]));
    EXPECT_GT(diff, 1e-6);
}

TEST(Blocks, PatchEmbedRequiresAlignedInput) {
    const auto cfg = tiny_config();
    const auto store = block_store([&](ParamLayout& l) { declare_patch_embed(l, "embed", cfg.channels); });
    const ParamBinding<double> b(store, false);
    const auto ok = patch_embed(constant(Tensor<double>(Shape{cfg.channels, 8, 16})), BlockParams<double>(b, "embed"), 2);
    EXPECT_EQ(ok.tokens.shape(), (Shape{8, cfg.channels}));
    EXPECT_EQ(ok.geometry.rows, 2u);
    EXPECT_EQ(ok.geometry.cols, 4u);
    EXPECT_THROW(patch_embed(constant(Tensor<double>(Shape{cfg.channels, 8, 12})), BlockParams<double>(b, "embed"), 2),
                 InvalidArgument);
    EXPECT_THROW(patch_embed(constant(Tensor<double>(Shape{3, 8, 8})), BlockParams<double>(b, "embed"), 2),
                 InvalidArgument);
}

TEST(Blocks, PsabIsASimplex) {
    std::mt19937_64 rng(7);
    const auto s = psab(constant(random_tensor<double>({6, 4, 4}, rng, -5, 5))).value();
    ASSERT_EQ(s.shape, (Shape{6}));
    EXPECT_NEAR(std::accumulate(s.data.begin(), s.data.end(), 0.0), 1.0, 1e-12);
    for (double v : s.data) EXPECT_GT(v, 0.0);
}

TEST(Blocks, MissingParameterIsReported) {
    const auto cfg = tiny_config();
    const auto store = block_store([&](ParamLayout& l) { declare_lfem(l, "lfem", cfg.channels, 1); });
    const ParamBinding<double> b(store, false);
    EXPECT_ANY_THROW(lfem(constant(Tensor<double>(Shape{cfg.channels, 4, 4})), BlockParams<double>(b, "lfem"), 2));
}

class BlockGradients : public ::testing::Test {
protected:
    ModelConfig cfg = tiny_config();
    std::mt19937_64 rng{11};
};

TEST_F(BlockGradients, ResidualBlock) {
    const auto store = block_store([&](ParamLayout& l) { declare_residual_block(l, "rb", cfg.channels); });
    expect_passes(schvpp::testing::check_block_all(
        "residual_block", store, {"x"}, {random_tensor<double>({cfg.channels, 6, 6}, rng)},
        [](const auto& b, const auto& in) { return residual_block(in[0], BlockParams(b, "rb")); }));
}

TEST_F(BlockGradients, Lfem) {
    const auto store = block_store([&](ParamLayout& l) { declare_lfem(l, "lfem", cfg.channels, 2); });
    expect_passes(schvpp::testing::check_block_all(
        "lfem", store, {"x"}, {random_tensor<double>({cfg.channels, 6, 6}, rng)},
        [](const auto& b, const auto& in) { return lfem(in[0], BlockParams(b, "lfem"), 2); }));
}

TEST_F(BlockGradients, PatchEmbed) {
    const auto store = block_store([&](ParamLayout& l) { declare_patch_embed(l, "embed", cfg.channels); });
    expect_passes(schvpp::testing::check_block_all(
        "patch_embed", store, {"x"}, {random_tensor<double>({cfg.channels, 8, 8}, rng)},
        [](const auto& b, const auto& in) { return patch_embed(in[0], BlockParams(b, "embed"), 2).tokens; }));
}

TEST_F(BlockGradients, Msa) {
    const auto store = block_store([&](ParamLayout& l) { declare_msa(l, "attn", cfg.channels); });
    expect_passes(schvpp::testing::check_block_all(
        "msa", store, {"tokens"}, {random_tensor<double>({8, cfg.channels}, rng)},
        [](const auto& b, const auto& in) {
            return msa(TokenGrid{in[0], WindowGeometry{2, 4, 2}}, BlockParams(b, "attn"), 2).tokens;
        }));
}

TEST_F(BlockGradients, SwinBlockShifted) {
    const auto store = block_store([&](ParamLayout& l) { declare_swin_block(l, "blk", cfg.channels, cfg.mlp_ratio); });
    expect_passes(schvpp::testing::check_block_all(
        "swin_block", store, {"tokens"}, {random_tensor<double>({16, cfg.channels}, rng)},
        [](const auto& b, const auto& in) {
            return swin_block(TokenGrid{in[0], WindowGeometry{4, 4, 2}}, BlockParams(b, "blk"), 2, true).tokens;
        }));
}

TEST_F(BlockGradients, Gfem) {
    const auto store = block_store([&](ParamLayout& l) { declare_gfem(l, "gfem", cfg); });
    const ModelConfig c = cfg;
    expect_passes(schvpp::testing::check_block_all(
        "gfem", store, {"x"}, {random_tensor<double>({cfg.channels, 16, 16}, rng)},
        [c](const auto& b, const auto& in) { return gfem(in[0], BlockParams(b, "gfem"), c); }));
}

TEST_F(BlockGradients, Psab) {
    expect_passes(schvpp::testing::check_fn_all("psab", {"qm"}, {random_tensor<double>({4, 5, 5}, rng)},
                                                [](const auto& v) { return psab(v[0]); }));
}
