#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <random>

#include "block_check.hpp"
#include "reference.hpp"
#include "schvpp/error.hpp"
#include "schvpp/network.hpp"
#include "test_support.hpp"

using namespace schvpp;
using schvpp::testing::TempDir;
using schvpp::testing::random_frame;
using schvpp::testing::random_tensor;
using schvpp::testing::tiny_config;

namespace {

ParameterStore jittered_model(const ModelConfig& cfg, std::uint64_t seed) {
    auto store = schvpp::testing::jittered_store(model_layout(cfg), seed);
    store.config = cfg;
    return store;
}

std::string read_bytes(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void write_bytes(const std::string& path, const std::string& bytes) {
    std::ofstream(path, std::ios::binary | std::ios::trunc) << bytes;
}

} // namespace

TEST(Network, DefaultParameterCount) {
    const ModelConfig cfg;
    EXPECT_EQ(parameter_count(cfg), 2004443u);
    EXPECT_EQ(model_layout(cfg).element_count(), 2004443u);
}

TEST(Network, ClosedFormCountMatchesLayout) {
    for (auto mode : {FusionMode::hybrid, FusionMode::sequential, FusionMode::parallel, FusionMode::spatial_only,
                      FusionMode::channel_only})
        for (std::size_t c : {8, 16, 32}) {
            ModelConfig cfg = tiny_config();
            cfg.channels = c;
            cfg.fusion_mode = mode;
            cfg.num_hfb = 2;
            cfg.rb_per_hfb = 3;
            cfg.n_swin = 3;
            cfg.mlp_ratio = 2;
            EXPECT_EQ(parameter_count(cfg), model_layout(cfg).element_count()) << to_string(mode) << " C=" << c;
        }
}

TEST(Network, LayoutOrder) {
    const auto layout = model_layout(tiny_config());
    const auto& s = layout.specs();
    EXPECT_EQ(s.front().name, "head.weight");
    EXPECT_EQ(s.back().name, "tail.bias");
    EXPECT_EQ(s[2].name, "hfb0.rb0.conv1.weight");
    EXPECT_EQ(s.front().shape, (Shape{8, 4, 3, 3}));
}

TEST(Network, InitializationIsSeededAndBounded) {
    const auto cfg = tiny_config();
    const auto a = init_model(cfg, 5), b = init_model(cfg, 5), c = init_model(cfg, 6);
    EXPECT_EQ(a.arrays, b.arrays);
    EXPECT_NE(a.arrays, c.arrays);
    EXPECT_EQ(a.config, cfg);
    const auto layout = model_layout(cfg);
    for (std::size_t i = 0; i < layout.specs().size(); ++i) {
        const auto& spec = layout.specs()[i];
        if (spec.init == InitKind::constant) {
            for (float v : a.arrays[i].data) ASSERT_EQ(v, spec.value) << spec.name;
        } else {
            const double bound = 1.0 / std::sqrt(double(spec.fan_in));
            for (float v : a.arrays[i].data) ASSERT_LE(std::abs(v), bound) << spec.name;
        }
    }
    EXPECT_EQ(a.at("hfb0.rb0.conv1.bias").data, AlignedVector<float>(8, 0.0f));
    EXPECT_EQ(a.at("hfb0.rb0.prelu").data, AlignedVector<float>{0.25f});
    EXPECT_EQ(layout.specs()[0].fan_in, 4u * 9u);
}

TEST(Network, ForwardMatchesStraightLineReference) {
    std::mt19937_64 rng(1);
    for (auto mode : {FusionMode::hybrid, FusionMode::sequential}) {
        auto cfg = tiny_config();
        cfg.fusion_mode = mode;
        cfg.num_hfb = 2;
        const auto store = jittered_model(cfg, 9);
        const auto x = random_tensor<double>({3, 8, 16}, rng, 0, 1);
        const auto qp = make_qp_plane(32, 16, 8);
        const ParamBinding<double> b(store, false);
        const auto got = forward(constant(x), qp.plane.cast<double>(), b, cfg).value();
        reference::Map xm(3, 8, 16);
        xm.v.assign(x.data.begin(), x.data.end());
        const auto want = reference::Model(store, cfg).forward(xm, 32);
        double worst = 0;
        for (std::size_t i = 0; i < want.v.size(); ++i) worst = std::max(worst, std::abs(got[i] - want.v[i]));
        EXPECT_LT(worst, 1e-10) << to_string(mode);
    }
}

TEST(Network, FloatForwardTracksDouble) {
    const auto cfg = tiny_config();
    const auto store = jittered_model(cfg, 2);
    std::mt19937_64 rng(2);
    const auto x = random_tensor<float>({3, 16, 8}, rng, 0, 1);
    const auto qp = make_qp_plane(27, 8, 16);
    const auto yf = forward(Frame444(x), qp, store, cfg);
    const ParamBinding<double> b(store, false);
    const auto yd = forward(constant(x.cast<double>()), qp.plane.cast<double>(), b, cfg).value();
    for (std::size_t i = 0; i < yd.numel(); ++i) EXPECT_NEAR(yf.planes[i], yd[i], 1e-4);
}

TEST(Network, QpPlaneChangesOutput) {
    const auto cfg = tiny_config();
    const auto store = jittered_model(cfg, 3);
    std::mt19937_64 rng(3);
    const Frame444 x(random_tensor<float>({3, 8, 8}, rng, 0, 1));
    const auto a = forward(x, make_qp_plane(22, 8, 8), store, cfg);
    const auto b = forward(x, make_qp_plane(42, 8, 8), store, cfg);
    EXPECT_NE(a.planes.data, b.planes.data);
}

TEST(Network, ForwardRejectsMisalignedInput) {
    const auto cfg = tiny_config();
    const auto store = init_model(cfg, 1);
    EXPECT_THROW(forward(Frame444(12, 8), make_qp_plane(22, 12, 8), store, cfg), InvalidArgument);
    EXPECT_THROW(forward(Frame444(8, 8), make_qp_plane(22, 16, 8), store, cfg), InvalidArgument);
}

TEST(Network, ZeroReconstructionIsIdentity) {
    const auto cfg = tiny_config();
    auto store = jittered_model(cfg, 4);
    zero_reconstruction(store);
    std::mt19937_64 rng(4);
    const Frame444 x(random_tensor<float>({3, 16, 16}, rng, 0, 1));
    EXPECT_EQ(forward(x, make_qp_plane(37, 16, 16), store, cfg).planes.data, x.planes.data);
}

TEST(Network, TileOrigins) {
    EXPECT_EQ(tile_origins(64, 128, 16, 16), (std::vector<std::size_t>{0}));
    EXPECT_EQ(tile_origins(64, 64, 16, 16), (std::vector<std::size_t>{0}));
    EXPECT_EQ(tile_origins(112, 64, 16, 16), (std::vector<std::size_t>{0, 48}));
    EXPECT_EQ(tile_origins(256, 64, 16, 16), (std::vector<std::size_t>{0, 48, 96, 144, 192}));
    // stride never drops below the alignment
    EXPECT_EQ(tile_origins(48, 16, 16, 16), (std::vector<std::size_t>{0, 16, 32}));
    for (std::size_t ext : {96u, 240u, 416u}) {
        const auto o = tile_origins(ext, 64, 8, 16);
        EXPECT_EQ(o.back() + 64, ext);
        for (std::size_t i = 1; i < o.size(); ++i) EXPECT_LE(o[i], o[i - 1] + 64);
        for (auto v : o) EXPECT_EQ(v % 16, 0u);
    }
}

TEST(Network, ReflectPadMirrorsWithoutRepeatingEdge) {
    Frame444 f(3, 2);
    for (std::size_t x = 0; x < 3; ++x) {
        f.planes.at(0, 0, x) = float(x);
        f.planes.at(0, 1, x) = float(10 + x);
    }
    const auto p = reflect_pad(f, 6, 4);
    EXPECT_EQ(p.planes.at(0, 0, 3), 1.0f);
    EXPECT_EQ(p.planes.at(0, 0, 4), 0.0f);
    EXPECT_EQ(p.planes.at(0, 0, 5), 1.0f);
    EXPECT_EQ(p.planes.at(0, 2, 0), 0.0f);
    EXPECT_EQ(p.planes.at(0, 3, 2), 12.0f);
    EXPECT_THROW(reflect_pad(f, 2, 2), InvalidArgument);
}

TEST(Network, EnhanceIdentityIsBitExactOnUnalignedFrames) {
    auto cfg = tiny_config();
    auto store = jittered_model(cfg, 5);
    zero_reconstruction(store);
    std::mt19937_64 rng(5);
    for (auto [w, h] : {std::pair<std::size_t, std::size_t>{30, 22}, {40, 8}, {8, 40}}) {
        const auto f = random_frame(w, h, rng);
        EXPECT_EQ(enhance_frame(f, 37, store, cfg), f) << w << "x" << h;
    }
}

TEST(Network, OverlapDoesNotChangeIdentityOutput) {
    auto cfg = tiny_config();
    cfg.tile_size = 32;
    auto store = jittered_model(cfg, 8);
    zero_reconstruction(store);
    std::mt19937_64 rng(8);
    const auto f = random_frame(72, 56, rng);
    cfg.tile_overlap = 8;
    const auto narrow = enhance_frame(f, 27, store, cfg);
    cfg.tile_overlap = 16;
    const auto wide = enhance_frame(f, 27, store, cfg);
    cfg.tile_size = 128;
    const auto whole = enhance_frame(f, 27, store, cfg);
    EXPECT_EQ(narrow, wide);
    EXPECT_EQ(narrow, whole);
    EXPECT_EQ(narrow, f);
}

TEST(Network, EnhanceSingleTileEqualsDirectForward) {
    auto cfg = tiny_config();
    cfg.tile_size = 64;
    const auto store = jittered_model(cfg, 6);
    std::mt19937_64 rng(6);
    const auto f = random_frame(32, 16, rng);
    const auto direct = downsample_444_to_420(forward(upsample_420_to_444(f), make_qp_plane(30, 32, 16), store, cfg));
    EXPECT_EQ(enhance_frame(f, 30, store, cfg), direct);
}

TEST(Network, EnhanceIsIndependentOfThreadCount) {
    auto cfg = tiny_config();
    cfg.tile_size = 16;
    cfg.tile_overlap = 8;
    const auto store = jittered_model(cfg, 7);
    std::mt19937_64 rng(7);
    const auto f = random_frame(48, 40, rng);
    const auto one = enhance_frame(f, 32, store, cfg, {1});
    EXPECT_EQ(enhance_frame(f, 32, store, cfg, {4}), one);
    EXPECT_NE(one, f);
}

TEST(Checkpoint, RoundTripIsExact) {
    TempDir dir("ckpt");
    auto cfg = tiny_config();
    cfg.fusion_mode = FusionMode::parallel;
    cfg.rescale_spatial = true;
    auto store = jittered_model(cfg, 8);
    store.step = 1234;
    store.seed = 99;
    const auto path = dir.file("m.ckpt");
    save_checkpoint(store, path);
    const auto back = load_checkpoint(path);
    EXPECT_EQ(back.config, cfg);
    EXPECT_EQ(back.step, 1234u);
    EXPECT_EQ(back.seed, 99u);
    EXPECT_EQ(back.names, store.names);
    EXPECT_EQ(back.arrays, store.arrays);
    save_checkpoint(back, dir.file("again.ckpt"));
    EXPECT_EQ(read_bytes(path), read_bytes(dir.file("again.ckpt")));
    EXPECT_NO_THROW(load_checkpoint(path, cfg));
}

TEST(Checkpoint, CorruptionIsDetected) {
    TempDir dir("ckpt");
    const auto path = dir.file("m.ckpt");
    save_checkpoint(init_model(tiny_config(), 1), path);
    const auto bytes = read_bytes(path);

    write_bytes(path, "XCHVPP1" + bytes.substr(7));
    EXPECT_THROW(load_checkpoint(path), FormatError);
    write_bytes(path, bytes.substr(0, bytes.size() - 3));
    EXPECT_THROW(load_checkpoint(path), FormatError);
    write_bytes(path, bytes + "!");
    EXPECT_THROW(load_checkpoint(path), FormatError);
    write_bytes(path, bytes.substr(0, 10));
    EXPECT_THROW(load_checkpoint(path), FormatError);
    EXPECT_THROW(load_checkpoint(dir.file("missing.ckpt")), IoError);
}

TEST(Checkpoint, MismatchedConfigNamesTheArray) {
    TempDir dir("ckpt");
    const auto path = dir.file("m.ckpt");
    save_checkpoint(init_model(tiny_config(), 1), path);
    auto other = tiny_config();
    other.channels = 16;
    other.heads = 2;
    try {
        load_checkpoint(path, other);
        FAIL() << "expected FormatError";
    } catch (const FormatError& e) {
        EXPECT_NE(std::string(e.what()).find("head.weight"), std::string::npos) << e.what();
    }
    auto fewer = tiny_config();
    fewer.fusion_mode = FusionMode::channel_only;
    EXPECT_THROW(load_checkpoint(path, fewer), FormatError);
}

TEST(Checkpoint, RenamedArrayIsRejected) {
    TempDir dir("ckpt");
    auto store = init_model(tiny_config(), 1);
    store.names[3] = "hfb0.rb0.conv9.bias";
    store.reindex();
    const auto path = dir.file("m.ckpt");
    save_checkpoint(store, path);
    try {
        load_checkpoint(path);
        FAIL() << "expected FormatError";
    } catch (const FormatError& e) {
        EXPECT_NE(std::string(e.what()).find("conv9"), std::string::npos) << e.what();
    }
}

TEST(NetworkGradients, TinyForward) {
    const auto cfg = tiny_config();
    const auto store = jittered_model(cfg, 10);
    std::mt19937_64 rng(10);
    const auto x = random_tensor<double>({3, 8, 8}, rng, 0, 1);
    for (auto precision : {schvpp::testing::Precision::dual, schvpp::testing::Precision::single}) {
        auto opts = schvpp::testing::options_for(precision);
        opts.max_coords = 16;
        const auto r = schvpp::testing::check_model(store, x, 37, precision, opts);
        EXPECT_TRUE(r.passed()) << "max relative error " << r.max_rel_error << " in " << r.worst_array;
    }
}
