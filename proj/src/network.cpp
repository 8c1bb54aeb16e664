#include "schvpp/network.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <cstring>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include "schvpp/error.hpp"

namespace schvpp {

ParamLayout model_layout(const ModelConfig& cfg) {
    cfg.validate();
    ParamLayout layout;
    layout.add_conv("head", cfg.channels, cfg.in_channels, 3);
    for (std::size_t i = 0; i < cfg.num_hfb; ++i) {
        const std::string hfb = "hfb" + std::to_string(i);
        for (std::size_t j = 0; j < cfg.rb_per_hfb; ++j)
            declare_residual_block(layout, hfb + ".rb" + std::to_string(j), cfg.channels);
        declare_hafm(layout, hfb + ".hafm", cfg);
    }
    layout.add_conv("tail", 3, cfg.channels, 3);
    return layout;
}

std::size_t parameter_count(const ModelConfig& cfg) {
    cfg.validate();
    const std::size_t c = cfg.channels, m = cfg.mlp_ratio, h = c / cfg.cafm_reduction;
    const std::size_t head = 9 * cfg.in_channels * c + c;
    const std::size_t rb = 2 * (9 * c * c + c) + 1;
    const std::size_t lfem = cfg.lfem_depth * (9 * c * c + c + 1);
    const std::size_t swin = 2 * c + (3 * c * c + 3 * c) + (c * c + c) + 2 * c + (m * c * c + m * c) + (m * c * c + c);
    const std::size_t gfem = (16 * c * c + c) + cfg.n_swin * swin + (16 * c * c + 16 * c);
    const std::size_t safm = 3 * (c / 2 * c + c / 2);
    const std::size_t cafm = (h * c + h) + 1 + 2 * (c * h + c);
    std::size_t hfb = cfg.rb_per_hfb * rb + lfem + gfem;
    if (cfg.fusion_mode != FusionMode::channel_only) hfb += safm;
    if (cfg.fusion_mode != FusionMode::spatial_only) hfb += cafm;
    const std::size_t tail = 9 * c * 3 + 3;
    return head + cfg.num_hfb * hfb + tail;
}

ParameterStore init_model(const ModelConfig& cfg, std::uint64_t seed) {
    ParameterStore store = ParameterStore::initialize(model_layout(cfg), seed);
    store.config = cfg;
    return store;
}

void zero_reconstruction(ParameterStore& params) {
    for (const char* name : {"tail.weight", "tail.bias"}) {
        auto& t = params.at(name);
        std::fill(t.data.begin(), t.data.end(), 0.0f);
    }
}

template <typename T>
Var<T> forward(const Var<T>& x_lr, const Tensor<T>& qp_plane, const ParamBinding<T>& params, const ModelConfig& cfg) {
    if (x_lr.shape().size() != 3 || x_lr.dim(0) != 3)
        throw InvalidArgument("forward: expected a [3,H,W] input, got " + shape_str(x_lr.shape()));
    const std::size_t h = x_lr.dim(1), w = x_lr.dim(2);
    if (h % cfg.alignment() || w % cfg.alignment())
        throw InvalidArgument("forward: patch " + std::to_string(w) + "x" + std::to_string(h) +
                              " is not divisible by " + std::to_string(cfg.alignment()));
    if (qp_plane.shape != Shape{h, w}) throw InvalidArgument("forward: QP plane does not match the input size");

    const BlockParams<T> root(params, "");
    auto qp = constant(qp_plane.reshaped(Shape{1, h, w}));
    auto f = ops::conv2d(ops::concat_channels(x_lr, qp), root["head.weight"], root["head.bias"], 1, 1);
    for (std::size_t i = 0; i < cfg.num_hfb; ++i) {
        const auto hfb = root.sub("hfb" + std::to_string(i));
        for (std::size_t j = 0; j < cfg.rb_per_hfb; ++j) f = residual_block(f, hfb.sub("rb" + std::to_string(j)));
        f = hafm(f, hfb.sub("hafm"), cfg);
    }
    auto residual = ops::conv2d(f, root["tail.weight"], root["tail.bias"], 1, 1);
    return ops::add(x_lr, residual);
}

template Var<float> forward(const Var<float>&, const Tensor<float>&, const ParamBinding<float>&, const ModelConfig&);
template Var<double> forward(const Var<double>&, const Tensor<double>&, const ParamBinding<double>&, const ModelConfig&);

Frame444 forward(const Frame444& x_lr, const QpPlane& qp, const ParameterStore& params, const ModelConfig& cfg) {
    const ParamBinding<float> binding(params, false);
    auto out = forward(constant(x_lr.planes), qp.plane, binding, cfg);
    return Frame444(out.value());
}

std::vector<std::size_t> tile_origins(std::size_t extent, std::size_t tile, std::size_t overlap, std::size_t alignment) {
    if (tile >= extent) return {0};
    std::size_t stride = (tile - std::min(overlap, tile - 1)) / alignment * alignment;
    stride = std::max(stride, alignment);
    std::vector<std::size_t> origins;
    for (std::size_t x = 0; x + tile < extent; x += stride) origins.push_back(x);
    origins.push_back(extent - tile);
    return origins;
}

namespace {

std::size_t reflect_index(std::size_t i, std::size_t n) {
    if (n == 1) return 0;
    const std::size_t period = 2 * (n - 1);
    i %= period;
    return i < n ? i : period - i;
}

} // namespace

Frame444 reflect_pad(const Frame444& frame, std::size_t width, std::size_t height) {
    if (width < frame.width || height < frame.height) throw InvalidArgument("reflect_pad: target smaller than frame");
    Frame444 out(width, height);
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = 0; y < height; ++y) {
            const std::size_t sy = reflect_index(y, frame.height);
            for (std::size_t x = 0; x < width; ++x) out.planes.at(c, y, x) = frame.planes.at(c, sy, reflect_index(x, frame.width));
        }
    return out;
}

Yuv420Frame enhance_frame(const Yuv420Frame& frame, int qp, const ParameterStore& params, const ModelConfig& cfg,
                          const InferenceOptions& options) {
    cfg.validate();
    const Frame444 input = upsample_420_to_444(frame);
    const std::size_t a = cfg.alignment();
    const std::size_t pw = (input.width + a - 1) / a * a;
    const std::size_t ph = (input.height + a - 1) / a * a;
    const Frame444 padded = (pw == input.width && ph == input.height) ? input : reflect_pad(input, pw, ph);

    const std::size_t tw = std::min(cfg.tile_size, pw);
    const std::size_t th = std::min(cfg.tile_size, ph);
    const auto xs = tile_origins(pw, tw, cfg.tile_overlap, a);
    const auto ys = tile_origins(ph, th, cfg.tile_overlap, a);
    struct Tile {
        std::size_t x, y;
        Frame444 out;
    };
    std::vector<Tile> tiles;
    for (std::size_t y : ys)
        for (std::size_t x : xs) tiles.push_back({x, y, {}});

    const QpPlane qp_plane = make_qp_plane(qp, tw, th);
    const ParamBinding<float> binding(params, false);
    auto run_tile = [&](Tile& t) {
        auto out = forward(constant(padded.crop(t.x, t.y, tw, th).planes), qp_plane.plane, binding, cfg);
        t.out = Frame444(out.value());
    };

    const unsigned workers = std::max(1u, std::min<unsigned>(options.threads, unsigned(tiles.size())));
    if (workers == 1) {
        for (auto& t : tiles) run_tile(t);
    } else {
        std::atomic<std::size_t> next{0};
        std::exception_ptr failure;
        std::mutex failure_mutex;
        {
            std::vector<std::jthread> pool;
            for (unsigned k = 0; k < workers; ++k)
                pool.emplace_back([&] {
                    for (std::size_t i = next++; i < tiles.size(); i = next++) {
                        try {
                            run_tile(tiles[i]);
                        } catch (...) {
                            std::lock_guard lock(failure_mutex);
                            if (!failure) failure = std::current_exception();
                        }
                    }
                });
        }
        if (failure) std::rethrow_exception(failure);
    }

    // Blend in a fixed tile order so the result does not depend on scheduling.
    Tensor<float> sum(Shape{3, ph, pw});
    Tensor<float> count(Shape{ph, pw});
    for (const auto& t : tiles)
        for (std::size_t y = 0; y < th; ++y)
            for (std::size_t x = 0; x < tw; ++x) {
                for (std::size_t c = 0; c < 3; ++c) sum.at(c, t.y + y, t.x + x) += t.out.planes.at(c, y, x);
                count[(t.y + y) * pw + t.x + x] += 1.0f;
            }
    Frame444 blended(input.width, input.height);
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = 0; y < input.height; ++y)
            for (std::size_t x = 0; x < input.width; ++x)
                blended.planes.at(c, y, x) = sum.at(c, y, x) / count[y * pw + x];
    return downsample_444_to_420(blended);
}

namespace {

constexpr char kMagic[] = "SCHVPP1";
constexpr std::size_t kMagicLen = sizeof(kMagic) - 1;

void put_u64_le(std::ostream& out, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    out.write(reinterpret_cast<const char*>(b), 8);
}

std::uint32_t f32_bits_le(float f) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    return bits;
}

std::string dims_text(const Shape& shape) {
    std::string s;
    for (std::size_t i = 0; i < shape.size(); ++i) s += (i ? "," : "") + std::to_string(shape[i]);
    return s;
}

} // namespace

void check_layout(const ParameterStore& params, const ModelConfig& cfg) {
    const auto layout = model_layout(cfg);
    const auto& specs = layout.specs();
    const std::size_t n = std::min(specs.size(), params.size());
    for (std::size_t i = 0; i < n; ++i) {
        if (specs[i].name != params.names[i])
            throw FormatError("parameter #" + std::to_string(i) + ": checkpoint has '" + params.names[i] +
                              "', config expects '" + specs[i].name + "'");
        if (specs[i].shape != params.arrays[i].shape)
            throw FormatError("parameter '" + specs[i].name + "': checkpoint shape " +
                              shape_str(params.arrays[i].shape) + ", config expects " + shape_str(specs[i].shape));
    }
    if (specs.size() != params.size())
        throw FormatError("parameter count: checkpoint has " + std::to_string(params.size()) + " arrays, config expects " +
                          std::to_string(specs.size()) +
                          (params.size() < specs.size() ? " (first missing: '" + specs[n].name + "')"
                                                        : " (first extra: '" + params.names[n] + "')"));
}

void save_checkpoint(const ParameterStore& params, const std::string& path) {
    std::ostringstream manifest;
    manifest << to_key_values(params.config) << "step=" << params.step << '\n' << "seed=" << params.seed << '\n';
    for (std::size_t i = 0; i < params.size(); ++i)
        manifest << params.names[i] << " dtype=f32 dims=" << dims_text(params.arrays[i].shape) << '\n';
    const std::string text = manifest.str();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("save_checkpoint: cannot open '" + path + "'");
    out.write(kMagic, kMagicLen);
    put_u64_le(out, text.size());
    out.write(text.data(), std::streamsize(text.size()));
    std::vector<unsigned char> buf;
    for (const auto& a : params.arrays) {
        buf.resize(a.numel() * 4);
        for (std::size_t k = 0; k < a.numel(); ++k) {
            const std::uint32_t bits = f32_bits_le(a[k]);
            for (int b = 0; b < 4; ++b) buf[4 * k + b] = static_cast<unsigned char>(bits >> (8 * b));
        }
        out.write(reinterpret_cast<const char*>(buf.data()), std::streamsize(buf.size()));
    }
    if (!out) throw IoError("save_checkpoint: write to '" + path + "' failed");
}

ParameterStore load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("load_checkpoint: cannot open '" + path + "'");
    const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    auto fail = [&](const std::string& why) { throw FormatError("checkpoint '" + path + "': " + why); };

    if (bytes.size() < kMagicLen + 8 || bytes.compare(0, kMagicLen, kMagic) != 0) fail("bad magic");
    std::uint64_t len = 0;
    for (int i = 0; i < 8; ++i) len |= std::uint64_t(static_cast<unsigned char>(bytes[kMagicLen + i])) << (8 * i);
    const std::size_t text_begin = kMagicLen + 8;
    if (len > bytes.size() - text_begin) fail("manifest length exceeds file size");

    ParameterStore store;
    KeyValues kv;
    std::istringstream manifest(bytes.substr(text_begin, len));
    std::string line;
    while (std::getline(manifest, line)) {
        if (line.empty()) continue;
        std::istringstream fields(line);
        std::string first;
        fields >> first;
        if (first.find('=') != std::string::npos) {
            const auto eq = first.find('=');
            if (!kv.emplace(first.substr(0, eq), first.substr(eq + 1)).second) fail("duplicate key '" + first + "'");
            continue;
        }
        std::string dtype, dims;
        fields >> dtype >> dims;
        if (dtype != "dtype=f32") fail("array '" + first + "': unsupported " + dtype);
        if (dims.rfind("dims=", 0) != 0) fail("array '" + first + "': missing dims");
        Shape shape;
        std::istringstream ds(dims.substr(5));
        for (std::string d; std::getline(ds, d, ',');) shape.push_back(detail::parse_size("dims", d));
        store.names.push_back(first);
        store.arrays.emplace_back(shape);
    }

    auto meta = [&](const char* key) {
        auto it = kv.find(key);
        if (it == kv.end()) fail(std::string("missing '") + key + "'");
        const auto v = detail::parse_size(key, it->second);
        kv.erase(it);
        return v;
    };
    store.step = meta("step");
    store.seed = meta("seed");
    try {
        store.config = model_config_from(kv);
    } catch (const Error& e) {
        fail(e.what());
    }
    if (!kv.empty()) fail("unknown config key '" + kv.begin()->first + "'");

    std::size_t offset = text_begin + len;
    for (std::size_t i = 0; i < store.size(); ++i) {
        auto& a = store.arrays[i];
        if (bytes.size() - offset < a.numel() * 4) fail("truncated payload for '" + store.names[i] + "'");
        for (std::size_t k = 0; k < a.numel(); ++k) {
            std::uint32_t bits = 0;
            for (int b = 0; b < 4; ++b)
                bits |= std::uint32_t(static_cast<unsigned char>(bytes[offset + 4 * k + b])) << (8 * b);
            std::memcpy(&a.data[k], &bits, 4);
        }
        offset += a.numel() * 4;
    }
    if (offset != bytes.size()) fail("trailing bytes after the last array");
    try {
        store.reindex();
        check_layout(store, store.config);
    } catch (const FormatError& e) {
        fail(e.what());
    } catch (const InvalidArgument& e) {
        fail(e.what());
    }
    return store;
}

ParameterStore load_checkpoint(const std::string& path, const ModelConfig& expected) {
    ParameterStore store = load_checkpoint(path);
    try {
        check_layout(store, expected);
    } catch (const FormatError& e) {
        throw FormatError("checkpoint '" + path + "' does not match the requested config: " + e.what());
    }
    return store;
}

} // namespace schvpp
