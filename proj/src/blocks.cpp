#include "schvpp/blocks.hpp"

#include "schvpp/error.hpp"

namespace schvpp {

std::size_t WindowGeometry::raster_of(std::size_t i) const {
    const std::size_t t = tokens_per_window();
    const std::size_t win = i / t, k = i % t;
    const std::size_t per_row = cols / window_side;
    const std::size_t r = (win / per_row) * window_side + k / window_side;
    const std::size_t c = (win % per_row) * window_side + k % window_side;
    return r * cols + c;
}

std::size_t WindowGeometry::window_index_of(std::size_t p) const {
    const std::size_t r = p / cols, c = p % cols;
    const std::size_t per_row = cols / window_side;
    const std::size_t win = (r / window_side) * per_row + c / window_side;
    return win * tokens_per_window() + (r % window_side) * window_side + c % window_side;
}

std::vector<std::size_t> WindowGeometry::window_to_raster() const {
    std::vector<std::size_t> out(tokens());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = raster_of(i);
    return out;
}

std::vector<std::size_t> WindowGeometry::raster_to_window() const {
    std::vector<std::size_t> out(tokens());
    for (std::size_t p = 0; p < out.size(); ++p) out[p] = window_index_of(p);
    return out;
}

std::vector<std::size_t> WindowGeometry::shift_permutation(std::size_t shift) const {
    std::vector<std::size_t> out(tokens());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const std::size_t p = raster_of(i);
        const std::size_t r = (p / cols + shift) % rows;
        const std::size_t c = (p % cols + shift) % cols;
        out[i] = window_index_of(r * cols + c);
    }
    return out;
}

std::vector<std::size_t> invert_permutation(const std::vector<std::size_t>& perm) {
    std::vector<std::size_t> inv(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i) inv[perm[i]] = i;
    return inv;
}

void declare_residual_block(ParamLayout& layout, const std::string& prefix, std::size_t channels) {
    layout.add_conv(prefix + ".conv1", channels, channels, 3);
    layout.add_prelu(prefix + ".prelu");
    layout.add_conv(prefix + ".conv2", channels, channels, 3);
}

void declare_lfem(ParamLayout& layout, const std::string& prefix, std::size_t channels, std::size_t depth) {
    for (std::size_t k = 0; k < depth; ++k) {
        layout.add_conv(prefix + ".conv" + std::to_string(k), channels, channels, 3);
        layout.add_prelu(prefix + ".prelu" + std::to_string(k));
    }
}

void declare_patch_embed(ParamLayout& layout, const std::string& prefix, std::size_t channels) {
    layout.add_conv(prefix, channels, channels, 4);
}

void declare_msa(ParamLayout& layout, const std::string& prefix, std::size_t channels) {
    layout.add_linear(prefix + ".qkv", 3 * channels, channels);
    layout.add_linear(prefix + ".proj", channels, channels);
}

void declare_swin_block(ParamLayout& layout, const std::string& prefix, std::size_t channels, std::size_t mlp_ratio) {
    layout.add_layer_norm(prefix + ".norm1", channels);
    declare_msa(layout, prefix + ".attn", channels);
    layout.add_layer_norm(prefix + ".norm2", channels);
    layout.add_linear(prefix + ".mlp.fc1", mlp_ratio * channels, channels);
    layout.add_linear(prefix + ".mlp.fc2", channels, mlp_ratio * channels);
}

void declare_gfem(ParamLayout& layout, const std::string& prefix, const ModelConfig& cfg) {
    declare_patch_embed(layout, prefix + ".embed", cfg.channels);
    for (std::size_t s = 0; s < cfg.n_swin; ++s)
        declare_swin_block(layout, prefix + ".swin" + std::to_string(s), cfg.channels, cfg.mlp_ratio);
    layout.add_linear(prefix + ".expand", 16 * cfg.channels, cfg.channels);
}

namespace {

template <typename T>
FeatureMap<T> conv3x3(const FeatureMap<T>& x, const BlockParams<T>& p, const std::string& name) {
    return ops::conv2d(x, p[name + ".weight"], p[name + ".bias"], 1, 1);
}

template <typename T>
void require_channels(const FeatureMap<T>& x, const Var<T>& w, const char* what) {
    if (x.shape().size() != 3) throw InvalidArgument(std::string(what) + ": expected a [C,H,W] feature map");
    if (w.dim(1) != x.dim(0))
        throw InvalidArgument(std::string(what) + ": input has " + std::to_string(x.dim(0)) + " channels, block expects " +
                              std::to_string(w.dim(1)));
}

} // namespace

template <typename T>
FeatureMap<T> residual_block(const FeatureMap<T>& x, const BlockParams<T>& p) {
    require_channels(x, p["conv1.weight"], "residual_block");
    auto h = ops::prelu(conv3x3(x, p, "conv1"), p["prelu"]);
    return ops::add(x, conv3x3(h, p, "conv2"));
}

template <typename T>
FeatureMap<T> lfem(const FeatureMap<T>& x, const BlockParams<T>& p, std::size_t depth) {
    if (depth == 0) throw InvalidArgument("lfem: depth must be >= 1");
    require_channels(x, p["conv0.weight"], "lfem");
    FeatureMap<T> h = x;
    for (std::size_t k = 0; k < depth; ++k)
        h = ops::prelu(conv3x3(h, p, "conv" + std::to_string(k)), p["prelu" + std::to_string(k)]);
    return h;
}

template <typename T>
TokenGrid<T> partition_windows(const Var<T>& grid, std::size_t window_side) {
    if (grid.shape().size() != 3) throw InvalidArgument("partition_windows: expected a [C,h,w] grid");
    WindowGeometry g{grid.dim(1), grid.dim(2), window_side};
    if (window_side == 0 || g.rows % window_side || g.cols % window_side)
        throw InvalidArgument("partition_windows: grid " + shape_str(grid.shape()) + " not divisible by window side " +
                              std::to_string(window_side));
    return {ops::gather_rows(ops::grid_to_rows(grid), g.window_to_raster()), g};
}

template <typename T>
Var<T> merge_windows(const TokenGrid<T>& tokens) {
    const auto& g = tokens.geometry;
    return ops::rows_to_grid(ops::gather_rows(tokens.tokens, g.raster_to_window()), g.rows, g.cols);
}

template <typename T>
TokenGrid<T> patch_embed(const FeatureMap<T>& x, const BlockParams<T>& p, std::size_t window_side) {
    require_channels(x, p["weight"], "patch_embed");
    const std::size_t unit = 4 * window_side;
    if (window_side == 0 || x.dim(1) % unit || x.dim(2) % unit)
        throw InvalidArgument("patch_embed: spatial size " + std::to_string(x.dim(2)) + "x" + std::to_string(x.dim(1)) +
                              " is not divisible by " + std::to_string(unit));
    return partition_windows(ops::conv2d(x, p["weight"], p["bias"], 4, 0), window_side);
}

template <typename T>
TokenGrid<T> msa(const TokenGrid<T>& tokens, const BlockParams<T>& p, std::size_t heads) {
    if (heads == 0 || tokens.channels() % heads != 0)
        throw InvalidArgument("msa: channels " + std::to_string(tokens.channels()) + " not divisible by heads " +
                              std::to_string(heads));
    auto qkv = ops::linear(tokens.tokens, p["qkv.weight"], p["qkv.bias"]);
    auto att = ops::window_attention(qkv, heads, tokens.geometry.tokens_per_window());
    return {ops::linear(att, p["proj.weight"], p["proj.bias"]), tokens.geometry};
}

template <typename T>
TokenGrid<T> swin_block(const TokenGrid<T>& tokens, const BlockParams<T>& p, std::size_t heads, bool shifted) {
    const auto& g = tokens.geometry;
    const std::size_t shift = shifted ? g.window_side / 2 : 0;

    auto y = ops::layer_norm_rows(tokens.tokens, p["norm1.gamma"], p["norm1.beta"]);
    std::vector<std::size_t> perm;
    if (shift) {
        perm = g.shift_permutation(shift);
        y = ops::gather_rows(y, perm);
    }
    auto a = msa(TokenGrid<T>{y, g}, p.sub("attn"), heads).tokens;
    if (shift) a = ops::gather_rows(a, invert_permutation(perm));
    auto x = ops::add(tokens.tokens, a);

    auto m = ops::layer_norm_rows(x, p["norm2.gamma"], p["norm2.beta"]);
    m = ops::gelu(ops::linear(m, p["mlp.fc1.weight"], p["mlp.fc1.bias"]));
    m = ops::linear(m, p["mlp.fc2.weight"], p["mlp.fc2.bias"]);
    return {ops::add(x, m), g};
}

template <typename T>
FeatureMap<T> gfem(const FeatureMap<T>& x, const BlockParams<T>& p, const ModelConfig& cfg) {
    auto tokens = patch_embed(x, p.sub("embed"), cfg.window_side);
    for (std::size_t s = 0; s < cfg.n_swin; ++s)
        tokens = swin_block(tokens, p.sub("swin" + std::to_string(s)), cfg.heads, cfg.shift_windows && s % 2 == 1);
    const auto& g = tokens.geometry;
    auto rows = ops::gather_rows(tokens.tokens, g.raster_to_window());
    auto expanded = ops::linear(rows, p["expand.weight"], p["expand.bias"]);
    return ops::pixel_shuffle(ops::rows_to_grid(expanded, g.rows, g.cols), 4);
}

template <typename T>
Var<T> psab(const FeatureMap<T>& qm) {
    return ops::softmax_all(ops::global_avg_pool(qm));
}

#define SCHVPP_BLOCKS(T)                                                                               \
    template FeatureMap<T> residual_block(const FeatureMap<T>&, const BlockParams<T>&);                \
    template FeatureMap<T> lfem(const FeatureMap<T>&, const BlockParams<T>&, std::size_t);              \
    template TokenGrid<T> partition_windows(const Var<T>&, std::size_t);                               \
    template Var<T> merge_windows(const TokenGrid<T>&);                                                 \
    template TokenGrid<T> patch_embed(const FeatureMap<T>&, const BlockParams<T>&, std::size_t);        \
    template TokenGrid<T> msa(const TokenGrid<T>&, const BlockParams<T>&, std::size_t);                 \
    template TokenGrid<T> swin_block(const TokenGrid<T>&, const BlockParams<T>&, std::size_t, bool);    \
    template FeatureMap<T> gfem(const FeatureMap<T>&, const BlockParams<T>&, const ModelConfig&);       \
    template Var<T> psab(const FeatureMap<T>&);

SCHVPP_BLOCKS(float)
SCHVPP_BLOCKS(double)

} // namespace schvpp
