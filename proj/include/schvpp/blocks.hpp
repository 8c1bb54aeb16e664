#pragma once

// Learnable building blocks: residual block, local (LFEM) and global (GFEM)
// feature extractors, windowed self-attention, pixel shuffle and the
// polarized query compression used by the spatial fusion weights.
//
// Feature maps are Var<T> of shape [C, H, W].

#include <string>
#include <vector>

#include "schvpp/autograd.hpp"
#include "schvpp/config.hpp"
#include "schvpp/params.hpp"

namespace schvpp {

template <typename T>
using FeatureMap = Var<T>;

/// Patch grid of rows x cols patches, partitioned into square windows of
/// window_side x window_side patches.
struct WindowGeometry {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::size_t window_side = 1;

    std::size_t tokens_per_window() const { return window_side * window_side; }
    std::size_t windows() const { return (rows / window_side) * (cols / window_side); }
    std::size_t tokens() const { return rows * cols; }

    /// Raster position (r * cols + c) of the token stored at window-order index i.
    std::size_t raster_of(std::size_t i) const;
    /// Window-order index of the token at raster position p.
    std::size_t window_index_of(std::size_t p) const;

    std::vector<std::size_t> window_to_raster() const;  // out[i] = raster_of(i)
    std::vector<std::size_t> raster_to_window() const;  // out[p] = window_index_of(p)
    /// Gather indices taking window-ordered tokens to the window order of the
    /// grid cyclically shifted by `shift` patches (up and left).
    std::vector<std::size_t> shift_permutation(std::size_t shift) const;
};

std::vector<std::size_t> invert_permutation(const std::vector<std::size_t>& perm);

/// Tokens [windows * T, C] in window order plus the grid they came from.
template <typename T>
struct TokenGrid {
    Var<T> tokens;
    WindowGeometry geometry;

    std::size_t channels() const { return tokens.dim(1); }
};

// Parameter declarations. Names are relative to `prefix`.
void declare_residual_block(ParamLayout& layout, const std::string& prefix, std::size_t channels);
void declare_lfem(ParamLayout& layout, const std::string& prefix, std::size_t channels, std::size_t depth);
void declare_patch_embed(ParamLayout& layout, const std::string& prefix, std::size_t channels);
void declare_msa(ParamLayout& layout, const std::string& prefix, std::size_t channels);
void declare_swin_block(ParamLayout& layout, const std::string& prefix, std::size_t channels, std::size_t mlp_ratio);
void declare_gfem(ParamLayout& layout, const std::string& prefix, const ModelConfig& cfg);

/// x + Conv3x3(PReLU(Conv3x3(x))).
template <typename T>
FeatureMap<T> residual_block(const FeatureMap<T>& x, const BlockParams<T>& p);

/// `depth` x (Conv3x3 + PReLU).
template <typename T>
FeatureMap<T> lfem(const FeatureMap<T>& x, const BlockParams<T>& p, std::size_t depth);

/// [C,h,w] grid -> window-ordered tokens, and back.
template <typename T>
TokenGrid<T> partition_windows(const Var<T>& grid, std::size_t window_side);
template <typename T>
Var<T> merge_windows(const TokenGrid<T>& tokens);

/// 4x4 stride-4 convolution followed by window partitioning.
template <typename T>
TokenGrid<T> patch_embed(const FeatureMap<T>& x, const BlockParams<T>& p, std::size_t window_side);

/// Per-window multi-head self-attention (qkv projection, scaled dot
/// product, output projection). No relative position bias.
template <typename T>
TokenGrid<T> msa(const TokenGrid<T>& tokens, const BlockParams<T>& p, std::size_t heads);

/// Pre-norm transformer block; with `shifted` the grid is cyclically
/// shifted by window_side/2 patches around the attention.
template <typename T>
TokenGrid<T> swin_block(const TokenGrid<T>& tokens, const BlockParams<T>& p, std::size_t heads, bool shifted);

/// patch_embed -> swin blocks -> per-token C->16C expansion -> pixel shuffle.
template <typename T>
FeatureMap<T> gfem(const FeatureMap<T>& x, const BlockParams<T>& p, const ModelConfig& cfg);

/// Global average pool then softmax over channels: a [C] simplex vector.
template <typename T>
Var<T> psab(const FeatureMap<T>& qm);

template <typename T>
FeatureMap<T> pixel_shuffle(const FeatureMap<T>& x, std::size_t r) {
    return ops::pixel_shuffle(x, r);
}

} // namespace schvpp
