#pragma once

// Spatial (SAFM) and channel (CAFM) attention fusion of the local and
// global feature branches, their hybrid combination, and the ablation
// variants that wire the two weight sets differently.

#include <optional>
#include <string>

#include "schvpp/blocks.hpp"

namespace schvpp {

/// Per-position fusion weights, each an [H, W] map summing to 1.
template <typename T>
struct SpatialWeightPair {
    Var<T> lf;
    Var<T> gf;
};

/// Per-channel fusion weights, [C] each, with lf[c] + gf[c] == 1.
template <typename T>
struct ChannelWeightPair {
    Var<T> lf;
    Var<T> gf;
};

void declare_safm(ParamLayout& layout, const std::string& prefix, std::size_t channels);
void declare_cafm(ParamLayout& layout, const std::string& prefix, std::size_t channels, std::size_t reduction);
/// LFEM + GFEM + whichever of SAFM / CAFM the fusion mode uses.
void declare_hafm(ParamLayout& layout, const std::string& prefix, const ModelConfig& cfg);

/// Query projections of each branch are compressed by psab and correlated
/// with the key projection of f_lf + f_gf; Softmax2D over all positions.
template <typename T>
SpatialWeightPair<T> safm(const FeatureMap<T>& f_lf, const FeatureMap<T>& f_gf, const BlockParams<T>& p);

/// GAP(f_lf + f_gf) -> FC + PReLU -> one FC per branch -> two-way softmax
/// per channel.
template <typename T>
ChannelWeightPair<T> cafm(const FeatureMap<T>& f_lf, const FeatureMap<T>& f_gf, const BlockParams<T>& p);

/// (cw.lf * sw.lf) * f_lf + (cw.gf * sw.gf) * f_gf, with the combined
/// [C,H,W] weight formed first.
template <typename T>
FeatureMap<T> fuse_hybrid(const FeatureMap<T>& f_lf, const FeatureMap<T>& f_gf, const SpatialWeightPair<T>& sw,
                          const ChannelWeightPair<T>& cw);

/// cw.lf * (sw.lf * f_lf) + cw.gf * (sw.gf * f_gf). Same value as
/// fuse_hybrid up to rounding.
template <typename T>
FeatureMap<T> fuse_hybrid_nested(const FeatureMap<T>& f_lf, const FeatureMap<T>& f_gf, const SpatialWeightPair<T>& sw,
                                 const ChannelWeightPair<T>& cw);

/// (cw.lf * f_lf + cw.gf * f_gf) + (sw.lf * f_lf + sw.gf * f_gf).
template <typename T>
FeatureMap<T> fuse_parallel(const FeatureMap<T>& f_lf, const FeatureMap<T>& f_gf, const SpatialWeightPair<T>& sw,
                            const ChannelWeightPair<T>& cw);

template <typename T>
FeatureMap<T> fuse_spatial(const FeatureMap<T>& f_lf, const FeatureMap<T>& f_gf, const SpatialWeightPair<T>& sw);

template <typename T>
FeatureMap<T> fuse_channel(const FeatureMap<T>& f_lf, const FeatureMap<T>& f_gf, const ChannelWeightPair<T>& cw);

/// Intermediate values of one hafm() call, for inspection.
template <typename T>
struct HafmTrace {
    FeatureMap<T> f_lf;
    FeatureMap<T> f_gf;
    std::optional<SpatialWeightPair<T>> spatial;
    std::optional<ChannelWeightPair<T>> channel;
};

/// Local and global extraction of f_in followed by fusion per cfg.fusion_mode:
///  - hybrid: fuse_hybrid with both weight sets computed from (f_lf, f_gf);
///  - sequential: CAFM weights the branches first, SAFM weights are then
///    computed from and applied to the channel-weighted branches;
///  - parallel: fuse_parallel;
///  - spatial_only / channel_only: a single weight set.
/// With cfg.rescale_spatial the spatial maps are multiplied by H*W before use.
template <typename T>
FeatureMap<T> hafm(const FeatureMap<T>& f_in, const BlockParams<T>& p, const ModelConfig& cfg,
                   HafmTrace<T>* trace = nullptr);

} // namespace schvpp
