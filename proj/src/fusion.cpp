#include "schvpp/fusion.hpp"

#include "schvpp/error.hpp"

namespace schvpp {

void declare_safm(ParamLayout& layout, const std::string& prefix, std::size_t channels) {
    layout.add_conv(prefix + ".query_lf", channels / 2, channels, 1);
    layout.add_conv(prefix + ".query_gf", channels / 2, channels, 1);
    layout.add_conv(prefix + ".key", channels / 2, channels, 1);
}

void declare_cafm(ParamLayout& layout, const std::string& prefix, std::size_t channels, std::size_t reduction) {
    const std::size_t hidden = channels / reduction;
    layout.add_linear(prefix + ".squeeze", hidden, channels);
    layout.add_prelu(prefix + ".prelu");
    layout.add_linear(prefix + ".expand_lf", channels, hidden);
    layout.add_linear(prefix + ".expand_gf", channels, hidden);
}

void declare_hafm(ParamLayout& layout, const std::string& prefix, const ModelConfig& cfg) {
    declare_lfem(layout, prefix + ".lfem", cfg.channels, cfg.lfem_depth);
    declare_gfem(layout, prefix + ".gfem", cfg);
    if (cfg.fusion_mode != FusionMode::channel_only) declare_safm(layout, prefix + ".safm", cfg.channels);
    if (cfg.fusion_mode != FusionMode::spatial_only)
        declare_cafm(layout, prefix + ".cafm", cfg.channels, cfg.cafm_reduction);
}

namespace {

template <typename T>
void require_pair(const FeatureMap<T>& a, const FeatureMap<T>& b, const char* what) {
    if (a.shape().size() != 3) throw InvalidArgument(std::string(what) + ": expected [C,H,W] feature maps");
    require_same_shape(a.shape(), b.shape(), what);
}

template <typename T>
Var<T> conv1x1(const FeatureMap<T>& x, const BlockParams<T>& p, const std::string& name) {
    return ops::conv2d(x, p[name + ".weight"], p[name + ".bias"], 1, 0);
}

template <typename T>
Var<T> spatial_logits(const FeatureMap<T>& qm, const Var<T>& km) {
    // psab gives a 1 x C/2 row; its product with the flattened (HW) x C/2 key
    // is one logit per position, viewed back as H x W.
    return ops::channel_dot(psab(qm), km);
}

template <typename T>
Var<T> broadcast_weight(const Var<T>& channel, const Var<T>& spatial) {
    const Shape shape{channel.dim(0), spatial.dim(0), spatial.dim(1)};
    auto ones = constant(Tensor<T>(shape, T(1)));
    return ops::mul_channel(ops::mul_spatial(ones, spatial), channel);
}

} // namespace

template <typename T>
SpatialWeightPair<T> safm(const FeatureMap<T>& f_lf, const FeatureMap<T>& f_gf, const BlockParams<T>& p) {
    require_pair(f_lf, f_gf, "safm");
    auto qm_lf = conv1x1(f_lf, p, "query_lf");
    auto qm_gf = conv1x1(f_gf, p, "query_gf");
    auto km = conv1x1(ops::add(f_lf, f_gf), p, "key");
    return {ops::softmax_all(spatial_logits(qm_lf, km)), ops::softmax_all(spatial_logits(qm_gf, km))};
}

template <typename T>
ChannelWeightPair<T> cafm(const FeatureMap<T>& f_lf, const FeatureMap<T>& f_gf, const BlockParams<T>& p) {
    require_pair(f_lf, f_gf, "cafm");
    auto s = ops::global_avg_pool(ops::add(f_lf, f_gf));
    auto z = ops::prelu(ops::linear(s, p["squeeze.weight"], p["squeeze.bias"]), p["prelu"]);
    auto logit_lf = ops::linear(z, p["expand_lf.weight"], p["expand_lf.bias"]);
    auto logit_gf = ops::linear(z, p["expand_gf.weight"], p["expand_gf.bias"]);
    // softmax over the two branches: e^a / (e^a + e^b) = sigmoid(a - b)
    return {ops::sigmoid(ops::sub(logit_lf, logit_gf)), ops::sigmoid(ops::sub(logit_gf, logit_lf))};
}

template <typename T>
FeatureMap<T> fuse_hybrid(const FeatureMap<T>& f_lf, const FeatureMap<T>& f_gf, const SpatialWeightPair<T>& sw,
                          const ChannelWeightPair<T>& cw) {
    require_pair(f_lf, f_gf, "fuse_hybrid");
    auto w_lf = broadcast_weight(cw.lf, sw.lf);
    auto w_gf = broadcast_weight(cw.gf, sw.gf);
    return ops::add(ops::mul(w_lf, f_lf), ops::mul(w_gf, f_gf));
}

template <typename T>
FeatureMap<T> fuse_hybrid_nested(const FeatureMap<T>& f_lf, const FeatureMap<T>& f_gf, const SpatialWeightPair<T>& sw,
                                 const ChannelWeightPair<T>& cw) {
    require_pair(f_lf, f_gf, "fuse_hybrid_nested");
    auto a = ops::mul_channel(ops::mul_spatial(f_lf, sw.lf), cw.lf);
    auto b = ops::mul_channel(ops::mul_spatial(f_gf, sw.gf), cw.gf);
    return ops::add(a, b);
}

template <typename T>
FeatureMap<T> fuse_spatial(const FeatureMap<T>& f_lf, const FeatureMap<T>& f_gf, const SpatialWeightPair<T>& sw) {
    require_pair(f_lf, f_gf, "fuse_spatial");
    return ops::add(ops::mul_spatial(f_lf, sw.lf), ops::mul_spatial(f_gf, sw.gf));
}

template <typename T>
FeatureMap<T> fuse_channel(const FeatureMap<T>& f_lf, const FeatureMap<T>& f_gf, const ChannelWeightPair<T>& cw) {
    require_pair(f_lf, f_gf, "fuse_channel");
    return ops::add(ops::mul_channel(f_lf, cw.lf), ops::mul_channel(f_gf, cw.gf));
}

template <typename T>
FeatureMap<T> fuse_parallel(const FeatureMap<T>& f_lf, const FeatureMap<T>& f_gf, const SpatialWeightPair<T>& sw,
                            const ChannelWeightPair<T>& cw) {
    return ops::add(fuse_channel(f_lf, f_gf, cw), fuse_spatial(f_lf, f_gf, sw));
}

template <typename T>
FeatureMap<T> hafm(const FeatureMap<T>& f_in, const BlockParams<T>& p, const ModelConfig& cfg, HafmTrace<T>* trace) {
    auto f_lf = lfem(f_in, p.sub("lfem"), cfg.lfem_depth);
    auto f_gf = gfem(f_in, p.sub("gfem"), cfg);
    const T positions = T(f_in.dim(1) * f_in.dim(2));

    auto spatial = [&](const FeatureMap<T>& a, const FeatureMap<T>& b) {
        auto sw = safm(a, b, p.sub("safm"));
        if (trace) trace->spatial = sw;
        if (cfg.rescale_spatial) sw = {ops::scale(sw.lf, positions), ops::scale(sw.gf, positions)};
        return sw;
    };
    auto channel = [&](const FeatureMap<T>& a, const FeatureMap<T>& b) {
        auto cw = cafm(a, b, p.sub("cafm"));
        if (trace) trace->channel = cw;
        return cw;
    };
    if (trace) {
        trace->f_lf = f_lf;
        trace->f_gf = f_gf;
    }

    switch (cfg.fusion_mode) {
    case FusionMode::hybrid: {
        auto cw = channel(f_lf, f_gf);
        return fuse_hybrid(f_lf, f_gf, spatial(f_lf, f_gf), cw);
    }
    case FusionMode::sequential: {
        auto cw = channel(f_lf, f_gf);
        auto g_lf = ops::mul_channel(f_lf, cw.lf);
        auto g_gf = ops::mul_channel(f_gf, cw.gf);
        return fuse_spatial(g_lf, g_gf, spatial(g_lf, g_gf));
    }
    case FusionMode::parallel: {
        auto cw = channel(f_lf, f_gf);
        return fuse_parallel(f_lf, f_gf, spatial(f_lf, f_gf), cw);
    }
    case FusionMode::spatial_only:
        return fuse_spatial(f_lf, f_gf, spatial(f_lf, f_gf));
    case FusionMode::channel_only:
        return fuse_channel(f_lf, f_gf, channel(f_lf, f_gf));
    }
    throw InvalidArgument("hafm: unknown fusion mode");
}

#define SCHVPP_FUSION(T)                                                                                         \
    template SpatialWeightPair<T> safm(const FeatureMap<T>&, const FeatureMap<T>&, const BlockParams<T>&);       \
    template ChannelWeightPair<T> cafm(const FeatureMap<T>&, const FeatureMap<T>&, const BlockParams<T>&);       \
    template FeatureMap<T> fuse_hybrid(const FeatureMap<T>&, const FeatureMap<T>&, const SpatialWeightPair<T>&,  \
                                       const ChannelWeightPair<T>&);                                             \
    template FeatureMap<T> fuse_hybrid_nested(const FeatureMap<T>&, const FeatureMap<T>&,                        \
                                              const SpatialWeightPair<T>&, const ChannelWeightPair<T>&);         \
    template FeatureMap<T> fuse_parallel(const FeatureMap<T>&, const FeatureMap<T>&, const SpatialWeightPair<T>&, \
                                         const ChannelWeightPair<T>&);                                           \
    template FeatureMap<T> fuse_spatial(const FeatureMap<T>&, const FeatureMap<T>&, const SpatialWeightPair<T>&); \
    template FeatureMap<T> fuse_channel(const FeatureMap<T>&, const FeatureMap<T>&, const ChannelWeightPair<T>&); \
    template FeatureMap<T> hafm(const FeatureMap<T>&, const BlockParams<T>&, const ModelConfig&, HafmTrace<T>*);

SCHVPP_FUSION(float)
SCHVPP_FUSION(double)

} // namespace schvpp
