#pragma once

// End-to-end restoration network, tiled whole-frame inference and
// checkpoint I/O.

#include <cstdint>
#include <string>

#include "schvpp/fusion.hpp"
#include "schvpp/params.hpp"
#include "schvpp/yuv.hpp"

namespace schvpp {

/// Every array the model owns, in checkpoint order:
/// head, hfb{i}.rb{j}, hfb{i}.hafm.{lfem,gfem,safm,cafm}, tail.
ParamLayout model_layout(const ModelConfig& cfg);

/// Closed-form trainable element count; equals model_layout(cfg).element_count().
std::size_t parameter_count(const ModelConfig& cfg);

ParameterStore init_model(const ModelConfig& cfg, std::uint64_t seed);

/// Zeroes the reconstruction convolution, turning the model into the
/// identity on its lossy input.
void zero_reconstruction(ParameterStore& params);

/// x_lr [3,H,W] plus the QP plane [H,W] -> restored frame x_lr + residual,
/// unclamped. H and W must be multiples of cfg.alignment().
template <typename T>
Var<T> forward(const Var<T>& x_lr, const Tensor<T>& qp_plane, const ParamBinding<T>& params, const ModelConfig& cfg);

/// Inference convenience wrapper (float, no gradient tracking).
Frame444 forward(const Frame444& x_lr, const QpPlane& qp, const ParameterStore& params, const ModelConfig& cfg);

struct InferenceOptions {
    unsigned threads = 1;
};

/// 4:2:0 -> 4:4:4, reflective padding to the alignment grid, overlapping
/// tiles averaged where they overlap, crop, 4:4:4 -> 4:2:0.
Yuv420Frame enhance_frame(const Yuv420Frame& frame, int qp, const ParameterStore& params, const ModelConfig& cfg,
                          const InferenceOptions& options = {});

/// Tile origins along one axis of length `extent` (already aligned).
std::vector<std::size_t> tile_origins(std::size_t extent, std::size_t tile, std::size_t overlap, std::size_t alignment);

/// Mirror padding (edge sample not repeated) on the right and bottom.
Frame444 reflect_pad(const Frame444& frame, std::size_t width, std::size_t height);

// Checkpoint file: "SCHVPP1", little-endian u64 manifest length, manifest
// text (config key=value lines, step=, seed=, then one
// `<name> dtype=f32 dims=a,b,...` line per array), raw f32 payloads.
void save_checkpoint(const ParameterStore& params, const std::string& path);
ParameterStore load_checkpoint(const std::string& path);
/// Also checks every array against the layout of `expected`.
ParameterStore load_checkpoint(const std::string& path, const ModelConfig& expected);

/// Throws FormatError naming the first array whose name or shape differs
/// from model_layout(cfg).
void check_layout(const ParameterStore& params, const ModelConfig& cfg);

} // namespace schvpp
