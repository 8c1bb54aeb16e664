#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <string_view>

namespace schvpp {

/// How the hybrid-attention fusion module combines its two weight sets.
enum class FusionMode { hybrid, sequential, parallel, spatial_only, channel_only };

std::string_view to_string(FusionMode mode);
FusionMode parse_fusion_mode(std::string_view text);

/// Architectural hyperparameters. Defaults are the full-size model; see
/// desk_scale() for the small configuration used in CPU experiments.
struct ModelConfig {
    std::size_t channels = 64;
    std::size_t in_channels = 4;  // Y, U, V + QP plane
    std::size_t num_hfb = 4;
    std::size_t rb_per_hfb = 2;
    std::size_t lfem_depth = 3;
    std::size_t n_swin = 2;
    std::size_t heads = 4;
    std::size_t window_side = 4;  // in 4x4 patches
    std::size_t mlp_ratio = 4;
    std::size_t cafm_reduction = 4;
    bool shift_windows = true;
    FusionMode fusion_mode = FusionMode::hybrid;
    bool rescale_spatial = false;
    std::size_t tile_size = 256;
    std::size_t tile_overlap = 16;

    static ModelConfig desk_scale();

    /// Spatial granularity every forward input must be divisible by.
    std::size_t alignment() const { return 4 * window_side; }

    /// Throws InvalidArgument on the first violated invariant.
    void validate() const;

    bool operator==(const ModelConfig&) const = default;
};

using KeyValues = std::map<std::string, std::string>;

/// Parses `key=value` lines; blank lines and lines starting with '#' are
/// skipped. Duplicate keys and lines without '=' are FormatErrors.
KeyValues parse_key_values(std::string_view text);
KeyValues read_key_value_file(const std::string& path);

/// Consumes the model keys found in `kv` (erasing them) on top of `base`.
ModelConfig model_config_from(KeyValues& kv, ModelConfig base = {});
std::string to_key_values(const ModelConfig& cfg);

namespace detail {
std::size_t parse_size(std::string_view key, std::string_view text);
double parse_double(std::string_view key, std::string_view text);
bool parse_bool(std::string_view key, std::string_view text);
} // namespace detail

} // namespace schvpp
