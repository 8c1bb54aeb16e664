#include "schvpp/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "schvpp/error.hpp"

namespace schvpp {

std::string_view to_string(FusionMode mode) {
    switch (mode) {
    case FusionMode::hybrid: return "hybrid";
    case FusionMode::sequential: return "sequential";
    case FusionMode::parallel: return "parallel";
    case FusionMode::spatial_only: return "spatial_only";
    case FusionMode::channel_only: return "channel_only";
    }
    return "?";
}

FusionMode parse_fusion_mode(std::string_view text) {
    for (FusionMode m : {FusionMode::hybrid, FusionMode::sequential, FusionMode::parallel, FusionMode::spatial_only,
                         FusionMode::channel_only})
        if (to_string(m) == text) return m;
    throw InvalidArgument("unknown fusion mode '" + std::string(text) + "'");
}

ModelConfig ModelConfig::desk_scale() {
    ModelConfig cfg;
    cfg.channels = 16;
    cfg.tile_size = 128;
    return cfg;
}

void ModelConfig::validate() const {
    auto fail = [](const std::string& msg) { throw InvalidArgument("model config: " + msg); };
    if (channels == 0 || channels % 2 != 0) fail("channels must be positive and even");
    if (heads == 0 || channels % heads != 0) fail("channels must be divisible by heads");
    if (cafm_reduction == 0 || channels % cafm_reduction != 0) fail("channels must be divisible by cafm_reduction");
    if (in_channels != 4) fail("in_channels must be 4 (Y, U, V, QP)");
    if (num_hfb == 0) fail("num_hfb must be >= 1");
    if (lfem_depth == 0) fail("lfem_depth must be >= 1");
    if (window_side == 0) fail("window_side must be >= 1");
    if (mlp_ratio == 0) fail("mlp_ratio must be >= 1");
    if (tile_size == 0 || tile_size % alignment() != 0)
        fail("tile_size must be a positive multiple of " + std::to_string(alignment()));
    if (tile_overlap >= tile_size) fail("tile_overlap must be smaller than tile_size");
}

KeyValues parse_key_values(std::string_view text) {
    KeyValues kv;
    std::istringstream in{std::string(text)};
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto first = line.find_first_not_of(" \t\r");
        if (first == std::string::npos || line[first] == '#') continue;
        const auto last = line.find_last_not_of(" \t\r");
        line = line.substr(first, last - first + 1);
        const auto eq = line.find('=');
        if (eq == std::string::npos || eq == 0)
            throw FormatError("line " + std::to_string(lineno) + ": expected key=value");
        std::string key = line.substr(0, eq);
        std::string value = line.substr(eq + 1);
        while (!key.empty() && (key.back() == ' ' || key.back() == '\t')) key.pop_back();
        value.erase(0, value.find_first_not_of(" \t"));
        if (!kv.emplace(key, value).second)
            throw FormatError("line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
    }
    return kv;
}

KeyValues read_key_value_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open '" + path + "'");
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_key_values(ss.str());
}

namespace detail {

std::size_t parse_size(std::string_view key, std::string_view text) {
    std::size_t v = 0;
    auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc() || p != text.data() + text.size())
        throw FormatError("key '" + std::string(key) + "': expected a non-negative integer, got '" + std::string(text) + "'");
    return v;
}

double parse_double(std::string_view key, std::string_view text) {
    try {
        std::size_t used = 0;
        const double v = std::stod(std::string(text), &used);
        if (used == text.size()) return v;
    } catch (const std::exception&) {
    }
    throw FormatError("key '" + std::string(key) + "': expected a number, got '" + std::string(text) + "'");
}

bool parse_bool(std::string_view key, std::string_view text) {
    if (text == "1" || text == "true") return true;
    if (text == "0" || text == "false") return false;
    throw FormatError("key '" + std::string(key) + "': expected true/false, got '" + std::string(text) + "'");
}

} // namespace detail

ModelConfig model_config_from(KeyValues& kv, ModelConfig cfg) {
    auto take = [&kv](const char* key, auto&& apply) {
        auto it = kv.find(key);
        if (it == kv.end()) return;
        apply(key, it->second);
        kv.erase(it);
    };
    auto size_field = [&](const char* key, std::size_t& field) {
        take(key, [&](const char* k, const std::string& v) { field = detail::parse_size(k, v); });
    };
    auto bool_field = [&](const char* key, bool& field) {
        take(key, [&](const char* k, const std::string& v) { field = detail::parse_bool(k, v); });
    };
    size_field("channels", cfg.channels);
    size_field("in_channels", cfg.in_channels);
    size_field("num_hfb", cfg.num_hfb);
    size_field("rb_per_hfb", cfg.rb_per_hfb);
    size_field("lfem_depth", cfg.lfem_depth);
    size_field("n_swin", cfg.n_swin);
    size_field("heads", cfg.heads);
    size_field("window_side", cfg.window_side);
    size_field("mlp_ratio", cfg.mlp_ratio);
    size_field("cafm_reduction", cfg.cafm_reduction);
    bool_field("shift_windows", cfg.shift_windows);
    take("fusion_mode", [&](const char*, const std::string& v) { cfg.fusion_mode = parse_fusion_mode(v); });
    bool_field("rescale_spatial", cfg.rescale_spatial);
    size_field("tile_size", cfg.tile_size);
    size_field("tile_overlap", cfg.tile_overlap);
    return cfg;
}

std::string to_key_values(const ModelConfig& cfg) {
    std::ostringstream os;
    os << "channels=" << cfg.channels << '\n'
       << "in_channels=" << cfg.in_channels << '\n'
       << "num_hfb=" << cfg.num_hfb << '\n'
       << "rb_per_hfb=" << cfg.rb_per_hfb << '\n'
       << "lfem_depth=" << cfg.lfem_depth << '\n'
       << "n_swin=" << cfg.n_swin << '\n'
       << "heads=" << cfg.heads << '\n'
       << "window_side=" << cfg.window_side << '\n'
       << "mlp_ratio=" << cfg.mlp_ratio << '\n'
       << "cafm_reduction=" << cfg.cafm_reduction << '\n'
       << "shift_windows=" << (cfg.shift_windows ? "true" : "false") << '\n'
       << "fusion_mode=" << to_string(cfg.fusion_mode) << '\n'
       << "rescale_spatial=" << (cfg.rescale_spatial ? "true" : "false") << '\n'
       << "tile_size=" << cfg.tile_size << '\n'
       << "tile_overlap=" << cfg.tile_overlap << '\n';
    return os.str();
}

} // namespace schvpp
