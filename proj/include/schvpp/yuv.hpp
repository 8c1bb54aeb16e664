#pragma once

// Raw planar YUV 4:2:0 I/O, 4:2:0 <-> 4:4:4 conversion, QP conditioning
// planes and training patch sampling.

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "schvpp/tensor.hpp"

namespace schvpp {

/// 8-bit 4:2:0 frame. Chroma planes are (width/2) x (height/2).
struct Yuv420Frame {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<std::uint8_t> y, u, v;

    Yuv420Frame() = default;
    Yuv420Frame(std::size_t w, std::size_t h);

    std::size_t chroma_width() const { return width / 2; }
    std::size_t chroma_height() const { return height / 2; }
    std::size_t byte_size() const { return width * height * 3 / 2; }

    /// Throws InvalidArgument if the dimensions are odd or a plane has the
    /// wrong size.
    void validate() const;

    bool operator==(const Yuv420Frame&) const = default;
};

/// Full-resolution Y, U, V planes as a [3, H, W] array of reals in [0, 1].
struct Frame444 {
    std::size_t width = 0;
    std::size_t height = 0;
    Tensor<float> planes;

    Frame444() = default;
    Frame444(std::size_t w, std::size_t h) : width(w), height(h), planes(Shape{3, h, w}) {}
    explicit Frame444(Tensor<float> t);

    Frame444 crop(std::size_t x, std::size_t y, std::size_t w, std::size_t h) const;
};

/// Constant plane qp/63 fed to the network as the fourth input channel.
struct QpPlane {
    int qp = 0;
    Tensor<float> plane;  // [H, W]
};

struct PatchPair {
    Frame444 lossy;
    Frame444 lossless;
    int qp = 0;
    std::string source_id;
    std::size_t frame_index = 0;
    std::size_t x = 0;
    std::size_t y = 0;
};

std::size_t yuv420_frame_bytes(std::size_t width, std::size_t height);

Yuv420Frame read_yuv420(const std::string& path, std::size_t width, std::size_t height, std::size_t frame_index);
void write_yuv420(const Yuv420Frame& frame, const std::string& path, bool append);

/// Number of complete frames in a headerless 4:2:0 file.
std::size_t count_yuv420_frames(const std::string& path, std::size_t width, std::size_t height);

Frame444 upsample_420_to_444(const Yuv420Frame& frame);
/// Rounds half up and clamps to [0, 255]; chroma is the 2x2 block mean.
Yuv420Frame downsample_444_to_420(const Frame444& frame);

QpPlane make_qp_plane(int qp, std::size_t width, std::size_t height);

/// A headerless 4:2:0 sequence on disk.
class FrameSource {
public:
    FrameSource(std::string path, std::size_t width, std::size_t height);

    const std::string& path() const { return path_; }
    std::size_t width() const { return width_; }
    std::size_t height() const { return height_; }
    std::size_t frame_count() const { return frames_; }
    Yuv420Frame read(std::size_t index) const;

private:
    std::string path_;
    std::size_t width_, height_, frames_;
};

/// Draws one frame index and one crop origin uniformly and applies them to
/// both sequences after 4:4:4 conversion.
PatchPair sample_patch_pair(const FrameSource& lossy, const FrameSource& lossless, int qp, std::size_t size,
                            std::mt19937_64& rng);

/// One line of a training or evaluation manifest:
/// `<lossy> <lossless> <width> <height> <qp> [<bitrate_kbps>]`.
struct ManifestRecord {
    std::string lossy_path;
    std::string lossless_path;
    std::size_t width = 0;
    std::size_t height = 0;
    int qp = 0;
    std::optional<double> bitrate_kbps;
    std::size_t line = 0;
};

/// Throws FormatError naming the offending line number.
std::vector<ManifestRecord> read_manifest(const std::string& path, bool require_bitrate);

} // namespace schvpp
