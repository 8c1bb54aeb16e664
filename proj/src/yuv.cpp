#include "schvpp/yuv.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "schvpp/error.hpp"

namespace schvpp {

namespace {

void require_even(std::size_t w, std::size_t h, const char* what) {
    if (w == 0 || h == 0 || w % 2 != 0 || h % 2 != 0)
        throw InvalidArgument(std::string(what) + ": dimensions " + std::to_string(w) + "x" + std::to_string(h) +
                              " must be positive and even");
}

std::uint8_t quantize(double v) {
    const double scaled = std::floor(v * 255.0 + 0.5);
    return static_cast<std::uint8_t>(std::clamp(scaled, 0.0, 255.0));
}

} // namespace

Yuv420Frame::Yuv420Frame(std::size_t w, std::size_t h)
    : width(w), height(h), y(w * h), u((w / 2) * (h / 2)), v((w / 2) * (h / 2)) {
    require_even(w, h, "Yuv420Frame");
}

void Yuv420Frame::validate() const {
    require_even(width, height, "Yuv420Frame");
    const std::size_t c = chroma_width() * chroma_height();
    if (y.size() != width * height || u.size() != c || v.size() != c)
        throw InvalidArgument("Yuv420Frame: plane sizes do not match " + std::to_string(width) + "x" +
                              std::to_string(height));
}

Frame444::Frame444(Tensor<float> t) {
    if (t.rank() != 3 || t.dim(0) != 3) throw InvalidArgument("Frame444: expected a [3,H,W] array, got " + shape_str(t.shape));
    height = t.dim(1);
    width = t.dim(2);
    planes = std::move(t);
}

Frame444 Frame444::crop(std::size_t x, std::size_t y, std::size_t w, std::size_t h) const {
    if (x + w > width || y + h > height) throw OutOfRange("Frame444::crop: window outside frame");
    Frame444 out(w, h);
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t r = 0; r < h; ++r)
            std::copy_n(&planes.at(c, y + r, x), w, &out.planes.at(c, r, 0));
    return out;
}

std::size_t yuv420_frame_bytes(std::size_t width, std::size_t height) {
    return width * height + 2 * (width / 2) * (height / 2);
}

Yuv420Frame read_yuv420(const std::string& path, std::size_t width, std::size_t height, std::size_t frame_index) {
    require_even(width, height, "read_yuv420");
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("read_yuv420: cannot open '" + path + "'");
    const std::size_t frame_bytes = yuv420_frame_bytes(width, height);
    f.seekg(0, std::ios::end);
    const auto file_size = static_cast<std::size_t>(f.tellg());
    if (file_size < (frame_index + 1) * frame_bytes)
        throw OutOfRange("read_yuv420: frame " + std::to_string(frame_index) + " is beyond the end of '" + path +
                         "' (" + std::to_string(file_size / frame_bytes) + " frames)");
    f.seekg(static_cast<std::streamoff>(frame_index * frame_bytes));
    Yuv420Frame frame(width, height);
    f.read(reinterpret_cast<char*>(frame.y.data()), std::streamsize(frame.y.size()));
    f.read(reinterpret_cast<char*>(frame.u.data()), std::streamsize(frame.u.size()));
    f.read(reinterpret_cast<char*>(frame.v.data()), std::streamsize(frame.v.size()));
    if (!f) throw IoError("read_yuv420: short read from '" + path + "'");
    return frame;
}

void write_yuv420(const Yuv420Frame& frame, const std::string& path, bool append) {
    frame.validate();
    std::ofstream f(path, std::ios::binary | (append ? std::ios::app : std::ios::trunc));
    if (!f) throw IoError("write_yuv420: cannot open '" + path + "' for writing");
    f.write(reinterpret_cast<const char*>(frame.y.data()), std::streamsize(frame.y.size()));
    f.write(reinterpret_cast<const char*>(frame.u.data()), std::streamsize(frame.u.size()));
    f.write(reinterpret_cast<const char*>(frame.v.data()), std::streamsize(frame.v.size()));
    if (!f) throw IoError("write_yuv420: write to '" + path + "' failed");
}

std::size_t count_yuv420_frames(const std::string& path, std::size_t width, std::size_t height) {
    require_even(width, height, "count_yuv420_frames");
    std::error_code ec;
    const auto size = std::filesystem::file_size(path, ec);
    if (ec) throw IoError("cannot stat '" + path + "': " + ec.message());
    return static_cast<std::size_t>(size) / yuv420_frame_bytes(width, height);
}

Frame444 upsample_420_to_444(const Yuv420Frame& frame) {
    frame.validate();
    const std::size_t w = frame.width, h = frame.height, cw = frame.chroma_width();
    Frame444 out(w, h);
    for (std::size_t r = 0; r < h; ++r)
        for (std::size_t c = 0; c < w; ++c) {
            out.planes.at(0, r, c) = float(frame.y[r * w + c]) / 255.0f;
            out.planes.at(1, r, c) = float(frame.u[(r / 2) * cw + c / 2]) / 255.0f;
            out.planes.at(2, r, c) = float(frame.v[(r / 2) * cw + c / 2]) / 255.0f;
        }
    return out;
}

Yuv420Frame downsample_444_to_420(const Frame444& frame) {
    require_even(frame.width, frame.height, "downsample_444_to_420");
    const std::size_t w = frame.width, h = frame.height, cw = w / 2;
    Yuv420Frame out(w, h);
    const auto& p = frame.planes;
    for (std::size_t r = 0; r < h; ++r)
        for (std::size_t c = 0; c < w; ++c) out.y[r * w + c] = quantize(p.at(0, r, c));
    for (std::size_t r = 0; r < h / 2; ++r)
        for (std::size_t c = 0; c < cw; ++c) {
            auto mean = [&](std::size_t plane) {
                return (double(p.at(plane, 2 * r, 2 * c)) + p.at(plane, 2 * r, 2 * c + 1) + p.at(plane, 2 * r + 1, 2 * c) +
                        p.at(plane, 2 * r + 1, 2 * c + 1)) /
                       4.0;
            };
            out.u[r * cw + c] = quantize(mean(1));
            out.v[r * cw + c] = quantize(mean(2));
        }
    return out;
}

QpPlane make_qp_plane(int qp, std::size_t width, std::size_t height) {
    if (qp < 0 || qp > 63) throw InvalidArgument("make_qp_plane: qp " + std::to_string(qp) + " outside [0, 63]");
    return QpPlane{qp, Tensor<float>(Shape{height, width}, float(qp) / 63.0f)};
}

FrameSource::FrameSource(std::string path, std::size_t width, std::size_t height)
    : path_(std::move(path)), width_(width), height_(height), frames_(count_yuv420_frames(path_, width, height)) {
    if (frames_ == 0) throw OutOfRange("'" + path_ + "' holds no complete frame");
}

Yuv420Frame FrameSource::read(std::size_t index) const {
    return read_yuv420(path_, width_, height_, index);
}

PatchPair sample_patch_pair(const FrameSource& lossy, const FrameSource& lossless, int qp, std::size_t size,
                            std::mt19937_64& rng) {
    if (lossy.width() != lossless.width() || lossy.height() != lossless.height() ||
        lossy.frame_count() != lossless.frame_count())
        throw InvalidArgument("sample_patch_pair: '" + lossy.path() + "' and '" + lossless.path() +
                              "' differ in size or frame count");
    const std::size_t w = lossy.width(), h = lossy.height();
    if (size == 0 || size > std::min(w, h))
        throw InvalidArgument("sample_patch_pair: patch size " + std::to_string(size) + " exceeds frame " +
                              std::to_string(w) + "x" + std::to_string(h));
    PatchPair pair;
    pair.qp = qp;
    pair.source_id = lossless.path();
    pair.frame_index = std::uniform_int_distribution<std::size_t>(0, lossy.frame_count() - 1)(rng);
    pair.x = std::uniform_int_distribution<std::size_t>(0, w - size)(rng);
    pair.y = std::uniform_int_distribution<std::size_t>(0, h - size)(rng);
    pair.lossy = upsample_420_to_444(lossy.read(pair.frame_index)).crop(pair.x, pair.y, size, size);
    pair.lossless = upsample_420_to_444(lossless.read(pair.frame_index)).crop(pair.x, pair.y, size, size);
    return pair;
}

std::vector<ManifestRecord> read_manifest(const std::string& path, bool require_bitrate) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open manifest '" + path + "'");
    std::vector<ManifestRecord> records;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.find_first_not_of(" \t") == std::string::npos || line[line.find_first_not_of(" \t")] == '#') continue;
        auto fail = [&](const std::string& why) {
            throw FormatError("manifest '" + path + "' line " + std::to_string(lineno) + ": " + why);
        };
        std::istringstream in(line);
        std::vector<std::string> fields;
        for (std::string tok; in >> tok;) fields.push_back(tok);
        const std::size_t expected = require_bitrate ? 6 : 5;
        if (fields.size() < 5 || fields.size() > 6) fail("expected 5 or 6 fields, got " + std::to_string(fields.size()));
        if (fields.size() < expected) fail("missing bitrate field");
        ManifestRecord rec;
        rec.line = lineno;
        rec.lossy_path = fields[0];
        rec.lossless_path = fields[1];
        try {
            std::size_t used = 0;
            const long w = std::stol(fields[2], &used);
            if (used != fields[2].size() || w <= 0) fail("bad width");
            const long h = std::stol(fields[3], &used);
            if (used != fields[3].size() || h <= 0) fail("bad height");
            const long qp = std::stol(fields[4], &used);
            if (used != fields[4].size() || qp < 0 || qp > 63) fail("qp must be an integer in [0, 63]");
            rec.width = std::size_t(w);
            rec.height = std::size_t(h);
            rec.qp = int(qp);
            if (fields.size() == 6) {
                const double rate = std::stod(fields[5], &used);
                if (used != fields[5].size() || !(rate > 0)) fail("bitrate must be positive");
                rec.bitrate_kbps = rate;
            }
        } catch (const std::logic_error&) {
            fail("non-numeric field");
        }
        if (rec.width % 2 || rec.height % 2) fail("dimensions must be even");
        records.push_back(std::move(rec));
    }
    if (records.empty()) throw FormatError("manifest '" + path + "' has no records");
    return records;
}

} // namespace schvpp
