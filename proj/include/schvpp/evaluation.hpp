#pragma once

// PSNR, MS-SSIM, Bjontegaard delta rate and per-sequence evaluation.

#include <array>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "schvpp/yuv.hpp"

namespace schvpp {

/// Read-only view of one 8-bit plane.
struct PlaneView {
    std::span<const std::uint8_t> samples;
    std::size_t width = 0;
    std::size_t height = 0;
};

PlaneView plane_of(const Yuv420Frame& frame, std::size_t component);  // 0 = Y, 1 = U, 2 = V

/// 10 log10(peak^2 / MSE); +infinity when the planes are identical.
double psnr(std::span<const std::uint8_t> ref, std::span<const std::uint8_t> test, double peak = 255.0);

/// Number of scales ms_ssim uses for a plane of this size: at most 5, and
/// the coarsest scale must still fit the 11x11 window.
std::size_t ms_ssim_scales(std::size_t width, std::size_t height);

/// Multi-scale SSIM with the standard exponents (renormalized when fewer
/// than five scales fit), 11x11 Gaussian window (sigma 1.5), K1 = 0.01,
/// K2 = 0.03, L = 255 and 2x2 mean downsampling. Negative per-scale terms
/// are clamped to zero.
double ms_ssim(const PlaneView& ref, const PlaneView& test);

/// -10 log10(1 - m).
double ms_ssim_db(double m);

struct RdPoint {
    double bitrate = 0.0;  // kbps
    double quality = 0.0;  // dB
};

/// At least four points with strictly increasing bitrate and quality.
struct RdCurve {
    std::vector<RdPoint> points;
    std::string label;

    void validate() const;
};

/// Monotone piecewise cubic Hermite interpolant (derivatives and end
/// conditions as in the common Fritsch-Carlson / Moler formulation).
class Pchip {
public:
    Pchip(std::vector<double> x, std::vector<double> y);

    double operator()(double x) const;
    /// Exact integral over [a, b] within the knot range.
    double integral(double a, double b) const;
    double x_min() const { return x_.front(); }
    double x_max() const { return x_.back(); }
    const std::vector<double>& slopes() const { return d_; }

private:
    std::size_t segment(double x) const;

    std::vector<double> x_, y_, d_;
};

/// Average bitrate difference (%) of `test` against `anchor` at equal
/// quality; negative means savings. Interpolates log10(rate) over quality
/// and averages over the overlapping quality interval.
double bd_rate(const RdCurve& anchor, const RdCurve& test);

/// CSV with header `bitrate,quality`.
RdCurve read_rd_curve(const std::string& path);

using FrameEnhancer = std::function<Yuv420Frame(const Yuv420Frame& frame, int qp)>;

struct EvalRow {
    std::string sequence;
    int qp = 0;
    double bitrate = 0.0;
    std::size_t component = 0;
    double psnr_lossy = 0.0;
    double psnr_enhanced = 0.0;
    double msssim_lossy = 0.0;
    double msssim_enhanced = 0.0;

    double psnr_delta() const { return psnr_enhanced - psnr_lossy; }
    double msssim_delta() const { return msssim_enhanced - msssim_lossy; }
};

struct SequenceBdRate {
    std::string sequence;
    std::array<double, 3> psnr{};    // NaN when the curve is unusable
    std::array<double, 3> msssim{};
};

struct EvalReport {
    std::vector<EvalRow> rows;  // manifest order, Y/U/V per record
    std::vector<SequenceBdRate> per_sequence;
    std::array<double, 3> bd_rate_psnr{};    // mean over sequences with a valid value
    std::array<double, 3> bd_rate_msssim{};
};

struct EvalOptions {
    std::size_t max_frames = 0;  // 0: every frame
};

/// Runs `enhance` over every frame of every record, averages per-frame
/// metrics, and computes per-component BD-rates of the enhanced against the
/// lossy curve of each sequence (records grouped by lossless path).
EvalReport evaluate_sequences(const std::vector<ManifestRecord>& records, const FrameEnhancer& enhance,
                              const EvalOptions& options = {});

/// Writes report.csv, bd_rate.csv and bd_rate_per_sequence.csv into `dir`.
void write_eval_report(const EvalReport& report, const std::string& dir);

const char* component_name(std::size_t component);

} // namespace schvpp
