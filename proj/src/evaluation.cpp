#include "schvpp/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

#include "schvpp/config.hpp"
#include "schvpp/error.hpp"

namespace schvpp {

PlaneView plane_of(const Yuv420Frame& frame, std::size_t component) {
    switch (component) {
    case 0: return {frame.y, frame.width, frame.height};
    case 1: return {frame.u, frame.chroma_width(), frame.chroma_height()};
    case 2: return {frame.v, frame.chroma_width(), frame.chroma_height()};
    }
    throw InvalidArgument("plane_of: component must be 0, 1 or 2");
}

const char* component_name(std::size_t component) {
    static const char* names[] = {"Y", "U", "V"};
    if (component > 2) throw InvalidArgument("component must be 0, 1 or 2");
    return names[component];
}

double psnr(std::span<const std::uint8_t> ref, std::span<const std::uint8_t> test, double peak) {
    if (ref.size() != test.size()) throw InvalidArgument("psnr: planes differ in size");
    if (ref.empty()) throw InvalidArgument("psnr: empty plane");
    if (!(peak > 0.0)) throw InvalidArgument("psnr: peak must be positive");
    double sse = 0.0;
    for (std::size_t i = 0; i < ref.size(); ++i) {
        const double d = double(ref[i]) - double(test[i]);
        sse += d * d;
    }
    if (sse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(peak * peak / (sse / double(ref.size())));
}

namespace {

constexpr std::size_t kWindow = 11;
constexpr double kSigma = 1.5;
constexpr double kWeights[5] = {0.0448, 0.2856, 0.3001, 0.2363, 0.1333};

struct Image {
    std::size_t w = 0, h = 0;
    std::vector<double> px;
    double operator()(std::size_t x, std::size_t y) const { return px[y * w + x]; }
};

Image to_image(const PlaneView& p) {
    if (p.samples.size() != p.width * p.height) throw InvalidArgument("ms_ssim: plane size does not match its view");
    return {p.width, p.height, std::vector<double>(p.samples.begin(), p.samples.end())};
}

Image downsample(const Image& a) {
    Image out{a.w / 2, a.h / 2, {}};
    out.px.resize(out.w * out.h);
    for (std::size_t y = 0; y < out.h; ++y)
        for (std::size_t x = 0; x < out.w; ++x)
            out.px[y * out.w + x] =
                (a(2 * x, 2 * y) + a(2 * x + 1, 2 * y) + a(2 * x, 2 * y + 1) + a(2 * x + 1, 2 * y + 1)) / 4.0;
    return out;
}

std::array<double, kWindow> gaussian_window() {
    std::array<double, kWindow> g{};
    double sum = 0.0;
    for (std::size_t i = 0; i < kWindow; ++i) {
        const double d = double(i) - double(kWindow / 2);
        g[i] = std::exp(-d * d / (2.0 * kSigma * kSigma));
        sum += g[i];
    }
    for (auto& v : g) v /= sum;
    return g;
}

/// Separable Gaussian filtering, valid region only.
Image filter(const Image& a, const std::array<double, kWindow>& g) {
    Image tmp{a.w - kWindow + 1, a.h, {}};
    tmp.px.resize(tmp.w * tmp.h);
    for (std::size_t y = 0; y < a.h; ++y)
        for (std::size_t x = 0; x < tmp.w; ++x) {
            double s = 0.0;
            for (std::size_t k = 0; k < kWindow; ++k) s += g[k] * a(x + k, y);
            tmp.px[y * tmp.w + x] = s;
        }
    Image out{tmp.w, a.h - kWindow + 1, {}};
    out.px.resize(out.w * out.h);
    for (std::size_t y = 0; y < out.h; ++y)
        for (std::size_t x = 0; x < out.w; ++x) {
            double s = 0.0;
            for (std::size_t k = 0; k < kWindow; ++k) s += g[k] * tmp(x, y + k);
            out.px[y * out.w + x] = s;
        }
    return out;
}

Image product(const Image& a, const Image& b) {
    Image out{a.w, a.h, std::vector<double>(a.px.size())};
    for (std::size_t i = 0; i < a.px.size(); ++i) out.px[i] = a.px[i] * b.px[i];
    return out;
}

/// Mean SSIM and mean contrast-structure term at one scale.
std::pair<double, double> ssim_terms(const Image& a, const Image& b, const std::array<double, kWindow>& g) {
    const double c1 = (0.01 * 255.0) * (0.01 * 255.0);
    const double c2 = (0.03 * 255.0) * (0.03 * 255.0);
    const Image mu_a = filter(a, g), mu_b = filter(b, g);
    const Image aa = filter(product(a, a), g), bb = filter(product(b, b), g), ab = filter(product(a, b), g);
    double ssim = 0.0, cs = 0.0;
    for (std::size_t i = 0; i < mu_a.px.size(); ++i) {
        const double ma = mu_a.px[i], mb = mu_b.px[i];
        const double va = aa.px[i] - ma * ma, vb = bb.px[i] - mb * mb, cov = ab.px[i] - ma * mb;
        const double c = (2.0 * cov + c2) / (va + vb + c2);
        cs += c;
        ssim += c * (2.0 * (ma * mb) + c1) / (ma * ma + mb * mb + c1);
    }
    const double n = double(mu_a.px.size());
    return {ssim / n, cs / n};
}

} // namespace

std::size_t ms_ssim_scales(std::size_t width, std::size_t height) {
    const std::size_t side = std::min(width, height);
    std::size_t scales = 0;
    while (scales < 5 && side >= (kWindow << scales)) ++scales;
    return scales;
}

double ms_ssim(const PlaneView& ref, const PlaneView& test) {
    if (ref.width != test.width || ref.height != test.height) throw InvalidArgument("ms_ssim: planes differ in size");
    const std::size_t scales = ms_ssim_scales(ref.width, ref.height);
    if (scales == 0) throw InvalidArgument("ms_ssim: plane smaller than the 11x11 window");
    double weight_sum = 0.0;
    for (std::size_t s = 0; s < scales; ++s) weight_sum += kWeights[s];

    const auto g = gaussian_window();
    Image a = to_image(ref), b = to_image(test);
    double result = 1.0;
    for (std::size_t s = 0; s < scales; ++s) {
        const auto [ssim, cs] = ssim_terms(a, b, g);
        const double term = s + 1 == scales ? ssim : cs;
        result *= std::pow(std::max(term, 0.0), kWeights[s] / weight_sum);
        if (s + 1 < scales) {
            a = downsample(a);
            b = downsample(b);
        }
    }
    return result;
}

double ms_ssim_db(double m) {
    return -10.0 * std::log10(1.0 - m);
}

void RdCurve::validate() const {
    const std::string what = label.empty() ? "RD curve" : "RD curve '" + label + "'";
    if (points.size() < 4) throw InvalidArgument(what + ": needs at least 4 points");
    for (std::size_t i = 0; i < points.size(); ++i) {
        const auto& p = points[i];
        if (!(p.bitrate > 0.0) || !std::isfinite(p.bitrate)) throw InvalidArgument(what + ": bitrate must be positive");
        if (!std::isfinite(p.quality)) throw InvalidArgument(what + ": quality must be finite");
        if (i && !(p.bitrate > points[i - 1].bitrate && p.quality > points[i - 1].quality))
            throw InvalidArgument(what + ": bitrate and quality must both increase strictly");
    }
}

Pchip::Pchip(std::vector<double> x, std::vector<double> y) : x_(std::move(x)), y_(std::move(y)) {
    const std::size_t n = x_.size();
    if (n < 2 || y_.size() != n) throw InvalidArgument("Pchip: needs at least two (x, y) pairs");
    std::vector<double> h(n - 1), m(n - 1);
    for (std::size_t k = 0; k + 1 < n; ++k) {
        h[k] = x_[k + 1] - x_[k];
        if (!(h[k] > 0.0)) throw InvalidArgument("Pchip: x must increase strictly");
        m[k] = (y_[k + 1] - y_[k]) / h[k];
    }
    d_.assign(n, 0.0);
    if (n == 2) {
        d_[0] = d_[1] = m[0];
        return;
    }
    auto sign = [](double v) { return (v > 0.0) - (v < 0.0); };
    for (std::size_t k = 1; k + 1 < n; ++k) {
        if (m[k - 1] == 0.0 || m[k] == 0.0 || sign(m[k - 1]) != sign(m[k])) continue;
        const double w1 = 2.0 * h[k] + h[k - 1];
        const double w2 = h[k] + 2.0 * h[k - 1];
        d_[k] = (w1 + w2) / (w1 / m[k - 1] + w2 / m[k]);
    }
    auto edge = [&](double h0, double h1, double m0, double m1) {
        double d = ((2.0 * h0 + h1) * m0 - h0 * m1) / (h0 + h1);
        if (sign(d) != sign(m0)) return 0.0;
        if (sign(m0) != sign(m1) && std::abs(d) > 3.0 * std::abs(m0)) return 3.0 * m0;
        return d;
    };
    d_[0] = edge(h[0], h[1], m[0], m[1]);
    d_[n - 1] = edge(h[n - 2], h[n - 3], m[n - 2], m[n - 3]);
}

std::size_t Pchip::segment(double x) const {
    auto it = std::upper_bound(x_.begin(), x_.end(), x);
    std::size_t k = it == x_.begin() ? 0 : std::size_t(it - x_.begin()) - 1;
    return std::min(k, x_.size() - 2);
}

double Pchip::operator()(double x) const {
    const std::size_t k = segment(x);
    const double h = x_[k + 1] - x_[k];
    const double m = (y_[k + 1] - y_[k]) / h;
    const double s = x - x_[k];
    const double c2 = (3.0 * m - 2.0 * d_[k] - d_[k + 1]) / h;
    const double c3 = (d_[k] + d_[k + 1] - 2.0 * m) / (h * h);
    return y_[k] + s * (d_[k] + s * (c2 + s * c3));
}

double Pchip::integral(double a, double b) const {
    if (a > b) return -integral(b, a);
    if (a < x_.front() || b > x_.back()) throw DomainError("Pchip::integral: interval outside the knot range");
    double total = 0.0;
    for (std::size_t k = segment(a); k + 1 < x_.size() && x_[k] < b; ++k) {
        const double lo = std::max(a, x_[k]) - x_[k];
        const double hi = std::min(b, x_[k + 1]) - x_[k];
        if (hi <= lo) continue;
        const double h = x_[k + 1] - x_[k];
        const double m = (y_[k + 1] - y_[k]) / h;
        const double c0 = y_[k], c1 = d_[k];
        const double c2 = (3.0 * m - 2.0 * d_[k] - d_[k + 1]) / h;
        const double c3 = (d_[k] + d_[k + 1] - 2.0 * m) / (h * h);
        auto anti = [&](double s) { return s * (c0 + s * (c1 / 2.0 + s * (c2 / 3.0 + s * c3 / 4.0))); };
        total += anti(hi) - anti(lo);
    }
    return total;
}

namespace {

Pchip log_rate_over_quality(const RdCurve& c) {
    std::vector<double> q, r;
    for (const auto& p : c.points) {
        q.push_back(p.quality);
        r.push_back(std::log10(p.bitrate));
    }
    return Pchip(std::move(q), std::move(r));
}

} // namespace

double bd_rate(const RdCurve& anchor, const RdCurve& test) {
    anchor.validate();
    test.validate();
    const Pchip a = log_rate_over_quality(anchor);
    const Pchip t = log_rate_over_quality(test);
    const double lo = std::max(a.x_min(), t.x_min());
    const double hi = std::min(a.x_max(), t.x_max());
    if (!(hi > lo)) throw DomainError("bd_rate: the quality ranges of the two curves do not overlap");
    const double avg = (t.integral(lo, hi) - a.integral(lo, hi)) / (hi - lo);
    return (std::pow(10.0, avg) - 1.0) * 100.0;
}

RdCurve read_rd_curve(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open '" + path + "'");
    RdCurve curve;
    curve.label = path;
    std::string line;
    std::size_t lineno = 0;
    bool header = false;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.find_first_not_of(" \t") == std::string::npos) continue;
        if (!header) {
            if (line != "bitrate,quality")
                throw FormatError("'" + path + "' line " + std::to_string(lineno) + ": expected header bitrate,quality");
            header = true;
            continue;
        }
        const auto comma = line.find(',');
        if (comma == std::string::npos || line.find(',', comma + 1) != std::string::npos)
            throw FormatError("'" + path + "' line " + std::to_string(lineno) + ": expected two fields");
        try {
            curve.points.push_back({detail::parse_double("bitrate", line.substr(0, comma)),
                                    detail::parse_double("quality", line.substr(comma + 1))});
        } catch (const FormatError& e) {
            throw FormatError("'" + path + "' line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    if (!header) throw FormatError("'" + path + "' is empty");
    return curve;
}

namespace {

struct Metrics {
    std::array<double, 3> psnr_lossy{}, psnr_enhanced{}, ssim_lossy{}, ssim_enhanced{};
};

Metrics measure_record(const ManifestRecord& r, const FrameEnhancer& enhance, const EvalOptions& options) {
    const FrameSource lossy(r.lossy_path, r.width, r.height);
    const FrameSource lossless(r.lossless_path, r.width, r.height);
    if (lossy.frame_count() != lossless.frame_count())
        throw FormatError("lossy and lossless frame counts differ (" + std::to_string(lossy.frame_count()) + " vs " +
                          std::to_string(lossless.frame_count()) + ")");
    std::size_t frames = lossy.frame_count();
    if (options.max_frames) frames = std::min(frames, options.max_frames);
    if (frames == 0) throw FormatError("'" + r.lossy_path + "' holds no complete frame");
    Metrics m;
    for (std::size_t f = 0; f < frames; ++f) {
        const Yuv420Frame ref = lossless.read(f);
        const Yuv420Frame low = lossy.read(f);
        const Yuv420Frame out = enhance(low, r.qp);
        if (out.width != ref.width || out.height != ref.height)
            throw InvalidArgument("enhancer changed the frame size");
        for (std::size_t c = 0; c < 3; ++c) {
            const auto pr = plane_of(ref, c), pl = plane_of(low, c), pe = plane_of(out, c);
            m.psnr_lossy[c] += psnr(pr.samples, pl.samples);
            m.psnr_enhanced[c] += psnr(pr.samples, pe.samples);
            m.ssim_lossy[c] += ms_ssim(pr, pl);
            m.ssim_enhanced[c] += ms_ssim(pr, pe);
        }
    }
    for (std::size_t c = 0; c < 3; ++c) {
        m.psnr_lossy[c] /= double(frames);
        m.psnr_enhanced[c] /= double(frames);
        m.ssim_lossy[c] /= double(frames);
        m.ssim_enhanced[c] /= double(frames);
    }
    return m;
}

double try_bd_rate(const RdCurve& anchor, const RdCurve& test) {
    try {
        return bd_rate(anchor, test);
    } catch (const InvalidArgument&) {
    } catch (const DomainError&) {
    }
    return std::numeric_limits<double>::quiet_NaN();
}

std::string sequence_name(const std::string& path) {
    return std::filesystem::path(path).stem().string();
}

} // namespace

EvalReport evaluate_sequences(const std::vector<ManifestRecord>& records, const FrameEnhancer& enhance,
                              const EvalOptions& options) {
    if (records.empty()) throw InvalidArgument("evaluate_sequences: no records");
    EvalReport report;
    // Sequence ids are file stems, falling back to full paths when stems collide.
    std::map<std::string, std::string> stem_owner;
    bool collide = false;
    for (const auto& r : records) {
        auto [it, fresh] = stem_owner.emplace(sequence_name(r.lossless_path), r.lossless_path);
        if (!fresh && it->second != r.lossless_path) collide = true;
    }
    auto id_of = [&](const ManifestRecord& r) { return collide ? r.lossless_path : sequence_name(r.lossless_path); };

    std::vector<std::string> order;
    std::map<std::string, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < records.size(); ++i) {
        const auto& r = records[i];
        if (!r.bitrate_kbps)
            throw FormatError("manifest line " + std::to_string(r.line) + ": missing bitrate field");
        Metrics m;
        try {
            m = measure_record(r, enhance, options);
        } catch (const Error& e) {
            throw FormatError("manifest line " + std::to_string(r.line) + ": " + e.what());
        }
        const std::string id = id_of(r);
        if (!groups.count(id)) order.push_back(id);
        for (std::size_t c = 0; c < 3; ++c) {
            groups[id].push_back(report.rows.size());
            report.rows.push_back({id, r.qp, *r.bitrate_kbps, c, m.psnr_lossy[c], m.psnr_enhanced[c], m.ssim_lossy[c],
                                   m.ssim_enhanced[c]});
        }
    }

    std::array<double, 3> sum_psnr{}, sum_ssim{};
    std::array<std::size_t, 3> n_psnr{}, n_ssim{};
    for (const auto& id : order) {
        SequenceBdRate bd{id, {}, {}};
        for (std::size_t c = 0; c < 3; ++c) {
            std::vector<const EvalRow*> rows;
            for (std::size_t k : groups[id])
                if (report.rows[k].component == c) rows.push_back(&report.rows[k]);
            std::sort(rows.begin(), rows.end(), [](auto* a, auto* b) { return a->bitrate < b->bitrate; });
            RdCurve pl{{}, id + " lossy"}, pe{{}, id + " enhanced"}, sl{{}, id + " lossy"}, se{{}, id + " enhanced"};
            for (const auto* row : rows) {
                pl.points.push_back({row->bitrate, row->psnr_lossy});
                pe.points.push_back({row->bitrate, row->psnr_enhanced});
                sl.points.push_back({row->bitrate, ms_ssim_db(row->msssim_lossy)});
                se.points.push_back({row->bitrate, ms_ssim_db(row->msssim_enhanced)});
            }
            bd.psnr[c] = try_bd_rate(pl, pe);
            bd.msssim[c] = try_bd_rate(sl, se);
            if (std::isfinite(bd.psnr[c])) sum_psnr[c] += bd.psnr[c], ++n_psnr[c];
            if (std::isfinite(bd.msssim[c])) sum_ssim[c] += bd.msssim[c], ++n_ssim[c];
        }
        report.per_sequence.push_back(bd);
    }
    const double nan = std::numeric_limits<double>::quiet_NaN();
    for (std::size_t c = 0; c < 3; ++c) {
        report.bd_rate_psnr[c] = n_psnr[c] ? sum_psnr[c] / double(n_psnr[c]) : nan;
        report.bd_rate_msssim[c] = n_ssim[c] ? sum_ssim[c] / double(n_ssim[c]) : nan;
    }
    return report;
}

namespace {

std::string num(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

std::ofstream open_csv(const std::filesystem::path& p) {
    std::ofstream f(p, std::ios::trunc);
    if (!f) throw IoError("cannot write '" + p.string() + "'");
    return f;
}

} // namespace

void write_eval_report(const EvalReport& report, const std::string& dir) {
    std::filesystem::create_directories(dir);
    const std::filesystem::path d(dir);
    {
        auto f = open_csv(d / "report.csv");
        f << "sequence,qp,component,psnr_lossy,psnr_enhanced,msssim_lossy,msssim_enhanced\n";
        for (const auto& r : report.rows)
            f << r.sequence << ',' << r.qp << ',' << component_name(r.component) << ',' << num(r.psnr_lossy) << ','
              << num(r.psnr_enhanced) << ',' << num(r.msssim_lossy) << ',' << num(r.msssim_enhanced) << '\n';
        if (!f) throw IoError("write to report.csv failed");
    }
    {
        auto f = open_csv(d / "bd_rate.csv");
        f << "component,bd_rate_psnr_percent,bd_rate_msssim_percent\n";
        for (std::size_t c = 0; c < 3; ++c)
            f << component_name(c) << ',' << num(report.bd_rate_psnr[c]) << ',' << num(report.bd_rate_msssim[c]) << '\n';
    }
    {
        auto f = open_csv(d / "bd_rate_per_sequence.csv");
        f << "sequence,component,bd_rate_psnr_percent,bd_rate_msssim_percent\n";
        for (const auto& s : report.per_sequence)
            for (std::size_t c = 0; c < 3; ++c)
                f << s.sequence << ',' << component_name(c) << ',' << num(s.psnr[c]) << ',' << num(s.msssim[c]) << '\n';
    }
}

} // namespace schvpp
