#pragma once

// Independent re-implementations used as oracles for the metrics.

#include <algorithm>
#include <cmath>
#include <vector>

#include "schvpp/evaluation.hpp"

namespace schvpp::testing {

// Direct-formula MS-SSIM: 2D Gaussian weights, per-window moments about the
// window mean, 2x2 mean pooling between scales.
inline double direct_ms_ssim(std::vector<double> a, std::vector<double> b, std::size_t w, std::size_t h, std::size_t scales) {
    const double weights[5] = {0.0448, 0.2856, 0.3001, 0.2363, 0.1333};
    double wsum = 0.0;
    for (std::size_t s = 0; s < scales; ++s) wsum += weights[s];
    double kernel[11][11], ksum = 0.0;
    for (int i = 0; i < 11; ++i)
        for (int j = 0; j < 11; ++j) {
            kernel[i][j] = std::exp(-((i - 5) * (i - 5) + (j - 5) * (j - 5)) / (2.0 * 1.5 * 1.5));
            ksum += kernel[i][j];
        }
    const double c1 = std::pow(0.01 * 255, 2), c2 = std::pow(0.03 * 255, 2);
    double result = 1.0;
    for (std::size_t s = 0; s < scales; ++s) {
        double cs_mean = 0.0, ssim_mean = 0.0;
        std::size_t count = 0;
        for (std::size_t y = 0; y + 11 <= h; ++y)
            for (std::size_t x = 0; x + 11 <= w; ++x) {
                double ma = 0.0, mb = 0.0;
                for (int i = 0; i < 11; ++i)
                    for (int j = 0; j < 11; ++j) {
                        const double k = kernel[i][j] / ksum;
                        ma += k * a[(y + i) * w + x + j];
                        mb += k * b[(y + i) * w + x + j];
                    }
                double va = 0.0, vb = 0.0, cov = 0.0;
                for (int i = 0; i < 11; ++i)
                    for (int j = 0; j < 11; ++j) {
                        const double k = kernel[i][j] / ksum;
                        const double da = a[(y + i) * w + x + j] - ma, db = b[(y + i) * w + x + j] - mb;
                        va += k * da * da;
                        vb += k * db * db;
                        cov += k * da * db;
                    }
                const double cs = (2 * cov + c2) / (va + vb + c2);
                cs_mean += cs;
                ssim_mean += cs * (2 * ma * mb + c1) / (ma * ma + mb * mb + c1);
                ++count;
            }
        cs_mean /= double(count);
        ssim_mean /= double(count);
        result *= std::pow(std::max(s + 1 == scales ? ssim_mean : cs_mean, 0.0), weights[s] / wsum);
        std::vector<double> na((w / 2) * (h / 2)), nb(na.size());
        for (std::size_t y = 0; y < h / 2; ++y)
            for (std::size_t x = 0; x < w / 2; ++x) {
                const std::size_t i = 2 * y * w + 2 * x;
                na[y * (w / 2) + x] = (a[i] + a[i + 1] + a[i + w] + a[i + w + 1]) / 4.0;
                nb[y * (w / 2) + x] = (b[i] + b[i + 1] + b[i + w] + b[i + w + 1]) / 4.0;
            }
        a = std::move(na);
        b = std::move(nb);
        w /= 2;
        h /= 2;
    }
    return result;
}

/// Trapezoid rule over n intervals of the two log-rate interpolants.
inline double trapezoid_bd_rate(const RdCurve& anchor, const RdCurve& test, std::size_t n) {
    auto interp = [](const RdCurve& c) {
        std::vector<double> q, r;
        for (const auto& p : c.points) {
            q.push_back(p.quality);
            r.push_back(std::log10(p.bitrate));
        }
        return Pchip(q, r);
    };
    const Pchip a = interp(anchor), t = interp(test);
    const double lo = std::max(a.x_min(), t.x_min()), hi = std::min(a.x_max(), t.x_max());
    const double step = (hi - lo) / double(n);
    double sum = 0.0;
    for (std::size_t i = 0; i <= n; ++i) {
        const double q = lo + step * double(i);
        const double d = t(q) - a(q);
        sum += (i == 0 || i == n) ? d / 2 : d;
    }
    return (std::pow(10.0, sum * step / (hi - lo)) - 1.0) * 100.0;
}

} // namespace schvpp::testing
