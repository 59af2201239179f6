#pragma once

// Evaluation metrics: windowed SSIM and Pearson correlation.

#include <cmath>

#include "mcdm/tensor.hpp"

namespace mcdm {

// Windowed SSIM: 8x8 windows, stride 4, C1 = 0.01^2, C2 = 0.03^2, population
// moments, mean over windows. Inputs are same-shape frames valued in [0, 1].
inline double ssim(const Tensor& x, const Tensor& y) {
    if (x.shape() != y.shape())
        throw ShapeError("ssim: shape " + shape_str(x.shape()) + " vs " + shape_str(y.shape()));
    if (x.ndim() != 2) throw ShapeError("ssim expects 2-d frames");
    int64_t H = x.dim(0), W = x.dim(1);
    const int64_t win = 8, stride = 4;
    if (H < win || W < win) throw ShapeError("ssim: frame smaller than the 8x8 window");
    const double C1 = 1e-4, C2 = 9e-4;
    const auto xd = x.data(), yd = y.data();

    double acc = 0.0;
    int64_t count = 0;
    for (int64_t y0 = 0; y0 + win <= H; y0 += stride)
        for (int64_t x0 = 0; x0 + win <= W; x0 += stride) {
            double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
            for (int64_t i = 0; i < win; ++i)
                for (int64_t j = 0; j < win; ++j) {
                    double a = xd[static_cast<size_t>((y0 + i) * W + x0 + j)];
                    double b = yd[static_cast<size_t>((y0 + i) * W + x0 + j)];
                    sx += a;
                    sy += b;
                    sxx += a * a;
                    syy += b * b;
                    sxy += a * b;
                }
            double n = static_cast<double>(win * win);
            double mx = sx / n, my = sy / n;
            double vx = sxx / n - mx * mx;
            double vy = syy / n - my * my;
            double cov = sxy / n - mx * my;
            acc += ((2.0 * mx * my + C1) * (2.0 * cov + C2)) /
                   ((mx * mx + my * my + C1) * (vx + vy + C2));
            ++count;
        }
    return acc / static_cast<double>(count);
}

inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.size() < 2)
        throw ShapeError("pearson: series length mismatch");
    double n = static_cast<double>(x.size());
    double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
    for (size_t i = 0; i < x.size(); ++i) {
        sx += x[i];
        sy += y[i];
        sxx += x[i] * x[i];
        syy += y[i] * y[i];
        sxy += x[i] * y[i];
    }
    double vx = sxx / n - (sx / n) * (sx / n);
    double vy = syy / n - (sy / n) * (sy / n);
    if (vx < 1e-12 || vy < 1e-12) throw GradError("degenerate correlation");
    return (sxy / n - (sx / n) * (sy / n)) / std::sqrt(vx * vy);
}

}  // namespace mcdm
