#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

namespace spectraseg {

// Reflect index into [0, n) without repeating the border sample (abc|cb).
// Handles windows wider than the extent by folding repeatedly.
inline int reflect_index(int i, int n) {
    if (n == 1) return 0;
    int period = 2 * n - 2;
    i = ((i % period) + period) % period;
    return i < n ? i : period - i;
}

// Separable Gaussian blur of a single plane, reflect border, radius 3*sigma.
void gaussian_blur_plane(const double* src, double* dst, int width, int height, double sigma);

// 1-D Gaussian kernel, normalized to sum 1; radius = ceil(3*sigma).
std::vector<double> gaussian_kernel(double sigma);

// Half-pixel-center coordinate of an output sample mapped into the source
// axis (the align_corners=false convention).
inline double resize_src_coord(int dst_i, int dst_n, int src_n) {
    return (static_cast<double>(dst_i) + 0.5) * static_cast<double>(src_n) / static_cast<double>(dst_n) - 0.5;
}

struct BilinearTap {
    int lo;
    int hi;
    double w_hi; // weight of the hi sample; lo gets 1 - w_hi
};

inline BilinearTap bilinear_tap(double coord, int n) {
    double c = std::clamp(coord, 0.0, static_cast<double>(n - 1));
    int lo = static_cast<int>(std::floor(c));
    int hi = std::min(lo + 1, n - 1);
    return {lo, hi, c - lo};
}

} // namespace spectraseg
