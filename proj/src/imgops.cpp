#include "spectraseg/imgops.hpp"

namespace spectraseg {

std::vector<double> gaussian_kernel(double sigma) {
    int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> k(2 * radius + 1);
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        double v = std::exp(-0.5 * (i / sigma) * (i / sigma));
        k[i + radius] = v;
        sum += v;
    }
    for (double& v : k) v /= sum;
    return k;
}

void gaussian_blur_plane(const double* src, double* dst, int width, int height, double sigma) {
    if (sigma <= 0.0) {
        std::copy(src, src + static_cast<size_t>(width) * height, dst);
        return;
    }
    std::vector<double> k = gaussian_kernel(sigma);
    int radius = static_cast<int>(k.size() / 2);
    std::vector<double> tmp(static_cast<size_t>(width) * height);
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i)
                acc += k[i + radius] * src[static_cast<size_t>(y) * width + reflect_index(x + i, width)];
            tmp[static_cast<size_t>(y) * width + x] = acc;
        }
    }
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i)
                acc += k[i + radius] * tmp[static_cast<size_t>(reflect_index(y + i, height)) * width + x];
            dst[static_cast<size_t>(y) * width + x] = acc;
        }
    }
}

} // namespace spectraseg
