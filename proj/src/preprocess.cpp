#include "spectraseg/preprocess.hpp"

#include <algorithm>
#include <cmath>

#include "spectraseg/imgops.hpp"

namespace spectraseg {

NormalizeResult l1_normalize(const Datacube& cube) {
    for (float v : cube.data)
        if (!std::isfinite(v) || v < 0.0f)
            throw ConfigError("l1_normalize: input must be finite and non-negative");

    NormalizeResult out;
    out.cube = cube;
    const int C = cube.channels;
    for (size_t p = 0; p < cube.pixel_count(); ++p) {
        const float* src = cube.data.data() + p * C;
        double sum = 0.0;
        for (int c = 0; c < C; ++c) sum += src[c];
        if (sum == 0.0) {
            ++out.zero_pixels;
            continue;
        }
        float* dst = out.cube.data.data() + p * C;
        for (int c = 0; c < C; ++c) dst[c] = static_cast<float>(src[c] / sum);
    }
    return out;
}

Datacube median_filter_5x5x3(const Datacube& cube) {
    if (cube.width < 1 || cube.height < 1 || cube.channels < 1)
        throw ConfigError("median_filter: empty cube");

    Datacube out = cube;
    const int W = cube.width, H = cube.height, C = cube.channels;
    float window[75];
    for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
            for (int c = 0; c < C; ++c) {
                int n = 0;
                for (int dy = -2; dy <= 2; ++dy) {
                    int yy = reflect_index(y + dy, H);
                    for (int dx = -2; dx <= 2; ++dx) {
                        int xx = reflect_index(x + dx, W);
                        const float* px = cube.pixel(xx, yy);
                        for (int dc = -1; dc <= 1; ++dc) window[n++] = px[reflect_index(c + dc, C)];
                    }
                }
                std::nth_element(window, window + 37, window + 75);
                out.at(x, y, c) = window[37];
            }
        }
    }
    return out;
}

NormalizeResult preprocess_hsi(const Datacube& cube, PreprocessOrder order) {
    if (order == PreprocessOrder::NormalizeThenFilter) {
        NormalizeResult r = l1_normalize(cube);
        r.cube = median_filter_5x5x3(r.cube);
        return r;
    }
    return l1_normalize(median_filter_5x5x3(cube));
}

} // namespace spectraseg
