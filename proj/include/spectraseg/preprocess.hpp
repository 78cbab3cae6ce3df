#pragma once

#include <cstddef>

#include "spectraseg/cube.hpp"

namespace spectraseg {

struct NormalizeResult {
    Datacube cube;
    size_t zero_pixels = 0; // spectra that summed to zero and were left as-is
};

// Scales every pixel spectrum to unit l1 mass. All-zero spectra are kept
// (not NaN-poisoned) and counted. Input must be finite and non-negative.
NormalizeResult l1_normalize(const Datacube& cube);

// 5x5x3 (w,h,c) median filter with reflect padding (abc|cb, border sample
// not repeated). Output value is always drawn from the input neighborhood.
Datacube median_filter_5x5x3(const Datacube& cube);

enum class PreprocessOrder {
    NormalizeThenFilter, // default pipeline
    FilterThenNormalize,
};

// Full HSI preprocessing chain. RGB/TPI cubes are intentionally not run
// through this; callers feed them to models untouched.
NormalizeResult preprocess_hsi(const Datacube& cube,
                               PreprocessOrder order = PreprocessOrder::NormalizeThenFilter);

} // namespace spectraseg
