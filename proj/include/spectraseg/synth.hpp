#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "spectraseg/cube.hpp"

namespace spectraseg {

struct GaussianPeak {
    double center_nm = 750.0;
    double sigma_nm = 60.0;
    double amplitude = 1.0;
};

// Reflectance profile of one tissue class: a low baseline plus 1..3 peaks.
struct ClassSpectrum {
    double baseline = 0.15;
    std::vector<GaussianPeak> peaks;

    double eval(double lambda_nm) const;
};

// Deterministic well-separated default profiles for `classes` classes.
std::vector<ClassSpectrum> default_class_spectra(int classes, uint64_t seed);

struct SynthConfig {
    int subjects = 8;
    int images_per_subject = 6;
    int classes = 6;
    int width = 64;
    int height = 64;
    int channels = 16; // spectral channels of the generated HSI cubes

    // Empty -> default_class_spectra(classes, seed).
    std::vector<ClassSpectrum> class_spectra;

    // Per-subject multiplicative amplitude jitter and additive spectral tilt,
    // both drawn in [-scale, scale]. 0 disables inter-subject variation.
    double subject_shift_scale = 0.05;

    double noise_std = 0.01;
    // Correlation length (px) of the additive noise field; 0 -> iid noise.
    double noise_sigma_px = 0.0;

    // Number of geometry seeds per image (uniform in [blob_min, blob_max]).
    // Raised to `classes` when smaller so every class appears in every image.
    int blob_min = 8;
    int blob_max = 14;

    // Half-width (px) of an IGNORE band painted along class boundaries.
    int unsure_border = 0;

    uint64_t seed = 0;

    void validate() const; // throws ConfigError
};

// Generates the full paired dataset (HSI + TPI + RGB cubes and label maps
// per image, plus index.json) under out_dir and returns the loaded index.
// Output is a pure function of the config; re-running overwrites in place.
DatasetIndex generate_synthetic_dataset(const SynthConfig& cfg, const std::filesystem::path& out_dir);

// In-memory generation of a single image, used by the generator and handy in
// tests. `subject` and `image` select the deterministic substream.
struct SynthImage {
    Datacube hsi;
    Datacube tpi;
    Datacube rgb;
    LabelMap labels;
};
SynthImage generate_synthetic_image(const SynthConfig& cfg, int subject, int image);

} // namespace spectraseg
