#pragma once

#include <vector>

#include "spectraseg/cube.hpp"

namespace spectraseg {

struct SegmentStats {
    int pixels = 0;
    int x0 = 0, y0 = 0, x1 = -1, y1 = -1; // inclusive bounding box
    double cx = 0.0, cy = 0.0;            // centroid
};

struct SuperpixelDecomposition {
    SegmentMap map; // segment id per pixel, ids contiguous from 0
    std::vector<SegmentStats> segments;
    int requested = 0; // seeds asked for; fewer seeds fit on tiny images

    int count() const { return static_cast<int>(segments.size()); }
};

struct SlicoOptions {
    int n_segments = 1000;
    int iterations = 10;
    double smooth_sigma = 3.0; // per-channel Gaussian before clustering
    bool use_lab = true;       // cluster in CIELAB (D65); false: scaled RGB
};

// SLIC with per-cluster adaptive compactness (SLICO): Gaussian smoothing,
// CIELAB conversion, grid seeding, 10 assignment/update rounds, then
// connectivity enforcement (fragments below (area/n)/4 merge into the
// neighbor with the longest shared border). Deterministic for fixed input.
SuperpixelDecomposition slico(const Datacube& rgb, const SlicoOptions& opts = {});

struct FuzzyLabel {
    std::vector<double> freq; // length O, relative class frequencies
    bool empty = false;       // segment had no non-IGNORE pixel

    int argmax() const;
};

// Per-segment class frequency vectors over non-IGNORE pixels.
std::vector<FuzzyLabel> fuzzy_labels(const SuperpixelDecomposition& dec, const LabelMap& labels,
                                     int num_classes);

// Rebuilds a decomposition from a bare segment map (e.g. read from disk or
// geometrically warped): ids are compacted to a contiguous 0..K-1 range in
// first-appearance raster order, stats recomputed. Negative entries mean
// "no segment" and survive as-is; their pixels belong to no segment.
SuperpixelDecomposition decomposition_from_map(SegmentMap map);

// Masked bounding-box crop of one segment, zero outside the segment, resized
// bilinearly (half-pixel centers) to out_size x out_size; channels untouched.
Datacube extract_superpixel_cube(const Datacube& cube, const SuperpixelDecomposition& dec, int segment_id,
                                 int out_size = 32);

// Annotation-derived upper bound: every pixel takes its segment's modal
// non-IGNORE class (ties -> lowest id). Pixels whose reference label is
// IGNORE stay IGNORE, as do all-IGNORE segments.
LabelMap superpixel_performance_limit(const SuperpixelDecomposition& dec, const LabelMap& labels);

} // namespace spectraseg
