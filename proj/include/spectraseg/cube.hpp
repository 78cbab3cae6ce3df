#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "spectraseg/common.hpp"

namespace spectraseg {

enum class Modality { HSI, TPI, RGB };

const char* modality_name(Modality m);
Modality modality_from_name(const std::string& name);

// Number of spectral channels delivered by the reference camera for HSI.
// Synthetic cubes may carry fewer channels; RGB/TPI widths are structural.
inline constexpr int kCameraHsiChannels = 100;
inline constexpr int kTpiChannels = 4;
inline constexpr int kRgbChannels = 3;

inline constexpr uint8_t kIgnoreLabel = 255;

// Reflectance volume. Layout: height-major, width-minor, channel-innermost,
// i.e. data[(y * width + x) * channels + c]. Values are stored as float32 to
// match the on-disk payload bit-exactly.
struct Datacube {
    int width = 0;
    int height = 0;
    int channels = 0;
    Modality modality = Modality::HSI;
    std::vector<float> wavelengths; // nm, one per channel
    std::vector<float> data;

    Datacube() = default;
    Datacube(int w, int h, int c, Modality m);

    float& at(int x, int y, int ch) { return data[(static_cast<size_t>(y) * width + x) * channels + ch]; }
    float at(int x, int y, int ch) const { return data[(static_cast<size_t>(y) * width + x) * channels + ch]; }

    const float* pixel(int x, int y) const { return &data[(static_cast<size_t>(y) * width + x) * channels]; }
    float* pixel(int x, int y) { return &data[(static_cast<size_t>(y) * width + x) * channels]; }

    size_t pixel_count() const { return static_cast<size_t>(width) * height; }

    // Throws ConfigError when a structural invariant is broken: size
    // mismatch, non-finite or negative values, wrong channel count for
    // RGB/TPI, or a non-increasing / out-of-range wavelength axis for HSI.
    void validate() const;
};

// Per-pixel class ids in [0, O-1], or kIgnoreLabel for unsure pixels.
struct LabelMap {
    int width = 0;
    int height = 0;
    std::vector<uint8_t> labels;

    LabelMap() = default;
    LabelMap(int w, int h, uint8_t fill = 0)
        : width(w), height(h), labels(static_cast<size_t>(w) * h, fill) {}

    uint8_t& at(int x, int y) { return labels[static_cast<size_t>(y) * width + x]; }
    uint8_t at(int x, int y) const { return labels[static_cast<size_t>(y) * width + x]; }

    void validate(int num_classes) const;
};

struct ClassInfo {
    int id = 0;
    std::string name;
    std::array<uint8_t, 3> color{0, 0, 0};
};

struct ClassTable {
    std::vector<ClassInfo> classes;

    int size() const { return static_cast<int>(classes.size()); }
    void validate() const; // contiguous ids from 0, unique names
};

// One acquisition: paths are stored relative to the index file.
struct ImageRecord {
    std::string name;
    std::string hsi_path;
    std::string tpi_path;
    std::string rgb_path;
    std::string label_path;

    const std::string& cube_path(Modality m) const;
};

struct SubjectRecord {
    std::string id;
    std::vector<ImageRecord> images;
};

struct DatasetIndex {
    std::filesystem::path root; // directory the relative paths resolve against
    ClassTable classes;
    std::vector<SubjectRecord> subjects;

    size_t image_count() const;
    const SubjectRecord* find_subject(const std::string& id) const;
    std::filesystem::path resolve(const std::string& rel) const { return root / rel; }

    // Checks subject-id uniqueness and that every referenced file exists and
    // has a parseable header.
    void validate() const;
};

// --- file I/O -------------------------------------------------------------
//
// Cube files: one JSON header line {"width","height","channels","modality",
// "wavelengths"} terminated by '\n', followed by width*height*channels
// little-endian float32 values (layout as in Datacube::data).
//
// Map files share the header minus wavelengths plus a "dtype" field:
// "uint8" for label maps (raw bytes) and "int32" for segment-id maps
// (little-endian int32), same spatial order.

void write_cube(const Datacube& cube, const std::filesystem::path& path);
Datacube read_cube(const std::filesystem::path& path);

void write_labels(const LabelMap& map, const std::filesystem::path& path);
LabelMap read_labels(const std::filesystem::path& path);

struct SegmentMap {
    int width = 0;
    int height = 0;
    std::vector<int32_t> ids;

    int32_t& at(int x, int y) { return ids[static_cast<size_t>(y) * width + x]; }
    int32_t at(int x, int y) const { return ids[static_cast<size_t>(y) * width + x]; }
};

void write_segment_map(const SegmentMap& map, const std::filesystem::path& path);
SegmentMap read_segment_map(const std::filesystem::path& path);

void write_index(const DatasetIndex& index, const std::filesystem::path& path);
DatasetIndex read_index(const std::filesystem::path& path);

// Per-class pixel totals over the labels of the given subjects, excluding
// ignore pixels. Throws ConfigError on an empty split.
std::vector<int64_t> class_pixel_counts(const DatasetIndex& index,
                                        const std::vector<std::string>& subject_ids);

} // namespace spectraseg
