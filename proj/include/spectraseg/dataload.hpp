#pragma once

#include <condition_variable>
#include <filesystem>
#include <mutex>
#include <optional>
#include <thread>
#include <vector>

#include "spectraseg/cube.hpp"
#include "spectraseg/models.hpp"
#include "spectraseg/superpixel.hpp"

namespace spectraseg {

// --- epoch image partition ---------------------------------------------------

struct Partition {
    std::vector<std::vector<int>> by_worker; // image indices
    bool shared = false; // fewer images than workers: images served to several workers
};

// Deterministic for (seed, epoch): epoch reshuffles the order, the size
// multiset stays fixed. With images >= workers the lists are disjoint and
// collectively exhaustive.
Partition partition_images(int n_images, int workers, uint64_t seed, int epoch);

// --- per-image geometric augmentation -----------------------------------------

struct AugmentParams {
    bool flip = false;       // horizontal mirror
    double scale = 1.0;      // about the image center
    double angle_deg = 0.0;  // about the image center
    double shift_x = 0.0;    // pixels
    double shift_y = 0.0;

    bool identity() const {
        return !flip && scale == 1.0 && angle_deg == 0.0 && shift_x == 0.0 && shift_y == 0.0;
    }
};

inline constexpr double kShiftLimit = 0.0625; // fraction of the image side
inline constexpr double kScaleLimit = 0.1;
inline constexpr double kAngleLimitDeg = 45.0;

// Each transform independently gated with p = 0.5. Draw order is fixed
// (shift, scale, rotate, flip) so streams are reproducible.
AugmentParams draw_augment_params(Rng& rng, int width, int height);

// Source -> dest composition: flip, scale, rotate, shift. Data is sampled
// bilinearly with zero fill outside the frame; labels nearest-neighbor with
// IGNORE fill. Cube and labels share the exact same mapping.
void apply_augment(Datacube& cube, LabelMap& labels, const AugmentParams& params);

// --- part extraction ----------------------------------------------------------

struct Part {
    std::vector<float> x;   // sample payload, layout given by xshape
    std::vector<int> xshape; // without the batch axis
    std::vector<int> target; // per-site class ids, -1 = ignore (empty for superpixel)
    std::vector<double> fuzzy; // superpixel target distribution
    int x0 = -1, y0 = -1;      // source position (provenance/testing)
};

struct ExtractOptions {
    int num_classes = 0;
    int max_parts = 0; // 0 = natural count
    const SuperpixelDecomposition* sp = nullptr;
    int sp_input_size = 32;
};

// pixel: every non-IGNORE pixel, shuffled (uniform without replacement);
// patch_*: grid-equivalent count of randomly positioned patches;
// superpixel: one sample per segment with a non-empty fuzzy label;
// image: the whole cube padded to a multiple of 8. A fully-IGNORE image
// yields zero parts for every kind.
std::vector<Part> extract_parts(const Datacube& cube, const LabelMap& labels, ModelKind kind,
                                Rng& rng, const ExtractOptions& opts);

// --- streaming loader -----------------------------------------------------------

struct TrainImage {
    std::string name;
    std::filesystem::path cube;
    std::filesystem::path labels;
    std::filesystem::path segments; // superpixel kind only
};

struct LoaderConfig {
    int workers = 3;
    int buffer_capacity = 4; // batches
    int batch_size = 0;
    int epoch_size = 0; // samples
    uint64_t seed = 0;
    int epoch = 0;
    bool augment = true;
    int max_parts_per_image = 0;
    int num_classes = 0;
    int sp_input_size = 32;

    int per_worker() const { return batch_size / workers; }
    int num_batches() const { return epoch_size / batch_size; }
    void validate() const;
};

struct Batch {
    nn::Tensor x;              // [B, ...]
    std::vector<int> targets;  // B * sites, -1 = ignore
    nn::Tensor fuzzy;          // [B, O] for the superpixel kind, else empty
    std::vector<int> worker_of; // provenance, size B
    uint64_t seq = 0;
};

// One epoch of batches from `workers` producer threads, assembled in a
// bounded ring of batch slots. Every batch holds exactly batch/workers
// samples from each worker, written to fixed rows, so the stream content is
// independent of thread scheduling. Each worker keeps at most one decoded
// image in memory.
class BatchStream {
public:
    BatchStream(LoaderConfig cfg, std::vector<TrainImage> images, ModelKind kind,
                Modality modality);
    ~BatchStream();

    BatchStream(const BatchStream&) = delete;
    BatchStream& operator=(const BatchStream&) = delete;

    // Blocks for the next ready batch; nullopt once the epoch is exhausted.
    // Worker failures rethrow here as ConfigError.
    std::optional<Batch> next();

    nlohmann::json instrumentation() const;

private:
    struct Slot {
        Batch batch;
        int placed = 0;
        bool initialized = false;
    };

    void worker_main(int worker);
    bool place(int worker, uint64_t k, Part&& part); // false = aborted
    void fail(const std::string& msg);

    LoaderConfig cfg_;
    std::vector<TrainImage> images_;
    ModelKind kind_;
    Modality modality_;

    mutable std::mutex mu_;
    std::condition_variable cv_;
    std::vector<Slot> slots_;
    uint64_t consumed_ = 0;
    bool abort_ = false;
    bool failed_ = false;
    std::string error_;

    // instrumentation
    int resident_ = 0;
    int peak_resident_ = 0;
    uint64_t images_decoded_ = 0;
    uint64_t samples_emitted_ = 0;
    std::vector<uint64_t> per_worker_samples_;

    std::vector<std::thread> threads_;
};

} // namespace spectraseg
