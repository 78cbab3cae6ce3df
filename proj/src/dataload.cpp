#include "spectraseg/dataload.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace spectraseg {

namespace {

constexpr uint64_t kStreamPartition = 0x50415254;
constexpr uint64_t kStreamWorker = 0x574f524b;

void expect(bool ok, const char* msg) {
    if (!ok) throw ConfigError(msg);
}

} // namespace

Partition partition_images(int n_images, int workers, uint64_t seed, int epoch) {
    expect(n_images > 0, "partition_images: no images");
    expect(workers > 0, "partition_images: worker count must be positive");
    std::vector<int> order(n_images);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(Rng::mix(seed, {kStreamPartition, static_cast<uint64_t>(epoch)}));
    rng.shuffle(order);

    Partition part;
    part.by_worker.assign(workers, {});
    if (n_images < workers) {
        // Not enough images for disjoint sets; serve them round-robin so no
        // worker idles. Streams stay deterministic, images are just shared.
        part.shared = true;
        for (int j = 0; j < workers; ++j) part.by_worker[j].push_back(order[j % n_images]);
    } else {
        for (int i = 0; i < n_images; ++i) part.by_worker[i % workers].push_back(order[i]);
    }
    return part;
}

AugmentParams draw_augment_params(Rng& rng, int width, int height) {
    AugmentParams p;
    if (rng.u01() < 0.5) {
        p.shift_x = rng.uniform(-kShiftLimit, kShiftLimit) * width;
        p.shift_y = rng.uniform(-kShiftLimit, kShiftLimit) * height;
    }
    if (rng.u01() < 0.5) p.scale = 1.0 + rng.uniform(-kScaleLimit, kScaleLimit);
    if (rng.u01() < 0.5) p.angle_deg = rng.uniform(-kAngleLimitDeg, kAngleLimitDeg);
    if (rng.u01() < 0.5) p.flip = true;
    return p;
}

namespace {

// Inverse of the (flip, scale, rotate, shift) composition about the
// geometric center: maps a destination pixel to its source coordinates.
struct InverseMap {
    double cx, cy, ct, st, inv_scale, shift_x, shift_y;
    bool flip;

    InverseMap(const AugmentParams& p, int width, int height)
        : cx((width - 1) / 2.0),
          cy((height - 1) / 2.0),
          inv_scale(1.0 / p.scale),
          shift_x(p.shift_x),
          shift_y(p.shift_y),
          flip(p.flip) {
        double th = p.angle_deg * 3.14159265358979323846 / 180.0;
        ct = std::cos(th);
        st = std::sin(th);
    }

    void operator()(int x, int y, double& sx, double& sy) const {
        double vx = x - cx - shift_x, vy = y - cy - shift_y;
        double rx = ct * vx + st * vy, ry = -st * vx + ct * vy;
        rx *= inv_scale;
        ry *= inv_scale;
        if (flip) rx = -rx;
        sx = rx + cx;
        sy = ry + cy;
    }
};

} // namespace

void apply_augment(Datacube& cube, LabelMap& labels, const AugmentParams& params) {
    expect(cube.width == labels.width && cube.height == labels.height,
           "apply_augment: cube/labels dimension mismatch");
    expect(params.scale > 0.0, "apply_augment: scale must be positive");
    if (params.identity()) return;

    const int W = cube.width, H = cube.height, C = cube.channels;
    const InverseMap inv(params, W, H);
    const std::vector<float> src = cube.data;
    const std::vector<uint8_t> slab = labels.labels;

    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            double sx = 0.0, sy = 0.0;
            inv(x, y, sx, sy);

            long lx = std::lround(sx), ly = std::lround(sy);
            labels.labels[static_cast<size_t>(y) * W + x] =
                (lx >= 0 && lx < W && ly >= 0 && ly < H)
                    ? slab[static_cast<size_t>(ly) * W + lx]
                    : kIgnoreLabel;

            int x0 = static_cast<int>(std::floor(sx));
            int y0 = static_cast<int>(std::floor(sy));
            double fx = sx - x0, fy = sy - y0;
            size_t corner[4];
            double weight[4];
            int n = 0;
            auto tap = [&](int xx, int yy, double w) {
                if (xx >= 0 && xx < W && yy >= 0 && yy < H && w != 0.0) {
                    corner[n] = (static_cast<size_t>(yy) * W + xx) * C;
                    weight[n++] = w;
                }
            };
            tap(x0, y0, (1 - fx) * (1 - fy));
            tap(x0 + 1, y0, fx * (1 - fy));
            tap(x0, y0 + 1, (1 - fx) * fy);
            tap(x0 + 1, y0 + 1, fx * fy);

            float* dst = &cube.data[(static_cast<size_t>(y) * W + x) * C];
            for (int c = 0; c < C; ++c) {
                double acc = 0.0;
                for (int k = 0; k < n; ++k) acc += weight[k] * src[corner[k] + c];
                dst[c] = static_cast<float>(acc);
            }
        }
}

namespace {

// Same geometric transform as apply_augment, nearest-neighbor on segment
// ids; out-of-frame pixels carry -1 (no segment). Those pixels are IGNORE
// in the warped label map, so fuzzy labels never dereference the -1.
SegmentMap warp_segment_map(const SegmentMap& map, const AugmentParams& params) {
    SegmentMap out;
    out.width = map.width;
    out.height = map.height;
    out.ids.assign(map.ids.size(), -1);
    const InverseMap inv(params, map.width, map.height);
    for (int y = 0; y < map.height; ++y)
        for (int x = 0; x < map.width; ++x) {
            double sx = 0.0, sy = 0.0;
            inv(x, y, sx, sy);
            long lx = std::lround(sx), ly = std::lround(sy);
            if (lx >= 0 && lx < map.width && ly >= 0 && ly < map.height)
                out.ids[static_cast<size_t>(y) * map.width + x] =
                    map.ids[static_cast<size_t>(ly) * map.width + lx];
        }
    return out;
}

int round_up(int n, int m) { return (n + m - 1) / m * m; }

std::vector<int> pixel_shape(const Datacube& cube) {
    if (cube.modality == Modality::HSI) return {1, cube.channels};
    return {cube.channels};
}

// CHW window with zero fill outside the image.
void fill_window_chw(const Datacube& cube, int x0, int y0, int w, int h, std::vector<float>& out) {
    out.assign(static_cast<size_t>(cube.channels) * h * w, 0.0f);
    int ylo = std::max(0, -y0), yhi = std::min(h, cube.height - y0);
    int xlo = std::max(0, -x0), xhi = std::min(w, cube.width - x0);
    for (int c = 0; c < cube.channels; ++c)
        for (int y = ylo; y < yhi; ++y)
            for (int x = xlo; x < xhi; ++x)
                out[(static_cast<size_t>(c) * h + y) * w + x] = cube.at(x0 + x, y0 + y, c);
}

void fill_window_targets(const LabelMap& labels, int x0, int y0, int w, int h,
                         std::vector<int>& out) {
    out.assign(static_cast<size_t>(h) * w, -1);
    for (int y = 0; y < h; ++y) {
        int sy = y0 + y;
        if (sy < 0 || sy >= labels.height) continue;
        for (int x = 0; x < w; ++x) {
            int sx = x0 + x;
            if (sx < 0 || sx >= labels.width) continue;
            uint8_t v = labels.at(sx, sy);
            if (v != kIgnoreLabel) out[static_cast<size_t>(y) * w + x] = v;
        }
    }
}

void cap_parts(std::vector<Part>& parts, int max_parts) {
    if (max_parts > 0 && static_cast<int>(parts.size()) > max_parts) parts.resize(max_parts);
}

} // namespace

std::vector<Part> extract_parts(const Datacube& cube, const LabelMap& labels, ModelKind kind,
                                Rng& rng, const ExtractOptions& opts) {
    expect(cube.width == labels.width && cube.height == labels.height,
           "extract_parts: cube/labels dimension mismatch");
    bool any_valid = std::any_of(labels.labels.begin(), labels.labels.end(),
                                 [](uint8_t v) { return v != kIgnoreLabel; });
    if (!any_valid) return {};

    std::vector<Part> parts;
    switch (kind) {
        case ModelKind::Pixel: {
            std::vector<int> pos;
            for (int y = 0; y < labels.height; ++y)
                for (int x = 0; x < labels.width; ++x)
                    if (labels.at(x, y) != kIgnoreLabel) pos.push_back(y * labels.width + x);
            rng.shuffle(pos);
            if (opts.max_parts > 0 && static_cast<int>(pos.size()) > opts.max_parts)
                pos.resize(opts.max_parts);
            std::vector<int> shape = pixel_shape(cube);
            for (int p : pos) {
                int x = p % labels.width, y = p / labels.width;
                Part part;
                part.xshape = shape;
                const float* px = cube.pixel(x, y);
                part.x.assign(px, px + cube.channels);
                part.target = {static_cast<int>(labels.at(x, y))};
                part.x0 = x;
                part.y0 = y;
                parts.push_back(std::move(part));
            }
            break;
        }
        case ModelKind::Patch32:
        case ModelKind::Patch64: {
            const int P = patch_size(kind);
            PatchGrid grid = patch_grid(cube.width, cube.height, P);
            int count = grid.nx * grid.ny;
            if (opts.max_parts > 0) count = std::min(count, opts.max_parts);
            for (int i = 0; i < count; ++i) {
                int x0 = static_cast<int>(rng.below(std::max(cube.width - P, 0) + 1));
                int y0 = static_cast<int>(rng.below(std::max(cube.height - P, 0) + 1));
                Part part;
                part.xshape = {cube.channels, P, P};
                fill_window_chw(cube, x0, y0, P, P, part.x);
                fill_window_targets(labels, x0, y0, P, P, part.target);
                part.x0 = x0;
                part.y0 = y0;
                parts.push_back(std::move(part));
            }
            break;
        }
        case ModelKind::Superpixel: {
            expect(opts.sp != nullptr, "extract_parts: superpixel kind needs a decomposition");
            expect(opts.num_classes > 0, "extract_parts: superpixel kind needs num_classes");
            std::vector<FuzzyLabel> fuzzy = fuzzy_labels(*opts.sp, labels, opts.num_classes);
            std::vector<int> ids;
            for (int s = 0; s < opts.sp->count(); ++s)
                if (!fuzzy[s].empty) ids.push_back(s);
            rng.shuffle(ids);
            for (int s : ids) {
                Datacube crop = extract_superpixel_cube(cube, *opts.sp, s, opts.sp_input_size);
                Part part;
                part.xshape = {crop.channels, crop.height, crop.width};
                fill_window_chw(crop, 0, 0, crop.width, crop.height, part.x);
                part.fuzzy = fuzzy[s].freq;
                part.x0 = opts.sp->segments[s].x0;
                part.y0 = opts.sp->segments[s].y0;
                parts.push_back(std::move(part));
            }
            cap_parts(parts, opts.max_parts);
            break;
        }
        case ModelKind::Image: {
            int wp = round_up(cube.width, 8), hp = round_up(cube.height, 8);
            Part part;
            part.xshape = {cube.channels, hp, wp};
            fill_window_chw(cube, 0, 0, wp, hp, part.x);
            fill_window_targets(labels, 0, 0, wp, hp, part.target);
            part.x0 = 0;
            part.y0 = 0;
            parts.push_back(std::move(part));
            break;
        }
    }
    return parts;
}

void LoaderConfig::validate() const {
    if (workers < 1) throw ConfigError("loader: worker count must be >= 1");
    if (batch_size < 1) throw ConfigError("loader: batch size must be positive");
    if (batch_size % workers != 0)
        throw ConfigError("loader: batch size must be divisible by the worker count");
    if (buffer_capacity < 2) throw ConfigError("loader: buffer capacity must be >= 2");
    if (epoch_size < 1 || epoch_size % batch_size != 0)
        throw ConfigError("loader: epoch size must be a positive multiple of the batch size");
    if (num_classes < 1) throw ConfigError("loader: num_classes must be set");
}

BatchStream::BatchStream(LoaderConfig cfg, std::vector<TrainImage> images, ModelKind kind,
                         Modality modality)
    : cfg_(cfg), images_(std::move(images)), kind_(kind), modality_(modality) {
    cfg_.validate();
    expect(!images_.empty(), "loader: no training images");
    slots_.resize(cfg_.buffer_capacity);
    per_worker_samples_.assign(cfg_.workers, 0);
    threads_.reserve(cfg_.workers);
    for (int j = 0; j < cfg_.workers; ++j) threads_.emplace_back(&BatchStream::worker_main, this, j);
}

BatchStream::~BatchStream() {
    {
        std::lock_guard<std::mutex> lk(mu_);
        abort_ = true;
    }
    cv_.notify_all();
    for (std::thread& t : threads_)
        if (t.joinable()) t.join();
}

void BatchStream::worker_main(int worker) {
    try {
        Partition partition =
            partition_images(static_cast<int>(images_.size()), cfg_.workers, cfg_.seed, cfg_.epoch);
        const std::vector<int>& mine = partition.by_worker[worker];
        const int b = cfg_.per_worker();
        const uint64_t quota = static_cast<uint64_t>(cfg_.num_batches()) * b;
        uint64_t produced = 0, cursor = 0;
        size_t dry = 0; // consecutive images with no usable parts

        while (produced < quota) {
            const TrainImage& rec = images_[mine[cursor % mine.size()]];
            Rng rng(Rng::mix(cfg_.seed, {kStreamWorker, static_cast<uint64_t>(cfg_.epoch),
                                         static_cast<uint64_t>(worker), cursor}));
            ++cursor;

            std::vector<Part> parts;
            {
                Datacube cube = read_cube(rec.cube);
                LabelMap labels = read_labels(rec.labels);
                expect(cube.modality == modality_, "loader: cube modality does not match the stream");
                SuperpixelDecomposition dec;
                SegmentMap raw;
                if (kind_ == ModelKind::Superpixel) raw = read_segment_map(rec.segments);

                {
                    std::lock_guard<std::mutex> lk(mu_);
                    ++resident_;
                    peak_resident_ = std::max(peak_resident_, resident_);
                    ++images_decoded_;
                }

                AugmentParams aug =
                    cfg_.augment ? draw_augment_params(rng, cube.width, cube.height) : AugmentParams{};
                if (!aug.identity()) apply_augment(cube, labels, aug);
                if (kind_ == ModelKind::Superpixel)
                    dec = decomposition_from_map(aug.identity() ? std::move(raw)
                                                                : warp_segment_map(raw, aug));

                ExtractOptions opts;
                opts.num_classes = cfg_.num_classes;
                opts.sp = kind_ == ModelKind::Superpixel ? &dec : nullptr;
                opts.sp_input_size = cfg_.sp_input_size;
                uint64_t room = quota - produced;
                opts.max_parts = cfg_.max_parts_per_image > 0
                                     ? static_cast<int>(std::min<uint64_t>(cfg_.max_parts_per_image, room))
                                     : static_cast<int>(std::min<uint64_t>(room, 1u << 30));
                parts = extract_parts(cube, labels, kind_, rng, opts);

                std::lock_guard<std::mutex> lk(mu_);
                --resident_;
            }

            if (parts.empty()) {
                if (++dry >= mine.size())
                    throw ConfigError("loader: worker " + std::to_string(worker) +
                                      " found no usable samples in its image set");
                continue;
            }
            dry = 0;
            for (Part& part : parts) {
                if (produced == quota) break;
                if (!place(worker, produced, std::move(part))) return;
                ++produced;
            }
        }
    } catch (const std::exception& e) {
        fail(e.what());
    }
}

bool BatchStream::place(int worker, uint64_t k, Part&& part) {
    const int b = cfg_.per_worker();
    const uint64_t seq = k / b;
    const int row = worker * b + static_cast<int>(k % b);

    std::unique_lock<std::mutex> lk(mu_);
    cv_.wait(lk, [&] { return abort_ || failed_ || seq < consumed_ + slots_.size(); });
    if (abort_ || failed_) return false;

    Slot& slot = slots_[seq % slots_.size()];
    if (!slot.initialized) {
        std::vector<int> shape;
        shape.push_back(cfg_.batch_size);
        shape.insert(shape.end(), part.xshape.begin(), part.xshape.end());
        slot.batch.x = nn::Tensor(shape);
        slot.batch.targets.assign(static_cast<size_t>(cfg_.batch_size) * part.target.size(), -1);
        slot.batch.fuzzy = kind_ == ModelKind::Superpixel
                               ? nn::Tensor({cfg_.batch_size, cfg_.num_classes})
                               : nn::Tensor();
        slot.batch.worker_of.assign(cfg_.batch_size, -1);
        slot.batch.seq = seq;
        slot.initialized = true;
    }

    size_t xlen = slot.batch.x.size() / cfg_.batch_size;
    size_t sites = slot.batch.targets.size() / cfg_.batch_size;
    if (part.x.size() != xlen || part.target.size() != sites)
        throw ConfigError("loader: parts with mismatched shapes in one batch "
                          "(image sizes must agree across the dataset)");
    std::copy(part.x.begin(), part.x.end(), slot.batch.x.v.begin() + row * xlen);
    std::copy(part.target.begin(), part.target.end(), slot.batch.targets.begin() + row * sites);
    if (kind_ == ModelKind::Superpixel) {
        if (part.fuzzy.size() != static_cast<size_t>(cfg_.num_classes))
            throw ConfigError("loader: fuzzy label length does not match num_classes");
        std::copy(part.fuzzy.begin(), part.fuzzy.end(),
                  slot.batch.fuzzy.v.begin() + static_cast<size_t>(row) * cfg_.num_classes);
    }
    slot.batch.worker_of[row] = worker;
    ++samples_emitted_;
    ++per_worker_samples_[worker];
    if (++slot.placed == cfg_.batch_size) cv_.notify_all();
    return true;
}

void BatchStream::fail(const std::string& msg) {
    {
        std::lock_guard<std::mutex> lk(mu_);
        if (!failed_) {
            failed_ = true;
            error_ = msg;
        }
    }
    cv_.notify_all();
}

std::optional<Batch> BatchStream::next() {
    std::unique_lock<std::mutex> lk(mu_);
    if (consumed_ >= static_cast<uint64_t>(cfg_.num_batches())) return std::nullopt;
    Slot& slot = slots_[consumed_ % slots_.size()];
    cv_.wait(lk, [&] { return failed_ || (slot.initialized && slot.placed == cfg_.batch_size); });
    if (failed_) throw ConfigError(error_);
    Batch out = std::move(slot.batch);
    slot = Slot{};
    ++consumed_;
    cv_.notify_all();
    return out;
}

nlohmann::json BatchStream::instrumentation() const {
    std::lock_guard<std::mutex> lk(mu_);
    return {
        {"workers", cfg_.workers},
        {"batch_size", cfg_.batch_size},
        {"num_batches", cfg_.num_batches()},
        {"consumed", consumed_},
        {"images_decoded", images_decoded_},
        {"samples_emitted", samples_emitted_},
        {"per_worker_samples", per_worker_samples_},
        {"resident", resident_},
        {"peak_resident", peak_resident_},
    };
}

} // namespace spectraseg
