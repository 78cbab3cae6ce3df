#include "spectraseg/superpixel.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <functional>
#include <limits>
#include <map>
#include <unordered_map>

#include "spectraseg/imgops.hpp"

namespace spectraseg {
namespace {

double srgb_to_linear(double c) { return c <= 0.04045 ? c / 12.92 : std::pow((c + 0.055) / 1.055, 2.4); }

void rgb_to_lab(double r, double g, double b, double& L, double& A, double& B) {
    r = srgb_to_linear(r);
    g = srgb_to_linear(g);
    b = srgb_to_linear(b);
    double x = 0.4124564 * r + 0.3575761 * g + 0.1804375 * b;
    double y = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b;
    double z = 0.0193339 * r + 0.1191920 * g + 0.9503041 * b;
    x /= 0.95047; // D65 white
    z /= 1.08883;
    auto f = [](double t) {
        return t > 216.0 / 24389.0 ? std::cbrt(t) : (24389.0 / 27.0 * t + 16.0) / 116.0;
    };
    double fx = f(x), fy = f(y), fz = f(z);
    L = 116.0 * fy - 16.0;
    A = 500.0 * (fx - fy);
    B = 200.0 * (fy - fz);
}

struct Cluster {
    double l = 0, a = 0, b = 0, x = 0, y = 0;
};

// Relabels `raw` cluster ids into contiguous, 4-connected segments. Fragments
// below min_size are merged into the adjacent component sharing the longest
// border (ties -> lower component id); the same rule trims the segment count
// down to the cap.
SegmentMap enforce_connectivity(const std::vector<int>& raw, int W, int H, int min_size, int cap) {
    const size_t N = static_cast<size_t>(W) * H;
    std::vector<int> comp(N, -1);
    std::vector<std::vector<int>> members; // pixel indices per component

    std::deque<int> queue;
    for (size_t start = 0; start < N; ++start) {
        if (comp[start] >= 0) continue;
        int id = static_cast<int>(members.size());
        members.emplace_back();
        comp[start] = id;
        queue.push_back(static_cast<int>(start));
        while (!queue.empty()) {
            int p = queue.front();
            queue.pop_front();
            members[id].push_back(p);
            int x = p % W, y = p / W;
            const int nx[4] = {x - 1, x + 1, x, x};
            const int ny[4] = {y, y, y - 1, y + 1};
            for (int k = 0; k < 4; ++k) {
                if (nx[k] < 0 || nx[k] >= W || ny[k] < 0 || ny[k] >= H) continue;
                int q = ny[k] * W + nx[k];
                if (comp[q] < 0 && raw[q] == raw[p]) {
                    comp[q] = id;
                    queue.push_back(q);
                }
            }
        }
    }

    // union-find over components so merges chain correctly
    std::vector<int> parent(members.size());
    for (size_t i = 0; i < parent.size(); ++i) parent[i] = static_cast<int>(i);
    std::function<int(int)> find = [&](int v) {
        while (parent[v] != v) v = parent[v] = parent[parent[v]];
        return v;
    };
    std::vector<int> size(members.size());
    for (size_t i = 0; i < members.size(); ++i) size[i] = static_cast<int>(members[i].size());

    auto border_neighbors = [&](int root) {
        std::map<int, int> shared; // neighbor root -> border length
        for (size_t i = 0; i < members.size(); ++i) {
            if (find(static_cast<int>(i)) != root) continue;
            for (int p : members[i]) {
                int x = p % W, y = p / W;
                const int nx[4] = {x - 1, x + 1, x, x};
                const int ny[4] = {y, y, y - 1, y + 1};
                for (int k = 0; k < 4; ++k) {
                    if (nx[k] < 0 || nx[k] >= W || ny[k] < 0 || ny[k] >= H) continue;
                    int other = find(comp[ny[k] * W + nx[k]]);
                    if (other != root) ++shared[other];
                }
            }
        }
        return shared;
    };

    auto merge_into_longest_border = [&](int root) {
        std::map<int, int> shared = border_neighbors(root);
        if (shared.empty()) return false; // single-component image
        int target = shared.begin()->first;
        for (const auto& [id, len] : shared)
            if (len > shared[target]) target = id;
        parent[root] = target;
        size[target] += size[root];
        return true;
    };

    bool changed = true;
    while (changed) {
        changed = false;
        for (size_t i = 0; i < members.size(); ++i) {
            int root = find(static_cast<int>(i));
            if (static_cast<int>(i) != root) continue;
            if (size[root] >= min_size) continue;
            if (merge_into_longest_border(root)) changed = true;
        }
    }

    auto live_count = [&]() {
        int n = 0;
        for (size_t i = 0; i < members.size(); ++i)
            if (find(static_cast<int>(i)) == static_cast<int>(i)) ++n;
        return n;
    };
    while (live_count() > cap) {
        int smallest = -1;
        for (size_t i = 0; i < members.size(); ++i) {
            int root = find(static_cast<int>(i));
            if (root != static_cast<int>(i)) continue;
            if (smallest < 0 || size[root] < size[smallest]) smallest = root;
        }
        if (smallest < 0 || !merge_into_longest_border(smallest)) break;
    }

    // contiguous ids in raster order of first appearance
    std::vector<int> remap(members.size(), -1);
    SegmentMap out;
    out.width = W;
    out.height = H;
    out.ids.resize(N);
    int next = 0;
    for (size_t p = 0; p < N; ++p) {
        int root = find(comp[p]);
        if (remap[root] < 0) remap[root] = next++;
        out.ids[p] = remap[root];
    }
    return out;
}

} // namespace

SuperpixelDecomposition slico(const Datacube& rgb, const SlicoOptions& opts) {
    if (rgb.channels != kRgbChannels) throw ConfigError("slico expects an RGB cube");
    if (opts.n_segments < 1 || opts.iterations < 0) throw ConfigError("slico: bad options");
    const int W = rgb.width, H = rgb.height;
    const size_t N = static_cast<size_t>(W) * H;

    // smoothing + value scaling to [0,1] (max-normalized, scale invariant)
    std::vector<double> feat(N * 3);
    {
        std::vector<double> plane(N), smooth(N);
        float vmax = 0.f;
        for (float v : rgb.data) vmax = std::max(vmax, v);
        double scale = vmax > 0.f ? 1.0 / vmax : 1.0;
        for (int c = 0; c < 3; ++c) {
            for (size_t p = 0; p < N; ++p) plane[p] = rgb.data[p * 3 + c] * scale;
            gaussian_blur_plane(plane.data(), smooth.data(), W, H, opts.smooth_sigma);
            for (size_t p = 0; p < N; ++p) feat[p * 3 + c] = std::clamp(smooth[p], 0.0, 1.0);
        }
    }
    std::vector<double> lv(N), av(N), bv(N);
    for (size_t p = 0; p < N; ++p) {
        if (opts.use_lab) {
            rgb_to_lab(feat[p * 3], feat[p * 3 + 1], feat[p * 3 + 2], lv[p], av[p], bv[p]);
        } else {
            lv[p] = 100.0 * feat[p * 3];
            av[p] = 100.0 * feat[p * 3 + 1];
            bv[p] = 100.0 * feat[p * 3 + 2];
        }
    }

    // aspect-aware grid seeding at cell centers; tiny images get fewer seeds
    int n_req = std::min<int>(opts.n_segments, static_cast<int>(N));
    int nx = std::clamp<int>(static_cast<int>(std::lround(std::sqrt(static_cast<double>(n_req) * W / H))), 1, W);
    int ny = std::clamp<int>(static_cast<int>(std::lround(static_cast<double>(n_req) / nx)), 1, H);
    std::vector<Cluster> clusters;
    for (int j = 0; j < ny; ++j)
        for (int i = 0; i < nx; ++i) {
            Cluster c;
            c.x = std::clamp((i + 0.5) * W / nx - 0.5, 0.0, W - 1.0);
            c.y = std::clamp((j + 0.5) * H / ny - 0.5, 0.0, H - 1.0);
            size_t p = static_cast<size_t>(c.y) * W + static_cast<size_t>(c.x);
            c.l = lv[p];
            c.a = av[p];
            c.b = bv[p];
            clusters.push_back(c);
        }
    const int K = static_cast<int>(clusters.size());
    double step = std::sqrt(static_cast<double>(N) / K); // nominal cell side

    std::vector<int> label(N, -1);
    std::vector<double> best(N);
    std::vector<double> win_lab(N); // color distance of the winning assignment
    std::vector<double> maxlab(K, 100.0); // adaptive compactness, 10^2 start
    double offset = step < 10.0 ? step * 1.5 : step;
    double invxywt = 1.0 / (step * step);

    for (int it = 0; it < opts.iterations; ++it) {
        std::fill(best.begin(), best.end(), std::numeric_limits<double>::max());
        std::fill(label.begin(), label.end(), -1);
        for (int k = 0; k < K; ++k) {
            const Cluster& c = clusters[k];
            int x1 = std::max(0, static_cast<int>(c.x - offset));
            int x2 = std::min(W - 1, static_cast<int>(c.x + offset));
            int y1 = std::max(0, static_cast<int>(c.y - offset));
            int y2 = std::min(H - 1, static_cast<int>(c.y + offset));
            for (int y = y1; y <= y2; ++y)
                for (int x = x1; x <= x2; ++x) {
                    size_t p = static_cast<size_t>(y) * W + x;
                    double dl = lv[p] - c.l, da = av[p] - c.a, db = bv[p] - c.b;
                    double distlab = dl * dl + da * da + db * db;
                    double dx = x - c.x, dy = y - c.y;
                    double d = distlab / maxlab[k] + (dx * dx + dy * dy) * invxywt;
                    if (d < best[p]) {
                        best[p] = d;
                        label[p] = k;
                        win_lab[p] = distlab;
                    }
                }
        }
        // pixels no window reached adopt the nearest center spatially
        for (size_t p = 0; p < N; ++p) {
            if (label[p] >= 0) continue;
            int x = static_cast<int>(p) % W, y = static_cast<int>(p) / W;
            double bd = std::numeric_limits<double>::max();
            for (int k = 0; k < K; ++k) {
                double dx = x - clusters[k].x, dy = y - clusters[k].y;
                if (dx * dx + dy * dy < bd) {
                    bd = dx * dx + dy * dy;
                    label[p] = k;
                }
            }
            double dl = lv[p] - clusters[label[p]].l, da = av[p] - clusters[label[p]].a,
                   db = bv[p] - clusters[label[p]].b;
            win_lab[p] = dl * dl + da * da + db * db;
        }
        // adaptive compactness never decreases (SLICO rule)
        for (size_t p = 0; p < N; ++p) maxlab[label[p]] = std::max(maxlab[label[p]], win_lab[p]);
        // recompute centers
        std::vector<Cluster> acc(K);
        std::vector<int> cnt(K, 0);
        for (size_t p = 0; p < N; ++p) {
            Cluster& a = acc[label[p]];
            a.l += lv[p];
            a.a += av[p];
            a.b += bv[p];
            a.x += static_cast<double>(p % W);
            a.y += static_cast<double>(p / W);
            ++cnt[label[p]];
        }
        for (int k = 0; k < K; ++k) {
            if (cnt[k] == 0) continue; // empty cluster keeps its position
            clusters[k].l = acc[k].l / cnt[k];
            clusters[k].a = acc[k].a / cnt[k];
            clusters[k].b = acc[k].b / cnt[k];
            clusters[k].x = acc[k].x / cnt[k];
            clusters[k].y = acc[k].y / cnt[k];
        }
    }
    if (opts.iterations == 0)
        for (size_t p = 0; p < N; ++p) {
            int x = static_cast<int>(p) % W, y = static_cast<int>(p) / W;
            double bd = std::numeric_limits<double>::max();
            for (int k = 0; k < K; ++k) {
                double dx = x - clusters[k].x, dy = y - clusters[k].y;
                if (dx * dx + dy * dy < bd) {
                    bd = dx * dx + dy * dy;
                    label[p] = k;
                }
            }
        }

    int min_size = std::max(1, static_cast<int>(N) / n_req / 4);
    int cap = std::max(1, (3 * n_req) / 2);
    SuperpixelDecomposition dec;
    dec.requested = opts.n_segments;
    dec.map = enforce_connectivity(label, W, H, min_size, cap);

    int n_final = *std::max_element(dec.map.ids.begin(), dec.map.ids.end()) + 1;
    dec.segments.assign(n_final, SegmentStats{});
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            SegmentStats& s = dec.segments[dec.map.at(x, y)];
            if (s.pixels == 0) {
                s.x0 = s.x1 = x;
                s.y0 = s.y1 = y;
            } else {
                s.x0 = std::min(s.x0, x);
                s.x1 = std::max(s.x1, x);
                s.y0 = std::min(s.y0, y);
                s.y1 = std::max(s.y1, y);
            }
            ++s.pixels;
            s.cx += x;
            s.cy += y;
        }
    for (SegmentStats& s : dec.segments) {
        s.cx /= s.pixels;
        s.cy /= s.pixels;
    }
    return dec;
}

SuperpixelDecomposition decomposition_from_map(SegmentMap map) {
    std::unordered_map<int, int> remap;
    SuperpixelDecomposition dec;
    for (int32_t& id : map.ids) {
        if (id < 0) {
            id = -1;
            continue;
        }
        auto [it, fresh] = remap.emplace(id, static_cast<int>(dec.segments.size()));
        if (fresh) dec.segments.emplace_back();
        id = it->second;
    }
    dec.requested = static_cast<int>(dec.segments.size());
    for (int y = 0; y < map.height; ++y)
        for (int x = 0; x < map.width; ++x) {
            int32_t id = map.at(x, y);
            if (id < 0) continue;
            SegmentStats& s = dec.segments[id];
            if (s.pixels == 0) {
                s.x0 = s.x1 = x;
                s.y0 = s.y1 = y;
            } else {
                s.x0 = std::min(s.x0, x);
                s.x1 = std::max(s.x1, x);
                s.y0 = std::min(s.y0, y);
                s.y1 = std::max(s.y1, y);
            }
            ++s.pixels;
            s.cx += x;
            s.cy += y;
        }
    for (SegmentStats& s : dec.segments) {
        s.cx /= s.pixels;
        s.cy /= s.pixels;
    }
    dec.map = std::move(map);
    return dec;
}

int FuzzyLabel::argmax() const {
    int best = 0;
    for (size_t i = 1; i < freq.size(); ++i)
        if (freq[i] > freq[best]) best = static_cast<int>(i);
    return best;
}

std::vector<FuzzyLabel> fuzzy_labels(const SuperpixelDecomposition& dec, const LabelMap& labels,
                                     int num_classes) {
    if (dec.map.width != labels.width || dec.map.height != labels.height)
        throw ConfigError("fuzzy_labels: dimension mismatch");
    std::vector<FuzzyLabel> out(dec.segments.size());
    for (FuzzyLabel& f : out) f.freq.assign(num_classes, 0.0);
    std::vector<int> total(dec.segments.size(), 0);
    for (size_t p = 0; p < labels.labels.size(); ++p) {
        uint8_t v = labels.labels[p];
        if (v == kIgnoreLabel) continue;
        if (v >= num_classes) throw ConfigError("fuzzy_labels: label out of range");
        out[dec.map.ids[p]].freq[v] += 1.0;
        ++total[dec.map.ids[p]];
    }
    for (size_t s = 0; s < out.size(); ++s) {
        if (total[s] == 0) {
            out[s].empty = true;
            continue;
        }
        for (double& v : out[s].freq) v /= total[s];
    }
    return out;
}

Datacube extract_superpixel_cube(const Datacube& cube, const SuperpixelDecomposition& dec, int segment_id,
                                 int out_size) {
    if (segment_id < 0 || segment_id >= dec.count()) throw ConfigError("extract: no such segment");
    if (cube.width != dec.map.width || cube.height != dec.map.height)
        throw ConfigError("extract: dimension mismatch");
    const SegmentStats& s = dec.segments[segment_id];
    const int cw = s.x1 - s.x0 + 1, ch = s.y1 - s.y0 + 1, C = cube.channels;

    // masked crop: values outside the segment are zeroed before resizing
    std::vector<float> crop(static_cast<size_t>(cw) * ch * C, 0.f);
    for (int y = 0; y < ch; ++y)
        for (int x = 0; x < cw; ++x)
            if (dec.map.at(s.x0 + x, s.y0 + y) == segment_id)
                for (int c = 0; c < C; ++c)
                    crop[(static_cast<size_t>(y) * cw + x) * C + c] = cube.at(s.x0 + x, s.y0 + y, c);

    Datacube out;
    out.width = out_size;
    out.height = out_size;
    out.channels = C;
    out.modality = cube.modality;
    out.wavelengths = cube.wavelengths;
    out.data.resize(static_cast<size_t>(out_size) * out_size * C);
    for (int y = 0; y < out_size; ++y) {
        BilinearTap ty = bilinear_tap(resize_src_coord(y, out_size, ch), ch);
        for (int x = 0; x < out_size; ++x) {
            BilinearTap tx = bilinear_tap(resize_src_coord(x, out_size, cw), cw);
            for (int c = 0; c < C; ++c) {
                auto at = [&](int yy, int xx) {
                    return static_cast<double>(crop[(static_cast<size_t>(yy) * cw + xx) * C + c]);
                };
                double top = (1 - tx.w_hi) * at(ty.lo, tx.lo) + tx.w_hi * at(ty.lo, tx.hi);
                double bot = (1 - tx.w_hi) * at(ty.hi, tx.lo) + tx.w_hi * at(ty.hi, tx.hi);
                out.data[(static_cast<size_t>(y) * out_size + x) * C + c] =
                    static_cast<float>((1 - ty.w_hi) * top + ty.w_hi * bot);
            }
        }
    }
    return out;
}

LabelMap superpixel_performance_limit(const SuperpixelDecomposition& dec, const LabelMap& labels) {
    if (dec.map.width != labels.width || dec.map.height != labels.height)
        throw ConfigError("performance_limit: dimension mismatch");
    std::vector<std::map<uint8_t, int>> hist(dec.segments.size());
    for (size_t p = 0; p < labels.labels.size(); ++p)
        if (labels.labels[p] != kIgnoreLabel) ++hist[dec.map.ids[p]][labels.labels[p]];

    std::vector<uint8_t> modal(dec.segments.size(), kIgnoreLabel);
    for (size_t s = 0; s < hist.size(); ++s) {
        int best = -1;
        for (const auto& [cls, n] : hist[s]) // std::map iterates ids ascending: ties -> lowest
            if (n > best) {
                best = n;
                modal[s] = cls;
            }
    }

    LabelMap out(labels.width, labels.height);
    for (size_t p = 0; p < labels.labels.size(); ++p)
        out.labels[p] = labels.labels[p] == kIgnoreLabel ? kIgnoreLabel : modal[dec.map.ids[p]];
    return out;
}

} // namespace spectraseg
