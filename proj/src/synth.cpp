#include "spectraseg/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

#include "spectraseg/common.hpp"
#include "spectraseg/imgops.hpp"

namespace spectraseg {
namespace {

constexpr uint64_t kStreamSpectra = 0x53504543;
constexpr uint64_t kStreamSubject = 0x53554242;
constexpr uint64_t kStreamImage = 0x494d4721;

std::vector<double> hsi_wavelengths(int channels) {
    std::vector<double> w(channels);
    for (int c = 0; c < channels; ++c)
        w[c] = 500.0 + 500.0 * (c + 0.5) / channels;
    return w;
}

struct SubjectShift {
    double amplitude = 1.0; // multiplicative gain
    double tilt = 0.0;      // additive slope across the spectral axis
};

SubjectShift subject_shift(const SynthConfig& cfg, int subject) {
    SubjectShift s;
    if (cfg.subject_shift_scale > 0.0) {
        Rng rng(Rng::mix(cfg.seed, {kStreamSubject, static_cast<uint64_t>(subject)}));
        s.amplitude = 1.0 + cfg.subject_shift_scale * rng.uniform(-1.0, 1.0);
        s.tilt = cfg.subject_shift_scale * rng.uniform(-1.0, 1.0);
    }
    return s;
}

// Voronoi partition of the frame around `count` seed points, classes assigned
// round-robin over a shuffled class list so each class owns >= 1 seed.
std::vector<uint8_t> voronoi_geometry(const SynthConfig& cfg, Rng& rng) {
    int count = cfg.blob_min + static_cast<int>(rng.below(static_cast<uint64_t>(cfg.blob_max - cfg.blob_min + 1)));
    count = std::max(count, cfg.classes);
    count = std::min<int>(count, cfg.width * cfg.height);

    std::vector<int> sx(count), sy(count);
    for (int j = 0; j < count; ++j) {
        while (true) {
            int x = static_cast<int>(rng.below(static_cast<uint64_t>(cfg.width)));
            int y = static_cast<int>(rng.below(static_cast<uint64_t>(cfg.height)));
            bool taken = false;
            for (int k = 0; k < j && !taken; ++k) taken = (sx[k] == x && sy[k] == y);
            if (!taken) {
                sx[j] = x;
                sy[j] = y;
                break;
            }
        }
    }

    std::vector<uint8_t> seed_class(count);
    std::vector<int> order(cfg.classes);
    for (int o = 0; o < cfg.classes; ++o) order[o] = o;
    rng.shuffle(order);
    for (int j = 0; j < count; ++j) seed_class[j] = static_cast<uint8_t>(order[j % cfg.classes]);

    std::vector<uint8_t> geom(static_cast<size_t>(cfg.width) * cfg.height);
    for (int y = 0; y < cfg.height; ++y) {
        for (int x = 0; x < cfg.width; ++x) {
            long best = std::numeric_limits<long>::max();
            int who = 0;
            for (int j = 0; j < count; ++j) {
                long dx = x - sx[j], dy = y - sy[j];
                long d = dx * dx + dy * dy;
                if (d < best) {
                    best = d;
                    who = j;
                }
            }
            geom[static_cast<size_t>(y) * cfg.width + x] = seed_class[who];
        }
    }
    return geom;
}

bool all_classes_present(const std::vector<uint8_t>& geom, int classes) {
    std::vector<char> seen(classes, 0);
    for (uint8_t g : geom)
        if (g < classes) seen[g] = 1;
    for (int o = 0; o < classes; ++o)
        if (!seen[o]) return false;
    return true;
}

// One 3x3 majority pass; ties keep the center label. Reverted if it would
// erase a class entirely.
std::vector<uint8_t> majority_pass(const std::vector<uint8_t>& geom, int w, int h, int classes) {
    std::vector<uint8_t> out(geom.size());
    std::vector<int> votes(classes);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            std::fill(votes.begin(), votes.end(), 0);
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    int xx = std::clamp(x + dx, 0, w - 1);
                    int yy = std::clamp(y + dy, 0, h - 1);
                    ++votes[geom[static_cast<size_t>(yy) * w + xx]];
                }
            uint8_t center = geom[static_cast<size_t>(y) * w + x];
            int best = center;
            for (int o = 0; o < classes; ++o)
                if (votes[o] > votes[best]) best = o;
            out[static_cast<size_t>(y) * w + x] = static_cast<uint8_t>(best);
        }
    }
    if (!all_classes_present(out, classes)) return geom;
    return out;
}

// Paints IGNORE over pixels within `border` px (Chebyshev) of a class edge.
// Reverted if no labeled pixel would survive.
std::vector<uint8_t> apply_unsure_border(const std::vector<uint8_t>& geom, int w, int h, int border) {
    std::vector<uint8_t> labels = geom;
    if (border <= 0) return labels;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            uint8_t g = geom[static_cast<size_t>(y) * w + x];
            bool edge = false;
            for (int dy = -border; dy <= border && !edge; ++dy)
                for (int dx = -border; dx <= border && !edge; ++dx) {
                    int xx = std::clamp(x + dx, 0, w - 1);
                    int yy = std::clamp(y + dy, 0, h - 1);
                    edge = geom[static_cast<size_t>(yy) * w + xx] != g;
                }
            if (edge) labels[static_cast<size_t>(y) * w + x] = kIgnoreLabel;
        }
    }
    bool any = false;
    for (uint8_t v : labels)
        if (v != kIgnoreLabel) any = true;
    return any ? labels : geom;
}

// Additive noise for one channel plane; correlated fields are renormalized so
// the per-pixel std stays noise_std regardless of the correlation length.
void add_noise_plane(std::vector<double>& plane, int w, int h, const SynthConfig& cfg, Rng& rng) {
    if (cfg.noise_std <= 0.0) return;
    size_t n = plane.size();
    if (cfg.noise_sigma_px <= 0.0) {
        for (size_t i = 0; i < n; ++i) plane[i] += cfg.noise_std * rng.normal();
        return;
    }
    std::vector<double> white(n), smooth(n);
    for (size_t i = 0; i < n; ++i) white[i] = rng.normal();
    gaussian_blur_plane(white.data(), smooth.data(), w, h, cfg.noise_sigma_px);
    std::vector<double> k = gaussian_kernel(cfg.noise_sigma_px);
    double norm2 = 0.0;
    for (double v : k) norm2 += v * v;
    double gain = cfg.noise_std / norm2; // ||k (x) k||_2 = ||k||_2^2
    for (size_t i = 0; i < n; ++i) plane[i] += gain * smooth[i];
}

Datacube make_cube(int w, int h, Modality m, const std::vector<double>& wavelengths) {
    Datacube cube;
    cube.width = w;
    cube.height = h;
    cube.channels = static_cast<int>(wavelengths.size());
    cube.modality = m;
    cube.wavelengths.assign(wavelengths.begin(), wavelengths.end());
    cube.data.assign(static_cast<size_t>(w) * h * cube.channels, 0.0f);
    return cube;
}

std::string zero_pad(int v) {
    char buf[8];
    std::snprintf(buf, sizeof(buf), "%02d", v);
    return buf;
}

} // namespace

double ClassSpectrum::eval(double lambda_nm) const {
    double v = baseline;
    for (const GaussianPeak& p : peaks) {
        double z = (lambda_nm - p.center_nm) / p.sigma_nm;
        v += p.amplitude * std::exp(-0.5 * z * z);
    }
    return v;
}

std::vector<ClassSpectrum> default_class_spectra(int classes, uint64_t seed) {
    Rng rng(Rng::mix(seed, {kStreamSpectra}));
    std::vector<ClassSpectrum> out(classes);
    for (int o = 0; o < classes; ++o) {
        ClassSpectrum& s = out[o];
        s.baseline = 0.1 + 0.1 * rng.u01();
        double primary = 520.0 + 460.0 * (o + 0.5) / classes + rng.uniform(-10.0, 10.0);
        int extra = o % 3;
        GaussianPeak main;
        main.center_nm = primary;
        main.sigma_nm = 35.0 + 25.0 * rng.u01();
        main.amplitude = 0.6 + 0.4 * rng.u01();
        s.peaks.push_back(main);
        for (int e = 1; e <= extra; ++e) {
            GaussianPeak p;
            double c = primary + (e % 2 ? 1.0 : -1.0) * (80.0 + 40.0 * e) ;
            while (c > 990.0) c -= 480.0;
            while (c < 510.0) c += 480.0;
            p.center_nm = c;
            p.sigma_nm = 30.0 + 20.0 * rng.u01();
            p.amplitude = 0.25 + 0.3 * rng.u01();
            s.peaks.push_back(p);
        }
    }
    return out;
}

void SynthConfig::validate() const {
    if (subjects < 1) throw ConfigError("synth: subjects must be >= 1");
    if (images_per_subject < 1) throw ConfigError("synth: images_per_subject must be >= 1");
    if (classes < 1 || classes > 254) throw ConfigError("synth: classes must be in [1, 254]");
    if (width < 1 || height < 1) throw ConfigError("synth: frame size must be positive");
    if (channels < 1) throw ConfigError("synth: channels must be >= 1");
    if (!class_spectra.empty() && static_cast<int>(class_spectra.size()) != classes)
        throw ConfigError("synth: class_spectra size must match classes");
    if (blob_min < 1 || blob_max < blob_min) throw ConfigError("synth: invalid blob count range");
    if (noise_std < 0.0 || noise_sigma_px < 0.0 || subject_shift_scale < 0.0 || unsure_border < 0)
        throw ConfigError("synth: noise/shift/border parameters must be non-negative");
}

SynthImage generate_synthetic_image(const SynthConfig& cfg, int subject, int image) {
    cfg.validate();
    const int w = cfg.width, h = cfg.height, C = cfg.channels;
    std::vector<ClassSpectrum> generated;
    if (cfg.class_spectra.empty()) generated = default_class_spectra(cfg.classes, cfg.seed);
    const std::vector<ClassSpectrum>& use = cfg.class_spectra.empty() ? generated : cfg.class_spectra;

    Rng rng(Rng::mix(cfg.seed, {kStreamImage, static_cast<uint64_t>(subject), static_cast<uint64_t>(image)}));
    std::vector<uint8_t> geom = voronoi_geometry(cfg, rng);
    geom = majority_pass(geom, w, h, cfg.classes);
    std::vector<uint8_t> labels = apply_unsure_border(geom, w, h, cfg.unsure_border);

    SubjectShift shift = subject_shift(cfg, subject);
    std::vector<double> lam = hsi_wavelengths(C);

    // Per-class spectra under this subject's shift, sampled on the band grid.
    std::vector<std::vector<double>> profile(cfg.classes, std::vector<double>(C));
    for (int o = 0; o < cfg.classes; ++o)
        for (int c = 0; c < C; ++c) {
            double t = (lam[c] - 750.0) / 250.0; // -1..1 across the range
            profile[o][c] = use[o].eval(lam[c]) * shift.amplitude + shift.tilt * t;
        }

    std::vector<std::vector<double>> planes(C, std::vector<double>(static_cast<size_t>(w) * h));
    for (int c = 0; c < C; ++c) {
        std::vector<double>& plane = planes[c];
        for (size_t i = 0; i < plane.size(); ++i) plane[i] = profile[geom[i]][c];
        add_noise_plane(plane, w, h, cfg, rng);
        for (double& v : plane) v = std::max(0.0, v);
    }

    SynthImage out;
    out.hsi = make_cube(w, h, Modality::HSI, lam);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < C; ++c)
                out.hsi.at(x, y, c) = static_cast<float>(planes[c][static_cast<size_t>(y) * w + x]);

    // RGB: mean reflectance over three band windows (nearest band if a window
    // is empty at coarse spectral resolution).
    struct Window {
        double lo, hi, rep;
    };
    const Window win[3] = {{600.0, 700.0, 650.0}, {530.0, 600.0, 565.0}, {500.0, 530.0, 515.0}};
    out.rgb = make_cube(w, h, Modality::RGB, {win[0].rep, win[1].rep, win[2].rep});
    for (int k = 0; k < 3; ++k) {
        std::vector<int> bands;
        for (int c = 0; c < C; ++c)
            if (lam[c] >= win[k].lo && lam[c] < win[k].hi) bands.push_back(c);
        if (bands.empty()) {
            int nearest = 0;
            for (int c = 1; c < C; ++c)
                if (std::abs(lam[c] - win[k].rep) < std::abs(lam[nearest] - win[k].rep)) nearest = c;
            bands.push_back(nearest);
        }
        for (size_t i = 0; i < static_cast<size_t>(w) * h; ++i) {
            double acc = 0.0;
            for (int c : bands) acc += planes[c][i];
            out.rgb.data[i * 3 + k] = static_cast<float>(acc / bands.size());
        }
    }

    // TPI: four normalized Gaussian band averages (oxygenation-style indices).
    const double tpi_center[4] = {550.0, 650.0, 760.0, 950.0};
    const double tpi_sigma[4] = {30.0, 30.0, 40.0, 40.0};
    out.tpi = make_cube(w, h, Modality::TPI, {550.0, 650.0, 760.0, 950.0});
    for (int k = 0; k < 4; ++k) {
        std::vector<double> wgt(C);
        double sum = 0.0;
        for (int c = 0; c < C; ++c) {
            double z = (lam[c] - tpi_center[k]) / tpi_sigma[k];
            wgt[c] = std::exp(-0.5 * z * z);
            sum += wgt[c];
        }
        for (int c = 0; c < C; ++c) wgt[c] /= sum;
        for (size_t i = 0; i < static_cast<size_t>(w) * h; ++i) {
            double acc = 0.0;
            for (int c = 0; c < C; ++c) acc += wgt[c] * planes[c][i];
            out.tpi.data[i * 4 + k] = static_cast<float>(acc);
        }
    }

    out.labels.width = w;
    out.labels.height = h;
    out.labels.labels = std::move(labels);
    return out;
}

DatasetIndex generate_synthetic_dataset(const SynthConfig& cfg, const std::filesystem::path& out_dir) {
    cfg.validate();
    std::filesystem::create_directories(out_dir);

    DatasetIndex index;
    index.root = out_dir;
    for (int o = 0; o < cfg.classes; ++o) {
        ClassInfo info;
        info.id = o;
        info.name = "class_" + zero_pad(o);
        info.color = {static_cast<uint8_t>((37 * o + 80) % 256), static_cast<uint8_t>((91 * o + 40) % 256),
                      static_cast<uint8_t>((151 * o + 60) % 256)};
        index.classes.classes.push_back(info);
    }

    for (int s = 0; s < cfg.subjects; ++s) {
        SubjectRecord subject;
        subject.id = "P" + zero_pad(s);
        std::filesystem::create_directories(out_dir / subject.id);
        for (int i = 0; i < cfg.images_per_subject; ++i) {
            SynthImage img = generate_synthetic_image(cfg, s, i);
            ImageRecord rec;
            rec.name = subject.id + "_I" + zero_pad(i);
            rec.hsi_path = subject.id + "/I" + zero_pad(i) + "_hsi.cube";
            rec.tpi_path = subject.id + "/I" + zero_pad(i) + "_tpi.cube";
            rec.rgb_path = subject.id + "/I" + zero_pad(i) + "_rgb.cube";
            rec.label_path = subject.id + "/I" + zero_pad(i) + "_labels.map";
            write_cube(img.hsi, out_dir / rec.hsi_path);
            write_cube(img.tpi, out_dir / rec.tpi_path);
            write_cube(img.rgb, out_dir / rec.rgb_path);
            write_labels(img.labels, out_dir / rec.label_path);
            subject.images.push_back(rec);
        }
        index.subjects.push_back(subject);
    }

    write_index(index, out_dir / "index.json");
    return index;
}

} // namespace spectraseg
