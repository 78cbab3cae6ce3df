#include "spectraseg/models.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace spectraseg {

using nlohmann::json;

namespace {

void expect(bool cond, const std::string& msg) {
    if (!cond) throw ConfigError(msg);
}

void add_conv2d_block(nn::Network& net, int cin, int cout) {
    net.add(nn::conv2d(cin, cout, 3, 1));
    net.add(nn::batchnorm(cout));
    net.add(nn::elu());
}

void add_unet_encoder(nn::Network& net, int in_channels, int base, bool with_skips) {
    int cin = in_channels;
    for (int level = 0; level < 3; ++level) {
        int w = base << level;
        add_conv2d_block(net, cin, w);
        add_conv2d_block(net, w, w);
        if (with_skips) net.add(nn::save_skip());
        net.add(nn::maxpool2d(2));
        cin = w;
    }
    add_conv2d_block(net, 4 * base, 4 * base); // bottom
}

} // namespace

const char* model_kind_name(ModelKind k) {
    switch (k) {
        case ModelKind::Pixel: return "pixel";
        case ModelKind::Superpixel: return "superpixel";
        case ModelKind::Patch32: return "patch_32";
        case ModelKind::Patch64: return "patch_64";
        case ModelKind::Image: return "image";
    }
    return "?";
}

ModelKind model_kind_from_name(const std::string& name) {
    for (ModelKind k : {ModelKind::Pixel, ModelKind::Superpixel, ModelKind::Patch32,
                        ModelKind::Patch64, ModelKind::Image})
        if (name == model_kind_name(k)) return k;
    throw ConfigError("unknown model kind: " + name);
}

int patch_size(ModelKind k) {
    if (k == ModelKind::Patch32) return 32;
    if (k == ModelKind::Patch64) return 64;
    return 0;
}

json ModelMeta::to_json() const {
    return {{"kind", model_kind_name(kind)},   {"modality", modality_name(modality)},
            {"classes", classes},              {"in_channels", in_channels},
            {"base_channels", base_channels},  {"sp_input_size", sp_input_size}};
}

ModelMeta ModelMeta::from_json(const json& j) {
    ModelMeta m;
    m.kind = model_kind_from_name(j.at("kind").get<std::string>());
    m.modality = modality_from_name(j.at("modality").get<std::string>());
    m.classes = j.at("classes").get<int>();
    m.in_channels = j.at("in_channels").get<int>();
    m.base_channels = j.value("base_channels", 8);
    m.sp_input_size = j.value("sp_input_size", 32);
    return m;
}

nn::Network build_pixel_net(Modality m, int in_channels, int classes) {
    expect(in_channels > 0 && classes > 0, "pixel net: bad geometry");
    nn::Network net;
    int features = in_channels;
    if (m == Modality::HSI) {
        expect(in_channels >= 5, "hsi pixel net needs at least 5 spectral channels");
        const int widths[3] = {64, 32, 16};
        int len = in_channels, ch = 1;
        for (int block = 0; block < 3; ++block) {
            if (len < 5) break; // spectrum too short for another k=5 conv
            net.add(nn::conv1d(ch, widths[block], 5, 0));
            net.add(nn::batchnorm(widths[block]));
            net.add(nn::elu());
            len -= 4;
            ch = widths[block];
            if (len >= 2) {
                net.add(nn::avgpool1d(2));
                len /= 2;
            }
        }
        net.add(nn::flatten());
        features = ch * len;
        for (int width : {100, 50}) {
            net.add(nn::fully_connected(features, width));
            net.add(nn::batchnorm(width));
            net.add(nn::elu());
            net.add(nn::dropout(0.1));
            features = width;
        }
    } else {
        for (int width : {200, 100, 50}) {
            net.add(nn::fully_connected(features, width));
            net.add(nn::batchnorm(width));
            net.add(nn::elu());
            net.add(nn::dropout(0.1));
            features = width;
        }
    }
    net.add(nn::fully_connected(features, classes));
    return net;
}

nn::Network build_unet(int in_channels, int classes, int base_channels) {
    expect(in_channels > 0 && classes > 0 && base_channels > 0, "unet: bad geometry");
    nn::Network net;
    add_unet_encoder(net, in_channels, base_channels, /*with_skips=*/true);
    int cur = 4 * base_channels;
    for (int level = 2; level >= 0; --level) {
        int w = base_channels << level;
        net.add(nn::upsample2d_bilinear(2));
        net.add(nn::concat_skip()); // channels: cur + w
        add_conv2d_block(net, cur + w, w);
        add_conv2d_block(net, w, w);
        cur = w;
    }
    net.add(nn::conv2d(base_channels, classes, 1, 0));
    return net;
}

nn::Network build_superpixel_net(int in_channels, int classes, int base_channels) {
    expect(in_channels > 0 && classes > 0 && base_channels > 0, "superpixel net: bad geometry");
    nn::Network net;
    add_unet_encoder(net, in_channels, base_channels, /*with_skips=*/false);
    net.add(nn::global_avgpool2d());
    net.add(nn::dropout(0.1));
    net.add(nn::fully_connected(4 * base_channels, classes));
    return net;
}

nn::Network build_model(const ModelMeta& meta) {
    switch (meta.kind) {
        case ModelKind::Pixel:
            return build_pixel_net(meta.modality, meta.in_channels, meta.classes);
        case ModelKind::Superpixel:
            return build_superpixel_net(meta.in_channels, meta.classes, meta.base_channels);
        case ModelKind::Patch32:
        case ModelKind::Patch64:
        case ModelKind::Image:
            return build_unet(meta.in_channels, meta.classes, meta.base_channels);
    }
    throw ConfigError("unknown model kind");
}

std::vector<double> class_weights(const std::vector<int64_t>& counts) {
    expect(!counts.empty(), "class_weights: empty count table");
    bool any = false;
    for (int64_t c : counts) {
        expect(c >= 0, "class_weights: negative count");
        any = any || c > 0;
    }
    expect(any, "class_weights: all counts are zero");
    std::vector<double> w(counts.size());
    double sum = 0;
    for (size_t i = 0; i < counts.size(); ++i) {
        w[i] = 1.0 / static_cast<double>(std::max<int64_t>(counts[i], 1));
        sum += w[i];
    }
    double mean = sum / static_cast<double>(counts.size());
    for (double& v : w) v /= mean;
    return w;
}

void save_model(nn::Network& net, const ModelMeta& meta, const std::filesystem::path& path) {
    net.save(path);
    std::filesystem::path meta_path = path;
    meta_path += ".meta.json";
    std::ofstream out(meta_path);
    if (!out) throw IoError(IoError::Kind::MissingFile, "cannot write " + meta_path.string());
    out << meta.to_json().dump(2) << '\n';
}

LoadedModel load_model(const std::filesystem::path& path) {
    std::filesystem::path meta_path = path;
    meta_path += ".meta.json";
    std::ifstream in(meta_path);
    if (!in) throw IoError(IoError::Kind::MissingFile, "missing model meta: " + meta_path.string());
    json j = json::parse(in, nullptr, false);
    if (j.is_discarded())
        throw IoError(IoError::Kind::MalformedHeader, "bad model meta: " + meta_path.string());
    LoadedModel m{nn::Network::load(path), ModelMeta::from_json(j)};
    return m;
}

PatchGrid patch_grid(int width, int height, int patch) {
    expect(width > 0 && height > 0 && patch > 0, "patch_grid: bad geometry");
    PatchGrid g;
    g.nx = (width + patch - 1) / patch;
    g.ny = (height + patch - 1) / patch;
    g.padded_w = g.nx * patch;
    g.padded_h = g.ny * patch;
    return g;
}

namespace {

int round_up(int v, int m) { return (v + m - 1) / m * m; }

SegmentationPrediction make_prediction(int width, int height, int classes) {
    SegmentationPrediction p;
    p.labels = LabelMap(width, height);
    p.classes = classes;
    p.scores.assign(static_cast<size_t>(width) * height * classes, 0.f);
    return p;
}

// argmax with lowest-id tie break
int argmax_row(const double* v, int n) {
    int best = 0;
    for (int i = 1; i < n; ++i)
        if (v[i] > v[best]) best = i;
    return best;
}

void commit_site(SegmentationPrediction& out, int x, int y, const double* probs) {
    const int O = out.classes;
    size_t base = (static_cast<size_t>(y) * out.labels.width + x) * O;
    for (int o = 0; o < O; ++o) out.scores[base + o] = static_cast<float>(probs[o]);
    out.labels.at(x, y) = static_cast<uint8_t>(argmax_row(probs, O));
}

SegmentationPrediction predict_pixel(nn::Network& net, const ModelMeta& meta, const Datacube& cube) {
    const int O = meta.classes, C = cube.channels;
    const bool spectral = meta.modality == Modality::HSI;
    SegmentationPrediction out = make_prediction(cube.width, cube.height, O);
    const size_t total = cube.pixel_count();
    const size_t batch = 512;
    std::vector<double> row(O);
    for (size_t start = 0; start < total; start += batch) {
        const int n = static_cast<int>(std::min(batch, total - start));
        nn::Tensor x(spectral ? std::vector<int>{n, 1, C} : std::vector<int>{n, C});
        for (int i = 0; i < n; ++i)
            for (int c = 0; c < C; ++c)
                x[static_cast<size_t>(i) * C + c] = cube.data[(start + i) * C + c];
        nn::Context ctx;
        nn::Tensor p = nn::softmax(net.forward(x, ctx));
        for (int i = 0; i < n; ++i) {
            size_t pix = start + i;
            for (int o = 0; o < O; ++o) row[o] = p[static_cast<size_t>(i) * O + o];
            commit_site(out, static_cast<int>(pix % cube.width), static_cast<int>(pix / cube.width),
                        row.data());
        }
    }
    return out;
}

// dense canvas forward: cube region copied into a zero-padded CHW tensor
nn::Tensor cube_window_chw(const Datacube& cube, int x0, int y0, int w, int h) {
    nn::Tensor t({1, cube.channels, h, w});
    for (int c = 0; c < cube.channels; ++c)
        for (int y = 0; y < h; ++y) {
            int sy = y0 + y;
            if (sy >= cube.height) break;
            for (int x = 0; x < w; ++x) {
                int sx = x0 + x;
                if (sx >= cube.width) break;
                t[(static_cast<size_t>(c) * h + y) * w + x] = cube.at(sx, sy, c);
            }
        }
    return t;
}

void commit_window(SegmentationPrediction& out, const nn::Tensor& probs, int x0, int y0) {
    const int O = out.classes, h = probs.dim(2), w = probs.dim(3);
    std::vector<double> row(O);
    for (int y = 0; y < h && y0 + y < out.labels.height; ++y)
        for (int x = 0; x < w && x0 + x < out.labels.width; ++x) {
            for (int o = 0; o < O; ++o) row[o] = probs[(static_cast<size_t>(o) * h + y) * w + x];
            commit_site(out, x0 + x, y0 + y, row.data());
        }
}

SegmentationPrediction predict_dense(nn::Network& net, const ModelMeta& meta, const Datacube& cube) {
    const int P = patch_size(meta.kind);
    SegmentationPrediction out = make_prediction(cube.width, cube.height, meta.classes);
    if (P > 0) {
        PatchGrid g = patch_grid(cube.width, cube.height, P);
        for (int ty = 0; ty < g.ny; ++ty)
            for (int tx = 0; tx < g.nx; ++tx) {
                nn::Tensor x = cube_window_chw(cube, tx * P, ty * P, P, P);
                nn::Context ctx;
                nn::Tensor p = nn::softmax(net.forward(x, ctx));
                commit_window(out, p, tx * P, ty * P);
            }
    } else {
        int wp = round_up(cube.width, 8), hp = round_up(cube.height, 8);
        nn::Tensor x = cube_window_chw(cube, 0, 0, wp, hp);
        nn::Context ctx;
        nn::Tensor p = nn::softmax(net.forward(x, ctx));
        commit_window(out, p, 0, 0);
    }
    return out;
}

SegmentationPrediction predict_superpixel(nn::Network& net, const ModelMeta& meta, const Datacube& cube,
                                          const SuperpixelDecomposition& sp) {
    expect(sp.map.width == cube.width && sp.map.height == cube.height,
           "superpixel prediction: decomposition does not match the cube");
    const int O = meta.classes;
    std::vector<double> seg_probs(static_cast<size_t>(sp.count()) * O);
    for (int s = 0; s < sp.count(); ++s) {
        Datacube crop = extract_superpixel_cube(cube, sp, s, meta.sp_input_size);
        nn::Tensor x = cube_window_chw(crop, 0, 0, crop.width, crop.height);
        nn::Context ctx;
        nn::Tensor p = nn::softmax(net.forward(x, ctx));
        for (int o = 0; o < O; ++o) seg_probs[static_cast<size_t>(s) * O + o] = p[o];
    }
    SegmentationPrediction out = make_prediction(cube.width, cube.height, O);
    for (int y = 0; y < cube.height; ++y)
        for (int x = 0; x < cube.width; ++x)
            commit_site(out, x, y, &seg_probs[static_cast<size_t>(sp.map.at(x, y)) * O]);
    return out;
}

} // namespace

SegmentationPrediction predict(nn::Network& net, const ModelMeta& meta, const Datacube& cube,
                               const SuperpixelDecomposition* sp) {
    expect(cube.modality == meta.modality,
           std::string("modality mismatch: model expects ") + modality_name(meta.modality) +
               ", cube is " + modality_name(cube.modality));
    expect(cube.channels == meta.in_channels,
           "channel mismatch: model expects " + std::to_string(meta.in_channels) + ", cube has " +
               std::to_string(cube.channels));
    switch (meta.kind) {
        case ModelKind::Pixel:
            return predict_pixel(net, meta, cube);
        case ModelKind::Superpixel:
            expect(sp != nullptr, "superpixel prediction needs a decomposition");
            return predict_superpixel(net, meta, cube, *sp);
        case ModelKind::Patch32:
        case ModelKind::Patch64:
        case ModelKind::Image:
            return predict_dense(net, meta, cube);
    }
    throw ConfigError("unknown model kind");
}

SegmentationPrediction ensemble(const std::vector<SegmentationPrediction>& members) {
    expect(!members.empty(), "ensemble: no members");
    const SegmentationPrediction& head = members.front();
    const int W = head.labels.width, H = head.labels.height, O = head.classes;
    std::vector<double> acc(static_cast<size_t>(W) * H * O, 0.0);
    for (const SegmentationPrediction& m : members) {
        expect(m.labels.width == W && m.labels.height == H && m.classes == O,
               "ensemble: member shapes differ");
        expect(m.has_scores(), "ensemble: member lacks softmax scores");
        for (size_t i = 0; i < acc.size(); ++i) acc[i] += m.scores[i];
    }
    for (double& v : acc) v /= static_cast<double>(members.size());
    SegmentationPrediction out = make_prediction(W, H, O);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) commit_site(out, x, y, &acc[(static_cast<size_t>(y) * W + x) * O]);
    return out;
}

} // namespace spectraseg
