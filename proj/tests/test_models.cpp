#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "spectraseg/common.hpp"
#include "spectraseg/models.hpp"
#include "test_util.hpp"

using namespace spectraseg;
namespace nn = spectraseg::nn;

namespace {

Datacube random_cube(int w, int h, int c, Modality m, uint64_t seed) {
    Datacube cube(w, h, c, m);
    if (m == Modality::HSI)
        for (int i = 0; i < c; ++i) cube.wavelengths.push_back(500.f + 490.f * (i + 1) / c);
    Rng rng(seed);
    for (float& v : cube.data) v = static_cast<float>(rng.u01());
    return cube;
}

nn::Tensor random_tensor(std::vector<int> shape, Rng& rng) {
    nn::Tensor t(std::move(shape));
    for (double& v : t.v) v = rng.uniform(-1.0, 1.0);
    return t;
}

} // namespace

TEST_CASE("pixel nets reproduce the published parameter counts") {
    nn::Network hsi = build_pixel_net(Modality::HSI, 100, 19);
    nn::Network rgb = build_pixel_net(Modality::RGB, 3, 19);
    nn::Network tpi = build_pixel_net(Modality::TPI, 4, 19);
    CHECK(hsi.count_parameters() == 34275);
    CHECK(rgb.count_parameters() == 27619);
    CHECK(tpi.count_parameters() == 27819);
}

TEST_CASE("hsi pixel net spectral length arithmetic") {
    // 100 -> conv 96 -> pool 48 -> conv 44 -> pool 22 -> conv 18 -> pool 9,
    // flatten 16*9 = 144
    nn::Network net = build_pixel_net(Modality::HSI, 100, 19);
    bool found_fc144 = false;
    for (size_t i = 0; i < net.depth(); ++i) {
        auto spec = net.layer(i).spec();
        if (spec["type"] == "fc" && spec["in"] == 144) found_fc144 = true;
    }
    CHECK(found_fc144);

    Rng rng(1);
    net.init_params(rng);
    nn::Context ctx;
    nn::Tensor y = net.forward(random_tensor({4, 1, 100}, rng), ctx);
    CHECK(y.shape == std::vector<int>{4, 19});
}

TEST_CASE("pixel net adapts to short spectra") {
    nn::Network net = build_pixel_net(Modality::HSI, 16, 6);
    Rng rng(2);
    net.init_params(rng);
    nn::Context ctx;
    nn::Tensor y = net.forward(random_tensor({3, 1, 16}, rng), ctx);
    CHECK(y.shape == std::vector<int>{3, 6});
    CHECK_THROWS_AS(build_pixel_net(Modality::HSI, 4, 6), ConfigError);

    nn::Network mlp = build_pixel_net(Modality::TPI, 4, 6);
    nn::Tensor y2 = mlp.forward(random_tensor({2, 4}, rng), ctx);
    CHECK(y2.shape == std::vector<int>{2, 6});
}

TEST_CASE("unet forward shapes") {
    SUBCASE("32x32 in, 32x32 logits out") {
        nn::Network net = build_unet(5, 7, 4);
        Rng rng(3);
        net.init_params(rng);
        nn::Context ctx;
        nn::Tensor y = net.forward(random_tensor({2, 5, 32, 32}, rng), ctx);
        CHECK(y.shape == std::vector<int>{2, 7, 32, 32});
    }
    SUBCASE("toy 8x8 gradient check") {
        for (uint64_t seed : {11u, 12u, 13u}) {
            nn::Network net = build_unet(2, 2, 1);
            Rng rng(seed);
            net.init_params(rng);
            nn::Tensor x = random_tensor({1, 2, 8, 8}, rng);
            std::vector<int> targets(64);
            for (int i = 0; i < 64; ++i) targets[i] = static_cast<int>(rng.below(2));
            auto loss = [&](const nn::Tensor& y) { return nn::cross_entropy(y, targets); };
            auto rep = nn::gradcheck(net, x, loss, Rng(seed + 100));
            CAPTURE(seed);
            CHECK(rep.max_rel_err <= 1e-4);
        }
    }
}

TEST_CASE("patch grid arithmetic") {
    PatchGrid g = patch_grid(640, 480, 64);
    CHECK(g.nx == 10);
    CHECK(g.ny == 8);
    CHECK(g.padded_w == 640);  // 640 = 10*64, no horizontal padding
    CHECK(g.padded_h == 512);  // 480 -> padded to 512
    PatchGrid g32 = patch_grid(640, 480, 32);
    CHECK(g32.nx * g32.ny == 300);
}

TEST_CASE("class weights") {
    CHECK(class_weights({10, 10}) == std::vector<double>{1.0, 1.0});
    auto w = class_weights({10, 30});
    CHECK(w[0] == doctest::Approx(1.5));
    CHECK(w[1] == doctest::Approx(0.5));

    auto clamped = class_weights({0, 5});
    CHECK(std::isfinite(clamped[0]));
    CHECK(clamped[0] > clamped[1]);
    double mean = (clamped[0] + clamped[1]) / 2.0;
    CHECK(mean == doctest::Approx(1.0));

    CHECK_THROWS_AS(class_weights({0, 0, 0}), ConfigError);
    CHECK_THROWS_AS(class_weights({}), ConfigError);
}

TEST_CASE("prediction kinds") {
    const int classes = 5;

    SUBCASE("constant-input pixel net gives a constant map") {
        ModelMeta meta{ModelKind::Pixel, Modality::HSI, classes, 16, 8, 32};
        nn::Network net = build_model(meta);
        Rng rng(7);
        net.init_params(rng);
        Datacube cube(9, 6, 16, Modality::HSI);
        for (int i = 0; i < 16; ++i) cube.wavelengths.push_back(500.f + 30.f * i);
        std::fill(cube.data.begin(), cube.data.end(), 0.25f);
        SegmentationPrediction p = predict(net, meta, cube);
        REQUIRE(p.labels.labels.size() == cube.pixel_count());
        for (uint8_t l : p.labels.labels) CHECK(l == p.labels.labels[0]);
        CHECK(p.labels.labels[0] < classes); // never IGNORE
    }

    SUBCASE("pixel prediction batching does not depend on batch boundaries") {
        ModelMeta meta{ModelKind::Pixel, Modality::RGB, classes, 3, 8, 32};
        nn::Network net = build_model(meta);
        Rng rng(8);
        net.init_params(rng);
        Datacube cube = random_cube(40, 30, 3, Modality::RGB, 81);
        SegmentationPrediction p = predict(net, meta, cube);
        // recompute one pixel alone and compare scores
        int x = 17, y = 23;
        nn::Tensor one({1, 3});
        for (int c = 0; c < 3; ++c) one[c] = cube.at(x, y, c);
        nn::Context ctx;
        nn::Tensor probs = nn::softmax(net.forward(one, ctx));
        for (int o = 0; o < classes; ++o)
            CHECK(p.score_at(x, y, o) == doctest::Approx(probs[o]).epsilon(1e-6));
    }

    SUBCASE("image model pads to a multiple of 8 and crops back") {
        ModelMeta meta{ModelKind::Image, Modality::RGB, classes, 3, 2, 32};
        nn::Network net = build_model(meta);
        Rng rng(9);
        net.init_params(rng);
        Datacube cube = random_cube(50, 36, 3, Modality::RGB, 82);
        SegmentationPrediction p = predict(net, meta, cube);
        CHECK(p.labels.width == 50);
        CHECK(p.labels.height == 36);
        CHECK(p.scores.size() == 50u * 36u * classes);
        // labels must be the argmax of the stored scores
        for (int y = 0; y < 36; y += 7)
            for (int x = 0; x < 50; x += 7) {
                int best = 0;
                for (int o = 1; o < classes; ++o)
                    if (p.score_at(x, y, o) > p.score_at(x, y, best)) best = o;
                CHECK(p.labels.at(x, y) == best);
            }
    }

    SUBCASE("patch model tiles without overlap") {
        ModelMeta meta{ModelKind::Patch32, Modality::RGB, classes, 3, 2, 32};
        nn::Network net = build_model(meta);
        Rng rng(10);
        net.init_params(rng);
        Datacube cube = random_cube(48, 40, 3, Modality::RGB, 83);
        SegmentationPrediction p = predict(net, meta, cube);
        CHECK(p.labels.width == 48);
        CHECK(p.labels.height == 40);

        // a pixel interior to the first tile must equal a direct forward of
        // that zero-padded tile: patches see no context beyond themselves
        nn::Tensor tile({1, 3, 32, 32});
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < 32; ++y)
                for (int x = 0; x < 32; ++x)
                    tile[(static_cast<size_t>(c) * 32 + y) * 32 + x] = cube.at(x, y, c);
        nn::Context ctx;
        nn::Tensor probs = nn::softmax(net.forward(tile, ctx));
        for (int o = 0; o < classes; ++o)
            CHECK(p.score_at(5, 6, o) ==
                  doctest::Approx(probs[(static_cast<size_t>(o) * 32 + 6) * 32 + 5]).epsilon(1e-6));
    }

    SUBCASE("superpixel prediction is constant per segment") {
        ModelMeta meta{ModelKind::Superpixel, Modality::HSI, classes, 6, 4, 16};
        nn::Network net = build_model(meta);
        Rng rng(11);
        net.init_params(rng);
        Datacube cube = random_cube(24, 24, 6, Modality::HSI, 84);

        Datacube rgb = random_cube(24, 24, 3, Modality::RGB, 85);
        SlicoOptions opts;
        opts.n_segments = 9;
        SuperpixelDecomposition dec = slico(rgb, opts);

        SegmentationPrediction p = predict(net, meta, cube, &dec);
        for (int y = 0; y < 24; ++y)
            for (int x = 0; x < 24; ++x) {
                int s = dec.map.at(x, y);
                // same segment -> same label as the segment's first pixel
                for (int yy = 0; yy <= y; ++yy)
                    for (int xx = 0; xx < 24; ++xx)
                        if (dec.map.at(xx, yy) == s) {
                            CHECK(p.labels.at(x, y) == p.labels.at(xx, yy));
                            yy = y + 1;
                            xx = 24;
                        }
            }
        CHECK_THROWS_AS(predict(net, meta, cube, nullptr), ConfigError);
    }

    SUBCASE("modality and channel mismatches are rejected") {
        ModelMeta meta{ModelKind::Pixel, Modality::RGB, classes, 3, 8, 32};
        nn::Network net = build_model(meta);
        Datacube hsi = random_cube(4, 4, 16, Modality::HSI, 86);
        CHECK_THROWS_AS(predict(net, meta, hsi), ConfigError);
        Datacube thin(4, 4, 3, Modality::TPI); // right width, wrong modality
        CHECK_THROWS_AS(predict(net, meta, thin), ConfigError);
    }
}

TEST_CASE("ensembling") {
    auto make_pred = [](int w, int h, int classes, uint64_t seed) {
        SegmentationPrediction p;
        p.labels = LabelMap(w, h);
        p.classes = classes;
        p.scores.resize(static_cast<size_t>(w) * h * classes);
        Rng rng(seed);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                double sum = 0;
                std::vector<double> row(classes);
                for (int o = 0; o < classes; ++o) {
                    row[o] = rng.uniform(0.01, 1.0);
                    sum += row[o];
                }
                int best = 0;
                for (int o = 0; o < classes; ++o) {
                    row[o] /= sum;
                    p.scores[(static_cast<size_t>(y) * w + x) * classes + o] =
                        static_cast<float>(row[o]);
                    if (row[o] > row[best]) best = o;
                }
                p.labels.at(x, y) = static_cast<uint8_t>(best);
            }
        return p;
    };

    SUBCASE("single member is the identity") {
        SegmentationPrediction p = make_pred(6, 4, 3, 1);
        SegmentationPrediction e = ensemble({p});
        CHECK(e.labels.labels == p.labels.labels);
    }

    SUBCASE("symmetric swapped confidences tie to the lowest class id") {
        SegmentationPrediction a = make_pred(1, 1, 2, 2);
        SegmentationPrediction b = a;
        a.scores = {0.9f, 0.1f};
        b.scores = {0.1f, 0.9f};
        a.labels.at(0, 0) = 0;
        b.labels.at(0, 0) = 1;
        SegmentationPrediction e = ensemble({a, b});
        CHECK(e.labels.at(0, 0) == 0);
    }

    SUBCASE("five members match a brute-force mean-then-argmax oracle") {
        std::vector<SegmentationPrediction> members;
        for (uint64_t s = 1; s <= 5; ++s) members.push_back(make_pred(8, 5, 4, 100 + s));
        SegmentationPrediction e = ensemble(members);
        for (int y = 0; y < 5; ++y)
            for (int x = 0; x < 8; ++x) {
                double best_v = -1;
                int best = -1;
                for (int o = 0; o < 4; ++o) {
                    double m = 0;
                    for (const auto& mem : members) m += mem.score_at(x, y, o);
                    m /= 5.0;
                    CHECK(e.score_at(x, y, o) == doctest::Approx(m).epsilon(1e-6));
                    if (m > best_v) {
                        best_v = m;
                        best = o;
                    }
                }
                CHECK(e.labels.at(x, y) == best);
            }
    }

    SUBCASE("empty and mismatched inputs are rejected") {
        CHECK_THROWS_AS(ensemble({}), ConfigError);
        SegmentationPrediction a = make_pred(2, 2, 3, 7);
        SegmentationPrediction b = make_pred(3, 2, 3, 8);
        CHECK_THROWS_AS(ensemble({a, b}), ConfigError);
    }
}

TEST_CASE("model save/load round trip with metadata") {
    testutil::TempDir tmp("models");
    ModelMeta meta{ModelKind::Patch32, Modality::TPI, 6, 4, 2, 32};
    nn::Network net = build_model(meta);
    Rng rng(5);
    net.init_params(rng);

    Datacube cube = random_cube(32, 32, 4, Modality::TPI, 55);
    SegmentationPrediction before = predict(net, meta, cube);

    auto path = tmp / "patch32.ckpt";
    save_model(net, meta, path);
    LoadedModel loaded = load_model(path);
    CHECK(loaded.meta.kind == ModelKind::Patch32);
    CHECK(loaded.meta.modality == Modality::TPI);
    CHECK(loaded.meta.classes == 6);

    SegmentationPrediction after = predict(loaded.net, loaded.meta, cube);
    CHECK(after.labels.labels == before.labels.labels);
    CHECK(after.scores == before.scores);

    CHECK_THROWS_AS(load_model(tmp / "nope.ckpt"), IoError);
}

TEST_CASE("model kind names round trip") {
    for (ModelKind k : {ModelKind::Pixel, ModelKind::Superpixel, ModelKind::Patch32,
                        ModelKind::Patch64, ModelKind::Image})
        CHECK(model_kind_from_name(model_kind_name(k)) == k);
    CHECK_THROWS_AS(model_kind_from_name("voxel"), ConfigError);
    CHECK(patch_size(ModelKind::Patch64) == 64);
    CHECK(patch_size(ModelKind::Image) == 0);
}
