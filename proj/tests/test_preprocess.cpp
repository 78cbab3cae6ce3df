#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "spectraseg/common.hpp"
#include "spectraseg/preprocess.hpp"

using namespace spectraseg;

namespace {

Datacube toy_cube(int w, int h, int c) {
    Datacube cube(w, h, c, Modality::HSI);
    for (int i = 0; i < c; ++i) cube.wavelengths.push_back(500.f + 490.f * (i + 1) / c);
    return cube;
}

Datacube random_cube(int w, int h, int c, uint64_t seed) {
    Datacube cube = toy_cube(w, h, c);
    Rng rng(seed);
    for (float& v : cube.data) v = static_cast<float>(rng.u01());
    return cube;
}

// Independent brute force: materialize the mirrored neighborhood explicitly
// (own mirroring logic, no shared helper) and take the sorted middle value.
int mirror(int i, int n) {
    if (n == 1) return 0;
    while (i < 0 || i >= n) {
        if (i < 0) i = -i;
        if (i >= n) i = 2 * n - 2 - i;
    }
    return i;
}

Datacube brute_force_median(const Datacube& cube) {
    Datacube out = cube;
    for (int y = 0; y < cube.height; ++y)
        for (int x = 0; x < cube.width; ++x)
            for (int c = 0; c < cube.channels; ++c) {
                std::vector<float> vals;
                for (int dy = -2; dy <= 2; ++dy)
                    for (int dx = -2; dx <= 2; ++dx)
                        for (int dc = -1; dc <= 1; ++dc)
                            vals.push_back(cube.at(mirror(x + dx, cube.width), mirror(y + dy, cube.height),
                                                   mirror(c + dc, cube.channels)));
                std::sort(vals.begin(), vals.end());
                out.at(x, y, c) = vals[vals.size() / 2];
            }
    return out;
}

} // namespace

TEST_CASE("l1 normalization: toy spectrum, idempotence, scale invariance") {
    Datacube cube = toy_cube(2, 1, 4);
    float base[4] = {2.f, 2.f, 4.f, 2.f};
    for (int c = 0; c < 4; ++c) {
        cube.at(0, 0, c) = base[c];
        cube.at(1, 0, c) = base[c] * 7.3f; // scaled copy of the same spectrum
    }

    NormalizeResult r = l1_normalize(cube);
    CHECK(r.zero_pixels == 0);
    const float expected[4] = {0.2f, 0.2f, 0.4f, 0.2f};
    for (int c = 0; c < 4; ++c) {
        CHECK(r.cube.at(0, 0, c) == expected[c]);
        // multiplicative illumination cancels out exactly
        CHECK(r.cube.at(1, 0, c) == r.cube.at(0, 0, c));
    }

    // spectrum already summing to one stays untouched
    Datacube unit = toy_cube(1, 1, 4);
    unit.data = {0.5f, 0.25f, 0.125f, 0.125f};
    NormalizeResult r2 = l1_normalize(unit);
    CHECK(r2.cube.data == unit.data);

    // generic idempotence up to rounding
    Datacube rnd = random_cube(5, 4, 7, 13);
    NormalizeResult once = l1_normalize(rnd);
    NormalizeResult twice = l1_normalize(once.cube);
    for (size_t i = 0; i < rnd.data.size(); ++i)
        CHECK(twice.cube.data[i] == doctest::Approx(once.cube.data[i]).epsilon(1e-6));
}

TEST_CASE("l1 normalization counts all-zero spectra and leaves them intact") {
    Datacube cube = toy_cube(3, 1, 2);
    cube.at(0, 0, 0) = 1.f;
    cube.at(0, 0, 1) = 3.f;
    // pixels 1 and 2 stay all-zero
    NormalizeResult r = l1_normalize(cube);
    CHECK(r.zero_pixels == 2);
    CHECK(r.cube.at(0, 0, 0) == 0.25f);
    CHECK(r.cube.at(1, 0, 0) == 0.f);
    CHECK(r.cube.at(1, 0, 1) == 0.f);

    cube.at(2, 0, 1) = -1.f;
    CHECK_THROWS_AS(l1_normalize(cube), ConfigError);
}

TEST_CASE("median filter: constants, impulse rejection, neighborhood membership") {
    Datacube cube = toy_cube(6, 6, 4);
    for (float& v : cube.data) v = 0.75f;
    Datacube filtered = median_filter_5x5x3(cube);
    CHECK(filtered.data == cube.data);

    Datacube impulse = toy_cube(7, 7, 5);
    impulse.at(3, 3, 2) = 1.f; // interior spike: 1 of 75 window values
    Datacube cleaned = median_filter_5x5x3(impulse);
    for (float v : cleaned.data) CHECK(v == 0.f);

    Datacube rnd = random_cube(7, 7, 5, 99);
    Datacube out = median_filter_5x5x3(rnd);
    for (int y = 0; y < 7; ++y)
        for (int x = 0; x < 7; ++x)
            for (int c = 0; c < 5; ++c) {
                bool member = false;
                for (int dy = -2; dy <= 2 && !member; ++dy)
                    for (int dx = -2; dx <= 2 && !member; ++dx)
                        for (int dc = -1; dc <= 1 && !member; ++dc)
                            member = out.at(x, y, c) ==
                                     rnd.at(mirror(x + dx, 7), mirror(y + dy, 7), mirror(c + dc, 5));
                CHECK(member);
            }
}

TEST_CASE("median filter equals brute-force reflected-neighborhood median") {
    for (uint64_t seed = 0; seed < 50; ++seed) {
        Datacube cube = random_cube(7, 7, 5, 1000 + seed);
        Datacube fast = median_filter_5x5x3(cube);
        Datacube slow = brute_force_median(cube);
        REQUIRE(fast.data == slow.data);
    }
    // degenerate extents exercise the abc|cb fold
    for (auto [w, h, c] : {std::array<int, 3>{1, 1, 1}, {2, 3, 1}, {1, 6, 2}, {4, 1, 3}}) {
        Datacube cube = random_cube(w, h, c, 7);
        CHECK(median_filter_5x5x3(cube).data == brute_force_median(cube).data);
    }
}

TEST_CASE("preprocess chain composes the two stages in the requested order") {
    Datacube cube = random_cube(8, 6, 5, 4242);

    NormalizeResult direct = preprocess_hsi(cube);
    Datacube oracle = median_filter_5x5x3(l1_normalize(cube).cube);
    CHECK(direct.cube.data == oracle.data);
    CHECK(direct.cube.width == cube.width);
    CHECK(direct.cube.channels == cube.channels);

    NormalizeResult reversed = preprocess_hsi(cube, PreprocessOrder::FilterThenNormalize);
    Datacube oracle2 = l1_normalize(median_filter_5x5x3(cube)).cube;
    CHECK(reversed.cube.data == oracle2.data);

    // constant cube: rows of the result sum to 1
    Datacube flat = toy_cube(4, 4, 5);
    for (float& v : flat.data) v = 3.f;
    NormalizeResult r = preprocess_hsi(flat);
    for (size_t p = 0; p < r.cube.pixel_count(); ++p) {
        double sum = 0;
        for (int c = 0; c < 5; ++c) sum += r.cube.data[p * 5 + c];
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
    }

    // zero cube: untouched, every pixel flagged
    Datacube zero = toy_cube(3, 3, 4);
    NormalizeResult z = preprocess_hsi(zero);
    CHECK(z.zero_pixels == 9);
    for (float v : z.cube.data) CHECK(v == 0.f);
}
