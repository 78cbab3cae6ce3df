#include <cstring>
#include <fstream>
#include <limits>

#include "doctest.h"
#include "spectraseg/cube.hpp"
#include "test_util.hpp"

using namespace spectraseg;
using testutil::TempDir;

namespace {

Datacube small_hsi() {
    Datacube cube(3, 2, 4, Modality::HSI);
    cube.wavelengths = {510.f, 600.f, 750.f, 900.f};
    for (size_t i = 0; i < cube.data.size(); ++i) cube.data[i] = 0.25f * static_cast<float>(i);
    return cube;
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void dump(const std::filesystem::path& p, const std::string& bytes) {
    std::ofstream out(p, std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

} // namespace

TEST_CASE("cube round-trip is bit exact") {
    TempDir tmp("cube_rt");
    Datacube cube = small_hsi();
    write_cube(cube, tmp / "a.cube");
    Datacube back = read_cube(tmp / "a.cube");

    CHECK(back.width == 3);
    CHECK(back.height == 2);
    CHECK(back.channels == 4);
    CHECK(back.modality == Modality::HSI);
    REQUIRE(back.data.size() == cube.data.size());
    CHECK(std::memcmp(back.data.data(), cube.data.data(), cube.data.size() * sizeof(float)) == 0);
    REQUIRE(back.wavelengths.size() == 4);
    CHECK(back.wavelengths[2] == 750.f);
}

TEST_CASE("cube file layout: header line then channel-innermost float32") {
    TempDir tmp("cube_layout");
    Datacube cube = small_hsi();
    write_cube(cube, tmp / "a.cube");
    std::string bytes = slurp(tmp / "a.cube");

    size_t nl = bytes.find('\n');
    REQUIRE(nl != std::string::npos);
    CHECK(bytes.size() - nl - 1 == 3 * 2 * 4 * sizeof(float));

    // (x=2, y=1, ch=3) must live at payload offset ((1*3+2)*4+3)*4 = 92.
    float v = 0;
    std::memcpy(&v, bytes.data() + nl + 1 + 92, sizeof(float));
    CHECK(v == cube.at(2, 1, 3));
}

TEST_CASE("reader distinguishes the three failure kinds") {
    TempDir tmp("cube_err");

    SUBCASE("malformed header") {
        dump(tmp / "bad.cube", "this is not json\n\x01\x02");
        CHECK_THROWS_AS(read_cube(tmp / "bad.cube"), IoError);
        try {
            read_cube(tmp / "bad.cube");
        } catch (const IoError& e) {
            CHECK(e.kind() == IoError::Kind::MalformedHeader);
        }
    }

    SUBCASE("dimension mismatch") {
        dump(tmp / "dim.cube",
             R"({"width":0,"height":2,"channels":4,"modality":"HSI","wavelengths":[1,2,3,4]})"
             "\n");
        try {
            read_cube(tmp / "dim.cube");
            FAIL("expected IoError");
        } catch (const IoError& e) {
            CHECK(e.kind() == IoError::Kind::DimensionMismatch);
        }
    }

    SUBCASE("truncated payload") {
        Datacube cube = small_hsi();
        write_cube(cube, tmp / "t.cube");
        std::string bytes = slurp(tmp / "t.cube");
        dump(tmp / "t.cube", bytes.substr(0, bytes.size() - 2));
        try {
            read_cube(tmp / "t.cube");
            FAIL("expected IoError");
        } catch (const IoError& e) {
            CHECK(e.kind() == IoError::Kind::TruncatedPayload);
        }
    }

    SUBCASE("trailing bytes rejected") {
        Datacube cube = small_hsi();
        write_cube(cube, tmp / "x.cube");
        dump(tmp / "x.cube", slurp(tmp / "x.cube") + "zz");
        CHECK_THROWS_AS(read_cube(tmp / "x.cube"), IoError);
    }

    SUBCASE("missing file") {
        try {
            read_cube(tmp / "nope.cube");
            FAIL("expected IoError");
        } catch (const IoError& e) {
            CHECK(e.kind() == IoError::Kind::MissingFile);
        }
    }
}

TEST_CASE("label and segment maps round-trip with sentinels intact") {
    TempDir tmp("maps");

    LabelMap lm(4, 2);
    lm.labels = {0, 1, 2, 255, 3, 0, 255, 1};
    write_labels(lm, tmp / "l.map");
    LabelMap lback = read_labels(tmp / "l.map");
    CHECK(lback.labels == lm.labels);
    CHECK(lback.width == 4);

    SegmentMap sm;
    sm.width = 2;
    sm.height = 2;
    sm.ids = {0, 1, 100000, -1};
    write_segment_map(sm, tmp / "s.map");
    SegmentMap sback = read_segment_map(tmp / "s.map");
    CHECK(sback.ids == sm.ids);

    // dtype mismatch: a segment map is not readable as labels
    CHECK_THROWS_AS(read_labels(tmp / "s.map"), IoError);
}

TEST_CASE("datacube validation enforces structural invariants") {
    Datacube cube = small_hsi();
    CHECK_NOTHROW(cube.validate());

    SUBCASE("negative reflectance") {
        cube.data[5] = -0.1f;
        CHECK_THROWS_AS(cube.validate(), ConfigError);
    }
    SUBCASE("non-finite value") {
        cube.data[0] = std::numeric_limits<float>::quiet_NaN();
        CHECK_THROWS_AS(cube.validate(), ConfigError);
    }
    SUBCASE("wavelengths must increase") {
        cube.wavelengths = {510.f, 600.f, 600.f, 900.f};
        CHECK_THROWS_AS(cube.validate(), ConfigError);
    }
    SUBCASE("wavelengths must stay in range") {
        cube.wavelengths = {400.f, 600.f, 750.f, 900.f};
        CHECK_THROWS_AS(cube.validate(), ConfigError);
    }
    SUBCASE("rgb needs exactly three channels") {
        Datacube rgb(2, 2, 4, Modality::RGB);
        rgb.wavelengths = {650.f, 565.f, 515.f, 500.f};
        CHECK_THROWS_AS(rgb.validate(), ConfigError);
    }
    SUBCASE("label values above class count rejected") {
        LabelMap lm(2, 1);
        lm.labels = {7, 255};
        CHECK_THROWS_AS(lm.validate(5), ConfigError);
        CHECK_NOTHROW(lm.validate(8));
    }
}

TEST_CASE("index round-trip, resolution and validation") {
    TempDir tmp("index");

    Datacube hsi = small_hsi();
    Datacube tpi(3, 2, 4, Modality::TPI);
    tpi.wavelengths = {550.f, 650.f, 760.f, 950.f};
    Datacube rgb(3, 2, 3, Modality::RGB);
    rgb.wavelengths = {650.f, 565.f, 515.f};
    LabelMap lm(3, 2);

    DatasetIndex index;
    index.root = tmp.path;
    index.classes.classes = {{0, "background", {0, 0, 0}}, {1, "organ", {200, 30, 30}}};
    for (const std::string& sid : {"P00", "P01"}) {
        std::filesystem::create_directories(tmp / sid);
        SubjectRecord subj;
        subj.id = sid;
        ImageRecord rec;
        rec.name = sid + "_I00";
        rec.hsi_path = sid + "/i.cube";
        rec.tpi_path = sid + "/t.cube";
        rec.rgb_path = sid + "/r.cube";
        rec.label_path = sid + "/l.map";
        write_cube(hsi, index.resolve(rec.hsi_path));
        write_cube(tpi, index.resolve(rec.tpi_path));
        write_cube(rgb, index.resolve(rec.rgb_path));
        write_labels(lm, index.resolve(rec.label_path));
        subj.images.push_back(rec);
        index.subjects.push_back(subj);
    }
    write_index(index, tmp / "index.json");

    DatasetIndex back = read_index(tmp / "index.json");
    CHECK(back.image_count() == 2);
    CHECK(back.subjects[1].id == "P01");
    CHECK(back.classes.size() == 2);
    CHECK(back.subjects[0].images[0].cube_path(Modality::TPI) == "P00/t.cube");
    CHECK_NOTHROW(back.validate());

    std::filesystem::remove(tmp / "P01" / "r.cube");
    CHECK_THROWS_AS(back.validate(), IoError);
}

TEST_CASE("class_pixel_counts sums labels per class and skips ignore") {
    TempDir tmp("counts");

    DatasetIndex index;
    index.root = tmp.path;
    index.classes.classes = {{0, "a", {}}, {1, "b", {}}, {2, "c", {}}};

    auto add_subject = [&](const std::string& sid, const std::vector<uint8_t>& vals, int w, int h) {
        LabelMap lm(w, h);
        lm.labels = vals;
        std::filesystem::create_directories(tmp / sid);
        SubjectRecord subj;
        subj.id = sid;
        ImageRecord rec;
        rec.name = sid + "_I00";
        rec.label_path = sid + "/l.map";
        write_labels(lm, index.resolve(rec.label_path));
        subj.images.push_back(rec);
        index.subjects.push_back(subj);
    };
    add_subject("A", {0, 1, 1, 255}, 4, 1);
    add_subject("B", {2, 2, 0, 255}, 2, 2);

    // Hand count: class 0 appears 1+1, class 1 twice in A, class 2 twice in B.
    std::vector<int64_t> counts = class_pixel_counts(index, {"A", "B"});
    CHECK(counts == std::vector<int64_t>{2, 2, 2});

    counts = class_pixel_counts(index, {"B"});
    CHECK(counts == std::vector<int64_t>{1, 0, 2});

    CHECK_THROWS_AS(class_pixel_counts(index, {}), ConfigError);
    CHECK_THROWS_AS(class_pixel_counts(index, {"missing"}), ConfigError);
}
