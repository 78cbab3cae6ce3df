#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <set>

#include "spectraseg/experiments.hpp"
#include "spectraseg/synth.hpp"
#include "test_util.hpp"

using namespace spectraseg;

namespace {

SynthConfig tiny_synth(int subjects, uint64_t seed) {
    SynthConfig cfg;
    cfg.subjects = subjects;
    cfg.images_per_subject = 4;
    cfg.classes = 3;
    cfg.width = 16;
    cfg.height = 16;
    cfg.channels = 6;
    cfg.subject_shift_scale = 0.0;
    cfg.noise_std = 0.005;
    cfg.seed = seed;
    return cfg;
}

TrainConfig quick_train(int epochs) {
    TrainConfig cfg;
    cfg.epochs = epochs;
    cfg.epoch_size = 96;
    cfg.batch_size = 6;
    cfg.workers = 3;
    cfg.seed = 5;
    cfg.adam.lr0 = 0.01;
    return cfg;
}

// index with label maps only; enough for presence and split planning
DatasetIndex label_only_index(const testutil::TempDir& tmp, int subjects, int images,
                              const std::vector<std::vector<int>>& extra_class_of) {
    DatasetIndex index;
    index.root = tmp.path;
    for (int c = 0; c < 3; ++c) index.classes.classes.push_back({c, "c" + std::to_string(c), {}});
    for (int s = 0; s < subjects; ++s) {
        SubjectRecord rec;
        rec.id = "s" + std::to_string(s);
        for (int i = 0; i < images; ++i) {
            LabelMap lm(4, 4, 0);
            for (int y = 0; y < 4; ++y)
                for (int x = 2; x < 4; ++x) lm.at(x, y) = 1;
            for (int extra : extra_class_of[s]) lm.at(0, 0) = static_cast<uint8_t>(extra);
            std::string rel = rec.id + "_" + std::to_string(i) + ".labels";
            write_labels(lm, tmp / rel);
            rec.images.push_back({"img" + std::to_string(i), "", "", "", rel});
        }
        index.subjects.push_back(std::move(rec));
    }
    return index;
}

} // namespace

TEST_CASE("class presence and common classes") {
    testutil::TempDir tmp("exp_presence");
    DatasetIndex index = label_only_index(tmp, 3, 2, {{2}, {}, {2}});
    std::vector<SubjectClasses> presence = subject_class_presence(index);
    REQUIRE(presence.size() == 3);
    CHECK(presence[0].classes == std::vector<int>{0, 1, 2});
    CHECK(presence[1].classes == std::vector<int>{0, 1});
    CHECK(presence[2].classes == std::vector<int>{0, 1, 2});

    CHECK(common_classes(presence, {"s0", "s1", "s2"}) == std::vector<int>{0, 1});
    CHECK(common_classes(presence, {"s0", "s2"}) == std::vector<int>{0, 1, 2});
    CHECK_THROWS_AS(common_classes(presence, {"nope"}), ConfigError);
}

TEST_CASE("make_splits satisfies the partition constraints") {
    testutil::TempDir tmp("exp_splits");
    DatasetIndex index = generate_synthetic_dataset(tiny_synth(8, 3), tmp.path);
    SplitPlan plan = make_splits(index, 3, 17);

    CHECK(plan.test_subjects.size() == 2);
    CHECK(plan.train_subjects.size() == 6);
    REQUIRE(plan.folds.size() == 3);

    std::vector<SubjectClasses> presence = subject_class_presence(index);
    auto covered = [&](const std::vector<std::string>& subjects) {
        std::set<int> got;
        for (const SubjectClasses& sc : presence)
            if (std::count(subjects.begin(), subjects.end(), sc.subject))
                got.insert(sc.classes.begin(), sc.classes.end());
        return got.size();
    };
    for (const FoldPlan& fold : plan.folds) {
        CHECK(!fold.val_subjects.empty());
        CHECK(fold.train_subjects.size() + fold.val_subjects.size() == 6);
        CHECK(covered(fold.train_subjects) == 3);
        CHECK(covered(fold.val_subjects) == 3);
        // every training subject donates exactly one known-validation image
        REQUIRE(fold.known_images.size() == fold.train_subjects.size());
        for (size_t i = 0; i < fold.known_images.size(); ++i)
            CHECK(fold.known_images[i].first == fold.train_subjects[i]);
    }
    CHECK_NOTHROW(check_leakage(plan, index));

    // deterministic plan, stable round trip
    SplitPlan again = make_splits(index, 3, 17);
    CHECK(plan.to_json().dump() == again.to_json().dump());
    CHECK(SplitPlan::from_json(plan.to_json()).to_json().dump() == plan.to_json().dump());

    SplitPlan other = make_splits(index, 3, 99);
    CHECK_NOTHROW(check_leakage(other, index));
}

TEST_CASE("an unrepresentable class names itself in the error") {
    testutil::TempDir tmp("exp_infeasible");
    // class 2 lives in three subjects; k=3 folds cannot all see it on both sides
    DatasetIndex index = label_only_index(tmp, 6, 2, {{2}, {2}, {2}, {}, {}, {}});
    CHECK_THROWS_WITH_AS(make_splits(index, 3, 1), doctest::Contains("c2"), ConfigError);
}

TEST_CASE("leakage checks reject corrupted plans") {
    testutil::TempDir tmp("exp_leak");
    DatasetIndex index = generate_synthetic_dataset(tiny_synth(8, 3), tmp.path);
    SplitPlan plan = make_splits(index, 2, 17);

    SplitPlan bad = plan;
    bad.test_subjects.push_back(bad.train_subjects[0]);
    CHECK_THROWS_WITH_AS(check_leakage(bad, index), doctest::Contains("train and test"),
                         ConfigError);

    bad = plan;
    bad.folds[0].val_subjects.push_back(bad.folds[0].train_subjects[0]);
    CHECK_THROWS_AS(check_leakage(bad, index), ConfigError);

    bad = plan;
    bad.folds[0].known_images[0].second = "missing";
    CHECK_THROWS_WITH_AS(check_leakage(bad, index), doctest::Contains("missing"), ConfigError);
}

TEST_CASE("assemble_fold materializes disjoint image lists") {
    testutil::TempDir tmp("exp_fold");
    DatasetIndex index = generate_synthetic_dataset(tiny_synth(6, 4), tmp.path);
    SplitPlan plan = make_splits(index, 2, 9);
    FoldData fold = assemble_fold(index, plan, 0, Modality::RGB);

    const FoldPlan& fp = plan.folds[0];
    CHECK(fold.data.train.size() == fp.train_subjects.size() * 3); // 4 images - 1 known
    CHECK(fold.data.val_known.size() == fp.train_subjects.size());
    CHECK(fold.data.val.size() == fp.val_subjects.size() * 4);
    CHECK(fold.data.val_unknown.size() == fold.data.val.size());
    CHECK(fold.test.size() == plan.test_subjects.size() * 4);

    std::set<std::string> train_cubes;
    for (const TrainImage& t : fold.data.train) {
        CHECK(t.cube.string().find("rgb") != std::string::npos);
        train_cubes.insert(t.cube.string());
    }
    for (const TrainImage& t : fold.data.val) CHECK(!train_cubes.count(t.cube.string()));
    for (const TrainImage& t : fold.data.val_known) CHECK(!train_cubes.count(t.cube.string()));
    for (const TrainImage& t : fold.test) CHECK(!train_cubes.count(t.cube.string()));

    CHECK(modality_channels(index, Modality::RGB) == 3);
    CHECK(modality_channels(index, Modality::HSI) == 6);
    CHECK(modality_channels(index, Modality::TPI) == 4);
    CHECK_THROWS_AS(assemble_fold(index, plan, 5, Modality::RGB), ConfigError);
}

TEST_CASE("generalization tracking returns one gap per epoch") {
    testutil::TempDir tmp("exp_track");
    DatasetIndex index = generate_synthetic_dataset(tiny_synth(6, 11), tmp.path);
    SplitPlan plan = make_splits(index, 2, 4);
    FoldData fold = assemble_fold(index, plan, 0, Modality::RGB);

    GeneralizationTrack track =
        track_generalization(ModelKind::Pixel, Modality::RGB, quick_train(3), fold.data, 3, 3);
    REQUIRE(track.known.size() == 3);
    REQUIRE(track.unknown.size() == 3);
    REQUIRE(track.gap.size() == 3);
    for (size_t e = 0; e < 3; ++e) {
        CHECK(std::isfinite(track.known[e]));
        CHECK(std::isfinite(track.unknown[e]));
        CHECK(track.gap[e] == doctest::Approx(track.known[e] - track.unknown[e]));
    }

    // the trained model scores every test subject
    DscSummary summary =
        hierarchical_dsc(track.result.best, track.result.meta, index, plan.test_subjects);
    REQUIRE(summary.subjects.size() == plan.test_subjects.size());
    double mean = 0.0;
    for (const SubjectDsc& s : summary.subjects) {
        CHECK(s.dsc >= 0.0);
        CHECK(s.dsc <= 1.0);
        mean += s.dsc;
    }
    CHECK(summary.mean == doctest::Approx(mean / summary.subjects.size()));

    TrainData no_known = fold.data;
    no_known.val_known.clear();
    CHECK_THROWS_AS(
        track_generalization(ModelKind::Pixel, Modality::RGB, quick_train(1), no_known, 3, 3),
        ConfigError);
}

TEST_CASE("datasize study samples without replacement, deterministically") {
    testutil::TempDir tmp("exp_datasize");
    DatasetIndex index = generate_synthetic_dataset(tiny_synth(5, 23), tmp.path);
    SplitPlan plan = make_splits(index, 2, 6);
    REQUIRE(plan.train_subjects.size() == 4);

    DataSizeConfig study;
    study.n_min = 1;
    study.n_max = 2;
    study.repeats = 2;
    study.seed = 13;

    std::vector<DataSizeRun> runs = run_datasize_study(
        index, plan, {{ModelKind::Pixel, Modality::RGB}}, quick_train(2), study);
    REQUIRE(runs.size() == 4); // n in {1,2} x 2 repeats

    for (const DataSizeRun& run : runs) {
        CHECK(run.subjects.size() == static_cast<size_t>(run.n));
        std::set<std::string> unique(run.subjects.begin(), run.subjects.end());
        CHECK(unique.size() == run.subjects.size());
        for (const std::string& s : run.subjects)
            CHECK(std::count(plan.train_subjects.begin(), plan.train_subjects.end(), s) == 1);
        CHECK(run.test_dsc >= 0.0);
        CHECK(run.test_dsc <= 1.0);
    }

    std::vector<DataSizeRun> rerun = run_datasize_study(
        index, plan, {{ModelKind::Pixel, Modality::RGB}}, quick_train(2), study);
    for (size_t i = 0; i < runs.size(); ++i) {
        CHECK(rerun[i].subjects == runs[i].subjects);
        CHECK(rerun[i].test_dsc == runs[i].test_dsc);
    }

    study.n_max = 4; // as many as the training pool -> no held-out novelty
    CHECK_THROWS_AS(run_datasize_study(index, plan, {{ModelKind::Pixel, Modality::RGB}},
                                       quick_train(2), study),
                    ConfigError);
}

TEST_CASE("seed variability reports the dsc range") {
    testutil::TempDir tmp("exp_seeds");
    DatasetIndex index = generate_synthetic_dataset(tiny_synth(5, 31), tmp.path);
    SplitPlan plan = make_splits(index, 2, 2);

    SeedVariability var =
        seed_variability(index, plan, ModelKind::Pixel, Modality::RGB, quick_train(2), 2);
    REQUIRE(var.runs.size() == 2);
    CHECK(var.runs[0].seed == 5);
    CHECK(var.runs[1].seed == 6);
    CHECK(var.min_dsc <= var.max_dsc);
    CHECK(var.min_dsc == std::min(var.runs[0].test_dsc, var.runs[1].test_dsc));
    CHECK(var.max_dsc == std::max(var.runs[0].test_dsc, var.runs[1].test_dsc));
}
