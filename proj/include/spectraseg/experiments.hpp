#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "spectraseg/cube.hpp"
#include "spectraseg/train.hpp"

namespace spectraseg {

// Classes annotated (non-IGNORE) anywhere in a subject's label maps.
struct SubjectClasses {
    std::string subject;
    std::vector<int> classes; // ascending
};
std::vector<SubjectClasses> subject_class_presence(const DatasetIndex& index);

// Classes annotated in every listed subject.
std::vector<int> common_classes(const std::vector<SubjectClasses>& presence,
                                const std::vector<std::string>& subjects);

struct FoldPlan {
    std::vector<std::string> train_subjects;
    std::vector<std::string> val_subjects; // V_unknown
    // one image withheld from each training subject (V_known)
    std::vector<std::pair<std::string, std::string>> known_images; // (subject, image)
};

struct SplitPlan {
    std::vector<std::string> train_subjects;
    std::vector<std::string> test_subjects;
    std::vector<FoldPlan> folds;

    nlohmann::json to_json() const;
    static SplitPlan from_json(const nlohmann::json& j);
};

// Subject-level k-fold split. Test subjects (~1/4) are held out first; the
// fold assignment is the seeded feasible candidate minimizing the variance
// of per-class subject counts across folds. Every class keeps at least one
// subject in each fold's train and validation partition; every training
// subject donates one image to V_known. Throws ConfigError with the
// violating class when no candidate satisfies the constraints.
SplitPlan make_splits(const DatasetIndex& index, int k, uint64_t seed);

// Structural guard: test/train subject disjointness, fold partitions, and
// known-image membership. Throws ConfigError on the first violation.
void check_leakage(const SplitPlan& plan, const DatasetIndex& index);

// Materialized file lists for one fold. `segments_dir`, when given, must
// hold "<image>.seg" segment maps (required by the superpixel kind).
struct FoldData {
    TrainData data;
    std::vector<TrainImage> test;
};
FoldData assemble_fold(const DatasetIndex& index, const SplitPlan& plan, int fold, Modality m,
                       const std::filesystem::path& segments_dir = {});

TrainImage image_ref(const DatasetIndex& index, const SubjectRecord& subject,
                     const ImageRecord& image, Modality m,
                     const std::filesystem::path& segments_dir = {});

// Spectral channel count of the stored cubes for a modality.
int modality_channels(const DatasetIndex& index, Modality m);

// --- evaluation helpers -----------------------------------------------------------

// class -> image -> subject hierarchical DSC. `classes` empty scores every
// annotated class; otherwise images are restricted to that subset (images
// annotating none of them are skipped).
struct SubjectDsc {
    std::string subject;
    double dsc = 0.0;
};
struct DscSummary {
    std::vector<SubjectDsc> subjects;
    double mean = 0.0;
};
DscSummary hierarchical_dsc(nn::Network& net, const ModelMeta& meta, const DatasetIndex& index,
                            const std::vector<std::string>& subjects,
                            const std::vector<int>& classes = {},
                            const std::filesystem::path& segments_dir = {});

// --- generalization tracking -------------------------------------------------------

struct GeneralizationTrack {
    std::vector<double> known;   // per-epoch DSC on V_known
    std::vector<double> unknown; // per-epoch DSC on V_unknown
    std::vector<double> gap;     // known - unknown
    TrainResult result;
};

// Trains with both validation sets attached and extracts the per-epoch
// series. Requires non-empty val_known and val_unknown.
GeneralizationTrack track_generalization(ModelKind kind, Modality modality,
                                         const TrainConfig& cfg, const TrainData& data,
                                         int num_classes, int in_channels);

// --- training-set-size study --------------------------------------------------------

struct DataSizeConfig {
    int n_min = 1;
    int n_max = 0; // 0 -> all train subjects - 1
    int repeats = 5;
    uint64_t seed = 0;
};

struct DataSizeRun {
    ModelKind kind = ModelKind::Pixel;
    Modality modality = Modality::HSI;
    int n = 0;
    int repeat = 0;
    std::vector<std::string> subjects; // sampled without replacement
    double test_dsc = 0.0;             // on the common-class subset
};

// Per (kind, n, repeat): train one model on the sampled subjects' images
// (one image per subject held out for model selection, no folds, no
// ensembling) and score the test subjects on the classes common to all
// training subjects.
std::vector<DataSizeRun> run_datasize_study(
    const DatasetIndex& index, const SplitPlan& plan,
    const std::vector<std::pair<ModelKind, Modality>>& kinds, const TrainConfig& base,
    const DataSizeConfig& study, const std::filesystem::path& segments_dir = {});

// --- seed variability ----------------------------------------------------------------

struct SeedRun {
    uint64_t seed = 0;
    double test_dsc = 0.0;
};
struct SeedVariability {
    std::vector<SeedRun> runs;
    double min_dsc = 0.0;
    double max_dsc = 0.0;
};

// n_runs identical trainings on fold 0 differing only in the seed
// (base.seed + run), scored on the test subjects.
SeedVariability seed_variability(const DatasetIndex& index, const SplitPlan& plan, ModelKind kind,
                                 Modality modality, const TrainConfig& base, int n_runs,
                                 const std::filesystem::path& segments_dir = {});

} // namespace spectraseg
