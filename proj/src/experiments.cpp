#include "spectraseg/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "spectraseg/metrics.hpp"
#include "spectraseg/superpixel.hpp"

namespace spectraseg {

namespace {

constexpr uint64_t kStreamSplit = 0x53504c54; // "SPLT"
constexpr uint64_t kStreamKnown = 0x4b4e4f57; // "KNOW"
constexpr uint64_t kStreamSize = 0x53495a45;  // "SIZE"

constexpr int kSplitAttempts = 200;

std::set<int> label_classes(const LabelMap& lm) {
    std::set<int> out;
    for (uint8_t v : lm.labels)
        if (v != kIgnoreLabel) out.insert(v);
    return out;
}

const SubjectRecord& subject_of(const DatasetIndex& index, const std::string& id) {
    const SubjectRecord* s = index.find_subject(id);
    if (!s) throw ConfigError("experiments: unknown subject '" + id + "'");
    return *s;
}

using PresenceMap = std::map<std::string, std::set<int>>;

PresenceMap presence_map(const DatasetIndex& index) {
    PresenceMap out;
    for (const SubjectClasses& sc : subject_class_presence(index))
        out[sc.subject].insert(sc.classes.begin(), sc.classes.end());
    return out;
}

std::set<int> coverage(const PresenceMap& presence, const std::vector<std::string>& subjects) {
    std::set<int> out;
    for (const std::string& s : subjects) {
        auto it = presence.find(s);
        if (it != presence.end()) out.insert(it->second.begin(), it->second.end());
    }
    return out;
}

// first class of `universe` missing from `got`, -1 when covered
int missing_class(const std::set<int>& universe, const std::set<int>& got) {
    for (int c : universe)
        if (!got.count(c)) return c;
    return -1;
}

// keeps the original index order of `index` for a stable on-disk plan
std::vector<std::string> in_index_order(const DatasetIndex& index,
                                        const std::set<std::string>& wanted) {
    std::vector<std::string> out;
    for (const SubjectRecord& s : index.subjects)
        if (wanted.count(s.id)) out.push_back(s.id);
    return out;
}

double count_variance(const std::vector<int>& counts) {
    double mean = 0.0;
    for (int c : counts) mean += c;
    mean /= static_cast<double>(counts.size());
    double var = 0.0;
    for (int c : counts) var += (c - mean) * (c - mean);
    return var / static_cast<double>(counts.size());
}

std::string class_name(const DatasetIndex& index, int cls) {
    for (const ClassInfo& ci : index.classes.classes)
        if (ci.id == cls) return ci.name;
    return std::to_string(cls);
}

void hold_one_out(const SubjectRecord& subject, Rng& rng, std::vector<const ImageRecord*>& train,
                  const ImageRecord*& held) {
    if (subject.images.size() < 2)
        throw ConfigError("experiments: subject '" + subject.id +
                          "' needs at least two images to hold one out");
    size_t idx = static_cast<size_t>(rng.below(subject.images.size()));
    held = &subject.images[idx];
    for (size_t i = 0; i < subject.images.size(); ++i)
        if (i != idx) train.push_back(&subject.images[i]);
}

} // namespace

std::vector<SubjectClasses> subject_class_presence(const DatasetIndex& index) {
    std::vector<SubjectClasses> out;
    for (const SubjectRecord& s : index.subjects) {
        std::set<int> seen;
        for (const ImageRecord& img : s.images) {
            std::set<int> cls = label_classes(read_labels(index.resolve(img.label_path)));
            seen.insert(cls.begin(), cls.end());
        }
        out.push_back({s.id, std::vector<int>(seen.begin(), seen.end())});
    }
    return out;
}

std::vector<int> common_classes(const std::vector<SubjectClasses>& presence,
                                const std::vector<std::string>& subjects) {
    std::map<std::string, const SubjectClasses*> by_id;
    for (const SubjectClasses& sc : presence) by_id[sc.subject] = &sc;
    std::vector<int> common;
    bool first = true;
    for (const std::string& id : subjects) {
        auto it = by_id.find(id);
        if (it == by_id.end()) throw ConfigError("experiments: unknown subject '" + id + "'");
        const std::vector<int>& cls = it->second->classes;
        if (first) {
            common = cls;
            first = false;
        } else {
            std::vector<int> kept;
            std::set_intersection(common.begin(), common.end(), cls.begin(), cls.end(),
                                  std::back_inserter(kept));
            common = std::move(kept);
        }
    }
    return common;
}

nlohmann::json SplitPlan::to_json() const {
    nlohmann::json jfolds = nlohmann::json::array();
    for (const FoldPlan& f : folds) {
        nlohmann::json known = nlohmann::json::array();
        for (const auto& [subject, image] : f.known_images)
            known.push_back(nlohmann::json::array({subject, image}));
        jfolds.push_back({{"train", f.train_subjects},
                          {"val", f.val_subjects},
                          {"known", std::move(known)}});
    }
    return {{"train", train_subjects}, {"test", test_subjects}, {"folds", std::move(jfolds)}};
}

SplitPlan SplitPlan::from_json(const nlohmann::json& j) {
    SplitPlan plan;
    plan.train_subjects = j.at("train").get<std::vector<std::string>>();
    plan.test_subjects = j.at("test").get<std::vector<std::string>>();
    for (const nlohmann::json& jf : j.at("folds")) {
        FoldPlan f;
        f.train_subjects = jf.at("train").get<std::vector<std::string>>();
        f.val_subjects = jf.at("val").get<std::vector<std::string>>();
        for (const nlohmann::json& k : jf.at("known"))
            f.known_images.emplace_back(k.at(0).get<std::string>(), k.at(1).get<std::string>());
        plan.folds.push_back(std::move(f));
    }
    return plan;
}

SplitPlan make_splits(const DatasetIndex& index, int k, uint64_t seed) {
    if (k < 2) throw ConfigError("make_splits: k must be at least 2");
    int n = static_cast<int>(index.subjects.size());
    int test_count = std::max(1, static_cast<int>(std::lround(n * 0.25)));
    if (n - test_count < k)
        throw ConfigError("make_splits: " + std::to_string(n) + " subjects leave fewer than k=" +
                          std::to_string(k) + " for training");

    PresenceMap presence = presence_map(index);
    std::set<int> universe;
    for (const auto& [id, cls] : presence) universe.insert(cls.begin(), cls.end());
    if (universe.empty()) throw ConfigError("make_splits: dataset has no annotated classes");

    std::vector<std::string> all_ids;
    for (const SubjectRecord& s : index.subjects) all_ids.push_back(s.id);

    // test holdout: first seeded shuffle whose two sides both cover every class
    SplitPlan plan;
    int last_missing = -1;
    for (int attempt = 0; attempt < kSplitAttempts; ++attempt) {
        Rng rng(Rng::mix(seed, {kStreamSplit, 0x54455354, static_cast<uint64_t>(attempt)}));
        std::vector<std::string> shuffled = all_ids;
        rng.shuffle(shuffled);
        std::vector<std::string> test(shuffled.begin(), shuffled.begin() + test_count);
        std::vector<std::string> train(shuffled.begin() + test_count, shuffled.end());
        int miss_train = missing_class(universe, coverage(presence, train));
        int miss_test = missing_class(universe, coverage(presence, test));
        if (miss_train >= 0 || miss_test >= 0) {
            last_missing = miss_train >= 0 ? miss_train : miss_test;
            continue;
        }
        plan.test_subjects = in_index_order(index, {test.begin(), test.end()});
        plan.train_subjects = in_index_order(index, {train.begin(), train.end()});
        break;
    }
    if (plan.train_subjects.empty())
        throw ConfigError("make_splits: class '" + class_name(index, last_missing) +
                          "' cannot be covered by both the train and test split");

    // fold assignment: best feasible candidate by per-class count variance
    double best_score = 0.0;
    std::vector<FoldPlan> best;
    last_missing = -1;
    std::string last_where;
    for (int attempt = 0; attempt < kSplitAttempts; ++attempt) {
        Rng rng(Rng::mix(seed, {kStreamSplit, 0x464f4c44, static_cast<uint64_t>(attempt)}));
        std::vector<std::string> shuffled = plan.train_subjects;
        rng.shuffle(shuffled);

        std::vector<FoldPlan> folds(static_cast<size_t>(k));
        for (size_t i = 0; i < shuffled.size(); ++i)
            folds[i % static_cast<size_t>(k)].val_subjects.push_back(shuffled[i]);
        bool feasible = true;
        for (int f = 0; f < k && feasible; ++f) {
            std::set<std::string> val(folds[f].val_subjects.begin(), folds[f].val_subjects.end());
            std::set<std::string> rest;
            for (const std::string& id : plan.train_subjects)
                if (!val.count(id)) rest.insert(id);
            folds[f].val_subjects = in_index_order(index, val);
            folds[f].train_subjects = in_index_order(index, rest);
            int miss = missing_class(universe, coverage(presence, folds[f].train_subjects));
            if (miss >= 0) {
                last_missing = miss;
                last_where = "train partition of fold " + std::to_string(f);
                feasible = false;
                break;
            }
            miss = missing_class(universe, coverage(presence, folds[f].val_subjects));
            if (miss >= 0) {
                last_missing = miss;
                last_where = "validation partition of fold " + std::to_string(f);
                feasible = false;
            }
        }
        if (!feasible) continue;

        double score = 0.0;
        for (int c : universe) {
            std::vector<int> train_counts, val_counts;
            for (const FoldPlan& f : folds) {
                int tc = 0, vc = 0;
                for (const std::string& id : f.train_subjects) tc += presence[id].count(c);
                for (const std::string& id : f.val_subjects) vc += presence[id].count(c);
                train_counts.push_back(tc);
                val_counts.push_back(vc);
            }
            score += count_variance(train_counts) + count_variance(val_counts);
        }
        if (best.empty() || score < best_score) {
            best_score = score;
            best = std::move(folds);
        }
    }
    if (best.empty())
        throw ConfigError("make_splits: class '" + class_name(index, last_missing) +
                          "' cannot be represented in every partition (" + last_where + ")");
    plan.folds = std::move(best);

    for (size_t f = 0; f < plan.folds.size(); ++f) {
        Rng rng(Rng::mix(seed, {kStreamKnown, static_cast<uint64_t>(f)}));
        for (const std::string& id : plan.folds[f].train_subjects) {
            const SubjectRecord& s = subject_of(index, id);
            if (s.images.size() < 2)
                throw ConfigError("experiments: subject '" + id +
                                  "' needs at least two images to hold one out");
            size_t idx = static_cast<size_t>(rng.below(s.images.size()));
            plan.folds[f].known_images.emplace_back(id, s.images[idx].name);
        }
    }

    check_leakage(plan, index);
    return plan;
}

void check_leakage(const SplitPlan& plan, const DatasetIndex& index) {
    std::set<std::string> train(plan.train_subjects.begin(), plan.train_subjects.end());
    for (const std::string& id : plan.test_subjects)
        if (train.count(id))
            throw ConfigError("leakage: subject '" + id + "' is in both train and test");

    for (size_t f = 0; f < plan.folds.size(); ++f) {
        const FoldPlan& fold = plan.folds[f];
        std::set<std::string> fold_train(fold.train_subjects.begin(), fold.train_subjects.end());
        std::set<std::string> seen = fold_train;
        for (const std::string& id : fold.val_subjects) {
            if (fold_train.count(id))
                throw ConfigError("leakage: subject '" + id + "' is trained and validated in fold " +
                                  std::to_string(f));
            seen.insert(id);
        }
        if (seen != train)
            throw ConfigError("leakage: fold " + std::to_string(f) +
                              " does not partition the training subjects");
        for (const auto& [subject, image] : fold.known_images) {
            if (!fold_train.count(subject))
                throw ConfigError("leakage: known-validation image of '" + subject +
                                  "' outside the train partition of fold " + std::to_string(f));
            const SubjectRecord& s = subject_of(index, subject);
            bool found = false;
            for (const ImageRecord& img : s.images) found = found || img.name == image;
            if (!found)
                throw ConfigError("leakage: unknown image '" + image + "' for subject '" +
                                  subject + "'");
        }
    }
}

TrainImage image_ref(const DatasetIndex& index, const SubjectRecord& subject,
                     const ImageRecord& image, Modality m,
                     const std::filesystem::path& segments_dir) {
    TrainImage ref;
    ref.name = subject.id + "/" + image.name;
    ref.cube = index.resolve(image.cube_path(m));
    ref.labels = index.resolve(image.label_path);
    if (!segments_dir.empty()) ref.segments = segments_dir / (image.name + ".seg");
    return ref;
}

FoldData assemble_fold(const DatasetIndex& index, const SplitPlan& plan, int fold, Modality m,
                       const std::filesystem::path& segments_dir) {
    if (fold < 0 || fold >= static_cast<int>(plan.folds.size()))
        throw ConfigError("assemble_fold: fold " + std::to_string(fold) + " out of range");
    check_leakage(plan, index);
    const FoldPlan& fp = plan.folds[static_cast<size_t>(fold)];

    std::map<std::string, std::string> known;
    for (const auto& [subject, image] : fp.known_images) known[subject] = image;

    FoldData out;
    for (const std::string& id : fp.train_subjects) {
        const SubjectRecord& s = subject_of(index, id);
        for (const ImageRecord& img : s.images) {
            TrainImage ref = image_ref(index, s, img, m, segments_dir);
            if (known.count(id) && known[id] == img.name)
                out.data.val_known.push_back(ref);
            else
                out.data.train.push_back(ref);
        }
    }
    for (const std::string& id : fp.val_subjects) {
        const SubjectRecord& s = subject_of(index, id);
        for (const ImageRecord& img : s.images)
            out.data.val.push_back(image_ref(index, s, img, m, segments_dir));
    }
    out.data.val_unknown = out.data.val;
    for (const std::string& id : plan.test_subjects) {
        const SubjectRecord& s = subject_of(index, id);
        for (const ImageRecord& img : s.images)
            out.test.push_back(image_ref(index, s, img, m, segments_dir));
    }

    std::set<std::string> train_files;
    for (const TrainImage& t : out.data.train) train_files.insert(t.cube.string());
    for (const std::vector<TrainImage>* held : {&out.data.val, &out.data.val_known, &out.test})
        for (const TrainImage& t : *held)
            if (train_files.count(t.cube.string()))
                throw ConfigError("leakage: '" + t.name + "' is both trained on and held out");
    return out;
}

int modality_channels(const DatasetIndex& index, Modality m) {
    for (const SubjectRecord& s : index.subjects)
        for (const ImageRecord& img : s.images)
            return read_cube(index.resolve(img.cube_path(m))).channels;
    throw ConfigError("experiments: dataset has no images");
}

DscSummary hierarchical_dsc(nn::Network& net, const ModelMeta& meta, const DatasetIndex& index,
                            const std::vector<std::string>& subjects,
                            const std::vector<int>& classes,
                            const std::filesystem::path& segments_dir) {
    if (subjects.empty()) throw ConfigError("hierarchical_dsc: no subjects");
    DscSummary out;
    for (const std::string& id : subjects) {
        const SubjectRecord& s = subject_of(index, id);
        double subject_sum = 0.0;
        int scored_images = 0;
        for (const ImageRecord& img : s.images) {
            LabelMap ref = read_labels(index.resolve(img.label_path));
            std::set<int> present = label_classes(ref);
            std::vector<int> wanted;
            for (int c : present)
                if (classes.empty() || std::count(classes.begin(), classes.end(), c))
                    wanted.push_back(c);
            if (wanted.empty()) continue;

            Datacube cube = read_cube(index.resolve(img.cube_path(meta.modality)));
            SegmentationPrediction pred;
            if (meta.kind == ModelKind::Superpixel) {
                SuperpixelDecomposition dec =
                    segments_dir.empty()
                        ? slico(read_cube(index.resolve(img.rgb_path)))
                        : decomposition_from_map(
                              read_segment_map(segments_dir / (img.name + ".seg")));
                pred = predict(net, meta, cube, &dec);
            } else {
                pred = predict(net, meta, cube);
            }

            double image_sum = 0.0;
            for (int c : wanted) image_sum += dsc(pred.labels, ref, c);
            subject_sum += image_sum / static_cast<double>(wanted.size());
            ++scored_images;
        }
        if (scored_images == 0) continue;
        out.subjects.push_back({id, subject_sum / scored_images});
    }
    if (out.subjects.empty())
        throw ConfigError("hierarchical_dsc: no evaluable images in the chosen subjects");
    for (const SubjectDsc& s : out.subjects) out.mean += s.dsc;
    out.mean /= static_cast<double>(out.subjects.size());
    return out;
}

GeneralizationTrack track_generalization(ModelKind kind, Modality modality,
                                         const TrainConfig& cfg, const TrainData& data,
                                         int num_classes, int in_channels) {
    if (data.val_known.empty() || data.val_unknown.empty())
        throw ConfigError("track_generalization: both validation sets must be non-empty");
    GeneralizationTrack track;
    track.result = train_model(kind, modality, cfg, data, num_classes, in_channels);
    for (const EpochStats& e : track.result.history) {
        track.known.push_back(e.known_dsc);
        track.unknown.push_back(e.unknown_dsc);
        track.gap.push_back(e.known_dsc - e.unknown_dsc);
    }
    return track;
}

std::vector<DataSizeRun> run_datasize_study(
    const DatasetIndex& index, const SplitPlan& plan,
    const std::vector<std::pair<ModelKind, Modality>>& kinds, const TrainConfig& base,
    const DataSizeConfig& study, const std::filesystem::path& segments_dir) {
    if (kinds.empty()) throw ConfigError("datasize: no model kinds requested");
    int n_train = static_cast<int>(plan.train_subjects.size());
    int n_max = study.n_max > 0 ? study.n_max : n_train - 1;
    if (n_max >= n_train)
        throw ConfigError("datasize: n=" + std::to_string(n_max) + " needs more than the " +
                          std::to_string(n_train) + " available training subjects");
    if (study.n_min < 1 || study.n_min > n_max)
        throw ConfigError("datasize: empty n range");
    if (study.repeats < 1) throw ConfigError("datasize: repeats must be positive");

    std::vector<SubjectClasses> presence = subject_class_presence(index);
    std::vector<int> common = common_classes(presence, plan.train_subjects);
    if (common.empty())
        throw ConfigError("datasize: no class is present in every training subject");

    int num_classes = index.classes.size();
    std::vector<DataSizeRun> runs;
    for (const auto& [kind, modality] : kinds) {
        int in_channels = modality_channels(index, modality);
        for (int n = study.n_min; n <= n_max; ++n) {
            for (int r = 0; r < study.repeats; ++r) {
                Rng rng(Rng::mix(study.seed, {kStreamSize, static_cast<uint64_t>(n),
                                              static_cast<uint64_t>(r)}));
                std::vector<std::string> pool = plan.train_subjects;
                rng.shuffle(pool);
                std::set<std::string> chosen(pool.begin(), pool.begin() + n);

                TrainData data;
                for (const std::string& id : in_index_order(index, chosen)) {
                    const SubjectRecord& s = subject_of(index, id);
                    std::vector<const ImageRecord*> train_imgs;
                    const ImageRecord* held = nullptr;
                    hold_one_out(s, rng, train_imgs, held);
                    for (const ImageRecord* img : train_imgs)
                        data.train.push_back(image_ref(index, s, *img, modality, segments_dir));
                    data.val.push_back(image_ref(index, s, *held, modality, segments_dir));
                }

                TrainConfig cfg = base;
                cfg.seed = Rng::mix(study.seed, {kStreamSize, static_cast<uint64_t>(n),
                                                 static_cast<uint64_t>(r), 1});
                TrainResult res = train_model(kind, modality, cfg, data, num_classes, in_channels);

                DataSizeRun run;
                run.kind = kind;
                run.modality = modality;
                run.n = n;
                run.repeat = r;
                run.subjects = in_index_order(index, chosen);
                run.test_dsc = hierarchical_dsc(res.best, res.meta, index, plan.test_subjects,
                                                common, segments_dir)
                                   .mean;
                runs.push_back(std::move(run));
            }
        }
    }
    return runs;
}

SeedVariability seed_variability(const DatasetIndex& index, const SplitPlan& plan, ModelKind kind,
                                 Modality modality, const TrainConfig& base, int n_runs,
                                 const std::filesystem::path& segments_dir) {
    if (n_runs < 1) throw ConfigError("seed_variability: need at least one run");
    FoldData fold = assemble_fold(index, plan, 0, modality, segments_dir);
    int num_classes = index.classes.size();
    int in_channels = modality_channels(index, modality);

    SeedVariability out;
    for (int run = 0; run < n_runs; ++run) {
        TrainConfig cfg = base;
        cfg.seed = base.seed + static_cast<uint64_t>(run);
        TrainResult res = train_model(kind, modality, cfg, fold.data, num_classes, in_channels);
        double dsc = hierarchical_dsc(res.best, res.meta, index, plan.test_subjects, {},
                                      segments_dir)
                         .mean;
        out.runs.push_back({cfg.seed, dsc});
    }
    out.min_dsc = out.max_dsc = out.runs.front().test_dsc;
    for (const SeedRun& r : out.runs) {
        out.min_dsc = std::min(out.min_dsc, r.test_dsc);
        out.max_dsc = std::max(out.max_dsc, r.test_dsc);
    }
    return out;
}

} // namespace spectraseg
