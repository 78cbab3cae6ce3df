// spectraseg: single entry point for the synthetic benchmark pipeline.
// Every subcommand reads an optional JSON --config, applies flag overrides,
// and prints one JSON summary line on success. Failures exit nonzero with
// {"error":{"type":...,"message":...}} on stderr.

#include <atomic>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "json.hpp"

#include "spectraseg/experiments.hpp"
#include "spectraseg/metrics.hpp"
#include "spectraseg/preprocess.hpp"
#include "spectraseg/ranking.hpp"
#include "spectraseg/superpixel.hpp"
#include "spectraseg/synth.hpp"
#include "spectraseg/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace spectraseg;

namespace {

struct CommonArgs {
    std::string config;
    uint64_t seed = 0;
    bool seed_set = false;
    int jobs = 1;
    std::string out;
    double scale = 1.0;
    bool dry_run = false;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config, "JSON config file");
    cmd->add_option("--seed", args.seed, "seed override")
        ->each([&args](const std::string&) { args.seed_set = true; });
    cmd->add_option("--jobs", args.jobs, "cap on worker threads")->check(CLI::PositiveNumber);
    cmd->add_option("--out", args.out, "output directory");
    cmd->add_option("--scale", args.scale, "scale factor for epoch sizes")
        ->check(CLI::PositiveNumber);
    cmd->add_flag("--dry-run", args.dry_run, "validate the configuration without side effects");
}

fs::path cache_dir() {
    const char* env = std::getenv("SPECTRASEG_CACHE");
    return env && *env ? fs::path(env) : fs::path(".spectraseg_cache");
}

json load_config(const std::string& path) {
    if (path.empty()) return json::object();
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config: " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ConfigError("config " + path + ": " + e.what());
    }
    if (!j.is_object()) throw ConfigError("config " + path + ": not a JSON object");
    return j;
}

template <typename T>
T get_or(const json& j, const std::string& key, T fallback) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError("config key '" + key + "': " + e.what());
    }
}

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

std::ofstream open_out(const fs::path& path) {
    fs::create_directories(path.parent_path().empty() ? "." : path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError(IoError::Kind::MissingFile, "cannot open for writing: " + path.string());
    return out;
}

fs::path require_out(const CommonArgs& c, const char* cmd) {
    if (c.out.empty()) throw ConfigError(std::string(cmd) + ": --out is required");
    fs::create_directories(c.out);
    return c.out;
}

void parallel_images(int jobs, size_t count, const std::function<void(size_t)>& fn) {
    jobs = std::max(1, std::min<int>(jobs, static_cast<int>(count)));
    if (jobs == 1) {
        for (size_t i = 0; i < count; ++i) fn(i);
        return;
    }
    std::atomic<size_t> next{0};
    std::exception_ptr err;
    std::mutex err_mu;
    std::vector<std::thread> pool;
    for (int t = 0; t < jobs; ++t)
        pool.emplace_back([&] {
            try {
                for (size_t i; (i = next.fetch_add(1)) < count;) fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(err_mu);
                if (!err) err = std::current_exception();
            }
        });
    for (std::thread& th : pool) th.join();
    if (err) std::rethrow_exception(err);
}

struct FlatImage {
    const SubjectRecord* subject;
    const ImageRecord* image;
};

Modality modality_arg(std::string name) {
    for (char& ch : name) ch = static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
    return modality_from_name(name);
}

std::vector<FlatImage> flat_images(const DatasetIndex& index,
                                   const std::vector<std::string>& subjects = {}) {
    std::set<std::string> wanted(subjects.begin(), subjects.end());
    std::vector<FlatImage> out;
    for (const SubjectRecord& s : index.subjects) {
        if (!wanted.empty() && !wanted.count(s.id)) continue;
        for (const ImageRecord& img : s.images) out.push_back({&s, &img});
    }
    if (out.empty()) throw ConfigError("no images match the subject filter");
    return out;
}

// --- synth ---------------------------------------------------------------------

int cmd_synth(const CommonArgs& c) {
    json j = load_config(c.config);
    SynthConfig cfg;
    cfg.subjects = get_or(j, "subjects", cfg.subjects);
    cfg.images_per_subject = get_or(j, "images_per_subject", cfg.images_per_subject);
    cfg.classes = get_or(j, "classes", cfg.classes);
    cfg.width = get_or(j, "width", cfg.width);
    cfg.height = get_or(j, "height", cfg.height);
    cfg.channels = get_or(j, "channels", cfg.channels);
    cfg.subject_shift_scale = get_or(j, "subject_shift_scale", cfg.subject_shift_scale);
    cfg.noise_std = get_or(j, "noise_std", cfg.noise_std);
    cfg.noise_sigma_px = get_or(j, "noise_sigma_px", cfg.noise_sigma_px);
    cfg.blob_min = get_or(j, "blob_min", cfg.blob_min);
    cfg.blob_max = get_or(j, "blob_max", cfg.blob_max);
    cfg.unsure_border = get_or(j, "unsure_border", cfg.unsure_border);
    cfg.seed = get_or(j, "seed", cfg.seed);
    if (c.seed_set) cfg.seed = c.seed;
    cfg.validate();

    json effective = {{"subjects", cfg.subjects},
                      {"images_per_subject", cfg.images_per_subject},
                      {"classes", cfg.classes},
                      {"width", cfg.width},
                      {"height", cfg.height},
                      {"channels", cfg.channels},
                      {"subject_shift_scale", cfg.subject_shift_scale},
                      {"noise_std", cfg.noise_std},
                      {"noise_sigma_px", cfg.noise_sigma_px},
                      {"blob_min", cfg.blob_min},
                      {"blob_max", cfg.blob_max},
                      {"unsure_border", cfg.unsure_border},
                      {"seed", cfg.seed}};
    if (c.dry_run) {
        std::cout << json{{"dry_run", true}, {"synth", effective}}.dump() << "\n";
        return 0;
    }
    fs::path out = require_out(c, "synth");
    DatasetIndex index = generate_synthetic_dataset(cfg, out);
    std::cout << json{{"dataset", out.string()},
                      {"subjects", index.subjects.size()},
                      {"images", index.image_count()},
                      {"classes", index.classes.size()}}
                     .dump()
              << "\n";
    return 0;
}

// --- preprocess ------------------------------------------------------------------

int cmd_preprocess(const CommonArgs& c, const std::string& data) {
    json j = load_config(c.config);
    std::string order_name = get_or<std::string>(j, "order", "normalize_then_filter");
    PreprocessOrder order;
    if (order_name == "normalize_then_filter")
        order = PreprocessOrder::NormalizeThenFilter;
    else if (order_name == "filter_then_normalize")
        order = PreprocessOrder::FilterThenNormalize;
    else
        throw ConfigError("preprocess: unknown order '" + order_name + "'");

    DatasetIndex index = read_index(fs::path(data) / "index.json");
    std::vector<FlatImage> images = flat_images(index);
    if (c.dry_run) {
        std::cout << json{{"dry_run", true}, {"order", order_name}, {"images", images.size()}}
                         .dump()
                  << "\n";
        return 0;
    }

    fs::path out = c.out.empty() ? cache_dir() / "preprocessed" : fs::path(c.out);
    fs::create_directories(out);
    std::atomic<size_t> zero_pixels{0};
    parallel_images(c.jobs, images.size(), [&](size_t i) {
        const FlatImage& fi = images[i];
        fs::create_directories(out / fi.subject->id);
        NormalizeResult res = preprocess_hsi(read_cube(index.resolve(fi.image->hsi_path)), order);
        write_cube(res.cube, out / fi.image->hsi_path);
        zero_pixels += res.zero_pixels;
        for (const std::string* rel :
             {&fi.image->tpi_path, &fi.image->rgb_path, &fi.image->label_path})
            fs::copy_file(index.resolve(*rel), out / *rel, fs::copy_options::overwrite_existing);
    });
    DatasetIndex copy = index;
    copy.root = out;
    write_index(copy, out / "index.json");
    std::cout << json{{"dataset", out.string()},
                      {"images", images.size()},
                      {"zero_spectra", zero_pixels.load()}}
                     .dump()
              << "\n";
    return 0;
}

// --- slic ------------------------------------------------------------------------

int cmd_slic(const CommonArgs& c, const std::string& data) {
    json j = load_config(c.config);
    SlicoOptions opts;
    opts.n_segments = get_or(j, "n_segments", opts.n_segments);
    opts.iterations = get_or(j, "iterations", opts.iterations);
    opts.smooth_sigma = get_or(j, "smooth_sigma", opts.smooth_sigma);
    opts.use_lab = get_or(j, "use_lab", opts.use_lab);

    DatasetIndex index = read_index(fs::path(data) / "index.json");
    std::vector<FlatImage> images = flat_images(index);
    if (c.dry_run) {
        std::cout << json{{"dry_run", true},
                          {"n_segments", opts.n_segments},
                          {"images", images.size()}}
                         .dump()
                  << "\n";
        return 0;
    }

    fs::path out = c.out.empty() ? cache_dir() / "segments" : fs::path(c.out);
    fs::create_directories(out);
    std::atomic<long> total_segments{0};
    parallel_images(c.jobs, images.size(), [&](size_t i) {
        const FlatImage& fi = images[i];
        SuperpixelDecomposition dec = slico(read_cube(index.resolve(fi.image->rgb_path)), opts);
        write_segment_map(dec.map, out / (fi.image->name + ".seg"));
        total_segments += dec.count();
    });
    std::cout << json{{"segments_dir", out.string()},
                      {"images", images.size()},
                      {"total_segments", total_segments.load()}}
                     .dump()
              << "\n";
    return 0;
}

// --- train -----------------------------------------------------------------------

TrainConfig train_config_from(const json& j, double scale) {
    TrainConfig cfg;
    cfg.epochs = get_or(j, "epochs", 20);
    cfg.batch_size = get_or(j, "batch_size", 6);
    cfg.epoch_size = get_or(j, "epoch_size", 40 * cfg.batch_size);
    cfg.workers = get_or(j, "workers", cfg.workers);
    cfg.buffer_capacity = get_or(j, "buffer_capacity", cfg.buffer_capacity);
    cfg.seed = get_or<uint64_t>(j, "seed", cfg.seed);
    cfg.augment = get_or(j, "augment", cfg.augment);
    cfg.max_parts_per_image = get_or(j, "max_parts_per_image", cfg.max_parts_per_image);
    std::string weights = get_or<std::string>(j, "weights", "none");
    if (weights == "none")
        cfg.weight_mode = WeightMode::None;
    else if (weights == "inverse")
        cfg.weight_mode = WeightMode::InverseProportional;
    else
        throw ConfigError("train: unknown weight mode '" + weights + "'");
    cfg.adam.lr0 = get_or(j, "lr0", cfg.adam.lr0);
    cfg.adam.gamma = get_or(j, "gamma", cfg.adam.gamma);
    cfg.sp_input_size = get_or(j, "sp_input_size", cfg.sp_input_size);
    cfg.base_channels = get_or(j, "base_channels", cfg.base_channels);
    if (scale != 1.0) {
        long scaled = std::lround(cfg.epoch_size * scale / cfg.batch_size);
        cfg.epoch_size = static_cast<int>(std::max(1L, scaled)) * cfg.batch_size;
    }
    return cfg;
}

json train_config_json(const TrainConfig& cfg) {
    return {{"epochs", cfg.epochs},
            {"epoch_size", cfg.epoch_size},
            {"batch_size", cfg.batch_size},
            {"workers", cfg.workers},
            {"buffer_capacity", cfg.buffer_capacity},
            {"seed", cfg.seed},
            {"augment", cfg.augment},
            {"max_parts_per_image", cfg.max_parts_per_image},
            {"weights", cfg.weight_mode == WeightMode::None ? "none" : "inverse"},
            {"lr0", cfg.adam.lr0},
            {"gamma", cfg.adam.gamma},
            {"sp_input_size", cfg.sp_input_size},
            {"base_channels", cfg.base_channels}};
}

// plan from "splits" file when given, else computed (and later persisted)
SplitPlan plan_from_config(const json& j, const DatasetIndex& index, bool* computed) {
    std::string splits = get_or<std::string>(j, "splits", "");
    if (computed) *computed = splits.empty();
    if (!splits.empty()) {
        std::ifstream in(splits);
        if (!in) throw ConfigError("cannot open splits: " + splits);
        json pj;
        in >> pj;
        SplitPlan plan = SplitPlan::from_json(pj);
        check_leakage(plan, index);
        return plan;
    }
    int k = get_or(j, "k", 5);
    uint64_t split_seed = get_or<uint64_t>(j, "split_seed", 0);
    return make_splits(index, k, split_seed);
}

fs::path segments_dir_from(const json& j, ModelKind kind) {
    std::string dir = get_or<std::string>(j, "segments", "");
    if (!dir.empty()) return dir;
    return kind == ModelKind::Superpixel ? cache_dir() / "segments" : fs::path();
}

void write_history_csv(const std::vector<EpochStats>& history, const fs::path& path) {
    std::ofstream out = open_out(path);
    out << "epoch,train_loss,val_dsc,known_dsc,unknown_dsc\n";
    for (const EpochStats& e : history)
        out << e.epoch << ',' << fmt(e.train_loss) << ',' << fmt(e.val_dsc) << ','
            << fmt(e.known_dsc) << ',' << fmt(e.unknown_dsc) << '\n';
}

int cmd_train(const CommonArgs& c) {
    json j = load_config(c.config);
    std::string dataset = get_or<std::string>(j, "dataset", "");
    if (dataset.empty()) throw ConfigError("train: config needs a 'dataset' directory");
    ModelKind kind = model_kind_from_name(get_or<std::string>(j, "kind", "pixel"));
    Modality modality = modality_arg(get_or<std::string>(j, "modality", "hsi"));
    int fold = get_or(j, "fold", 0);

    TrainConfig cfg = train_config_from(j, c.scale);
    if (c.seed_set) cfg.seed = c.seed;
    cfg.validate();

    DatasetIndex index = read_index(fs::path(dataset) / "index.json");
    bool computed = false;
    SplitPlan plan = plan_from_config(j, index, &computed);
    fs::path segments = segments_dir_from(j, kind);
    FoldData data = assemble_fold(index, plan, fold, modality, segments);

    int num_classes = index.classes.size();
    int in_channels = modality_channels(index, modality);
    json effective = {{"dataset", dataset},
                      {"kind", model_kind_name(kind)},
                      {"modality", modality_name(modality)},
                      {"fold", fold},
                      {"classes", num_classes},
                      {"in_channels", in_channels},
                      {"train", train_config_json(cfg)}};
    if (c.dry_run) {
        ModelMeta meta{kind, modality, num_classes, in_channels, cfg.base_channels,
                       cfg.sp_input_size};
        nn::Network net = build_model(meta);
        effective["parameters"] = net.count_parameters();
        std::cout << json{{"dry_run", true}, {"train", effective}}.dump() << "\n";
        return 0;
    }

    fs::path out = require_out(c, "train");
    TrainResult res = train_model(kind, modality, cfg, data.data, num_classes, in_channels);
    save_model(res.best, res.meta, out / "model.bin");
    save_model(res.swa, res.meta, out / "swa.bin");
    write_history_csv(res.history, out / "history.csv");
    if (computed) {
        std::ofstream sp = open_out(out / "splits.json");
        sp << plan.to_json().dump(2) << "\n";
    }
    std::ofstream cj = open_out(out / "config.json");
    cj << effective.dump(2) << "\n";

    std::cout << json{{"model", (out / "model.bin").string()},
                      {"best_epoch", res.best_epoch},
                      {"best_val_dsc", res.best_val_dsc},
                      {"parameters", res.best.count_parameters()}}
                     .dump()
              << "\n";
    return 0;
}

// --- predict ---------------------------------------------------------------------

int cmd_predict(const CommonArgs& c, const std::string& model_path, const std::string& data) {
    json j = load_config(c.config);
    std::vector<std::string> subjects = get_or(j, "subjects", std::vector<std::string>{});
    bool use_swa = get_or(j, "swa", false);

    DatasetIndex index = read_index(fs::path(data) / "index.json");
    std::vector<FlatImage> images = flat_images(index, subjects);
    LoadedModel probe = load_model(model_path);
    fs::path segments = segments_dir_from(j, probe.meta.kind);
    if (c.dry_run) {
        std::cout << json{{"dry_run", true},
                          {"kind", model_kind_name(probe.meta.kind)},
                          {"images", images.size()}}
                         .dump()
                  << "\n";
        return 0;
    }
    (void)use_swa; // the checkpoint path already selects best vs swa weights

    fs::path out = require_out(c, "predict");
    parallel_images(c.jobs, images.size(), [&](size_t i) {
        thread_local LoadedModel model = load_model(model_path);
        const FlatImage& fi = images[i];
        Datacube cube = read_cube(index.resolve(fi.image->cube_path(model.meta.modality)));
        SegmentationPrediction pred;
        if (model.meta.kind == ModelKind::Superpixel) {
            SuperpixelDecomposition dec =
                decomposition_from_map(read_segment_map(segments / (fi.image->name + ".seg")));
            pred = predict(model.net, model.meta, cube, &dec);
        } else {
            pred = predict(model.net, model.meta, cube);
        }
        write_labels(pred.labels, out / (fi.image->name + ".pred"));
    });
    std::cout << json{{"predictions", out.string()}, {"images", images.size()}}.dump() << "\n";
    return 0;
}

// --- evaluate ---------------------------------------------------------------------

ThresholdTable tau_from_config(const json& j, int num_classes) {
    std::string file = get_or<std::string>(j, "tau_file", "");
    if (!file.empty()) {
        std::ifstream in(file);
        if (!in) throw ConfigError("cannot open tau file: " + file);
        json tj;
        in >> tj;
        return ThresholdTable::from_json(tj);
    }
    double tau = get_or(j, "tau", 1.0);
    ThresholdTable table;
    table.tau.assign(static_cast<size_t>(num_classes), tau);
    table.support.assign(static_cast<size_t>(num_classes), 0);
    return table;
}

void write_confusion_csv(const Confusion::Result& res, const ClassTable& classes,
                         const fs::path& path) {
    std::ofstream out = open_out(path);
    out << "ref\\pred";
    for (const ClassInfo& ci : classes.classes) out << ',' << ci.name;
    out << '\n';
    int n = classes.size();
    for (int r = 0; r < n; ++r) {
        out << classes.classes[static_cast<size_t>(r)].name;
        for (int p = 0; p < n; ++p)
            out << ',' << fmt(res.matrix[static_cast<size_t>(r) * n + p]);
        out << '\n';
    }
}

int cmd_evaluate(const CommonArgs& c, const std::string& pred_dir, const std::string& data) {
    json j = load_config(c.config);
    std::vector<std::string> subjects = get_or(j, "subjects", std::vector<std::string>{});

    DatasetIndex index = read_index(fs::path(data) / "index.json");
    std::vector<FlatImage> images = flat_images(index, subjects);
    ThresholdTable tau = tau_from_config(j, index.classes.size());
    if (c.dry_run) {
        std::cout << json{{"dry_run", true}, {"images", images.size()}}.dump() << "\n";
        return 0;
    }

    std::vector<EvalItem> items(images.size());
    Confusion confusion(index.classes.size());
    std::mutex conf_mu;
    parallel_images(c.jobs, images.size(), [&](size_t i) {
        const FlatImage& fi = images[i];
        LabelMap ref = read_labels(index.resolve(fi.image->label_path));
        LabelMap pred = read_labels(fs::path(pred_dir) / (fi.image->name + ".pred"));
        items[i] = {fi.subject->id, fi.image->name, evaluate_image(pred, ref, tau)};
        std::lock_guard<std::mutex> lock(conf_mu);
        confusion.add(fi.subject->id, pred, ref);
    });

    MetricReport report = aggregate(items);
    fs::path out = require_out(c, "evaluate");
    std::ofstream rj = open_out(out / "report.json");
    rj << report.to_json().dump(2) << "\n";
    std::ofstream rc = open_out(out / "report.csv");
    rc << report.to_csv();
    write_confusion_csv(confusion.result(), index.classes, out / "confusion.csv");

    std::cout << json{{"report", (out / "report.json").string()},
                      {"images", images.size()},
                      {"dsc_mean", report.dsc_mean},
                      {"asd_mean", report.asd_mean},
                      {"nsd_mean", report.nsd_mean},
                      {"excluded", report.excluded.size()}}
                     .dump()
              << "\n";
    return 0;
}

// --- agreement ---------------------------------------------------------------------

int cmd_agreement(const CommonArgs& c) {
    json j = load_config(c.config);
    std::string data_a = get_or<std::string>(j, "data_a", "");
    std::string data_b = get_or<std::string>(j, "data_b", "");
    if (data_a.empty() || data_b.empty())
        throw ConfigError("agreement: config needs 'data_a' and 'data_b' dataset directories");
    std::string agg_name = get_or<std::string>(j, "agg", "mean");
    TauAggregate agg;
    if (agg_name == "mean")
        agg = TauAggregate::Mean;
    else if (agg_name == "median")
        agg = TauAggregate::Median;
    else if (agg_name == "q95")
        agg = TauAggregate::Q95;
    else
        throw ConfigError("agreement: unknown aggregate '" + agg_name + "'");

    DatasetIndex index_a = read_index(fs::path(data_a) / "index.json");
    DatasetIndex index_b = read_index(fs::path(data_b) / "index.json");
    std::map<std::string, const ImageRecord*> by_name;
    std::map<std::string, std::string> subject_of_image;
    for (const SubjectRecord& s : index_b.subjects)
        for (const ImageRecord& img : s.images) {
            by_name[img.name] = &img;
            subject_of_image[img.name] = s.id;
        }

    std::vector<FlatImage> images = flat_images(index_a);
    std::vector<LabelMap> ann_a, ann_b;
    std::vector<std::pair<std::string, std::string>> names; // (subject, image)
    for (const FlatImage& fi : images) {
        auto it = by_name.find(fi.image->name);
        if (it == by_name.end())
            throw ConfigError("agreement: image '" + fi.image->name + "' missing from data_b");
        ann_a.push_back(read_labels(index_a.resolve(fi.image->label_path)));
        ann_b.push_back(read_labels(index_b.resolve(it->second->label_path)));
        names.emplace_back(subject_of_image[fi.image->name], fi.image->name);
    }
    if (c.dry_run) {
        std::cout << json{{"dry_run", true}, {"pairs", names.size()}, {"agg", agg_name}}.dump()
                  << "\n";
        return 0;
    }

    int num_classes = index_a.classes.size();
    ThresholdTable tau = estimate_thresholds(ann_a, ann_b, num_classes, agg);

    fs::path out = c.out.empty() ? cache_dir() / "thresholds" : fs::path(c.out);
    fs::create_directories(out);
    std::ofstream tj = open_out(out / "thresholds.json");
    tj << tau.to_json().dump(2) << "\n";

    std::ofstream ac = open_out(out / "agreement.csv");
    ac << "subject,image,newly_appearing,vanished,dsc,asd,nsd\n";
    for (size_t i = 0; i < ann_a.size(); ++i) {
        AgreementResult res = rater_agreement(ann_a[i], ann_b[i], tau);
        ac << names[i].first << ',' << names[i].second << ',' << res.newly_appearing << ','
           << res.vanished << ',' << fmt(res.eval.mean_dsc()) << ',' << fmt(res.eval.mean_asd())
           << ',' << fmt(res.eval.mean_nsd()) << '\n';
    }
    std::cout << json{{"thresholds", (out / "thresholds.json").string()},
                      {"pairs", ann_a.size()},
                      {"tau", tau.to_json()}}
                     .dump()
              << "\n";
    return 0;
}

// --- rank --------------------------------------------------------------------------

// per-subject metric columns of an evaluate report, keyed by subject id
std::map<std::string, std::array<double, 3>> report_subject_rows(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open report: " + path);
    json j;
    in >> j;
    std::map<std::string, std::array<double, 3>> rows;
    for (const json& r : j.at("subjects"))
        rows[r.at("subject").get<std::string>()] = {r.at("dsc").get<double>(),
                                                    r.at("asd").get<double>(),
                                                    r.at("nsd").get<double>()};
    if (rows.empty()) throw ConfigError("report has no subject rows: " + path);
    return rows;
}

int cmd_rank(const CommonArgs& c) {
    json j = load_config(c.config);
    if (!j.contains("inputs")) throw ConfigError("rank: config needs an 'inputs' list");
    int n_boot = get_or(j, "n_boot", 1000);
    int sample_size = get_or(j, "sample_size", 5);
    uint64_t seed = get_or<uint64_t>(j, "seed", 0);
    if (c.seed_set) seed = c.seed;

    std::vector<std::string> algorithms;
    std::vector<std::map<std::string, std::array<double, 3>>> tables;
    for (const json& in : j.at("inputs")) {
        algorithms.push_back(in.at("algorithm").get<std::string>());
        tables.push_back(report_subject_rows(in.at("report").get<std::string>()));
    }
    if (algorithms.empty()) throw ConfigError("rank: 'inputs' is empty");
    for (size_t a = 1; a < tables.size(); ++a) {
        if (tables[a].size() != tables[0].size())
            throw ConfigError("rank: '" + algorithms[a] + "' disagrees on the subject set");
        for (const auto& [subject, row] : tables[0])
            if (!tables[a].count(subject))
                throw ConfigError("rank: '" + algorithms[a] + "' misses subject '" + subject +
                                  "'");
    }
    if (c.dry_run) {
        std::cout << json{{"dry_run", true},
                          {"algorithms", algorithms},
                          {"subjects", tables[0].size()},
                          {"n_boot", n_boot},
                          {"sample_size", sample_size}}
                         .dump()
                  << "\n";
        return 0;
    }

    const char* metric_names[3] = {"dsc", "asd", "nsd"};
    fs::path out = require_out(c, "rank");
    json summary = json::object();
    std::vector<MetricBlock> blocks;
    for (int m = 0; m < 3; ++m) {
        MetricBlock block;
        block.metric = metric_names[m];
        block.direction = direction_for_metric(block.metric);
        for (size_t a = 0; a < algorithms.size(); ++a) {
            AlgorithmScores scores;
            scores.algorithm = algorithms[a];
            for (const auto& [subject, row] : tables[a])
                scores.per_subject.push_back(row[static_cast<size_t>(m)]);
            block.scores.push_back(std::move(scores));
        }
        RankingTable table = bootstrap_ranks(block.scores, n_boot, sample_size, seed,
                                             block.direction);
        write_rank_histogram_csv(table, out / ("rank_" + block.metric + ".csv"));
        json rows = json::array();
        for (const RankSummary& row : table.rows)
            rows.push_back({{"algorithm", row.algorithm},
                            {"median", row.median},
                            {"lo", row.lo},
                            {"hi", row.hi}});
        summary[block.metric] = std::move(rows);
        blocks.push_back(std::move(block));
    }
    CrossMetricRanks cm = mean_then_rank(blocks);
    write_cross_metric_csv(cm, out / "cross_metric.csv");
    std::ofstream sj = open_out(out / "ranks.json");
    sj << summary.dump(2) << "\n";

    std::cout << json{{"ranks", (out / "ranks.json").string()},
                      {"algorithms", algorithms.size()},
                      {"n_boot", n_boot}}
                     .dump()
              << "\n";
    return 0;
}

// --- datasize ----------------------------------------------------------------------

int cmd_datasize(const CommonArgs& c) {
    json j = load_config(c.config);
    std::string dataset = get_or<std::string>(j, "dataset", "");
    if (dataset.empty()) throw ConfigError("datasize: config needs a 'dataset' directory");

    std::vector<std::pair<ModelKind, Modality>> kinds;
    for (const json& k : j.value("kinds", json::array()))
        kinds.emplace_back(model_kind_from_name(k.at("kind").get<std::string>()),
                           modality_arg(k.at("modality").get<std::string>()));
    if (kinds.empty()) kinds.emplace_back(ModelKind::Pixel, Modality::HSI);

    DataSizeConfig study;
    study.n_min = get_or(j, "n_min", study.n_min);
    study.n_max = get_or(j, "n_max", study.n_max);
    study.repeats = get_or(j, "repeats", study.repeats);
    study.seed = get_or<uint64_t>(j, "study_seed", study.seed);
    if (c.seed_set) study.seed = c.seed;

    TrainConfig base = train_config_from(j.value("train", json::object()), c.scale);
    DatasetIndex index = read_index(fs::path(dataset) / "index.json");
    SplitPlan plan = plan_from_config(j, index, nullptr);
    fs::path segments;
    for (const auto& [kind, modality] : kinds)
        if (kind == ModelKind::Superpixel) segments = segments_dir_from(j, kind);

    if (c.dry_run) {
        base.validate();
        std::cout << json{{"dry_run", true},
                          {"kinds", kinds.size()},
                          {"train_subjects", plan.train_subjects.size()},
                          {"repeats", study.repeats}}
                         .dump()
                  << "\n";
        return 0;
    }

    std::vector<DataSizeRun> runs = run_datasize_study(index, plan, kinds, base, study, segments);
    fs::path out = require_out(c, "datasize");
    std::ofstream csv = open_out(out / "datasize.csv");
    csv << "kind,modality,n,repeat,subjects,test_dsc\n";
    for (const DataSizeRun& run : runs) {
        std::string joined;
        for (const std::string& s : run.subjects) joined += (joined.empty() ? "" : ";") + s;
        csv << model_kind_name(run.kind) << ',' << modality_name(run.modality) << ',' << run.n
            << ',' << run.repeat << ',' << joined << ',' << fmt(run.test_dsc) << '\n';
    }
    std::cout << json{{"datasize", (out / "datasize.csv").string()}, {"runs", runs.size()}}.dump()
              << "\n";
    return 0;
}

// --- report ------------------------------------------------------------------------

int cmd_report(const CommonArgs& c, bool gnuplot) {
    json j = load_config(c.config);
    fs::path out = require_out(c, "report");

    size_t rows_written = 0;
    if (j.contains("evaluations")) {
        std::ofstream sum = open_out(out / "summary.csv");
        sum << "algorithm,dsc_mean,dsc_sd,asd_mean,asd_sd,nsd_mean,nsd_sd\n";
        std::ofstream subj = open_out(out / "subjects.csv");
        subj << "algorithm,subject,dsc,asd,nsd\n";
        for (const json& in : j.at("evaluations")) {
            std::string name = in.at("algorithm").get<std::string>();
            std::ifstream rin(in.at("report").get<std::string>());
            if (!rin)
                throw ConfigError("cannot open report: " + in.at("report").get<std::string>());
            json rj;
            rin >> rj;
            const json& cohort = rj.at("cohort");
            sum << name << ',' << fmt(cohort.at("dsc").at("mean").get<double>()) << ','
                << fmt(cohort.at("dsc").at("sd").get<double>()) << ','
                << fmt(cohort.at("asd").at("mean").get<double>()) << ','
                << fmt(cohort.at("asd").at("sd").get<double>()) << ','
                << fmt(cohort.at("nsd").at("mean").get<double>()) << ','
                << fmt(cohort.at("nsd").at("sd").get<double>()) << '\n';
            for (const json& r : rj.at("subjects")) {
                subj << name << ',' << r.at("subject").get<std::string>() << ','
                     << fmt(r.at("dsc").get<double>()) << ',' << fmt(r.at("asd").get<double>())
                     << ',' << fmt(r.at("nsd").get<double>()) << '\n';
                ++rows_written;
            }
        }
    }

    if (j.contains("histories")) {
        std::ofstream gen = open_out(out / "generalization.csv");
        gen << "algorithm,epoch,train_loss,val_dsc,known_dsc,unknown_dsc,gap\n";
        for (const json& in : j.at("histories")) {
            std::string name = in.at("algorithm").get<std::string>();
            std::ifstream hin(in.at("history").get<std::string>());
            if (!hin)
                throw ConfigError("cannot open history: " + in.at("history").get<std::string>());
            std::string line;
            std::getline(hin, line); // header
            while (std::getline(hin, line)) {
                if (line.empty()) continue;
                std::istringstream ls(line);
                std::string epoch, loss, val, known, unknown;
                std::getline(ls, epoch, ',');
                std::getline(ls, loss, ',');
                std::getline(ls, val, ',');
                std::getline(ls, known, ',');
                std::getline(ls, unknown, ',');
                double gap = std::stod(known) - std::stod(unknown);
                gen << name << ',' << epoch << ',' << loss << ',' << val << ',' << known << ','
                    << unknown << ',' << fmt(gap) << '\n';
                ++rows_written;
            }
        }
    }

    if (j.contains("datasize")) {
        // kind#modality x n -> mean dsc over repeats
        std::map<std::pair<std::string, int>, std::pair<double, int>> acc;
        for (const json& path : j.at("datasize")) {
            std::ifstream din(path.get<std::string>());
            if (!din) throw ConfigError("cannot open datasize csv: " + path.get<std::string>());
            std::string line;
            std::getline(din, line);
            while (std::getline(din, line)) {
                if (line.empty()) continue;
                std::istringstream ls(line);
                std::string kind, modality, n, repeat, subjects, dsc;
                std::getline(ls, kind, ',');
                std::getline(ls, modality, ',');
                std::getline(ls, n, ',');
                std::getline(ls, repeat, ',');
                std::getline(ls, subjects, ',');
                std::getline(ls, dsc, ',');
                auto& slot = acc[{kind + "#" + modality, std::stoi(n)}];
                slot.first += std::stod(dsc);
                slot.second += 1;
            }
        }
        std::ofstream ds = open_out(out / "datasize_mean.csv");
        ds << "algorithm,n,mean_dsc,runs\n";
        for (const auto& [key, slot] : acc) {
            ds << key.first << ',' << key.second << ',' << fmt(slot.first / slot.second) << ','
               << slot.second << '\n';
            ++rows_written;
        }
    }

    if (gnuplot) {
        std::ofstream gp = open_out(out / "plots.gp");
        gp << "set datafile separator ','\n"
           << "set key autotitle columnhead\n"
           << "set terminal pngcairo size 900,600\n\n"
           << "set output 'dsc_by_algorithm.png'\n"
           << "set style data histogram\n"
           << "set style fill solid 0.6\n"
           << "plot 'summary.csv' using 2:xtic(1) title 'DSC'\n\n"
           << "set output 'generalization_gap.png'\n"
           << "set style data lines\n"
           << "plot 'generalization.csv' using 2:7 title 'gap'\n\n"
           << "set output 'datasize.png'\n"
           << "plot 'datasize_mean.csv' using 2:3 with linespoints title 'DSC'\n";
    }

    std::cout << json{{"report_dir", out.string()}, {"rows", rows_written}}.dump() << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"synthetic hyperspectral organ segmentation benchmark"};
    app.require_subcommand(1);

    CommonArgs synth_args, pre_args, slic_args, train_args, predict_args, eval_args, agree_args,
        rank_args, datasize_args, report_args;
    std::string pre_data, slic_data, predict_model, predict_data, eval_pred, eval_data;
    bool report_gnuplot = false;

    CLI::App* synth = app.add_subcommand("synth", "generate a synthetic labeled dataset");
    add_common(synth, synth_args);

    CLI::App* pre = app.add_subcommand("preprocess", "l1-normalize and median-filter HSI cubes");
    add_common(pre, pre_args);
    pre->add_option("--data", pre_data, "dataset directory")->required();

    CLI::App* slic = app.add_subcommand("slic", "superpixel decompositions of the RGB cubes");
    add_common(slic, slic_args);
    slic->add_option("--data", slic_data, "dataset directory")->required();

    CLI::App* train = app.add_subcommand("train", "train one model on one fold");
    add_common(train, train_args);

    CLI::App* predict = app.add_subcommand("predict", "segment every image with a trained model");
    add_common(predict, predict_args);
    predict->add_option("--model", predict_model, "model checkpoint")->required();
    predict->add_option("--data", predict_data, "dataset directory")->required();

    CLI::App* evaluate = app.add_subcommand("evaluate", "score predictions against the reference");
    add_common(evaluate, eval_args);
    evaluate->add_option("--pred", eval_pred, "prediction directory")->required();
    evaluate->add_option("--data", eval_data, "dataset directory")->required();

    CLI::App* agree = app.add_subcommand("agreement", "inter-rater thresholds and agreement");
    add_common(agree, agree_args);

    CLI::App* rank = app.add_subcommand("rank", "bootstrap ranking over evaluate reports");
    add_common(rank, rank_args);

    CLI::App* datasize = app.add_subcommand("datasize", "training-set size study");
    add_common(datasize, datasize_args);

    CLI::App* report = app.add_subcommand("report", "collate results into report tables");
    add_common(report, report_args);
    report->add_flag("--gnuplot", report_gnuplot, "also emit a gnuplot script");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        json err = {{"error", {{"type", "usage"}, {"message", e.what()}}}};
        std::cerr << err.dump() << "\n";
        return e.get_exit_code();
    }

    try {
        if (synth->parsed()) return cmd_synth(synth_args);
        if (pre->parsed()) return cmd_preprocess(pre_args, pre_data);
        if (slic->parsed()) return cmd_slic(slic_args, slic_data);
        if (train->parsed()) return cmd_train(train_args);
        if (predict->parsed()) return cmd_predict(predict_args, predict_model, predict_data);
        if (evaluate->parsed()) return cmd_evaluate(eval_args, eval_pred, eval_data);
        if (agree->parsed()) return cmd_agreement(agree_args);
        if (rank->parsed()) return cmd_rank(rank_args);
        if (datasize->parsed()) return cmd_datasize(datasize_args);
        if (report->parsed()) return cmd_report(report_args, report_gnuplot);
    } catch (const ConfigError& e) {
        std::cerr << json{{"error", {{"type", "config"}, {"message", e.what()}}}}.dump() << "\n";
        return 1;
    } catch (const IoError& e) {
        std::cerr << json{{"error", {{"type", "io"}, {"message", e.what()}}}}.dump() << "\n";
        return 1;
    } catch (const json::exception& e) {
        std::cerr << json{{"error", {{"type", "schema"}, {"message", e.what()}}}}.dump() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << json{{"error", {{"type", "internal"}, {"message", e.what()}}}}.dump() << "\n";
        return 1;
    }
    return 0;
}
