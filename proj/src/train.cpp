#include "spectraseg/train.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include "spectraseg/metrics.hpp"

namespace spectraseg {

namespace {

constexpr uint64_t kStreamInit = 0x494e4954;
constexpr uint64_t kStreamDropout = 0x44524f50;

void expect(bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
}

std::vector<double> training_class_weights(const std::vector<TrainImage>& images,
                                           int num_classes) {
    std::vector<int64_t> counts(num_classes, 0);
    for (const TrainImage& rec : images) {
        LabelMap lm = read_labels(rec.labels);
        for (uint8_t v : lm.labels) {
            if (v == kIgnoreLabel) continue;
            expect(v < num_classes, "train: label id out of range in " + rec.name);
            ++counts[v];
        }
    }
    return class_weights(counts);
}

} // namespace

void TrainConfig::validate() const {
    expect(epochs > 0, "train: epochs must be positive");
    LoaderConfig lcfg;
    lcfg.workers = workers;
    lcfg.buffer_capacity = buffer_capacity;
    lcfg.batch_size = batch_size;
    lcfg.epoch_size = epoch_size;
    lcfg.num_classes = 1; // checked properly at train time
    lcfg.validate();
}

double validation_dsc(nn::Network& net, const ModelMeta& meta,
                      const std::vector<TrainImage>& images) {
    expect(!images.empty(), "validation_dsc: no images");
    double total = 0.0;
    int counted = 0;
    for (const TrainImage& rec : images) {
        Datacube cube = read_cube(rec.cube);
        LabelMap ref = read_labels(rec.labels);
        SuperpixelDecomposition dec;
        const SuperpixelDecomposition* sp = nullptr;
        if (meta.kind == ModelKind::Superpixel) {
            dec = decomposition_from_map(read_segment_map(rec.segments));
            sp = &dec;
        }
        SegmentationPrediction pred = predict(net, meta, cube, sp);

        std::set<int> classes;
        for (uint8_t v : ref.labels)
            if (v != kIgnoreLabel) classes.insert(v);
        if (classes.empty()) continue;
        double image_dsc = 0.0;
        for (int o : classes) image_dsc += dsc(pred.labels, ref, o);
        total += image_dsc / classes.size();
        ++counted;
    }
    expect(counted > 0, "validation_dsc: every image was fully ignored");
    return total / counted;
}

namespace {

LoaderConfig loader_config(const TrainConfig& cfg, int epoch, int num_classes) {
    LoaderConfig lcfg;
    lcfg.workers = cfg.workers;
    lcfg.buffer_capacity = cfg.buffer_capacity;
    lcfg.batch_size = cfg.batch_size;
    lcfg.epoch_size = cfg.epoch_size;
    lcfg.seed = cfg.seed;
    lcfg.epoch = epoch;
    lcfg.augment = cfg.augment;
    lcfg.max_parts_per_image = cfg.max_parts_per_image;
    lcfg.num_classes = num_classes;
    lcfg.sp_input_size = cfg.sp_input_size;
    return lcfg;
}

nn::LossResult batch_loss(ModelKind kind, const nn::Tensor& logits, const Batch& batch,
                          const std::vector<double>& weights) {
    switch (kind) {
        case ModelKind::Pixel:
            return nn::cross_entropy(logits, batch.targets, weights);
        case ModelKind::Superpixel: {
            nn::Tensor probs = nn::softmax(logits);
            nn::LossResult kl = nn::kl_divergence(probs, batch.fuzzy);
            kl.grad = nn::softmax_backward(probs, kl.grad);
            return kl;
        }
        case ModelKind::Patch32:
        case ModelKind::Patch64:
        case ModelKind::Image:
            return nn::dice_ce(logits, batch.targets, weights);
    }
    throw ConfigError("unknown model kind");
}

// Deep copy of the persistent state (parameters + running statistics).
std::vector<nn::Tensor> snapshot(nn::Network& net) {
    std::vector<nn::Tensor> out;
    for (nn::Tensor* t : net.persistent()) out.push_back(*t);
    return out;
}

void restore(nn::Network& net, const std::vector<nn::Tensor>& snap) {
    std::vector<nn::Tensor*> dst = net.persistent();
    expect(dst.size() == snap.size(), "train: checkpoint/network layout mismatch");
    for (size_t i = 0; i < dst.size(); ++i) *dst[i] = snap[i];
}

} // namespace

TrainResult train_model(ModelKind kind, Modality modality, const TrainConfig& cfg,
                        const TrainData& data, int num_classes, int in_channels) {
    cfg.validate();
    expect(!data.train.empty(), "train: no training images");
    expect(!data.val.empty(), "train: no validation images");
    expect(num_classes > 1, "train: need at least two classes");

    ModelMeta meta;
    meta.kind = kind;
    meta.modality = modality;
    meta.classes = num_classes;
    meta.in_channels = in_channels;
    meta.base_channels = cfg.base_channels;
    meta.sp_input_size = cfg.sp_input_size;

    TrainResult result;
    result.meta = meta;
    result.best = build_model(meta);
    nn::Network net = build_model(meta);
    {
        Rng rng(Rng::mix(cfg.seed, {kStreamInit}));
        net.init_params(rng);
    }

    std::vector<double> weights;
    if (cfg.weight_mode == WeightMode::InverseProportional)
        weights = training_class_weights(data.train, num_classes);

    nn::Adam adam(net.params(), cfg.adam);
    nn::Swa swa;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        BatchStream stream(loader_config(cfg, epoch, num_classes), data.train, kind, modality);
        Rng dropout_rng(Rng::mix(cfg.seed, {kStreamDropout, static_cast<uint64_t>(epoch)}));
        nn::Context ctx;
        ctx.mode = nn::Mode::Train;
        ctx.rng = &dropout_rng;

        double loss_sum = 0.0;
        int batches = 0;
        while (auto batch = stream.next()) {
            nn::Tensor logits = net.forward(batch->x, ctx);
            nn::LossResult loss = batch_loss(kind, logits, *batch, weights);
            if (!std::isfinite(loss.value))
                throw ConfigError("train: non-finite loss at epoch " + std::to_string(epoch) +
                                  ", batch " + std::to_string(batches) +
                                  " (diverged; lower the learning rate)");
            net.zero_grad();
            net.backward(loss.grad, ctx);
            adam.step(net.params(), net.grads());
            loss_sum += loss.value;
            ++batches;
        }
        adam.epoch_decay();
        swa.update(net.params());

        EpochStats stats;
        stats.epoch = epoch;
        stats.train_loss = loss_sum / batches;
        stats.val_dsc = validation_dsc(net, meta, data.val);
        stats.known_dsc = data.val_known.empty()
                              ? std::numeric_limits<double>::quiet_NaN()
                              : validation_dsc(net, meta, data.val_known);
        stats.unknown_dsc = data.val_unknown.empty()
                                ? std::numeric_limits<double>::quiet_NaN()
                                : validation_dsc(net, meta, data.val_unknown);
        result.history.push_back(stats);

        if (stats.val_dsc > result.best_val_dsc || result.best_epoch < 0) {
            result.best_epoch = epoch;
            result.best_val_dsc = stats.val_dsc;
            restore(result.best, snapshot(net));
        }
    }

    // SWA checkpoint: averaged weights, then one pass to re-estimate
    // batchnorm statistics on un-augmented training data.
    swa.install(net.params());
    net.begin_stat_refresh();
    {
        LoaderConfig lcfg = loader_config(cfg, cfg.epochs, num_classes);
        lcfg.augment = false;
        BatchStream stream(lcfg, data.train, kind, modality);
        nn::Context ctx;
        ctx.mode = nn::Mode::StatRefresh;
        while (auto batch = stream.next()) net.forward(batch->x, ctx);
    }
    net.end_stat_refresh();
    result.swa = std::move(net);
    return result;
}

} // namespace spectraseg
