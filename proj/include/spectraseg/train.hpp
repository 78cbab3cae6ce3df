#pragma once

#include "spectraseg/dataload.hpp"
#include "spectraseg/models.hpp"

namespace spectraseg {

enum class WeightMode { None, InverseProportional };

struct TrainConfig {
    int epochs = 100;
    int epoch_size = 0; // samples
    int batch_size = 0;
    int workers = 3;
    int buffer_capacity = 4;
    uint64_t seed = 0;
    bool augment = true;
    int max_parts_per_image = 0;
    WeightMode weight_mode = WeightMode::None;
    nn::AdamConfig adam;
    int sp_input_size = 32;
    int base_channels = 8;

    void validate() const;
};

struct EpochStats {
    int epoch = 0;
    double train_loss = 0.0;
    double val_dsc = 0.0;
    // generalization tracking; NaN when the corresponding set is empty
    double known_dsc = 0.0;
    double unknown_dsc = 0.0;
};

struct TrainData {
    std::vector<TrainImage> train;
    std::vector<TrainImage> val;         // per-epoch model selection
    std::vector<TrainImage> val_known;   // optional: images of training subjects
    std::vector<TrainImage> val_unknown; // optional: images of held-out subjects
};

struct TrainResult {
    ModelMeta meta;
    nn::Network best; // weights from the best validation epoch
    nn::Network swa;  // epoch-averaged weights, batchnorm stats re-estimated
    int best_epoch = -1;
    double best_val_dsc = 0.0;
    std::vector<EpochStats> history;
};

// Losses per kind: pixel = cross-entropy, superpixel = KL against fuzzy
// labels, patch/image = dice+CE equally weighted. Deterministic for a fixed
// seed; non-finite loss aborts with a diagnostic.
TrainResult train_model(ModelKind kind, Modality modality, const TrainConfig& cfg,
                        const TrainData& data, int num_classes, int in_channels);

// Mean over images of the class-mean DSC of predict() against the reference.
double validation_dsc(nn::Network& net, const ModelMeta& meta,
                      const std::vector<TrainImage>& images);

} // namespace spectraseg
