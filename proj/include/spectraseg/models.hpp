#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "spectraseg/cube.hpp"
#include "spectraseg/nnet.hpp"
#include "spectraseg/superpixel.hpp"

namespace spectraseg {

// Spatial granularity of a model's input, crossed with the modality.
enum class ModelKind { Pixel, Superpixel, Patch32, Patch64, Image };

const char* model_kind_name(ModelKind k);
ModelKind model_kind_from_name(const std::string& name);
int patch_size(ModelKind k); // 32 / 64, 0 for non-patch kinds

struct ModelMeta {
    ModelKind kind = ModelKind::Pixel;
    Modality modality = Modality::HSI;
    int classes = 0;
    int in_channels = 0;
    int base_channels = 8; // U-Net width ladder (b, 2b, 4b)
    int sp_input_size = 32;

    nlohmann::json to_json() const;
    static ModelMeta from_json(const nlohmann::json& j);
};

struct SegmentationPrediction {
    LabelMap labels;
    int classes = 0;
    // softmax probabilities, (y*width+x)*classes + o; empty when not retained
    std::vector<float> scores;

    bool has_scores() const { return !scores.empty(); }
    float score_at(int x, int y, int o) const {
        return scores[(static_cast<size_t>(y) * labels.width + x) * classes + o];
    }
};

// Paper pixel architectures. HSI: three conv1d(k=5)+avgpool(2) blocks with
// 64/32/16 filters, then FC 100 -> 50 -> classes; blocks that no longer fit
// the spectral length are dropped, so short synthetic spectra still build.
// TPI/RGB: FC 200 -> 100 -> 50 -> classes. batchnorm+ELU everywhere,
// dropout 0.1 on hidden FC layers.
nn::Network build_pixel_net(Modality m, int in_channels, int classes);

// Mini U-Net: 3 encoder levels at widths (b, 2b, 4b) with skip
// concatenations, spatial stride 8 at the bottom, per-pixel class logits at
// input resolution. Input sides must be multiples of 8 (callers pad).
nn::Network build_unet(int in_channels, int classes, int base_channels = 8);

// Superpixel classifier: the U-Net encoder ladder, global average pooling,
// dropout, FC to class logits.
nn::Network build_superpixel_net(int in_channels, int classes, int base_channels = 8);

nn::Network build_model(const ModelMeta& meta);

// Inverse-proportional class weights, normalized to mean 1; zero counts are
// clamped to 1. Throws on an all-zero table.
std::vector<double> class_weights(const std::vector<int64_t>& counts);

// checkpoint (nnet format) + sidecar <path>.meta.json
void save_model(nn::Network& net, const ModelMeta& meta, const std::filesystem::path& path);
struct LoadedModel {
    nn::Network net;
    ModelMeta meta;
};
LoadedModel load_model(const std::filesystem::path& path);

// Non-overlapping tiling with zero padding on the right/bottom edges.
struct PatchGrid {
    int nx = 0, ny = 0;
    int padded_w = 0, padded_h = 0;
};
PatchGrid patch_grid(int width, int height, int patch);

// Full-image inference. The cube must already be preprocessed the same way
// as the training data. Superpixel models additionally need the
// decomposition of the image. Softmax scores are always retained.
SegmentationPrediction predict(nn::Network& net, const ModelMeta& meta, const Datacube& cube,
                               const SuperpixelDecomposition* sp = nullptr);

// argmax of the per-pixel mean softmax; ties -> lowest class id
SegmentationPrediction ensemble(const std::vector<SegmentationPrediction>& members);

} // namespace spectraseg
