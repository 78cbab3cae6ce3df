#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"
#include "spectraseg/common.hpp"

namespace spectraseg::nn {

// Dense double-precision tensor. Shapes in use: [N,F] fully-connected,
// [N,C,L] spectral 1-d, [N,C,H,W] spatial 2-d. Double keeps the
// finite-difference harness meaningful at eps=1e-4.
struct Tensor {
    std::vector<int> shape;
    std::vector<double> v;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)), v(count(shape), 0.0) {}
    static size_t count(const std::vector<int>& s) {
        size_t n = 1;
        for (int e : s) n *= static_cast<size_t>(e);
        return n;
    }
    size_t size() const { return v.size(); }
    int dim(size_t i) const { return shape[i]; }
    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    double& operator[](size_t i) { return v[i]; }
    double operator[](size_t i) const { return v[i]; }
};

enum class Mode {
    Train,       // caches for backward, dropout active, batchnorm batch stats
    Eval,        // deterministic, no shared-state writes
    StatRefresh, // batch stats + accumulation into running stats, no dropout
};

// Per-forward-pass context. The skip stack carries encoder features from
// save_skip to concat_skip (LIFO); grad_stack runs the same protocol in
// reverse during backward.
struct Context {
    Mode mode = Mode::Eval;
    Rng* rng = nullptr; // required in Train mode when dropout layers exist
    std::vector<Tensor> skip_stack;
    std::vector<Tensor> grad_stack;
};

class Layer {
public:
    virtual ~Layer() = default;
    virtual std::string name() const = 0;
    virtual Tensor forward(const Tensor& x, Context& ctx) = 0;
    // Gradient w.r.t. the layer input; parameter gradients accumulate into
    // grads(). Requires a preceding Train-mode forward.
    virtual Tensor backward(const Tensor& gy, Context& ctx) = 0;
    virtual std::vector<Tensor*> params() { return {}; }
    virtual std::vector<Tensor*> grads() { return {}; }
    // Everything the checkpoint must carry (params + batchnorm running stats).
    virtual std::vector<Tensor*> persistent() { return params(); }
    virtual nlohmann::json spec() const = 0;
};

std::unique_ptr<Layer> conv1d(int in_ch, int out_ch, int k, int pad = 0);
std::unique_ptr<Layer> avgpool1d(int k);
std::unique_ptr<Layer> conv2d(int in_ch, int out_ch, int k, int pad = 0);
std::unique_ptr<Layer> maxpool2d(int k);
std::unique_ptr<Layer> global_avgpool2d(); // [N,C,H,W] -> [N,C]
std::unique_ptr<Layer> upsample2d_bilinear(int scale = 2);
std::unique_ptr<Layer> fully_connected(int in, int out);
std::unique_ptr<Layer> batchnorm(int features);
std::unique_ptr<Layer> elu();
std::unique_ptr<Layer> dropout(double p);
std::unique_ptr<Layer> flatten();
std::unique_ptr<Layer> save_skip();
std::unique_ptr<Layer> concat_skip();
std::unique_ptr<Layer> layer_from_spec(const nlohmann::json& spec);

class Network {
public:
    Network() = default;
    Network(Network&&) = default;
    Network& operator=(Network&&) = default;

    void add(std::unique_ptr<Layer> layer) { layers_.push_back(std::move(layer)); }
    size_t depth() const { return layers_.size(); }
    Layer& layer(size_t i) { return *layers_[i]; }

    Tensor forward(const Tensor& x, Context& ctx);
    Tensor backward(const Tensor& loss_grad, Context& ctx);

    std::vector<Tensor*> params();
    std::vector<Tensor*> grads();
    std::vector<Tensor*> persistent();
    void zero_grad();
    size_t count_parameters(); // trainable scalars only

    // He-style fan-in init for weights, zeros for biases, identity batchnorm.
    void init_params(Rng& rng);

    // batchnorm statistic re-estimation (used by SWA finalize)
    void begin_stat_refresh();
    void end_stat_refresh();

    // one JSON topology line + raw little-endian float64 payload
    void save(const std::filesystem::path& path);
    static Network load(const std::filesystem::path& path);

private:
    std::vector<std::unique_ptr<Layer>> layers_;
};

// --- losses -----------------------------------------------------------------

struct LossResult {
    double value = 0.0;
    Tensor grad; // w.r.t. the first argument
};

// Softmax over axis 1 (classes), independently per sample and spatial site.
Tensor softmax(const Tensor& logits);
// Pullback of grad w.r.t. probabilities to grad w.r.t. logits.
Tensor softmax_backward(const Tensor& probs, const Tensor& gprobs);

// targets: one class id per sample/site (< 0 = ignore), row-major over
// [N(,H,W)]. Optional per-class weights; mean normalized by total weight.
LossResult cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                         const std::vector<double>& class_weights = {});

// Soft dice over all sites in the batch, per class, averaged over classes
// present in the target; ignored sites contribute to neither term.
LossResult dice_loss(const Tensor& probs, const std::vector<int>& targets);

// KL(fuzzy || probs), mean over rows; grad w.r.t. probs.
LossResult kl_divergence(const Tensor& probs, const Tensor& fuzzy);

// 0.5*CE + 0.5*dice on logits.
LossResult dice_ce(const Tensor& logits, const std::vector<int>& targets,
                   const std::vector<double>& class_weights = {});

// --- optimizer / averaging ---------------------------------------------------

struct AdamConfig {
    double lr0 = 0.001;
    double gamma = 0.99; // per-epoch exponential decay
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

class Adam {
public:
    Adam(const std::vector<Tensor*>& params, AdamConfig cfg = {});
    void step(const std::vector<Tensor*>& params, const std::vector<Tensor*>& grads);
    void epoch_decay() { ++epoch_; }
    double lr() const;
    int epoch() const { return epoch_; }

private:
    AdamConfig cfg_;
    int64_t t_ = 0;
    int epoch_ = 0;
    std::vector<Tensor> m_, v_;
};

class Swa {
public:
    void update(const std::vector<Tensor*>& params);
    void install(const std::vector<Tensor*>& params) const; // throws when empty
    int snapshots() const { return n_; }

private:
    std::vector<Tensor> avg_;
    int n_ = 0;
};

// --- gradient check harness ---------------------------------------------------

struct GradcheckReport {
    double max_rel_err = 0.0;
    size_t checked = 0;
};

// Compares analytic parameter+input gradients against central finite
// differences. The context RNG is rewound before every forward so dropout
// masks stay fixed across perturbations.
GradcheckReport gradcheck(Network& net, const Tensor& input,
                          const std::function<LossResult(const Tensor&)>& loss, Rng rng,
                          double eps = 1e-4);

} // namespace spectraseg::nn
