#include "spectraseg/nnet.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

namespace spectraseg::nn {

using nlohmann::json;

namespace {

void expect(bool cond, const std::string& msg) {
    if (!cond) throw ConfigError(msg);
}

void require_cache(bool have, const char* layer) {
    if (!have) throw ConfigError(std::string(layer) + ": backward without a train-mode forward");
}

// [N, O, ...] -> number of trailing spatial sites
size_t spatial_sites(const Tensor& t) {
    size_t s = 1;
    for (size_t i = 2; i < t.shape.size(); ++i) s *= static_cast<size_t>(t.shape[i]);
    return s;
}

// --- layers -----------------------------------------------------------------

class Conv1d final : public Layer {
public:
    Conv1d(int in_ch, int out_ch, int k, int pad)
        : in_(in_ch), out_(out_ch), k_(k), pad_(pad),
          w_({out_ch, in_ch, k}), b_({out_ch}), gw_({out_ch, in_ch, k}), gb_({out_ch}) {
        expect(in_ch > 0 && out_ch > 0 && k > 0 && pad >= 0, "conv1d: bad geometry");
    }
    std::string name() const override { return "conv1d"; }

    Tensor forward(const Tensor& x, Context& ctx) override {
        expect(x.shape.size() == 3 && x.dim(1) == in_, "conv1d: expected [N," + std::to_string(in_) + ",L]");
        const int N = x.dim(0), L = x.dim(2), Lo = L + 2 * pad_ - k_ + 1;
        expect(Lo >= 1, "conv1d: input length " + std::to_string(L) + " too short for k=" + std::to_string(k_));
        Tensor y({N, out_, Lo});
        for (int n = 0; n < N; ++n)
            for (int oc = 0; oc < out_; ++oc)
                for (int ol = 0; ol < Lo; ++ol) {
                    double acc = b_[oc];
                    for (int ic = 0; ic < in_; ++ic)
                        for (int kk = 0; kk < k_; ++kk) {
                            int il = ol + kk - pad_;
                            if (il < 0 || il >= L) continue;
                            acc += w_[(static_cast<size_t>(oc) * in_ + ic) * k_ + kk] *
                                   x[(static_cast<size_t>(n) * in_ + ic) * L + il];
                        }
                    y[(static_cast<size_t>(n) * out_ + oc) * Lo + ol] = acc;
                }
        if (ctx.mode == Mode::Train) x_ = x;
        return y;
    }

    Tensor backward(const Tensor& gy, Context&) override {
        require_cache(!x_.v.empty(), "conv1d");
        const int N = x_.dim(0), L = x_.dim(2), Lo = gy.dim(2);
        Tensor gx(x_.shape);
        for (int n = 0; n < N; ++n)
            for (int oc = 0; oc < out_; ++oc)
                for (int ol = 0; ol < Lo; ++ol) {
                    double g = gy[(static_cast<size_t>(n) * out_ + oc) * Lo + ol];
                    gb_[oc] += g;
                    for (int ic = 0; ic < in_; ++ic)
                        for (int kk = 0; kk < k_; ++kk) {
                            int il = ol + kk - pad_;
                            if (il < 0 || il >= L) continue;
                            size_t wi = (static_cast<size_t>(oc) * in_ + ic) * k_ + kk;
                            size_t xi = (static_cast<size_t>(n) * in_ + ic) * L + il;
                            gw_[wi] += g * x_[xi];
                            gx[xi] += g * w_[wi];
                        }
                }
        return gx;
    }

    std::vector<Tensor*> params() override { return {&w_, &b_}; }
    std::vector<Tensor*> grads() override { return {&gw_, &gb_}; }
    json spec() const override { return {{"type", "conv1d"}, {"in", in_}, {"out", out_}, {"k", k_}, {"pad", pad_}}; }

private:
    int in_, out_, k_, pad_;
    Tensor w_, b_, gw_, gb_, x_;
};

class AvgPool1d final : public Layer {
public:
    explicit AvgPool1d(int k) : k_(k) { expect(k > 0, "avgpool1d: k must be positive"); }
    std::string name() const override { return "avgpool1d"; }

    Tensor forward(const Tensor& x, Context& ctx) override {
        expect(x.shape.size() == 3, "avgpool1d: expected [N,C,L]");
        const int N = x.dim(0), C = x.dim(1), L = x.dim(2), Lo = L / k_;
        expect(Lo >= 1, "avgpool1d: length " + std::to_string(L) + " shorter than k=" + std::to_string(k_));
        Tensor y({N, C, Lo});
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c)
                for (int j = 0; j < Lo; ++j) {
                    double acc = 0;
                    for (int t = 0; t < k_; ++t)
                        acc += x[(static_cast<size_t>(n) * C + c) * L + j * k_ + t];
                    y[(static_cast<size_t>(n) * C + c) * Lo + j] = acc / k_;
                }
        if (ctx.mode == Mode::Train) in_shape_ = x.shape;
        return y;
    }

    Tensor backward(const Tensor& gy, Context&) override {
        require_cache(!in_shape_.empty(), "avgpool1d");
        const int N = in_shape_[0], C = in_shape_[1], L = in_shape_[2], Lo = gy.dim(2);
        Tensor gx({N, C, L});
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c)
                for (int j = 0; j < Lo; ++j) {
                    double g = gy[(static_cast<size_t>(n) * C + c) * Lo + j] / k_;
                    for (int t = 0; t < k_; ++t)
                        gx[(static_cast<size_t>(n) * C + c) * L + j * k_ + t] = g;
                }
        return gx;
    }

    json spec() const override { return {{"type", "avgpool1d"}, {"k", k_}}; }

private:
    int k_;
    std::vector<int> in_shape_;
};

class Conv2d final : public Layer {
public:
    Conv2d(int in_ch, int out_ch, int k, int pad)
        : in_(in_ch), out_(out_ch), k_(k), pad_(pad),
          w_({out_ch, in_ch, k, k}), b_({out_ch}), gw_({out_ch, in_ch, k, k}), gb_({out_ch}) {
        expect(in_ch > 0 && out_ch > 0 && k > 0 && pad >= 0, "conv2d: bad geometry");
    }
    std::string name() const override { return "conv2d"; }

    Tensor forward(const Tensor& x, Context& ctx) override {
        expect(x.shape.size() == 4 && x.dim(1) == in_,
               "conv2d: expected [N," + std::to_string(in_) + ",H,W]");
        const int N = x.dim(0), H = x.dim(2), W = x.dim(3);
        const int Ho = H + 2 * pad_ - k_ + 1, Wo = W + 2 * pad_ - k_ + 1;
        expect(Ho >= 1 && Wo >= 1, "conv2d: spatial extent too small for k=" + std::to_string(k_));
        Tensor y({N, out_, Ho, Wo});
        for (int n = 0; n < N; ++n)
            for (int oc = 0; oc < out_; ++oc) {
                double* yp = &y.v[((static_cast<size_t>(n) * out_ + oc) * Ho) * Wo];
                for (size_t i = 0; i < static_cast<size_t>(Ho) * Wo; ++i) yp[i] = b_[oc];
                for (int ic = 0; ic < in_; ++ic) {
                    const double* xp = &x.v[((static_cast<size_t>(n) * in_ + ic) * H) * W];
                    const double* wp = &w_.v[((static_cast<size_t>(oc) * in_ + ic) * k_) * k_];
                    for (int ky = 0; ky < k_; ++ky)
                        for (int kx = 0; kx < k_; ++kx) {
                            double wv = wp[ky * k_ + kx];
                            if (wv == 0.0) continue;
                            int y0 = std::max(0, pad_ - ky), y1 = std::min(Ho, H + pad_ - ky);
                            int x0 = std::max(0, pad_ - kx), x1 = std::min(Wo, W + pad_ - kx);
                            for (int oy = y0; oy < y1; ++oy) {
                                const double* xrow = xp + (oy + ky - pad_) * W + (x0 + kx - pad_);
                                double* yrow = yp + oy * Wo + x0;
                                for (int ox = 0; ox < x1 - x0; ++ox) yrow[ox] += wv * xrow[ox];
                            }
                        }
                }
            }
        if (ctx.mode == Mode::Train) x_ = x;
        return y;
    }

    Tensor backward(const Tensor& gy, Context&) override {
        require_cache(!x_.v.empty(), "conv2d");
        const int N = x_.dim(0), H = x_.dim(2), W = x_.dim(3);
        const int Ho = gy.dim(2), Wo = gy.dim(3);
        Tensor gx(x_.shape);
        for (int n = 0; n < N; ++n)
            for (int oc = 0; oc < out_; ++oc) {
                const double* gp = &gy.v[((static_cast<size_t>(n) * out_ + oc) * Ho) * Wo];
                for (size_t i = 0; i < static_cast<size_t>(Ho) * Wo; ++i) gb_[oc] += gp[i];
                for (int ic = 0; ic < in_; ++ic) {
                    const double* xp = &x_.v[((static_cast<size_t>(n) * in_ + ic) * H) * W];
                    double* gxp = &gx.v[((static_cast<size_t>(n) * in_ + ic) * H) * W];
                    double* gwp = &gw_.v[((static_cast<size_t>(oc) * in_ + ic) * k_) * k_];
                    const double* wp = &w_.v[((static_cast<size_t>(oc) * in_ + ic) * k_) * k_];
                    for (int ky = 0; ky < k_; ++ky)
                        for (int kx = 0; kx < k_; ++kx) {
                            int y0 = std::max(0, pad_ - ky), y1 = std::min(Ho, H + pad_ - ky);
                            int x0 = std::max(0, pad_ - kx), x1 = std::min(Wo, W + pad_ - kx);
                            double wv = wp[ky * k_ + kx], gwacc = 0;
                            for (int oy = y0; oy < y1; ++oy) {
                                const double* grow = gp + oy * Wo + x0;
                                const double* xrow = xp + (oy + ky - pad_) * W + (x0 + kx - pad_);
                                double* gxrow = gxp + (oy + ky - pad_) * W + (x0 + kx - pad_);
                                for (int ox = 0; ox < x1 - x0; ++ox) {
                                    gwacc += grow[ox] * xrow[ox];
                                    gxrow[ox] += grow[ox] * wv;
                                }
                            }
                            gwp[ky * k_ + kx] += gwacc;
                        }
                }
            }
        return gx;
    }

    std::vector<Tensor*> params() override { return {&w_, &b_}; }
    std::vector<Tensor*> grads() override { return {&gw_, &gb_}; }
    json spec() const override { return {{"type", "conv2d"}, {"in", in_}, {"out", out_}, {"k", k_}, {"pad", pad_}}; }

private:
    int in_, out_, k_, pad_;
    Tensor w_, b_, gw_, gb_, x_;
};

class MaxPool2d final : public Layer {
public:
    explicit MaxPool2d(int k) : k_(k) { expect(k > 0, "maxpool2d: k must be positive"); }
    std::string name() const override { return "maxpool2d"; }

    Tensor forward(const Tensor& x, Context& ctx) override {
        expect(x.shape.size() == 4, "maxpool2d: expected [N,C,H,W]");
        const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
        const int Ho = H / k_, Wo = W / k_;
        expect(Ho >= 1 && Wo >= 1, "maxpool2d: extent smaller than k");
        Tensor y({N, C, Ho, Wo});
        argmax_.assign(y.size(), 0);
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c)
                for (int oy = 0; oy < Ho; ++oy)
                    for (int ox = 0; ox < Wo; ++ox) {
                        size_t base = (static_cast<size_t>(n) * C + c) * H;
                        double best = -std::numeric_limits<double>::infinity();
                        size_t arg = 0;
                        for (int dy = 0; dy < k_; ++dy)
                            for (int dx = 0; dx < k_; ++dx) {
                                size_t xi = (base + oy * k_ + dy) * W + ox * k_ + dx;
                                if (x[xi] > best) {
                                    best = x[xi];
                                    arg = xi;
                                }
                            }
                        size_t yi = ((static_cast<size_t>(n) * C + c) * Ho + oy) * Wo + ox;
                        y[yi] = best;
                        argmax_[yi] = arg;
                    }
        if (ctx.mode == Mode::Train) {
            in_shape_ = x.shape;
            have_cache_ = true;
        }
        return y;
    }

    Tensor backward(const Tensor& gy, Context&) override {
        require_cache(have_cache_, "maxpool2d");
        Tensor gx({in_shape_[0], in_shape_[1], in_shape_[2], in_shape_[3]});
        for (size_t i = 0; i < gy.size(); ++i) gx[argmax_[i]] += gy[i];
        return gx;
    }

    json spec() const override { return {{"type", "maxpool2d"}, {"k", k_}}; }

private:
    int k_;
    bool have_cache_ = false;
    std::vector<int> in_shape_;
    std::vector<size_t> argmax_;
};

class GlobalAvgPool2d final : public Layer {
public:
    std::string name() const override { return "global_avgpool2d"; }

    Tensor forward(const Tensor& x, Context& ctx) override {
        expect(x.shape.size() == 4, "global_avgpool2d: expected [N,C,H,W]");
        const int N = x.dim(0), C = x.dim(1);
        const size_t S = static_cast<size_t>(x.dim(2)) * x.dim(3);
        Tensor y({N, C});
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                const double* xp = &x.v[(static_cast<size_t>(n) * C + c) * S];
                double acc = 0;
                for (size_t i = 0; i < S; ++i) acc += xp[i];
                y[static_cast<size_t>(n) * C + c] = acc / static_cast<double>(S);
            }
        if (ctx.mode == Mode::Train) in_shape_ = x.shape;
        return y;
    }

    Tensor backward(const Tensor& gy, Context&) override {
        require_cache(!in_shape_.empty(), "global_avgpool2d");
        const int N = in_shape_[0], C = in_shape_[1];
        const size_t S = static_cast<size_t>(in_shape_[2]) * in_shape_[3];
        Tensor gx(in_shape_);
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                double g = gy[static_cast<size_t>(n) * C + c] / static_cast<double>(S);
                double* gxp = &gx.v[(static_cast<size_t>(n) * C + c) * S];
                for (size_t i = 0; i < S; ++i) gxp[i] = g;
            }
        return gx;
    }

    json spec() const override { return {{"type", "global_avgpool2d"}}; }

private:
    std::vector<int> in_shape_;
};

class Upsample2d final : public Layer {
public:
    explicit Upsample2d(int scale) : s_(scale) { expect(scale >= 1, "upsample2d: bad scale"); }
    std::string name() const override { return "upsample2d"; }

    struct Tap {
        int lo, hi;
        double w_hi;
    };
    static Tap tap(int o, int out_n, int in_n) {
        double c = (o + 0.5) * in_n / static_cast<double>(out_n) - 0.5;
        c = std::clamp(c, 0.0, in_n - 1.0);
        int lo = static_cast<int>(std::floor(c));
        int hi = std::min(lo + 1, in_n - 1);
        return {lo, hi, c - lo};
    }

    Tensor forward(const Tensor& x, Context& ctx) override {
        expect(x.shape.size() == 4, "upsample2d: expected [N,C,H,W]");
        const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
        const int Ho = H * s_, Wo = W * s_;
        Tensor y({N, C, Ho, Wo});
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                const double* xp = &x.v[(static_cast<size_t>(n) * C + c) * H * W];
                double* yp = &y.v[(static_cast<size_t>(n) * C + c) * Ho * Wo];
                for (int oy = 0; oy < Ho; ++oy) {
                    Tap ty = tap(oy, Ho, H);
                    for (int ox = 0; ox < Wo; ++ox) {
                        Tap tx = tap(ox, Wo, W);
                        double top = (1 - tx.w_hi) * xp[ty.lo * W + tx.lo] + tx.w_hi * xp[ty.lo * W + tx.hi];
                        double bot = (1 - tx.w_hi) * xp[ty.hi * W + tx.lo] + tx.w_hi * xp[ty.hi * W + tx.hi];
                        yp[oy * Wo + ox] = (1 - ty.w_hi) * top + ty.w_hi * bot;
                    }
                }
            }
        if (ctx.mode == Mode::Train) {
            in_shape_ = x.shape;
            have_cache_ = true;
        }
        return y;
    }

    Tensor backward(const Tensor& gy, Context&) override {
        require_cache(have_cache_, "upsample2d");
        const int N = in_shape_[0], C = in_shape_[1], H = in_shape_[2], W = in_shape_[3];
        const int Ho = gy.dim(2), Wo = gy.dim(3);
        Tensor gx({N, C, H, W});
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                double* gxp = &gx.v[(static_cast<size_t>(n) * C + c) * H * W];
                const double* gp = &gy.v[(static_cast<size_t>(n) * C + c) * Ho * Wo];
                for (int oy = 0; oy < Ho; ++oy) {
                    Tap ty = tap(oy, Ho, H);
                    for (int ox = 0; ox < Wo; ++ox) {
                        Tap tx = tap(ox, Wo, W);
                        double g = gp[oy * Wo + ox];
                        gxp[ty.lo * W + tx.lo] += (1 - ty.w_hi) * (1 - tx.w_hi) * g;
                        gxp[ty.lo * W + tx.hi] += (1 - ty.w_hi) * tx.w_hi * g;
                        gxp[ty.hi * W + tx.lo] += ty.w_hi * (1 - tx.w_hi) * g;
                        gxp[ty.hi * W + tx.hi] += ty.w_hi * tx.w_hi * g;
                    }
                }
            }
        return gx;
    }

    json spec() const override { return {{"type", "upsample2d"}, {"scale", s_}}; }

private:
    int s_;
    bool have_cache_ = false;
    std::vector<int> in_shape_;
};

class FullyConnected final : public Layer {
public:
    FullyConnected(int in, int out)
        : in_(in), out_(out), w_({out, in}), b_({out}), gw_({out, in}), gb_({out}) {
        expect(in > 0 && out > 0, "fc: bad geometry");
    }
    std::string name() const override { return "fc"; }

    Tensor forward(const Tensor& x, Context& ctx) override {
        expect(x.shape.size() == 2 && x.dim(1) == in_, "fc: expected [N," + std::to_string(in_) + "]");
        const int N = x.dim(0);
        Tensor y({N, out_});
        for (int n = 0; n < N; ++n)
            for (int o = 0; o < out_; ++o) {
                double acc = b_[o];
                const double* wr = &w_.v[static_cast<size_t>(o) * in_];
                const double* xr = &x.v[static_cast<size_t>(n) * in_];
                for (int i = 0; i < in_; ++i) acc += wr[i] * xr[i];
                y[static_cast<size_t>(n) * out_ + o] = acc;
            }
        if (ctx.mode == Mode::Train) x_ = x;
        return y;
    }

    Tensor backward(const Tensor& gy, Context&) override {
        require_cache(!x_.v.empty(), "fc");
        const int N = x_.dim(0);
        Tensor gx(x_.shape);
        for (int n = 0; n < N; ++n)
            for (int o = 0; o < out_; ++o) {
                double g = gy[static_cast<size_t>(n) * out_ + o];
                gb_[o] += g;
                double* gwr = &gw_.v[static_cast<size_t>(o) * in_];
                const double* wr = &w_.v[static_cast<size_t>(o) * in_];
                const double* xr = &x_.v[static_cast<size_t>(n) * in_];
                double* gxr = &gx.v[static_cast<size_t>(n) * in_];
                for (int i = 0; i < in_; ++i) {
                    gwr[i] += g * xr[i];
                    gxr[i] += g * wr[i];
                }
            }
        return gx;
    }

    std::vector<Tensor*> params() override { return {&w_, &b_}; }
    std::vector<Tensor*> grads() override { return {&gw_, &gb_}; }
    json spec() const override { return {{"type", "fc"}, {"in", in_}, {"out", out_}}; }

private:
    int in_, out_;
    Tensor w_, b_, gw_, gb_, x_;
};

// Normalizes over all axes except channel axis 1. Running statistics follow
// momentum 0.1; eval uses the running values, train/refresh the batch ones.
class BatchNorm final : public Layer {
public:
    explicit BatchNorm(int features)
        : c_(features), gamma_({features}), beta_({features}), ggamma_({features}), gbeta_({features}),
          run_mean_({features}), run_var_({features}) {
        expect(features > 0, "batchnorm: bad feature count");
        for (int i = 0; i < features; ++i) {
            gamma_[i] = 1.0;
            run_var_[i] = 1.0;
        }
    }
    std::string name() const override { return "batchnorm"; }

    Tensor forward(const Tensor& x, Context& ctx) override {
        expect(x.shape.size() >= 2 && x.dim(1) == c_,
               "batchnorm: expected channel axis of size " + std::to_string(c_));
        const int N = x.dim(0);
        const size_t S = spatial_sites(x);
        const size_t m = static_cast<size_t>(N) * S;
        Tensor y(x.shape);

        std::vector<double> mean(c_), var(c_);
        bool batch_stats = ctx.mode != Mode::Eval;
        if (batch_stats) {
            for (int c = 0; c < c_; ++c) {
                double s = 0;
                for (int n = 0; n < N; ++n) {
                    const double* xp = &x.v[(static_cast<size_t>(n) * c_ + c) * S];
                    for (size_t i = 0; i < S; ++i) s += xp[i];
                }
                mean[c] = s / static_cast<double>(m);
                double q = 0;
                for (int n = 0; n < N; ++n) {
                    const double* xp = &x.v[(static_cast<size_t>(n) * c_ + c) * S];
                    for (size_t i = 0; i < S; ++i) q += (xp[i] - mean[c]) * (xp[i] - mean[c]);
                }
                var[c] = q / static_cast<double>(m); // biased, used for normalization
            }
            if (ctx.mode == Mode::Train) {
                double unbias = m > 1 ? static_cast<double>(m) / (m - 1) : 1.0;
                for (int c = 0; c < c_; ++c) {
                    run_mean_[c] = (1 - kMomentum) * run_mean_[c] + kMomentum * mean[c];
                    run_var_[c] = (1 - kMomentum) * run_var_[c] + kMomentum * var[c] * unbias;
                }
            } else { // StatRefresh: pool exact moments over the refresh pass
                expect(acc_sum_.size() == static_cast<size_t>(c_),
                       "batchnorm: stat-refresh forward without begin_stat_refresh");
                for (int c = 0; c < c_; ++c) {
                    acc_sum_[c] += mean[c] * static_cast<double>(m);
                    acc_sq_[c] += (var[c] + mean[c] * mean[c]) * static_cast<double>(m);
                }
                acc_count_ += m;
            }
        } else {
            for (int c = 0; c < c_; ++c) {
                mean[c] = run_mean_[c];
                var[c] = run_var_[c];
            }
        }

        std::vector<double> inv_std(c_);
        for (int c = 0; c < c_; ++c) inv_std[c] = 1.0 / std::sqrt(var[c] + kEps);
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < c_; ++c) {
                const double* xp = &x.v[(static_cast<size_t>(n) * c_ + c) * S];
                double* yp = &y.v[(static_cast<size_t>(n) * c_ + c) * S];
                for (size_t i = 0; i < S; ++i) yp[i] = gamma_[c] * ((xp[i] - mean[c]) * inv_std[c]) + beta_[c];
            }

        if (ctx.mode == Mode::Train) {
            xhat_ = Tensor(x.shape);
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < c_; ++c) {
                    const double* xp = &x.v[(static_cast<size_t>(n) * c_ + c) * S];
                    double* hp = &xhat_.v[(static_cast<size_t>(n) * c_ + c) * S];
                    for (size_t i = 0; i < S; ++i) hp[i] = (xp[i] - mean[c]) * inv_std[c];
                }
            inv_std_ = inv_std;
        }
        return y;
    }

    Tensor backward(const Tensor& gy, Context&) override {
        require_cache(!xhat_.v.empty(), "batchnorm");
        const int N = xhat_.dim(0);
        const size_t S = spatial_sites(xhat_);
        const double m = static_cast<double>(static_cast<size_t>(N) * S);
        Tensor gx(xhat_.shape);
        for (int c = 0; c < c_; ++c) {
            double sum_g = 0, sum_gh = 0;
            for (int n = 0; n < N; ++n) {
                const double* gp = &gy.v[(static_cast<size_t>(n) * c_ + c) * S];
                const double* hp = &xhat_.v[(static_cast<size_t>(n) * c_ + c) * S];
                for (size_t i = 0; i < S; ++i) {
                    sum_g += gp[i];
                    sum_gh += gp[i] * hp[i];
                }
            }
            ggamma_[c] += sum_gh;
            gbeta_[c] += sum_g;
            double k = gamma_[c] * inv_std_[c];
            for (int n = 0; n < N; ++n) {
                const double* gp = &gy.v[(static_cast<size_t>(n) * c_ + c) * S];
                const double* hp = &xhat_.v[(static_cast<size_t>(n) * c_ + c) * S];
                double* gxp = &gx.v[(static_cast<size_t>(n) * c_ + c) * S];
                for (size_t i = 0; i < S; ++i)
                    gxp[i] = k * (gp[i] - sum_g / m - hp[i] * sum_gh / m);
            }
        }
        return gx;
    }

    void begin_refresh() {
        acc_sum_.assign(c_, 0.0);
        acc_sq_.assign(c_, 0.0);
        acc_count_ = 0;
    }
    void end_refresh() {
        expect(acc_count_ > 0, "batchnorm: stat refresh saw no data");
        for (int c = 0; c < c_; ++c) {
            double mean = acc_sum_[c] / static_cast<double>(acc_count_);
            run_mean_[c] = mean;
            run_var_[c] = std::max(0.0, acc_sq_[c] / static_cast<double>(acc_count_) - mean * mean);
        }
    }

    std::vector<Tensor*> params() override { return {&gamma_, &beta_}; }
    std::vector<Tensor*> grads() override { return {&ggamma_, &gbeta_}; }
    std::vector<Tensor*> persistent() override { return {&gamma_, &beta_, &run_mean_, &run_var_}; }
    json spec() const override { return {{"type", "batchnorm"}, {"features", c_}}; }

    static constexpr double kMomentum = 0.1;
    static constexpr double kEps = 1e-5;

private:
    int c_;
    Tensor gamma_, beta_, ggamma_, gbeta_, run_mean_, run_var_, xhat_;
    std::vector<double> inv_std_;
    std::vector<double> acc_sum_, acc_sq_;
    size_t acc_count_ = 0;
};

class Elu final : public Layer {
public:
    std::string name() const override { return "elu"; }

    Tensor forward(const Tensor& x, Context& ctx) override {
        Tensor y(x.shape);
        for (size_t i = 0; i < x.size(); ++i) y[i] = x[i] > 0 ? x[i] : std::expm1(x[i]);
        if (ctx.mode == Mode::Train) y_ = y;
        return y;
    }

    Tensor backward(const Tensor& gy, Context&) override {
        require_cache(!y_.v.empty(), "elu");
        Tensor gx(y_.shape);
        // d/dx = 1 for x>0 else exp(x) = y+1 (alpha = 1)
        for (size_t i = 0; i < gy.size(); ++i) gx[i] = gy[i] * (y_[i] > 0 ? 1.0 : y_[i] + 1.0);
        return gx;
    }

    json spec() const override { return {{"type", "elu"}}; }

private:
    Tensor y_;
};

class Dropout final : public Layer {
public:
    explicit Dropout(double p) : p_(p) { expect(p >= 0.0 && p < 1.0, "dropout: p must be in [0,1)"); }
    std::string name() const override { return "dropout"; }

    Tensor forward(const Tensor& x, Context& ctx) override {
        if (ctx.mode != Mode::Train || p_ == 0.0) return x;
        expect(ctx.rng != nullptr, "dropout: train mode needs a context rng");
        mask_.assign(x.size(), 0.0);
        double keep = 1.0 - p_;
        Tensor y(x.shape);
        for (size_t i = 0; i < x.size(); ++i) {
            mask_[i] = ctx.rng->u01() >= p_ ? 1.0 / keep : 0.0; // inverted scaling
            y[i] = x[i] * mask_[i];
        }
        return y;
    }

    Tensor backward(const Tensor& gy, Context&) override {
        require_cache(!mask_.empty(), "dropout");
        Tensor gx(gy.shape);
        for (size_t i = 0; i < gy.size(); ++i) gx[i] = gy[i] * mask_[i];
        return gx;
    }

    json spec() const override { return {{"type", "dropout"}, {"p", p_}}; }

private:
    double p_;
    std::vector<double> mask_;
};

class Flatten final : public Layer {
public:
    std::string name() const override { return "flatten"; }

    Tensor forward(const Tensor& x, Context& ctx) override {
        expect(x.shape.size() >= 2, "flatten: expected a batched tensor");
        Tensor y = x;
        y.shape = {x.dim(0), static_cast<int>(x.size()) / x.dim(0)};
        if (ctx.mode == Mode::Train) in_shape_ = x.shape;
        return y;
    }

    Tensor backward(const Tensor& gy, Context&) override {
        require_cache(!in_shape_.empty(), "flatten");
        Tensor gx = gy;
        gx.shape = in_shape_;
        return gx;
    }

    json spec() const override { return {{"type", "flatten"}}; }

private:
    std::vector<int> in_shape_;
};

class SaveSkip final : public Layer {
public:
    std::string name() const override { return "save_skip"; }

    Tensor forward(const Tensor& x, Context& ctx) override {
        ctx.skip_stack.push_back(x);
        return x;
    }

    Tensor backward(const Tensor& gy, Context& ctx) override {
        expect(!ctx.grad_stack.empty(), "save_skip: unbalanced skip gradient stack");
        Tensor g = gy;
        const Tensor& extra = ctx.grad_stack.back();
        expect(g.same_shape(extra), "save_skip: gradient shape mismatch");
        for (size_t i = 0; i < g.size(); ++i) g[i] += extra[i];
        ctx.grad_stack.pop_back();
        return g;
    }

    json spec() const override { return {{"type", "save_skip"}}; }
};

// Concatenates the top of the skip stack onto the channel axis: [x, skip].
class ConcatSkip final : public Layer {
public:
    std::string name() const override { return "concat_skip"; }

    Tensor forward(const Tensor& x, Context& ctx) override {
        expect(!ctx.skip_stack.empty(), "concat_skip: no saved skip tensor");
        Tensor s = std::move(ctx.skip_stack.back());
        ctx.skip_stack.pop_back();
        expect(x.shape.size() == 4 && s.shape.size() == 4, "concat_skip: expected [N,C,H,W]");
        expect(x.dim(0) == s.dim(0) && x.dim(2) == s.dim(2) && x.dim(3) == s.dim(3),
               "concat_skip: spatial/batch shape mismatch");
        const int N = x.dim(0), Cx = x.dim(1), Cs = s.dim(1), H = x.dim(2), W = x.dim(3);
        const size_t S = static_cast<size_t>(H) * W;
        Tensor y({N, Cx + Cs, H, W});
        for (int n = 0; n < N; ++n) {
            std::copy_n(&x.v[static_cast<size_t>(n) * Cx * S], Cx * S,
                        &y.v[static_cast<size_t>(n) * (Cx + Cs) * S]);
            std::copy_n(&s.v[static_cast<size_t>(n) * Cs * S], Cs * S,
                        &y.v[static_cast<size_t>(n) * (Cx + Cs) * S + Cx * S]);
        }
        cx_ = Cx;
        cs_ = Cs;
        return y;
    }

    Tensor backward(const Tensor& gy, Context& ctx) override {
        require_cache(cx_ > 0, "concat_skip");
        const int N = gy.dim(0), H = gy.dim(2), W = gy.dim(3);
        const size_t S = static_cast<size_t>(H) * W;
        Tensor gx({N, cx_, H, W}), gs({N, cs_, H, W});
        for (int n = 0; n < N; ++n) {
            std::copy_n(&gy.v[static_cast<size_t>(n) * (cx_ + cs_) * S], cx_ * S,
                        &gx.v[static_cast<size_t>(n) * cx_ * S]);
            std::copy_n(&gy.v[static_cast<size_t>(n) * (cx_ + cs_) * S + cx_ * S], cs_ * S,
                        &gs.v[static_cast<size_t>(n) * cs_ * S]);
        }
        ctx.grad_stack.push_back(std::move(gs));
        return gx;
    }

    json spec() const override { return {{"type", "concat_skip"}}; }

private:
    int cx_ = 0, cs_ = 0;
};

} // namespace

std::unique_ptr<Layer> conv1d(int in_ch, int out_ch, int k, int pad) {
    return std::make_unique<Conv1d>(in_ch, out_ch, k, pad);
}
std::unique_ptr<Layer> avgpool1d(int k) { return std::make_unique<AvgPool1d>(k); }
std::unique_ptr<Layer> conv2d(int in_ch, int out_ch, int k, int pad) {
    return std::make_unique<Conv2d>(in_ch, out_ch, k, pad);
}
std::unique_ptr<Layer> maxpool2d(int k) { return std::make_unique<MaxPool2d>(k); }
std::unique_ptr<Layer> global_avgpool2d() { return std::make_unique<GlobalAvgPool2d>(); }
std::unique_ptr<Layer> upsample2d_bilinear(int scale) { return std::make_unique<Upsample2d>(scale); }
std::unique_ptr<Layer> fully_connected(int in, int out) { return std::make_unique<FullyConnected>(in, out); }
std::unique_ptr<Layer> batchnorm(int features) { return std::make_unique<BatchNorm>(features); }
std::unique_ptr<Layer> elu() { return std::make_unique<Elu>(); }
std::unique_ptr<Layer> dropout(double p) { return std::make_unique<Dropout>(p); }
std::unique_ptr<Layer> flatten() { return std::make_unique<Flatten>(); }
std::unique_ptr<Layer> save_skip() { return std::make_unique<SaveSkip>(); }
std::unique_ptr<Layer> concat_skip() { return std::make_unique<ConcatSkip>(); }

std::unique_ptr<Layer> layer_from_spec(const json& s) {
    const std::string type = s.at("type").get<std::string>();
    if (type == "conv1d") return conv1d(s.at("in"), s.at("out"), s.at("k"), s.at("pad"));
    if (type == "avgpool1d") return avgpool1d(s.at("k"));
    if (type == "conv2d") return conv2d(s.at("in"), s.at("out"), s.at("k"), s.at("pad"));
    if (type == "maxpool2d") return maxpool2d(s.at("k"));
    if (type == "global_avgpool2d") return global_avgpool2d();
    if (type == "upsample2d") return upsample2d_bilinear(s.at("scale"));
    if (type == "fc") return fully_connected(s.at("in"), s.at("out"));
    if (type == "batchnorm") return batchnorm(s.at("features"));
    if (type == "elu") return elu();
    if (type == "dropout") return dropout(s.at("p"));
    if (type == "flatten") return flatten();
    if (type == "save_skip") return save_skip();
    if (type == "concat_skip") return concat_skip();
    throw ConfigError("unknown layer type: " + type);
}

// --- network ------------------------------------------------------------------

Tensor Network::forward(const Tensor& x, Context& ctx) {
    Tensor cur = x;
    for (size_t i = 0; i < layers_.size(); ++i) {
        try {
            cur = layers_[i]->forward(cur, ctx);
        } catch (const ConfigError& e) {
            throw ConfigError("layer " + std::to_string(i) + " (" + layers_[i]->name() + "): " + e.what());
        }
    }
    return cur;
}

Tensor Network::backward(const Tensor& loss_grad, Context& ctx) {
    Tensor cur = loss_grad;
    for (size_t i = layers_.size(); i-- > 0;) {
        try {
            cur = layers_[i]->backward(cur, ctx);
        } catch (const ConfigError& e) {
            throw ConfigError("layer " + std::to_string(i) + " (" + layers_[i]->name() + "): " + e.what());
        }
    }
    return cur;
}

std::vector<Tensor*> Network::params() {
    std::vector<Tensor*> out;
    for (auto& l : layers_)
        for (Tensor* t : l->params()) out.push_back(t);
    return out;
}

std::vector<Tensor*> Network::grads() {
    std::vector<Tensor*> out;
    for (auto& l : layers_)
        for (Tensor* t : l->grads()) out.push_back(t);
    return out;
}

std::vector<Tensor*> Network::persistent() {
    std::vector<Tensor*> out;
    for (auto& l : layers_)
        for (Tensor* t : l->persistent()) out.push_back(t);
    return out;
}

void Network::zero_grad() {
    for (Tensor* g : grads()) std::fill(g->v.begin(), g->v.end(), 0.0);
}

size_t Network::count_parameters() {
    size_t n = 0;
    for (Tensor* p : params()) n += p->size();
    return n;
}

void Network::init_params(Rng& rng) {
    for (auto& l : layers_) {
        json s = l->spec();
        const std::string type = s["type"].get<std::string>();
        if (type == "conv1d" || type == "conv2d" || type == "fc") {
            auto ps = l->params();
            Tensor* w = ps[0];
            size_t fan_in = w->size() / static_cast<size_t>(w->dim(0));
            double std = std::sqrt(2.0 / static_cast<double>(fan_in));
            for (double& v : w->v) v = std * rng.normal();
            std::fill(ps[1]->v.begin(), ps[1]->v.end(), 0.0); // bias
        }
    }
}

void Network::begin_stat_refresh() {
    for (auto& l : layers_)
        if (auto* bn = dynamic_cast<BatchNorm*>(l.get())) bn->begin_refresh();
}

void Network::end_stat_refresh() {
    for (auto& l : layers_)
        if (auto* bn = dynamic_cast<BatchNorm*>(l.get())) bn->end_refresh();
}

void Network::save(const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError(IoError::Kind::MissingFile, "cannot write checkpoint: " + path.string());
    json topo = json::array();
    for (auto& l : layers_) topo.push_back(l->spec());
    json header = {{"layers", topo}, {"dtype", "float64"}};
    out << header.dump() << '\n';
    for (Tensor* t : persistent())
        out.write(reinterpret_cast<const char*>(t->v.data()),
                  static_cast<std::streamsize>(t->v.size() * sizeof(double)));
    if (!out) throw IoError(IoError::Kind::MissingFile, "checkpoint write failed: " + path.string());
}

Network Network::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError(IoError::Kind::MissingFile, "cannot read checkpoint: " + path.string());
    std::string line;
    if (!std::getline(in, line))
        throw IoError(IoError::Kind::MalformedHeader, "missing checkpoint header: " + path.string());
    json header = json::parse(line, nullptr, false);
    if (header.is_discarded() || !header.contains("layers"))
        throw IoError(IoError::Kind::MalformedHeader, "bad checkpoint header: " + path.string());
    Network net;
    for (const json& s : header["layers"]) net.add(layer_from_spec(s));
    for (Tensor* t : net.persistent()) {
        in.read(reinterpret_cast<char*>(t->v.data()),
                static_cast<std::streamsize>(t->v.size() * sizeof(double)));
        if (static_cast<size_t>(in.gcount()) != t->v.size() * sizeof(double))
            throw IoError(IoError::Kind::TruncatedPayload, "checkpoint payload truncated: " + path.string());
    }
    char probe;
    if (in.read(&probe, 1); in.gcount() != 0)
        throw IoError(IoError::Kind::TruncatedPayload, "checkpoint payload too long: " + path.string());
    return net;
}

// --- losses ---------------------------------------------------------------------

Tensor softmax(const Tensor& logits) {
    expect(logits.shape.size() >= 2, "softmax: expected [N,O,...]");
    const int N = logits.dim(0), O = logits.dim(1);
    const size_t S = spatial_sites(logits);
    Tensor p(logits.shape);
    for (int n = 0; n < N; ++n)
        for (size_t s = 0; s < S; ++s) {
            double mx = -std::numeric_limits<double>::infinity();
            for (int o = 0; o < O; ++o) mx = std::max(mx, logits[(static_cast<size_t>(n) * O + o) * S + s]);
            double z = 0;
            for (int o = 0; o < O; ++o) {
                size_t i = (static_cast<size_t>(n) * O + o) * S + s;
                p[i] = std::exp(logits[i] - mx);
                z += p[i];
            }
            for (int o = 0; o < O; ++o) p[(static_cast<size_t>(n) * O + o) * S + s] /= z;
        }
    return p;
}

Tensor softmax_backward(const Tensor& probs, const Tensor& gprobs) {
    expect(probs.same_shape(gprobs), "softmax_backward: shape mismatch");
    const int N = probs.dim(0), O = probs.dim(1);
    const size_t S = spatial_sites(probs);
    Tensor g(probs.shape);
    for (int n = 0; n < N; ++n)
        for (size_t s = 0; s < S; ++s) {
            double dot = 0;
            for (int o = 0; o < O; ++o) {
                size_t i = (static_cast<size_t>(n) * O + o) * S + s;
                dot += gprobs[i] * probs[i];
            }
            for (int o = 0; o < O; ++o) {
                size_t i = (static_cast<size_t>(n) * O + o) * S + s;
                g[i] = probs[i] * (gprobs[i] - dot);
            }
        }
    return g;
}

LossResult cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                         const std::vector<double>& class_weights) {
    const int N = logits.dim(0), O = logits.dim(1);
    const size_t S = spatial_sites(logits);
    expect(targets.size() == static_cast<size_t>(N) * S, "cross_entropy: target count mismatch");
    expect(class_weights.empty() || class_weights.size() == static_cast<size_t>(O),
           "cross_entropy: weight count mismatch");

    Tensor p = softmax(logits);
    LossResult out;
    out.grad = Tensor(logits.shape);
    double wtotal = 0, acc = 0;
    for (int n = 0; n < N; ++n)
        for (size_t s = 0; s < S; ++s) {
            int t = targets[static_cast<size_t>(n) * S + s];
            if (t < 0) continue;
            expect(t < O, "cross_entropy: target id out of range");
            double w = class_weights.empty() ? 1.0 : class_weights[t];
            size_t ti = (static_cast<size_t>(n) * O + t) * S + s;
            acc += w * -std::log(std::max(p[ti], 1e-300));
            wtotal += w;
            for (int o = 0; o < O; ++o) {
                size_t i = (static_cast<size_t>(n) * O + o) * S + s;
                out.grad[i] = w * (p[i] - (o == t ? 1.0 : 0.0));
            }
        }
    if (wtotal > 0) {
        out.value = acc / wtotal;
        for (double& g : out.grad.v) g /= wtotal;
    }
    return out;
}

LossResult dice_loss(const Tensor& probs, const std::vector<int>& targets) {
    const int N = probs.dim(0), O = probs.dim(1);
    const size_t S = spatial_sites(probs);
    expect(targets.size() == static_cast<size_t>(N) * S, "dice_loss: target count mismatch");

    // per-class intersection / prediction / target masses over the whole batch
    std::vector<double> inter(O, 0.0), pmass(O, 0.0), tmass(O, 0.0);
    for (int n = 0; n < N; ++n)
        for (size_t s = 0; s < S; ++s) {
            int t = targets[static_cast<size_t>(n) * S + s];
            if (t < 0) continue;
            expect(t < O, "dice_loss: target id out of range");
            tmass[t] += 1.0;
            for (int o = 0; o < O; ++o) {
                double pv = probs[(static_cast<size_t>(n) * O + o) * S + s];
                pmass[o] += pv;
                if (o == t) inter[o] += pv;
            }
        }

    std::vector<int> present;
    for (int o = 0; o < O; ++o)
        if (tmass[o] > 0) present.push_back(o);

    LossResult out;
    out.grad = Tensor(probs.shape);
    if (present.empty()) return out; // nothing annotated in this batch

    double dice_sum = 0;
    std::vector<double> denom(O, 0.0);
    for (int o : present) {
        denom[o] = pmass[o] + tmass[o];
        dice_sum += 2.0 * inter[o] / denom[o];
    }
    out.value = 1.0 - dice_sum / static_cast<double>(present.size());

    const double scale = 1.0 / static_cast<double>(present.size());
    for (int n = 0; n < N; ++n)
        for (size_t s = 0; s < S; ++s) {
            int t = targets[static_cast<size_t>(n) * S + s];
            if (t < 0) continue;
            for (int o : present) {
                size_t i = (static_cast<size_t>(n) * O + o) * S + s;
                double d_dice = (2.0 * (o == t ? 1.0 : 0.0) * denom[o] - 2.0 * inter[o]) / (denom[o] * denom[o]);
                out.grad[i] = -scale * d_dice;
            }
        }
    return out;
}

LossResult kl_divergence(const Tensor& probs, const Tensor& fuzzy) {
    expect(probs.same_shape(fuzzy), "kl_divergence: shape mismatch");
    expect(probs.shape.size() == 2, "kl_divergence: expected [N,O]");
    const int N = probs.dim(0), O = probs.dim(1);
    LossResult out;
    out.grad = Tensor(probs.shape);
    for (int n = 0; n < N; ++n)
        for (int o = 0; o < O; ++o) {
            size_t i = static_cast<size_t>(n) * O + o;
            double f = fuzzy[i];
            if (f <= 0.0) continue; // 0*log0 = 0 contributes nothing
            double p = std::max(probs[i], 1e-12);
            out.value += f * (std::log(f) - std::log(p)) / N;
            out.grad[i] = -f / p / N;
        }
    return out;
}

LossResult dice_ce(const Tensor& logits, const std::vector<int>& targets,
                   const std::vector<double>& class_weights) {
    LossResult ce = cross_entropy(logits, targets, class_weights);
    Tensor probs = softmax(logits);
    LossResult dl = dice_loss(probs, targets);
    Tensor dlogits = softmax_backward(probs, dl.grad);
    LossResult out;
    out.value = 0.5 * ce.value + 0.5 * dl.value;
    out.grad = Tensor(logits.shape);
    for (size_t i = 0; i < out.grad.size(); ++i) out.grad[i] = 0.5 * ce.grad[i] + 0.5 * dlogits[i];
    return out;
}

// --- optimizer / swa ---------------------------------------------------------------

Adam::Adam(const std::vector<Tensor*>& params, AdamConfig cfg) : cfg_(cfg) {
    for (Tensor* p : params) {
        m_.emplace_back(p->shape);
        v_.emplace_back(p->shape);
    }
}

double Adam::lr() const { return cfg_.lr0 * std::pow(cfg_.gamma, epoch_); }

void Adam::step(const std::vector<Tensor*>& params, const std::vector<Tensor*>& grads) {
    expect(params.size() == m_.size() && grads.size() == m_.size(), "adam: parameter list changed");
    ++t_;
    const double lr_t = lr();
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (size_t i = 0; i < params.size(); ++i) {
        Tensor& p = *params[i];
        const Tensor& g = *grads[i];
        expect(p.same_shape(m_[i]) && g.same_shape(m_[i]), "adam: shape mismatch");
        for (size_t j = 0; j < p.size(); ++j) {
            m_[i][j] = cfg_.beta1 * m_[i][j] + (1 - cfg_.beta1) * g[j];
            v_[i][j] = cfg_.beta2 * v_[i][j] + (1 - cfg_.beta2) * g[j] * g[j];
            double mhat = m_[i][j] / bc1;
            double vhat = v_[i][j] / bc2;
            p[j] -= lr_t * mhat / (std::sqrt(vhat) + cfg_.eps);
        }
    }
}

void Swa::update(const std::vector<Tensor*>& params) {
    if (avg_.empty())
        for (Tensor* p : params) avg_.emplace_back(p->shape);
    expect(avg_.size() == params.size(), "swa: parameter list changed");
    ++n_;
    for (size_t i = 0; i < params.size(); ++i)
        for (size_t j = 0; j < avg_[i].size(); ++j)
            avg_[i][j] += (params[i]->v[j] - avg_[i][j]) / n_;
}

void Swa::install(const std::vector<Tensor*>& params) const {
    expect(n_ > 0, "swa: no snapshots to install");
    expect(params.size() == avg_.size(), "swa: parameter list mismatch");
    for (size_t i = 0; i < params.size(); ++i) params[i]->v = avg_[i].v;
}

// --- gradient check ---------------------------------------------------------------------

GradcheckReport gradcheck(Network& net, const Tensor& input,
                          const std::function<LossResult(const Tensor&)>& loss, Rng rng, double eps) {
    auto value_at = [&](const Tensor& in) {
        Context ctx;
        ctx.mode = Mode::Train;
        Rng r = rng; // rewound: dropout masks identical across evaluations
        ctx.rng = &r;
        return loss(net.forward(in, ctx)).value;
    };

    Context ctx;
    ctx.mode = Mode::Train;
    Rng r0 = rng;
    ctx.rng = &r0;
    net.zero_grad();
    Tensor out = net.forward(input, ctx);
    LossResult base = loss(out);
    Tensor gin = net.backward(base.grad, ctx);

    std::vector<Tensor> analytic;
    for (Tensor* g : net.grads()) analytic.push_back(*g);

    GradcheckReport rep;
    auto probe = [&](double* slot, double a, const Tensor& in) {
        const double keep = *slot;
        *slot = keep + eps;
        double fp = value_at(in);
        *slot = keep - eps;
        double fm = value_at(in);
        *slot = keep;
        double num = (fp - fm) / (2 * eps);
        double rel = std::abs(a - num) / std::max({std::abs(a), std::abs(num), 1e-3});
        rep.max_rel_err = std::max(rep.max_rel_err, rel);
        ++rep.checked;
    };

    std::vector<Tensor*> ps = net.params();
    for (size_t i = 0; i < ps.size(); ++i)
        for (size_t j = 0; j < ps[i]->size(); ++j) probe(&ps[i]->v[j], analytic[i][j], input);

    Tensor in_copy = input;
    for (size_t j = 0; j < in_copy.size(); ++j) probe(&in_copy.v[j], gin[j], in_copy);
    return rep;
}

} // namespace spectraseg::nn
