#pragma once

#include <any>
#include <array>
#include <cmath>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include "rawpipe/rng.hpp"
#include "rawpipe/stage.hpp"
#include "rawpipe/tensor.hpp"

namespace rawpipe {

inline double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }
inline double inverse_softplus(double y) { return y + std::log1p(-std::exp(-y)); }

// ---- exposure ----------------------------------------------------------------

// Bounded global gain alpha(gamma) = 0.25 + 3.75 * sigmoid(gamma) in (0.25, 4).
inline double exposure_gain(double gamma) { return 0.25 + 3.75 * sigmoid(gamma); }

inline constexpr const char* kGammaParam = "sensor.gamma";

// out = clamp(alpha * in, 0, 1); gradients pass only through pixels strictly
// inside (0, 1) after the gain.
class ExposureStage final : public Stage {
public:
    std::string name() const override { return "sensor.exposure"; }
    std::vector<std::string> param_names() const override { return {kGammaParam}; }

    Tensor forward(const Tensor& in, const ParamSet& params, std::any& ctx) const override {
        const double gamma = params.value(kGammaParam).item();
        const double alpha = exposure_gain(gamma);
        ctx = in;
        Tensor out = in;
        for (std::size_t i = 0; i < out.size(); ++i) {
            const double v = alpha * in[i];
            out[i] = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
        }
        return out;
    }

    Tensor backward(const std::any& ctx, const Tensor& cot, const ParamSet& params,
                    ParamSet* param_grads) const override {
        const Tensor& in = std::any_cast<const Tensor&>(ctx);
        const double gamma = params.value(kGammaParam).item();
        const double s = sigmoid(gamma);
        const double alpha = 0.25 + 3.75 * s;
        const double dalpha = 3.75 * s * (1.0 - s);
        Tensor gin(in.shape());
        double ggamma = 0.0;
        for (std::size_t i = 0; i < in.size(); ++i) {
            const double v = alpha * in[i];
            if (v > 0.0 && v < 1.0) {
                gin[i] = cot[i] * alpha;
                ggamma += cot[i] * in[i] * dalpha;
            }
        }
        if (param_grads && param_grads->has(kGammaParam))
            param_grads->value(kGammaParam)[0] += ggamma;
        return gin;
    }
};

// ---- learnable CFA -------------------------------------------------------------

enum class CfaLayout { BayerRGGB, RCCC };

inline CfaLayout cfa_layout_from_string(const std::string& s) {
    if (s == "BAYER_RGGB") return CfaLayout::BayerRGGB;
    if (s == "RCCC") return CfaLayout::RCCC;
    throw ConfigError("cfa: unknown layout '" + s + "'");
}

// 2x2 mosaic with one learnable spectral response vector per channel class,
// stored as pre-softplus logits so effective responses stay nonnegative.
struct CfaModel {
    CfaLayout layout = CfaLayout::BayerRGGB;
    int n_classes = 3;
    std::array<int, 4> cell_class{0, 1, 1, 2};  // row-major 2x2 -> class
    double tau_pi = 1.0;
    bool soft_selection = false;
    Tensor response_logits;  // (n_classes, 3)
    Tensor select_logits;    // (4, n_classes), soft-selection mode only
};

inline CfaModel init_cfa(CfaLayout layout) {
    CfaModel m;
    m.layout = layout;
    const double on = inverse_softplus(1.0);
    const double off = -12.0;  // softplus(-12) ~ 6e-6
    if (layout == CfaLayout::BayerRGGB) {
        m.n_classes = 3;
        m.cell_class = {0, 1, 1, 2};  // [[R, G], [G, B]]
        m.response_logits = Tensor({3, 3}, off);
        m.response_logits.at(0, 0) = on;
        m.response_logits.at(1, 1) = on;
        m.response_logits.at(2, 2) = on;
    } else {
        m.n_classes = 2;
        m.cell_class = {0, 1, 1, 1};  // [[R, C], [C, C]]
        m.response_logits = Tensor({2, 3}, off);
        m.response_logits.at(0, 0) = on;
        const double clear = inverse_softplus(1.0 / 3.0);
        for (int c = 0; c < 3; ++c) m.response_logits.at(1, std::size_t(c)) = clear;
    }
    m.tau_pi = 1.0;
    m.soft_selection = false;
    m.select_logits = Tensor({4, std::size_t(m.n_classes)}, 0.0);
    for (int cell = 0; cell < 4; ++cell)
        m.select_logits.at(std::size_t(cell), std::size_t(m.cell_class[std::size_t(cell)])) = 10.0;
    return m;
}

inline CfaModel init_cfa(const std::string& layout) {
    return init_cfa(cfa_layout_from_string(layout));
}

inline constexpr const char* kCfaResponseParam = "sensor.cfa_logits";
inline constexpr const char* kCfaSelectParam = "sensor.cfa_select";

struct MosaicCtx {
    Tensor input;
    int H = 0, W = 0;
};

// R(p) = <I_exp(p), softplus(phi_{c(p)})>; in soft-selection mode the cell's
// channel class is a softmax over classes at temperature tau_pi.
class MosaicStage final : public Stage {
public:
    MosaicStage(CfaModel model, bool allow_odd_crop = false)
        : model_(std::move(model)), allow_odd_crop_(allow_odd_crop) {}

    std::string name() const override {
        return model_.soft_selection ? "sensor.mosaic_soft" : "sensor.mosaic";
    }
    std::vector<std::string> param_names() const override {
        if (model_.soft_selection) return {kCfaResponseParam, kCfaSelectParam};
        return {kCfaResponseParam};
    }
    const CfaModel& model() const { return model_; }
    void set_tau_pi(double tau) {
        if (!(tau > 0.0)) throw ConfigError("mosaic: tau_pi must be > 0");
        model_.tau_pi = tau;
    }

    Tensor forward(const Tensor& in, const ParamSet& params, std::any& ctx) const override {
        if (in.rank() != 3 || in.dim(2) != 3)
            throw ShapeError("sensor.mosaic: expected (H, W, 3) input");
        int H = int(in.dim(0)), W = int(in.dim(1));
        if ((H % 2 != 0 || W % 2 != 0)) {
            if (!allow_odd_crop_)
                throw ShapeError("sensor.mosaic: image dimensions must be even (or allow crop)");
            std::cerr << "warning: sensor.mosaic: cropping odd image dimensions " << H << "x" << W
                      << "\n";
            H -= H % 2;
            W -= W % 2;
        }
        auto c = std::make_shared<MosaicCtx>();
        c->input = in;
        c->H = H;
        c->W = W;
        ctx = c;

        const Tensor& logits = params.value(kCfaResponseParam);
        Tensor out({std::size_t(H), std::size_t(W)});
        if (!model_.soft_selection) {
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x) {
                    const int cls = model_.cell_class[std::size_t((y % 2) * 2 + (x % 2))];
                    double acc = 0.0;
                    for (int ch = 0; ch < 3; ++ch)
                        acc += in.at(std::size_t(y), std::size_t(x), std::size_t(ch)) *
                               softplus(logits.at(std::size_t(cls), std::size_t(ch)));
                    out.at(std::size_t(y), std::size_t(x)) = acc;
                }
        } else {
            const Tensor& sel = params.value(kCfaSelectParam);
            std::vector<double> w(4 * std::size_t(model_.n_classes));
            cell_weights(sel, w);
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x) {
                    const int cell = (y % 2) * 2 + (x % 2);
                    double acc = 0.0;
                    for (int cls = 0; cls < model_.n_classes; ++cls) {
                        double dot = 0.0;
                        for (int ch = 0; ch < 3; ++ch)
                            dot += in.at(std::size_t(y), std::size_t(x), std::size_t(ch)) *
                                   softplus(logits.at(std::size_t(cls), std::size_t(ch)));
                        acc += w[std::size_t(cell) * std::size_t(model_.n_classes) + std::size_t(cls)] * dot;
                    }
                    out.at(std::size_t(y), std::size_t(x)) = acc;
                }
        }
        return out;
    }

    Tensor backward(const std::any& ctx, const Tensor& cot, const ParamSet& params,
                    ParamSet* param_grads) const override {
        auto c = std::any_cast<std::shared_ptr<MosaicCtx>>(ctx);
        const Tensor& in = c->input;
        const int H = c->H, W = c->W;
        const Tensor& logits = params.value(kCfaResponseParam);
        Tensor gin(in.shape());
        Tensor glogits(logits.shape());

        if (!model_.soft_selection) {
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x) {
                    const double g = cot.at(std::size_t(y), std::size_t(x));
                    const int cls = model_.cell_class[std::size_t((y % 2) * 2 + (x % 2))];
                    for (int ch = 0; ch < 3; ++ch) {
                        const double l = logits.at(std::size_t(cls), std::size_t(ch));
                        gin.at(std::size_t(y), std::size_t(x), std::size_t(ch)) = g * softplus(l);
                        glogits.at(std::size_t(cls), std::size_t(ch)) +=
                            g * in.at(std::size_t(y), std::size_t(x), std::size_t(ch)) * sigmoid(l);
                    }
                }
        } else {
            const Tensor& sel = params.value(kCfaSelectParam);
            Tensor gsel(sel.shape());
            std::vector<double> w(4 * std::size_t(model_.n_classes));
            cell_weights(sel, w);
            const int K = model_.n_classes;
            std::vector<double> dots(static_cast<std::size_t>(K), 0.0);
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x) {
                    const double g = cot.at(std::size_t(y), std::size_t(x));
                    const int cell = (y % 2) * 2 + (x % 2);
                    double wavg = 0.0;
                    for (int cls = 0; cls < K; ++cls) {
                        double dot = 0.0;
                        for (int ch = 0; ch < 3; ++ch)
                            dot += in.at(std::size_t(y), std::size_t(x), std::size_t(ch)) *
                                   softplus(logits.at(std::size_t(cls), std::size_t(ch)));
                        dots[std::size_t(cls)] = dot;
                        wavg += w[std::size_t(cell) * std::size_t(K) + std::size_t(cls)] * dot;
                    }
                    for (int cls = 0; cls < K; ++cls) {
                        const double wc = w[std::size_t(cell) * std::size_t(K) + std::size_t(cls)];
                        for (int ch = 0; ch < 3; ++ch) {
                            const double l = logits.at(std::size_t(cls), std::size_t(ch));
                            gin.at(std::size_t(y), std::size_t(x), std::size_t(ch)) +=
                                g * wc * softplus(l);
                            glogits.at(std::size_t(cls), std::size_t(ch)) +=
                                g * wc * in.at(std::size_t(y), std::size_t(x), std::size_t(ch)) *
                                sigmoid(l);
                        }
                        gsel.at(std::size_t(cell), std::size_t(cls)) +=
                            (g / model_.tau_pi) * wc * (dots[std::size_t(cls)] - wavg);
                    }
                }
            if (param_grads && param_grads->has(kCfaSelectParam))
                param_grads->value(kCfaSelectParam).add_scaled(gsel, 1.0);
        }
        if (param_grads && param_grads->has(kCfaResponseParam))
            param_grads->value(kCfaResponseParam).add_scaled(glogits, 1.0);
        return gin;
    }

private:
    void cell_weights(const Tensor& sel, std::vector<double>& w) const {
        const int K = model_.n_classes;
        for (int cell = 0; cell < 4; ++cell) {
            double mx = -1e300;
            for (int cls = 0; cls < K; ++cls)
                mx = std::max(mx, sel.at(std::size_t(cell), std::size_t(cls)) / model_.tau_pi);
            double sum = 0.0;
            for (int cls = 0; cls < K; ++cls) {
                const double e =
                    std::exp(sel.at(std::size_t(cell), std::size_t(cls)) / model_.tau_pi - mx);
                w[std::size_t(cell) * std::size_t(K) + std::size_t(cls)] = e;
                sum += e;
            }
            for (int cls = 0; cls < K; ++cls)
                w[std::size_t(cell) * std::size_t(K) + std::size_t(cls)] /= sum;
        }
    }

    CfaModel model_;
    bool allow_odd_crop_;
};

// ---- Poisson-Gaussian noise ----------------------------------------------------

struct NoiseParams {
    double sigma_s = 0.015;
    double sigma_r = 0.002;

    void validate() const {
        if (sigma_s < 0.0 || sigma_r < 0.0)
            throw ConfigError("noise: sigmas must be nonnegative");
    }
};

inline constexpr double kNoiseFloor = 1e-8;

// R' = R + sigma_s * sqrt(max(R, floor)) * e1 + sigma_r * e2, reparameterized
// so the draw is a pure function of (key, pixel index).
inline Tensor add_noise(const Tensor& raw, const NoiseParams& np, const RngKey& key) {
    np.validate();
    Tensor out = raw;
    if (np.sigma_s == 0.0 && np.sigma_r == 0.0) return out;
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double e1 = key.gauss(2 * i);
        const double e2 = key.gauss(2 * i + 1);
        const double rc = std::max(raw[i], kNoiseFloor);
        out[i] = raw[i] + np.sigma_s * std::sqrt(rc) * e1 + np.sigma_r * e2;
    }
    return out;
}

class NoiseStage final : public Stage {
public:
    NoiseStage(NoiseParams np, RngKey key) : np_(np), key_(key) { np_.validate(); }

    std::string name() const override { return "sensor.noise"; }
    bool stochastic() const override { return true; }
    void set_key(RngKey key) { key_ = key; }

    Tensor forward(const Tensor& in, const ParamSet&, std::any& ctx) const override {
        ctx = in;
        return add_noise(in, np_, key_);
    }

    Tensor backward(const std::any& ctx, const Tensor& cot, const ParamSet&,
                    ParamSet*) const override {
        const Tensor& in = std::any_cast<const Tensor&>(ctx);
        Tensor gin = cot;
        if (np_.sigma_s == 0.0) return gin;
        for (std::size_t i = 0; i < gin.size(); ++i) {
            const double e1 = key_.gauss(2 * i);
            if (in[i] > kNoiseFloor)
                gin[i] = cot[i] * (1.0 + np_.sigma_s * e1 * 0.5 / std::sqrt(in[i]));
        }
        return gin;
    }

    // Sensitivities of the noisy frame to the sigma parameters (epsilon held
    // fixed); exposed for verification, the sigmas are run-config constants.
    void sigma_grads(const Tensor& in, const Tensor& cot, double& d_sigma_s,
                     double& d_sigma_r) const {
        d_sigma_s = 0.0;
        d_sigma_r = 0.0;
        for (std::size_t i = 0; i < in.size(); ++i) {
            const double e1 = key_.gauss(2 * i);
            const double e2 = key_.gauss(2 * i + 1);
            d_sigma_s += cot[i] * std::sqrt(std::max(in[i], kNoiseFloor)) * e1;
            d_sigma_r += cot[i] * e2;
        }
    }

private:
    NoiseParams np_;
    RngKey key_;
};

// ---- quantization with straight-through gradients -------------------------------

struct QuantConfig {
    int bits = 10;

    void validate() const {
        if (bits < 1 || bits > 16) throw ConfigError("quant: bits must lie in [1, 16]");
    }
};

// Rtilde = floor(2^b * R / max(R)) / 2^b. The frame max is a stop-gradient;
// backward is the exact identity.
inline Tensor quantize(const Tensor& raw, const QuantConfig& q) {
    q.validate();
    const double m = raw.max();
    if (!(m > 0.0)) throw NumericError("quantize: all-zero (or non-positive) frame");
    const double levels = double(1 << q.bits);
    Tensor out = raw;
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = std::floor(levels * raw[i] / m) / levels;
    return out;
}

class QuantizeStage final : public Stage {
public:
    explicit QuantizeStage(QuantConfig q) : q_(q) { q_.validate(); }

    std::string name() const override { return "sensor.quantize"; }
    bool straight_through() const override { return true; }

    Tensor forward(const Tensor& in, const ParamSet&, std::any&) const override {
        return quantize(in, q_);
    }

    Tensor backward(const std::any&, const Tensor& cot, const ParamSet&,
                    ParamSet*) const override {
        return cot;
    }

private:
    QuantConfig q_;
};

}  // namespace rawpipe
