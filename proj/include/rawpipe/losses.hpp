#pragma once

#include <algorithm>
#include <any>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "rawpipe/labels.hpp"
#include "rawpipe/stage.hpp"
#include "rawpipe/tensor.hpp"

namespace rawpipe {

inline constexpr double kProbFloor = 1e-12;

struct OhemConfig {
    double hard_fraction = 0.25;
    int min_kept = 1024;

    void validate() const {
        if (!(hard_fraction > 0.0 && hard_fraction <= 1.0))
            throw ConfigError("ohem: hard_fraction must lie in (0, 1]");
        if (min_kept < 1) throw ConfigError("ohem: min_kept must be >= 1");
    }
};

struct SmoothnessConfig {
    double tau_w = 0.1;

    void validate() const {
        if (!(tau_w > 0.0)) throw ConfigError("smoothness: tau_w must be > 0");
    }
};

struct LossWeights {
    double w_ohem = 0.6;
    double w_lovasz = 0.4;
    double lambda_smooth = 0.1;
    bool adaptive = false;

    void validate() const {
        if (w_ohem < 0.0 || w_lovasz < 0.0 || lambda_smooth < 0.0)
            throw ConfigError("loss weights must be nonnegative");
    }
};

struct LossResult {
    double value = 0.0;
    Tensor dprobs;
};

namespace detail {
inline void check_probs_labels(const Tensor& probs, const LabelMap& labels) {
    if (probs.rank() != 3) throw ShapeError("loss: probs must be (H, W, C)");
    if (int(probs.dim(0)) != labels.h || int(probs.dim(1)) != labels.w)
        throw ShapeError("loss: probs and labels shapes disagree");
}
}  // namespace detail

// Cross entropy averaged over the |H| hardest pixels; |H| =
// max(min_kept, ceil(hard_fraction * valid)), capped at the valid count.
// Ties in the hardness ranking break by raster order.
inline LossResult ohem_ce(const Tensor& probs, const LabelMap& labels, const OhemConfig& cfg) {
    cfg.validate();
    detail::check_probs_labels(probs, labels);
    const int H = labels.h, W = labels.w, C = int(probs.dim(2));

    std::vector<std::size_t> valid;
    std::vector<double> ce;
    valid.reserve(labels.size());
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            const int lbl = labels.at(y, x);
            if (lbl == kIgnoreLabel) continue;
            if (lbl < 0 || lbl >= C) throw ConfigError("ohem: label out of range");
            const std::size_t idx = std::size_t(y) * std::size_t(W) + std::size_t(x);
            valid.push_back(idx);
            ce.push_back(-std::log(std::max(probs[idx * std::size_t(C) + std::size_t(lbl)], kProbFloor)));
        }
    if (valid.empty()) throw ConfigError("ohem: all pixels are ignore-labelled");

    const std::size_t n_valid = valid.size();
    std::size_t keep = std::max<std::size_t>(std::size_t(cfg.min_kept),
                                             std::size_t(std::ceil(cfg.hard_fraction * double(n_valid))));
    keep = std::min(keep, n_valid);

    std::vector<std::size_t> order(n_valid);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&ce, &valid](std::size_t a, std::size_t b) {
        if (ce[a] != ce[b]) return ce[a] > ce[b];
        return valid[a] < valid[b];
    });

    LossResult out;
    out.dprobs = Tensor(probs.shape());
    double sum = 0.0;
    for (std::size_t k = 0; k < keep; ++k) {
        const std::size_t vi = order[k];
        sum += ce[vi];
        const std::size_t pix = valid[vi];
        const int lbl = labels.v[pix];
        const double p = probs[pix * std::size_t(C) + std::size_t(lbl)];
        if (p > kProbFloor)
            out.dprobs[pix * std::size_t(C) + std::size_t(lbl)] = -1.0 / (p * double(keep));
    }
    out.value = sum / double(keep);
    return out;
}

namespace detail {
// Gradient of the Jaccard-loss Lovasz extension for one class, given the
// ground-truth indicator sorted by decreasing error.
inline std::vector<double> lovasz_grad(const std::vector<char>& gt_sorted) {
    const std::size_t n = gt_sorted.size();
    double gt_sum = 0.0;
    for (char g : gt_sorted) gt_sum += g;
    std::vector<double> jaccard(n);
    double cum_gt = 0.0, cum_not = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        cum_gt += gt_sorted[i];
        cum_not += 1.0 - gt_sorted[i];
        const double inter = gt_sum - cum_gt;
        const double uni = gt_sum + cum_not;
        jaccard[i] = 1.0 - inter / uni;
    }
    for (std::size_t i = n; i-- > 1;) jaccard[i] -= jaccard[i - 1];
    return jaccard;
}
}  // namespace detail

// Lovasz-softmax: per class present in the labels, hinge errors sorted
// descending and dotted with the Jaccard-extension gradient; averaged over
// present classes. Ignore pixels take no part.
inline LossResult lovasz_softmax(const Tensor& probs, const LabelMap& labels) {
    detail::check_probs_labels(probs, labels);
    const int W = labels.w, C = int(probs.dim(2));
    (void)W;

    std::vector<std::size_t> valid;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const int lbl = labels.v[i];
        if (lbl == kIgnoreLabel) continue;
        if (lbl < 0 || lbl >= C) throw ConfigError("lovasz: label out of range");
        valid.push_back(i);
    }

    LossResult out;
    out.dprobs = Tensor(probs.shape());
    if (valid.empty()) return out;

    std::vector<char> present(std::size_t(C), 0);
    for (std::size_t i : valid) present[std::size_t(labels.v[i])] = 1;
    const int n_present = int(std::count(present.begin(), present.end(), char(1)));

    std::vector<double> errors(valid.size());
    std::vector<std::size_t> order(valid.size());
    std::vector<char> gt_sorted(valid.size());
    for (int c = 0; c < C; ++c) {
        if (!present[std::size_t(c)]) continue;
        for (std::size_t k = 0; k < valid.size(); ++k) {
            const std::size_t pix = valid[k];
            const double pc = probs[pix * std::size_t(C) + std::size_t(c)];
            errors[k] = (labels.v[pix] == c) ? 1.0 - pc : pc;
        }
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            if (errors[a] != errors[b]) return errors[a] > errors[b];
            return valid[a] < valid[b];
        });
        for (std::size_t k = 0; k < order.size(); ++k)
            gt_sorted[k] = char(labels.v[valid[order[k]]] == c);
        const std::vector<double> grad = detail::lovasz_grad(gt_sorted);
        double loss_c = 0.0;
        for (std::size_t k = 0; k < order.size(); ++k) {
            loss_c += errors[order[k]] * grad[k];
            const std::size_t pix = valid[order[k]];
            const double sign = gt_sorted[k] ? -1.0 : 1.0;
            out.dprobs[pix * std::size_t(C) + std::size_t(c)] +=
                sign * grad[k] / double(n_present);
        }
        out.value += loss_c;
    }
    out.value /= double(n_present);
    return out;
}

// Edge-aware pairwise smoothness over 4-neighbor pairs:
// mean of w_pq * ||P(p) - P(q)||_1 with w_pq = exp(-|gbar p - gbar q| / tau).
// The guide image is a constant for gradient purposes.
inline LossResult smoothness(const Tensor& probs, const Tensor& guide,
                             const SmoothnessConfig& cfg) {
    cfg.validate();
    if (probs.rank() != 3 || guide.rank() != 3 || guide.dim(2) != 3)
        throw ShapeError("smoothness: probs must be (H, W, C), guide (H, W, 3)");
    if (probs.dim(0) != guide.dim(0) || probs.dim(1) != guide.dim(1))
        throw ShapeError("smoothness: probs and guide shapes disagree");
    const int H = int(probs.dim(0)), W = int(probs.dim(1)), C = int(probs.dim(2));

    Tensor gray({std::size_t(H), std::size_t(W)});
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            gray.at(std::size_t(y), std::size_t(x)) =
                (guide.at(std::size_t(y), std::size_t(x), 0) + guide.at(std::size_t(y), std::size_t(x), 1) +
                 guide.at(std::size_t(y), std::size_t(x), 2)) /
                3.0;

    const std::size_t n_pairs = std::size_t(H) * std::size_t(W - 1) + std::size_t(H - 1) * std::size_t(W);
    LossResult out;
    out.dprobs = Tensor(probs.shape());
    if (n_pairs == 0) return out;

    auto add_pair = [&](int y0, int x0, int y1, int x1) {
        const double w =
            std::exp(-std::fabs(gray.at(std::size_t(y0), std::size_t(x0)) -
                                gray.at(std::size_t(y1), std::size_t(x1))) /
                     cfg.tau_w);
        for (int c = 0; c < C; ++c) {
            const double a = probs.at(std::size_t(y0), std::size_t(x0), std::size_t(c));
            const double b = probs.at(std::size_t(y1), std::size_t(x1), std::size_t(c));
            out.value += w * std::fabs(a - b);
            const double s = (a > b) ? 1.0 : (a < b ? -1.0 : 0.0);
            out.dprobs.at(std::size_t(y0), std::size_t(x0), std::size_t(c)) += w * s / double(n_pairs);
            out.dprobs.at(std::size_t(y1), std::size_t(x1), std::size_t(c)) -= w * s / double(n_pairs);
        }
    };
    for (int y = 0; y < H; ++y)
        for (int x = 0; x + 1 < W; ++x) add_pair(y, x, y, x + 1);
    for (int y = 0; y + 1 < H; ++y)
        for (int x = 0; x < W; ++x) add_pair(y, x, y + 1, x);
    out.value /= double(n_pairs);
    return out;
}

// Weighted total objective. With the adaptive flag the caller feeds
// epoch progress in [0, 1]; the OHEM hard fraction ramps 1.0 -> base and
// lambda_smooth ramps 0 -> max linearly over the first half of training.
inline double adaptive_hard_fraction(double base_fraction, double progress) {
    const double t = std::clamp(progress / 0.5, 0.0, 1.0);
    return 1.0 + t * (base_fraction - 1.0);
}

inline double adaptive_lambda(double lambda_max, double progress) {
    const double t = std::clamp(progress / 0.5, 0.0, 1.0);
    return t * lambda_max;
}

inline double total_loss(double l_ohem, double l_lovasz, double l_smooth, const LossWeights& w,
                         double epoch_progress = 0.0) {
    w.validate();
    if (epoch_progress < 0.0 || epoch_progress > 1.0)
        throw ConfigError("total_loss: progress must lie in [0, 1]");
    const double lambda =
        w.adaptive ? adaptive_lambda(w.lambda_smooth, epoch_progress) : w.lambda_smooth;
    return w.w_ohem * l_ohem + w.w_lovasz * l_lovasz + lambda * l_smooth;
}

// ---- stage adapters (probs in, scalar out) -------------------------------------

class OhemStage final : public Stage {
public:
    OhemStage(LabelMap labels, OhemConfig cfg) : labels_(std::move(labels)), cfg_(cfg) {}
    std::string name() const override { return "loss.ohem"; }
    Tensor forward(const Tensor& in, const ParamSet&, std::any& ctx) const override {
        auto r = std::make_shared<LossResult>(ohem_ce(in, labels_, cfg_));
        ctx = r;
        return Tensor::scalar(r->value);
    }
    Tensor backward(const std::any& ctx, const Tensor& cot, const ParamSet&,
                    ParamSet*) const override {
        auto r = std::any_cast<std::shared_ptr<LossResult>>(ctx);
        Tensor g = r->dprobs;
        g.scale(cot.item());
        return g;
    }

private:
    LabelMap labels_;
    OhemConfig cfg_;
};

class LovaszStage final : public Stage {
public:
    explicit LovaszStage(LabelMap labels) : labels_(std::move(labels)) {}
    std::string name() const override { return "loss.lovasz"; }
    Tensor forward(const Tensor& in, const ParamSet&, std::any& ctx) const override {
        auto r = std::make_shared<LossResult>(lovasz_softmax(in, labels_));
        ctx = r;
        return Tensor::scalar(r->value);
    }
    Tensor backward(const std::any& ctx, const Tensor& cot, const ParamSet&,
                    ParamSet*) const override {
        auto r = std::any_cast<std::shared_ptr<LossResult>>(ctx);
        Tensor g = r->dprobs;
        g.scale(cot.item());
        return g;
    }

private:
    LabelMap labels_;
};

class SmoothnessStage final : public Stage {
public:
    SmoothnessStage(Tensor guide, SmoothnessConfig cfg)
        : guide_(std::move(guide)), cfg_(cfg) {}
    std::string name() const override { return "loss.smooth"; }
    Tensor forward(const Tensor& in, const ParamSet&, std::any& ctx) const override {
        auto r = std::make_shared<LossResult>(smoothness(in, guide_, cfg_));
        ctx = r;
        return Tensor::scalar(r->value);
    }
    Tensor backward(const std::any& ctx, const Tensor& cot, const ParamSet&,
                    ParamSet*) const override {
        auto r = std::any_cast<std::shared_ptr<LossResult>>(ctx);
        Tensor g = r->dprobs;
        g.scale(cot.item());
        return g;
    }

private:
    Tensor guide_;
    SmoothnessConfig cfg_;
};

}  // namespace rawpipe
