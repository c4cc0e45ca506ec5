#pragma once

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "rawpipe/checkpoint.hpp"
#include "rawpipe/data.hpp"
#include "rawpipe/losses.hpp"
#include "rawpipe/metrics.hpp"
#include "rawpipe/optics.hpp"
#include "rawpipe/optim.hpp"
#include "rawpipe/segnet.hpp"
#include "rawpipe/sensor.hpp"
#include "rawpipe/stage.hpp"

namespace rawpipe {

// Channel mean; stands in for the CFA when the mosaic is ablated away.
class MonoStage final : public Stage {
public:
    std::string name() const override { return "sensor.mono"; }
    Tensor forward(const Tensor& in, const ParamSet&, std::any&) const override {
        if (in.rank() != 3 || in.dim(2) != 3)
            throw ShapeError("sensor.mono: expected (H, W, 3) input");
        Tensor out({in.dim(0), in.dim(1)});
        for (std::size_t p = 0; p < out.size(); ++p)
            out[p] = (in[p * 3] + in[p * 3 + 1] + in[p * 3 + 2]) / 3.0;
        return out;
    }
    Tensor backward(const std::any&, const Tensor& cot, const ParamSet&,
                    ParamSet*) const override {
        Tensor gin({cot.dim(0), cot.dim(1), 3});
        for (std::size_t p = 0; p < cot.size(); ++p)
            gin[p * 3] = gin[p * 3 + 1] = gin[p * 3 + 2] = cot[p] / 3.0;
        return gin;
    }
};

struct SensorConfig {
    double exposure_gamma_init = 0.0;
    std::string cfa_layout = "BAYER_RGGB";
    double sigma_s = 0.015;
    double sigma_r = 0.002;
    int bits = 10;
    bool soft_cfa_selection = false;

    void validate() const {
        cfa_layout_from_string(cfa_layout);
        NoiseParams{sigma_s, sigma_r}.validate();
        QuantConfig{bits}.validate();
    }
};

struct AblationSwitches {
    bool optics_on = true;
    bool exposure_on = true;
    bool cfa_learnable = true;  // off: mosaic replaced by the channel mean
    bool noise_on = true;
    bool quant_on = true;
};

struct PipelineConfig {
    LensParams lens = LensParams::identity_lens();
    SensorConfig sensor;
    SegNetConfig net;
    OhemConfig ohem;
    SmoothnessConfig smooth;
    LossWeights weights;
    AblationSwitches ablation;
    int pupil_samples = 64;
    int kernel_size = 21;
    std::vector<std::string> trainable_groups{"optics", "sensor", "network"};

    void validate() const {
        lens.validate();
        sensor.validate();
        net.validate();
        ohem.validate();
        smooth.validate();
        weights.validate();
        for (const auto& g : trainable_groups)
            if (g != "optics" && g != "sensor" && g != "network")
                throw ConfigError("pipeline: unknown trainable group '" + g + "'");
    }
};

// Eq.-1-shaped composition: render -> normalize -> exposure -> mosaic ->
// noise -> quantize -> segnet, with ablation switches that drop stages.
class Pipeline {
public:
    Pipeline(PipelineConfig cfg, std::uint64_t init_seed) : cfg_(std::move(cfg)) {
        cfg_.validate();
        const auto& ab = cfg_.ablation;

        if (ab.optics_on && !cfg_.lens.identity) {
            render_ = std::make_shared<RenderStage>(cfg_.lens, cfg_.pupil_samples, cfg_.kernel_size);
            params_.add(kZernikeParam, cfg_.lens.coeffs, "optics", cfg_.lens.trainable);
        } else if (ab.optics_on) {
            render_ = std::make_shared<RenderStage>(LensParams::identity_lens());
        }
        if (ab.optics_on) normalize_ = std::make_shared<NormalizeStage>();

        if (ab.exposure_on) {
            exposure_ = std::make_shared<ExposureStage>();
            params_.add(kGammaParam, Tensor::scalar(cfg_.sensor.exposure_gamma_init), "sensor");
        }

        if (ab.cfa_learnable) {
            CfaModel cfa = init_cfa(cfg_.sensor.cfa_layout);
            cfa.soft_selection = cfg_.sensor.soft_cfa_selection;
            params_.add(kCfaResponseParam, cfa.response_logits, "sensor");
            if (cfa.soft_selection) params_.add(kCfaSelectParam, cfa.select_logits, "sensor");
            mosaic_ = std::make_shared<MosaicStage>(cfa);
        } else {
            mono_ = std::make_shared<MonoStage>();
        }

        if (ab.noise_on)
            noise_ = std::make_shared<NoiseStage>(NoiseParams{cfg_.sensor.sigma_s, cfg_.sensor.sigma_r},
                                                  RngKey{});
        if (ab.quant_on) quant_ = std::make_shared<QuantizeStage>(QuantConfig{cfg_.sensor.bits});

        net_ = std::make_shared<SegNet>(cfg_.net);
        segnet_stage_ = std::make_shared<SegNetStage>(net_);
        net_->add_params(params_, RngKey{}.fold(0x1417).fold(init_seed));

        for (const char* g : {"optics", "sensor", "network"}) {
            const bool trainable = std::find(cfg_.trainable_groups.begin(),
                                             cfg_.trainable_groups.end(),
                                             g) != cfg_.trainable_groups.end();
            if (!trainable) params_.set_trainable_group(g, false);
        }
    }

    const PipelineConfig& config() const { return cfg_; }
    ParamSet& params() { return params_; }
    const ParamSet& params() const { return params_; }
    const SegNet& net() const { return *net_; }
    MosaicStage* mosaic() { return mosaic_.get(); }

    std::vector<std::string> stage_names(bool with_noise = true) const {
        std::vector<std::string> names;
        for (const auto& s : chain_stages(with_noise, 0)) names.push_back(s->name());
        return names;
    }

    struct ForwardOptions {
        bool with_noise = true;
        RngKey noise_key{};
        int bits_override = 0;  // 0: use the configured bit depth
    };

    struct ForwardOut {
        Tensor probs;   // (H, W, C)
        Tensor guide;   // 3-channel intermediate feeding the mosaic
        std::map<std::string, Tensor> intermediates;  // by stage name
        std::vector<TapeEntry> tape;
        std::vector<std::shared_ptr<Stage>> stages_held;  // keeps tape pointers alive
    };

    ForwardOut forward(const Tensor& x, const ForwardOptions& opt) const {
        if (x.rank() != 3 || x.dim(2) != 3)
            throw ShapeError("pipeline: expected (H, W, 3) radiance input");
        if (noise_) noise_->set_key(opt.noise_key);

        ForwardOut out;
        out.stages_held = chain_stages(opt.with_noise, opt.bits_override);
        Chain chain;
        for (const auto& s : out.stages_held) chain.append(s);

        std::vector<Tensor> stage_outputs;
        out.probs = chain.forward(x, params_, &out.tape, &stage_outputs);

        out.guide = x;
        for (std::size_t i = 0; i < out.stages_held.size(); ++i) {
            const std::string name = out.stages_held[i]->name();
            out.intermediates[name] = stage_outputs[i];
            if (stage_outputs[i].rank() == 3 && stage_outputs[i].dim(2) == 3)
                out.guide = stage_outputs[i];
        }
        return out;
    }

    struct LossBreakdown {
        double ohem = 0.0, lovasz = 0.0, smooth = 0.0, total = 0.0;
    };

    struct GradResult {
        LossBreakdown losses;
        ParamSet grads;
        ForwardOut fwd;
    };

    // Forward, the three losses, and the full backward sweep for one sample.
    // `progress` in [0,1] drives the adaptive schedules when enabled.
    GradResult compute_grads(const Sample& sample, const ForwardOptions& opt,
                             double progress = 0.0) const {
        GradResult r{{}, params_.zeros_like(), forward(sample.image, opt)};

        OhemConfig ohem_cfg = cfg_.ohem;
        if (cfg_.weights.adaptive)
            ohem_cfg.hard_fraction = adaptive_hard_fraction(cfg_.ohem.hard_fraction, progress);
        const double lambda = cfg_.weights.adaptive
                                  ? adaptive_lambda(cfg_.weights.lambda_smooth, progress)
                                  : cfg_.weights.lambda_smooth;

        LossResult lo = ohem_ce(r.fwd.probs, sample.labels, ohem_cfg);
        LossResult ll = lovasz_softmax(r.fwd.probs, sample.labels);
        LossResult ls = smoothness(r.fwd.probs, r.fwd.guide, cfg_.smooth);
        r.losses.ohem = lo.value;
        r.losses.lovasz = ll.value;
        r.losses.smooth = ls.value;
        r.losses.total = cfg_.weights.w_ohem * lo.value + cfg_.weights.w_lovasz * ll.value +
                         lambda * ls.value;

        Tensor dprobs(r.fwd.probs.shape());
        dprobs.add_scaled(lo.dprobs, cfg_.weights.w_ohem);
        dprobs.add_scaled(ll.dprobs, cfg_.weights.w_lovasz);
        dprobs.add_scaled(ls.dprobs, lambda);

        Chain chain;
        for (const auto& s : r.fwd.stages_held) chain.append(s);
        chain.backward(r.fwd.tape, dprobs, params_, r.grads);
        return r;
    }

private:
    std::vector<std::shared_ptr<Stage>> chain_stages(bool with_noise, int bits_override) const {
        std::vector<std::shared_ptr<Stage>> stages;
        if (render_) stages.push_back(render_);
        if (normalize_) stages.push_back(normalize_);
        if (exposure_) stages.push_back(exposure_);
        if (mosaic_)
            stages.push_back(mosaic_);
        else
            stages.push_back(mono_);
        if (noise_ && with_noise) stages.push_back(noise_);
        if (quant_) {
            if (bits_override > 0)
                stages.push_back(std::make_shared<QuantizeStage>(QuantConfig{bits_override}));
            else
                stages.push_back(quant_);
        }
        stages.push_back(segnet_stage_);
        return stages;
    }

    PipelineConfig cfg_;
    ParamSet params_;
    std::shared_ptr<RenderStage> render_;
    std::shared_ptr<NormalizeStage> normalize_;
    std::shared_ptr<ExposureStage> exposure_;
    std::shared_ptr<MosaicStage> mosaic_;
    std::shared_ptr<MonoStage> mono_;
    std::shared_ptr<NoiseStage> noise_;
    std::shared_ptr<QuantizeStage> quant_;
    std::shared_ptr<SegNet> net_;
    std::shared_ptr<SegNetStage> segnet_stage_;
};

// ---- evaluation -------------------------------------------------------------------

inline LabelMap argmax_probs(const Tensor& probs) {
    const int H = int(probs.dim(0)), W = int(probs.dim(1)), C = int(probs.dim(2));
    LabelMap out(H, W);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            int best = 0;
            double bv = probs.at(std::size_t(y), std::size_t(x), 0);
            for (int c = 1; c < C; ++c) {
                const double v = probs.at(std::size_t(y), std::size_t(x), std::size_t(c));
                if (v > bv) {
                    bv = v;
                    best = c;
                }
            }
            out.at(y, x) = best;
        }
    return out;
}

struct EvalOptions {
    bool with_noise = false;  // robustness sweeps enable this with a fixed seed
    std::uint64_t noise_seed = 0;
    int bits_override = 0;
};

struct MetricsReport {
    double mean_iou = 0.0;
    double pixel_accuracy = 0.0;
    std::vector<double> per_class_iou;
    std::vector<bool> class_present;
    ConfusionMatrix cm{1};
};

inline MetricsReport evaluate(const Pipeline& pipe, const std::vector<Sample>& data,
                              const EvalOptions& opt = {}) {
    if (data.empty()) throw ConfigError("evaluate: empty dataset");
    const int C = pipe.config().net.num_classes;
    ConfusionMatrix cm(C);
    for (std::size_t i = 0; i < data.size(); ++i) {
        Pipeline::ForwardOptions fo;
        fo.with_noise = opt.with_noise;
        fo.noise_key = RngKey{}.fold(0xe7a1).fold(opt.noise_seed).fold(i);
        fo.bits_override = opt.bits_override;
        auto out = pipe.forward(data[i].image, fo);
        accumulate(cm, argmax_probs(out.probs), data[i].labels);
    }
    MetricsReport rep;
    const MiouResult mi = miou(cm);
    rep.mean_iou = mi.mean_iou;
    rep.pixel_accuracy = pixel_acc(cm);
    rep.per_class_iou = mi.per_class;
    rep.class_present = mi.class_present;
    rep.cm = cm;
    return rep;
}

// ---- two-phase training -------------------------------------------------------------

struct TrainSchedule {
    int epochs = 10;
    int warmup_epochs = -1;  // -1: ceil(0.2 * epochs)
    int batch_size = 2;
    std::uint64_t seed = 0;
    double throttle = 0.1;
    double tau_start = 1.0;
    double tau_end = 0.05;
    double lr_max = 2e-3;
    double weight_decay = 1e-4;

    int resolved_warmup() const {
        if (warmup_epochs >= 0) return warmup_epochs;
        return int(std::ceil(0.2 * double(epochs)));
    }

    void validate() const {
        if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
        if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
        const int t1 = resolved_warmup();
        if (t1 < 0 || t1 >= epochs)
            throw ConfigError("train: warmup_epochs must satisfy 0 <= T1 < T");
        if (throttle < 0.0) throw ConfigError("train: throttle must be >= 0");
        if (!(tau_start > 0.0) || !(tau_end > 0.0))
            throw ConfigError("train: tau bounds must be > 0");
        if (!(lr_max > 0.0)) throw ConfigError("train: lr_max must be > 0");
    }
};

struct EpochMetrics {
    int epoch = 0;
    double l_ohem = 0.0, l_lovasz = 0.0, l_smooth = 0.0, l_total = 0.0;
    double lr = 0.0, tau_pi = 0.0;
    double val_miou = 0.0, val_pixel_acc = 0.0;
};

struct TrainResult {
    std::vector<EpochMetrics> log;
    bool aborted = false;
    std::string abort_reason;
    std::filesystem::path last_checkpoint;
};

inline void write_metrics_csv(const std::filesystem::path& path,
                              const std::vector<EpochMetrics>& log) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("write_metrics_csv: cannot open " + path.string());
    f << "epoch,l_ohem,l_lovasz,l_smooth,l_total,lr,tau_pi,val_miou,val_pixel_acc\n";
    f << std::setprecision(17);
    for (const auto& m : log)
        f << m.epoch << "," << m.l_ohem << "," << m.l_lovasz << "," << m.l_smooth << ","
          << m.l_total << "," << m.lr << "," << m.tau_pi << "," << m.val_miou << ","
          << m.val_pixel_acc << "\n";
}

// Alg.-1-style loop: warm-up with the optics group frozen, then joint
// optimization with throttled optics updates and tau_pi annealing. Writes a
// checkpoint per epoch; a non-finite loss aborts with the last good
// checkpoint retained.
inline TrainResult train(Pipeline& pipe, const std::vector<Sample>& train_set,
                         const std::vector<Sample>& val_set, const TrainSchedule& sched,
                         const std::filesystem::path& out_dir) {
    sched.validate();
    if (train_set.empty()) throw ConfigError("train: empty dataset");
    namespace fs = std::filesystem;
    fs::create_directories(out_dir / "checkpoints");

    const int T = sched.epochs;
    const int T1 = sched.resolved_warmup();
    const std::size_t n = train_set.size();
    const std::size_t steps_per_epoch = (n + std::size_t(sched.batch_size) - 1) / std::size_t(sched.batch_size);
    const std::size_t total_steps = steps_per_epoch * std::size_t(T);

    AdamWConfig ocfg;
    ocfg.lr = sched.lr_max;
    ocfg.weight_decay = sched.weight_decay;
    AdamW opt(ocfg);

    ParamSet& params = pipe.params();
    params.set_frozen_group("optics", T1 > 0);

    auto ckpt_path = [&out_dir](int epoch) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "epoch_%04d", epoch);
        return out_dir / "checkpoints" / buf;
    };

    TrainResult result;
    checkpoint::save(ckpt_path(0), params, &opt, 0);
    result.last_checkpoint = ckpt_path(0);

    const std::vector<Sample>& eval_set = val_set.empty() ? train_set : val_set;
    std::size_t gstep = 0;

    for (int epoch = 1; epoch <= T; ++epoch) {
        if (epoch > T1) params.set_frozen_group("optics", false);

        const double tau =
            (epoch <= T1 || T == T1)
                ? sched.tau_start
                : sched.tau_start *
                      std::pow(sched.tau_end / sched.tau_start,
                               double(epoch - T1) / double(T - T1));
        if (pipe.mosaic()) pipe.mosaic()->set_tau_pi(tau);

        // deterministic per-epoch shuffle
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), 0);
        RngKey ek = RngKey{}.fold(0xef0c).fold(sched.seed).fold(std::uint64_t(epoch));
        for (std::size_t i = n; i > 1; --i)
            std::swap(order[i - 1], order[ek.uniform_index(i, i)]);

        EpochMetrics em;
        em.epoch = epoch;
        em.tau_pi = tau;
        double lr_now = 0.0;
        std::size_t batches = 0;

        try {
            for (std::size_t s = 0; s < steps_per_epoch; ++s, ++gstep) {
                lr_now = cosine_lr(gstep, total_steps, sched.lr_max);
                const double progress = double(gstep) / double(total_steps);
                ParamSet grads = params.zeros_like();
                Pipeline::LossBreakdown acc;
                std::size_t batch_n = 0;
                for (int b = 0; b < sched.batch_size; ++b) {
                    const std::size_t idx = s * std::size_t(sched.batch_size) + std::size_t(b);
                    if (idx >= n) break;
                    const Sample& sample = train_set[order[idx]];
                    Pipeline::ForwardOptions fo;
                    fo.with_noise = true;
                    fo.noise_key = RngKey{}.fold(0x0153).fold(sched.seed).fold(gstep).fold(std::uint64_t(b));
                    auto r = pipe.compute_grads(sample, fo, progress);
                    if (!std::isfinite(r.losses.total))
                        throw NumericError("train: non-finite loss at step " + std::to_string(gstep));
                    grads.accumulate(r.grads, 1.0);
                    acc.ohem += r.losses.ohem;
                    acc.lovasz += r.losses.lovasz;
                    acc.smooth += r.losses.smooth;
                    acc.total += r.losses.total;
                    ++batch_n;
                }
                for (const auto& name : grads.names())
                    grads.value(name).scale(1.0 / double(batch_n));

                std::map<std::string, double> scales;
                if (epoch > T1) scales["optics"] = sched.throttle;
                opt.step(params, grads, lr_now, &scales);

                em.l_ohem += acc.ohem / double(batch_n);
                em.l_lovasz += acc.lovasz / double(batch_n);
                em.l_smooth += acc.smooth / double(batch_n);
                em.l_total += acc.total / double(batch_n);
                ++batches;
            }
        } catch (const NumericError& e) {
            result.aborted = true;
            result.abort_reason = e.what();
            write_metrics_csv(out_dir / "metrics.csv", result.log);
            return result;
        }

        em.l_ohem /= double(batches);
        em.l_lovasz /= double(batches);
        em.l_smooth /= double(batches);
        em.l_total /= double(batches);
        em.lr = lr_now;

        MetricsReport rep = evaluate(pipe, eval_set);
        em.val_miou = rep.mean_iou;
        em.val_pixel_acc = rep.pixel_accuracy;
        result.log.push_back(em);

        checkpoint::save(ckpt_path(epoch), params, &opt, gstep);
        result.last_checkpoint = ckpt_path(epoch);
    }
    write_metrics_csv(out_dir / "metrics.csv", result.log);
    return result;
}

}  // namespace rawpipe
