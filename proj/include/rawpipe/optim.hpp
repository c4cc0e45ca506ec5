#pragma once

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>

#include "rawpipe/paramset.hpp"

namespace rawpipe {

struct AdamWConfig {
    double lr = 2e-3;
    double weight_decay = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Cosine annealing from lr_max down to 0 over total_steps.
inline double cosine_lr(std::size_t step, std::size_t total_steps, double lr_max) {
    if (total_steps == 0) throw std::invalid_argument("cosine_lr: total_steps must be > 0");
    if (step > total_steps) throw std::invalid_argument("cosine_lr: step beyond total_steps");
    if (step == total_steps) return 0.0;
    return lr_max * 0.5 * (1.0 + std::cos(M_PI * double(step) / double(total_steps)));
}

// Decoupled-weight-decay Adam over a ParamSet. Moments live here, keyed by
// parameter name; frozen and untrainable parameters are skipped entirely so
// their moments stay at zero until the group is unfrozen.
class AdamW {
public:
    explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

    const AdamWConfig& config() const { return cfg_; }
    std::size_t step_count() const { return step_; }

    // `group_update_scale` throttles whole parameter groups: the computed
    // update (gradient term + weight decay) is multiplied by the group's
    // factor, so the applied step is exactly linear in it.
    void step(ParamSet& params, const ParamSet& grads, double lr,
              const std::map<std::string, double>* group_update_scale = nullptr) {
        if (lr < 0.0) throw std::invalid_argument("AdamW::step: negative lr");
        ++step_;
        for (const auto& name : params.names()) {
            Param& p = params.at(name);
            if (!p.trainable || p.frozen) continue;
            if (!grads.has(name))
                throw std::invalid_argument("AdamW::step: missing gradient for '" + name + "'");
            const Tensor& g = grads.at(name).value;
            if (!g.same_shape(p.value))
                throw ShapeErrorFor(name);
            if (!g.all_finite())
                throw std::runtime_error("AdamW::step: non-finite gradient for '" + name + "'");
            Tensor& m = moment(m1_, name, p.value);
            Tensor& v = moment(m2_, name, p.value);
            // Bias correction runs on the parameter's own update count, so a
            // group unfrozen mid-training starts from a proper first step.
            const std::size_t t = ++steps_[name];
            const double bc1 = 1.0 - std::pow(cfg_.beta1, double(t));
            const double bc2 = 1.0 - std::pow(cfg_.beta2, double(t));
            double scale = 1.0;
            if (group_update_scale) {
                auto it = group_update_scale->find(p.group);
                if (it != group_update_scale->end()) scale = it->second;
            }
            for (std::size_t i = 0; i < g.size(); ++i) {
                m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
                v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
                const double mhat = m[i] / bc1;
                const double vhat = v[i] / bc2;
                const double update =
                    lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * p.value[i]);
                p.value[i] -= scale * update;
            }
        }
    }

    bool has_moments(const std::string& name) const { return m1_.count(name) != 0; }
    const Tensor& m1(const std::string& name) const { return m1_.at(name); }
    const Tensor& m2(const std::string& name) const { return m2_.at(name); }

    // Checkpoint access.
    std::map<std::string, Tensor>& m1_state() { return m1_; }
    std::map<std::string, Tensor>& m2_state() { return m2_; }
    std::map<std::string, std::size_t>& per_param_steps() { return steps_; }
    void set_step_count(std::size_t s) { step_ = s; }

private:
    static std::invalid_argument ShapeErrorFor(const std::string& name) {
        return std::invalid_argument("AdamW::step: gradient shape mismatch for '" + name + "'");
    }

    Tensor& moment(std::map<std::string, Tensor>& m, const std::string& name, const Tensor& like) {
        auto it = m.find(name);
        if (it == m.end()) it = m.emplace(name, Tensor(like.shape())).first;
        return it->second;
    }

    AdamWConfig cfg_;
    std::size_t step_ = 0;
    std::map<std::string, Tensor> m1_, m2_;
    std::map<std::string, std::size_t> steps_;
};

}  // namespace rawpipe
