#pragma once

#include <any>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "rawpipe/paramset.hpp"
#include "rawpipe/tensor.hpp"

namespace rawpipe {

struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// One differentiable block of the pipeline. forward() may stash whatever it
// needs for the adjoint in `ctx`; backward() maps the upstream cotangent to
// an input cotangent and accumulates parameter cotangents into param_grads
// (which mirrors the ParamSet the stage reads from).
class Stage {
public:
    virtual ~Stage() = default;

    virtual std::string name() const = 0;

    virtual Tensor forward(const Tensor& input, const ParamSet& params, std::any& ctx) const = 0;

    virtual Tensor backward(const std::any& ctx, const Tensor& cotangent, const ParamSet& params,
                            ParamSet* param_grads) const = 0;

    // Parameters this stage reads, if any.
    virtual std::vector<std::string> param_names() const { return {}; }

    // True for stages that draw random numbers (must be replayable by key).
    virtual bool stochastic() const { return false; }

    // True for stages whose backward is a straight-through identity rather
    // than the derivative of the forward map.
    virtual bool straight_through() const { return false; }
};

struct TapeEntry {
    const Stage* stage = nullptr;
    std::any ctx;
    std::vector<std::size_t> out_shape;
};

struct ForwardBackwardResult {
    Tensor output;
    Tensor input_grad;
    ParamSet param_grads;
};

// Runs a chain of stages forward, recording a tape, then pulls the cotangent
// back through every adjoint. Frozen/untrainable parameters still receive
// their slot in param_grads but the optimizer ignores them; forward_backward
// zeroes them so the freeze contract is visible to callers too.
class Chain {
public:
    void append(std::shared_ptr<Stage> s) { stages_.push_back(std::move(s)); }
    const std::vector<std::shared_ptr<Stage>>& stages() const { return stages_; }
    std::size_t size() const { return stages_.size(); }

    Tensor forward(const Tensor& input, const ParamSet& params,
                   std::vector<TapeEntry>* tape = nullptr,
                   std::vector<Tensor>* stage_outputs = nullptr) const {
        Tensor x = input;
        std::string prev = "<input>";
        for (const auto& s : stages_) {
            TapeEntry e;
            e.stage = s.get();
            try {
                x = s->forward(x, params, e.ctx);
            } catch (const ShapeError& err) {
                throw ShapeError("composition error between '" + prev + "' and '" + s->name() +
                                 "': " + err.what());
            }
            if (!x.all_finite())
                throw NumericError("numeric failure: stage '" + s->name() +
                                   "' produced a non-finite output");
            e.out_shape = x.shape();
            if (tape) tape->push_back(std::move(e));
            if (stage_outputs) stage_outputs->push_back(x);
            prev = s->name();
        }
        return x;
    }

    // Pulls a cotangent through a recorded tape, accumulating parameter
    // cotangents; frozen/untrainable slots read back as zeros.
    Tensor backward(const std::vector<TapeEntry>& tape, const Tensor& cotangent,
                    const ParamSet& params, ParamSet& param_grads) const {
        Tensor cot = cotangent;
        for (auto it = tape.rbegin(); it != tape.rend(); ++it)
            cot = it->stage->backward(it->ctx, cot, params, &param_grads);
        for (const auto& n : param_grads.names()) {
            Param& g = param_grads.at(n);
            if (g.frozen || !g.trainable) g.value.fill(0.0);
        }
        return cot;
    }

    ForwardBackwardResult forward_backward(const Tensor& input, const ParamSet& params,
                                           const Tensor& output_cotangent) const {
        std::vector<TapeEntry> tape;
        ForwardBackwardResult r{forward(input, params, &tape), Tensor(), params.zeros_like()};
        if (!r.output.same_shape(output_cotangent))
            throw ShapeError("forward_backward: cotangent shape " +
                             Tensor::shape_str(output_cotangent.shape()) +
                             " does not match output shape " +
                             Tensor::shape_str(r.output.shape()));
        r.input_grad = backward(tape, output_cotangent, params, r.param_grads);
        return r;
    }

private:
    std::vector<std::shared_ptr<Stage>> stages_;
};

// ---- small generic stages -------------------------------------------------

class IdentityStage final : public Stage {
public:
    std::string name() const override { return "identity"; }
    Tensor forward(const Tensor& in, const ParamSet&, std::any&) const override { return in; }
    Tensor backward(const std::any&, const Tensor& cot, const ParamSet&,
                    ParamSet*) const override {
        return cot;
    }
};

// Elementwise square; used by the substrate tests.
class SquareStage final : public Stage {
public:
    std::string name() const override { return "square"; }
    Tensor forward(const Tensor& in, const ParamSet&, std::any& ctx) const override {
        ctx = in;
        Tensor out = in;
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[i] * in[i];
        return out;
    }
    Tensor backward(const std::any& ctx, const Tensor& cot, const ParamSet&,
                    ParamSet*) const override {
        const Tensor& in = std::any_cast<const Tensor&>(ctx);
        Tensor g = cot;
        for (std::size_t i = 0; i < g.size(); ++i) g[i] *= 2.0 * in[i];
        return g;
    }
};

}  // namespace rawpipe
