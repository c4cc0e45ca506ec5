#pragma once

#include <algorithm>
#include <any>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "rawpipe/rng.hpp"
#include "rawpipe/stage.hpp"

namespace rawpipe {

struct GradCheckEntry {
    std::string what;  // "input" or a parameter name
    double max_rel_err = 0.0;
    bool pass = true;
};

struct GradCheckReport {
    std::string stage;
    bool pass = true;
    double worst = 0.0;
    std::vector<GradCheckEntry> entries;
};

namespace detail {
// The 1e-4 denominator floor absorbs central-difference cancellation noise
// (~|s| * eps / h ~ 1e-10) on exactly-zero gradients such as the piston
// coefficient, while still flagging absolute errors above ~1e-8 at tol 1e-4.
inline double rel_err(double a, double b) {
    const double denom = std::max({std::fabs(a), std::fabs(b), 1e-4});
    return std::fabs(a - b) / denom;
}
}  // namespace detail

// Compares the stage's analytic vector-Jacobian product against central
// finite differences of the scalar projection s = <v, forward(x, params)>.
// Stages flagged straight_through() are exempt from the finite-difference
// comparison; for those the backward must be the exact identity.
inline GradCheckReport gradcheck(const Stage& stage, const Tensor& input, const ParamSet& params,
                                 double h = 1e-5, double tol = 1e-4, std::uint64_t seed = 0) {
    GradCheckReport report;
    report.stage = stage.name();

    ParamSet p = params;  // local copy we can perturb
    std::any ctx;
    Tensor out = stage.forward(input, p, ctx);
    RngKey key = RngKey{}.fold(0xabcdef).fold(seed);
    Tensor v(out.shape());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = key.gauss(i);

    if (stage.straight_through()) {
        Tensor back = stage.backward(ctx, v, p, nullptr);
        GradCheckEntry e;
        e.what = "input (straight-through identity)";
        for (std::size_t i = 0; i < v.size(); ++i)
            e.max_rel_err = std::max(e.max_rel_err, std::fabs(back[i] - v[i]));
        e.pass = e.max_rel_err == 0.0;
        report.entries.push_back(e);
        report.pass = e.pass;
        report.worst = e.max_rel_err;
        return report;
    }

    ParamSet pg = p.zeros_like();
    Tensor gin = stage.backward(ctx, v, p, &pg);

    auto project = [&](const Tensor& x, const ParamSet& ps) {
        std::any c;
        Tensor y = stage.forward(x, ps, c);
        return y.dot(v);
    };

    {
        GradCheckEntry e;
        e.what = "input";
        Tensor x = input;
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double orig = x[i];
            x[i] = orig + h;
            const double sp = project(x, p);
            x[i] = orig - h;
            const double sm = project(x, p);
            x[i] = orig;
            const double fd = (sp - sm) / (2.0 * h);
            e.max_rel_err = std::max(e.max_rel_err, detail::rel_err(gin[i], fd));
        }
        e.pass = e.max_rel_err < tol;
        report.entries.push_back(e);
    }

    for (const auto& name : p.names()) {
        const Param& prm = p.at(name);
        bool used = false;
        for (const auto& pn : stage.param_names())
            if (pn == name) used = true;
        if (!used || !prm.trainable) continue;
        GradCheckEntry e;
        e.what = name;
        Tensor& val = p.value(name);
        const Tensor& ag = pg.value(name);
        for (std::size_t i = 0; i < val.size(); ++i) {
            const double orig = val[i];
            val[i] = orig + h;
            const double sp = project(input, p);
            val[i] = orig - h;
            const double sm = project(input, p);
            val[i] = orig;
            const double fd = (sp - sm) / (2.0 * h);
            e.max_rel_err = std::max(e.max_rel_err, detail::rel_err(ag[i], fd));
        }
        e.pass = e.max_rel_err < tol;
        report.entries.push_back(e);
    }

    for (const auto& e : report.entries) {
        report.pass = report.pass && e.pass;
        report.worst = std::max(report.worst, e.max_rel_err);
    }
    return report;
}

// Registry of gradcheck cases; the CLI's gradcheck command and the coverage
// test both iterate it. Each case builds a stage plus suitable inputs and
// runs the checker for one seed.
struct GradCheckCase {
    std::string stage_name;
    std::function<GradCheckReport(std::uint64_t seed)> run;
};

}  // namespace rawpipe
