#pragma once

#include <any>
#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "rawpipe/paramset.hpp"
#include "rawpipe/rng.hpp"
#include "rawpipe/stage.hpp"
#include "rawpipe/tensor.hpp"

namespace rawpipe {

struct SegNetConfig {
    int in_channels = 1;
    int num_classes = 19;
    int base_width = 16;
    int depth = 4;
    int se_reduction = 4;
    std::size_t param_budget = 500000;

    void validate() const {
        if (in_channels != 1) throw ConfigError("segnet: in_channels must be 1 (RAW mosaic)");
        if (num_classes < 2) throw ConfigError("segnet: num_classes must be >= 2");
        if (base_width < 1 || depth < 1 || se_reduction < 1)
            throw ConfigError("segnet: base_width, depth and se_reduction must be >= 1");
        if (depth > 6) throw ConfigError("segnet: depth > 6 is unsupported");
    }

    int width(int level) const { return base_width << level; }
    int se_hidden(int level) const { return std::max(1, width(level) / se_reduction); }
};

// ---- feature-map primitives (CHW layout) --------------------------------------

namespace nn {

inline Tensor conv3x3_fwd(const Tensor& in, const Tensor& W, const Tensor& b) {
    const int Ci = int(in.dim(0)), H = int(in.dim(1)), Wd = int(in.dim(2));
    const int Co = int(W.dim(0));
    Tensor out({std::size_t(Co), std::size_t(H), std::size_t(Wd)});
    for (int o = 0; o < Co; ++o) {
        double* op = out.data() + std::size_t(o) * H * Wd;
        for (int p = 0; p < H * Wd; ++p) op[p] = b[std::size_t(o)];
        for (int ci = 0; ci < Ci; ++ci) {
            const double* ip = in.data() + std::size_t(ci) * H * Wd;
            const double* wp = W.data() + (std::size_t(o) * Ci + std::size_t(ci)) * 9;
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < Wd; ++x) {
                    double acc = 0.0;
                    for (int dy = -1; dy <= 1; ++dy) {
                        const int sy = y + dy;
                        if (sy < 0 || sy >= H) continue;
                        for (int dx = -1; dx <= 1; ++dx) {
                            const int sx = x + dx;
                            if (sx < 0 || sx >= Wd) continue;
                            acc += wp[std::size_t(dy + 1) * 3 + (dx + 1)] * ip[sy * Wd + sx];
                        }
                    }
                    op[y * Wd + x] += acc;
                }
        }
    }
    return out;
}

inline Tensor conv3x3_bwd(const Tensor& in, const Tensor& W, const Tensor& gout, Tensor& gW,
                          Tensor& gb) {
    const int Ci = int(in.dim(0)), H = int(in.dim(1)), Wd = int(in.dim(2));
    const int Co = int(W.dim(0));
    Tensor gin(in.shape());
    for (int o = 0; o < Co; ++o) {
        const double* gp = gout.data() + std::size_t(o) * H * Wd;
        for (int p = 0; p < H * Wd; ++p) gb[std::size_t(o)] += gp[p];
        for (int ci = 0; ci < Ci; ++ci) {
            const double* ip = in.data() + std::size_t(ci) * H * Wd;
            double* gip = gin.data() + std::size_t(ci) * H * Wd;
            const double* wp = W.data() + (std::size_t(o) * Ci + std::size_t(ci)) * 9;
            double* gwp = gW.data() + (std::size_t(o) * Ci + std::size_t(ci)) * 9;
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < Wd; ++x) {
                    const double g = gp[y * Wd + x];
                    if (g == 0.0) continue;
                    for (int dy = -1; dy <= 1; ++dy) {
                        const int sy = y + dy;
                        if (sy < 0 || sy >= H) continue;
                        for (int dx = -1; dx <= 1; ++dx) {
                            const int sx = x + dx;
                            if (sx < 0 || sx >= Wd) continue;
                            gwp[std::size_t(dy + 1) * 3 + (dx + 1)] += g * ip[sy * Wd + sx];
                            gip[sy * Wd + sx] += g * wp[std::size_t(dy + 1) * 3 + (dx + 1)];
                        }
                    }
                }
        }
    }
    return gin;
}

inline Tensor dwconv3x3_fwd(const Tensor& in, const Tensor& W, const Tensor& b) {
    const int C = int(in.dim(0)), H = int(in.dim(1)), Wd = int(in.dim(2));
    Tensor out(in.shape());
    for (int c = 0; c < C; ++c) {
        const double* ip = in.data() + std::size_t(c) * H * Wd;
        double* op = out.data() + std::size_t(c) * H * Wd;
        const double* wp = W.data() + std::size_t(c) * 9;
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < Wd; ++x) {
                double acc = b[std::size_t(c)];
                for (int dy = -1; dy <= 1; ++dy) {
                    const int sy = y + dy;
                    if (sy < 0 || sy >= H) continue;
                    for (int dx = -1; dx <= 1; ++dx) {
                        const int sx = x + dx;
                        if (sx < 0 || sx >= Wd) continue;
                        acc += wp[std::size_t(dy + 1) * 3 + (dx + 1)] * ip[sy * Wd + sx];
                    }
                }
                op[y * Wd + x] = acc;
            }
    }
    return out;
}

inline Tensor dwconv3x3_bwd(const Tensor& in, const Tensor& W, const Tensor& gout, Tensor& gW,
                            Tensor& gb) {
    const int C = int(in.dim(0)), H = int(in.dim(1)), Wd = int(in.dim(2));
    Tensor gin(in.shape());
    for (int c = 0; c < C; ++c) {
        const double* ip = in.data() + std::size_t(c) * H * Wd;
        double* gip = gin.data() + std::size_t(c) * H * Wd;
        const double* gp = gout.data() + std::size_t(c) * H * Wd;
        const double* wp = W.data() + std::size_t(c) * 9;
        double* gwp = gW.data() + std::size_t(c) * 9;
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < Wd; ++x) {
                const double g = gp[y * Wd + x];
                gb[std::size_t(c)] += g;
                if (g == 0.0) continue;
                for (int dy = -1; dy <= 1; ++dy) {
                    const int sy = y + dy;
                    if (sy < 0 || sy >= H) continue;
                    for (int dx = -1; dx <= 1; ++dx) {
                        const int sx = x + dx;
                        if (sx < 0 || sx >= Wd) continue;
                        gwp[std::size_t(dy + 1) * 3 + (dx + 1)] += g * ip[sy * Wd + sx];
                        gip[sy * Wd + sx] += g * wp[std::size_t(dy + 1) * 3 + (dx + 1)];
                    }
                }
            }
    }
    return gin;
}

inline Tensor pwconv_fwd(const Tensor& in, const Tensor& W, const Tensor& b) {
    const int Ci = int(in.dim(0)), HW = int(in.dim(1) * in.dim(2));
    const int Co = int(W.dim(0));
    Tensor out({std::size_t(Co), in.dim(1), in.dim(2)});
    for (int o = 0; o < Co; ++o) {
        double* op = out.data() + std::size_t(o) * HW;
        for (int p = 0; p < HW; ++p) op[p] = b[std::size_t(o)];
        for (int ci = 0; ci < Ci; ++ci) {
            const double w = W.at(std::size_t(o), std::size_t(ci));
            const double* ip = in.data() + std::size_t(ci) * HW;
            for (int p = 0; p < HW; ++p) op[p] += w * ip[p];
        }
    }
    return out;
}

inline Tensor pwconv_bwd(const Tensor& in, const Tensor& W, const Tensor& gout, Tensor& gW,
                         Tensor& gb) {
    const int Ci = int(in.dim(0)), HW = int(in.dim(1) * in.dim(2));
    const int Co = int(W.dim(0));
    Tensor gin(in.shape());
    for (int o = 0; o < Co; ++o) {
        const double* gp = gout.data() + std::size_t(o) * HW;
        double acc_b = 0.0;
        for (int p = 0; p < HW; ++p) acc_b += gp[p];
        gb[std::size_t(o)] += acc_b;
        for (int ci = 0; ci < Ci; ++ci) {
            const double w = W.at(std::size_t(o), std::size_t(ci));
            const double* ip = in.data() + std::size_t(ci) * HW;
            double* gip = gin.data() + std::size_t(ci) * HW;
            double acc_w = 0.0;
            for (int p = 0; p < HW; ++p) {
                acc_w += gp[p] * ip[p];
                gip[p] += w * gp[p];
            }
            gW.at(std::size_t(o), std::size_t(ci)) += acc_w;
        }
    }
    return gin;
}

inline Tensor relu_fwd(const Tensor& in) {
    Tensor out = in;
    for (std::size_t i = 0; i < out.size(); ++i)
        if (out[i] < 0.0) out[i] = 0.0;
    return out;
}

inline Tensor relu_bwd(const Tensor& out, const Tensor& gout) {
    Tensor gin = gout;
    for (std::size_t i = 0; i < gin.size(); ++i)
        if (out[i] <= 0.0) gin[i] = 0.0;
    return gin;
}

inline Tensor avgpool2_fwd(const Tensor& in) {
    const int C = int(in.dim(0)), H = int(in.dim(1)), W = int(in.dim(2));
    Tensor out({std::size_t(C), std::size_t(H / 2), std::size_t(W / 2)});
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < H / 2; ++y)
            for (int x = 0; x < W / 2; ++x)
                out.at(std::size_t(c), std::size_t(y), std::size_t(x)) =
                    0.25 * (in.at(std::size_t(c), std::size_t(2 * y), std::size_t(2 * x)) +
                            in.at(std::size_t(c), std::size_t(2 * y), std::size_t(2 * x + 1)) +
                            in.at(std::size_t(c), std::size_t(2 * y + 1), std::size_t(2 * x)) +
                            in.at(std::size_t(c), std::size_t(2 * y + 1), std::size_t(2 * x + 1)));
    return out;
}

inline Tensor avgpool2_bwd(const std::vector<std::size_t>& in_shape, const Tensor& gout) {
    Tensor gin(in_shape);
    const int C = int(in_shape[0]), H = int(in_shape[1]), W = int(in_shape[2]);
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < H / 2; ++y)
            for (int x = 0; x < W / 2; ++x) {
                const double g = 0.25 * gout.at(std::size_t(c), std::size_t(y), std::size_t(x));
                gin.at(std::size_t(c), std::size_t(2 * y), std::size_t(2 * x)) = g;
                gin.at(std::size_t(c), std::size_t(2 * y), std::size_t(2 * x + 1)) = g;
                gin.at(std::size_t(c), std::size_t(2 * y + 1), std::size_t(2 * x)) = g;
                gin.at(std::size_t(c), std::size_t(2 * y + 1), std::size_t(2 * x + 1)) = g;
            }
    return gin;
}

// Fixed-weight 2x bilinear upsampling (half-pixel sampling, clamped edges).
// Along one axis, out[2i] = 0.25*in[i-1] + 0.75*in[i] and
// out[2i+1] = 0.75*in[i] + 0.25*in[i+1]; separable in y and x.
inline void up2_taps(int oi, int n, int& i0, int& i1, double& w0, double& w1) {
    const int i = oi / 2;
    if (oi % 2 == 0) {
        i0 = std::max(i - 1, 0);
        i1 = i;
        w0 = 0.25;
        w1 = 0.75;
    } else {
        i0 = i;
        i1 = std::min(i + 1, n - 1);
        w0 = 0.75;
        w1 = 0.25;
    }
}

inline Tensor up2_bilinear_fwd(const Tensor& in) {
    const int C = int(in.dim(0)), H = int(in.dim(1)), W = int(in.dim(2));
    Tensor out({std::size_t(C), std::size_t(2 * H), std::size_t(2 * W)});
    for (int c = 0; c < C; ++c)
        for (int oy = 0; oy < 2 * H; ++oy) {
            int y0, y1;
            double wy0, wy1;
            up2_taps(oy, H, y0, y1, wy0, wy1);
            for (int ox = 0; ox < 2 * W; ++ox) {
                int x0, x1;
                double wx0, wx1;
                up2_taps(ox, W, x0, x1, wx0, wx1);
                out.at(std::size_t(c), std::size_t(oy), std::size_t(ox)) =
                    wy0 * (wx0 * in.at(std::size_t(c), std::size_t(y0), std::size_t(x0)) +
                           wx1 * in.at(std::size_t(c), std::size_t(y0), std::size_t(x1))) +
                    wy1 * (wx0 * in.at(std::size_t(c), std::size_t(y1), std::size_t(x0)) +
                           wx1 * in.at(std::size_t(c), std::size_t(y1), std::size_t(x1)));
            }
        }
    return out;
}

inline Tensor up2_bilinear_bwd(const std::vector<std::size_t>& in_shape, const Tensor& gout) {
    Tensor gin(in_shape);
    const int C = int(in_shape[0]), H = int(in_shape[1]), W = int(in_shape[2]);
    for (int c = 0; c < C; ++c)
        for (int oy = 0; oy < 2 * H; ++oy) {
            int y0, y1;
            double wy0, wy1;
            up2_taps(oy, H, y0, y1, wy0, wy1);
            for (int ox = 0; ox < 2 * W; ++ox) {
                int x0, x1;
                double wx0, wx1;
                up2_taps(ox, W, x0, x1, wx0, wx1);
                const double g = gout.at(std::size_t(c), std::size_t(oy), std::size_t(ox));
                gin.at(std::size_t(c), std::size_t(y0), std::size_t(x0)) += g * wy0 * wx0;
                gin.at(std::size_t(c), std::size_t(y0), std::size_t(x1)) += g * wy0 * wx1;
                gin.at(std::size_t(c), std::size_t(y1), std::size_t(x0)) += g * wy1 * wx0;
                gin.at(std::size_t(c), std::size_t(y1), std::size_t(x1)) += g * wy1 * wx1;
            }
        }
    return gin;
}

inline Tensor concat_fwd(const Tensor& a, const Tensor& b) {
    if (a.dim(1) != b.dim(1) || a.dim(2) != b.dim(2))
        throw ShapeError("concat: spatial dims disagree");
    Tensor out({a.dim(0) + b.dim(0), a.dim(1), a.dim(2)});
    std::copy(a.data(), a.data() + a.size(), out.data());
    std::copy(b.data(), b.data() + b.size(), out.data() + a.size());
    return out;
}

inline void concat_bwd(const Tensor& gout, std::size_t ca, Tensor& ga, Tensor& gb) {
    const std::size_t na = ca * gout.dim(1) * gout.dim(2);
    ga = Tensor({ca, gout.dim(1), gout.dim(2)});
    gb = Tensor({gout.dim(0) - ca, gout.dim(1), gout.dim(2)});
    std::copy(gout.data(), gout.data() + na, ga.data());
    std::copy(gout.data() + na, gout.data() + gout.size(), gb.data());
}

inline Tensor softmax_channels_fwd(const Tensor& in) {
    const int C = int(in.dim(0)), HW = int(in.dim(1) * in.dim(2));
    Tensor out(in.shape());
    for (int p = 0; p < HW; ++p) {
        double mx = -1e300;
        for (int c = 0; c < C; ++c) mx = std::max(mx, in[std::size_t(c) * HW + p]);
        double sum = 0.0;
        for (int c = 0; c < C; ++c) {
            const double e = std::exp(in[std::size_t(c) * HW + p] - mx);
            out[std::size_t(c) * HW + p] = e;
            sum += e;
        }
        for (int c = 0; c < C; ++c) out[std::size_t(c) * HW + p] /= sum;
    }
    return out;
}

inline Tensor softmax_channels_bwd(const Tensor& out, const Tensor& gout) {
    const int C = int(out.dim(0)), HW = int(out.dim(1) * out.dim(2));
    Tensor gin(out.shape());
    for (int p = 0; p < HW; ++p) {
        double dot = 0.0;
        for (int c = 0; c < C; ++c)
            dot += gout[std::size_t(c) * HW + p] * out[std::size_t(c) * HW + p];
        for (int c = 0; c < C; ++c)
            gin[std::size_t(c) * HW + p] =
                out[std::size_t(c) * HW + p] * (gout[std::size_t(c) * HW + p] - dot);
    }
    return gin;
}

}  // namespace nn

// ---- network ------------------------------------------------------------------

struct SepConvCtx {
    Tensor in, dw_act, pw_act;  // post-relu activations; dw_act also feeds pw
};

struct SECtx {
    Tensor in, z, h, s;
};

struct SegCtx {
    int orig_h = 0, orig_w = 0;       // before divisibility padding
    int pad_h = 0, pad_w = 0;         // padded extent actually processed
    Tensor input_chw;                 // (1, pad_h, pad_w)
    Tensor stem_act;
    std::vector<SepConvCtx> enc_s1, enc_s2, dec_s1, dec_s2;
    std::vector<SECtx> enc_se, dec_se;
    std::vector<Tensor> enc_out;      // skip tensors (post-SE, pre-pool)
    std::vector<Tensor> dec_up_in;    // decoder inputs before upsampling
    std::vector<Tensor> dec_concat;   // concatenated decoder activations
    Tensor head_in, probs_chw;
};

// Compact UNet-style encoder-decoder on the 1-channel RAW mosaic:
// stem conv, `depth` encoder stages (2x depthwise-separable conv + SE +
// avgpool), mirrored decoder with bilinear upsampling and skip
// concatenation, 1x1 head and per-pixel softmax.
class SegNet {
public:
    explicit SegNet(SegNetConfig cfg) : cfg_(cfg) { cfg_.validate(); }

    const SegNetConfig& config() const { return cfg_; }

    struct ParamSpec {
        std::string name;
        std::vector<std::size_t> shape;
        std::size_t fan_in;
        bool is_bias;
    };

    std::vector<ParamSpec> param_specs() const {
        std::vector<ParamSpec> specs;
        auto add = [&specs](const std::string& n, std::vector<std::size_t> shape, std::size_t fan,
                            bool bias) {
            specs.push_back({n, std::move(shape), fan, bias});
        };
        const int B = cfg_.base_width;
        add("net.stem.w", {std::size_t(B), std::size_t(cfg_.in_channels), 3, 3},
            std::size_t(cfg_.in_channels) * 9, false);
        add("net.stem.b", {std::size_t(B)}, 0, true);
        auto sep = [&add](const std::string& prefix, int cin, int cout) {
            add(prefix + ".dw.w", {std::size_t(cin), 3, 3}, 9, false);
            add(prefix + ".dw.b", {std::size_t(cin)}, 0, true);
            add(prefix + ".pw.w", {std::size_t(cout), std::size_t(cin)}, std::size_t(cin), false);
            add(prefix + ".pw.b", {std::size_t(cout)}, 0, true);
        };
        auto se = [&add](const std::string& prefix, int c, int hidden) {
            add(prefix + ".w1", {std::size_t(hidden), std::size_t(c)}, std::size_t(c), false);
            add(prefix + ".b1", {std::size_t(hidden)}, 0, true);
            add(prefix + ".w2", {std::size_t(c), std::size_t(hidden)}, std::size_t(hidden), false);
            add(prefix + ".b2", {std::size_t(c)}, 0, true);
        };
        for (int i = 0; i < cfg_.depth; ++i) {
            const int cin = (i == 0) ? B : cfg_.width(i - 1);
            const int w = cfg_.width(i);
            const std::string p = "net.enc" + std::to_string(i);
            sep(p + ".s1", cin, w);
            sep(p + ".s2", w, w);
            se(p + ".se", w, cfg_.se_hidden(i));
        }
        for (int i = cfg_.depth - 1; i >= 0; --i) {
            const int carried = cfg_.width(std::min(i + 1, cfg_.depth - 1));
            const int cin = carried + cfg_.width(i);
            const int w = cfg_.width(i);
            const std::string p = "net.dec" + std::to_string(i);
            sep(p + ".s1", cin, w);
            sep(p + ".s2", w, w);
            se(p + ".se", w, cfg_.se_hidden(i));
        }
        add("net.head.w", {std::size_t(cfg_.num_classes), std::size_t(B)}, std::size_t(B), false);
        add("net.head.b", {std::size_t(cfg_.num_classes)}, 0, true);
        return specs;
    }

    std::size_t param_count() const {
        std::size_t n = 0;
        for (const auto& s : param_specs()) n += Tensor::count(s.shape);
        return n;
    }

    std::vector<std::string> param_names() const {
        std::vector<std::string> names;
        for (const auto& s : param_specs()) names.push_back(s.name);
        return names;
    }

    // He-initialized parameters, reproducible from the key. Throws if the
    // configuration exceeds its parameter budget.
    void add_params(ParamSet& params, const RngKey& key) const {
        const std::size_t count = param_count();
        if (count > cfg_.param_budget)
            throw ConfigError("segnet: configuration has " + std::to_string(count) +
                              " parameters, over the budget of " +
                              std::to_string(cfg_.param_budget));
        std::uint64_t idx = 0;
        for (const auto& s : param_specs()) {
            Tensor t(s.shape);
            if (!s.is_bias) {
                const double stddev = std::sqrt(2.0 / double(s.fan_in));
                RngKey k = key.fold(0x5e9).fold(idx);
                for (std::size_t i = 0; i < t.size(); ++i) t[i] = stddev * k.gauss(i);
            }
            params.add(s.name, std::move(t), "network");
            ++idx;
        }
    }

    ParamSet build(const RngKey& key) const {
        ParamSet p;
        add_params(p, key);
        return p;
    }

    // raw (H, W) -> probabilities (H, W, C)
    Tensor forward(const ParamSet& params, const Tensor& raw, SegCtx& ctx) const {
        if (raw.rank() != 2) throw ShapeError("segnet: expected (H, W) RAW input");
        const int H = int(raw.dim(0)), W = int(raw.dim(1));
        const int mult = 1 << cfg_.depth;
        ctx.orig_h = H;
        ctx.orig_w = W;
        ctx.pad_h = ((H + mult - 1) / mult) * mult;
        ctx.pad_w = ((W + mult - 1) / mult) * mult;

        Tensor x({1, std::size_t(ctx.pad_h), std::size_t(ctx.pad_w)});
        for (int y = 0; y < ctx.pad_h; ++y) {
            const int sy = reflect(y, H);
            for (int xx = 0; xx < ctx.pad_w; ++xx)
                x.at(0, std::size_t(y), std::size_t(xx)) =
                    raw.at(std::size_t(sy), std::size_t(reflect(xx, W)));
        }
        ctx.input_chw = x;

        x = nn::relu_fwd(nn::conv3x3_fwd(x, params.value("net.stem.w"), params.value("net.stem.b")));
        ctx.stem_act = x;

        ctx.enc_s1.resize(std::size_t(cfg_.depth));
        ctx.enc_s2.resize(std::size_t(cfg_.depth));
        ctx.enc_se.resize(std::size_t(cfg_.depth));
        ctx.enc_out.resize(std::size_t(cfg_.depth));
        for (int i = 0; i < cfg_.depth; ++i) {
            const std::string p = "net.enc" + std::to_string(i);
            x = sep_fwd(params, p + ".s1", x, ctx.enc_s1[std::size_t(i)]);
            x = sep_fwd(params, p + ".s2", x, ctx.enc_s2[std::size_t(i)]);
            x = se_fwd(params, p + ".se", x, ctx.enc_se[std::size_t(i)]);
            ctx.enc_out[std::size_t(i)] = x;
            x = nn::avgpool2_fwd(x);
        }

        ctx.dec_s1.resize(std::size_t(cfg_.depth));
        ctx.dec_s2.resize(std::size_t(cfg_.depth));
        ctx.dec_se.resize(std::size_t(cfg_.depth));
        ctx.dec_up_in.resize(std::size_t(cfg_.depth));
        ctx.dec_concat.resize(std::size_t(cfg_.depth));
        for (int i = cfg_.depth - 1; i >= 0; --i) {
            const std::string p = "net.dec" + std::to_string(i);
            ctx.dec_up_in[std::size_t(i)] = x;
            x = nn::up2_bilinear_fwd(x);
            x = nn::concat_fwd(x, ctx.enc_out[std::size_t(i)]);
            ctx.dec_concat[std::size_t(i)] = x;
            x = sep_fwd(params, p + ".s1", x, ctx.dec_s1[std::size_t(i)]);
            x = sep_fwd(params, p + ".s2", x, ctx.dec_s2[std::size_t(i)]);
            x = se_fwd(params, p + ".se", x, ctx.dec_se[std::size_t(i)]);
        }

        ctx.head_in = x;
        Tensor logits = nn::pwconv_fwd(x, params.value("net.head.w"), params.value("net.head.b"));
        ctx.probs_chw = nn::softmax_channels_fwd(logits);

        // crop back and transpose to (H, W, C)
        const int C = cfg_.num_classes;
        Tensor probs({std::size_t(H), std::size_t(W), std::size_t(C)});
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < H; ++y)
                for (int xx = 0; xx < W; ++xx)
                    probs.at(std::size_t(y), std::size_t(xx), std::size_t(c)) =
                        ctx.probs_chw.at(std::size_t(c), std::size_t(y), std::size_t(xx));
        return probs;
    }

    // gprobs (H, W, C) -> graw (H, W); accumulates parameter gradients.
    Tensor backward(const ParamSet& params, const SegCtx& ctx, const Tensor& gprobs,
                    ParamSet* pg) const {
        const int H = ctx.orig_h, W = ctx.orig_w;
        const int C = cfg_.num_classes;
        Tensor gp({std::size_t(C), std::size_t(ctx.pad_h), std::size_t(ctx.pad_w)});
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < H; ++y)
                for (int xx = 0; xx < W; ++xx)
                    gp.at(std::size_t(c), std::size_t(y), std::size_t(xx)) =
                        gprobs.at(std::size_t(y), std::size_t(xx), std::size_t(c));

        Tensor g = nn::softmax_channels_bwd(ctx.probs_chw, gp);
        g = pw_bwd(params, "net.head", ctx.head_in, g, pg);

        std::vector<Tensor> skip_grads(std::size_t(cfg_.depth));
        for (int i = 0; i < cfg_.depth; ++i) {  // reverse of the forward decoder order
            const std::string p = "net.dec" + std::to_string(i);
            g = se_bwd(params, p + ".se", ctx.dec_se[std::size_t(i)], g, pg);
            g = sep_bwd(params, p + ".s2", ctx.dec_s2[std::size_t(i)], g, pg);
            g = sep_bwd(params, p + ".s1", ctx.dec_s1[std::size_t(i)], g, pg);
            Tensor g_up, g_skip;
            nn::concat_bwd(g, ctx.dec_concat[std::size_t(i)].dim(0) -
                                  ctx.enc_out[std::size_t(i)].dim(0),
                           g_up, g_skip);
            skip_grads[std::size_t(i)] = std::move(g_skip);
            g = nn::up2_bilinear_bwd(ctx.dec_up_in[std::size_t(i)].shape(), g_up);
        }

        for (int i = cfg_.depth - 1; i >= 0; --i) {
            const std::string p = "net.enc" + std::to_string(i);
            Tensor g_pre_pool = nn::avgpool2_bwd(ctx.enc_out[std::size_t(i)].shape(), g);
            g_pre_pool.add_scaled(skip_grads[std::size_t(i)], 1.0);
            g = se_bwd(params, p + ".se", ctx.enc_se[std::size_t(i)], g_pre_pool, pg);
            g = sep_bwd(params, p + ".s2", ctx.enc_s2[std::size_t(i)], g, pg);
            g = sep_bwd(params, p + ".s1", ctx.enc_s1[std::size_t(i)], g, pg);
        }

        g = nn::relu_bwd(ctx.stem_act, g);
        Tensor gw(params.value("net.stem.w").shape());
        Tensor gb(params.value("net.stem.b").shape());
        Tensor gx = nn::conv3x3_bwd(ctx.input_chw, params.value("net.stem.w"), g, gw, gb);
        store_grad(pg, "net.stem.w", gw);
        store_grad(pg, "net.stem.b", gb);

        // adjoint of the reflect padding: scatter-add back to (H, W)
        Tensor graw({std::size_t(H), std::size_t(W)});
        for (int y = 0; y < ctx.pad_h; ++y) {
            const int sy = reflect(y, H);
            for (int xx = 0; xx < ctx.pad_w; ++xx)
                graw.at(std::size_t(sy), std::size_t(reflect(xx, W))) +=
                    gx.at(0, std::size_t(y), std::size_t(xx));
        }
        return graw;
    }

private:
    static int reflect(int idx, int n) {
        if (n == 1) return 0;
        while (idx < 0 || idx >= n) {
            if (idx < 0) idx = -idx - 1;
            if (idx >= n) idx = 2 * n - idx - 1;
        }
        return idx;
    }

    static void store_grad(ParamSet* pg, const std::string& name, const Tensor& g) {
        if (pg && pg->has(name)) pg->value(name).add_scaled(g, 1.0);
    }

    Tensor sep_fwd(const ParamSet& params, const std::string& prefix, const Tensor& in,
                   SepConvCtx& c) const {
        c.in = in;
        c.dw_act = nn::relu_fwd(
            nn::dwconv3x3_fwd(in, params.value(prefix + ".dw.w"), params.value(prefix + ".dw.b")));
        c.pw_act = nn::relu_fwd(nn::pwconv_fwd(c.dw_act, params.value(prefix + ".pw.w"),
                                               params.value(prefix + ".pw.b")));
        return c.pw_act;
    }

    Tensor sep_bwd(const ParamSet& params, const std::string& prefix, const SepConvCtx& c,
                   const Tensor& gout, ParamSet* pg) const {
        Tensor g = nn::relu_bwd(c.pw_act, gout);
        Tensor gw(params.value(prefix + ".pw.w").shape());
        Tensor gb(params.value(prefix + ".pw.b").shape());
        g = nn::pwconv_bwd(c.dw_act, params.value(prefix + ".pw.w"), g, gw, gb);
        store_grad(pg, prefix + ".pw.w", gw);
        store_grad(pg, prefix + ".pw.b", gb);
        g = nn::relu_bwd(c.dw_act, g);
        Tensor gw2 = Tensor(params.value(prefix + ".dw.w").shape());
        Tensor gb2 = Tensor(params.value(prefix + ".dw.b").shape());
        g = nn::dwconv3x3_bwd(c.in, params.value(prefix + ".dw.w"), g, gw2, gb2);
        store_grad(pg, prefix + ".dw.w", gw2);
        store_grad(pg, prefix + ".dw.b", gb2);
        return g;
    }

    Tensor pw_bwd(const ParamSet& params, const std::string& prefix, const Tensor& in,
                  const Tensor& gout, ParamSet* pg) const {
        Tensor gw = Tensor(params.value(prefix + ".w").shape());
        Tensor gb = Tensor(params.value(prefix + ".b").shape());
        Tensor g = nn::pwconv_bwd(in, params.value(prefix + ".w"), gout, gw, gb);
        store_grad(pg, prefix + ".w", gw);
        store_grad(pg, prefix + ".b", gb);
        return g;
    }

    Tensor se_fwd(const ParamSet& params, const std::string& prefix, const Tensor& in,
                  SECtx& c) const {
        const int C = int(in.dim(0));
        const int HW = int(in.dim(1) * in.dim(2));
        c.in = in;
        c.z = Tensor({std::size_t(C)});
        for (int ch = 0; ch < C; ++ch) {
            const double* ip = in.data() + std::size_t(ch) * HW;
            double acc = 0.0;
            for (int p = 0; p < HW; ++p) acc += ip[p];
            c.z[std::size_t(ch)] = acc / double(HW);
        }
        const Tensor& w1 = params.value(prefix + ".w1");
        const Tensor& b1 = params.value(prefix + ".b1");
        const int Hn = int(w1.dim(0));
        c.h = Tensor({std::size_t(Hn)});
        for (int j = 0; j < Hn; ++j) {
            double acc = b1[std::size_t(j)];
            for (int ch = 0; ch < C; ++ch) acc += w1.at(std::size_t(j), std::size_t(ch)) * c.z[std::size_t(ch)];
            c.h[std::size_t(j)] = acc > 0.0 ? acc : 0.0;
        }
        const Tensor& w2 = params.value(prefix + ".w2");
        const Tensor& b2 = params.value(prefix + ".b2");
        c.s = Tensor({std::size_t(C)});
        for (int ch = 0; ch < C; ++ch) {
            double acc = b2[std::size_t(ch)];
            for (int j = 0; j < Hn; ++j) acc += w2.at(std::size_t(ch), std::size_t(j)) * c.h[std::size_t(j)];
            c.s[std::size_t(ch)] = 1.0 / (1.0 + std::exp(-acc));
        }
        Tensor out = in;
        for (int ch = 0; ch < C; ++ch) {
            double* op = out.data() + std::size_t(ch) * HW;
            for (int p = 0; p < HW; ++p) op[p] *= c.s[std::size_t(ch)];
        }
        return out;
    }

    Tensor se_bwd(const ParamSet& params, const std::string& prefix, const SECtx& c,
                  const Tensor& gout, ParamSet* pg) const {
        const int C = int(c.in.dim(0));
        const int HW = int(c.in.dim(1) * c.in.dim(2));
        Tensor gin(c.in.shape());
        Tensor gs({std::size_t(C)});
        for (int ch = 0; ch < C; ++ch) {
            const double* gp = gout.data() + std::size_t(ch) * HW;
            const double* ip = c.in.data() + std::size_t(ch) * HW;
            double* gi = gin.data() + std::size_t(ch) * HW;
            double acc = 0.0;
            for (int p = 0; p < HW; ++p) {
                acc += gp[p] * ip[p];
                gi[p] = gp[p] * c.s[std::size_t(ch)];
            }
            gs[std::size_t(ch)] = acc;
        }
        const Tensor& w1 = params.value(prefix + ".w1");
        const Tensor& w2 = params.value(prefix + ".w2");
        const int Hn = int(w1.dim(0));
        Tensor gpre2({std::size_t(C)});
        for (int ch = 0; ch < C; ++ch)
            gpre2[std::size_t(ch)] = gs[std::size_t(ch)] * c.s[std::size_t(ch)] * (1.0 - c.s[std::size_t(ch)]);
        Tensor gw2(w2.shape()), gb2({std::size_t(C)});
        Tensor gh({std::size_t(Hn)});
        for (int ch = 0; ch < C; ++ch) {
            gb2[std::size_t(ch)] = gpre2[std::size_t(ch)];
            for (int j = 0; j < Hn; ++j) {
                gw2.at(std::size_t(ch), std::size_t(j)) += gpre2[std::size_t(ch)] * c.h[std::size_t(j)];
                gh[std::size_t(j)] += w2.at(std::size_t(ch), std::size_t(j)) * gpre2[std::size_t(ch)];
            }
        }
        Tensor gpre1({std::size_t(Hn)});
        for (int j = 0; j < Hn; ++j) gpre1[std::size_t(j)] = c.h[std::size_t(j)] > 0.0 ? gh[std::size_t(j)] : 0.0;
        Tensor gw1(w1.shape()), gb1({std::size_t(Hn)});
        Tensor gz({std::size_t(C)});
        for (int j = 0; j < Hn; ++j) {
            gb1[std::size_t(j)] = gpre1[std::size_t(j)];
            for (int ch = 0; ch < C; ++ch) {
                gw1.at(std::size_t(j), std::size_t(ch)) += gpre1[std::size_t(j)] * c.z[std::size_t(ch)];
                gz[std::size_t(ch)] += w1.at(std::size_t(j), std::size_t(ch)) * gpre1[std::size_t(j)];
            }
        }
        for (int ch = 0; ch < C; ++ch) {
            const double per_pixel = gz[std::size_t(ch)] / double(HW);
            double* gi = gin.data() + std::size_t(ch) * HW;
            for (int p = 0; p < HW; ++p) gi[p] += per_pixel;
        }
        store_grad(pg, prefix + ".w1", gw1);
        store_grad(pg, prefix + ".b1", gb1);
        store_grad(pg, prefix + ".w2", gw2);
        store_grad(pg, prefix + ".b2", gb2);
        return gin;
    }

    SegNetConfig cfg_;
};

// Stage adapter: RAW mosaic (H, W) in, per-pixel class probabilities
// (H, W, C) out.
class SegNetStage final : public Stage {
public:
    explicit SegNetStage(std::shared_ptr<const SegNet> net) : net_(std::move(net)) {}

    std::string name() const override { return "segnet.forward"; }
    std::vector<std::string> param_names() const override { return net_->param_names(); }
    const SegNet& net() const { return *net_; }

    Tensor forward(const Tensor& in, const ParamSet& params, std::any& ctx) const override {
        auto c = std::make_shared<SegCtx>();
        Tensor probs = net_->forward(params, in, *c);
        ctx = c;
        return probs;
    }

    Tensor backward(const std::any& ctx, const Tensor& cot, const ParamSet& params,
                    ParamSet* param_grads) const override {
        auto c = std::any_cast<std::shared_ptr<SegCtx>>(ctx);
        return net_->backward(params, *c, cot, param_grads);
    }

private:
    std::shared_ptr<const SegNet> net_;
};

}  // namespace rawpipe
