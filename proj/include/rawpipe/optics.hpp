#pragma once

#include <any>
#include <cmath>
#include <iostream>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "json.hpp"
#include "rawpipe/fft.hpp"
#include "rawpipe/stage.hpp"
#include "rawpipe/tensor.hpp"
#include "rawpipe/zernike.hpp"

namespace rawpipe {

inline constexpr double kReferenceWavelengthNm = 530.0;

// ---- lens description -------------------------------------------------------

struct LensParams {
    bool identity = false;
    double focal_length_mm = 0.0;
    double f_number = 0.0;
    double fov_deg = 0.0;
    std::vector<double> wavelengths_nm{610.0, 530.0, 465.0};
    int grid_y = 1, grid_x = 1;
    int noll_max = 0;
    Tensor coeffs;  // (grid_y * grid_x, noll_max), units of waves
    bool trainable = true;

    static LensParams identity_lens() {
        LensParams lp;
        lp.identity = true;
        lp.trainable = false;
        return lp;
    }

    void validate() const {
        if (identity) return;
        if (f_number <= 0.0) throw ConfigError("lens: f_number must be > 0");
        if (!(fov_deg > 0.0 && fov_deg < 180.0))
            throw ConfigError("lens: fov_deg must lie in (0, 180)");
        if (grid_y < 1 || grid_x < 1) throw ConfigError("lens: zernike grid must be >= 1x1");
        if (noll_max < 1 || noll_max > 15)
            throw ConfigError("lens: noll_max must lie in [1, 15]");
        if (coeffs.rank() != 2 || coeffs.dim(0) != std::size_t(grid_y * grid_x) ||
            coeffs.dim(1) != std::size_t(noll_max))
            throw ConfigError("lens: coefficient array does not match grid x noll_max");
        if (wavelengths_nm.empty()) throw ConfigError("lens: wavelengths_nm must be non-empty");
    }
};

// Parses the lens JSON schema. Empty or "null" text yields the identity
// sentinel (no lens -> optics pass through). Unknown keys warn and are
// ignored; missing or invalid required keys raise ConfigError naming them.
inline LensParams load_lens(const std::string& json_text) {
    std::string trimmed;
    for (char c : json_text)
        if (!std::isspace(static_cast<unsigned char>(c))) trimmed += c;
    if (trimmed.empty() || trimmed == "null" || trimmed == "{}")
        return LensParams::identity_lens();

    nlohmann::json j;
    try {
        j = nlohmann::json::parse(json_text);
    } catch (const std::exception& e) {
        throw ConfigError(std::string("lens: JSON parse failure: ") + e.what());
    }
    if (j.is_null()) return LensParams::identity_lens();

    static const std::vector<std::string> known{"focal_length_mm", "f_number",  "fov_deg",
                                                "wavelengths_nm",  "zernike",   "trainable"};
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (std::find(known.begin(), known.end(), it.key()) == known.end())
            std::cerr << "warning: lens file: ignoring unknown key '" << it.key() << "'\n";
    }

    auto require = [&j](const char* key) -> const nlohmann::json& {
        if (!j.contains(key)) throw ConfigError(std::string("lens: missing key '") + key + "'");
        return j.at(key);
    };

    LensParams lp;
    lp.identity = false;
    try {
        lp.focal_length_mm = require("focal_length_mm").get<double>();
        lp.f_number = require("f_number").get<double>();
        lp.fov_deg = require("fov_deg").get<double>();
        if (j.contains("wavelengths_nm"))
            lp.wavelengths_nm = j.at("wavelengths_nm").get<std::vector<double>>();
        if (j.contains("trainable")) lp.trainable = j.at("trainable").get<bool>();
        const auto& z = require("zernike");
        if (!z.contains("grid") || !z.contains("noll_max") || !z.contains("coeffs_waves"))
            throw ConfigError("lens: zernike block needs 'grid', 'noll_max', 'coeffs_waves'");
        auto grid = z.at("grid").get<std::vector<int>>();
        if (grid.size() != 2) throw ConfigError("lens: zernike.grid must be [Gy, Gx]");
        lp.grid_y = grid[0];
        lp.grid_x = grid[1];
        lp.noll_max = z.at("noll_max").get<int>();
        auto rows = z.at("coeffs_waves").get<std::vector<std::vector<double>>>();
        if (rows.size() != std::size_t(lp.grid_y * lp.grid_x))
            throw ConfigError("lens: coeffs_waves must hold Gy*Gx rows");
        lp.coeffs = Tensor({rows.size(), std::size_t(lp.noll_max)});
        for (std::size_t r = 0; r < rows.size(); ++r) {
            if (rows[r].size() != std::size_t(lp.noll_max))
                throw ConfigError("lens: coeffs_waves row length must equal noll_max");
            for (int c = 0; c < lp.noll_max; ++c) lp.coeffs.at(r, std::size_t(c)) = rows[r][std::size_t(c)];
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("lens: invalid field: ") + e.what());
    }
    lp.validate();
    return lp;
}

// ---- PSF synthesis ----------------------------------------------------------

struct PsfKernel {
    int k = 0;
    Tensor w;  // (k, k), nonnegative, sums to 1
    int center() const { return k / 2; }
};

namespace detail {

// Zernike basis planes sampled on the pupil grid, zero outside the unit
// disk. Cached per (pupil_samples, noll_max); planes are laid out j-major.
inline std::shared_ptr<const std::vector<double>> pupil_basis(int P, int J) {
    static std::mutex mu;
    static std::map<std::pair<int, int>, std::shared_ptr<const std::vector<double>>> cache;
    std::lock_guard<std::mutex> lock(mu);
    auto key = std::make_pair(P, J);
    auto it = cache.find(key);
    if (it != cache.end()) return it->second;

    auto planes = std::make_shared<std::vector<double>>(std::size_t(J) * P * P, 0.0);
    for (int y = 0; y < P; ++y) {
        for (int x = 0; x < P; ++x) {
            const double fy = (2.0 * (y + 0.5) / P) - 1.0;
            const double fx = (2.0 * (x + 0.5) / P) - 1.0;
            const double rho = std::sqrt(fx * fx + fy * fy);
            if (rho > 1.0) continue;
            const double phi = std::atan2(fy, fx);
            for (int jn = 1; jn <= J; ++jn)
                (*planes)[std::size_t(jn - 1) * P * P + std::size_t(y) * P + x] =
                    zernike::eval(jn, rho, phi);
        }
    }
    cache[key] = planes;
    return planes;
}

inline bool inside_disk(int P, int y, int x) {
    const double fy = (2.0 * (y + 0.5) / P) - 1.0;
    const double fx = (2.0 * (x + 0.5) / P) - 1.0;
    return fy * fy + fx * fx <= 1.0;
}

}  // namespace detail

struct PsfSynthCtx {
    int P = 0, k = 0, J = 0;
    std::vector<cplx> pupil;   // P*P field, zero outside the disk
    std::vector<cplx> F;       // unnormalized DFT of the pupil
    std::vector<double> raw;   // cropped |F|^2 before normalization
    double sum = 0.0;
};

// Wavefront W = sum_j c_j Z_j (waves) -> pupil A*exp(2*pi*i*W) -> PSF =
// |DFT|^2, centered crop to k x k, renormalized to unit sum.
inline PsfKernel synthesize_psf(const double* coeffs, int J, int pupil_samples, int kernel_size,
                                PsfSynthCtx* ctx_out = nullptr) {
    const int P = pupil_samples;
    const int k = kernel_size;
    if (k % 2 == 0) throw ConfigError("synthesize_psf: kernel_size must be odd");
    if (P < k) throw ConfigError("synthesize_psf: pupil_samples must be >= kernel_size");
    if ((P & (P - 1)) != 0) throw ConfigError("synthesize_psf: pupil_samples must be a power of two");
    if (J < 0) throw ConfigError("synthesize_psf: negative coefficient count");

    auto basis = J > 0 ? detail::pupil_basis(P, J) : nullptr;
    std::vector<cplx> pupil(std::size_t(P) * P, cplx(0.0, 0.0));
    const double two_pi = 6.28318530717958647692;
    bool any_inside = false;
    for (int y = 0; y < P; ++y) {
        for (int x = 0; x < P; ++x) {
            if (!detail::inside_disk(P, y, x)) continue;
            any_inside = true;
            double w = 0.0;
            for (int jn = 0; jn < J; ++jn)
                w += coeffs[jn] * (*basis)[std::size_t(jn) * P * P + std::size_t(y) * P + x];
            pupil[std::size_t(y) * P + x] = cplx(std::cos(two_pi * w), std::sin(two_pi * w));
        }
    }
    if (!any_inside) throw NumericError("synthesize_psf: all-zero pupil");

    std::vector<cplx> F = pupil;
    fft2_inplace(F, std::size_t(P), std::size_t(P), -1);

    const int r = k / 2;
    std::vector<double> raw(std::size_t(k) * k);
    double sum = 0.0;
    for (int dy = -r; dy <= r; ++dy) {
        for (int dx = -r; dx <= r; ++dx) {
            const int uy = (dy % P + P) % P;
            const int ux = (dx % P + P) % P;
            const double v = std::norm(F[std::size_t(uy) * P + ux]);
            raw[std::size_t(dy + r) * k + (dx + r)] = v;
            sum += v;
        }
    }
    if (!(sum > 0.0)) throw NumericError("synthesize_psf: degenerate PSF (zero energy in crop)");

    PsfKernel kern;
    kern.k = k;
    kern.w = Tensor({std::size_t(k), std::size_t(k)});
    for (std::size_t i = 0; i < kern.w.size(); ++i) kern.w[i] = raw[i] / sum;

    if (ctx_out) {
        ctx_out->P = P;
        ctx_out->k = k;
        ctx_out->J = J;
        ctx_out->pupil = std::move(pupil);
        ctx_out->F = std::move(F);
        ctx_out->raw = std::move(raw);
        ctx_out->sum = sum;
    }
    return kern;
}

inline PsfKernel synthesize_psf(const std::vector<double>& coeffs, int pupil_samples,
                                int kernel_size, PsfSynthCtx* ctx_out = nullptr) {
    return synthesize_psf(coeffs.data(), int(coeffs.size()), pupil_samples, kernel_size, ctx_out);
}

// Pulls a cotangent on the normalized kernel back to the Zernike
// coefficients. The DFT adjoint is the conjugate-kernel transform; the
// wavefront adjoint is 2*pi*Im(conj(pupil) * g_pupil).
inline void synthesize_psf_vjp(const PsfSynthCtx& ctx, const Tensor& dkernel, double* dcoeffs,
                               double scale = 1.0) {
    const int P = ctx.P, k = ctx.k, J = ctx.J;
    const int r = k / 2;
    if (J == 0) return;

    double dot = 0.0;
    for (std::size_t i = 0; i < dkernel.size(); ++i) dot += dkernel[i] * ctx.raw[i] / ctx.sum;
    std::vector<cplx> gF(std::size_t(P) * P, cplx(0.0, 0.0));
    for (int dy = -r; dy <= r; ++dy) {
        for (int dx = -r; dx <= r; ++dx) {
            const int uy = (dy % P + P) % P;
            const int ux = (dx % P + P) % P;
            const double graw =
                (dkernel[std::size_t(dy + r) * k + (dx + r)] - dot) / ctx.sum;
            gF[std::size_t(uy) * P + ux] += 2.0 * graw * ctx.F[std::size_t(uy) * P + ux];
        }
    }
    fft2_inplace(gF, std::size_t(P), std::size_t(P), +1);

    auto basis = detail::pupil_basis(P, J);
    const double two_pi = 6.28318530717958647692;
    for (int y = 0; y < P; ++y) {
        for (int x = 0; x < P; ++x) {
            const cplx p = ctx.pupil[std::size_t(y) * P + x];
            if (p == cplx(0.0, 0.0)) continue;
            const cplx gp = gF[std::size_t(y) * P + x];
            const double gw = two_pi * (p.real() * gp.imag() - p.imag() * gp.real());
            for (int jn = 0; jn < J; ++jn)
                dcoeffs[jn] += scale * gw *
                               (*basis)[std::size_t(jn) * P * P + std::size_t(y) * P + x];
        }
    }
}

// ---- spatially varying render ----------------------------------------------

struct PsfGrid {
    int gy = 1, gx = 1;
    std::vector<PsfKernel> kernels;  // gy * gx, row-major

    const PsfKernel& at(int ty, int tx) const { return kernels[std::size_t(ty) * gx + tx]; }
};

namespace detail {

inline int reflect_index(int idx, int n) {
    if (n == 1) return 0;
    while (idx < 0 || idx >= n) {
        if (idx < 0) idx = -idx - 1;
        if (idx >= n) idx = 2 * n - idx - 1;
    }
    return idx;
}

// Full 2-d convolution of `a` (ha x wa) with `b` (hb x wb) via zero-padded
// FFT; result is (ha+hb-1) x (wa+wb-1).
inline std::vector<double> conv_full_fft(const std::vector<double>& a, int ha, int wa,
                                         const std::vector<double>& b, int hb, int wb) {
    const std::size_t H = next_pow2(std::size_t(ha + hb - 1));
    const std::size_t W = next_pow2(std::size_t(wa + wb - 1));
    std::vector<cplx> fa(H * W, cplx(0, 0)), fb(H * W, cplx(0, 0));
    for (int y = 0; y < ha; ++y)
        for (int x = 0; x < wa; ++x) fa[std::size_t(y) * W + x] = a[std::size_t(y) * wa + x];
    for (int y = 0; y < hb; ++y)
        for (int x = 0; x < wb; ++x) fb[std::size_t(y) * W + x] = b[std::size_t(y) * wb + x];
    fft2_inplace(fa, H, W, -1);
    fft2_inplace(fb, H, W, -1);
    for (std::size_t i = 0; i < fa.size(); ++i) fa[i] *= fb[i];
    fft2_inplace(fa, H, W, +1);
    const double inv = 1.0 / double(H * W);
    std::vector<double> out(std::size_t(ha + hb - 1) * std::size_t(wa + wb - 1));
    for (int y = 0; y < ha + hb - 1; ++y)
        for (int x = 0; x < wa + wb - 1; ++x)
            out[std::size_t(y) * std::size_t(wa + wb - 1) + x] =
                fa[std::size_t(y) * W + x].real() * inv;
    return out;
}

inline void tile_bounds(int extent, int tiles, int t, int& lo, int& hi) {
    lo = int(std::size_t(extent) * std::size_t(t) / std::size_t(tiles));
    hi = int(std::size_t(extent) * std::size_t(t + 1) / std::size_t(tiles));
}

inline bool is_delta_kernel(const PsfKernel& kern) {
    const int c = kern.center();
    for (int y = 0; y < kern.k; ++y)
        for (int x = 0; x < kern.k; ++x) {
            const double v = kern.w.at(std::size_t(y), std::size_t(x));
            if (y == c && x == c) {
                if (v != 1.0) return false;
            } else if (v != 0.0) {
                return false;
            }
        }
    return true;
}

// FFT-convolves one channel of one tile (reflect padding at image borders)
// and writes the valid region into `out`. A delta kernel short-circuits to
// an exact copy.
inline void conv_tile_channel(const Tensor& image, int ch, const PsfKernel& kern, int y0, int y1,
                              int x0, int x1, Tensor& out) {
    if (is_delta_kernel(kern)) {
        for (int y = y0; y < y1; ++y)
            for (int x = x0; x < x1; ++x)
                out.at(std::size_t(y), std::size_t(x), std::size_t(ch)) =
                    image.at(std::size_t(y), std::size_t(x), std::size_t(ch));
        return;
    }
    const int H = int(image.dim(0)), W = int(image.dim(1));
    const int k = kern.k, r = k / 2;
    const int th = y1 - y0, tw = x1 - x0;
    const int wh = th + 2 * r, ww = tw + 2 * r;
    std::vector<double> win(std::size_t(wh) * ww);
    for (int y = 0; y < wh; ++y) {
        const int sy = reflect_index(y0 - r + y, H);
        for (int x = 0; x < ww; ++x) {
            const int sx = reflect_index(x0 - r + x, W);
            win[std::size_t(y) * ww + x] = image.at(std::size_t(sy), std::size_t(sx), std::size_t(ch));
        }
    }
    std::vector<double> kv(kern.w.data(), kern.w.data() + kern.w.size());
    auto full = conv_full_fft(win, wh, ww, kv, k, k);
    const int fw = ww + k - 1;
    for (int y = 0; y < th; ++y)
        for (int x = 0; x < tw; ++x)
            out.at(std::size_t(y0 + y), std::size_t(x0 + x), std::size_t(ch)) =
                full[std::size_t(y + 2 * r) * fw + (x + 2 * r)];
}

}  // namespace detail

// Convolves each tile of the image with that tile's kernel (per channel,
// reflect padding at the image border). Matches direct spatial convolution
// to FFT round-off.
inline Tensor render(const Tensor& image, const PsfGrid& grid) {
    if (image.rank() != 3 || image.dim(2) != 3)
        throw ShapeError("render: expected an (H, W, 3) radiance image");
    const int H = int(image.dim(0)), W = int(image.dim(1));
    if (grid.gy < 1 || grid.gx < 1 || grid.gy > H || grid.gx > W)
        throw ShapeError("render: PSF grid does not tile the image");
    if (grid.kernels.size() != std::size_t(grid.gy) * std::size_t(grid.gx))
        throw ShapeError("render: kernel count does not match grid");

    Tensor out({std::size_t(H), std::size_t(W), 3});
    for (int ty = 0; ty < grid.gy; ++ty) {
        for (int tx = 0; tx < grid.gx; ++tx) {
            int y0, y1, x0, x1;
            detail::tile_bounds(H, grid.gy, ty, y0, y1);
            detail::tile_bounds(W, grid.gx, tx, x0, x1);
            for (int c = 0; c < 3; ++c)
                detail::conv_tile_channel(image, c, grid.at(ty, tx), y0, y1, x0, x1, out);
        }
    }
    return out;
}

// Direct spatial-domain reference used by the stage adjoints (and by tests
// as the independent oracle for the FFT path).
inline Tensor render_direct(const Tensor& image, const PsfGrid& grid) {
    const int H = int(image.dim(0)), W = int(image.dim(1));
    Tensor out({std::size_t(H), std::size_t(W), 3});
    for (int ty = 0; ty < grid.gy; ++ty) {
        for (int tx = 0; tx < grid.gx; ++tx) {
            const PsfKernel& kern = grid.at(ty, tx);
            const int k = kern.k, r = k / 2;
            int y0, y1, x0, x1;
            detail::tile_bounds(H, grid.gy, ty, y0, y1);
            detail::tile_bounds(W, grid.gx, tx, x0, x1);
            for (int y = y0; y < y1; ++y)
                for (int x = x0; x < x1; ++x)
                    for (int c = 0; c < 3; ++c) {
                        double acc = 0.0;
                        for (int dy = -r; dy <= r; ++dy)
                            for (int dx = -r; dx <= r; ++dx)
                                acc += kern.w.at(std::size_t(dy + r), std::size_t(dx + r)) *
                                       image.at(std::size_t(detail::reflect_index(y - dy, H)),
                                                std::size_t(detail::reflect_index(x - dx, W)),
                                                std::size_t(c));
                        out.at(std::size_t(y), std::size_t(x), std::size_t(c)) = acc;
                    }
        }
    }
    return out;
}

// ---- mean-0.5 normalization --------------------------------------------------

inline constexpr double kNormalizeMeanFloor = 1e-6;

inline Tensor normalize_render(const Tensor& image) {
    const double mu = image.mean();
    if (!(mu > kNormalizeMeanFloor))
        throw NumericError("normalize_render: frame mean below floor (degenerate black frame)");
    Tensor out = image;
    out.scale(0.5 / mu);
    return out;
}

// ---- stages ------------------------------------------------------------------

inline constexpr const char* kZernikeParam = "optics.zernike";

struct RenderCtx {
    Tensor input;
    std::vector<PsfSynthCtx> synth;  // per (tile, channel), tile-major
    std::vector<double> chroma;      // per channel wavefront scale
};

// Lens stage: synthesizes per-tile, per-channel kernels from the Zernike
// parameter tensor and convolves. Identity lenses pass through untouched.
class RenderStage final : public Stage {
public:
    RenderStage(LensParams lens, int pupil_samples = 64, int kernel_size = 21)
        : lens_(std::move(lens)), pupil_samples_(pupil_samples), kernel_size_(kernel_size) {}

    std::string name() const override { return "optics.render"; }
    std::vector<std::string> param_names() const override {
        if (lens_.identity) return {};
        return {kZernikeParam};
    }
    const LensParams& lens() const { return lens_; }

    Tensor forward(const Tensor& in, const ParamSet& params, std::any& ctx) const override {
        if (in.rank() != 3 || in.dim(2) != 3)
            throw ShapeError("optics.render: expected (H, W, 3) input");
        if (lens_.identity) return in;

        const Tensor& coeffs = params.value(kZernikeParam);
        if (coeffs.rank() != 2 || coeffs.dim(0) != std::size_t(lens_.grid_y * lens_.grid_x) ||
            coeffs.dim(1) != std::size_t(lens_.noll_max))
            throw ShapeError("optics.render: zernike parameter shape mismatch");

        auto c = std::make_shared<RenderCtx>();
        c->input = in;
        c->chroma.resize(3);
        for (int ch = 0; ch < 3; ++ch) {
            const double wl = lens_.wavelengths_nm[std::size_t(ch) % lens_.wavelengths_nm.size()];
            c->chroma[std::size_t(ch)] = kReferenceWavelengthNm / wl;
        }

        const int H = int(in.dim(0)), W = int(in.dim(1));
        if (lens_.grid_y > H || lens_.grid_x > W)
            throw ShapeError("optics.render: PSF grid does not tile the image");
        const int tiles = lens_.grid_y * lens_.grid_x;
        c->synth.resize(std::size_t(tiles) * 3);
        std::vector<double> scaled(std::size_t(lens_.noll_max));

        Tensor out({in.dim(0), in.dim(1), 3});
        for (int ty = 0; ty < lens_.grid_y; ++ty) {
            for (int tx = 0; tx < lens_.grid_x; ++tx) {
                const int t = ty * lens_.grid_x + tx;
                int y0, y1, x0, x1;
                detail::tile_bounds(H, lens_.grid_y, ty, y0, y1);
                detail::tile_bounds(W, lens_.grid_x, tx, x0, x1);
                for (int ch = 0; ch < 3; ++ch) {
                    for (int jn = 0; jn < lens_.noll_max; ++jn)
                        scaled[std::size_t(jn)] =
                            coeffs.at(std::size_t(t), std::size_t(jn)) * c->chroma[std::size_t(ch)];
                    PsfKernel kern =
                        synthesize_psf(scaled.data(), lens_.noll_max, pupil_samples_, kernel_size_,
                                       &c->synth[std::size_t(t) * 3 + std::size_t(ch)]);
                    detail::conv_tile_channel(in, ch, kern, y0, y1, x0, x1, out);
                }
            }
        }
        ctx = c;
        return out;
    }

    Tensor backward(const std::any& ctx, const Tensor& cot, const ParamSet& params,
                    ParamSet* param_grads) const override {
        if (lens_.identity) return cot;
        auto c = std::any_cast<std::shared_ptr<RenderCtx>>(ctx);
        const Tensor& in = c->input;
        const int H = int(in.dim(0)), W = int(in.dim(1));
        Tensor gin({in.dim(0), in.dim(1), 3});

        const Tensor& coeffs = params.value(kZernikeParam);
        Tensor gcoeffs(coeffs.shape());

        const int tiles = lens_.grid_y * lens_.grid_x;
        std::vector<double> scaled(std::size_t(lens_.noll_max));
        for (int ty = 0; ty < lens_.grid_y; ++ty) {
            for (int tx = 0; tx < lens_.grid_x; ++tx) {
                const int t = ty * lens_.grid_x + tx;
                int y0, y1, x0, x1;
                detail::tile_bounds(H, lens_.grid_y, ty, y0, y1);
                detail::tile_bounds(W, lens_.grid_x, tx, x0, x1);
                for (int ch = 0; ch < 3; ++ch) {
                    const PsfSynthCtx& sc = c->synth[std::size_t(t) * 3 + std::size_t(ch)];
                    const int k = sc.k, r = k / 2;
                    // Rebuild this tile/channel kernel from the saved crop.
                    Tensor kw({std::size_t(k), std::size_t(k)});
                    for (std::size_t i = 0; i < kw.size(); ++i) kw[i] = sc.raw[i] / sc.sum;

                    // dL/dkernel and dL/dwindow by direct correlation.
                    Tensor gk({std::size_t(k), std::size_t(k)});
                    for (int y = y0; y < y1; ++y) {
                        for (int x = x0; x < x1; ++x) {
                            const double g = cot.at(std::size_t(y), std::size_t(x), std::size_t(ch));
                            if (g == 0.0) continue;
                            for (int dy = -r; dy <= r; ++dy) {
                                const int sy = detail::reflect_index(y - dy, H);
                                for (int dx = -r; dx <= r; ++dx) {
                                    const int sx = detail::reflect_index(x - dx, W);
                                    const double pix =
                                        in.at(std::size_t(sy), std::size_t(sx), std::size_t(ch));
                                    gk.at(std::size_t(dy + r), std::size_t(dx + r)) += g * pix;
                                    gin.at(std::size_t(sy), std::size_t(sx), std::size_t(ch)) +=
                                        g * kw.at(std::size_t(dy + r), std::size_t(dx + r));
                                }
                            }
                        }
                    }
                    std::vector<double> gc(std::size_t(lens_.noll_max), 0.0);
                    synthesize_psf_vjp(sc, gk, gc.data(), c->chroma[std::size_t(ch)]);
                    for (int jn = 0; jn < lens_.noll_max; ++jn)
                        gcoeffs.at(std::size_t(t), std::size_t(jn)) += gc[std::size_t(jn)];
                }
            }
        }
        (void)tiles;
        if (param_grads && param_grads->has(kZernikeParam))
            param_grads->value(kZernikeParam).add_scaled(gcoeffs, 1.0);
        return gin;
    }

private:
    LensParams lens_;
    int pupil_samples_;
    int kernel_size_;
};

// Scales the frame so its mean is exactly 0.5.
class NormalizeStage final : public Stage {
public:
    std::string name() const override { return "optics.normalize"; }

    Tensor forward(const Tensor& in, const ParamSet&, std::any& ctx) const override {
        const double mu = in.mean();
        if (!(mu > kNormalizeMeanFloor))
            throw NumericError("optics.normalize: frame mean below floor");
        ctx = in;
        Tensor out = in;
        out.scale(0.5 / mu);
        return out;
    }

    Tensor backward(const std::any& ctx, const Tensor& cot, const ParamSet&,
                    ParamSet*) const override {
        const Tensor& in = std::any_cast<const Tensor&>(ctx);
        const double mu = in.mean();
        const double n = double(in.size());
        const double s = 0.5 / mu;
        // d out_i / d in_j = s * delta_ij - 0.5 * in_i / (mu^2 * n)
        double gdotx = 0.0;
        for (std::size_t i = 0; i < in.size(); ++i) gdotx += cot[i] * in[i];
        Tensor gin = cot;
        gin.scale(s);
        const double corr = 0.5 * gdotx / (mu * mu * n);
        for (std::size_t i = 0; i < gin.size(); ++i) gin[i] -= corr;
        return gin;
    }
};

}  // namespace rawpipe
