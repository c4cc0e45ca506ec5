#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "rawpipe/image_io.hpp"
#include "rawpipe/labels.hpp"
#include "rawpipe/optics.hpp"
#include "rawpipe/rng.hpp"
#include "rawpipe/sensor.hpp"
#include "rawpipe/tensor.hpp"

namespace rawpipe {

// Synthetic palette: road, building, pole, sign, sky.
enum SceneClass : int {
    kRoad = 0,
    kBuilding = 1,
    kPole = 2,
    kSign = 3,
    kSky = 4,
};
inline constexpr int kSceneClasses = 5;

struct SceneSpec {
    std::uint64_t seed = 0;
    int h = 64, w = 64;
    int min_buildings = 1, max_buildings = 3;
    int min_poles = 1, max_poles = 3;
    int min_signs = 1, max_signs = 2;
    double illumination = 1.0;

    void validate() const {
        if (h < 32 || w < 32) throw ConfigError("scene: H and W must be >= 32");
        if (illumination < 0.2 || illumination > 1.0)
            throw ConfigError("scene: illumination must lie in [0.2, 1.0]");
        if (min_buildings < 1 || min_poles < 1 || min_signs < 1)
            throw ConfigError("scene: object minimums must be >= 1");
        if (max_buildings < min_buildings || max_poles < min_poles || max_signs < min_signs)
            throw ConfigError("scene: object ranges are inverted");
    }
};

struct Sample {
    Tensor image;  // (H, W, 3) in [0, 1]
    LabelMap labels;
};

// Deterministic toy driving scene: sky gradient on top, road trapezoid at
// the bottom, building rectangles on the horizon, thin vertical poles and
// small disc/diamond signs. Every class is present for any valid spec.
inline Sample generate_scene(const SceneSpec& spec) {
    spec.validate();
    const int H = spec.h, W = spec.w;
    RngKey key = RngKey{}.fold(0x5ce11e).fold(spec.seed);
    std::uint64_t ctr = 0;
    auto u = [&key, &ctr](double lo, double hi) { return key.uniform_range(ctr++, lo, hi); };
    auto ui = [&key, &ctr](int lo, int hi) {  // inclusive
        return lo + int(key.uniform_index(ctr++, std::uint64_t(hi - lo + 1)));
    };

    Sample s;
    s.image = Tensor({std::size_t(H), std::size_t(W), 3});
    s.labels = LabelMap(H, W, kSky);

    auto put = [&s](int y, int x, double r, double g, double b, int cls) {
        s.image.at(std::size_t(y), std::size_t(x), 0) = r;
        s.image.at(std::size_t(y), std::size_t(x), 1) = g;
        s.image.at(std::size_t(y), std::size_t(x), 2) = b;
        s.labels.at(y, x) = cls;
    };

    const int horizon = int(H * u(0.40, 0.55));

    // sky gradient, brightest at the top
    const double sky_r = u(0.45, 0.6), sky_g = u(0.6, 0.75), sky_b = u(0.85, 1.0);
    for (int y = 0; y < horizon; ++y) {
        const double f = 1.0 - 0.35 * double(y) / double(std::max(horizon - 1, 1));
        for (int x = 0; x < W; ++x) put(y, x, sky_r * f, sky_g * f, sky_b * f, kSky);
    }

    // below the horizon: facade strip (building) filled first, road drawn over
    const double fac_r = u(0.3, 0.45), fac_g = u(0.25, 0.35), fac_b = u(0.2, 0.3);
    for (int y = horizon; y < H; ++y)
        for (int x = 0; x < W; ++x) put(y, x, fac_r, fac_g, fac_b, kBuilding);

    // road trapezoid: widens from the horizon to nearly full width
    const double cx = W * u(0.45, 0.55);
    const double road_v = u(0.3, 0.42);
    const double top_half = W * u(0.05, 0.10);
    const double bot_half = W * u(0.42, 0.48);
    for (int y = horizon; y < H; ++y) {
        const double t = double(y - horizon) / double(std::max(H - 1 - horizon, 1));
        const double half = top_half + t * (bot_half - top_half);
        const int x0 = std::max(0, int(cx - half)), x1 = std::min(W - 1, int(cx + half));
        for (int x = x0; x <= x1; ++x) {
            const double shade = road_v * (0.9 + 0.2 * t);
            put(y, x, shade, shade, shade * 1.05, kRoad);
        }
    }

    // buildings above the horizon
    const int n_buildings = ui(spec.min_buildings, spec.max_buildings);
    for (int b = 0; b < n_buildings; ++b) {
        const int bw = ui(W / 10, W / 4);
        const int bh = ui(H / 6, horizon - 2);
        const int bx = ui(0, W - bw - 1);
        const double br = u(0.35, 0.55), bg = u(0.25, 0.4), bb = u(0.2, 0.35);
        for (int y = horizon - bh; y < horizon; ++y)
            for (int x = bx; x < bx + bw; ++x) put(y, x, br, bg, bb, kBuilding);
    }

    // signs: bright discs or diamonds in the upper half
    std::vector<int> sign_xs;
    const int n_signs = ui(spec.min_signs, spec.max_signs);
    for (int sgn = 0; sgn < n_signs; ++sgn) {
        const int rad = ui(2, 4);
        const int sy = ui(rad + 1, std::max(horizon - rad - 2, rad + 2));
        const int sx = ui(rad + 1, W - rad - 2);
        sign_xs.push_back(sx);
        const bool diamond = ui(0, 1) == 1;
        const double sr = u(0.8, 0.95), sg2 = u(0.1, 0.85), sb = u(0.05, 0.2);
        for (int y = sy - rad; y <= sy + rad; ++y)
            for (int x = sx - rad; x <= sx + rad; ++x) {
                if (y < 0 || y >= H || x < 0 || x >= W) continue;
                const int dy = y - sy, dx = x - sx;
                const bool inside = diamond ? (std::abs(dy) + std::abs(dx) <= rad)
                                            : (dy * dy + dx * dx <= rad * rad);
                if (inside) put(y, x, sr, sg2, sb, kSign);
            }
    }

    // poles: 1-2 px wide vertical lines from below the horizon upward,
    // kept clear of sign columns so both classes always survive
    const int n_poles = ui(spec.min_poles, spec.max_poles);
    for (int p = 0; p < n_poles; ++p) {
        const int pw = ui(1, 2);
        int px = ui(2, W - 3 - pw);
        for (int attempt = 0; attempt < 16; ++attempt) {
            bool clear = true;
            for (int sx : sign_xs)
                if (std::abs(px - sx) < 7) clear = false;
            if (clear) break;
            px = ui(2, W - 3 - pw);
        }
        const int top = ui(2, std::max(horizon / 2, 3));
        const int bottom = std::min(H - 1, horizon + ui(1, std::max((H - horizon) / 3, 2)));
        const double pv = u(0.12, 0.22);
        for (int y = top; y <= bottom; ++y)
            for (int x = px; x < px + pw; ++x) put(y, x, pv, pv, pv, kPole);
    }

    if (spec.illumination != 1.0) s.image.scale(spec.illumination);
    return s;
}

// ---- dataset I/O ---------------------------------------------------------------

inline ImageU8 tensor_to_u8(const Tensor& img) {
    ImageU8 out;
    out.h = int(img.dim(0));
    out.w = int(img.dim(1));
    out.channels = img.rank() == 3 ? int(img.dim(2)) : 1;
    out.pixels.resize(img.size());
    for (std::size_t i = 0; i < img.size(); ++i) {
        const double v = std::clamp(img[i], 0.0, 1.0);
        out.pixels[i] = std::uint8_t(std::lround(v * 255.0));
    }
    return out;
}

inline Tensor u8_to_tensor(const ImageU8& img) {
    Tensor out = img.channels == 1
                     ? Tensor({std::size_t(img.h), std::size_t(img.w)})
                     : Tensor({std::size_t(img.h), std::size_t(img.w), std::size_t(img.channels)});
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = double(img.pixels[i]) / 255.0;
    return out;
}

inline void write_dataset(const std::filesystem::path& root, const std::vector<Sample>& samples,
                          const std::string& stem_prefix = "scene") {
    namespace fs = std::filesystem;
    fs::create_directories(root / "images");
    fs::create_directories(root / "labels");
    for (std::size_t i = 0; i < samples.size(); ++i) {
        char stem[64];
        std::snprintf(stem, sizeof stem, "%s_%05zu.png", stem_prefix.c_str(), i);
        png_write((root / "images" / stem).string(), tensor_to_u8(samples[i].image));
        ImageU8 lbl;
        lbl.h = samples[i].labels.h;
        lbl.w = samples[i].labels.w;
        lbl.channels = 1;
        lbl.pixels.resize(samples[i].labels.size());
        for (std::size_t p = 0; p < lbl.pixels.size(); ++p)
            lbl.pixels[p] = std::uint8_t(samples[i].labels.v[p]);
        png_write((root / "labels" / stem).string(), lbl);
    }
}

// Loads `root/images/*.png` + `root/labels/*.png`, matched by filename and
// sorted. Images map to [0,1] by /255; labels must be valid class ids or
// the ignore value.
inline std::vector<Sample> load_dataset(const std::filesystem::path& root, int num_classes) {
    namespace fs = std::filesystem;
    auto list_pngs = [](const fs::path& dir) {
        std::vector<std::string> names;
        if (fs::exists(dir))
            for (const auto& e : fs::directory_iterator(dir))
                if (e.path().extension() == ".png") names.push_back(e.path().filename().string());
        std::sort(names.begin(), names.end());
        return names;
    };
    const auto images = list_pngs(root / "images");
    const auto labels = list_pngs(root / "labels");

    std::vector<std::string> orphans;
    std::set_symmetric_difference(images.begin(), images.end(), labels.begin(), labels.end(),
                                  std::back_inserter(orphans));
    if (!orphans.empty()) {
        std::string msg = "load_dataset: unmatched files:";
        for (const auto& o : orphans) msg += " " + o;
        throw ConfigError(msg);
    }
    if (images.empty())
        std::cerr << "warning: load_dataset: no image/label pairs under " << root << "\n";

    std::vector<Sample> out;
    out.reserve(images.size());
    for (const auto& name : images) {
        ImageU8 img = png_read((root / "images" / name).string());
        if (img.channels != 3)
            throw ConfigError("load_dataset: image " + name + " is not 8-bit RGB");
        ImageU8 lbl = png_read((root / "labels" / name).string());
        if (lbl.channels != 1)
            throw ConfigError("load_dataset: label " + name + " is not single-channel");
        if (lbl.h != img.h || lbl.w != img.w)
            throw ConfigError("load_dataset: image/label sizes differ for " + name);
        Sample s;
        s.image = u8_to_tensor(img);
        s.labels = LabelMap(lbl.h, lbl.w);
        for (std::size_t p = 0; p < lbl.pixels.size(); ++p) s.labels.v[p] = lbl.pixels[p];
        try {
            s.labels.validate_classes(num_classes);
        } catch (const std::exception& e) {
            throw ConfigError("load_dataset: " + name + ": " + e.what());
        }
        out.push_back(std::move(s));
    }
    return out;
}

// ---- corruption suite ------------------------------------------------------------

struct CorruptionSpec {
    enum class Kind { Blur, Noise, Bitdepth, ExposureShift };
    Kind kind = Kind::Blur;
    double defocus_waves = 0.0;  // Blur
    NoiseParams noise{0.0, 0.0};  // Noise
    int bits = 16;               // Bitdepth; >= 16 is the full-precision no-op
    double gain = 1.0;           // ExposureShift

    static CorruptionSpec blur(double waves) {
        CorruptionSpec s;
        s.kind = Kind::Blur;
        s.defocus_waves = waves;
        return s;
    }
    static CorruptionSpec gaussian_noise(double sigma_s, double sigma_r) {
        CorruptionSpec s;
        s.kind = Kind::Noise;
        s.noise = NoiseParams{sigma_s, sigma_r};
        return s;
    }
    static CorruptionSpec bitdepth(int b) {
        CorruptionSpec s;
        s.kind = Kind::Bitdepth;
        s.bits = b;
        return s;
    }
    static CorruptionSpec exposure_shift(double g) {
        CorruptionSpec s;
        s.kind = Kind::ExposureShift;
        s.gain = g;
        return s;
    }

    void validate() const {
        switch (kind) {
            case Kind::Blur:
                if (defocus_waves < 0.0) throw ConfigError("corrupt: negative blur severity");
                break;
            case Kind::Noise:
                noise.validate();
                break;
            case Kind::Bitdepth:
                if (bits < 1) throw ConfigError("corrupt: bits must be >= 1");
                break;
            case Kind::ExposureShift:
                if (!(gain > 0.0)) throw ConfigError("corrupt: gain must be > 0");
                break;
        }
    }
};

// Applies one sensor-style degradation, reusing the pipeline stages so
// train-time and eval-time corruption share the same math. Zero severity is
// a bit-exact identity for every kind.
inline Tensor corrupt(const Tensor& image, const CorruptionSpec& spec, const RngKey& key) {
    spec.validate();
    if (image.rank() != 3 || image.dim(2) != 3)
        throw ShapeError("corrupt: expected (H, W, 3) image");
    switch (spec.kind) {
        case CorruptionSpec::Kind::Blur: {
            if (spec.defocus_waves == 0.0) return image;
            std::vector<double> coeffs(4, 0.0);
            coeffs[3] = spec.defocus_waves;  // Noll 4
            PsfGrid grid;
            grid.kernels.push_back(synthesize_psf(coeffs, 64, 21));
            return render(image, grid);
        }
        case CorruptionSpec::Kind::Noise: {
            if (spec.noise.sigma_s == 0.0 && spec.noise.sigma_r == 0.0) return image;
            Tensor out = add_noise(image, spec.noise, key);
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(out[i], 0.0, 1.0);
            return out;
        }
        case CorruptionSpec::Kind::Bitdepth: {
            if (spec.bits >= 16) return image;
            Tensor out = image;
            const int H = int(image.dim(0)), W = int(image.dim(1));
            for (int c = 0; c < 3; ++c) {
                Tensor plane({std::size_t(H), std::size_t(W)});
                for (int y = 0; y < H; ++y)
                    for (int x = 0; x < W; ++x)
                        plane.at(std::size_t(y), std::size_t(x)) =
                            image.at(std::size_t(y), std::size_t(x), std::size_t(c));
                plane = quantize(plane, QuantConfig{spec.bits});
                for (int y = 0; y < H; ++y)
                    for (int x = 0; x < W; ++x)
                        out.at(std::size_t(y), std::size_t(x), std::size_t(c)) =
                            plane.at(std::size_t(y), std::size_t(x));
            }
            return out;
        }
        case CorruptionSpec::Kind::ExposureShift: {
            if (spec.gain == 1.0) return image;
            Tensor out = image;
            for (std::size_t i = 0; i < out.size(); ++i)
                out[i] = std::clamp(spec.gain * out[i], 0.0, 1.0);
            return out;
        }
    }
    throw ConfigError("corrupt: unknown kind");
}

}  // namespace rawpipe
