#pragma once

#include <cstdint>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "rawpipe/image_io.hpp"
#include "rawpipe/labels.hpp"
#include "rawpipe/stage.hpp"

namespace rawpipe {

// Rows are ground truth, columns predictions; ignore pixels are never
// counted.
class ConfusionMatrix {
public:
    explicit ConfusionMatrix(int num_classes)
        : c_(num_classes), counts_(std::size_t(num_classes) * std::size_t(num_classes), 0) {}

    int num_classes() const { return c_; }
    std::int64_t at(int truth, int pred) const {
        return counts_[std::size_t(truth) * std::size_t(c_) + std::size_t(pred)];
    }
    std::int64_t& at(int truth, int pred) {
        return counts_[std::size_t(truth) * std::size_t(c_) + std::size_t(pred)];
    }

    std::int64_t total() const {
        std::int64_t t = 0;
        for (auto v : counts_) t += v;
        return t;
    }

    ConfusionMatrix& operator+=(const ConfusionMatrix& o) {
        if (o.c_ != c_) throw ShapeError("confusion: class count mismatch");
        for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += o.counts_[i];
        return *this;
    }

private:
    int c_;
    std::vector<std::int64_t> counts_;
};

inline void accumulate(ConfusionMatrix& cm, const LabelMap& pred, const LabelMap& truth) {
    if (pred.h != truth.h || pred.w != truth.w)
        throw ShapeError("accumulate: prediction and truth shapes disagree");
    const int C = cm.num_classes();
    for (std::size_t i = 0; i < truth.size(); ++i) {
        const int t = truth.v[i];
        if (t == kIgnoreLabel) continue;
        const int p = pred.v[i];
        if (t < 0 || t >= C || p < 0 || p >= C)
            throw ConfigError("accumulate: class index out of range");
        ++cm.at(t, p);
    }
}

struct MiouResult {
    double mean_iou = 0.0;
    std::vector<double> per_class;   // NaN for classes absent from both
    std::vector<bool> class_present;
};

// IoU_c = tp / (row + col - tp); classes absent from both prediction and
// truth are excluded from the mean.
inline MiouResult miou(const ConfusionMatrix& cm) {
    const int C = cm.num_classes();
    MiouResult r;
    r.per_class.assign(std::size_t(C), std::nan(""));
    r.class_present.assign(std::size_t(C), false);
    double sum = 0.0;
    int n = 0;
    for (int c = 0; c < C; ++c) {
        std::int64_t row = 0, col = 0;
        for (int j = 0; j < C; ++j) {
            row += cm.at(c, j);
            col += cm.at(j, c);
        }
        const std::int64_t tp = cm.at(c, c);
        const std::int64_t denom = row + col - tp;
        if (denom == 0) continue;
        r.class_present[std::size_t(c)] = true;
        r.per_class[std::size_t(c)] = double(tp) / double(denom);
        sum += r.per_class[std::size_t(c)];
        ++n;
    }
    if (n == 0) throw ConfigError("miou: no class present in either prediction or truth");
    r.mean_iou = sum / double(n);
    return r;
}

inline double pixel_acc(const ConfusionMatrix& cm) {
    const std::int64_t total = cm.total();
    if (total == 0) throw ConfigError("pixel_acc: empty confusion matrix");
    std::int64_t diag = 0;
    for (int c = 0; c < cm.num_classes(); ++c) diag += cm.at(c, c);
    return double(diag) / double(total);
}

// ---- report emission ------------------------------------------------------------

inline void write_report_csv(const std::string& path, const ConfusionMatrix& cm,
                             const std::vector<std::string>* class_names = nullptr) {
    const MiouResult r = miou(cm);
    std::ofstream f(path);
    if (!f) throw std::runtime_error("write_report_csv: cannot open " + path);
    f << "class,iou\n";
    f << std::setprecision(17);
    for (int c = 0; c < cm.num_classes(); ++c) {
        const std::string name =
            class_names ? (*class_names)[std::size_t(c)] : ("class_" + std::to_string(c));
        f << name << ",";
        if (r.class_present[std::size_t(c)])
            f << r.per_class[std::size_t(c)];
        else
            f << "absent";
        f << "\n";
    }
    f << "mIoU," << r.mean_iou << "\n";
    f << "pixel_acc," << pixel_acc(cm) << "\n";
}

// Bar plot of per-class IoU as an RGB png; absent classes draw as empty
// slots.
inline void write_report_png(const std::string& path, const ConfusionMatrix& cm) {
    const MiouResult r = miou(cm);
    const int C = cm.num_classes();
    const int bar_w = 24, gap = 8, margin = 20, plot_h = 200;
    const int W = margin * 2 + C * bar_w + (C - 1) * gap;
    const int H = plot_h + margin * 2;
    ImageU8 img;
    img.h = H;
    img.w = W;
    img.channels = 3;
    img.pixels.assign(std::size_t(H) * std::size_t(W) * 3, 255);

    auto put = [&img](int y, int x, std::uint8_t rr, std::uint8_t gg, std::uint8_t bb) {
        if (y < 0 || y >= img.h || x < 0 || x >= img.w) return;
        const std::size_t o = (std::size_t(y) * std::size_t(img.w) + std::size_t(x)) * 3;
        img.pixels[o] = rr;
        img.pixels[o + 1] = gg;
        img.pixels[o + 2] = bb;
    };

    for (int x = margin; x < W - margin; ++x) put(H - margin, x, 0, 0, 0);  // axis
    for (int c = 0; c < C; ++c) {
        const int x0 = margin + c * (bar_w + gap);
        if (!r.class_present[std::size_t(c)]) {
            for (int x = x0; x < x0 + bar_w; ++x) put(H - margin - 1, x, 180, 180, 180);
            continue;
        }
        const int h = int(r.per_class[std::size_t(c)] * plot_h + 0.5);
        for (int y = 0; y < h; ++y)
            for (int x = x0; x < x0 + bar_w; ++x)
                put(H - margin - 1 - y, x, 60, 100, std::uint8_t(200 - (c * 29) % 120));
    }
    // mean line
    const int my = H - margin - 1 - int(r.mean_iou * plot_h + 0.5);
    for (int x = margin; x < W - margin; ++x)
        if (x % 4 < 2) put(my, x, 220, 40, 40);
    png_write(path, img);
}

}  // namespace rawpipe
