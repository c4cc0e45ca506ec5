#pragma once

#include <algorithm>
#include <numeric>
#include <vector>

#include "rawpipe/labels.hpp"
#include "rawpipe/rng.hpp"
#include "rawpipe/tensor.hpp"

namespace testutil {

using rawpipe::LabelMap;
using rawpipe::RngKey;
using rawpipe::Tensor;

// Jaccard-loss set function for a set S of "errors": 1 - |GT ∩ S^c| / |GT ∪ S|.
inline double jaccard_delta(const std::vector<char>& gt, const std::vector<char>& in_s) {
    int inter = 0, uni = 0;
    for (std::size_t i = 0; i < gt.size(); ++i) {
        if (gt[i] && !in_s[i]) ++inter;
        if (gt[i] || in_s[i]) ++uni;
    }
    if (uni == 0) return 0.0;
    return 1.0 - double(inter) / double(uni);
}

// Lovasz extension evaluated directly from the set function: sort errors
// descending, telescope over nested prefix sets. Independent of the cumsum
// shortcut used by the implementation.
inline double lovasz_extension_bruteforce(const std::vector<double>& errors,
                                          const std::vector<char>& gt) {
    const std::size_t n = errors.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&errors](std::size_t a, std::size_t b) {
        if (errors[a] != errors[b]) return errors[a] > errors[b];
        return a < b;
    });
    std::vector<char> in_s(n, 0);
    double loss = 0.0, prev = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
        in_s[order[k]] = 1;
        const double d = jaccard_delta(gt, in_s);
        loss += errors[order[k]] * (d - prev);
        prev = d;
    }
    return loss;
}

// Full brute-force Lovasz-softmax on a flat instance: average the extension
// over classes present in the labels.
inline double lovasz_softmax_bruteforce(const Tensor& probs, const LabelMap& labels) {
    const int C = int(probs.dim(2));
    std::vector<std::size_t> valid;
    for (std::size_t i = 0; i < labels.size(); ++i)
        if (labels.v[i] != rawpipe::kIgnoreLabel) valid.push_back(i);
    double total = 0.0;
    int present = 0;
    for (int c = 0; c < C; ++c) {
        bool has = false;
        for (std::size_t i : valid) has = has || labels.v[i] == c;
        if (!has) continue;
        ++present;
        std::vector<double> errors(valid.size());
        std::vector<char> gt(valid.size());
        for (std::size_t k = 0; k < valid.size(); ++k) {
            const double pc = probs[valid[k] * std::size_t(C) + std::size_t(c)];
            gt[k] = char(labels.v[valid[k]] == c);
            errors[k] = gt[k] ? 1.0 - pc : pc;
        }
        total += lovasz_extension_bruteforce(errors, gt);
    }
    return present ? total / double(present) : 0.0;
}

// Random per-pixel simplex points via softmax of gaussian logits.
inline Tensor random_probs(std::size_t h, std::size_t w, std::size_t c, std::uint64_t seed) {
    RngKey key = RngKey{}.fold(0x9b0b5).fold(seed);
    Tensor probs({h, w, c});
    for (std::size_t p = 0; p < h * w; ++p) {
        double mx = -1e300;
        std::vector<double> logits(c);
        for (std::size_t k = 0; k < c; ++k) {
            logits[k] = 1.5 * key.gauss(p * c + k);
            mx = std::max(mx, logits[k]);
        }
        double sum = 0.0;
        for (std::size_t k = 0; k < c; ++k) {
            logits[k] = std::exp(logits[k] - mx);
            sum += logits[k];
        }
        for (std::size_t k = 0; k < c; ++k) probs[p * c + k] = logits[k] / sum;
    }
    return probs;
}

inline LabelMap random_labels(int h, int w, int c, std::uint64_t seed, double ignore_frac = 0.0) {
    RngKey key = RngKey{}.fold(0x1ab31).fold(seed);
    LabelMap lm(h, w);
    for (std::size_t i = 0; i < lm.size(); ++i) {
        if (ignore_frac > 0.0 && key.uniform(2 * i) < ignore_frac)
            lm.v[i] = rawpipe::kIgnoreLabel;
        else
            lm.v[i] = int(key.uniform_index(2 * i + 1, std::uint64_t(c)));
    }
    return lm;
}

}  // namespace testutil
