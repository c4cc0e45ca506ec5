#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

namespace rawpipe {

inline constexpr int kIgnoreLabel = 255;

struct LabelMap {
    int h = 0, w = 0;
    std::vector<std::int32_t> v;

    LabelMap() = default;
    LabelMap(int height, int width, std::int32_t fill = 0)
        : h(height), w(width), v(std::size_t(height) * std::size_t(width), fill) {}

    std::int32_t& at(int y, int x) { return v[std::size_t(y) * std::size_t(w) + std::size_t(x)]; }
    std::int32_t at(int y, int x) const {
        return v[std::size_t(y) * std::size_t(w) + std::size_t(x)];
    }
    std::size_t size() const { return v.size(); }

    void validate_classes(int num_classes) const {
        for (std::int32_t lbl : v)
            if (lbl != kIgnoreLabel && (lbl < 0 || lbl >= num_classes))
                throw std::invalid_argument("label value " + std::to_string(lbl) +
                                            " outside [0," + std::to_string(num_classes) +
                                            ") and not ignore");
    }
};

}  // namespace rawpipe
