#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace rawpipe {

// Dense row-major array of doubles. All pipeline intermediates live in one
// of these; shape is dynamic so the same type carries scalars, H x W rasters
// and C x H x W feature maps.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0)
        : shape_(std::move(shape)), v_(count(shape_), fill) {}

    static Tensor scalar(double x) {
        Tensor t(std::vector<std::size_t>{});
        t.v_.assign(1, x);
        return t;
    }

    static Tensor from(std::vector<std::size_t> shape, std::vector<double> vals) {
        if (count(shape) != vals.size())
            throw std::invalid_argument("Tensor::from: shape does not match value count");
        Tensor t;
        t.shape_ = std::move(shape);
        t.v_ = std::move(vals);
        return t;
    }

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t size() const { return v_.size(); }
    bool empty() const { return v_.empty(); }

    double* data() { return v_.data(); }
    const double* data() const { return v_.data(); }

    double& operator[](std::size_t i) { return v_[i]; }
    double operator[](std::size_t i) const { return v_[i]; }

    // 2-d and 3-d accessors, row-major.
    double& at(std::size_t i, std::size_t j) { return v_[i * shape_[1] + j]; }
    double at(std::size_t i, std::size_t j) const { return v_[i * shape_[1] + j]; }
    double& at(std::size_t i, std::size_t j, std::size_t k) {
        return v_[(i * shape_[1] + j) * shape_[2] + k];
    }
    double at(std::size_t i, std::size_t j, std::size_t k) const {
        return v_[(i * shape_[1] + j) * shape_[2] + k];
    }

    double item() const {
        if (v_.size() != 1) throw std::logic_error("Tensor::item: not a scalar");
        return v_[0];
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    bool all_finite() const {
        for (double x : v_)
            if (!std::isfinite(x)) return false;
        return true;
    }

    void fill(double x) { std::fill(v_.begin(), v_.end(), x); }

    void add_scaled(const Tensor& o, double a) {
        if (!same_shape(o)) throw std::invalid_argument("Tensor::add_scaled: shape mismatch");
        for (std::size_t i = 0; i < v_.size(); ++i) v_[i] += a * o.v_[i];
    }

    void scale(double a) {
        for (double& x : v_) x *= a;
    }

    double sum() const { return std::accumulate(v_.begin(), v_.end(), 0.0); }
    double mean() const { return v_.empty() ? 0.0 : sum() / double(v_.size()); }
    double min() const { return *std::min_element(v_.begin(), v_.end()); }
    double max() const { return *std::max_element(v_.begin(), v_.end()); }

    double dot(const Tensor& o) const {
        if (!same_shape(o)) throw std::invalid_argument("Tensor::dot: shape mismatch");
        double s = 0.0;
        for (std::size_t i = 0; i < v_.size(); ++i) s += v_[i] * o.v_[i];
        return s;
    }

    double l2norm() const { return std::sqrt(dot(*this)); }

    static std::size_t count(const std::vector<std::size_t>& shape) {
        std::size_t n = 1;
        for (std::size_t d : shape) n *= d;
        return n;
    }

    static std::string shape_str(const std::vector<std::size_t>& shape) {
        std::string s = "(";
        for (std::size_t i = 0; i < shape.size(); ++i) {
            if (i) s += ",";
            s += std::to_string(shape[i]);
        }
        return s + ")";
    }

private:
    std::vector<std::size_t> shape_;
    std::vector<double> v_;
};

inline Tensor zeros_like(const Tensor& t) { return Tensor(t.shape()); }

}  // namespace rawpipe
