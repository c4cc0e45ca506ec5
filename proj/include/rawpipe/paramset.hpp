#pragma once

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "rawpipe/tensor.hpp"

namespace rawpipe {

struct Param {
    Tensor value;
    std::string group;      // one of: optics, sensor, network
    bool trainable = true;  // structurally optimizable at all
    bool frozen = false;    // temporarily excluded from updates
};

// Named parameter store shared by every stage of the pipeline. Iteration
// order is insertion order so checkpoints and gradient walks are stable.
class ParamSet {
public:
    void add(const std::string& name, Tensor value, const std::string& group,
             bool trainable = true, bool frozen = false) {
        if (map_.count(name))
            throw std::invalid_argument("ParamSet: duplicate parameter '" + name + "'");
        order_.push_back(name);
        map_[name] = Param{std::move(value), group, trainable, frozen};
    }

    bool has(const std::string& name) const { return map_.count(name) != 0; }

    Param& at(const std::string& name) {
        auto it = map_.find(name);
        if (it == map_.end())
            throw std::out_of_range("ParamSet: no parameter '" + name + "'");
        return it->second;
    }
    const Param& at(const std::string& name) const {
        auto it = map_.find(name);
        if (it == map_.end())
            throw std::out_of_range("ParamSet: no parameter '" + name + "'");
        return it->second;
    }

    Tensor& value(const std::string& name) { return at(name).value; }
    const Tensor& value(const std::string& name) const { return at(name).value; }

    const std::vector<std::string>& names() const { return order_; }
    std::size_t size() const { return order_.size(); }

    void set_frozen_group(const std::string& group, bool frozen) {
        for (const auto& n : order_) {
            Param& p = map_[n];
            if (p.group == group) p.frozen = frozen;
        }
    }

    void set_trainable_group(const std::string& group, bool trainable) {
        for (const auto& n : order_) {
            Param& p = map_[n];
            if (p.group == group) p.trainable = trainable;
        }
    }

    std::vector<std::string> group_names(const std::string& group) const {
        std::vector<std::string> out;
        for (const auto& n : order_)
            if (map_.at(n).group == group) out.push_back(n);
        return out;
    }

    // Same structure, all values zero. Used for gradient accumulators.
    ParamSet zeros_like() const {
        ParamSet g;
        for (const auto& n : order_) {
            const Param& p = map_.at(n);
            g.add(n, Tensor(p.value.shape()), p.group, p.trainable, p.frozen);
        }
        return g;
    }

    void accumulate(const ParamSet& grads, double scale = 1.0) {
        for (const auto& n : grads.order_) {
            if (!has(n))
                throw std::invalid_argument("ParamSet::accumulate: unknown parameter '" + n + "'");
            value(n).add_scaled(grads.at(n).value, scale);
        }
    }

    void zero_all() {
        for (const auto& n : order_) map_[n].value.fill(0.0);
    }

private:
    std::vector<std::string> order_;
    std::map<std::string, Param> map_;
};

}  // namespace rawpipe
