#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "rawpipe/optim.hpp"
#include "rawpipe/paramset.hpp"

namespace rawpipe {

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are little-endian; big-endian hosts unsupported");

// A checkpoint is a directory holding a text manifest plus one f32 blob with
// every parameter and optimizer-moment tensor in manifest order.
namespace checkpoint {

inline constexpr const char* kManifestFile = "manifest.txt";
inline constexpr const char* kBlobFile = "tensors.f32";

inline void save(const std::filesystem::path& dir, const ParamSet& params, const AdamW* opt,
                 std::size_t step) {
    std::filesystem::create_directories(dir);
    std::ostringstream man;
    man << "format_version 1\n";
    man << "dtype f32\n";
    man << "step " << step << "\n";

    std::vector<float> blob;
    auto push_tensor = [&blob](const Tensor& t) {
        for (std::size_t i = 0; i < t.size(); ++i) blob.push_back(float(t[i]));
    };

    for (const auto& name : params.names()) {
        const Param& p = params.at(name);
        man << "param " << name << " group " << p.group << " trainable " << int(p.trainable)
            << " frozen " << int(p.frozen) << " shape";
        for (std::size_t d : p.value.shape()) man << " " << d;
        man << "\n";
        push_tensor(p.value);
    }
    if (opt) {
        AdamW& o = const_cast<AdamW&>(*opt);
        for (const auto& name : params.names()) {
            if (!o.has_moments(name)) continue;
            std::size_t t = 0;
            auto it = o.per_param_steps().find(name);
            if (it != o.per_param_steps().end()) t = it->second;
            man << "moment " << name << " steps " << t << " shape";
            for (std::size_t d : o.m1(name).shape()) man << " " << d;
            man << "\n";
            push_tensor(o.m1(name));
            push_tensor(o.m2(name));
        }
    }

    {
        std::ofstream f(dir / kManifestFile, std::ios::binary);
        if (!f) throw std::runtime_error("checkpoint::save: cannot write manifest in " + dir.string());
        f << man.str();
    }
    {
        std::ofstream f(dir / kBlobFile, std::ios::binary);
        if (!f) throw std::runtime_error("checkpoint::save: cannot write blob in " + dir.string());
        f.write(reinterpret_cast<const char*>(blob.data()),
                std::streamsize(blob.size() * sizeof(float)));
    }
}

struct LoadResult {
    ParamSet params;
    std::size_t step = 0;
};

// Loads parameters (and optimizer moments if `opt` is given). Tensor values
// come back as double(float), so save(load(x)) reproduces x bit for bit.
inline LoadResult load(const std::filesystem::path& dir, AdamW* opt = nullptr) {
    std::ifstream man(dir / kManifestFile);
    if (!man) throw std::runtime_error("checkpoint::load: missing manifest in " + dir.string());
    std::ifstream blob(dir / kBlobFile, std::ios::binary);
    if (!blob) throw std::runtime_error("checkpoint::load: missing blob in " + dir.string());

    auto read_floats = [&blob, &dir](Tensor& t) {
        std::vector<float> buf(t.size());
        blob.read(reinterpret_cast<char*>(buf.data()), std::streamsize(buf.size() * sizeof(float)));
        if (!blob) throw std::runtime_error("checkpoint::load: blob truncated in " + dir.string());
        for (std::size_t i = 0; i < t.size(); ++i) t[i] = double(buf[i]);
    };

    LoadResult out;
    std::string line;
    while (std::getline(man, line)) {
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::string kind;
        ss >> kind;
        if (kind == "format_version") {
            int v = 0;
            ss >> v;
            if (v != 1) throw std::runtime_error("checkpoint::load: unsupported format version");
        } else if (kind == "dtype") {
            std::string d;
            ss >> d;
            if (d != "f32") throw std::runtime_error("checkpoint::load: unsupported dtype " + d);
        } else if (kind == "step") {
            ss >> out.step;
        } else if (kind == "param") {
            std::string name, kw, group, shape_kw;
            int trainable = 1, frozen = 0;
            ss >> name >> kw >> group;
            ss >> kw >> trainable >> kw >> frozen >> shape_kw;
            std::vector<std::size_t> shape;
            std::size_t d;
            while (ss >> d) shape.push_back(d);
            Tensor t(shape);
            read_floats(t);
            out.params.add(name, std::move(t), group, trainable != 0, frozen != 0);
        } else if (kind == "moment") {
            std::string name, kw;
            std::size_t steps = 0;
            ss >> name >> kw >> steps >> kw;
            std::vector<std::size_t> shape;
            std::size_t d;
            while (ss >> d) shape.push_back(d);
            Tensor m1(shape), m2(shape);
            read_floats(m1);
            read_floats(m2);
            if (opt) {
                opt->m1_state()[name] = std::move(m1);
                opt->m2_state()[name] = std::move(m2);
                opt->per_param_steps()[name] = steps;
            }
        } else {
            throw std::runtime_error("checkpoint::load: unknown manifest entry '" + kind + "'");
        }
    }
    if (opt) opt->set_step_count(out.step);
    return out;
}

}  // namespace checkpoint
}  // namespace rawpipe
