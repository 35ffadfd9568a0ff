#pragma once

#include <map>
#include <set>
#include <string>

#include "atl/arch.hpp"
#include "atl/rng.hpp"
#include "atl/tensor.hpp"

namespace atl {

struct Model {
    ArchSpec spec;
    std::map<std::string, Tensor> params;  // ordered: deterministic iteration
    std::set<std::string> frozen_names;

    Tensor& p(const std::string& name) {
        auto it = params.find(name);
        if (it == params.end()) throw dimension_error("unknown parameter: " + name);
        return it->second;
    }
    const Tensor& p(const std::string& name) const {
        auto it = params.find(name);
        if (it == params.end()) throw dimension_error("unknown parameter: " + name);
        return it->second;
    }
    bool has(const std::string& name) const { return params.count(name) > 0; }
    bool frozen(const std::string& name) const { return frozen_names.count(name) > 0; }
};

// Deterministic initialization given (spec, seed). Weights and embeddings
// are N(0, 0.02), norm weights 1, biases 0, gamma vectors filled with the
// configured LayerScale value, relative-position tables zero.
inline Model build_model(const ArchSpec& spec, uint64_t seed) {
    spec.validate();
    Model m;
    m.spec = spec;
    Rng rng(seed);
    auto shapes = parameter_shapes(spec);
    for (const auto& [name, shape] : shapes) m.params.emplace(name, Tensor(shape));

    auto fill_normal = [&](Tensor& t) {
        for (auto& v : t.data) v = static_cast<float>(rng.normal(0.0, 0.02));
    };
    auto fill_const = [](Tensor& t, float c) {
        std::fill(t.data.begin(), t.data.end(), c);
    };

    // Iterate the ordered map so the stream of draws is reproducible.
    for (auto& [name, t] : m.params) {
        if (name.ends_with("norm1.weight") || name.ends_with("norm2.weight") ||
            name == "final_norm.weight" || name == "pre_norm.weight") {
            fill_const(t, 1.0f);
        } else if (name.ends_with(".bias")) {
            fill_const(t, 0.0f);
        } else if (name.ends_with("gamma1") || name.ends_with("gamma2")) {
            fill_const(t, static_cast<float>(*spec.layer_scale));
        } else if (name.ends_with("relpos_table")) {
            fill_const(t, 0.0f);
        } else {
            fill_normal(t);
        }
    }
    return m;
}

}  // namespace atl
