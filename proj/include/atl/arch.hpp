#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "atl/error.hpp"

namespace atl {

// Full architectural description of a ViT, including the optional
// teacher-native components (LayerScale, embedding pre-norm, relative
// position bias, register tokens).
struct ArchSpec {
    int depth = 6;
    int embed_dim = 64;
    int num_heads = 4;
    int patch_size = 4;
    int image_size = 32;
    int num_classes = 10;
    std::optional<double> layer_scale;  // gamma init value; nullopt = off
    bool pre_layer_norm = false;
    bool relative_position_bias = false;
    int num_registers = 0;
    double drop_path_rate = 0.0;

    int grid() const { return image_size / patch_size; }
    int num_patches() const { return grid() * grid(); }
    int tokens() const { return 1 + num_registers + num_patches(); }
    int head_dim() const { return embed_dim / num_heads; }
    int mlp_dim() const { return 4 * embed_dim; }

    void validate() const {
        if (depth < 1) throw config_error("ArchSpec: depth must be positive");
        if (embed_dim < 1) throw config_error("ArchSpec: embed_dim must be positive");
        if (num_heads < 1) throw config_error("ArchSpec: num_heads must be positive");
        if (embed_dim % num_heads != 0)
            throw config_error("ArchSpec: embed_dim must be divisible by num_heads");
        if (patch_size < 1 || image_size < 1)
            throw config_error("ArchSpec: patch_size and image_size must be positive");
        if (image_size % patch_size != 0)
            throw config_error("ArchSpec: image_size must be divisible by patch_size");
        if (num_classes < 1) throw config_error("ArchSpec: num_classes must be positive");
        if (layer_scale && *layer_scale <= 0.0)
            throw config_error("ArchSpec: layer_scale init must be positive when present");
        if (num_registers < 0) throw config_error("ArchSpec: num_registers must be >= 0");
        if (drop_path_rate < 0.0 || drop_path_rate >= 1.0)
            throw config_error("ArchSpec: drop_path_rate must lie in [0,1)");
    }

    bool operator==(const ArchSpec&) const = default;
};

// Default desk-scale spec: trains in minutes on CPU while keeping every
// mechanism intact.
inline ArchSpec vit_micro() { return ArchSpec{}; }

// Position of the special tokens inside the sequence: class token first,
// then registers, then the patch grid.
struct TokenLayout {
    int cls_index = 0;
    int reg_begin = 1;
    int reg_end = 1;    // exclusive
    int patch_begin = 1;
    int tokens = 0;

    int num_registers() const { return reg_end - reg_begin; }
    int num_patches() const { return tokens - patch_begin; }
    bool operator==(const TokenLayout&) const = default;
};

inline TokenLayout token_layout(const ArchSpec& s) {
    TokenLayout l;
    l.cls_index = 0;
    l.reg_begin = 1;
    l.reg_end = 1 + s.num_registers;
    l.patch_begin = l.reg_end;
    l.tokens = s.tokens();
    return l;
}

// Number of relative-position-bias table rows: one slot per 2-D patch
// offset plus three dedicated slots for pairs involving non-patch tokens
// (query-is-special, key-is-special, both-special).
inline int relpos_table_rows(const ArchSpec& s) {
    int g = s.grid();
    return (2 * g - 1) * (2 * g - 1) + 3;
}

// The parameter-shape table: name -> shape, fully determined by the spec.
// This is the contract the checkpoint format serializes; it is also
// documented in docs/parameter-shapes.md.
inline std::map<std::string, std::vector<int>> parameter_shapes(const ArchSpec& s) {
    std::map<std::string, std::vector<int>> t;
    const int D = s.embed_dim, P = s.patch_size, C = s.num_classes, H = s.mlp_dim();
    t["patch_embed.kernel"] = {D, 3, P, P};
    t["patch_embed.bias"] = {D};
    t["cls_token"] = {D};
    if (s.num_registers > 0) t["register_tokens"] = {s.num_registers, D};
    t["pos_embed"] = {1 + s.num_patches(), D};
    if (s.pre_layer_norm) {
        t["pre_norm.weight"] = {D};
        t["pre_norm.bias"] = {D};
    }
    for (int i = 0; i < s.depth; ++i) {
        std::string b = "block" + std::to_string(i) + ".";
        t[b + "norm1.weight"] = {D};
        t[b + "norm1.bias"] = {D};
        t[b + "attn.q.weight"] = {D, D};
        t[b + "attn.q.bias"] = {D};
        t[b + "attn.k.weight"] = {D, D};
        t[b + "attn.k.bias"] = {D};
        t[b + "attn.v.weight"] = {D, D};
        t[b + "attn.v.bias"] = {D};
        t[b + "attn.proj.weight"] = {D, D};
        t[b + "attn.proj.bias"] = {D};
        if (s.relative_position_bias)
            t[b + "attn.relpos_table"] = {relpos_table_rows(s), s.num_heads};
        if (s.layer_scale) {
            t[b + "gamma1"] = {D};
            t[b + "gamma2"] = {D};
        }
        t[b + "norm2.weight"] = {D};
        t[b + "norm2.bias"] = {D};
        t[b + "mlp.fc1.weight"] = {H, D};
        t[b + "mlp.fc1.bias"] = {H};
        t[b + "mlp.fc2.weight"] = {D, H};
        t[b + "mlp.fc2.bias"] = {D};
    }
    t["final_norm.weight"] = {D};
    t["final_norm.bias"] = {D};
    t["head.weight"] = {C, D};
    t["head.bias"] = {C};
    return t;
}

}  // namespace atl
