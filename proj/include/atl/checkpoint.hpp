#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>

#include "atl/model.hpp"
#include "atl/vit.hpp"

namespace atl {

constexpr const char* kCkptMagic = "atl-ckpt/1";

struct CkptMeta {
    uint64_t seed = 0;
    long training_steps = 0;
    std::string format_version = kCkptMagic;
    std::string family = "scratch";
};

struct Checkpoint {
    ArchSpec arch;
    std::map<std::string, Tensor> parameters;
    CkptMeta metadata;
};

// ---------------------------------------------------------------------------
// ArchSpec <-> key/value text (shared with the experiment config format)
// ---------------------------------------------------------------------------

inline void arch_to_kv(const ArchSpec& s, std::map<std::string, std::string>& kv,
                       const std::string& prefix = "arch.") {
    auto put = [&](const std::string& k, const std::string& v) { kv[prefix + k] = v; };
    put("depth", std::to_string(s.depth));
    put("embed_dim", std::to_string(s.embed_dim));
    put("num_heads", std::to_string(s.num_heads));
    put("patch_size", std::to_string(s.patch_size));
    put("image_size", std::to_string(s.image_size));
    put("num_classes", std::to_string(s.num_classes));
    if (s.layer_scale) {
        std::ostringstream os;
        os << *s.layer_scale;
        put("layer_scale", os.str());
    }
    put("pre_layer_norm", s.pre_layer_norm ? "1" : "0");
    put("relative_position_bias", s.relative_position_bias ? "1" : "0");
    put("num_registers", std::to_string(s.num_registers));
    {
        std::ostringstream os;
        os << s.drop_path_rate;
        put("drop_path_rate", os.str());
    }
}

inline ArchSpec arch_from_kv(const std::map<std::string, std::string>& kv,
                             const std::string& prefix = "arch.") {
    ArchSpec s;
    auto get = [&](const std::string& k) -> const std::string* {
        auto it = kv.find(prefix + k);
        return it == kv.end() ? nullptr : &it->second;
    };
    auto geti = [&](const std::string& k, int& out) {
        if (auto* v = get(k)) out = std::stoi(*v);
    };
    geti("depth", s.depth);
    geti("embed_dim", s.embed_dim);
    geti("num_heads", s.num_heads);
    geti("patch_size", s.patch_size);
    geti("image_size", s.image_size);
    geti("num_classes", s.num_classes);
    if (auto* v = get("layer_scale")) s.layer_scale = std::stod(*v);
    if (auto* v = get("pre_layer_norm")) s.pre_layer_norm = (*v == "1" || *v == "true");
    if (auto* v = get("relative_position_bias"))
        s.relative_position_bias = (*v == "1" || *v == "true");
    geti("num_registers", s.num_registers);
    if (auto* v = get("drop_path_rate")) s.drop_path_rate = std::stod(*v);
    return s;
}

// ---------------------------------------------------------------------------
// Container I/O: text header, then raw little-endian float32 arrays
// ---------------------------------------------------------------------------

namespace detail {

inline void write_container(const std::string& path, const ArchSpec& arch,
                            const std::map<std::string, Tensor>& params, const CkptMeta& meta) {
    namespace fs = std::filesystem;
    fs::path target(path);
    if (target.has_parent_path()) fs::create_directories(target.parent_path());
    fs::path tmp = target;
    tmp += ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary);
        if (!f) throw config_error("cannot write checkpoint: " + path);
        f << kCkptMagic << "\n";
        std::map<std::string, std::string> kv;
        arch_to_kv(arch, kv);
        for (const auto& [k, v] : kv) f << k << " " << v << "\n";
        f << "meta.seed " << meta.seed << "\n";
        f << "meta.steps " << meta.training_steps << "\n";
        f << "meta.family " << meta.family << "\n";
        for (const auto& [name, t] : params) {
            f << "tensor " << name;
            for (int d : t.shape) f << " " << d;
            f << "\n";
        }
        f << "end\n";
        for (const auto& [name, t] : params)
            f.write(reinterpret_cast<const char*>(t.ptr()),
                    static_cast<std::streamsize>(t.numel() * sizeof(float)));
        if (!f) throw config_error("short write on checkpoint: " + path);
    }
    fs::rename(tmp, target);
}

inline Checkpoint read_container(const std::string& path, bool validate_shapes) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw config_error("cannot open checkpoint: " + path);
    std::string line;
    if (!std::getline(f, line)) throw corrupt_checkpoint_error("empty checkpoint: " + path);
    if (line != kCkptMagic)
        throw version_error("unknown checkpoint format version '" + line + "' in " + path);

    Checkpoint ck;
    std::map<std::string, std::string> kv;
    std::vector<std::pair<std::string, std::vector<int>>> order;
    while (std::getline(f, line)) {
        if (line == "end") break;
        std::istringstream is(line);
        std::string key;
        is >> key;
        if (key == "tensor") {
            std::string name;
            is >> name;
            std::vector<int> shape;
            int d;
            while (is >> d) shape.push_back(d);
            order.emplace_back(name, shape);
        } else {
            std::string rest;
            std::getline(is, rest);
            if (!rest.empty() && rest[0] == ' ') rest.erase(0, 1);
            kv[key] = rest;
        }
    }
    ck.arch = arch_from_kv(kv);
    if (auto it = kv.find("meta.seed"); it != kv.end()) ck.metadata.seed = std::stoull(it->second);
    if (auto it = kv.find("meta.steps"); it != kv.end())
        ck.metadata.training_steps = std::stol(it->second);
    if (auto it = kv.find("meta.family"); it != kv.end()) ck.metadata.family = it->second;

    for (auto& [name, shape] : order) {
        Tensor t(shape);
        f.read(reinterpret_cast<char*>(t.ptr()),
               static_cast<std::streamsize>(t.numel() * sizeof(float)));
        if (!f) throw corrupt_checkpoint_error("truncated tensor data for '" + name + "' in " + path);
        ck.parameters.emplace(name, std::move(t));
    }

    if (validate_shapes) {
        ck.arch.validate();
        auto expect = parameter_shapes(ck.arch);
        for (const auto& [name, shape] : expect) {
            auto it = ck.parameters.find(name);
            if (it == ck.parameters.end())
                throw corrupt_checkpoint_error("checkpoint missing parameter '" + name + "'");
            if (it->second.shape != shape)
                throw corrupt_checkpoint_error("checkpoint parameter '" + name + "' has shape " +
                                               shape_str(it->second.shape) + ", expected " +
                                               shape_str(shape));
        }
        for (const auto& [name, t] : ck.parameters)
            if (!expect.count(name))
                throw corrupt_checkpoint_error("checkpoint has unexpected parameter '" + name + "'");
    }
    return ck;
}

}  // namespace detail

inline void save_checkpoint(const Model& m, const std::string& path, CkptMeta meta = {}) {
    detail::write_container(path, m.spec, m.params, meta);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    return detail::read_container(path, /*validate_shapes=*/true);
}

// Raw load without validating names against the shape table; used by the
// import path for externally converted weights.
inline Checkpoint load_container_raw(const std::string& path) {
    return detail::read_container(path, /*validate_shapes=*/false);
}

inline Model model_from_checkpoint(const Checkpoint& ck) {
    Model m;
    m.spec = ck.arch;
    m.params = ck.parameters;
    return m;
}

// ---------------------------------------------------------------------------
// Bicubic interpolation (cubic convolution, a = -0.75, half-pixel centers)
// ---------------------------------------------------------------------------

namespace detail {

inline double cubic_weight(double x) {
    constexpr double a = -0.75;
    x = std::abs(x);
    if (x < 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
    if (x < 2.0) return (((x - 5.0) * x + 8.0) * x - 4.0) * a;
    return 0.0;
}

inline void resize_plane_bicubic(const float* src, int sh, int sw, float* dst, int dh, int dw) {
    const double sy = static_cast<double>(sh) / dh;
    const double sx = static_cast<double>(sw) / dw;
    auto clampi = [](int v, int lo, int hi) { return v < lo ? lo : (v > hi ? hi : v); };
    for (int y = 0; y < dh; ++y) {
        double fy = (y + 0.5) * sy - 0.5;
        int y0 = static_cast<int>(std::floor(fy));
        double wy[4];
        double wysum = 0.0;
        for (int t = 0; t < 4; ++t) {
            wy[t] = cubic_weight(fy - (y0 - 1 + t));
            wysum += wy[t];
        }
        for (int x = 0; x < dw; ++x) {
            double fx = (x + 0.5) * sx - 0.5;
            int x0 = static_cast<int>(std::floor(fx));
            double wx[4];
            double wxsum = 0.0;
            for (int t = 0; t < 4; ++t) {
                wx[t] = cubic_weight(fx - (x0 - 1 + t));
                wxsum += wx[t];
            }
            double acc = 0.0;
            for (int ty = 0; ty < 4; ++ty) {
                int yy = clampi(y0 - 1 + ty, 0, sh - 1);
                double rowacc = 0.0;
                for (int tx = 0; tx < 4; ++tx) {
                    int xx = clampi(x0 - 1 + tx, 0, sw - 1);
                    rowacc += wx[tx] * src[yy * sw + xx];
                }
                acc += wy[ty] * rowacc;
            }
            dst[y * dw + x] = static_cast<float>(acc / (wysum * wxsum));
        }
    }
}

}  // namespace detail

// Resamples the patch-embedding kernel between patch sizes (e.g. 14 -> 16),
// one bicubic pass per (out-channel, in-channel) plane. src == dst is the
// identity.
inline Tensor interpolate_patch_embedding(const Tensor& kernel, int dst) {
    if (kernel.shape.size() != 4 || kernel.shape[1] != 3)
        throw dimension_error("interpolate_patch_embedding: expected kernel [D,3,src,src], got " +
                              shape_str(kernel.shape));
    const int src = kernel.shape[2];
    if (kernel.shape[3] != src || src < 1 || dst < 1)
        throw config_error("interpolate_patch_embedding: sizes must be positive");
    if (src == dst) return kernel;
    const int D = kernel.shape[0];
    Tensor out({D, 3, dst, dst});
    for (int d = 0; d < D; ++d)
        for (int c = 0; c < 3; ++c)
            detail::resize_plane_bicubic(kernel.ptr() + (static_cast<size_t>(d) * 3 + c) * src * src,
                                         src, src,
                                         out.ptr() + (static_cast<size_t>(d) * 3 + c) * dst * dst,
                                         dst, dst);
    return out;
}

// Resamples the patch-grid portion of a position embedding between grids;
// the class-token row is copied through. pos is [1+g_src^2, D].
inline Tensor interpolate_pos_embed(const Tensor& pos, int grid_src, int grid_dst) {
    const int D = pos.shape[1];
    if (pos.shape[0] != 1 + grid_src * grid_src)
        throw dimension_error("interpolate_pos_embed: row count does not match source grid");
    if (grid_src == grid_dst) return pos;
    Tensor out({1 + grid_dst * grid_dst, D});
    out.mat(out.shape[0], D).row(0) = pos.mat(pos.shape[0], D).row(0);
    std::vector<float> splane(grid_src * grid_src), dplane(grid_dst * grid_dst);
    for (int d = 0; d < D; ++d) {
        for (int i = 0; i < grid_src * grid_src; ++i) splane[i] = pos.mat(pos.shape[0], D)(1 + i, d);
        detail::resize_plane_bicubic(splane.data(), grid_src, grid_src, dplane.data(), grid_dst,
                                     grid_dst);
        for (int i = 0; i < grid_dst * grid_dst; ++i) out.mat(out.shape[0], D)(1 + i, d) = dplane[i];
    }
    return out;
}

// ---------------------------------------------------------------------------
// Selective initialization (component-level decomposition)
// ---------------------------------------------------------------------------

enum class BlockPart { attention, mlp };

// Names belonging to one block part. Attention travels with its input norm
// (norm1), the MLP with norm2.
inline std::vector<std::string> block_part_names(const ArchSpec& s, int block, BlockPart part) {
    std::string b = "block" + std::to_string(block) + ".";
    std::vector<std::string> names;
    if (part == BlockPart::attention) {
        for (const char* n : {"norm1.weight", "norm1.bias", "attn.q.weight", "attn.q.bias",
                              "attn.k.weight", "attn.k.bias", "attn.v.weight", "attn.v.bias",
                              "attn.proj.weight", "attn.proj.bias"})
            names.push_back(b + n);
        if (s.relative_position_bias) names.push_back(b + "attn.relpos_table");
        if (s.layer_scale) names.push_back(b + "gamma1");
    } else {
        for (const char* n : {"norm2.weight", "norm2.bias", "mlp.fc1.weight", "mlp.fc1.bias",
                              "mlp.fc2.weight", "mlp.fc2.bias"})
            names.push_back(b + n);
        if (s.layer_scale) names.push_back(b + "gamma2");
    }
    return names;
}

inline void check_block_compat(const ArchSpec& t, const ArchSpec& s) {
    std::vector<std::string> bad;
    if (t.depth != s.depth) bad.push_back("depth");
    if (t.embed_dim != s.embed_dim) bad.push_back("embed_dim");
    if (t.num_heads != s.num_heads) bad.push_back("num_heads");
    if (!bad.empty()) {
        std::string msg = "teacher/student architecture mismatch:";
        for (auto& f : bad) msg += " " + f;
        throw incompat_error(msg);
    }
}

// Copies the requested block parts from the teacher into the student's
// parameters; everything stays trainable (full fine-tuning).
inline Model selective_init(Model student, const Checkpoint& teacher,
                            const std::set<BlockPart>& parts) {
    if (parts.empty()) throw config_error("selective_init: parts must be nonempty");
    check_block_compat(teacher.arch, student.spec);
    for (int bi = 0; bi < student.spec.depth; ++bi) {
        for (BlockPart part : parts) {
            for (const auto& name : block_part_names(student.spec, bi, part)) {
                auto src = teacher.parameters.find(name);
                if (src == teacher.parameters.end()) continue;  // component absent in teacher
                Tensor& dst = student.p(name);
                if (dst.shape != src->second.shape)
                    throw incompat_error("selective_init: shape mismatch for '" + name + "'");
                dst = src->second;
            }
        }
    }
    return student;
}

// ---------------------------------------------------------------------------
// External-checkpoint import via a rename manifest
// ---------------------------------------------------------------------------

// Manifest lines: "<external_name> <internal_name>"; blank lines and lines
// starting with '#' are ignored.
inline std::map<std::string, std::string> load_rename_manifest(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw config_error("cannot open rename manifest: " + path);
    std::map<std::string, std::string> m;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream is(line);
        std::string ext, in;
        if (is >> ext >> in) m[ext] = in;
    }
    return m;
}

// Builds a checkpoint for the target architecture from an externally
// converted container: tensors are renamed per the manifest, the patch
// kernel and position embedding are resampled when grids disagree, and
// anything the external file does not provide keeps a seeded random init.
inline Checkpoint import_checkpoint(const std::string& raw_path, const std::string& manifest_path,
                                    const ArchSpec& target, uint64_t seed = 0) {
    Checkpoint raw = load_container_raw(raw_path);
    auto rename = load_rename_manifest(manifest_path);
    Model base = build_model(target, seed);

    for (auto& [ext_name, t] : raw.parameters) {
        auto it = rename.find(ext_name);
        if (it == rename.end()) continue;
        const std::string& name = it->second;
        if (!base.has(name)) continue;
        Tensor value = t;
        if (name == "patch_embed.kernel" && value.shape.size() == 4 &&
            value.shape[2] != target.patch_size)
            value = interpolate_patch_embedding(value, target.patch_size);
        if (name == "pos_embed" && value.shape.size() == 2 &&
            value.shape[0] != 1 + target.num_patches()) {
            int gs = static_cast<int>(std::lround(std::sqrt(value.shape[0] - 1)));
            value = interpolate_pos_embed(value, gs, target.grid());
        }
        if (value.shape != base.p(name).shape)
            throw incompat_error("import: tensor '" + ext_name + "' -> '" + name + "' has shape " +
                                 shape_str(value.shape) + ", expected " +
                                 shape_str(base.p(name).shape));
        base.p(name) = std::move(value);
    }

    Checkpoint out;
    out.arch = target;
    out.parameters = base.params;
    out.metadata.seed = seed;
    out.metadata.family = raw.metadata.family;
    return out;
}

}  // namespace atl
