#pragma once

#include <algorithm>
#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "atl/checkpoint.hpp"
#include "atl/model.hpp"
#include "atl/vit.hpp"

namespace atl {

enum class TransferMethod { none, copy, distill };
enum class Subset { Q, K, V, full };
enum class LossKind { CE, MSE, JSD, L1 };

inline std::string to_string(TransferMethod m) {
    switch (m) {
        case TransferMethod::none: return "none";
        case TransferMethod::copy: return "copy";
        default: return "distill";
    }
}
inline std::string to_string(Subset s) {
    switch (s) {
        case Subset::Q: return "Q";
        case Subset::K: return "K";
        case Subset::V: return "V";
        default: return "full";
    }
}
inline std::string to_string(LossKind k) {
    switch (k) {
        case LossKind::CE: return "CE";
        case LossKind::MSE: return "MSE";
        case LossKind::JSD: return "JSD";
        default: return "L1";
    }
}

// Declarative description of one transfer experiment.
struct TransferPlan {
    TransferMethod method = TransferMethod::none;
    Subset subset = Subset::full;
    std::vector<int> layers;  // block indices; empty = all (resolved at use)
    LossKind loss_kind = LossKind::CE;
    double lambda = 3.0;
    bool copy_output_projection = true;

    std::vector<int> resolved_layers(int depth) const {
        std::vector<int> out = layers;
        if (out.empty())
            for (int i = 0; i < depth; ++i) out.push_back(i);
        return out;
    }

    void validate(int depth) const {
        if (method == TransferMethod::none) return;
        auto l = resolved_layers(depth);
        if (l.empty()) throw config_error("TransferPlan: layer list must be nonempty");
        for (int i : l)
            if (i < 0 || i >= depth)
                throw config_error("TransferPlan: layer index " + std::to_string(i) +
                                   " out of range [0," + std::to_string(depth) + ")");
        if (method == TransferMethod::distill && lambda < 0.0)
            throw config_error("TransferPlan: lambda must be non-negative");
    }
};

inline std::vector<int> layers_top(int k, int depth) {
    std::vector<int> out;
    for (int i = depth - k; i < depth; ++i) out.push_back(i);
    return out;
}
inline std::vector<int> layers_bottom(int k) {
    std::vector<int> out;
    for (int i = 0; i < k; ++i) out.push_back(i);
    return out;
}

// "all", "top:k", "bottom:k", or an explicit comma list like "0,2,5".
inline std::vector<int> parse_layers(const std::string& text, int depth) {
    if (text.empty() || text == "all") {
        std::vector<int> out;
        for (int i = 0; i < depth; ++i) out.push_back(i);
        return out;
    }
    if (text.starts_with("top:")) return layers_top(std::stoi(text.substr(4)), depth);
    if (text.starts_with("bottom:")) return layers_bottom(std::stoi(text.substr(7)));
    std::vector<int> out;
    std::string cur;
    for (char c : text + ",") {
        if (c == ',') {
            if (!cur.empty()) out.push_back(std::stoi(cur));
            cur.clear();
        } else {
            cur += c;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Attention Copy
// ---------------------------------------------------------------------------

// Parameter names a subset covers in one block. `full` means Q, K, V plus
// (by default) the output projection.
inline std::vector<std::string> subset_param_names(int block, Subset subset,
                                                   bool copy_output_projection) {
    std::string b = "block" + std::to_string(block) + ".attn.";
    std::vector<std::string> names;
    auto add = [&](const char* stem) {
        names.push_back(b + stem + std::string(".weight"));
        names.push_back(b + stem + std::string(".bias"));
    };
    switch (subset) {
        case Subset::Q: add("q"); break;
        case Subset::K: add("k"); break;
        case Subset::V: add("v"); break;
        case Subset::full:
            add("q");
            add("k");
            add("v");
            if (copy_output_projection) add("proj");
            break;
    }
    return names;
}

// Overwrites the selected attention projections with the teacher's values
// and freezes exactly those names.
inline Model apply_attention_copy(Model student, const Checkpoint& teacher,
                                  const TransferPlan& plan) {
    if (plan.method != TransferMethod::copy)
        throw config_error("apply_attention_copy: plan.method must be copy");
    plan.validate(student.spec.depth);
    check_block_compat(teacher.arch, student.spec);
    for (int bi : plan.resolved_layers(student.spec.depth)) {
        for (const auto& name : subset_param_names(bi, plan.subset, plan.copy_output_projection)) {
            auto src = teacher.parameters.find(name);
            if (src == teacher.parameters.end())
                throw incompat_error("apply_attention_copy: teacher lacks '" + name + "'");
            Tensor& dst = student.p(name);
            if (dst.shape != src->second.shape)
                throw incompat_error("apply_attention_copy: shape mismatch for '" + name + "'");
            dst = src->second;
            student.frozen_names.insert(name);
        }
    }
    return student;
}

// ---------------------------------------------------------------------------
// Map alignment (register-bearing teacher -> plain student)
// ---------------------------------------------------------------------------

// Drops teacher register rows/columns the student does not have and
// renormalizes each remaining row. Identity when the layouts match.
inline Tensor align_attention_maps(const Tensor& teacher_map, const TokenLayout& teacher_layout,
                                   const TokenLayout& student_layout) {
    if (teacher_layout == student_layout) return teacher_map;
    if (teacher_layout.num_patches() != student_layout.num_patches())
        throw incompat_error("align_attention_maps: token grids differ (" +
                             std::to_string(teacher_layout.num_patches()) + " vs " +
                             std::to_string(student_layout.num_patches()) + " patches)");
    if (student_layout.num_registers() > teacher_layout.num_registers())
        throw incompat_error("align_attention_maps: student has more registers than teacher");

    const int B = teacher_map.shape[0], h = teacher_map.shape[1];
    const int Tt = teacher_map.shape[2], Ts = student_layout.tokens;
    // teacher token indices kept, in student order
    std::vector<int> keep;
    keep.push_back(teacher_layout.cls_index);
    for (int r = 0; r < student_layout.num_registers(); ++r)
        keep.push_back(teacher_layout.reg_begin + r);
    for (int p = 0; p < teacher_layout.num_patches(); ++p)
        keep.push_back(teacher_layout.patch_begin + p);

    Tensor out({B, h, Ts, Ts});
    for (int bh = 0; bh < B * h; ++bh) {
        const float* src = teacher_map.ptr() + static_cast<size_t>(bh) * Tt * Tt;
        float* dst = out.ptr() + static_cast<size_t>(bh) * Ts * Ts;
        for (int i = 0; i < Ts; ++i) {
            const float* srow = src + static_cast<size_t>(keep[i]) * Tt;
            float sum = 0.0f;
            for (int j = 0; j < Ts; ++j) sum += srow[keep[j]];
            float inv = sum > 0.0f ? 1.0f / sum : 0.0f;
            for (int j = 0; j < Ts; ++j) dst[i * Ts + j] = srow[keep[j]] * inv;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Loss zoo: row-level primitives, templated so tests can run them in double
// ---------------------------------------------------------------------------

template <typename T>
constexpr T prob_floor() { return static_cast<T>(1e-12); }

// Loss of one row of student probabilities s against teacher target t.
template <typename T>
T row_loss(LossKind kind, const T* s, const T* t, int K) {
    T acc = 0;
    switch (kind) {
        case LossKind::CE:
            for (int k = 0; k < K; ++k) acc -= t[k] * std::log(std::max(s[k], prob_floor<T>()));
            return acc;
        case LossKind::MSE:
            for (int k = 0; k < K; ++k) acc += (s[k] - t[k]) * (s[k] - t[k]);
            return acc / K;
        case LossKind::L1:
            for (int k = 0; k < K; ++k) acc += std::abs(s[k] - t[k]);
            return acc / K;
        case LossKind::JSD: {
            for (int k = 0; k < K; ++k) {
                T m = std::max(static_cast<T>(0.5) * (s[k] + t[k]), prob_floor<T>());
                T sk = std::max(s[k], prob_floor<T>());
                T tk = std::max(t[k], prob_floor<T>());
                acc += static_cast<T>(0.5) * (s[k] * std::log(sk / m) + t[k] * std::log(tk / m));
            }
            return acc;
        }
    }
    return acc;
}

// dL/ds for one row (student probabilities).
template <typename T>
void row_loss_grad_probs(LossKind kind, const T* s, const T* t, int K, T* gs) {
    switch (kind) {
        case LossKind::CE:
            for (int k = 0; k < K; ++k) gs[k] = -t[k] / std::max(s[k], prob_floor<T>());
            break;
        case LossKind::MSE:
            for (int k = 0; k < K; ++k) gs[k] = static_cast<T>(2) * (s[k] - t[k]) / K;
            break;
        case LossKind::L1:
            for (int k = 0; k < K; ++k)
                gs[k] = (s[k] > t[k] ? static_cast<T>(1) : (s[k] < t[k] ? static_cast<T>(-1)
                                                                        : static_cast<T>(0))) /
                        K;
            break;
        case LossKind::JSD:
            for (int k = 0; k < K; ++k) {
                T m = std::max(static_cast<T>(0.5) * (s[k] + t[k]), prob_floor<T>());
                gs[k] = static_cast<T>(0.5) * std::log(std::max(s[k], prob_floor<T>()) / m);
            }
            break;
    }
}

template <typename T>
void softmax_row(const T* z, int K, T* s) {
    T mx = z[0];
    for (int k = 1; k < K; ++k) mx = std::max(mx, z[k]);
    T sum = 0;
    for (int k = 0; k < K; ++k) {
        s[k] = std::exp(z[k] - mx);
        sum += s[k];
    }
    for (int k = 0; k < K; ++k) s[k] /= sum;
}

// Loss of one row computed from the student's pre-softmax logits; CE and
// JSD go through a log-sum-exp path instead of log(softmax(z)).
template <typename T>
T row_loss_from_logits(LossKind kind, const T* z, const T* t, int K, std::vector<T>& scratch) {
    scratch.resize(2 * K);
    T* s = scratch.data();
    T* logs = scratch.data() + K;
    T mx = z[0];
    for (int k = 1; k < K; ++k) mx = std::max(mx, z[k]);
    T sum = 0;
    for (int k = 0; k < K; ++k) sum += std::exp(z[k] - mx);
    T lse = mx + std::log(sum);
    for (int k = 0; k < K; ++k) {
        logs[k] = z[k] - lse;
        s[k] = std::exp(logs[k]);
    }
    if (kind == LossKind::CE) {
        T acc = 0;
        for (int k = 0; k < K; ++k) acc -= t[k] * logs[k];
        return acc;
    }
    return row_loss(kind, s, t, K);
}

// Analytic dL/dz for one row: chain the probability-space gradient through
// the softmax Jacobian.
template <typename T>
void row_loss_grad_logits(LossKind kind, const T* z, const T* t, int K, T* gz,
                          std::vector<T>& scratch) {
    scratch.resize(2 * K);
    T* s = scratch.data();
    T* gs = scratch.data() + K;
    softmax_row(z, K, s);
    row_loss_grad_probs(kind, s, t, K, gs);
    T dot = 0;
    for (int k = 0; k < K; ++k) dot += s[k] * gs[k];
    for (int k = 0; k < K; ++k) gz[k] = s[k] * (gs[k] - dot);
}

// ---------------------------------------------------------------------------
// Map-level loss
// ---------------------------------------------------------------------------

struct TransferLossResult {
    std::vector<double> per_layer;  // one value per selected layer, in order
    double mean = 0.0;
};

inline void check_normalized(const Tensor& map, const char* who) {
    const int T = map.shape[3];
    const size_t rows = map.numel() / T;
    for (size_t r = 0; r < rows; ++r) {
        const float* p = map.ptr() + r * T;
        float sum = 0.0f;
        for (int k = 0; k < T; ++k) sum += p[k];
        if (std::abs(sum - 1.0f) > 1e-4f)
            throw contract_error(std::string(who) +
                                 " attention rows are not normalized (row sum " +
                                 std::to_string(sum) + ")");
    }
}

// Mean loss over batch x heads x query rows per selected layer, then the
// mean over layers. Both map lists are indexed by block.
inline TransferLossResult attention_map_loss(const std::vector<Tensor>& student_maps,
                                             const std::vector<Tensor>& teacher_maps,
                                             LossKind kind, const std::vector<int>& layers) {
    TransferLossResult res;
    for (int li : layers) {
        const Tensor& s = student_maps.at(li);
        const Tensor& t = teacher_maps.at(li);
        if (s.shape != t.shape)
            throw dimension_error("attention_map_loss: map shapes differ at layer " +
                                  std::to_string(li));
        check_normalized(s, "student");
        check_normalized(t, "teacher");
        const int T = s.shape[3];
        const size_t rows = s.numel() / T;
        double acc = 0.0;
        for (size_t r = 0; r < rows; ++r)
            acc += row_loss(kind, s.ptr() + r * T, t.ptr() + r * T, T);
        res.per_layer.push_back(acc / static_cast<double>(rows));
    }
    double m = 0.0;
    for (double v : res.per_layer) m += v;
    res.mean = res.per_layer.empty() ? 0.0 : m / res.per_layer.size();
    return res;
}

// Per-layer dL/dA tensors for injection into the model backward pass.
// `coef` should carry the lambda / selected-layer-count factor; the
// per-row mean factor 1/(B*h*T) is applied here.
inline std::vector<Tensor> attention_map_loss_grads(const std::vector<Tensor>& student_maps,
                                                    const std::vector<Tensor>& teacher_maps,
                                                    LossKind kind, const std::vector<int>& layers,
                                                    float coef) {
    std::vector<Tensor> grads(student_maps.size());
    for (int li : layers) {
        const Tensor& s = student_maps.at(li);
        const Tensor& t = teacher_maps.at(li);
        const int T = s.shape[3];
        const size_t rows = s.numel() / T;
        const float scale = coef / static_cast<float>(rows);
        Tensor g(s.shape);
        for (size_t r = 0; r < rows; ++r) {
            row_loss_grad_probs(kind, s.ptr() + r * T, t.ptr() + r * T, T, g.ptr() + r * T);
            float* gp = g.ptr() + r * T;
            for (int k = 0; k < T; ++k) gp[k] *= scale;
        }
        grads[li] = std::move(g);
    }
    return grads;
}

// total training objective
inline double distill_objective(double task_loss, double transfer_loss_mean, double lambda) {
    if (lambda < 0.0) throw config_error("distill_objective: lambda must be non-negative");
    return task_loss + lambda * transfer_loss_mean;
}

}  // namespace atl
