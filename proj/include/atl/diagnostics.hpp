#pragma once

#include <cmath>
#include <functional>
#include <sstream>
#include <vector>

#include "atl/transfer.hpp"
#include "atl/vit.hpp"

namespace atl {

enum class DivKind { KL, JS };

inline std::string to_string(DivKind k) { return k == DivKind::KL ? "KL" : "JS"; }

// Per-layer mean divergence between teacher and student attention rows.
struct DivergenceProfile {
    DivKind kind = DivKind::KL;
    std::vector<double> per_layer;  // nats, length = depth
    long num_samples = 0;
    ArchSpec teacher_spec, student_spec;
};

// KL(p || q) over one row, probabilities clamped below at 1e-12.
template <typename T>
T kl_row(const T* p, const T* q, int K) {
    T acc = 0;
    for (int k = 0; k < K; ++k) {
        T pk = std::max(p[k], prob_floor<T>());
        T qk = std::max(q[k], prob_floor<T>());
        acc += p[k] * std::log(pk / qk);
    }
    return acc;
}

template <typename T>
T js_row(const T* p, const T* q, int K) {
    T acc = 0;
    for (int k = 0; k < K; ++k) {
        T m = std::max(static_cast<T>(0.5) * (p[k] + q[k]), prob_floor<T>());
        T pk = std::max(p[k], prob_floor<T>());
        T qk = std::max(q[k], prob_floor<T>());
        acc += static_cast<T>(0.5) * (p[k] * std::log(pk / m) + q[k] * std::log(qk / m));
    }
    return acc;
}

// Divergence D(teacher_row || student_row), teacher first, averaged over
// samples x heads x query rows per layer. Teacher maps are aligned to the
// student layout first. Batches come from a caller-supplied generator that
// returns image tensors until exhausted (empty tensor = done).
inline DivergenceProfile divergence_profile(const Model& teacher, const Model& student,
                                            const std::function<Tensor()>& next_batch,
                                            DivKind kind, long max_samples) {
    if (teacher.spec.depth != student.spec.depth)
        throw incompat_error("divergence_profile: depth mismatch (" +
                             std::to_string(teacher.spec.depth) + " vs " +
                             std::to_string(student.spec.depth) + ")");
    if (teacher.spec.num_heads != student.spec.num_heads)
        throw incompat_error("divergence_profile: head count mismatch");
    if (max_samples < 1) throw config_error("divergence_profile: max_samples must be >= 1");

    const int depth = student.spec.depth;
    const TokenLayout tl = token_layout(teacher.spec);
    const TokenLayout sl = token_layout(student.spec);

    DivergenceProfile prof;
    prof.kind = kind;
    prof.per_layer.assign(depth, 0.0);
    prof.teacher_spec = teacher.spec;
    prof.student_spec = student.spec;

    std::vector<double> acc(depth, 0.0);
    long rows_seen = 0;
    long samples = 0;
    while (samples < max_samples) {
        Tensor batch = next_batch();
        if (batch.data.empty()) break;
        auto [tl_logits, t_trace] = forward(teacher, batch);
        auto [sl_logits, s_trace] = forward(student, batch);
        const int B = batch.shape[0];
        for (int li = 0; li < depth; ++li) {
            Tensor tmap = align_attention_maps(t_trace.maps[li], tl, sl);
            const Tensor& smap = s_trace.maps[li];
            const int T = smap.shape[3];
            const size_t rows = smap.numel() / T;
            double layer_acc = 0.0;
            for (size_t r = 0; r < rows; ++r) {
                const float* p = tmap.ptr() + r * T;
                const float* q = smap.ptr() + r * T;
                layer_acc += (kind == DivKind::KL) ? static_cast<double>(kl_row(p, q, T))
                                                   : static_cast<double>(js_row(p, q, T));
            }
            acc[li] += layer_acc;
            if (li == 0) rows_seen += static_cast<long>(rows);
        }
        samples += B;
    }
    if (rows_seen == 0) throw config_error("divergence_profile: batch stream produced no samples");
    for (int li = 0; li < depth; ++li) prof.per_layer[li] = acc[li] / rows_seen;
    prof.num_samples = samples;
    return prof;
}

inline std::string profile_to_csv(const DivergenceProfile& p) {
    std::ostringstream os;
    os << "layer,value\n";
    for (size_t i = 0; i < p.per_layer.size(); ++i) os << i << "," << p.per_layer[i] << "\n";
    return os.str();
}

}  // namespace atl
