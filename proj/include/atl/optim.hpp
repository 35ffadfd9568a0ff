#pragma once

#include <cmath>
#include <map>
#include <string>

#include "atl/model.hpp"
#include "atl/vit.hpp"

namespace atl {

// Cosine decay to 0 after a linear warmup, evaluated per step.
inline double lr_at_step(double base_lr, long step, long warmup_steps, long total_steps) {
    if (warmup_steps > 0 && step < warmup_steps)
        return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
    long t = step - warmup_steps;
    long span = total_steps - warmup_steps;
    if (span <= 0) return base_lr;
    if (t >= span) return 0.0;
    return base_lr * 0.5 * (1.0 + std::cos(M_PI * static_cast<double>(t) / span));
}

// Which block a parameter belongs to, for layer-wise lr decay.
// Embedding-side parameters sit below block 0; final norm and head above
// the last block.
inline int param_layer_id(const std::string& name, int depth) {
    if (name.starts_with("block")) {
        size_t dot = name.find('.');
        return 1 + std::stoi(name.substr(5, dot - 5));
    }
    if (name == "final_norm.weight" || name == "final_norm.bias" || name == "head.weight" ||
        name == "head.bias")
        return depth + 1;
    return 0;  // patch/pos/cls/register embeddings, pre-norm
}

// lr multiplier: block l gets decay^(depth-l), head side 1, embeddings
// decay^(depth+1).
inline double layerwise_lr_scale(const std::string& name, int depth, double decay) {
    int id = param_layer_id(name, depth);
    return std::pow(decay, depth + 1 - id);
}

// Decoupled-weight-decay Adam. Weight decay is skipped for norm weights,
// biases, gamma vectors and bias tables, the usual ViT convention.
class AdamW {
public:
    AdamW(const Model& m, double lr, double weight_decay, double beta1, double beta2,
          double layerwise_decay = 0.0 /* 0 = off */, double eps = 1e-8)
        : base_lr_(lr), wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {
        for (const auto& [name, t] : m.params) {
            m_.emplace(name, Tensor(t.shape));
            v_.emplace(name, Tensor(t.shape));
            lr_scale_[name] =
                layerwise_decay > 0.0 ? layerwise_lr_scale(name, m.spec.depth, layerwise_decay) : 1.0;
            decay_[name] = use_weight_decay(name);
        }
    }

    static bool use_weight_decay(const std::string& name) {
        return !(name.ends_with(".bias") || name.ends_with("norm1.weight") ||
                 name.ends_with("norm2.weight") || name == "final_norm.weight" ||
                 name == "pre_norm.weight" || name.ends_with("gamma1") ||
                 name.ends_with("gamma2") || name.ends_with("relpos_table") ||
                 name == "cls_token" || name == "pos_embed" || name == "register_tokens");
    }

    double effective_lr(const std::string& name, double sched_lr) const {
        return sched_lr * lr_scale_.at(name);
    }

    // One update with the given scheduled lr. Frozen parameters are left
    // untouched (moments included).
    void step(Model& model, const Grads& g, double sched_lr) {
        ++t_;
        const double bc1 = 1.0 - std::pow(b1_, t_);
        const double bc2 = 1.0 - std::pow(b2_, t_);
        for (auto& [name, p] : model.params) {
            if (model.frozen(name)) continue;
            const Tensor& grad = g.at(name);
            Tensor& mm = m_.at(name);
            Tensor& vv = v_.at(name);
            const double lr = sched_lr * lr_scale_.at(name);
            const float lrf = static_cast<float>(lr);
            const float wd = decay_[name] ? static_cast<float>(wd_) : 0.0f;
            const float b1 = static_cast<float>(b1_), b2 = static_cast<float>(b2_);
            const float ibc1 = static_cast<float>(1.0 / bc1), ibc2 = static_cast<float>(1.0 / bc2);
            const float eps = static_cast<float>(eps_);
            for (size_t i = 0; i < p.numel(); ++i) {
                float gi = grad[i];
                mm[i] = b1 * mm[i] + (1.0f - b1) * gi;
                vv[i] = b2 * vv[i] + (1.0f - b2) * gi * gi;
                float mhat = mm[i] * ibc1;
                float vhat = vv[i] * ibc2;
                p[i] -= lrf * (mhat / (std::sqrt(vhat) + eps) + wd * p[i]);
            }
        }
    }

private:
    double base_lr_, wd_, b1_, b2_, eps_;
    long t_ = 0;
    std::map<std::string, Tensor> m_, v_;
    std::map<std::string, double> lr_scale_;
    std::map<std::string, bool> decay_;
};

// Exponential moving average of the parameters, tracked per step.
class EmaTracker {
public:
    EmaTracker(const Model& m, double decay) : decay_(decay) { shadow_ = m.params; }

    void update(const Model& m) {
        const float d = static_cast<float>(decay_);
        for (auto& [name, s] : shadow_) {
            const Tensor& p = m.params.at(name);
            for (size_t i = 0; i < s.numel(); ++i) s[i] = d * s[i] + (1.0f - d) * p[i];
        }
    }

    Model apply(const Model& m) const {
        Model out = m;
        out.params = shadow_;
        return out;
    }

    const std::map<std::string, Tensor>& shadow() const { return shadow_; }

private:
    double decay_;
    std::map<std::string, Tensor> shadow_;
};

}  // namespace atl
