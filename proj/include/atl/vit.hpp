#pragma once

#include <cmath>
#include <utility>
#include <vector>

#include "atl/model.hpp"

namespace atl {

constexpr float kLnEps = 1e-6f;

// Per-layer post-softmax attention maps captured during a forward pass,
// shaped [B, heads, T, T], plus where the special tokens sit.
struct AttentionTrace {
    std::vector<Tensor> maps;
    TokenLayout layout;
};

using Grads = std::map<std::string, Tensor>;

inline Grads zero_grads(const Model& m) {
    Grads g;
    for (const auto& [name, t] : m.params) g.emplace(name, Tensor(t.shape));
    return g;
}

// ---------------------------------------------------------------------------
// Relative position index
// ---------------------------------------------------------------------------

// index(i,j) for patch pairs depends only on the 2-D offset between patch i
// and patch j; values lie in [0, (2*gh-1)*(2*gw-1)).
inline std::vector<int> build_relative_position_index(int grid_h, int grid_w) {
    if (grid_h < 1 || grid_w < 1)
        throw config_error("build_relative_position_index: grid sides must be >= 1");
    const int n = grid_h * grid_w;
    std::vector<int> idx(static_cast<size_t>(n) * n);
    for (int i = 0; i < n; ++i) {
        int ri = i / grid_w, ci = i % grid_w;
        for (int j = 0; j < n; ++j) {
            int rj = j / grid_w, cj = j % grid_w;
            int dr = ri - rj + grid_h - 1;
            int dc = ci - cj + grid_w - 1;
            idx[static_cast<size_t>(i) * n + j] = dr * (2 * grid_w - 1) + dc;
        }
    }
    return idx;
}

// Full T x T bias index including special tokens. Patch pairs use the
// offset slots; the last three table rows are the dedicated slots for
// query-is-special, key-is-special, and both-special pairs.
inline std::vector<int> full_bias_index(const ArchSpec& s) {
    const int g = s.grid();
    const int T = s.tokens();
    const int offs = (2 * g - 1) * (2 * g - 1);
    const TokenLayout l = token_layout(s);
    auto patch_idx = build_relative_position_index(g, g);
    std::vector<int> idx(static_cast<size_t>(T) * T);
    const int np = l.num_patches();
    for (int i = 0; i < T; ++i) {
        bool i_patch = i >= l.patch_begin;
        for (int j = 0; j < T; ++j) {
            bool j_patch = j >= l.patch_begin;
            int v;
            if (i_patch && j_patch) {
                v = patch_idx[static_cast<size_t>(i - l.patch_begin) * np + (j - l.patch_begin)];
            } else if (!i_patch && j_patch) {
                v = offs;      // special query -> patch key
            } else if (i_patch && !j_patch) {
                v = offs + 1;  // patch query -> special key
            } else {
                v = offs + 2;  // special -> special
            }
            idx[static_cast<size_t>(i) * T + j] = v;
        }
    }
    return idx;
}

// ---------------------------------------------------------------------------
// Elementary pieces
// ---------------------------------------------------------------------------

// Per-channel scaling of a residual branch; the residual add stays in the
// caller.
inline Tensor apply_layer_scale(const Tensor& gamma, const Tensor& branch) {
    if (gamma.shape.size() != 1 || branch.shape.size() != 3 ||
        branch.shape[2] != gamma.shape[0])
        throw dimension_error("apply_layer_scale: shape mismatch " + shape_str(gamma.shape) +
                              " vs " + shape_str(branch.shape));
    Tensor out(branch.shape);
    const int rows = branch.shape[0] * branch.shape[1];
    const int d = branch.shape[2];
    out.mat(rows, d) = branch.mat(rows, d).array().rowwise() *
                       gamma.mat(1, d).array().row(0);
    return out;
}

inline float gelu(float x) {
    return 0.5f * x * (1.0f + std::erf(x * 0.70710678118654752f));
}
inline float gelu_grad(float x) {
    float cdf = 0.5f * (1.0f + std::erf(x * 0.70710678118654752f));
    float pdf = 0.3989422804014327f * std::exp(-0.5f * x * x);
    return cdf + x * pdf;
}

// y = x W^T + b with X:[R,Din], W:[Dout,Din] (higher-rank weights are
// treated as [shape[0], numel/shape[0]], which covers the patch kernel)
inline void linear_fwd(const Tensor& x, int R, const Tensor& w, const Tensor& b, Tensor& y) {
    const int dout = w.shape[0];
    const int din = static_cast<int>(w.numel()) / dout;
    y.mat(R, dout).noalias() = x.mat(R, din) * w.mat(dout, din).transpose();
    y.mat(R, dout).rowwise() += b.mat(1, dout).row(0);
}

inline void linear_bwd(const Tensor& x, int R, const Tensor& w, const Tensor& dy,
                       Tensor* dx, Tensor& dw, Tensor& db) {
    const int dout = w.shape[0];
    const int din = static_cast<int>(w.numel()) / dout;
    if (dx) dx->mat(R, din).noalias() += dy.mat(R, dout) * w.mat(dout, din);
    dw.mat(dout, din).noalias() += dy.mat(R, dout).transpose() * x.mat(R, din);
    db.mat(1, dout) += dy.mat(R, dout).colwise().sum();
}

struct LnCache {
    std::vector<float> mean, rstd;  // per row
};

inline void layernorm_fwd(const Tensor& x, int R, int D, const Tensor& w, const Tensor& b,
                          Tensor& y, LnCache& c) {
    c.mean.resize(R);
    c.rstd.resize(R);
    auto xm = x.mat(R, D);
    auto ym = y.mat(R, D);
    auto wv = w.mat(1, D).row(0);
    auto bv = b.mat(1, D).row(0);
    for (int r = 0; r < R; ++r) {
        float mu = xm.row(r).mean();
        float var = (xm.row(r).array() - mu).square().mean();
        float rstd = 1.0f / std::sqrt(var + kLnEps);
        c.mean[r] = mu;
        c.rstd[r] = rstd;
        ym.row(r) = (((xm.row(r).array() - mu) * rstd) * wv.array() + bv.array()).matrix();
    }
}

inline void layernorm_bwd(const Tensor& x, int R, int D, const Tensor& w, const LnCache& c,
                          const Tensor& dy, Tensor& dx, Tensor& dw, Tensor& db) {
    auto xm = x.mat(R, D);
    auto dym = dy.mat(R, D);
    auto dxm = dx.mat(R, D);
    auto wv = w.mat(1, D).row(0);
    Eigen::RowVectorXf xhat(D), g(D);
    for (int r = 0; r < R; ++r) {
        xhat = ((xm.row(r).array() - c.mean[r]) * c.rstd[r]).matrix();
        dw.mat(1, D).row(0) += (dym.row(r).array() * xhat.array()).matrix();
        db.mat(1, D).row(0) += dym.row(r);
        g = (dym.row(r).array() * wv.array()).matrix();
        float gmean = g.mean();
        float gxmean = (g.array() * xhat.array()).mean();
        dxm.row(r) += ((g.array() - gmean - xhat.array() * gxmean) * c.rstd[r]).matrix();
    }
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

struct BlockCache {
    Tensor x_in;        // [B,T,D]
    Tensor ln1_out;     // [B,T,D]
    LnCache ln1;
    Tensor q, k, v;     // [B,T,D]
    Tensor attn_probs;  // [B,h,T,T]
    Tensor attn_out;    // [B,T,D] concat of heads, pre output projection
    Tensor proj_out;    // [B,T,D] pre-gamma branch value
    Tensor x_mid;       // [B,T,D]
    Tensor ln2_out;     // [B,T,D]
    LnCache ln2;
    Tensor fc1_out;     // [B,T,H] pre-GELU
    Tensor gelu_out;    // [B,T,H]
    Tensor fc2_out;     // [B,T,D] pre-gamma branch value
    std::vector<float> keep1, keep2;  // drop-path multipliers, per sample
};

struct ForwardCache {
    int B = 0;
    Tensor patches;      // [B*N, 3*p*p] im2row of the input
    Tensor tokens0;      // [B,T,D] after cls/registers/pos (pre pre-norm)
    Tensor embed_out;    // [B,T,D] input to block 0
    LnCache pre_norm;
    std::vector<BlockCache> blocks;
    Tensor x_final;      // [B,T,D] output of last block
    Tensor cls_normed;   // [B,D]
    LnCache final_norm;
    Tensor logits;       // [B,C]
    AttentionTrace trace;
};

struct ForwardOptions {
    bool training = false;   // enables drop-path when the spec rate > 0
    Rng* droppath_rng = nullptr;
    bool capture_trace = true;  // copy attention maps into cache.trace
};

namespace detail {

inline void attention_fwd(const Model& m, int bi, int B, Tensor& tokens, BlockCache& c,
                          const std::vector<int>* bias_index) {
    const ArchSpec& s = m.spec;
    const int T = s.tokens(), D = s.embed_dim, h = s.num_heads, dh = s.head_dim();
    const float invs = 1.0f / std::sqrt(static_cast<float>(dh));
    const std::string b = "block" + std::to_string(bi) + ".";
    const int R = B * T;

    c.ln1_out = Tensor({B, T, D});
    layernorm_fwd(tokens, R, D, m.p(b + "norm1.weight"), m.p(b + "norm1.bias"), c.ln1_out, c.ln1);

    c.q = Tensor({B, T, D});
    c.k = Tensor({B, T, D});
    c.v = Tensor({B, T, D});
    linear_fwd(c.ln1_out, R, m.p(b + "attn.q.weight"), m.p(b + "attn.q.bias"), c.q);
    linear_fwd(c.ln1_out, R, m.p(b + "attn.k.weight"), m.p(b + "attn.k.bias"), c.k);
    linear_fwd(c.ln1_out, R, m.p(b + "attn.v.weight"), m.p(b + "attn.v.bias"), c.v);

    c.attn_probs = Tensor({B, h, T, T});
    c.attn_out = Tensor({B, T, D});
    const Tensor* bias_table = s.relative_position_bias ? &m.p(b + "attn.relpos_table") : nullptr;

    MatRM z(T, T);
    for (int bb = 0; bb < B; ++bb) {
        auto qm = c.q.mat(R, D), km = c.k.mat(R, D), vm = c.v.mat(R, D);
        for (int hh = 0; hh < h; ++hh) {
            auto Qh = qm.block(bb * T, hh * dh, T, dh);
            auto Kh = km.block(bb * T, hh * dh, T, dh);
            auto Vh = vm.block(bb * T, hh * dh, T, dh);
            z.noalias() = Qh * Kh.transpose();
            z *= invs;
            if (bias_table) {
                const float* tab = bias_table->ptr();
                const int* idx = bias_index->data();
                float* zp = z.data();
                for (int e = 0; e < T * T; ++e) zp[e] += tab[idx[e] * h + hh];
            }
            // row softmax
            MapRM A(c.attn_probs.ptr() + (static_cast<size_t>(bb) * h + hh) * T * T, T, T);
            for (int r = 0; r < T; ++r) {
                float mx = z.row(r).maxCoeff();
                A.row(r) = (z.row(r).array() - mx).exp();
                A.row(r) /= A.row(r).sum();
            }
            c.attn_out.mat(R, D).block(bb * T, hh * dh, T, dh).noalias() = A * Vh;
        }
    }

    c.proj_out = Tensor({B, T, D});
    linear_fwd(c.attn_out, R, m.p(b + "attn.proj.weight"), m.p(b + "attn.proj.bias"), c.proj_out);
}

}  // namespace detail

// One transformer block. tokens is updated in place; the cache holds
// everything backward needs. Returns nothing; the attention map lives in
// cache.attn_probs.
inline void block_forward(const Model& m, int bi, int B, Tensor& tokens, BlockCache& c,
                          const std::vector<int>* bias_index, const ForwardOptions& opt) {
    const ArchSpec& s = m.spec;
    const int T = s.tokens(), D = s.embed_dim;
    const int R = B * T;
    const std::string b = "block" + std::to_string(bi) + ".";
    const bool drop = opt.training && s.drop_path_rate > 0.0;

    c.x_in = tokens;
    detail::attention_fwd(m, bi, B, tokens, c, bias_index);

    Tensor branch = s.layer_scale ? apply_layer_scale(m.p(b + "gamma1"), c.proj_out) : c.proj_out;
    c.keep1.assign(B, 1.0f);
    if (drop) {
        for (int bb = 0; bb < B; ++bb)
            c.keep1[bb] = opt.droppath_rng->bernoulli(s.drop_path_rate)
                              ? 0.0f
                              : 1.0f / (1.0f - static_cast<float>(s.drop_path_rate));
    }
    c.x_mid = Tensor({B, T, D});
    for (int bb = 0; bb < B; ++bb)
        c.x_mid.mat(R, D).middleRows(bb * T, T) =
            tokens.mat(R, D).middleRows(bb * T, T) +
            c.keep1[bb] * branch.mat(R, D).middleRows(bb * T, T);

    c.ln2_out = Tensor({B, T, D});
    layernorm_fwd(c.x_mid, R, D, m.p(b + "norm2.weight"), m.p(b + "norm2.bias"), c.ln2_out, c.ln2);

    const int H = s.mlp_dim();
    c.fc1_out = Tensor({B, T, H});
    linear_fwd(c.ln2_out, R, m.p(b + "mlp.fc1.weight"), m.p(b + "mlp.fc1.bias"), c.fc1_out);
    c.gelu_out = Tensor({B, T, H});
    for (size_t i = 0; i < c.fc1_out.numel(); ++i) c.gelu_out[i] = gelu(c.fc1_out[i]);
    c.fc2_out = Tensor({B, T, D});
    linear_fwd(c.gelu_out, R, m.p(b + "mlp.fc2.weight"), m.p(b + "mlp.fc2.bias"), c.fc2_out);

    Tensor branch2 = s.layer_scale ? apply_layer_scale(m.p(b + "gamma2"), c.fc2_out) : c.fc2_out;
    c.keep2.assign(B, 1.0f);
    if (drop) {
        for (int bb = 0; bb < B; ++bb)
            c.keep2[bb] = opt.droppath_rng->bernoulli(s.drop_path_rate)
                              ? 0.0f
                              : 1.0f / (1.0f - static_cast<float>(s.drop_path_rate));
    }
    for (int bb = 0; bb < B; ++bb)
        tokens.mat(R, D).middleRows(bb * T, T) =
            c.x_mid.mat(R, D).middleRows(bb * T, T) +
            c.keep2[bb] * branch2.mat(R, D).middleRows(bb * T, T);
}

// Standalone single-block op: runs one block on a token batch and returns
// (tokens_out, attention_map).
inline std::pair<Tensor, Tensor> attention_block_forward(const Model& m, int block_index,
                                                         const Tensor& tokens) {
    const ArchSpec& s = m.spec;
    if (tokens.shape.size() != 3 || tokens.shape[1] != s.tokens() || tokens.shape[2] != s.embed_dim)
        throw dimension_error("attention_block_forward: tokens shape " + shape_str(tokens.shape) +
                              " does not match spec");
    int B = tokens.shape[0];
    Tensor t = tokens;
    BlockCache c;
    ForwardOptions opt;
    std::vector<int> bias_index;
    if (s.relative_position_bias) bias_index = full_bias_index(s);
    block_forward(m, block_index, B, t, c, s.relative_position_bias ? &bias_index : nullptr, opt);
    return {std::move(t), std::move(c.attn_probs)};
}

// Full forward pass. Images are [B,3,S,S] floats.
inline ForwardCache forward_cached(const Model& m, const Tensor& images, const ForwardOptions& opt) {
    const ArchSpec& s = m.spec;
    if (images.shape.size() != 4 || images.shape[1] != 3 || images.shape[2] != s.image_size ||
        images.shape[3] != s.image_size)
        throw dimension_error("forward: image shape " + shape_str(images.shape) +
                              " does not match spec image_size " + std::to_string(s.image_size));
    const int B = images.shape[0];
    const int P = s.patch_size, G = s.grid(), N = s.num_patches();
    const int D = s.embed_dim, T = s.tokens(), R = B * T;
    const TokenLayout layout = token_layout(s);

    ForwardCache fc;
    fc.B = B;

    // im2row: one row per (sample, patch), columns ordered (channel, py, px)
    // to match the flattened kernel.
    const int pp = 3 * P * P;
    fc.patches = Tensor({B * N, pp});
    {
        const float* im = images.ptr();
        float* out = fc.patches.ptr();
        const int S = s.image_size;
        for (int bb = 0; bb < B; ++bb)
            for (int gy = 0; gy < G; ++gy)
                for (int gx = 0; gx < G; ++gx) {
                    float* row = out + (static_cast<size_t>(bb) * N + gy * G + gx) * pp;
                    for (int ch = 0; ch < 3; ++ch)
                        for (int py = 0; py < P; ++py)
                            for (int px = 0; px < P; ++px)
                                *row++ = im[((static_cast<size_t>(bb) * 3 + ch) * S +
                                             gy * P + py) * S + gx * P + px];
                }
    }

    Tensor patch_tokens({B * N, D});
    linear_fwd(fc.patches, B * N, m.p("patch_embed.kernel"), m.p("patch_embed.bias"), patch_tokens);

    fc.tokens0 = Tensor({B, T, D});
    {
        auto tok = fc.tokens0.mat(R, D);
        auto pe = m.p("pos_embed").mat(1 + N, D);
        auto cls = m.p("cls_token").mat(1, D);
        for (int bb = 0; bb < B; ++bb) {
            tok.row(bb * T + layout.cls_index) = cls.row(0) + pe.row(0);
            for (int r = 0; r < s.num_registers; ++r)
                tok.row(bb * T + layout.reg_begin + r) =
                    m.p("register_tokens").mat(s.num_registers, D).row(r);
            tok.middleRows(bb * T + layout.patch_begin, N) =
                patch_tokens.mat(B * N, D).middleRows(bb * N, N) + pe.middleRows(1, N);
        }
    }

    if (s.pre_layer_norm) {
        fc.embed_out = Tensor({B, T, D});
        layernorm_fwd(fc.tokens0, R, D, m.p("pre_norm.weight"), m.p("pre_norm.bias"),
                      fc.embed_out, fc.pre_norm);
    } else {
        fc.embed_out = fc.tokens0;
    }

    std::vector<int> bias_index;
    if (s.relative_position_bias) bias_index = full_bias_index(s);

    Tensor tokens = fc.embed_out;
    fc.blocks.resize(s.depth);
    fc.trace.layout = layout;
    for (int bi = 0; bi < s.depth; ++bi) {
        block_forward(m, bi, B, tokens, fc.blocks[bi],
                      s.relative_position_bias ? &bias_index : nullptr, opt);
        if (opt.capture_trace) fc.trace.maps.push_back(fc.blocks[bi].attn_probs);
    }
    fc.x_final = std::move(tokens);

    // final norm on the class token, then the head
    Tensor cls_rows({B, D});
    for (int bb = 0; bb < B; ++bb)
        cls_rows.mat(B, D).row(bb) = fc.x_final.mat(R, D).row(bb * T + layout.cls_index);
    fc.cls_normed = Tensor({B, D});
    layernorm_fwd(cls_rows, B, D, m.p("final_norm.weight"), m.p("final_norm.bias"),
                  fc.cls_normed, fc.final_norm);
    fc.logits = Tensor({B, s.num_classes});
    linear_fwd(fc.cls_normed, B, m.p("head.weight"), m.p("head.bias"), fc.logits);
    return fc;
}

// Evaluation-mode forward returning (logits, trace).
inline std::pair<Tensor, AttentionTrace> forward(const Model& m, const Tensor& images) {
    ForwardOptions opt;
    ForwardCache fc = forward_cached(m, images, opt);
    return {std::move(fc.logits), std::move(fc.trace)};
}

// Backward pass. dlogits is [B,C]; attn_logit_grads, when non-null, holds
// one [B,h,T,T] tensor per layer (empty tensor = no injection) added to the
// pre-softmax attention logits gradient — this is how the distillation loss
// reaches the student.
inline void backward(const Model& m, const ForwardCache& fc, const Tensor& dlogits,
                     const std::vector<Tensor>* attn_prob_grads, Grads& g) {
    const ArchSpec& s = m.spec;
    const int B = fc.B, T = s.tokens(), D = s.embed_dim, N = s.num_patches();
    const int h = s.num_heads, dh = s.head_dim(), R = B * T, H = s.mlp_dim();
    const float invs = 1.0f / std::sqrt(static_cast<float>(dh));
    const TokenLayout layout = token_layout(s);

    // head + final norm
    Tensor d_cls_normed({B, D});
    d_cls_normed.zero();
    linear_bwd(fc.cls_normed, B, m.p("head.weight"), dlogits, &d_cls_normed,
               g.at("head.weight"), g.at("head.bias"));

    Tensor cls_rows({B, D});
    for (int bb = 0; bb < B; ++bb)
        cls_rows.mat(B, D).row(bb) = fc.x_final.mat(R, D).row(bb * T + layout.cls_index);
    Tensor d_cls({B, D});
    d_cls.zero();
    layernorm_bwd(cls_rows, B, D, m.p("final_norm.weight"), fc.final_norm, d_cls_normed,
                  d_cls, g.at("final_norm.weight"), g.at("final_norm.bias"));

    Tensor dx({B, T, D});
    dx.zero();
    for (int bb = 0; bb < B; ++bb)
        dx.mat(R, D).row(bb * T + layout.cls_index) = d_cls.mat(B, D).row(bb);

    std::vector<int> bias_index;
    if (s.relative_position_bias) bias_index = full_bias_index(s);

    for (int bi = s.depth - 1; bi >= 0; --bi) {
        const BlockCache& c = fc.blocks[bi];
        const std::string b = "block" + std::to_string(bi) + ".";

        // MLP branch
        Tensor dbranch2({B, T, D});
        for (int bb = 0; bb < B; ++bb)
            dbranch2.mat(R, D).middleRows(bb * T, T) =
                c.keep2[bb] * dx.mat(R, D).middleRows(bb * T, T);
        Tensor dfc2 = dbranch2;
        if (s.layer_scale) {
            auto& gam = m.p(b + "gamma2");
            g.at(b + "gamma2").mat(1, D).row(0) +=
                (dbranch2.mat(R, D).array() * c.fc2_out.mat(R, D).array()).colwise().sum().matrix();
            dfc2.mat(R, D) = dbranch2.mat(R, D).array().rowwise() *
                             gam.mat(1, D).array().row(0);
        }
        Tensor dgelu({B, T, H});
        dgelu.zero();
        linear_bwd(c.gelu_out, R, m.p(b + "mlp.fc2.weight"), dfc2, &dgelu,
                   g.at(b + "mlp.fc2.weight"), g.at(b + "mlp.fc2.bias"));
        Tensor dfc1({B, T, H});
        for (size_t i = 0; i < dfc1.numel(); ++i) dfc1[i] = dgelu[i] * gelu_grad(c.fc1_out[i]);
        Tensor dln2({B, T, D});
        dln2.zero();
        linear_bwd(c.ln2_out, R, m.p(b + "mlp.fc1.weight"), dfc1, &dln2,
                   g.at(b + "mlp.fc1.weight"), g.at(b + "mlp.fc1.bias"));
        Tensor dx_mid({B, T, D});
        dx_mid.zero();
        layernorm_bwd(c.x_mid, R, D, m.p(b + "norm2.weight"), c.ln2, dln2, dx_mid,
                      g.at(b + "norm2.weight"), g.at(b + "norm2.bias"));
        dx_mid.vec() += dx.vec();  // residual path

        // Attention branch
        Tensor dbranch1({B, T, D});
        for (int bb = 0; bb < B; ++bb)
            dbranch1.mat(R, D).middleRows(bb * T, T) =
                c.keep1[bb] * dx_mid.mat(R, D).middleRows(bb * T, T);
        Tensor dproj = dbranch1;
        if (s.layer_scale) {
            auto& gam = m.p(b + "gamma1");
            g.at(b + "gamma1").mat(1, D).row(0) +=
                (dbranch1.mat(R, D).array() * c.proj_out.mat(R, D).array()).colwise().sum().matrix();
            dproj.mat(R, D) = dbranch1.mat(R, D).array().rowwise() *
                              gam.mat(1, D).array().row(0);
        }
        Tensor dattn_out({B, T, D});
        dattn_out.zero();
        linear_bwd(c.attn_out, R, m.p(b + "attn.proj.weight"), dproj, &dattn_out,
                   g.at(b + "attn.proj.weight"), g.at(b + "attn.proj.bias"));

        Tensor dq({B, T, D}), dk({B, T, D}), dv({B, T, D});
        dq.zero();
        dk.zero();
        dv.zero();
        const Tensor* inj = nullptr;
        if (attn_prob_grads && !(*attn_prob_grads)[bi].data.empty())
            inj = &(*attn_prob_grads)[bi];
        Tensor* drelpos = s.relative_position_bias ? &g.at(b + "attn.relpos_table") : nullptr;

        MatRM dA(T, T), dZ(T, T);
        for (int bb = 0; bb < B; ++bb) {
            for (int hh = 0; hh < h; ++hh) {
                CMapRM A(c.attn_probs.ptr() + (static_cast<size_t>(bb) * h + hh) * T * T, T, T);
                auto Qh = c.q.mat(R, D).block(bb * T, hh * dh, T, dh);
                auto Kh = c.k.mat(R, D).block(bb * T, hh * dh, T, dh);
                auto Vh = c.v.mat(R, D).block(bb * T, hh * dh, T, dh);
                auto dOh = dattn_out.mat(R, D).block(bb * T, hh * dh, T, dh);

                dA.noalias() = dOh * Vh.transpose();
                if (inj) {
                    CMapRM gA(inj->ptr() + (static_cast<size_t>(bb) * h + hh) * T * T, T, T);
                    dA += gA;
                }
                dv.mat(R, D).block(bb * T, hh * dh, T, dh).noalias() += A.transpose() * dOh;
                // softmax backward per row
                for (int r = 0; r < T; ++r) {
                    float dot = A.row(r).dot(dA.row(r));
                    dZ.row(r) = (A.row(r).array() * (dA.row(r).array() - dot)).matrix();
                }
                if (drelpos) {
                    float* tab = drelpos->ptr();
                    const int* idx = bias_index.data();
                    const float* zp = dZ.data();
                    for (int e = 0; e < T * T; ++e) tab[idx[e] * h + hh] += zp[e];
                }
                dq.mat(R, D).block(bb * T, hh * dh, T, dh).noalias() += invs * (dZ * Kh);
                dk.mat(R, D).block(bb * T, hh * dh, T, dh).noalias() += invs * (dZ.transpose() * Qh);
            }
        }

        Tensor dln1({B, T, D});
        dln1.zero();
        linear_bwd(c.ln1_out, R, m.p(b + "attn.q.weight"), dq, &dln1,
                   g.at(b + "attn.q.weight"), g.at(b + "attn.q.bias"));
        linear_bwd(c.ln1_out, R, m.p(b + "attn.k.weight"), dk, &dln1,
                   g.at(b + "attn.k.weight"), g.at(b + "attn.k.bias"));
        linear_bwd(c.ln1_out, R, m.p(b + "attn.v.weight"), dv, &dln1,
                   g.at(b + "attn.v.weight"), g.at(b + "attn.v.bias"));

        Tensor dx_in({B, T, D});
        dx_in.zero();
        layernorm_bwd(c.x_in, R, D, m.p(b + "norm1.weight"), c.ln1, dln1, dx_in,
                      g.at(b + "norm1.weight"), g.at(b + "norm1.bias"));
        dx_in.vec() += dx_mid.vec();  // residual path
        dx = std::move(dx_in);
    }

    // embedding backward
    Tensor dtok0 = dx;
    if (s.pre_layer_norm) {
        dtok0 = Tensor({B, T, D});
        dtok0.zero();
        layernorm_bwd(fc.tokens0, R, D, m.p("pre_norm.weight"), fc.pre_norm, dx, dtok0,
                      g.at("pre_norm.weight"), g.at("pre_norm.bias"));
    }

    Tensor dpatch_tokens({B * N, D});
    {
        auto dt = dtok0.mat(R, D);
        auto dpe = g.at("pos_embed").mat(1 + N, D);
        auto dcls = g.at("cls_token").mat(1, D);
        for (int bb = 0; bb < B; ++bb) {
            dcls.row(0) += dt.row(bb * T + layout.cls_index);
            dpe.row(0) += dt.row(bb * T + layout.cls_index);
            for (int r = 0; r < s.num_registers; ++r)
                g.at("register_tokens").mat(s.num_registers, D).row(r) +=
                    dt.row(bb * T + layout.reg_begin + r);
            dpatch_tokens.mat(B * N, D).middleRows(bb * N, N) =
                dt.middleRows(bb * T + layout.patch_begin, N);
            dpe.middleRows(1, N) += dt.middleRows(bb * T + layout.patch_begin, N);
        }
    }
    linear_bwd(fc.patches, B * N, m.p("patch_embed.kernel"), dpatch_tokens, nullptr,
               g.at("patch_embed.kernel"), g.at("patch_embed.bias"));
}

}  // namespace atl
