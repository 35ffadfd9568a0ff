#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "atl/optim.hpp"
#include "atl/train.hpp"
#include "atl/transfer.hpp"

using namespace atl;

namespace {

Checkpoint checkpoint_of(const Model& m) {
    Checkpoint ck;
    ck.arch = m.spec;
    ck.parameters = m.params;
    return ck;
}

ArchSpec small_spec() {
    ArchSpec s;
    s.depth = 3;
    s.embed_dim = 8;
    s.num_heads = 2;
    s.patch_size = 4;
    s.image_size = 8;
    s.num_classes = 3;
    return s;
}

// teacher rows as a random distribution
std::vector<double> random_simplex(int K, Rng& rng) {
    std::vector<double> t(K);
    double sum = 0.0;
    for (auto& v : t) {
        v = rng.uniform(0.05, 1.0);
        sum += v;
    }
    for (auto& v : t) v /= sum;
    return t;
}

}  // namespace

TEST_CASE("layer-list constructors") {
    CHECK(parse_layers("all", 6) == std::vector<int>{0, 1, 2, 3, 4, 5});
    CHECK(parse_layers("top:1", 6) == std::vector<int>{5});
    CHECK(parse_layers("top:3", 6) == std::vector<int>{3, 4, 5});
    CHECK(parse_layers("bottom:3", 6) == std::vector<int>{0, 1, 2});
    CHECK(parse_layers("0,2,5", 6) == std::vector<int>{0, 2, 5});
    TransferPlan p;
    p.method = TransferMethod::copy;
    p.layers = {7};
    CHECK_THROWS_AS(p.validate(6), config_error);
}

TEST_CASE("attention copy: subset semantics and freezing through training") {
    ArchSpec s = small_spec();
    Model teacher = build_model(s, 1);
    Model student = build_model(s, 2);
    Checkpoint tck = checkpoint_of(teacher);

    TransferPlan plan;
    plan.method = TransferMethod::copy;
    plan.subset = Subset::Q;
    Model copied = apply_attention_copy(student, tck, plan);
    for (int bi = 0; bi < s.depth; ++bi) {
        std::string b = "block" + std::to_string(bi) + ".attn.";
        CHECK(std::memcmp(copied.p(b + "q.weight").ptr(), teacher.p(b + "q.weight").ptr(),
                          copied.p(b + "q.weight").numel() * sizeof(float)) == 0);
        CHECK(std::memcmp(copied.p(b + "k.weight").ptr(), teacher.p(b + "k.weight").ptr(),
                          copied.p(b + "k.weight").numel() * sizeof(float)) != 0);
        CHECK(std::memcmp(copied.p(b + "v.weight").ptr(), teacher.p(b + "v.weight").ptr(),
                          copied.p(b + "v.weight").numel() * sizeof(float)) != 0);
        CHECK(std::memcmp(copied.p(b + "proj.weight").ptr(), teacher.p(b + "proj.weight").ptr(),
                          copied.p(b + "proj.weight").numel() * sizeof(float)) != 0);
    }

    // frozen set is exactly the copied names
    std::set<std::string> expect;
    for (int bi = 0; bi < s.depth; ++bi)
        for (const auto& n : subset_param_names(bi, Subset::Q, true)) expect.insert(n);
    CHECK(copied.frozen_names == expect);

    // 10 optimizer steps: copied arrays bitwise unchanged, others changed
    Model snapshot = copied;
    AdamW opt(copied, 1e-2, 0.0, 0.9, 0.999);
    Rng rng(3);
    for (int step = 0; step < 10; ++step) {
        Tensor images({2, 3, 8, 8});
        for (auto& v : images.data) v = static_cast<float>(rng.uniform());
        ForwardOptions fo;
        fo.capture_trace = false;
        ForwardCache fc = forward_cached(copied, images, fo);
        Tensor dlogits({2, s.num_classes});
        for (auto& v : dlogits.data) v = static_cast<float>(rng.normal(0.0, 0.1));
        Grads g = zero_grads(copied);
        backward(copied, fc, dlogits, nullptr, g);
        opt.step(copied, g, 1e-2);
    }
    for (const auto& [name, t] : copied.params) {
        bool unchanged = std::memcmp(t.ptr(), snapshot.p(name).ptr(),
                                     t.numel() * sizeof(float)) == 0;
        if (copied.frozen(name)) CHECK(unchanged);
        else CHECK_FALSE(unchanged);
    }
}

TEST_CASE("copy composability: Q+K+V+proj equals subset=full") {
    ArchSpec s = small_spec();
    Model teacher = build_model(s, 5);
    Model student = build_model(s, 6);
    Checkpoint tck = checkpoint_of(teacher);

    TransferPlan full;
    full.method = TransferMethod::copy;
    full.subset = Subset::full;
    Model a = apply_attention_copy(student, tck, full);

    Model b = student;
    for (Subset sub : {Subset::Q, Subset::K, Subset::V}) {
        TransferPlan p;
        p.method = TransferMethod::copy;
        p.subset = sub;
        b = apply_attention_copy(std::move(b), tck, p);
    }
    // output projection on top
    for (int bi = 0; bi < s.depth; ++bi) {
        std::string base = "block" + std::to_string(bi) + ".attn.proj.";
        for (const char* suffix : {"weight", "bias"}) {
            b.p(base + suffix) = teacher.p(base + suffix);
            b.frozen_names.insert(base + suffix);
        }
    }
    for (const auto& [name, t] : a.params)
        CHECK(std::memcmp(t.ptr(), b.p(name).ptr(), t.numel() * sizeof(float)) == 0);
    CHECK(a.frozen_names == b.frozen_names);
}

TEST_CASE("full copy plus copied upstream reproduces teacher attention at step 0") {
    ArchSpec s = small_spec();
    Model teacher = build_model(s, 11);
    Model student = build_model(s, 12);
    Checkpoint tck = checkpoint_of(teacher);
    TransferPlan plan;
    plan.method = TransferMethod::copy;
    plan.subset = Subset::full;
    Model copied = apply_attention_copy(student, tck, plan);
    // copy everything upstream of attention: embeddings and norms
    for (const auto& [name, t] : teacher.params)
        if (name.starts_with("patch_embed") || name == "pos_embed" || name == "cls_token" ||
            name.find("norm1") != std::string::npos || name.find("mlp") != std::string::npos ||
            name.find("norm2") != std::string::npos || name.find("proj") != std::string::npos)
            copied.p(name) = t;

    Rng rng(13);
    Tensor images({2, 3, 8, 8});
    for (auto& v : images.data) v = static_cast<float>(rng.uniform());
    auto [tl, ttrace] = forward(teacher, images);
    auto [sl, strace] = forward(copied, images);
    for (int li = 0; li < s.depth; ++li) {
        float max_abs = 0.0f;
        for (size_t i = 0; i < ttrace.maps[li].numel(); ++i)
            max_abs = std::max(max_abs, std::abs(ttrace.maps[li][i] - strace.maps[li][i]));
        CHECK(max_abs < 1e-6f);
    }
}

TEST_CASE("align_attention_maps: identity, renormalization oracle, row sums") {
    ArchSpec t = small_spec();
    TokenLayout tl = token_layout(t);
    Tensor map({1, 1, tl.tokens, tl.tokens});
    Rng rng(4);
    for (int r = 0; r < tl.tokens; ++r) {
        auto row = random_simplex(tl.tokens, rng);
        for (int k = 0; k < tl.tokens; ++k) map[r * tl.tokens + k] = static_cast<float>(row[k]);
    }
    Tensor same = align_attention_maps(map, tl, tl);
    CHECK(std::memcmp(same.ptr(), map.ptr(), map.numel() * sizeof(float)) == 0);

    // teacher with one register over (cls, reg, patch): hand oracle
    ArchSpec treg = t;
    treg.num_registers = 1;
    TokenLayout tl2 = token_layout(treg);
    ArchSpec s2 = t;
    TokenLayout sl2 = token_layout(s2);
    // build a 3-token-equivalent: teacher row over (cls, reg, p0..) with
    // the first three entries 0.2 / 0.3 / 0.5 and the rest zero
    Tensor tmap({1, 1, tl2.tokens, tl2.tokens});
    for (int r = 0; r < tl2.tokens; ++r) {
        tmap[r * tl2.tokens + 0] = 0.2f;
        tmap[r * tl2.tokens + 1] = 0.3f;
        tmap[r * tl2.tokens + 2] = 0.5f;
    }
    Tensor out = align_attention_maps(tmap, tl2, sl2);
    CHECK(out.shape == std::vector<int>{1, 1, sl2.tokens, sl2.tokens});
    CHECK(out[0] == doctest::Approx(0.2 / 0.7).epsilon(1e-4));
    CHECK(out[1] == doctest::Approx(0.5 / 0.7).epsilon(1e-4));
    for (int r = 0; r < sl2.tokens; ++r) {
        float sum = 0.0f;
        for (int k = 0; k < sl2.tokens; ++k) sum += out[r * sl2.tokens + k];
        CHECK(std::abs(sum - 1.0f) < 1e-6f);
    }

    ArchSpec bigger = t;
    bigger.image_size = 12;  // different grid
    CHECK_THROWS_AS(align_attention_maps(map, token_layout(bigger), tl), incompat_error);
}

TEST_CASE("loss values: MSE at match, CE of uniform, JSD oracle") {
    // student == teacher -> MSE 0
    Tensor m({1, 1, 2, 2});
    m[0] = 0.3f; m[1] = 0.7f; m[2] = 0.6f; m[3] = 0.4f;
    auto r = attention_map_loss({m}, {m}, LossKind::MSE, {0});
    CHECK(r.mean == doctest::Approx(0.0).epsilon(1e-12));

    // teacher uniform over 2 tokens, student [0.5,0.5] -> CE = ln 2
    Tensor u({1, 1, 2, 2}, 0.5f);
    auto ce = attention_map_loss({u}, {u}, LossKind::CE, {0});
    CHECK(ce.mean == doctest::Approx(std::log(2.0)).epsilon(1e-6));

    // JSD([0.75,0.25],[0.5,0.5]) against a direct two-term summation oracle
    double p[2] = {0.75, 0.25}, q[2] = {0.5, 0.5};
    double mdl[2] = {0.625, 0.375};
    double oracle = 0.0;
    for (int k = 0; k < 2; ++k)
        oracle += 0.5 * (p[k] * std::log(p[k] / mdl[k]) + q[k] * std::log(q[k] / mdl[k]));
    double got = row_loss(LossKind::JSD, p, q, 2);
    CHECK(std::abs(got - oracle) < 1e-10);

    // unnormalized rows violate the contract
    Tensor bad({1, 1, 2, 2}, 0.8f);
    CHECK_THROWS_AS(attention_map_loss({bad}, {u}, LossKind::CE, {0}), contract_error);
}

TEST_CASE("loss-zoo gradients match central finite differences (20 instances each)") {
    Rng rng(77);
    const int K = 4;  // 4-token rows
    for (LossKind kind : {LossKind::CE, LossKind::MSE, LossKind::JSD, LossKind::L1}) {
        for (int inst = 0; inst < 20; ++inst) {
            std::vector<double> z(K), t = random_simplex(K, rng);
            for (auto& v : z) v = rng.normal(0.0, 1.5);
            std::vector<double> gz(K), scratch;
            row_loss_grad_logits(kind, z.data(), t.data(), K, gz.data(), scratch);
            const double h = 1e-3;
            for (int k = 0; k < K; ++k) {
                std::vector<double> zp = z, zm = z;
                zp[k] += h;
                zm[k] -= h;
                double fp = row_loss_from_logits(kind, zp.data(), t.data(), K, scratch);
                double fm = row_loss_from_logits(kind, zm.data(), t.data(), K, scratch);
                double fd = (fp - fm) / (2 * h);
                double denom = std::max({std::abs(fd), std::abs(gz[k]), 1e-8});
                CHECK(std::abs(gz[k] - fd) / denom < 1e-4);
            }
        }
    }
}

TEST_CASE("loss axioms: non-negativity, JSD bound and symmetry, zero-at-match") {
    Rng rng(31);
    const int K = 6;
    for (int inst = 0; inst < 50; ++inst) {
        auto p = random_simplex(K, rng);
        auto q = random_simplex(K, rng);
        double ce = row_loss(LossKind::CE, q.data(), p.data(), K);
        double entropy = 0.0;
        for (int k = 0; k < K; ++k) entropy -= p[k] * std::log(p[k]);
        CHECK(ce >= entropy - 1e-12);
        CHECK(row_loss(LossKind::MSE, q.data(), p.data(), K) >= 0.0);
        CHECK(row_loss(LossKind::L1, q.data(), p.data(), K) >= 0.0);
        double jsd = row_loss(LossKind::JSD, q.data(), p.data(), K);
        CHECK(jsd >= 0.0);
        CHECK(jsd <= std::log(2.0) + 1e-12);
        double jsd_swapped = row_loss(LossKind::JSD, p.data(), q.data(), K);
        CHECK(std::abs(jsd - jsd_swapped) < 1e-12);

        // zero at match (CE equals the teacher-row entropy)
        CHECK(row_loss(LossKind::MSE, p.data(), p.data(), K) == doctest::Approx(0.0));
        CHECK(row_loss(LossKind::L1, p.data(), p.data(), K) == doctest::Approx(0.0));
        CHECK(std::abs(row_loss(LossKind::JSD, p.data(), p.data(), K)) < 1e-12);
        CHECK(std::abs(row_loss(LossKind::CE, p.data(), p.data(), K) - entropy) < 1e-8);
    }
}

TEST_CASE("distill_objective arithmetic and linearity") {
    CHECK(distill_objective(1.0, 0.5, 0.0) == doctest::Approx(1.0));
    CHECK(distill_objective(1.0, 0.5, 3.0) == doctest::Approx(2.5));
    CHECK_THROWS_AS(distill_objective(1.0, 0.5, -1.0), config_error);
}

TEST_CASE("whole-model distillation gradient matches finite differences") {
    // tiny model, lambda=3: grad(total) must equal grad(task) + 3*grad(transfer)
    ArchSpec s;
    s.depth = 1;
    s.embed_dim = 4;
    s.num_heads = 2;
    s.patch_size = 4;
    s.image_size = 8;
    s.num_classes = 2;
    Model student = build_model(s, 41);
    Model teacher = build_model(s, 42);

    Rng rng(43);
    Tensor images({1, 3, 8, 8});
    for (auto& v : images.data) v = static_cast<float>(rng.uniform());
    Tensor targets({1, 2});
    targets[0] = 1.0f;

    auto [tlogits, ttrace] = forward(teacher, images);
    const std::vector<int> layers{0};
    const double lambda = 3.0;

    auto loss_of = [&](const Model& m) {
        auto [logits, trace] = forward(m, images);
        double mx = std::max(logits[0], logits[1]);
        double lse = mx + std::log(std::exp(logits[0] - mx) + std::exp(logits[1] - mx));
        double task = -(targets[0] * (logits[0] - lse) + targets[1] * (logits[1] - lse));
        auto tl = attention_map_loss(trace.maps, ttrace.maps, LossKind::CE, layers);
        return task + lambda * tl.mean;
    };

    // analytic gradient
    ForwardOptions fo;
    ForwardCache fc = forward_cached(student, images, fo);
    Tensor dlogits({1, 2});
    {
        double mx = std::max(fc.logits[0], fc.logits[1]);
        double lse = mx + std::log(std::exp(fc.logits[0] - mx) + std::exp(fc.logits[1] - mx));
        for (int c = 0; c < 2; ++c)
            dlogits[c] = static_cast<float>(std::exp(fc.logits[c] - lse) - targets[c]);
    }
    std::vector<Tensor> smaps{fc.blocks[0].attn_probs};
    std::vector<Tensor> tmaps{ttrace.maps[0]};
    auto agrads = attention_map_loss_grads(smaps, tmaps, LossKind::CE, layers,
                                           static_cast<float>(lambda));
    Grads g = zero_grads(student);
    backward(student, fc, dlogits, &agrads, g);

    // finite differences on a sample of parameters
    const float h = 1e-2f;
    Rng pick(44);
    int checked = 0;
    for (auto& [name, t] : student.params) {
        size_t i = pick.index(t.numel());
        Model mp = student, mm = student;
        mp.p(name)[i] += h;
        mm.p(name)[i] -= h;
        double fd = (loss_of(mp) - loss_of(mm)) / (2.0 * h);
        double an = g.at(name)[i];
        double denom = std::max({std::abs(fd), std::abs(an), 1e-3});
        CHECK(std::abs(fd - an) / denom < 2e-2);  // float forward, coarse step
        ++checked;
    }
    CHECK(checked > 10);
}
