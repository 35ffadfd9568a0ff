#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "atl/rng.hpp"
#include "atl/tensor.hpp"

namespace atl {

// In-memory image classification dataset; images are [3,S,S] floats in
// [0,1], stored contiguously.
struct Dataset {
    int image_size = 32;
    int num_classes = 10;
    std::vector<float> images;  // [N,3,S,S]
    std::vector<int> labels;

    size_t size() const { return labels.size(); }
    size_t image_floats() const { return static_cast<size_t>(3) * image_size * image_size; }
    const float* image(size_t i) const { return images.data() + i * image_floats(); }

    void append(const float* img, int label) {
        images.insert(images.end(), img, img + image_floats());
        labels.push_back(label);
    }
};

struct DataSplits {
    Dataset train, eval;
};

// ---------------------------------------------------------------------------
// Procedurally generated shapes: ten separable classes, no downloads needed
// ---------------------------------------------------------------------------

namespace detail {

inline void draw_shape(float* img, int S, int cls, Rng& rng) {
    float bg[3], fg[3];
    for (int c = 0; c < 3; ++c) {
        bg[c] = static_cast<float>(rng.uniform(0.0, 0.35));
        fg[c] = static_cast<float>(rng.uniform(0.55, 1.0));
    }
    float cx = static_cast<float>(rng.uniform(0.35, 0.65)) * S;
    float cy = static_cast<float>(rng.uniform(0.35, 0.65)) * S;
    float r = static_cast<float>(rng.uniform(0.18, 0.32)) * S;
    int period = 2 + static_cast<int>(rng.index(3));

    for (int y = 0; y < S; ++y) {
        for (int x = 0; x < S; ++x) {
            float dx = x + 0.5f - cx, dy = y + 0.5f - cy;
            bool in = false;
            switch (cls) {
                case 0: in = dx * dx + dy * dy <= r * r; break;                    // disc
                case 1: in = std::abs(dx) <= r && std::abs(dy) <= r; break;        // square
                case 2: in = dy >= -r && std::abs(dx) <= (dy + r) * 0.5f; break;   // triangle
                case 3: in = std::abs(dx) <= r * 0.3f || std::abs(dy) <= r * 0.3f; break;  // cross
                case 4: {                                                          // ring
                    float d2 = dx * dx + dy * dy;
                    in = d2 <= r * r && d2 >= 0.45f * 0.45f * r * r;
                    break;
                }
                case 5: in = (y / period) % 2 == 0; break;                         // h-stripes
                case 6: in = (x / period) % 2 == 0; break;                         // v-stripes
                case 7: in = std::abs(dx) + std::abs(dy) <= r * 1.2f; break;       // diamond
                case 8: in = ((x / period) + (y / period)) % 2 == 0; break;        // checker
                case 9: in = std::abs(std::abs(dx) - std::abs(dy)) <= r * 0.25f; break;  // X
            }
            for (int c = 0; c < 3; ++c) {
                float v = (in ? fg[c] : bg[c]) + static_cast<float>(rng.normal(0.0, 0.03));
                img[(c * S + y) * S + x] = std::clamp(v, 0.0f, 1.0f);
            }
        }
    }
}

}  // namespace detail

inline Dataset make_synthetic_shapes(size_t n, uint64_t seed, int image_size = 32) {
    Dataset d;
    d.image_size = image_size;
    d.num_classes = 10;
    d.images.resize(n * d.image_floats());
    d.labels.resize(n);
    Rng rng(seed);
    for (size_t i = 0; i < n; ++i) {
        int cls = static_cast<int>(i % 10);
        d.labels[i] = cls;
        detail::draw_shape(d.images.data() + i * d.image_floats(), image_size, cls, rng);
    }
    return d;
}

// ---------------------------------------------------------------------------
// CIFAR-10 binary batches layout
// ---------------------------------------------------------------------------

inline Dataset load_cifar10_bin(const std::vector<std::string>& files) {
    Dataset d;
    d.image_size = 32;
    d.num_classes = 10;
    constexpr size_t rec = 1 + 3072;
    std::vector<unsigned char> buf;
    for (const auto& path : files) {
        std::ifstream f(path, std::ios::binary);
        if (!f) throw config_error("cannot open CIFAR batch: " + path);
        buf.assign(std::istreambuf_iterator<char>(f), {});
        if (buf.size() % rec != 0) throw config_error("malformed CIFAR batch: " + path);
        size_t n = buf.size() / rec;
        for (size_t i = 0; i < n; ++i) {
            const unsigned char* p = buf.data() + i * rec;
            d.labels.push_back(p[0]);
            for (size_t k = 0; k < 3072; ++k)
                d.images.push_back(static_cast<float>(p[1 + k]) / 255.0f);
        }
    }
    return d;
}

inline DataSplits load_cifar10_dir(const std::string& dir) {
    std::vector<std::string> train_files;
    for (int i = 1; i <= 5; ++i)
        train_files.push_back(dir + "/data_batch_" + std::to_string(i) + ".bin");
    DataSplits s;
    s.train = load_cifar10_bin(train_files);
    s.eval = load_cifar10_bin({dir + "/test_batch.bin"});
    return s;
}

// Dataset source spec: "synthetic-shapes" or "cifar10-dir:<path>".
inline DataSplits load_dataset(const std::string& source, size_t train_size, size_t eval_size,
                               uint64_t seed) {
    if (source == "synthetic-shapes") {
        DataSplits s;
        s.train = make_synthetic_shapes(train_size, seed);
        s.eval = make_synthetic_shapes(eval_size, seed + 0x9e3779b97f4a7c15ull);
        return s;
    }
    if (source.starts_with("cifar10-dir:")) return load_cifar10_dir(source.substr(12));
    throw config_error("unknown dataset source: " + source);
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

namespace aug {

inline void hflip(float* img, int S) {
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < S; ++y)
            for (int x = 0; x < S / 2; ++x)
                std::swap(img[(c * S + y) * S + x], img[(c * S + y) * S + S - 1 - x]);
}

inline void translate(float* img, int S, int dx, int dy) {
    std::vector<float> tmp(img, img + 3 * S * S);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < S; ++y)
            for (int x = 0; x < S; ++x) {
                int sx = x - dx, sy = y - dy;
                float v = (sx >= 0 && sx < S && sy >= 0 && sy < S) ? tmp[(c * S + sy) * S + sx]
                                                                   : 0.0f;
                img[(c * S + y) * S + x] = v;
            }
}

inline void brightness(float* img, int S, float delta) {
    for (int i = 0; i < 3 * S * S; ++i) img[i] = std::clamp(img[i] + delta, 0.0f, 1.0f);
}

inline void contrast(float* img, int S, float factor) {
    float mean = std::accumulate(img, img + 3 * S * S, 0.0f) / (3 * S * S);
    for (int i = 0; i < 3 * S * S; ++i)
        img[i] = std::clamp(mean + factor * (img[i] - mean), 0.0f, 1.0f);
}

inline void cutout(float* img, int S, int cx, int cy, int half) {
    for (int c = 0; c < 3; ++c)
        for (int y = std::max(0, cy - half); y < std::min(S, cy + half); ++y)
            for (int x = std::max(0, cx - half); x < std::min(S, cx + half); ++x)
                img[(c * S + y) * S + x] = 0.5f;
}

// Two randomly chosen ops, each applied with probability `prob`, strength
// scaled by magnitude/30 (the usual RandAugment magnitude scale).
inline void randaug(float* img, int S, int magnitude, double prob, Rng& rng) {
    float f = static_cast<float>(magnitude) / 30.0f;
    for (int pick = 0; pick < 2; ++pick) {
        int op = static_cast<int>(rng.index(5));
        bool apply = rng.bernoulli(prob);
        switch (op) {
            case 0: {
                int d = static_cast<int>(rng.uniform(-f * 0.3, f * 0.3) * S);
                if (apply) translate(img, S, d, 0);
                break;
            }
            case 1: {
                int d = static_cast<int>(rng.uniform(-f * 0.3, f * 0.3) * S);
                if (apply) translate(img, S, 0, d);
                break;
            }
            case 2: {
                float delta = static_cast<float>(rng.uniform(-0.4, 0.4)) * f;
                if (apply) brightness(img, S, delta);
                break;
            }
            case 3: {
                float factor = 1.0f + static_cast<float>(rng.uniform(-0.6, 0.6)) * f;
                if (apply) contrast(img, S, factor);
                break;
            }
            case 4: {
                int cx = static_cast<int>(rng.index(S)), cy = static_cast<int>(rng.index(S));
                int half = std::max(1, static_cast<int>(f * 0.25f * S));
                if (apply) cutout(img, S, cx, cy, half);
                break;
            }
        }
    }
}

}  // namespace aug

}  // namespace atl
