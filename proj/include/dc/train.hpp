#pragma once

// Shared second-stage training loop: mini-batch SGD with momentum and an
// optional cosine schedule. Used to train models from scratch on small
// (condensed or selected) sets, to fit reference feature extractors, and to
// drive the forgetting-event counter.

#include <cmath>
#include <cstdint>
#include <vector>

#include "dc/condense.hpp"
#include "dc/dataio.hpp"
#include "dc/lossgrad.hpp"
#include "dc/nets.hpp"
#include "dc/rng.hpp"

namespace dc {

struct FitOptions {
    int epochs = 100;
    float lr = 0.01f;
    float momentum = 0.9f;
    bool cosine = true;
    int batch = 64;
    int workers = 1;
};

// One full pass = one epoch; batches are drawn from a fresh shuffle each
// epoch (deterministic per seed).
inline void fit(ModelParams<float>& params, const TrainSet& train, const FitOptions& opt,
                uint64_t seed) {
    const int64_t n = train.images.shape[0];
    if (n == 0) throw ConfigError("fit: empty training set");
    const int64_t px = numel(train.images.shape) / n;
    std::vector<Tensor<float>> vel_w(params.layers.size()), vel_b(params.layers.size());
    std::vector<int> order(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) order[static_cast<size_t>(i)] = static_cast<int>(i);

    for (int epoch = 0; epoch < opt.epochs; ++epoch) {
        Rng rng(derive_stream(seed, 0x71, static_cast<uint64_t>(epoch)));
        rng.shuffle(order);
        const float lr = opt.cosine
                             ? opt.lr * 0.5f *
                                   (1.0f + std::cos(3.14159265358979323846f * epoch / opt.epochs))
                             : opt.lr;
        for (int64_t at = 0; at < n; at += opt.batch) {
            const int64_t bsz = std::min<int64_t>(opt.batch, n - at);
            Tensor<float> batch({bsz, train.images.shape[1], train.images.shape[2],
                                 train.images.shape[3]});
            std::vector<int> labels(static_cast<size_t>(bsz));
            for (int64_t i = 0; i < bsz; ++i) {
                const int64_t src = order[static_cast<size_t>(at + i)];
                std::copy_n(train.images.v.begin() + src * px, px, batch.v.begin() + i * px);
                labels[static_cast<size_t>(i)] = train.labels[static_cast<size_t>(src)];
            }
            Graph<float> g(opt.workers);
            auto bm = bind_params(g, params, true);
            auto loss = cross_entropy(g, forward(g, bm, g.leaf(std::move(batch))), labels);
            auto grads = g.differentiate(loss, bm.all_values());
            for (size_t l = 0; l < params.layers.size(); ++l) {
                sgd_momentum_step(params.layers[l].weight, vel_w[l], grads[2 * l].tensor(), lr,
                                  opt.momentum);
                sgd_momentum_step(params.layers[l].bias, vel_b[l], grads[2 * l + 1].tensor(), lr,
                                  opt.momentum);
            }
        }
    }
}

// Chunked inference helpers (graphs are built per chunk and freed).

template <typename F>
void for_chunks(const Tensor<float>& images, int chunk, F&& fn) {
    const int64_t n = images.shape[0];
    const int64_t px = numel(images.shape) / n;
    for (int64_t at = 0; at < n; at += chunk) {
        const int64_t bsz = std::min<int64_t>(chunk, n - at);
        Tensor<float> batch({bsz, images.shape[1], images.shape[2], images.shape[3]});
        std::copy_n(images.v.begin() + at * px, bsz * px, batch.v.begin());
        fn(at, std::move(batch));
    }
}

inline std::vector<int> predict(const ModelParams<float>& params, const Tensor<float>& images,
                                int chunk = 128, int workers = 1) {
    std::vector<int> out(static_cast<size_t>(images.shape[0]));
    for_chunks(images, chunk, [&](int64_t at, Tensor<float> batch) {
        Graph<float> g(workers);
        auto bm = bind_params(g, params, false);
        const auto& t = forward(g, bm, g.leaf(std::move(batch))).tensor();
        const int64_t classes = t.shape[1];
        for (int64_t i = 0; i < t.shape[0]; ++i) {
            int best = 0;
            for (int64_t c = 1; c < classes; ++c)
                if (t[i * classes + c] > t[i * classes + best]) best = static_cast<int>(c);
            out[static_cast<size_t>(at + i)] = best;
        }
    });
    return out;
}

inline double accuracy(const ModelParams<float>& params, const Tensor<float>& images,
                       const std::vector<int>& labels, int chunk = 128, int workers = 1) {
    const auto pred = predict(params, images, chunk, workers);
    int64_t hit = 0;
    for (size_t i = 0; i < pred.size(); ++i) hit += pred[i] == labels[i];
    return static_cast<double>(hit) / static_cast<double>(pred.size());
}

inline std::vector<double> per_sample_loss(const ModelParams<float>& params,
                                           const Tensor<float>& images,
                                           const std::vector<int>& labels, int chunk = 128,
                                           int workers = 1) {
    std::vector<double> out(static_cast<size_t>(images.shape[0]));
    for_chunks(images, chunk, [&](int64_t at, Tensor<float> batch) {
        Graph<float> g(workers);
        auto bm = bind_params(g, params, false);
        const auto& t = forward(g, bm, g.leaf(std::move(batch))).tensor();
        const int64_t classes = t.shape[1];
        for (int64_t i = 0; i < t.shape[0]; ++i) {
            double mx = t[i * classes];
            for (int64_t c = 1; c < classes; ++c) mx = std::max<double>(mx, t[i * classes + c]);
            double denom = 0;
            for (int64_t c = 0; c < classes; ++c) denom += std::exp(double(t[i * classes + c]) - mx);
            const int y = labels[static_cast<size_t>(at + i)];
            out[static_cast<size_t>(at + i)] =
                -(double(t[i * classes + y]) - mx - std::log(denom));
        }
    });
    return out;
}

inline Tensor<float> penultimate_features(const ModelParams<float>& params,
                                          const Tensor<float>& images, int chunk = 128,
                                          int workers = 1) {
    const int64_t dim = feature_dim(params.spec);
    Tensor<float> out({images.shape[0], dim});
    for_chunks(images, chunk, [&](int64_t at, Tensor<float> batch) {
        Graph<float> g(workers);
        auto bm = bind_params(g, params, false);
        const auto& t = forward_features(g, bm, g.leaf(std::move(batch))).tensor();
        std::copy(t.v.begin(), t.v.end(), out.v.begin() + at * dim);
    });
    return out;
}

} // namespace dc
