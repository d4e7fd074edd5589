#pragma once

// The four selection baselines. Herding and K-Center operate on features from
// a reference model trained on the whole set; Forgetting counts
// correct-to-incorrect transitions along a training run. All ties break
// toward the lower sample index so selections are reproducible.

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <vector>

#include "dc/dataio.hpp"
#include "dc/train.hpp"

namespace dc {

struct FeatureTable {
    Tensor<float> features;  // [N, dim]
    std::vector<int> labels;
    int classes = 0;

    int64_t dim() const { return features.shape[1]; }
};

// ipc uniform draws per class without replacement, class-major order.
inline std::vector<int> random_select(const Dataset& ds, int ipc, uint64_t seed) {
    const auto by_class = ds.indices_by_class();
    std::vector<int> out;
    out.reserve(static_cast<size_t>(ds.classes) * ipc);
    for (int c = 0; c < ds.classes; ++c) {
        const auto& pool = by_class[static_cast<size_t>(c)];
        if (static_cast<int>(pool.size()) < ipc)
            throw ConfigError("random_select: class " + std::to_string(c) + " has only " +
                              std::to_string(pool.size()) + " samples");
        Rng rng(derive_stream(seed, 0x81, static_cast<uint64_t>(c)));
        for (int p : rng.sample_without_replacement(static_cast<int>(pool.size()), ipc))
            out.push_back(pool[static_cast<size_t>(p)]);
    }
    return out;
}

namespace detail {

inline std::vector<double> class_mean(const FeatureTable& t, const std::vector<int>& rows) {
    std::vector<double> mu(static_cast<size_t>(t.dim()), 0.0);
    for (int r : rows)
        for (int64_t j = 0; j < t.dim(); ++j) mu[static_cast<size_t>(j)] += t.features[r * t.dim() + j];
    for (auto& v : mu) v /= static_cast<double>(rows.size());
    return mu;
}

inline double dist2_to(const FeatureTable& t, int row, const std::vector<double>& point) {
    double d = 0;
    for (int64_t j = 0; j < t.dim(); ++j) {
        const double diff = t.features[row * t.dim() + j] - point[static_cast<size_t>(j)];
        d += diff * diff;
    }
    return d;
}

inline double dist2_rows(const FeatureTable& t, int a, int b) {
    double d = 0;
    for (int64_t j = 0; j < t.dim(); ++j) {
        const double diff = t.features[a * t.dim() + j] - t.features[b * t.dim() + j];
        d += diff * diff;
    }
    return d;
}

inline std::vector<std::vector<int>> rows_by_class(const FeatureTable& t) {
    std::vector<std::vector<int>> by(static_cast<size_t>(t.classes));
    for (size_t i = 0; i < t.labels.size(); ++i)
        by[static_cast<size_t>(t.labels[i])].push_back(static_cast<int>(i));
    return by;
}

} // namespace detail

// Per class: the ipc samples closest to the class feature mean, in ascending
// distance order.
inline std::vector<int> herding_select(const FeatureTable& t, int ipc) {
    const auto by = detail::rows_by_class(t);
    std::vector<int> out;
    for (int c = 0; c < t.classes; ++c) {
        const auto& rows = by[static_cast<size_t>(c)];
        if (rows.empty()) throw ConfigError("herding_select: class " + std::to_string(c) + " is empty");
        const auto mu = detail::class_mean(t, rows);
        std::vector<std::pair<double, int>> ranked;
        ranked.reserve(rows.size());
        for (int r : rows) ranked.emplace_back(detail::dist2_to(t, r, mu), r);
        std::sort(ranked.begin(), ranked.end());  // distance, then lower index
        for (int k = 0; k < ipc && k < static_cast<int>(ranked.size()); ++k)
            out.push_back(ranked[static_cast<size_t>(k)].second);
    }
    return out;
}

// Per class: closest-to-mean first, then greedy farthest-point picks.
inline std::vector<int> kcenter_select(const FeatureTable& t, int ipc) {
    const auto by = detail::rows_by_class(t);
    std::vector<int> out;
    for (int c = 0; c < t.classes; ++c) {
        const auto& rows = by[static_cast<size_t>(c)];
        if (rows.empty()) throw ConfigError("kcenter_select: class " + std::to_string(c) + " is empty");
        const auto mu = detail::class_mean(t, rows);
        int first = rows[0];
        double best = detail::dist2_to(t, first, mu);
        for (int r : rows) {
            const double d = detail::dist2_to(t, r, mu);
            if (d < best) { best = d; first = r; }
        }
        std::vector<int> picked{first};
        std::vector<double> nearest(rows.size());
        for (size_t i = 0; i < rows.size(); ++i) nearest[i] = detail::dist2_rows(t, rows[i], first);
        while (static_cast<int>(picked.size()) < ipc &&
               picked.size() < rows.size()) {
            int far = -1;
            double far_d = -1;
            for (size_t i = 0; i < rows.size(); ++i) {
                if (std::find(picked.begin(), picked.end(), rows[i]) != picked.end()) continue;
                if (nearest[i] > far_d) { far_d = nearest[i]; far = static_cast<int>(i); }
            }
            const int chosen = rows[static_cast<size_t>(far)];
            picked.push_back(chosen);
            for (size_t i = 0; i < rows.size(); ++i)
                nearest[i] = std::min(nearest[i], detail::dist2_rows(t, rows[i], chosen));
        }
        out.insert(out.end(), picked.begin(), picked.end());
    }
    return out;
}

// Trains the reference model on the whole set and returns penultimate-layer
// features for every sample. Batch-norm statistics are frozen from a large
// sample after training so the features do not depend on inference batching.
inline FeatureTable extract_features(const Dataset& ds, const ArchSpec& spec_in, int epochs,
                                     uint64_t seed, int workers = 1) {
    const ArchSpec spec = spec_in.with_input(static_cast<int>(ds.channels()),
                                             static_cast<int>(ds.height()),
                                             static_cast<int>(ds.width()), ds.classes);
    auto params = init_params<float>(spec, derive_stream(seed, 0x82));
    FitOptions opt;
    opt.epochs = epochs;
    opt.workers = workers;
    opt.batch = static_cast<int>(std::clamp<int64_t>(ds.size() / 8, 16, 64));
    fit(params, {ds.images, ds.labels}, opt, derive_stream(seed, 0x83));
    if (spec.norm == NormKind::Batch) {
        Rng rng(derive_stream(seed, 0x86));
        const int n = std::min<int>(512, static_cast<int>(ds.size()));
        auto picks = rng.sample_without_replacement(static_cast<int>(ds.size()), n);
        params = freeze_batchnorm(params, subset(ds, picks).images);
    }
    FeatureTable t;
    t.features = penultimate_features(params, ds.images, 128, workers);
    t.labels = ds.labels;
    t.classes = ds.classes;
    return t;
}

// Counts correct-to-incorrect transitions between consecutive epochs.
inline int forgetting_events(const std::vector<uint8_t>& correctness_trace) {
    int events = 0;
    for (size_t e = 1; e < correctness_trace.size(); ++e)
        if (correctness_trace[e - 1] && !correctness_trace[e]) events++;
    return events;
}

// Per class, the ipc most-forgotten samples (ties: higher final loss, then
// lower index).
inline std::vector<int> forgetting_select(const Dataset& ds, const ArchSpec& spec_in, int epochs,
                                          uint64_t seed, int ipc, int workers = 1) {
    if (epochs < 2) throw ConfigError("forgetting_select: needs at least 2 epochs");
    const ArchSpec spec = spec_in.with_input(static_cast<int>(ds.channels()),
                                             static_cast<int>(ds.height()),
                                             static_cast<int>(ds.width()), ds.classes);
    auto params = init_params<float>(spec, derive_stream(seed, 0x84));
    const TrainSet whole{ds.images, ds.labels};
    FitOptions opt;
    opt.epochs = 1;
    opt.cosine = false;  // constant rate while the trace is recorded
    opt.workers = workers;
    opt.batch = static_cast<int>(std::clamp<int64_t>(ds.size() / 8, 16, 64));

    const int64_t n = ds.size();
    std::vector<std::vector<uint8_t>> trace(static_cast<size_t>(n));
    for (int epoch = 0; epoch < epochs; ++epoch) {
        fit(params, whole, opt, derive_stream(seed, 0x85, static_cast<uint64_t>(epoch)));
        const auto pred = predict(params, ds.images, 128, workers);
        for (int64_t i = 0; i < n; ++i)
            trace[static_cast<size_t>(i)].push_back(pred[static_cast<size_t>(i)] ==
                                                    ds.labels[static_cast<size_t>(i)]);
    }
    const auto losses = per_sample_loss(params, ds.images, ds.labels, 128, workers);

    const auto by_class = ds.indices_by_class();
    std::vector<int> out;
    for (int c = 0; c < ds.classes; ++c) {
        const auto& pool = by_class[static_cast<size_t>(c)];
        if (static_cast<int>(pool.size()) < ipc)
            throw ConfigError("forgetting_select: class " + std::to_string(c) + " has only " +
                              std::to_string(pool.size()) + " samples");
        std::vector<int> order = pool;
        std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
            const int ea = forgetting_events(trace[static_cast<size_t>(a)]);
            const int eb = forgetting_events(trace[static_cast<size_t>(b)]);
            if (ea != eb) return ea > eb;
            if (losses[static_cast<size_t>(a)] != losses[static_cast<size_t>(b)])
                return losses[static_cast<size_t>(a)] > losses[static_cast<size_t>(b)];
            return a < b;
        });
        for (int k = 0; k < ipc; ++k) out.push_back(order[static_cast<size_t>(k)]);
    }
    return out;
}

} // namespace dc
