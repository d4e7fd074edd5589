#pragma once

// Train-from-scratch evaluation of small sets, the repeated-runs protocol
// (n_sets synthetic sets x n_models fresh models each), cross-architecture
// matrices, and the proxy-ranking experiment for architecture search.

#include <cmath>
#include <functional>
#include <mutex>
#include <string>
#include <vector>

#include "dc/condense.hpp"
#include "dc/coresets.hpp"
#include "dc/dataio.hpp"
#include "dc/parallel.hpp"
#include "dc/train.hpp"

namespace dc {

struct EvalReport {
    std::vector<double> accuracies;  // run order: set-major, model-minor
    int n_sets = 0, n_models = 0;
    std::string train_provenance, arch;

    double mean() const {
        double s = 0;
        for (double a : accuracies) s += a;
        return accuracies.empty() ? 0.0 : s / static_cast<double>(accuracies.size());
    }
    // population standard deviation
    double stddev() const {
        const double m = mean();
        double s = 0;
        for (double a : accuracies) s += (a - m) * (a - m);
        return accuracies.empty() ? 0.0 : std::sqrt(s / static_cast<double>(accuracies.size()));
    }
};

// Fresh Kaiming initialization, SGD passes over the set, held-out accuracy.
// Batch-norm architectures are evaluated with instance norm.
inline double train_from_scratch(const TrainSet& train, const Dataset& test,
                                 const ArchSpec& spec_in, const FitOptions& opt, uint64_t seed) {
    if (train.images.shape.empty() || train.images.shape[0] == 0)
        throw ConfigError("train_from_scratch: empty training set");
    const ArchSpec spec =
        evaluation_arch(spec_in).with_input(static_cast<int>(train.images.shape[1]),
                                            static_cast<int>(train.images.shape[2]),
                                            static_cast<int>(train.images.shape[3]), test.classes);
    auto params = init_params<float>(spec, derive_stream(seed, 0x91));
    fit(params, train, opt, derive_stream(seed, 0x92));
    return accuracy(params, test.images, test.labels, 128, opt.workers);
}

using SetBuilder = std::function<TrainSet(int set_id)>;
using RunFn = std::function<double(int set_id, int model_id)>;

// Protocol core with an injectable per-run function (tests stub it out).
inline EvalReport evaluate_protocol_with(const RunFn& run, int n_sets, int n_models,
                                         int workers = 1) {
    EvalReport rep;
    rep.n_sets = n_sets;
    rep.n_models = n_models;
    rep.accuracies.assign(static_cast<size_t>(n_sets) * n_models, 0.0);
    std::mutex err_mutex;
    std::string first_error;
    parallel_for(static_cast<int64_t>(n_sets) * n_models, workers, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) {
            const int set_id = static_cast<int>(i) / n_models;
            const int model_id = static_cast<int>(i) % n_models;
            try {
                rep.accuracies[static_cast<size_t>(i)] = run(set_id, model_id);
            } catch (const std::exception& e) {
                std::lock_guard<std::mutex> lock(err_mutex);
                if (first_error.empty())
                    first_error = "run (set " + std::to_string(set_id) + ", model " +
                                  std::to_string(model_id) + ") failed: " + e.what();
            }
        }
    });
    if (!first_error.empty()) throw ConfigError(first_error);
    return rep;
}

// Builds n_sets training sets and trains n_models fresh models on each;
// aggregates all n_sets * n_models test accuracies.
inline EvalReport evaluate_protocol(const SetBuilder& builder, const Dataset& test,
                                    const ArchSpec& spec, int n_sets, int n_models,
                                    const FitOptions& opt, uint64_t base_seed, int workers = 1) {
    std::vector<TrainSet> sets;
    sets.reserve(static_cast<size_t>(n_sets));
    for (int s = 0; s < n_sets; ++s) sets.push_back(builder(s));
    auto rep = evaluate_protocol_with(
        [&](int set_id, int model_id) {
            return train_from_scratch(sets[static_cast<size_t>(set_id)], test, spec, opt,
                                      derive_stream(base_seed, static_cast<uint64_t>(set_id),
                                                    static_cast<uint64_t>(model_id)));
        },
        n_sets, n_models, workers);
    rep.arch = arch_string(spec);
    return rep;
}

// Condenses once per row architecture, evaluates each condensed set on every
// column architecture. Indexed [condense_arch][eval_arch].
inline std::vector<std::vector<EvalReport>> cross_arch_matrix(
    const std::vector<ArchSpec>& condense_specs, const std::vector<ArchSpec>& eval_specs,
    const Dataset& train, const Dataset& test, const CondenseConfig& cfg, int n_sets, int n_models,
    const FitOptions& opt, int workers = 1) {
    std::vector<std::vector<EvalReport>> matrix;
    for (const auto& cspec : condense_specs) {
        std::vector<SyntheticSet> sets;
        for (int s = 0; s < n_sets; ++s) {
            CondenseConfig c = cfg;
            c.seed = derive_stream(cfg.seed, 0xa1, static_cast<uint64_t>(s));
            sets.push_back(condense(train, cspec, c).set);
        }
        std::vector<EvalReport> row;
        for (const auto& espec : eval_specs) {
            auto rep = evaluate_protocol([&](int s) { return sets[static_cast<size_t>(s)].as_train_set(); },
                                         test, espec, n_sets, n_models, opt, cfg.seed, workers);
            rep.train_provenance = arch_string(cspec);
            row.push_back(std::move(rep));
        }
        matrix.push_back(std::move(row));
    }
    return matrix;
}

// mean accuracy matrix as CSV, row/column architecture strings included
inline std::string matrix_csv(const std::vector<ArchSpec>& condense_specs,
                              const std::vector<ArchSpec>& eval_specs,
                              const std::vector<std::vector<EvalReport>>& matrix) {
    std::ostringstream os;
    os << "condense_arch";
    for (const auto& e : eval_specs) os << ',' << arch_string(e);
    os << '\n';
    for (size_t r = 0; r < matrix.size(); ++r) {
        os << arch_string(condense_specs[r]);
        for (const auto& rep : matrix[r]) {
            char buf[64];
            std::snprintf(buf, sizeof(buf), ",%.6f", rep.mean());
            os << buf;
        }
        os << '\n';
    }
    return os.str();
}

// ---------------------------------------------------------------------------
// rank statistics
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<double> average_ranks(const std::vector<double>& xs) {
    const size_t n = xs.size();
    std::vector<size_t> order(n);
    for (size_t i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return xs[a] < xs[b]; });
    std::vector<double> ranks(n);
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j + 1 < n && xs[order[j + 1]] == xs[order[i]]) j++;
        const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
        i = j + 1;
    }
    return ranks;
}

} // namespace detail

// Spearman's rank correlation with average ranks for ties (Pearson
// correlation of the rank vectors).
inline double spearman(const std::vector<double>& xs, const std::vector<double>& ys) {
    if (xs.size() != ys.size())
        throw ShapeError("spearman: length mismatch " + std::to_string(xs.size()) + " vs " +
                         std::to_string(ys.size()));
    if (xs.size() < 2) throw ShapeError("spearman: need at least 2 points");
    const auto rx = detail::average_ranks(xs);
    const auto ry = detail::average_ranks(ys);
    const double n = static_cast<double>(xs.size());
    double mx = 0, my = 0;
    for (size_t i = 0; i < xs.size(); ++i) { mx += rx[i]; my += ry[i]; }
    mx /= n;
    my /= n;
    double sxy = 0, sxx = 0, syy = 0;
    for (size_t i = 0; i < xs.size(); ++i) {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx) * (rx[i] - mx);
        syy += (ry[i] - my) * (ry[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0)
        throw NumericError("spearman: rank variance is zero, coefficient undefined");
    return sxy / std::sqrt(sxx * syy);
}

// ---------------------------------------------------------------------------
// architecture search
// ---------------------------------------------------------------------------

struct GridAxes {
    std::vector<int> width{32, 64, 128, 256};
    std::vector<int> depth{1, 2, 3, 4};
    std::vector<NormKind> norm{NormKind::None, NormKind::Batch, NormKind::Layer,
                               NormKind::Instance, NormKind::Group};
    std::vector<ActKind> act{ActKind::Sigmoid, ActKind::Relu, ActKind::LeakyRelu};
    std::vector<PoolKind> pool{PoolKind::None, PoolKind::Max, PoolKind::Avg};
};

// The full grid is 4*4*5*3*3 = 720 ConvNets.
inline std::vector<ArchSpec> conv_grid(const GridAxes& axes = {}) {
    std::vector<ArchSpec> out;
    for (int w : axes.width)
        for (int d : axes.depth)
            for (NormKind n : axes.norm)
                for (ActKind a : axes.act)
                    for (PoolKind p : axes.pool) {
                        ArchSpec s = default_spec(ArchKind::ConvNet);
                        s.width = w;
                        s.depth = d;
                        s.norm = n;
                        s.act = a;
                        s.pool = p;
                        out.push_back(s);
                    }
    return out;
}

// Deterministic seeded subsample used as the search validation split.
inline Dataset validation_split(const Dataset& train, double fraction, uint64_t seed) {
    Rng rng(derive_stream(seed, 0xb1));
    const int64_t n = train.size();
    const int64_t take = std::max<int64_t>(1, static_cast<int64_t>(std::floor(fraction * n)));
    auto picks = rng.sample_without_replacement(static_cast<int>(n), static_cast<int>(take));
    std::sort(picks.begin(), picks.end());
    auto sub = subset(train, picks);
    Dataset val;
    val.images = std::move(sub.images);
    val.labels = std::move(sub.labels);
    val.classes = train.classes;
    val.name = train.name;
    val.split = "val";
    val.norm_mean = train.norm_mean;
    val.norm_std = train.norm_std;
    return val;
}

struct NasResult {
    std::vector<std::string> archs;
    std::vector<double> val_acc;      // NaN for failed architectures
    std::vector<double> ref_acc;      // empty when no reference supplied
    std::vector<int> ranking;         // architecture ids, best validation first (failed excluded)
    std::vector<int> top;             // first top_k of ranking
    double spearman_top = 0.0;        // over `top`, vs reference (when supplied)
    bool has_reference = false;
    std::vector<std::string> failures;
};

// Trains every architecture on the proxy set, ranks by validation accuracy.
// Architectures whose training diverges are recorded and left unranked.
inline NasResult nas_search(const std::vector<ArchSpec>& space, const TrainSet& proxy,
                            const Dataset& val, const FitOptions& opt, int top_k,
                            uint64_t seed, const std::vector<double>& reference_acc = {},
                            int workers = 1) {
    NasResult res;
    const size_t n = space.size();
    res.archs.resize(n);
    res.val_acc.assign(n, std::nan(""));
    res.failures.resize(n);
    parallel_for(static_cast<int64_t>(n), workers, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) {
            const auto& spec = space[static_cast<size_t>(i)];
            res.archs[static_cast<size_t>(i)] = arch_string(spec);
            try {
                res.val_acc[static_cast<size_t>(i)] = train_from_scratch(
                    proxy, val, spec, opt, derive_stream(seed, 0xb2, static_cast<uint64_t>(i)));
            } catch (const std::exception& e) {
                res.failures[static_cast<size_t>(i)] = e.what();
            }
        }
    });
    for (size_t i = 0; i < n; ++i)
        if (!std::isnan(res.val_acc[i])) res.ranking.push_back(static_cast<int>(i));
    std::stable_sort(res.ranking.begin(), res.ranking.end(), [&](int a, int b) {
        return res.val_acc[static_cast<size_t>(a)] > res.val_acc[static_cast<size_t>(b)];
    });
    const int k = std::min<int>(top_k, static_cast<int>(res.ranking.size()));
    res.top.assign(res.ranking.begin(), res.ranking.begin() + k);
    if (!reference_acc.empty()) {
        if (reference_acc.size() != n)
            throw ShapeError("nas_search: reference accuracy list size mismatch");
        res.ref_acc = reference_acc;
        res.has_reference = true;
        std::vector<double> xs, ys;
        for (int id : res.top) {
            xs.push_back(res.val_acc[static_cast<size_t>(id)]);
            ys.push_back(reference_acc[static_cast<size_t>(id)]);
        }
        res.spearman_top = spearman(xs, ys);
    }
    return res;
}

} // namespace dc
