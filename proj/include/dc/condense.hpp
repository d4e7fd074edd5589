#pragma once

// Curriculum gradient matching. The outer loop re-initializes the network; the
// inner loop walks a training trajectory, and at every step the synthetic
// images of each class are pulled toward producing the same weight gradients
// as a real batch of that class. Network weights are then trained on the
// synthetic set itself, and each weight update is detached so the graph never
// grows with the trajectory length.

#include <functional>
#include <string>
#include <vector>

#include "dc/dataio.hpp"
#include "dc/lossgrad.hpp"
#include "dc/nets.hpp"
#include "dc/parallel.hpp"
#include "dc/rng.hpp"
#include "dc/util.hpp"

namespace dc {

enum class SynthInit { GaussianNoise, RealSample };
enum class MatchDistance { Layerwise, FlatEuclidean, FlatCosine };

struct CondenseConfig {
    int ipc = 1;             // images per class
    int outer_steps = 1000;  // K
    int inner_steps = 1;     // T
    int synth_steps = 1;     // sigma_S
    int theta_steps = 1;     // sigma_theta (0 allowed when T == 1)
    float synth_lr = 0.1f;   // eta_S
    float theta_lr = 0.01f;  // eta_theta
    float theta_momentum = 0.5f;  // 0 reproduces plain SGD
    int real_batch_per_class = 256;
    SynthInit init = SynthInit::GaussianNoise;
    MatchDistance distance = MatchDistance::Layerwise;
    int early_stop_window = 100;
    float early_stop_tol = 1e-3f;  // relative improvement per window
    uint64_t seed = 0;
    int workers = 1;
    bool parallel_classes = false;

    std::string describe() const {
        std::ostringstream os;
        os << "ipc=" << ipc << " K=" << outer_steps << " T=" << inner_steps
           << " sS=" << synth_steps << " sT=" << theta_steps << " lrS=" << synth_lr
           << " lrT=" << theta_lr << " mom=" << theta_momentum
           << " batch=" << real_batch_per_class << " init=" << (init == SynthInit::GaussianNoise ? "noise" : "real")
           << " dist=" << (distance == MatchDistance::Layerwise ? "layerwise"
                           : distance == MatchDistance::FlatEuclidean ? "euclidean" : "cosine")
           << " window=" << early_stop_window << " tol=" << early_stop_tol;
        return os.str();
    }
};

// Hyperparameters from the reference setup, keyed by the image budget:
// 1 ipc -> T=1, 10 ipc -> T=10/50 weight steps, 50 ipc -> T=50/10; otherwise
// T=ipc with 500/T weight steps.
inline CondenseConfig default_condense_config(int ipc) {
    CondenseConfig c;
    c.ipc = ipc;
    if (ipc <= 1) {
        c.inner_steps = 1;
        c.theta_steps = 1;
    } else if (ipc == 10) {
        c.inner_steps = 10;
        c.theta_steps = 50;
    } else if (ipc == 50) {
        c.inner_steps = 50;
        c.theta_steps = 10;
    } else {
        c.inner_steps = ipc;
        c.theta_steps = std::max(1, 500 / ipc);
    }
    return c;
}

inline void validate(const CondenseConfig& c) {
    if (c.ipc < 1 || c.outer_steps < 1 || c.inner_steps < 1 || c.synth_steps < 1)
        throw ConfigError("condense: ipc, K, T and synth steps must all be >= 1");
    if (c.theta_steps < 0 || (c.theta_steps == 0 && c.inner_steps != 1))
        throw ConfigError("condense: theta steps may be 0 only when T == 1");
    if (c.real_batch_per_class < 1) throw ConfigError("condense: real batch must be >= 1");
    if (c.early_stop_window < 1) throw ConfigError("condense: early-stop window must be >= 1");
}

// ---------------------------------------------------------------------------
// SGD
// ---------------------------------------------------------------------------

// x <- x - lr * g
template <typename T>
void sgd_step(Tensor<T>& x, const Tensor<T>& g, T lr) {
    if (x.shape != g.shape)
        throw ShapeError("sgd_step: shape mismatch " + shape_str(x.shape) + " vs " + shape_str(g.shape));
    for (int64_t i = 0; i < x.size(); ++i) x[i] -= lr * g[i];
}

// v <- momentum * v + g; x <- x - lr * v
template <typename T>
void sgd_momentum_step(Tensor<T>& x, Tensor<T>& velocity, const Tensor<T>& g, T lr, T momentum) {
    if (x.shape != g.shape)
        throw ShapeError("sgd_step: shape mismatch " + shape_str(x.shape) + " vs " + shape_str(g.shape));
    if (velocity.v.empty()) velocity = Tensor<T>(x.shape);
    for (int64_t i = 0; i < x.size(); ++i) {
        velocity[i] = momentum * velocity[i] + g[i];
        x[i] -= lr * velocity[i];
    }
}

// ---------------------------------------------------------------------------
// class-conditional sampling
// ---------------------------------------------------------------------------

// n distinct samples of class c (all of them when n exceeds the class size),
// deterministic per rng state.
inline TrainSet sample_class_minibatch(const Dataset& ds, int cls, int n, Rng& rng) {
    if (cls < 0 || cls >= ds.classes)
        throw ConfigError("sample_class_minibatch: unknown class " + std::to_string(cls));
    std::vector<int> pool;
    for (size_t i = 0; i < ds.labels.size(); ++i)
        if (ds.labels[i] == cls) pool.push_back(static_cast<int>(i));
    if (pool.empty()) throw ConfigError("sample_class_minibatch: class " + std::to_string(cls) + " is empty");
    auto picks = rng.sample_without_replacement(static_cast<int>(pool.size()),
                                                std::min<int>(n, static_cast<int>(pool.size())));
    std::vector<int> indices;
    indices.reserve(picks.size());
    for (int p : picks) indices.push_back(pool[static_cast<size_t>(p)]);
    return subset(ds, indices);
}

// ---------------------------------------------------------------------------
// condense
// ---------------------------------------------------------------------------

struct CondenseHooks {
    std::function<void(int k, float mean_loss)> on_outer_step;
    std::function<void(int k, int t, int c, const Tensor<float>& images)> on_class_update;
};

struct CondenseResult {
    SyntheticSet set;
    std::vector<float> loss_history;  // per outer step, mean matching loss
    int outer_steps_run = 0;
    bool early_stopped = false;
    int peak_graph_depth = 0;
};

namespace detail {

inline Value<float> match_distance(Graph<float>& g, MatchDistance kind, const GradientSet<float>& a,
                                   const GradientSet<float>& b) {
    switch (kind) {
        case MatchDistance::Layerwise: return layerwise_match_distance(g, a, b);
        case MatchDistance::FlatEuclidean: return flat_euclidean_distance(g, a, b);
        case MatchDistance::FlatCosine: return flat_cosine_distance(g, a, b);
    }
    throw ConfigError("unknown distance");
}

// gradient payloads detached from their source graph
struct DetachedGrads {
    std::vector<Tensor<float>> tensors;
    std::vector<LayerKind> kinds;
    std::vector<int64_t> outs;

    static DetachedGrads from(const GradientSet<float>& s) {
        DetachedGrads d;
        for (const auto& e : s.entries) {
            d.tensors.push_back(e.grad.tensor());
            d.kinds.push_back(e.kind);
            d.outs.push_back(e.out);
        }
        return d;
    }

    GradientSet<float> bind(Graph<float>& g) const {
        GradientSet<float> s;
        for (size_t i = 0; i < tensors.size(); ++i)
            s.entries.push_back({g.constant(tensors[i]), kinds[i], outs[i]});
        return s;
    }
};

} // namespace detail

inline CondenseResult condense(const Dataset& ds, const ArchSpec& arch_in, const CondenseConfig& cfg,
                               const CondenseHooks& hooks = {}) {
    validate(cfg);
    const ArchSpec arch = arch_in.with_input(static_cast<int>(ds.channels()),
                                             static_cast<int>(ds.height()),
                                             static_cast<int>(ds.width()), ds.classes);
    const auto by_class = ds.indices_by_class();
    for (int c = 0; c < ds.classes; ++c)
        if (static_cast<int>(by_class[static_cast<size_t>(c)].size()) < cfg.ipc)
            throw ConfigError("condense: class " + std::to_string(c) + " has fewer than ipc samples");

    const int classes = ds.classes;
    const int64_t chans = ds.channels(), h = ds.height(), w = ds.width();
    const int64_t img_px = chans * h * w;

    CondenseResult res;
    res.set.classes = classes;
    res.set.ipc = cfg.ipc;
    res.set.norm_mean = ds.norm_mean;
    res.set.norm_std = ds.norm_std;
    res.set.provenance = "seed=" + std::to_string(cfg.seed) + " arch=" + arch_string(arch) +
                         " cfg=" + hex64(fnv1a64(cfg.describe()));
    res.set.images = Tensor<float>({int64_t(classes) * cfg.ipc, chans, h, w});
    res.set.labels.resize(static_cast<size_t>(classes) * cfg.ipc);
    for (int c = 0; c < classes; ++c)
        for (int k = 0; k < cfg.ipc; ++k)
            res.set.labels[static_cast<size_t>(c) * cfg.ipc + k] = c;

    {
        Rng rng(derive_stream(cfg.seed, 0x51));
        if (cfg.init == SynthInit::GaussianNoise) {
            for (auto& v : res.set.images.v) v = static_cast<float>(rng.normal());
        } else {
            for (int c = 0; c < classes; ++c) {
                const auto& pool = by_class[static_cast<size_t>(c)];
                auto picks = rng.sample_without_replacement(static_cast<int>(pool.size()), cfg.ipc);
                for (int k = 0; k < cfg.ipc; ++k) {
                    const int64_t src = pool[static_cast<size_t>(picks[static_cast<size_t>(k)])];
                    std::copy_n(ds.images.v.begin() + src * img_px, img_px,
                                res.set.images.v.begin() + (int64_t(c) * cfg.ipc + k) * img_px);
                }
            }
        }
    }

    std::vector<int> class_labels(static_cast<size_t>(cfg.ipc));
    Tensor<float>& images = res.set.images;
    int peak_depth = 0;

    int k = 0;
    try {
        for (; k < cfg.outer_steps; ++k) {
            auto params = init_params<float>(arch, derive_stream(cfg.seed, 0x52, static_cast<uint64_t>(k)));
            std::vector<Tensor<float>> vel_w(params.layers.size()), vel_b(params.layers.size());
            double loss_sum = 0;
            int64_t loss_count = 0;

            for (int t = 0; t < cfg.inner_steps; ++t) {
                if (arch.norm == NormKind::Batch) {
                    // refresh frozen statistics under the current weights
                    Rng rs(derive_stream(cfg.seed, 0x53, static_cast<uint64_t>(k), static_cast<uint64_t>(t)));
                    const int n = std::min<int>(cfg.real_batch_per_class,
                                                static_cast<int>(ds.size()));
                    auto picks = rs.sample_without_replacement(static_cast<int>(ds.size()), n);
                    params = freeze_batchnorm(params, subset(ds, picks).images);
                }

                std::vector<double> class_losses(static_cast<size_t>(classes), 0.0);
                std::vector<int> class_depth(static_cast<size_t>(classes), 0);
                auto class_step = [&](int64_t c0, int64_t c1) {
                    for (int64_t c = c0; c < c1; ++c) {
                        Rng rng(derive_stream(cfg.seed, 0x54,
                                              static_cast<uint64_t>(k) * cfg.inner_steps + t,
                                              static_cast<uint64_t>(c)));
                        auto real = sample_class_minibatch(ds, static_cast<int>(c),
                                                           cfg.real_batch_per_class, rng);
                        // real-side gradient; constant w.r.t. S
                        detail::DetachedGrads real_grads;
                        {
                            Graph<float> gr(cfg.parallel_classes ? 1 : cfg.workers);
                            auto bm = bind_params(gr, params, true);
                            auto loss = cross_entropy(gr, forward(gr, bm, gr.leaf(real.images)),
                                                      real.labels);
                            real_grads = detail::DetachedGrads::from(weight_gradients(gr, loss, bm));
                            class_depth[static_cast<size_t>(c)] =
                                std::max(class_depth[static_cast<size_t>(c)], gr.max_depth());
                        }

                        std::vector<int> labels_c(static_cast<size_t>(cfg.ipc), static_cast<int>(c));
                        for (int s = 0; s < cfg.synth_steps; ++s) {
                            Graph<float> gs(cfg.parallel_classes ? 1 : cfg.workers);
                            auto bm = bind_params(gs, params, true);
                            Tensor<float> sc({cfg.ipc, chans, h, w});
                            std::copy_n(images.v.begin() + c * cfg.ipc * img_px, cfg.ipc * img_px,
                                        sc.v.begin());
                            auto sv = gs.leaf(std::move(sc), true);
                            auto loss_s = cross_entropy(gs, forward(gs, bm, sv), labels_c);
                            auto grads_s = weight_gradients(gs, loss_s, bm);
                            auto dist = detail::match_distance(gs, cfg.distance, grads_s,
                                                               real_grads.bind(gs));
                            if (s == 0) class_losses[static_cast<size_t>(c)] = dist.item();
                            auto grad = gs.differentiate(dist, {sv})[0];
                            const auto& gt = grad.tensor();
                            float* base = images.data() + c * cfg.ipc * img_px;
                            for (int64_t i = 0; i < cfg.ipc * img_px; ++i)
                                base[i] -= cfg.synth_lr * gt[i];
                            class_depth[static_cast<size_t>(c)] =
                                std::max(class_depth[static_cast<size_t>(c)], gs.max_depth());
                        }
                        if (hooks.on_class_update)
                            hooks.on_class_update(k, t, static_cast<int>(c), images);
                    }
                };
                if (cfg.parallel_classes)
                    parallel_for(classes, cfg.workers, class_step);
                else
                    class_step(0, classes);
                for (int c = 0; c < classes; ++c) {
                    loss_sum += class_losses[static_cast<size_t>(c)];
                    peak_depth = std::max(peak_depth, class_depth[static_cast<size_t>(c)]);
                }
                loss_count += classes;

                // train the network on the whole synthetic set; weights live
                // outside the graph, so this update is detached from S
                for (int step = 0; step < cfg.theta_steps; ++step) {
                    Graph<float> gt(cfg.workers);
                    auto bm = bind_params(gt, params, true);
                    auto loss = cross_entropy(gt, forward(gt, bm, gt.leaf(images)), res.set.labels);
                    auto grads = gt.differentiate(loss, bm.all_values());
                    for (size_t l = 0; l < params.layers.size(); ++l) {
                        sgd_momentum_step(params.layers[l].weight, vel_w[l],
                                          grads[2 * l].tensor(), cfg.theta_lr, cfg.theta_momentum);
                        sgd_momentum_step(params.layers[l].bias, vel_b[l],
                                          grads[2 * l + 1].tensor(), cfg.theta_lr, cfg.theta_momentum);
                    }
                    peak_depth = std::max(peak_depth, gt.max_depth());
                }
            }

            const float mean_loss = static_cast<float>(loss_sum / static_cast<double>(loss_count));
            res.loss_history.push_back(mean_loss);
            if (hooks.on_outer_step) hooks.on_outer_step(k, mean_loss);

            const int win = cfg.early_stop_window;
            if (static_cast<int>(res.loss_history.size()) >= 2 * win &&
                static_cast<int>(res.loss_history.size()) % win == 0) {
                const auto& hist = res.loss_history;
                double prev = 0, cur = 0;
                for (int i = 0; i < win; ++i) {
                    prev += hist[hist.size() - 2 * win + i];
                    cur += hist[hist.size() - win + i];
                }
                prev /= win;
                cur /= win;
                if (prev - cur < cfg.early_stop_tol * std::abs(prev)) {
                    res.early_stopped = true;
                    ++k;
                    break;
                }
            }
        }
    } catch (const NumericError& e) {
        throw NumericError("condense diverged at outer step " + std::to_string(k) + " (seed " +
                           std::to_string(cfg.seed) + ", " + std::to_string(res.loss_history.size()) +
                           " completed steps): " + e.what());
    }

    res.outer_steps_run = k;
    res.peak_graph_depth = peak_depth;
    return res;
}

} // namespace dc
