#pragma once

// Architecture specs, parameter containers, and forward passes for the three
// model families: MLP, the modular ConvNet (denoted [W,N,A,P]xD), and LeNet.
// Forward passes are built from graph primitives so weight gradients remain
// differentiable for the matching objective.

#include <cctype>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "dc/graph.hpp"
#include "dc/rng.hpp"
#include "dc/tensor.hpp"

namespace dc {

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& m) : std::runtime_error(m) {}
};

enum class ArchKind { Mlp, ConvNet, LeNet };
enum class NormKind { None, Batch, Layer, Instance, Group };
enum class ActKind { Sigmoid, Relu, LeakyRelu };
enum class PoolKind { None, Max, Avg };

struct ArchSpec {
    ArchKind kind = ArchKind::ConvNet;
    int width = 128;
    int depth = 3;
    NormKind norm = NormKind::Instance;
    ActKind act = ActKind::Relu;
    PoolKind pool = PoolKind::Avg;
    int in_channels = 1;
    int in_h = 28;
    int in_w = 28;
    int classes = 10;

    ArchSpec with_input(int c, int h, int w, int n_classes) const {
        ArchSpec s = *this;
        s.in_channels = c;
        s.in_h = h;
        s.in_w = w;
        s.classes = n_classes;
        return s;
    }
};

inline ArchSpec default_spec(ArchKind kind) {
    ArchSpec s;
    s.kind = kind;
    switch (kind) {
        case ArchKind::ConvNet: break;  // [128, instance, relu, avg] x 3
        case ArchKind::Mlp:
            s.width = 128; s.depth = 2;
            s.norm = NormKind::None; s.pool = PoolKind::None; s.act = ActKind::Relu;
            break;
        case ArchKind::LeNet:
            // relu activation, averaging subsampling as in the original design
            s.norm = NormKind::None; s.act = ActKind::Relu; s.pool = PoolKind::Avg;
            s.width = 0; s.depth = 0;
            break;
    }
    return s;
}

inline const char* to_string(NormKind n) {
    switch (n) {
        case NormKind::None: return "none";
        case NormKind::Batch: return "batch";
        case NormKind::Layer: return "layer";
        case NormKind::Instance: return "instance";
        case NormKind::Group: return "group";
    }
    return "?";
}
inline const char* to_string(ActKind a) {
    switch (a) {
        case ActKind::Sigmoid: return "sigmoid";
        case ActKind::Relu: return "relu";
        case ActKind::LeakyRelu: return "leakyrelu";
    }
    return "?";
}
inline const char* to_string(PoolKind p) {
    switch (p) {
        case PoolKind::None: return "none";
        case PoolKind::Max: return "max";
        case PoolKind::Avg: return "avg";
    }
    return "?";
}

inline std::string arch_string(const ArchSpec& s) {
    std::ostringstream os;
    switch (s.kind) {
        case ArchKind::Mlp:
            os << "mlp:W=" << s.width << ",D=" << s.depth;
            break;
        case ArchKind::LeNet:
            os << "lenet:A=" << to_string(s.act) << ",P=" << to_string(s.pool);
            break;
        case ArchKind::ConvNet:
            os << "convnet:W=" << s.width << ",D=" << s.depth << ",N=" << to_string(s.norm)
               << ",A=" << to_string(s.act) << ",P=" << to_string(s.pool);
            break;
    }
    return os.str();
}

// Grammar: kind[:key=value,...] with kind in {mlp, convnet, lenet},
// keys W,D,N,A,P (case-insensitive keys, lowercase values).
inline ArchSpec parse_arch(const std::string& text) {
    const auto colon = text.find(':');
    const std::string kind_s = text.substr(0, colon);
    ArchSpec s;
    if (kind_s == "mlp") s = default_spec(ArchKind::Mlp);
    else if (kind_s == "convnet") s = default_spec(ArchKind::ConvNet);
    else if (kind_s == "lenet") s = default_spec(ArchKind::LeNet);
    else throw ConfigError("unknown architecture kind '" + kind_s + "' in '" + text + "'");
    if (colon == std::string::npos) return s;

    std::stringstream rest(text.substr(colon + 1));
    std::string item;
    while (std::getline(rest, item, ',')) {
        if (item.empty()) continue;
        const auto eq = item.find('=');
        if (eq == std::string::npos)
            throw ConfigError("expected key=value in arch string, got '" + item + "'");
        std::string key = item.substr(0, eq);
        const std::string val = item.substr(eq + 1);
        for (auto& ch : key) ch = static_cast<char>(std::toupper(ch));
        if (key == "W") s.width = std::stoi(val);
        else if (key == "D") s.depth = std::stoi(val);
        else if (key == "N") {
            if (val == "none") s.norm = NormKind::None;
            else if (val == "batch") s.norm = NormKind::Batch;
            else if (val == "layer") s.norm = NormKind::Layer;
            else if (val == "instance") s.norm = NormKind::Instance;
            else if (val == "group") s.norm = NormKind::Group;
            else throw ConfigError("unknown norm '" + val + "'");
        } else if (key == "A") {
            if (val == "sigmoid") s.act = ActKind::Sigmoid;
            else if (val == "relu") s.act = ActKind::Relu;
            else if (val == "leakyrelu") s.act = ActKind::LeakyRelu;
            else throw ConfigError("unknown activation '" + val + "'");
        } else if (key == "P") {
            if (val == "none") s.pool = PoolKind::None;
            else if (val == "max") s.pool = PoolKind::Max;
            else if (val == "avg") s.pool = PoolKind::Avg;
            else throw ConfigError("unknown pooling '" + val + "'");
        } else {
            throw ConfigError("unknown arch key '" + key + "'");
        }
    }
    if (s.kind != ArchKind::LeNet && (s.width <= 0 || s.depth <= 0))
        throw ConfigError("width and depth must be positive in '" + text + "'");
    return s;
}

// Networks trained on a handful of condensed images cannot estimate batch
// statistics; Batch norm is evaluated as Instance norm.
inline ArchSpec evaluation_arch(const ArchSpec& s) {
    ArchSpec out = s;
    if (out.norm == NormKind::Batch) out.norm = NormKind::Instance;
    return out;
}

constexpr double kNormEps = 1e-5;
constexpr int kGroupNormGroups = 4;

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

enum class LayerKind { Fc, Conv, Norm };

template <typename T>
struct ParamLayer {
    LayerKind kind = LayerKind::Fc;
    Tensor<T> weight;               // Fc [out,in]; Conv [out,in,kh,kw]; Norm gamma [C]
    Tensor<T> bias;                 // Fc/Conv [out]; Norm beta [C]
    int64_t pad_h = 0, pad_w = 0;   // Conv only
    Tensor<T> frozen_mean, frozen_var;  // Batch norm, once frozen
    bool frozen = false;
};

template <typename T>
struct ModelParams {
    ArchSpec spec;
    std::vector<ParamLayer<T>> layers;

    int64_t total_parameters() const {
        int64_t n = 0;
        for (const auto& l : layers) n += l.weight.size() + l.bias.size();
        return n;
    }

    template <typename U>
    ModelParams<U> cast() const {
        ModelParams<U> out;
        out.spec = spec;
        out.layers.reserve(layers.size());
        for (const auto& l : layers) {
            ParamLayer<U> o;
            o.kind = l.kind;
            o.weight = l.weight.template cast<U>();
            o.bias = l.bias.template cast<U>();
            o.pad_h = l.pad_h;
            o.pad_w = l.pad_w;
            o.frozen = l.frozen;
            if (l.frozen) {
                o.frozen_mean = l.frozen_mean.template cast<U>();
                o.frozen_var = l.frozen_var.template cast<U>();
            }
            out.layers.push_back(std::move(o));
        }
        return out;
    }
};

namespace detail {

struct LayerDef {
    LayerKind kind;
    int64_t out = 0, in = 0, kh = 0, kw = 0, ph = 0, pw = 0;  // Fc uses out,in
    int64_t channels = 0;                                     // Norm
};

struct PlanStep {
    enum class What { Layer, Act, Pool, Flatten } what;
    int layer = -1;  // index into layer list for What::Layer
};

struct ArchPlan {
    std::vector<LayerDef> layers;
    std::vector<PlanStep> steps;
    int64_t feature_dim = 0;   // penultimate feature dimension
    int penultimate_step = 0;  // feature tap: step index AFTER which features are read
};

inline void pooled(int64_t& h, int64_t& w) {
    if (h % 2) h++;
    if (w % 2) w++;
    h /= 2;
    w /= 2;
}

inline ArchPlan plan_arch(const ArchSpec& s) {
    ArchPlan p;
    auto add_layer = [&](LayerDef d) {
        p.layers.push_back(d);
        p.steps.push_back({PlanStep::What::Layer, static_cast<int>(p.layers.size()) - 1});
    };
    auto act = [&] { p.steps.push_back({PlanStep::What::Act, -1}); };
    auto pool = [&] { p.steps.push_back({PlanStep::What::Pool, -1}); };
    auto flatten = [&] { p.steps.push_back({PlanStep::What::Flatten, -1}); };

    const int64_t c = s.in_channels;
    int64_t h = s.in_h, w = s.in_w;

    switch (s.kind) {
        case ArchKind::Mlp: {
            flatten();
            int64_t in = c * h * w;
            for (int d = 0; d < s.depth; ++d) {
                add_layer({LayerKind::Fc, s.width, in});
                act();
                in = s.width;
            }
            p.feature_dim = in;
            p.penultimate_step = static_cast<int>(p.steps.size()) - 1;
            add_layer({LayerKind::Fc, s.classes, in});
            break;
        }
        case ArchKind::ConvNet: {
            int64_t ch = c;
            for (int d = 0; d < s.depth; ++d) {
                add_layer({LayerKind::Conv, s.width, ch, 3, 3, 1, 1});
                ch = s.width;
                if (s.norm != NormKind::None)
                    add_layer({LayerKind::Norm, 0, 0, 0, 0, 0, 0, ch});
                act();
                if (s.pool != PoolKind::None) {
                    pool();
                    pooled(h, w);
                }
            }
            p.feature_dim = ch;  // global average pooled
            p.penultimate_step = static_cast<int>(p.steps.size()) - 1;
            flatten();
            add_layer({LayerKind::Fc, s.classes, ch * h * w});
            break;
        }
        case ArchKind::LeNet: {
            add_layer({LayerKind::Conv, 6, c, 5, 5, 2, 2});
            act();
            if (s.pool != PoolKind::None) { pool(); pooled(h, w); }
            if (h < 5 || w < 5) throw ShapeError("lenet: input too small: " + std::to_string(h) + "x" + std::to_string(w));
            add_layer({LayerKind::Conv, 16, 6, 5, 5, 0, 0});
            h -= 4; w -= 4;
            act();
            if (s.pool != PoolKind::None) { pool(); pooled(h, w); }
            flatten();
            add_layer({LayerKind::Fc, 120, 16 * h * w});
            act();
            add_layer({LayerKind::Fc, 84, 120});
            act();
            p.feature_dim = 84;
            p.penultimate_step = static_cast<int>(p.steps.size()) - 1;
            add_layer({LayerKind::Fc, s.classes, 84});
            break;
        }
    }
    return p;
}

} // namespace detail

// Kaiming-initialized parameters: weights ~ N(0, sqrt(2/fan_in)), zero biases,
// identity affine for normalization layers. Deterministic per seed.
template <typename T>
ModelParams<T> init_params(const ArchSpec& spec, uint64_t seed) {
    const auto plan = detail::plan_arch(spec);
    if (spec.norm == NormKind::Group && spec.kind == ArchKind::ConvNet && spec.width % kGroupNormGroups != 0)
        throw ShapeError("group norm requires width divisible by " + std::to_string(kGroupNormGroups));
    Rng rng(derive_stream(seed, 0x1a17));
    ModelParams<T> p;
    p.spec = spec;
    for (const auto& d : plan.layers) {
        ParamLayer<T> l;
        l.kind = d.kind;
        switch (d.kind) {
            case LayerKind::Fc: {
                l.weight = Tensor<T>({d.out, d.in});
                const double std = std::sqrt(2.0 / static_cast<double>(d.in));
                for (auto& v : l.weight.v) v = static_cast<T>(rng.normal(0.0, std));
                l.bias = Tensor<T>({d.out});
                break;
            }
            case LayerKind::Conv: {
                l.weight = Tensor<T>({d.out, d.in, d.kh, d.kw});
                const double std = std::sqrt(2.0 / static_cast<double>(d.in * d.kh * d.kw));
                for (auto& v : l.weight.v) v = static_cast<T>(rng.normal(0.0, std));
                l.bias = Tensor<T>({d.out});
                l.pad_h = d.ph;
                l.pad_w = d.pw;
                break;
            }
            case LayerKind::Norm: {
                l.weight = Tensor<T>::full({d.channels}, T{1});
                l.bias = Tensor<T>({d.channels});
                break;
            }
        }
        p.layers.push_back(std::move(l));
    }
    return p;
}

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

template <typename T>
struct BoundModel {
    const ModelParams<T>* params = nullptr;
    std::vector<Value<T>> weights;
    std::vector<Value<T>> biases;

    // FC / Conv weight values in layer order, for gradient sets
    std::vector<Value<T>> weight_values() const {
        std::vector<Value<T>> out;
        for (size_t i = 0; i < weights.size(); ++i)
            if (params->layers[i].kind != LayerKind::Norm) out.push_back(weights[i]);
        return out;
    }

    std::vector<Value<T>> all_values() const {
        std::vector<Value<T>> out;
        for (size_t i = 0; i < weights.size(); ++i) {
            out.push_back(weights[i]);
            out.push_back(biases[i]);
        }
        return out;
    }
};

template <typename T>
BoundModel<T> bind_params(Graph<T>& g, const ModelParams<T>& p, bool trainable = true) {
    BoundModel<T> b;
    b.params = &p;
    for (const auto& l : p.layers) {
        b.weights.push_back(g.leaf(l.weight, trainable));
        b.biases.push_back(g.leaf(l.bias, trainable));
    }
    return b;
}

namespace detail {

template <typename T>
Value<T> apply_act(Graph<T>& g, Value<T> x, ActKind a) {
    switch (a) {
        case ActKind::Sigmoid: return g.sigmoid(x);
        case ActKind::Relu: return g.relu(x);
        case ActKind::LeakyRelu: return g.leaky_relu(x, T(0.01));
    }
    return x;
}

template <typename T>
Value<T> apply_pool(Graph<T>& g, Value<T> x, PoolKind p) {
    const auto& s = x.shape();
    const int64_t h = s[s.size() - 2], w = s[s.size() - 1];
    if (h % 2 || w % 2) x = g.pad2d(x, 0, h % 2, 0, w % 2);
    return p == PoolKind::Max ? g.maxpool2(x) : g.avgpool2(x);
}

// per-channel affine: y = x * gamma + beta with gamma/beta of shape [C]
template <typename T>
Value<T> channel_affine(Graph<T>& g, Value<T> x, Value<T> gamma, Value<T> beta) {
    const auto& s = x.shape();
    Shape cs(s.size(), 1);
    cs[1] = s[1];
    auto gb = g.broadcast_to(g.reshape(gamma, cs), s);
    auto bb = g.broadcast_to(g.reshape(beta, cs), s);
    return g.add(g.mul(x, gb), bb);
}

template <typename T>
Value<T> normalize_axes(Graph<T>& g, Value<T> x, std::vector<int> axes) {
    auto mu = g.reduce_mean(x, axes);
    auto centered = g.sub(x, g.broadcast_to(mu, x.shape()));
    auto var = g.reduce_mean(g.mul(centered, centered), std::move(axes));
    auto denom = g.broadcast_to(g.sqrt(g.scalar_add(var, T(kNormEps))), x.shape());
    return g.div(centered, denom);
}

template <typename T>
Value<T> apply_norm(Graph<T>& g, Value<T> x, NormKind kind,
                    const ParamLayer<T>& layer, Value<T> gamma, Value<T> beta) {
    const auto& s = x.shape();
    Value<T> y;
    switch (kind) {
        case NormKind::Instance:
            y = normalize_axes(g, x, {2, 3});
            break;
        case NormKind::Layer:
            y = normalize_axes(g, x, {1, 2, 3});
            break;
        case NormKind::Group: {
            const int64_t groups = kGroupNormGroups;
            auto xg = g.reshape(x, {s[0], groups, s[1] / groups * s[2] * s[3]});
            y = g.reshape(normalize_axes(g, xg, {2}), s);
            break;
        }
        case NormKind::Batch: {
            if (layer.frozen) {
                Shape cs(s.size(), 1);
                cs[1] = s[1];
                auto mu = g.broadcast_to(g.constant(Tensor<T>(cs, layer.frozen_mean.v)), s);
                auto sd = g.broadcast_to(
                    g.sqrt(g.scalar_add(g.constant(Tensor<T>(cs, layer.frozen_var.v)), T(kNormEps))), s);
                y = g.div(g.sub(x, mu), sd);
            } else {
                y = normalize_axes(g, x, {0, 2, 3});
            }
            break;
        }
        case NormKind::None:
            y = x;
            break;
    }
    return channel_affine(g, y, gamma, beta);
}

template <typename T>
Value<T> fc_layer(Graph<T>& g, Value<T> x, Value<T> w, Value<T> b) {
    auto y = g.matmul(x, g.transpose(w));
    const auto& s = y.shape();
    return g.add(y, g.broadcast_to(g.reshape(b, {1, s[1]}), s));
}

template <typename T>
Value<T> conv_layer(Graph<T>& g, Value<T> x, Value<T> w, Value<T> b, int64_t ph, int64_t pw) {
    auto y = g.conv2d(x, w, ph, pw);
    const auto& s = y.shape();
    Shape cs{1, s[1], 1, 1};
    return g.add(y, g.broadcast_to(g.reshape(b, cs), s));
}

// Runs the plan; returns logits, or penultimate features when want_features.
template <typename T>
Value<T> run_plan(Graph<T>& g, const BoundModel<T>& bm, Value<T> x, bool want_features) {
    const ArchSpec& spec = bm.params->spec;
    const auto plan = plan_arch(spec);
    const auto& bs = x.shape();
    if (bs.size() != 4 || bs[1] != spec.in_channels || bs[2] != spec.in_h || bs[3] != spec.in_w)
        throw ShapeError("forward: batch shape " + shape_str(bs) + " does not match input " +
                         std::to_string(spec.in_channels) + "x" + std::to_string(spec.in_h) + "x" +
                         std::to_string(spec.in_w));
    Value<T> v = x;
    for (size_t si = 0; si < plan.steps.size(); ++si) {
        const auto& st = plan.steps[si];
        switch (st.what) {
            case PlanStep::What::Layer: {
                const auto& d = plan.layers[static_cast<size_t>(st.layer)];
                const auto& pl = bm.params->layers[static_cast<size_t>(st.layer)];
                auto wv = bm.weights[static_cast<size_t>(st.layer)];
                auto bv = bm.biases[static_cast<size_t>(st.layer)];
                if (d.kind == LayerKind::Fc) v = fc_layer(g, v, wv, bv);
                else if (d.kind == LayerKind::Conv) v = conv_layer(g, v, wv, bv, d.ph, d.pw);
                else v = apply_norm(g, v, spec.norm, pl, wv, bv);
                break;
            }
            case PlanStep::What::Act:
                v = apply_act(g, v, spec.act);
                break;
            case PlanStep::What::Pool:
                v = apply_pool(g, v, spec.pool);
                break;
            case PlanStep::What::Flatten: {
                const auto& s = v.shape();
                v = g.reshape(v, {s[0], numel(s) / s[0]});
                break;
            }
        }
        if (want_features && static_cast<int>(si) == plan.penultimate_step) {
            if (spec.kind == ArchKind::ConvNet && v.shape().size() == 4)
                return g.reshape(g.reduce_mean(v, {2, 3}), {v.shape()[0], v.shape()[1]});
            const auto& s = v.shape();
            return s.size() == 2 ? v : g.reshape(v, {s[0], numel(s) / s[0]});
        }
    }
    return v;
}

} // namespace detail

template <typename T>
Value<T> forward(Graph<T>& g, const BoundModel<T>& bm, Value<T> batch) {
    return detail::run_plan(g, bm, batch, false);
}

// Penultimate representation: spatially averaged final block for ConvNet,
// last hidden activation for MLP/LeNet.
template <typename T>
Value<T> forward_features(Graph<T>& g, const BoundModel<T>& bm, Value<T> batch) {
    return detail::run_plan(g, bm, batch, true);
}

inline int64_t feature_dim(const ArchSpec& spec) { return detail::plan_arch(spec).feature_dim; }

// Estimates per-channel statistics from a real sample and stores them as
// constants; later forwards reuse them instead of batch statistics.
template <typename T>
ModelParams<T> freeze_batchnorm(const ModelParams<T>& params, const Tensor<T>& real_sample) {
    if (params.spec.norm != NormKind::Batch)
        throw ConfigError("freeze_batchnorm: architecture '" + arch_string(params.spec) +
                          "' has no batch normalization");
    ModelParams<T> out = params;
    Graph<T> g;
    auto bm = bind_params(g, out, false);
    const auto plan = detail::plan_arch(out.spec);
    Value<T> v = g.constant(real_sample);
    for (const auto& st : plan.steps) {
        switch (st.what) {
            case detail::PlanStep::What::Layer: {
                const auto& d = plan.layers[static_cast<size_t>(st.layer)];
                auto& pl = out.layers[static_cast<size_t>(st.layer)];
                auto wv = bm.weights[static_cast<size_t>(st.layer)];
                auto bv = bm.biases[static_cast<size_t>(st.layer)];
                if (d.kind == LayerKind::Fc) v = detail::fc_layer(g, v, wv, bv);
                else if (d.kind == LayerKind::Conv) v = detail::conv_layer(g, v, wv, bv, d.ph, d.pw);
                else {
                    auto mu = g.reduce_mean(v, {0, 2, 3});
                    auto centered = g.sub(v, g.broadcast_to(mu, v.shape()));
                    auto var = g.reduce_mean(g.mul(centered, centered), {0, 2, 3});
                    pl.frozen_mean = Tensor<T>({v.shape()[1]}, mu.tensor().v);
                    pl.frozen_var = Tensor<T>({v.shape()[1]}, var.tensor().v);
                    pl.frozen = true;
                    auto denom = g.broadcast_to(g.sqrt(g.scalar_add(var, T(kNormEps))), v.shape());
                    v = detail::channel_affine(g, g.div(centered, denom), wv, bv);
                }
                break;
            }
            case detail::PlanStep::What::Act:
                v = detail::apply_act(g, v, out.spec.act);
                break;
            case detail::PlanStep::What::Pool:
                v = detail::apply_pool(g, v, out.spec.pool);
                break;
            case detail::PlanStep::What::Flatten: {
                const auto& s = v.shape();
                v = g.reshape(v, {s[0], numel(s) / s[0]});
                break;
            }
        }
    }
    return out;
}

} // namespace dc
