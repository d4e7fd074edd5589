#pragma once

// Classification loss and gradient-distance functions. The layerwise distance
// groups each weight gradient by output node (rows of FC weights, filters of
// conv weights) and sums one-minus-cosine over the groups; this is the
// matching objective minimized w.r.t. the synthetic pixels.
//
// Bias and normalization-affine gradients take part in SGD updates but are
// excluded from the distances (only 2D and 4D weight gradients are matched).

#include <string>
#include <vector>

#include "dc/graph.hpp"
#include "dc/nets.hpp"
#include "dc/tensor.hpp"

namespace dc {

constexpr double kCosineEps = 1e-6;

// Added under the square root when computing row norms. Keeps the derivative
// of the distance finite (and exactly zero) at all-zero gradient rows, which
// do occur with dead relu units on class-pure batches. A zero row still
// contributes 1 - 0/(0 + eps) = 1 to the distance.
constexpr double kSqrtGuard = 1e-12;

// Mean over the batch of -log softmax(logits)[label], stabilized with
// row-max subtraction.
template <typename T>
Value<T> cross_entropy(Graph<T>& g, Value<T> logits, const std::vector<int>& labels) {
    const auto& s = logits.shape();
    if (s.size() != 2) throw ShapeError("cross_entropy: logits must be [B,C], got " + shape_str(s));
    const int64_t batch = s[0], classes = s[1];
    if (static_cast<int64_t>(labels.size()) != batch)
        throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch " +
                         std::to_string(batch));
    Tensor<T> onehot({batch, classes});
    for (int64_t i = 0; i < batch; ++i) {
        const int y = labels[static_cast<size_t>(i)];
        if (y < 0 || y >= classes)
            throw ShapeError("cross_entropy: label " + std::to_string(y) + " out of range [0," +
                             std::to_string(classes) + ")");
        onehot[i * classes + y] = T{1};
    }
    auto m = g.reduce_max(logits, 1);
    auto z = g.sub(logits, g.broadcast_to(m, s));
    auto lse = g.add(g.log(g.reduce_sum(g.exp(z), {1})), m);
    auto picked = g.reduce_sum(g.mul(logits, g.constant(std::move(onehot))), {1});
    auto nll = g.sub(lse, picked);
    return g.scalar_mul(g.reshape(g.reduce_sum(nll, {0}), {1}), T{1} / static_cast<T>(batch));
}

// One gradient tensor per FC/conv weight layer, in model layer order.
template <typename T>
struct GradientSet {
    struct Entry {
        Value<T> grad;
        LayerKind kind = LayerKind::Fc;
        int64_t out = 0;
    };
    std::vector<Entry> entries;

    // Re-wrap the gradient payloads as constants of another graph.
    GradientSet as_constants(Graph<T>& dst) const {
        GradientSet out;
        out.entries.reserve(entries.size());
        for (const auto& e : entries)
            out.entries.push_back({dst.constant(e.grad.tensor()), e.kind, e.out});
        return out;
    }
};

// Differentiates `loss` w.r.t. the model's FC/conv weights.
template <typename T>
GradientSet<T> weight_gradients(Graph<T>& g, Value<T> loss, const BoundModel<T>& bm) {
    auto wrt = bm.weight_values();
    auto grads = g.differentiate(loss, wrt);
    GradientSet<T> set;
    size_t gi = 0;
    for (size_t i = 0; i < bm.weights.size(); ++i) {
        const auto& pl = bm.params->layers[i];
        if (pl.kind == LayerKind::Norm) continue;
        set.entries.push_back({grads[gi++], pl.kind, pl.weight.shape[0]});
    }
    return set;
}

namespace detail {

template <typename T>
void check_same_structure(const char* who, const GradientSet<T>& a, const GradientSet<T>& b) {
    if (a.entries.size() != b.entries.size())
        throw ShapeError(std::string(who) + ": gradient sets have " + std::to_string(a.entries.size()) +
                         " vs " + std::to_string(b.entries.size()) + " layers");
    for (size_t i = 0; i < a.entries.size(); ++i)
        if (a.entries[i].grad.shape() != b.entries[i].grad.shape() ||
            a.entries[i].kind != b.entries[i].kind)
            throw ShapeError(std::string(who) + ": layer " + std::to_string(i) + " mismatch " +
                             shape_str(a.entries[i].grad.shape()) + " vs " +
                             shape_str(b.entries[i].grad.shape()));
}

template <typename T>
Value<T> rows(Graph<T>& g, const typename GradientSet<T>::Entry& e) {
    const auto& s = e.grad.shape();
    return g.reshape(e.grad, {s[0], numel(s) / s[0]});
}

} // namespace detail

// D = sum over layers, sum over output nodes i of (1 - cos(A_i, B_i)),
// with epsilon-guarded denominators. A pair of all-zero rows counts as
// fully unmatched (contributes 1).
template <typename T>
Value<T> layerwise_match_distance(Graph<T>& g, const GradientSet<T>& a, const GradientSet<T>& b) {
    detail::check_same_structure("layerwise_match_distance", a, b);
    Value<T> total = g.scalar(T{0});
    for (size_t l = 0; l < a.entries.size(); ++l) {
        auto ar = detail::rows(g, a.entries[l]);
        auto br = detail::rows(g, b.entries[l]);
        auto dot = g.reduce_sum(g.mul(ar, br), {1});
        auto na = g.sqrt(g.scalar_add(g.reduce_sum(g.mul(ar, ar), {1}), T(kSqrtGuard)));
        auto nb = g.sqrt(g.scalar_add(g.reduce_sum(g.mul(br, br), {1}), T(kSqrtGuard)));
        auto cosine = g.div(dot, g.scalar_add(g.mul(na, nb), T(kCosineEps)));
        auto ones = g.full(cosine.shape(), T{1});
        total = g.add(total, g.reduce_sum_all(g.sub(ones, cosine)));
    }
    return total;
}

// Squared L2 distance between the concatenated gradient vectors.
template <typename T>
Value<T> flat_euclidean_distance(Graph<T>& g, const GradientSet<T>& a, const GradientSet<T>& b) {
    detail::check_same_structure("flat_euclidean_distance", a, b);
    Value<T> total = g.scalar(T{0});
    for (size_t l = 0; l < a.entries.size(); ++l) {
        auto d = g.sub(a.entries[l].grad, b.entries[l].grad);
        total = g.add(total, g.reduce_sum_all(g.mul(d, d)));
    }
    return total;
}

// 1 - cos between the concatenated gradient vectors.
template <typename T>
Value<T> flat_cosine_distance(Graph<T>& g, const GradientSet<T>& a, const GradientSet<T>& b) {
    detail::check_same_structure("flat_cosine_distance", a, b);
    Value<T> dot = g.scalar(T{0});
    Value<T> na2 = g.scalar(T{0});
    Value<T> nb2 = g.scalar(T{0});
    for (size_t l = 0; l < a.entries.size(); ++l) {
        const auto& av = a.entries[l].grad;
        const auto& bv = b.entries[l].grad;
        dot = g.add(dot, g.reduce_sum_all(g.mul(av, bv)));
        na2 = g.add(na2, g.reduce_sum_all(g.mul(av, av)));
        nb2 = g.add(nb2, g.reduce_sum_all(g.mul(bv, bv)));
    }
    auto denom = g.scalar_add(g.mul(g.sqrt(g.scalar_add(na2, T(kSqrtGuard))),
                                    g.sqrt(g.scalar_add(nb2, T(kSqrtGuard)))),
                              T(kCosineEps));
    return g.sub(g.scalar(T{1}), g.div(dot, denom));
}

} // namespace dc
