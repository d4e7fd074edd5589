#pragma once

// Reverse-mode differentiation engine. Nodes are appended to an arena and
// evaluated eagerly; `differentiate` walks the arena backwards and expresses
// every vector-Jacobian product with the same primitives, so the returned
// gradients are ordinary graph values and can be differentiated again
// (double backprop). Parents always precede children in the arena, which
// makes the graph acyclic by construction.
//
// Routing decisions (max-pool winners, max-reduce argmax, relu masks) are
// frozen at forward time and reused in every backward pass; their own second
// derivative is zero almost everywhere.

#include <array>
#include <cmath>
#include <cstdint>
#include <deque>
#include <memory>
#include <string>
#include <vector>

#include "dc/kernels.hpp"
#include "dc/tensor.hpp"

namespace dc {

enum class Op : uint8_t {
    Leaf,
    Add, Sub, Mul, Div, ScalarMul, ScalarAdd,
    MatMul, Transpose,
    Conv2d, Conv2dDx, Conv2dDw,
    AvgPool2, AvgUnpool2, MaxPool2, PoolScatter2, PoolGather2,
    Pad2d, Crop2d,
    Relu, LeakyRelu, Sigmoid, Exp, Log, Sqrt,
    Reshape, Broadcast,
    ReduceSum, ReduceMean, ReduceMax, AxisScatter, AxisGather,
};

inline const char* op_name(Op op) {
    switch (op) {
        case Op::Leaf: return "leaf";
        case Op::Add: return "add";
        case Op::Sub: return "sub";
        case Op::Mul: return "mul";
        case Op::Div: return "div";
        case Op::ScalarMul: return "scalar_mul";
        case Op::ScalarAdd: return "scalar_add";
        case Op::MatMul: return "matmul";
        case Op::Transpose: return "transpose";
        case Op::Conv2d: return "conv2d";
        case Op::Conv2dDx: return "conv2d_dx";
        case Op::Conv2dDw: return "conv2d_dw";
        case Op::AvgPool2: return "avgpool2";
        case Op::AvgUnpool2: return "avgunpool2";
        case Op::MaxPool2: return "maxpool2";
        case Op::PoolScatter2: return "pool_scatter2";
        case Op::PoolGather2: return "pool_gather2";
        case Op::Pad2d: return "pad2d";
        case Op::Crop2d: return "crop2d";
        case Op::Relu: return "relu";
        case Op::LeakyRelu: return "leaky_relu";
        case Op::Sigmoid: return "sigmoid";
        case Op::Exp: return "exp";
        case Op::Log: return "log";
        case Op::Sqrt: return "sqrt";
        case Op::Reshape: return "reshape";
        case Op::Broadcast: return "broadcast";
        case Op::ReduceSum: return "reduce_sum";
        case Op::ReduceMean: return "reduce_mean";
        case Op::ReduceMax: return "reduce_max";
        case Op::AxisScatter: return "axis_scatter";
        case Op::AxisGather: return "axis_gather";
    }
    return "?";
}

template <typename T> class Graph;

template <typename T>
struct Value {
    Graph<T>* graph = nullptr;
    int id = -1;

    bool valid() const { return graph != nullptr && id >= 0; }
    const Tensor<T>& tensor() const { return graph->tensor_of(id); }
    const Shape& shape() const { return tensor().shape; }
    int64_t size() const { return tensor().size(); }
    T item() const { return tensor().v.at(0); }
};

template <typename T>
class Graph {
public:
    explicit Graph(int workers = 1) : workers_(workers < 1 ? 1 : workers) {}

    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    int size() const { return static_cast<int>(nodes_.size()); }
    int max_depth() const { return max_depth_; }
    int workers() const { return workers_; }

    const Tensor<T>& tensor_of(int id) const { return nodes_[static_cast<size_t>(id)].val; }
    Op op_of(int id) const { return nodes_[static_cast<size_t>(id)].op; }
    int depth_of(int id) const { return nodes_[static_cast<size_t>(id)].depth; }
    bool requires_grad(Value<T> v) const { return nodes_[static_cast<size_t>(v.id)].requires_grad; }

    // Every parent id is smaller than its child id.
    bool structurally_acyclic() const {
        for (size_t i = 0; i < nodes_.size(); ++i)
            for (int p : {nodes_[i].p0, nodes_[i].p1})
                if (p >= static_cast<int>(i)) return false;
        return true;
    }

    int parent_count(Value<T> v) const {
        const auto& n = nodes_[static_cast<size_t>(v.id)];
        return (n.p0 >= 0) + (n.p1 >= 0);
    }

    // ---- leaves ----

    Value<T> leaf(Tensor<T> t, bool requires_grad = false) {
        Node n;
        n.op = Op::Leaf;
        n.val = std::move(t);
        n.requires_grad = requires_grad;
        return finish(std::move(n));
    }

    Value<T> constant(Tensor<T> t) { return leaf(std::move(t), false); }
    Value<T> full(Shape s, T v) { return constant(Tensor<T>::full(std::move(s), v)); }
    Value<T> scalar(T v) { return constant(Tensor<T>::scalar(v)); }

    Value<T> detach(Value<T> v) { return leaf(v.tensor(), false); }

    // ---- elementwise ----

    Value<T> add(Value<T> a, Value<T> b) { return ew(Op::Add, a, b); }
    Value<T> sub(Value<T> a, Value<T> b) { return ew(Op::Sub, a, b); }
    Value<T> mul(Value<T> a, Value<T> b) { return ew(Op::Mul, a, b); }
    Value<T> div(Value<T> a, Value<T> b) { return ew(Op::Div, a, b); }

    Value<T> scalar_mul(Value<T> a, T c) {
        Node n = unary(Op::ScalarMul, a);
        n.scalar = c;
        for (auto& x : n.val.v) x *= c;
        return finish(std::move(n));
    }

    Value<T> scalar_add(Value<T> a, T c) {
        Node n = unary(Op::ScalarAdd, a);
        n.scalar = c;
        for (auto& x : n.val.v) x += c;
        return finish(std::move(n));
    }

    Value<T> relu(Value<T> a) {
        Node n = unary(Op::Relu, a);
        for (auto& x : n.val.v) x = x > T{0} ? x : T{0};
        return finish(std::move(n));
    }

    Value<T> leaky_relu(Value<T> a, T slope = T(0.01)) {
        Node n = unary(Op::LeakyRelu, a);
        n.scalar = slope;
        for (auto& x : n.val.v) x = x > T{0} ? x : slope * x;
        return finish(std::move(n));
    }

    Value<T> sigmoid(Value<T> a) {
        Node n = unary(Op::Sigmoid, a);
        for (auto& x : n.val.v) x = T{1} / (T{1} + std::exp(-x));
        return finish(std::move(n));
    }

    Value<T> exp(Value<T> a) {
        Node n = unary(Op::Exp, a);
        for (auto& x : n.val.v) x = std::exp(x);
        return finish(std::move(n));
    }

    Value<T> log(Value<T> a) {
        Node n = unary(Op::Log, a);
        for (auto& x : n.val.v) x = std::log(x);
        return finish(std::move(n));
    }

    Value<T> sqrt(Value<T> a) {
        Node n = unary(Op::Sqrt, a);
        for (auto& x : n.val.v) x = std::sqrt(x);
        return finish(std::move(n));
    }

    // ---- linear algebra ----

    Value<T> matmul(Value<T> a, Value<T> b) {
        const auto& sa = a.shape();
        const auto& sb = b.shape();
        if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0])
            throw ShapeError(std::string("matmul: incompatible shapes ") + shape_str(sa) +
                             " x " + shape_str(sb));
        Node n = binary(Op::MatMul, a, b, Shape{sa[0], sb[1]});
        kern::gemm_acc(n.val.data(), a.tensor().data(), b.tensor().data(), sa[0], sa[1], sb[1]);
        return finish(std::move(n));
    }

    Value<T> transpose(Value<T> a) {
        const auto& s = a.shape();
        if (s.size() != 2) throw ShapeError("transpose: expected rank-2, got " + shape_str(s));
        Node n = binary(Op::Transpose, a, Value<T>{}, Shape{s[1], s[0]});
        kern::transpose2d(n.val.data(), a.tensor().data(), s[0], s[1]);
        return finish(std::move(n));
    }

    // ---- convolution (stride 1) ----

    Value<T> conv2d(Value<T> x, Value<T> k, int64_t ph, int64_t pw) {
        const auto& sx = x.shape();
        const auto& sk = k.shape();
        if (sx.size() != 4 || sk.size() != 4 || sx[1] != sk[1])
            throw ShapeError("conv2d: expected x[B,C,H,W], k[O,C,kh,kw], got " +
                             shape_str(sx) + " and " + shape_str(sk));
        const auto d = kern::conv_dims(sx, sk, ph, pw);
        if (d.ho <= 0 || d.wo <= 0)
            throw ShapeError("conv2d: kernel larger than padded input");
        Node n = binary(Op::Conv2d, x, k, Shape{d.batch, d.cout, d.ho, d.wo});
        n.i64[0] = ph; n.i64[1] = pw;
        kern::conv2d(n.val.data(), x.tensor().data(), k.tensor().data(), d, workers_);
        return finish(std::move(n));
    }

    // gradient of conv2d w.r.t. its input; g has the conv output shape
    Value<T> conv2d_dx(Value<T> g, Value<T> k, int64_t ph, int64_t pw, int64_t h, int64_t w) {
        const auto& sg = g.shape();
        const auto& sk = k.shape();
        Shape sx{sg[0], sk[1], h, w};
        const auto d = kern::conv_dims(sx, sk, ph, pw);
        if (d.ho != sg[2] || d.wo != sg[3] || sg[1] != sk[0])
            throw ShapeError("conv2d_dx: inconsistent shapes");
        Node n = binary(Op::Conv2dDx, g, k, std::move(sx));
        n.i64[0] = ph; n.i64[1] = pw;
        kern::conv2d_dx(n.val.data(), g.tensor().data(), k.tensor().data(), d, workers_);
        return finish(std::move(n));
    }

    // gradient of conv2d w.r.t. its kernel
    Value<T> conv2d_dw(Value<T> x, Value<T> g, int64_t ph, int64_t pw, int64_t kh, int64_t kw) {
        const auto& sx = x.shape();
        const auto& sg = g.shape();
        Shape sk{sg[1], sx[1], kh, kw};
        const auto d = kern::conv_dims(sx, sk, ph, pw);
        if (d.ho != sg[2] || d.wo != sg[3] || sx[0] != sg[0])
            throw ShapeError("conv2d_dw: inconsistent shapes");
        Node n = binary(Op::Conv2dDw, x, g, std::move(sk));
        n.i64[0] = ph; n.i64[1] = pw;
        kern::conv2d_dw(n.val.data(), x.tensor().data(), g.tensor().data(), d, workers_);
        return finish(std::move(n));
    }

    // ---- pooling (input spatial dims must be even) ----

    Value<T> avgpool2(Value<T> x) {
        const auto [planes, h, w] = pool_check("avgpool2", x);
        Node n = binary(Op::AvgPool2, x, Value<T>{}, pooled_shape(x.shape()));
        kern::avgpool2(n.val.data(), x.tensor().data(), planes, h, w);
        return finish(std::move(n));
    }

    Value<T> avgunpool2(Value<T> g, int64_t h, int64_t w) {
        const auto& s = g.shape();
        Shape so(s);
        so[s.size() - 2] = h;
        so[s.size() - 1] = w;
        Node n = binary(Op::AvgUnpool2, g, Value<T>{}, std::move(so));
        kern::avgunpool2(n.val.data(), g.tensor().data(), numel(s) / (s[s.size() - 2] * s[s.size() - 1]), h, w);
        return finish(std::move(n));
    }

    Value<T> maxpool2(Value<T> x) {
        const auto [planes, h, w] = pool_check("maxpool2", x);
        Node n = binary(Op::MaxPool2, x, Value<T>{}, pooled_shape(x.shape()));
        n.idx = std::make_shared<std::vector<int32_t>>(n.val.v.size());
        kern::maxpool2(n.val.data(), n.idx->data(), x.tensor().data(), planes, h, w);
        return finish(std::move(n));
    }

    Value<T> pool_scatter2(Value<T> g, std::shared_ptr<std::vector<int32_t>> idx, int64_t h, int64_t w) {
        const auto& s = g.shape();
        Shape so(s);
        so[s.size() - 2] = h;
        so[s.size() - 1] = w;
        Node n = binary(Op::PoolScatter2, g, Value<T>{}, std::move(so));
        n.idx = std::move(idx);
        kern::pool_scatter2(n.val.data(), g.tensor().data(), n.idx->data(),
                            numel(s) / (s[s.size() - 2] * s[s.size() - 1]), h, w);
        return finish(std::move(n));
    }

    Value<T> pool_gather2(Value<T> x, std::shared_ptr<std::vector<int32_t>> idx) {
        const auto [planes, h, w] = pool_check("pool_gather2", x);
        Node n = binary(Op::PoolGather2, x, Value<T>{}, pooled_shape(x.shape()));
        n.idx = std::move(idx);
        kern::pool_gather2(n.val.data(), x.tensor().data(), n.idx->data(), planes, h, w);
        return finish(std::move(n));
    }

    Value<T> pad2d(Value<T> x, int64_t top, int64_t bottom, int64_t left, int64_t right) {
        const auto& s = x.shape();
        if (s.size() < 2) throw ShapeError("pad2d: rank must be >= 2");
        Shape so(s);
        so[s.size() - 2] += top + bottom;
        so[s.size() - 1] += left + right;
        Node n = binary(Op::Pad2d, x, Value<T>{}, std::move(so));
        n.i64 = {top, bottom, left, right};
        kern::pad2d(n.val.data(), x.tensor().data(),
                    numel(s) / (s[s.size() - 2] * s[s.size() - 1]),
                    s[s.size() - 2], s[s.size() - 1], top, bottom, left, right);
        return finish(std::move(n));
    }

    Value<T> crop2d(Value<T> x, int64_t top, int64_t left, int64_t ho, int64_t wo) {
        const auto& s = x.shape();
        if (s.size() < 2 || top + ho > s[s.size() - 2] || left + wo > s[s.size() - 1])
            throw ShapeError("crop2d: region out of bounds");
        Shape so(s);
        so[s.size() - 2] = ho;
        so[s.size() - 1] = wo;
        Node n = binary(Op::Crop2d, x, Value<T>{}, std::move(so));
        n.i64 = {top, left, 0, 0};
        kern::crop2d(n.val.data(), x.tensor().data(),
                     numel(s) / (s[s.size() - 2] * s[s.size() - 1]),
                     s[s.size() - 2], s[s.size() - 1], top, left, ho, wo);
        return finish(std::move(n));
    }

    // ---- shape / reduction ----

    Value<T> reshape(Value<T> x, Shape target) {
        if (numel(target) != x.size())
            throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(target) +
                             " changes element count");
        Node n = binary(Op::Reshape, x, Value<T>{}, target);
        n.val.v = x.tensor().v;
        return finish(std::move(n));
    }

    Value<T> broadcast_to(Value<T> x, const Shape& target) {
        const auto& s = x.shape();
        if (s.size() != target.size())
            throw ShapeError("broadcast_to: rank mismatch " + shape_str(s) + " -> " + shape_str(target));
        std::vector<int> axes;
        for (size_t i = 0; i < s.size(); ++i) {
            if (s[i] == target[i]) continue;
            if (s[i] != 1)
                throw ShapeError("broadcast_to: dim " + std::to_string(i) + " of " + shape_str(s) +
                                 " cannot broadcast to " + shape_str(target));
            axes.push_back(static_cast<int>(i));
        }
        Node n = binary(Op::Broadcast, x, Value<T>{}, target);
        const auto m = kern::reduce_map(target, axes);
        const T* in = x.tensor().data();
        T* out = n.val.data();
        kern::odometer(m, [&](int64_t full, int64_t red) { out[full] = in[red]; });
        return finish(std::move(n));
    }

    Value<T> reduce_sum(Value<T> x, std::vector<int> axes) { return reduce(Op::ReduceSum, x, std::move(axes)); }
    Value<T> reduce_mean(Value<T> x, std::vector<int> axes) { return reduce(Op::ReduceMean, x, std::move(axes)); }

    Value<T> reduce_sum_all(Value<T> x) {
        std::vector<int> axes(x.shape().size());
        for (size_t i = 0; i < axes.size(); ++i) axes[i] = static_cast<int>(i);
        return reshape(reduce_sum(x, std::move(axes)), {1});
    }

    Value<T> reduce_max(Value<T> x, int axis) {
        const auto& s = x.shape();
        axis_check("reduce_max", s, axis);
        Shape so(s);
        so[static_cast<size_t>(axis)] = 1;
        Node n = binary(Op::ReduceMax, x, Value<T>{}, std::move(so));
        n.axes = {axis};
        n.idx = std::make_shared<std::vector<int32_t>>(n.val.v.size());
        const auto [outer, dim, inner] = split_axis(s, axis);
        const T* in = x.tensor().data();
        T* out = n.val.data();
        int32_t* idx = n.idx->data();
        for (int64_t o = 0; o < outer; ++o)
            for (int64_t i = 0; i < inner; ++i) {
                T best = in[o * dim * inner + i];
                int32_t bj = 0;
                for (int64_t j = 1; j < dim; ++j) {
                    const T v = in[(o * dim + j) * inner + i];
                    if (v > best) { best = v; bj = static_cast<int32_t>(j); }
                }
                out[o * inner + i] = best;
                idx[o * inner + i] = bj;
            }
        return finish(std::move(n));
    }

    Value<T> axis_scatter(Value<T> g, std::shared_ptr<std::vector<int32_t>> idx, int axis, int64_t dim) {
        const auto& s = g.shape();
        axis_check("axis_scatter", s, axis);
        if (s[static_cast<size_t>(axis)] != 1) throw ShapeError("axis_scatter: source axis must be 1");
        Shape so(s);
        so[static_cast<size_t>(axis)] = dim;
        Node n = binary(Op::AxisScatter, g, Value<T>{}, std::move(so));
        n.axes = {axis};
        n.idx = std::move(idx);
        const auto [outer, odim, inner] = split_axis(n.val.shape, axis);
        const T* in = g.tensor().data();
        T* out = n.val.data();
        const int32_t* ip = n.idx->data();
        for (int64_t o = 0; o < outer; ++o)
            for (int64_t i = 0; i < inner; ++i)
                out[(o * odim + ip[o * inner + i]) * inner + i] = in[o * inner + i];
        return finish(std::move(n));
    }

    Value<T> axis_gather(Value<T> x, std::shared_ptr<std::vector<int32_t>> idx, int axis) {
        const auto& s = x.shape();
        axis_check("axis_gather", s, axis);
        Shape so(s);
        so[static_cast<size_t>(axis)] = 1;
        Node n = binary(Op::AxisGather, x, Value<T>{}, std::move(so));
        n.axes = {axis};
        n.idx = std::move(idx);
        const auto [outer, dim, inner] = split_axis(s, axis);
        const T* in = x.tensor().data();
        T* out = n.val.data();
        const int32_t* ip = n.idx->data();
        for (int64_t o = 0; o < outer; ++o)
            for (int64_t i = 0; i < inner; ++i)
                out[o * inner + i] = in[(o * dim + ip[o * inner + i]) * inner + i];
        return finish(std::move(n));
    }

    // ---- differentiation ----

    // d(scalar)/d(wrt_i) for each entry, as differentiable graph values.
    std::vector<Value<T>> differentiate(Value<T> s, const std::vector<Value<T>>& wrt) {
        if (s.size() != 1)
            throw ShapeError("differentiate: expected a scalar, got " + shape_str(s.shape()));
        const int top = s.id;
        std::vector<int> adj(static_cast<size_t>(top) + 1, -1);
        adj[static_cast<size_t>(top)] = full(s.shape(), T{1}).id;
        for (int id = top; id >= 0; --id) {
            if (adj[static_cast<size_t>(id)] < 0) continue;
            if (!nodes_[static_cast<size_t>(id)].requires_grad) continue;
            if (nodes_[static_cast<size_t>(id)].op == Op::Leaf) continue;
            backprop_node(id, Value<T>{this, adj[static_cast<size_t>(id)]}, adj);
        }
        std::vector<Value<T>> out;
        out.reserve(wrt.size());
        for (size_t i = 0; i < wrt.size(); ++i) {
            const int wid = wrt[i].id;
            if (wid < 0 || wid > top || adj[static_cast<size_t>(wid)] < 0 ||
                !nodes_[static_cast<size_t>(wid)].requires_grad)
                throw ShapeError("differentiate: wrt entry " + std::to_string(i) +
                                 " is not reachable from the scalar");
            out.push_back(Value<T>{this, adj[static_cast<size_t>(wid)]});
        }
        return out;
    }

private:
    struct Node {
        Op op = Op::Leaf;
        bool requires_grad = false;
        int depth = 0;
        int p0 = -1, p1 = -1;
        T scalar{};
        std::array<int64_t, 4> i64{0, 0, 0, 0};
        std::vector<int> axes;
        std::shared_ptr<std::vector<int32_t>> idx;
        Tensor<T> val;
    };

    std::deque<Node> nodes_;
    int workers_ = 1;
    int max_depth_ = 0;

    Value<T> finish(Node&& n) {
        if (n.op != Op::Leaf) {
            n.requires_grad = (n.p0 >= 0 && nodes_[static_cast<size_t>(n.p0)].requires_grad) ||
                              (n.p1 >= 0 && nodes_[static_cast<size_t>(n.p1)].requires_grad);
            int d = 0;
            if (n.p0 >= 0) d = std::max(d, nodes_[static_cast<size_t>(n.p0)].depth);
            if (n.p1 >= 0) d = std::max(d, nodes_[static_cast<size_t>(n.p1)].depth);
            n.depth = d + 1;
        }
        for (const T& x : n.val.v)
            if (!std::isfinite(static_cast<double>(x)))
                throw NumericError(std::string("non-finite value produced by ") + op_name(n.op));
        max_depth_ = std::max(max_depth_, n.depth);
        nodes_.push_back(std::move(n));
        return Value<T>{this, static_cast<int>(nodes_.size()) - 1};
    }

    Node unary(Op op, Value<T> a) {
        Node n;
        n.op = op;
        n.p0 = a.id;
        n.val = a.tensor();
        return n;
    }

    Node binary(Op op, Value<T> a, Value<T> b, Shape out) {
        Node n;
        n.op = op;
        n.p0 = a.id;
        n.p1 = b.valid() ? b.id : -1;
        n.val = Tensor<T>(std::move(out));
        return n;
    }

    Value<T> ew(Op op, Value<T> a, Value<T> b) {
        if (!same_shape(a.tensor(), b.tensor()))
            throw ShapeError(std::string(op_name(op)) + ": shape mismatch " +
                             shape_str(a.shape()) + " vs " + shape_str(b.shape()));
        Node n = binary(op, a, b, a.shape());
        const T* pa = a.tensor().data();
        const T* pb = b.tensor().data();
        T* po = n.val.data();
        const int64_t m = n.val.size();
        switch (op) {
            case Op::Add: for (int64_t i = 0; i < m; ++i) po[i] = pa[i] + pb[i]; break;
            case Op::Sub: for (int64_t i = 0; i < m; ++i) po[i] = pa[i] - pb[i]; break;
            case Op::Mul: for (int64_t i = 0; i < m; ++i) po[i] = pa[i] * pb[i]; break;
            case Op::Div: for (int64_t i = 0; i < m; ++i) po[i] = pa[i] / pb[i]; break;
            default: throw ShapeError("ew: bad op");
        }
        return finish(std::move(n));
    }

    Value<T> reduce(Op op, Value<T> x, std::vector<int> axes) {
        const auto& s = x.shape();
        for (int a : axes) axis_check(op_name(op), s, a);
        const auto m = kern::reduce_map(s, axes);
        Node n = binary(op, x, Value<T>{}, m.out_shape);
        n.axes = std::move(axes);
        const T* in = x.tensor().data();
        T* out = n.val.data();
        kern::odometer(m, [&](int64_t full, int64_t red) { out[red] += in[full]; });
        if (op == Op::ReduceMean) {
            const T inv = T{1} / static_cast<T>(numel(s) / numel(m.out_shape));
            for (auto& v : n.val.v) v *= inv;
        }
        return finish(std::move(n));
    }

    static void axis_check(const char* who, const Shape& s, int axis) {
        if (axis < 0 || axis >= static_cast<int>(s.size()))
            throw ShapeError(std::string(who) + ": axis " + std::to_string(axis) +
                             " out of range for " + shape_str(s));
    }

    static std::tuple<int64_t, int64_t, int64_t> split_axis(const Shape& s, int axis) {
        int64_t outer = 1, inner = 1;
        for (int i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
        for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i) inner *= s[i];
        return {outer, s[static_cast<size_t>(axis)], inner};
    }

    static std::tuple<int64_t, int64_t, int64_t> pool_check(const char* who, Value<T> x) {
        const auto& s = x.shape();
        if (s.size() < 2) throw ShapeError(std::string(who) + ": rank must be >= 2");
        const int64_t h = s[s.size() - 2], w = s[s.size() - 1];
        if (h % 2 || w % 2)
            throw ShapeError(std::string(who) + ": spatial dims must be even, got " + shape_str(s));
        return {numel(s) / (h * w), h, w};
    }

    static Shape pooled_shape(Shape s) {
        s[s.size() - 2] /= 2;
        s[s.size() - 1] /= 2;
        return s;
    }

    void accum(std::vector<int>& adj, int parent, Value<T> contrib) {
        if (parent < 0 || !nodes_[static_cast<size_t>(parent)].requires_grad) return;
        int& slot = adj[static_cast<size_t>(parent)];
        slot = slot < 0 ? contrib.id : add(Value<T>{this, slot}, contrib).id;
    }

    Value<T> frozen_mask(int src, bool leaky, T slope) {
        const Tensor<T>& x = nodes_[static_cast<size_t>(src)].val;
        Tensor<T> m(x.shape);
        for (int64_t i = 0; i < x.size(); ++i)
            m[i] = x[i] > T{0} ? T{1} : (leaky ? slope : T{0});
        return constant(std::move(m));
    }

    void backprop_node(int id, Value<T> g, std::vector<int>& adj) {
        const Node& n = nodes_[static_cast<size_t>(id)];  // deque: stable across push_back
        const int p0 = n.p0, p1 = n.p1;
        const Value<T> self{this, id};
        const Value<T> v0{this, p0};
        const Value<T> v1{this, p1};
        switch (n.op) {
            case Op::Leaf:
                break;
            case Op::Add:
                accum(adj, p0, g);
                accum(adj, p1, g);
                break;
            case Op::Sub:
                accum(adj, p0, g);
                accum(adj, p1, scalar_mul(g, T{-1}));
                break;
            case Op::Mul:
                accum(adj, p0, mul(g, v1));
                accum(adj, p1, mul(g, v0));
                break;
            case Op::Div:
                accum(adj, p0, div(g, v1));
                accum(adj, p1, scalar_mul(mul(g, div(v0, mul(v1, v1))), T{-1}));
                break;
            case Op::ScalarMul:
                accum(adj, p0, scalar_mul(g, n.scalar));
                break;
            case Op::ScalarAdd:
                accum(adj, p0, g);
                break;
            case Op::MatMul:
                accum(adj, p0, matmul(g, transpose(v1)));
                accum(adj, p1, matmul(transpose(v0), g));
                break;
            case Op::Transpose:
                accum(adj, p0, transpose(g));
                break;
            case Op::Conv2d: {
                const auto& sx = v0.shape();
                const auto& sk = v1.shape();
                accum(adj, p0, conv2d_dx(g, v1, n.i64[0], n.i64[1], sx[2], sx[3]));
                accum(adj, p1, conv2d_dw(v0, g, n.i64[0], n.i64[1], sk[2], sk[3]));
                break;
            }
            case Op::Conv2dDx: {
                // forward: out = conv2d_dx(gin=p0, k=p1)
                const auto& sk = v1.shape();
                accum(adj, p0, conv2d(g, v1, n.i64[0], n.i64[1]));
                accum(adj, p1, conv2d_dw(g, v0, n.i64[0], n.i64[1], sk[2], sk[3]));
                break;
            }
            case Op::Conv2dDw: {
                // forward: out = conv2d_dw(x=p0, gout=p1); adjoint g is kernel-shaped
                const auto& sx = v0.shape();
                accum(adj, p0, conv2d_dx(v1, g, n.i64[0], n.i64[1], sx[2], sx[3]));
                accum(adj, p1, conv2d(v0, g, n.i64[0], n.i64[1]));
                break;
            }
            case Op::AvgPool2: {
                const auto& s = v0.shape();
                accum(adj, p0, avgunpool2(g, s[s.size() - 2], s[s.size() - 1]));
                break;
            }
            case Op::AvgUnpool2:
                accum(adj, p0, avgpool2(g));
                break;
            case Op::MaxPool2: {
                const auto& s = v0.shape();
                accum(adj, p0, pool_scatter2(g, n.idx, s[s.size() - 2], s[s.size() - 1]));
                break;
            }
            case Op::PoolScatter2:
                accum(adj, p0, pool_gather2(g, n.idx));
                break;
            case Op::PoolGather2: {
                const auto& s = v0.shape();
                accum(adj, p0, pool_scatter2(g, n.idx, s[s.size() - 2], s[s.size() - 1]));
                break;
            }
            case Op::Pad2d: {
                const auto& s = v0.shape();
                accum(adj, p0, crop2d(g, n.i64[0], n.i64[2], s[s.size() - 2], s[s.size() - 1]));
                break;
            }
            case Op::Crop2d: {
                const auto& si = v0.shape();
                const auto& so = n.val.shape;
                const int64_t h = so[so.size() - 2], w = so[so.size() - 1];
                accum(adj, p0,
                      pad2d(g, n.i64[0], si[si.size() - 2] - n.i64[0] - h,
                            n.i64[1], si[si.size() - 1] - n.i64[1] - w));
                break;
            }
            case Op::Relu:
                accum(adj, p0, mul(g, frozen_mask(p0, false, T{0})));
                break;
            case Op::LeakyRelu:
                accum(adj, p0, mul(g, frozen_mask(p0, true, n.scalar)));
                break;
            case Op::Sigmoid:
                accum(adj, p0, mul(g, mul(self, sub(full(n.val.shape, T{1}), self))));
                break;
            case Op::Exp:
                accum(adj, p0, mul(g, self));
                break;
            case Op::Log:
                accum(adj, p0, div(g, v0));
                break;
            case Op::Sqrt:
                accum(adj, p0, div(scalar_mul(g, T(0.5)), self));
                break;
            case Op::Reshape:
                accum(adj, p0, reshape(g, v0.shape()));
                break;
            case Op::Broadcast: {
                const auto& si = v0.shape();
                const auto& so = n.val.shape;
                std::vector<int> axes;
                for (size_t i = 0; i < si.size(); ++i)
                    if (si[i] == 1 && so[i] != 1) axes.push_back(static_cast<int>(i));
                accum(adj, p0, reduce_sum(g, std::move(axes)));
                break;
            }
            case Op::ReduceSum:
                accum(adj, p0, broadcast_to(g, v0.shape()));
                break;
            case Op::ReduceMean: {
                const T inv = T{1} / static_cast<T>(numel(v0.shape()) / numel(n.val.shape));
                accum(adj, p0, scalar_mul(broadcast_to(g, v0.shape()), inv));
                break;
            }
            case Op::ReduceMax:
                accum(adj, p0, axis_scatter(g, n.idx, n.axes[0], v0.shape()[static_cast<size_t>(n.axes[0])]));
                break;
            case Op::AxisScatter:
                accum(adj, p0, axis_gather(g, n.idx, n.axes[0]));
                break;
            case Op::AxisGather:
                accum(adj, p0, axis_scatter(g, n.idx, n.axes[0], v0.shape()[static_cast<size_t>(n.axes[0])]));
                break;
        }
    }
};

} // namespace dc
