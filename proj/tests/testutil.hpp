#pragma once

// Shared helpers for the test suites: random tensors and a central
// finite-difference oracle for gradient checks (64-bit).

#include <cmath>
#include <functional>
#include <vector>

#include "dc/graph.hpp"
#include "dc/rng.hpp"
#include "dc/tensor.hpp"

namespace dctest {

template <typename T>
dc::Tensor<T> random_tensor(dc::Shape shape, dc::Rng& rng, double lo = -1.0, double hi = 1.0) {
    dc::Tensor<T> t(std::move(shape));
    for (auto& v : t.v) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
}

template <typename T>
dc::Tensor<T> random_normal_tensor(dc::Shape shape, dc::Rng& rng, double std = 1.0) {
    dc::Tensor<T> t(std::move(shape));
    for (auto& v : t.v) v = static_cast<T>(rng.normal(0.0, std));
    return t;
}

// Builds the scalar expression from fresh leaves on every call.
using ScalarFn = std::function<dc::Value<double>(dc::Graph<double>&, std::vector<dc::Value<double>>&)>;

inline double eval_scalar(const ScalarFn& fn, const std::vector<dc::Tensor<double>>& inputs) {
    dc::Graph<double> g;
    std::vector<dc::Value<double>> leaves;
    leaves.reserve(inputs.size());
    for (const auto& t : inputs) leaves.push_back(g.leaf(t, true));
    return fn(g, leaves).item();
}

struct FdReport {
    double max_rel = 0.0;
    int checked = 0;
};

// Central finite differences of fn w.r.t. every coordinate of every input,
// compared against the analytic gradient from one reverse pass.
inline FdReport fd_check(const ScalarFn& fn, std::vector<dc::Tensor<double>> inputs,
                         double step = 1e-4, double tol = 1e-5) {
    dc::Graph<double> g;
    std::vector<dc::Value<double>> leaves;
    for (const auto& t : inputs) leaves.push_back(g.leaf(t, true));
    auto scalar = fn(g, leaves);
    auto grads = g.differentiate(scalar, leaves);

    FdReport rep;
    for (size_t i = 0; i < inputs.size(); ++i) {
        for (int64_t j = 0; j < inputs[i].size(); ++j) {
            const double keep = inputs[i][j];
            inputs[i][j] = keep + step;
            const double fp = eval_scalar(fn, inputs);
            inputs[i][j] = keep - step;
            const double fm = eval_scalar(fn, inputs);
            inputs[i][j] = keep;
            const double fd = (fp - fm) / (2 * step);
            const double an = grads[i].tensor()[j];
            const double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-6});
            rep.max_rel = std::max(rep.max_rel, rel);
            rep.checked++;
            if (rel > tol) return rep;
        }
    }
    return rep;
}

} // namespace dctest
