#pragma once

// Test helpers: finite-difference gradient oracles and random tensors.

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "flowmo/autodiff.hpp"
#include "flowmo/rng.hpp"

namespace flowmo::test {

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    std::uniform_real_distribution<double> d(lo, hi);
    for (auto& v : t.vec()) v = d(rng);
    return t;
}

inline double norm(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

/// ||a - b|| / max(||b||, floor)
inline double rel_error(const std::vector<double>& a, const std::vector<double>& b, double floor = 1e-12) {
    std::vector<double> d(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
    return norm(d) / std::max(norm(b), floor);
}

using ScalarFn = std::function<ad::Var(const std::vector<ad::Var>&)>;

/// Central-difference gradient of f with respect to input `which` at every
/// coordinate in `coords` (all coordinates when empty).
inline std::vector<double> fd_gradient(const ScalarFn& f, std::vector<Tensor> inputs, std::size_t which,
                                       const std::vector<std::size_t>& coords = {}, double h = 1e-6) {
    ad::NoGradGuard guard;
    auto eval = [&] {
        std::vector<ad::Var> vars;
        for (const auto& t : inputs) vars.push_back(ad::constant(t));
        return f(vars).value().item();
    };
    std::vector<std::size_t> idx = coords;
    if (idx.empty())
        for (std::size_t i = 0; i < inputs[which].numel(); ++i) idx.push_back(i);
    std::vector<double> g;
    for (auto i : idx) {
        const double orig = inputs[which][i];
        inputs[which][i] = orig + h;
        const double fp = eval();
        inputs[which][i] = orig - h;
        const double fm = eval();
        inputs[which][i] = orig;
        g.push_back((fp - fm) / (2 * h));
    }
    return g;
}

/// Reverse-mode gradient of f with respect to every input.
inline std::vector<Tensor> ad_gradients(const ScalarFn& f, const std::vector<Tensor>& inputs) {
    std::vector<ad::Var> vars;
    for (const auto& t : inputs) vars.push_back(ad::parameter(t));
    ad::backward(f(vars));
    std::vector<Tensor> out;
    for (const auto& v : vars) out.push_back(v.grad());
    return out;
}

/// Relative error between reverse-mode and central-difference gradients for
/// every input.
inline double max_grad_error(const ScalarFn& f, const std::vector<Tensor>& inputs, double h = 1e-6) {
    const auto ad_g = ad_gradients(f, inputs);
    double worst = 0.0;
    for (std::size_t i = 0; i < inputs.size(); ++i)
        worst = std::max(worst, rel_error(ad_g[i].vec(), fd_gradient(f, inputs, i, {}, h)));
    return worst;
}

}  // namespace flowmo::test
