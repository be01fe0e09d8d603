#include "flowmo/optim.hpp"

#include <cmath>

namespace flowmo::optim {

AdamState AdamState::zeros_like(const ParameterStore& store) {
    AdamState s;
    for (const auto& p : store.all()) {
        s.m.push_back(Tensor::like(p.var.value()));
        s.v.push_back(Tensor::like(p.var.value()));
    }
    return s;
}

void adam_update(std::span<double> param, std::span<const double> grad, std::span<double> m, std::span<double> v,
                 std::size_t t, double lr, double beta1, double beta2, double eps) {
    if (t == 0) throw std::invalid_argument("adam_update: step counter is 1-based");
    if (grad.size() != param.size() || m.size() != param.size() || v.size() != param.size())
        throw std::invalid_argument("adam_update: buffer sizes differ");
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < param.size(); ++i) {
        m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
        const double mhat = m[i] / c1;
        const double vhat = v[i] / c2;
        param[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
}

void adam_step(ParameterStore& store, AdamState& state, const AdamOptions& options, const LrScale& scale) {
    auto& params = store.all();
    if (state.m.size() != params.size() || state.v.size() != params.size())
        throw std::invalid_argument("adam_step: optimizer state does not match the parameter store");
    std::vector<Tensor> grads;
    grads.reserve(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
        grads.push_back(params[i].var.grad());
        require_same_shape(grads.back(), state.m[i], "adam_step");
        if (!all_finite(grads.back().span())) throw NonFiniteGradientError(params[i].name);
    }
    ++state.step;
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i];
        const double lr = options.lr * p.lr_mult * (scale ? scale(p) : 1.0);
        adam_update(p.var.mutable_value().span(), grads[i].span(), state.m[i].span(), state.v[i].span(), state.step,
                    lr, options.beta1, options.beta2, options.eps);
    }
}

void ema_update(std::vector<Tensor>& ema, const std::vector<Tensor>& params, double rate) {
    if (ema.size() != params.size()) throw std::invalid_argument("ema_update: parameter count mismatch");
    for (std::size_t i = 0; i < ema.size(); ++i) {
        require_same_shape(ema[i], params[i], "ema_update");
        auto e = ema[i].span();
        auto p = params[i].span();
        for (std::size_t j = 0; j < e.size(); ++j) e[j] = rate * e[j] + (1.0 - rate) * p[j];
    }
}

}  // namespace flowmo::optim
