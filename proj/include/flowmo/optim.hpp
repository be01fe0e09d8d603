#pragma once

#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "flowmo/params.hpp"

namespace flowmo::optim {

struct AdamOptions {
    double lr = 5e-4;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
};

struct AdamState {
    std::vector<Tensor> m;
    std::vector<Tensor> v;
    std::size_t step = 0;

    /// Zero moments congruent with `store`.
    static AdamState zeros_like(const ParameterStore& store);
};

class NonFiniteGradientError : public std::runtime_error {
public:
    explicit NonFiniteGradientError(std::string param)
        : std::runtime_error("non-finite gradient in parameter '" + param + "'"), param_(std::move(param)) {}
    const std::string& param() const noexcept { return param_; }

private:
    std::string param_;
};

/// One bias-corrected Adam update of a flat buffer at 1-based step `t`.
void adam_update(std::span<double> param, std::span<const double> grad, std::span<double> m, std::span<double> v,
                 std::size_t t, double lr, double beta1, double beta2, double eps);

/// Extra per-parameter scale on top of Param::lr_mult (e.g. 0 to freeze).
using LrScale = std::function<double(const Param&)>;

/// Adam over every parameter using its current gradient. All gradients are
/// checked before anything is modified.
void adam_step(ParameterStore& store, AdamState& state, const AdamOptions& options, const LrScale& scale = {});

/// ema <- rate * ema + (1 - rate) * params, elementwise.
void ema_update(std::vector<Tensor>& ema, const std::vector<Tensor>& params, double rate);

}  // namespace flowmo::optim
