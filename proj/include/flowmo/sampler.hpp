#pragma once

// Timestep schedules and Euler integration of the probability-flow ODE from
// t = 1 (noise) to t = 0 (data), with interval-gated classifier-free guidance.

#include <functional>
#include <stdexcept>
#include <vector>

#include "flowmo/autodiff.hpp"
#include "flowmo/rng.hpp"

namespace flowmo::sampling {

/// Strictly decreasing times (1, ..., 0): the terminal 0 is always present.
class Schedule {
public:
    /// Validates: first 1, last 0, strictly decreasing, at least two entries.
    explicit Schedule(std::vector<double> times);

    const std::vector<double>& times() const noexcept { return times_; }
    std::size_t steps() const noexcept { return times_.size() - 1; }

private:
    std::vector<double> times_;
};

/// t_i = ((n - i + 1) / n)^rho, i = 1..n, then 0. Requires n >= 1, rho >= 1.
Schedule shifted_schedule(std::size_t n, double rho);

/// t_i = (sum_{j>=i} u_j) / (sum_j u_j) for the given positive weights, then 0.
Schedule schedule_from_weights(const std::vector<double>& u);
/// Same with u_j ~ Uniform(0, 1); all-zero draws are redrawn.
Schedule random_schedule(std::size_t n, Rng& rng);

struct GuidanceSpec {
    double weight = 1.0;
    double t_lo = 0.0;
    double t_hi = 1.0;

    bool applies_at(double t) const noexcept { return weight != 1.0 && t >= t_lo && t <= t_hi; }
};

/// Maps an EDM noise level sigma to rectified-flow time sigma / (1 + sigma).
double edm_sigma_to_flow_time(double sigma);

/// v_uncond + w (v_cond - v_uncond) inside [t_lo, t_hi], else v_cond.
/// w == 1 returns v_cond itself.
ad::Var guided_velocity(const ad::Var& v_cond, const ad::Var& v_uncond, double t, const GuidanceSpec& spec);

/// Velocity model v(x_t, c, t). `c` may be undefined for unconditional models;
/// a zero tensor selects the latent-dropped (unconditional) branch.
using VelocityField = std::function<ad::Var(const ad::Var& x_t, const ad::Var& c, double t)>;

class IntegrationError : public std::runtime_error {
public:
    IntegrationError(std::size_t step, const std::string& what)
        : std::runtime_error("integration step " + std::to_string(step) + ": " + what), step_(step) {}
    std::size_t step() const noexcept { return step_; }

private:
    std::size_t step_;
};

/// Euler steps x <- x + (t_i - t_{i+1}) v(x, t_i) starting from x = z at t = 1.
/// With `differentiable` the whole chain is recorded for backpropagation;
/// otherwise it runs without a graph. Both paths perform identical arithmetic.
ad::Var integrate(const VelocityField& field, const ad::Var& c, const ad::Var& z, const Schedule& schedule,
                  const GuidanceSpec& guidance, bool differentiable);

/// z' = scale * z, scale > 0.
ad::Var scaled_initial_noise(const ad::Var& z, double scale);

}  // namespace flowmo::sampling
