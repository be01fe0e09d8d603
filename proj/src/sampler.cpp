#include "flowmo/sampler.hpp"

#include <cmath>
#include <optional>

namespace flowmo::sampling {

Schedule::Schedule(std::vector<double> times) : times_(std::move(times)) {
    if (times_.size() < 2) throw std::invalid_argument("schedule needs at least one step");
    if (times_.front() != 1.0) throw std::invalid_argument("schedule must start at t = 1");
    if (times_.back() != 0.0) throw std::invalid_argument("schedule must end at t = 0");
    for (std::size_t i = 1; i < times_.size(); ++i) {
        if (!(times_[i] < times_[i - 1])) {
            throw std::invalid_argument("schedule is not strictly decreasing at index " + std::to_string(i));
        }
    }
}

Schedule shifted_schedule(std::size_t n, double rho) {
    if (n < 1) throw std::invalid_argument("shifted_schedule: n must be >= 1");
    if (!(rho >= 1.0)) throw std::invalid_argument("shifted_schedule: rho must be >= 1");
    std::vector<double> t;
    t.reserve(n + 1);
    for (std::size_t i = 1; i <= n; ++i) {
        const double base = static_cast<double>(n - i + 1) / static_cast<double>(n);
        t.push_back(rho == 1.0 ? base : std::pow(base, rho));
    }
    t.push_back(0.0);
    return Schedule(std::move(t));
}

Schedule schedule_from_weights(const std::vector<double>& u) {
    if (u.empty()) throw std::invalid_argument("schedule_from_weights: need at least one weight");
    double total = 0.0;
    for (double v : u) {
        if (!(v > 0.0)) throw std::invalid_argument("schedule_from_weights: weights must be positive");
        total += v;
    }
    std::vector<double> t(u.size() + 1, 0.0);
    double tail = 0.0;
    for (std::size_t i = u.size(); i-- > 0;) {
        tail += u[i];
        t[i] = tail / total;
    }
    t[0] = 1.0;
    return Schedule(std::move(t));
}

Schedule random_schedule(std::size_t n, Rng& rng) {
    if (n < 1) throw std::invalid_argument("random_schedule: n must be >= 1");
    std::vector<double> u(n);
    for (;;) {
        bool degenerate = false;
        for (auto& v : u) {
            v = uniform01(rng);
            degenerate = degenerate || !(v > 0.0);
        }
        if (!degenerate) break;
    }
    return schedule_from_weights(u);
}

double edm_sigma_to_flow_time(double sigma) {
    if (!(sigma >= 0.0)) throw std::invalid_argument("edm_sigma_to_flow_time: sigma must be >= 0");
    return sigma / (1.0 + sigma);
}

ad::Var guided_velocity(const ad::Var& v_cond, const ad::Var& v_uncond, double t, const GuidanceSpec& spec) {
    if (!spec.applies_at(t)) return v_cond;
    require_same_shape(v_cond.value(), v_uncond.value(), "guided_velocity");
    return ad::add(v_uncond, ad::scale(ad::sub(v_cond, v_uncond), spec.weight));
}

ad::Var integrate(const VelocityField& field, const ad::Var& c, const ad::Var& z, const Schedule& schedule,
                  const GuidanceSpec& guidance, bool differentiable) {
    std::optional<ad::NoGradGuard> no_grad;
    if (!differentiable) no_grad.emplace();

    ad::Var null_code;
    if (c.defined()) null_code = ad::constant(Tensor(c.shape(), 0.0));

    const auto& t = schedule.times();
    ad::Var x = z;
    for (std::size_t i = 0; i + 1 < t.size(); ++i) {
        ad::Var v = field(x, c, t[i]);
        if (c.defined() && guidance.applies_at(t[i])) {
            ad::Var v_uncond = field(x, null_code, t[i]);
            v = guided_velocity(v, v_uncond, t[i], guidance);
        }
        if (v.shape() != x.shape()) throw IntegrationError(i, "velocity shape does not match state");
        x = ad::add(x, ad::scale(v, t[i] - t[i + 1]));
        if (!all_finite(x.value().span())) throw IntegrationError(i, "non-finite state");
    }
    return x;
}

ad::Var scaled_initial_noise(const ad::Var& z, double scale) {
    if (!(scale > 0.0)) throw std::invalid_argument("scaled_initial_noise: scale must be > 0");
    if (scale == 1.0) return z;
    return ad::scale(z, scale);
}

}  // namespace flowmo::sampling
