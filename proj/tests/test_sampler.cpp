#include <doctest.h>

#include <cmath>

#include "flowmo/sampler.hpp"
#include "support.hpp"

using namespace flowmo;
using flowmo::test::random_tensor;
using sampling::GuidanceSpec;

namespace {

// Field that ignores its inputs and always returns the same velocity.
sampling::VelocityField constant_field(const Tensor& v) {
    return [v](const ad::Var&, const ad::Var&, double) { return ad::constant(v); };
}

Tensor minus(const Tensor& a, const Tensor& b) {
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] - b[i];
    return out;
}

}  // namespace

TEST_CASE("shifted schedule examples") {
    CHECK(sampling::shifted_schedule(4, 1.0).times() == std::vector<double>{1, 0.75, 0.5, 0.25, 0});
    CHECK(sampling::shifted_schedule(4, 4.0).times() == std::vector<double>{1, 0.31640625, 0.0625, 0.00390625, 0});
    for (double rho : {1.0, 2.5, 7.0}) CHECK(sampling::shifted_schedule(1, rho).times() == std::vector<double>{1, 0});
    CHECK_THROWS_AS(sampling::shifted_schedule(4, 0.9), std::invalid_argument);
    CHECK_THROWS_AS(sampling::shifted_schedule(0, 2.0), std::invalid_argument);
}

TEST_CASE("rho one equals linear spacing bitwise") {
    for (std::size_t n = 1; n <= 64; ++n) {
        const auto t = sampling::shifted_schedule(n, 1.0).times();
        for (std::size_t i = 1; i <= n; ++i)
            CHECK(t[i - 1] == static_cast<double>(n - i + 1) / static_cast<double>(n));
        CHECK(t.back() == 0.0);
    }
}

TEST_CASE("interior times are non-increasing in rho") {
    for (std::size_t n : {2u, 5u, 8u, 25u}) {
        std::vector<double> prev;
        for (double rho = 1.0; rho <= 8.0; rho += 0.25) {
            const auto t = sampling::shifted_schedule(n, rho).times();
            if (!prev.empty())
                for (std::size_t i = 1; i < n; ++i) CHECK(t[i] <= prev[i]);
            prev = t;
        }
    }
}

TEST_CASE("weight schedules") {
    CHECK(sampling::schedule_from_weights({1, 1, 1, 1}).times() == std::vector<double>{1, 0.75, 0.5, 0.25, 0});
    CHECK(sampling::schedule_from_weights({2, 1, 1}).times() == std::vector<double>{1, 0.5, 0.25, 0});
    CHECK_THROWS_AS(sampling::schedule_from_weights({1, 0, 1}), std::invalid_argument);
    CHECK_THROWS_AS(sampling::schedule_from_weights({}), std::invalid_argument);

    Rng rng(1);
    for (int trial = 0; trial < 10000; ++trial) {
        const auto t = sampling::random_schedule(8, rng).times();
        REQUIRE(t.size() == 9);
        CHECK(t.front() == 1.0);
        CHECK(t.back() == 0.0);
        for (std::size_t i = 1; i < t.size(); ++i) CHECK(t[i] < t[i - 1]);
    }
}

TEST_CASE("schedule validation") {
    CHECK_THROWS_AS(sampling::Schedule({1.0}), std::invalid_argument);
    CHECK_THROWS_AS(sampling::Schedule({0.9, 0.0}), std::invalid_argument);
    CHECK_THROWS_AS(sampling::Schedule({1.0, 0.1}), std::invalid_argument);
    CHECK_THROWS_AS(sampling::Schedule({1.0, 0.5, 0.6, 0.0}), std::invalid_argument);
    CHECK_THROWS_AS(sampling::Schedule({1.0, 0.5, 0.5, 0.0}), std::invalid_argument);
    CHECK_NOTHROW(sampling::Schedule({1.0, 0.0}));
}

TEST_CASE("guidance identities") {
    Rng rng(2);
    const GuidanceSpec unit{1.0, 0.145, 0.505};
    for (int trial = 0; trial < 100; ++trial) {
        const auto vc = ad::constant(random_tensor({3, 4}, rng));
        const auto vu = ad::constant(random_tensor({3, 4}, rng));
        const double t = uniform01(rng);
        const auto out = sampling::guided_velocity(vc, vu, t, unit);
        for (std::size_t i = 0; i < 12; ++i) CHECK(std::abs(out.value()[i] - vc.value()[i]) <= 1e-12);
    }

    const GuidanceSpec banded{1.5, 0.145, 0.505};
    const auto two = ad::constant(Tensor({1}, 2.0)), one = ad::constant(Tensor({1}, 1.0));
    CHECK(sampling::guided_velocity(two, one, 0.3, banded).value()[0] == 2.5);
    CHECK(sampling::guided_velocity(two, one, 0.9, banded).value()[0] == 2.0);
    CHECK(sampling::guided_velocity(two, one, 0.1, banded).value()[0] == 2.0);
}

TEST_CASE("EDM interval maps to flow time") {
    CHECK(std::abs(sampling::edm_sigma_to_flow_time(0.17) - 0.145) <= 1e-3);
    CHECK(std::abs(sampling::edm_sigma_to_flow_time(1.02) - 0.505) <= 1e-3);
    CHECK(sampling::edm_sigma_to_flow_time(0.0) == 0.0);
    CHECK_THROWS_AS(sampling::edm_sigma_to_flow_time(-1.0), std::invalid_argument);
}

TEST_CASE("constant velocity telescopes onto the target") {
    Rng rng(3);
    const auto target = random_tensor({2, 3, 4, 4}, rng);
    const auto z = random_tensor({2, 3, 4, 4}, rng, -2, 2);
    const auto field = constant_field(minus(target, z));
    for (double rho : {1.0, 2.0, 4.0})
        for (std::size_t n : {1u, 8u, 25u}) {
            const auto out = sampling::integrate(field, ad::Var{}, ad::constant(z), sampling::shifted_schedule(n, rho),
                                                 GuidanceSpec{}, false);
            double err = 0.0;
            for (std::size_t i = 0; i < z.numel(); ++i) err = std::max(err, std::abs(out.value()[i] - target[i]));
            CHECK(err <= 1e-6);
        }
    for (int trial = 0; trial < 20; ++trial) {
        const auto out = sampling::integrate(field, ad::Var{}, ad::constant(z), sampling::random_schedule(6, rng),
                                             GuidanceSpec{}, false);
        for (std::size_t i = 0; i < z.numel(); ++i) CHECK(std::abs(out.value()[i] - target[i]) <= 1e-6);
    }
}

TEST_CASE("single step is one Euler hop") {
    Rng rng(4);
    const auto z = random_tensor({5}, rng);
    sampling::VelocityField field = [](const ad::Var& x, const ad::Var&, double t) {
        return ad::add_scalar(ad::scale(ad::square(x), t), 0.25);
    };
    const auto out =
        sampling::integrate(field, ad::Var{}, ad::constant(z), sampling::shifted_schedule(1, 3.0), GuidanceSpec{}, false);
    for (std::size_t i = 0; i < 5; ++i) CHECK(out.value()[i] == doctest::Approx(z[i] + z[i] * z[i] + 0.25).epsilon(1e-15));
}

TEST_CASE("linear decay field matches the analytic solution") {
    sampling::VelocityField field = [](const ad::Var& x, const ad::Var&, double) { return ad::scale(x, -1.0); };
    const auto out = sampling::integrate(field, ad::Var{}, ad::constant(Tensor({1}, 1.0)),
                                         sampling::shifted_schedule(1000, 1.0), GuidanceSpec{}, false);
    CHECK(std::abs(out.value()[0] - std::exp(-1.0)) <= 2e-3);
}

TEST_CASE("guided integration combines branches inside the interval") {
    // v(x, c, t) = c + x: the null code gives v = x.
    sampling::VelocityField field = [](const ad::Var& x, const ad::Var& c, double) { return ad::add(x, c); };
    const auto c = ad::constant(Tensor({1}, 2.0));
    const auto z = ad::constant(Tensor({1}, 0.5));
    const sampling::Schedule sched({1.0, 0.4, 0.0});
    const GuidanceSpec spec{3.0, 0.3, 0.5};
    const auto out = sampling::integrate(field, c, z, sched, spec, false);
    // step 1 at t=1 (outside): x = 0.5 + 0.6 * 2.5 = 2.0
    // step 2 at t=0.4 (inside): cond 4.0, uncond 2.0, guided 2 + 3 * 2 = 8.0; x = 2.0 + 0.4 * 8 = 5.2
    CHECK(out.value()[0] == doctest::Approx(5.2).epsilon(1e-14));

    const auto plain = sampling::integrate(field, c, z, sched, GuidanceSpec{1.0, 0.3, 0.5}, false);
    CHECK(plain.value()[0] == doctest::Approx(0.5 + 0.6 * 2.5 + 0.4 * 4.0).epsilon(1e-14));
}

TEST_CASE("differentiable and graph-free integration agree bitwise") {
    Rng rng(5);
    const auto z = random_tensor({3, 4}, rng);
    const auto c = random_tensor({3, 4}, rng);
    sampling::VelocityField field = [&](const ad::Var& x, const ad::Var& code, double t) {
        return ad::add(ad::tanh(ad::mul(x, code)), ad::scale(ad::constant(Tensor({3, 4}, 0.1)), t));
    };
    const auto sched = sampling::shifted_schedule(5, 2.0);
    const GuidanceSpec spec{1.5, 0.1, 0.6};
    const auto a = sampling::integrate(field, ad::parameter(c), ad::parameter(z), sched, spec, true);
    const auto b = sampling::integrate(field, ad::parameter(c), ad::parameter(z), sched, spec, false);
    CHECK(a.value().vec() == b.value().vec());
    CHECK(a.requires_grad());
    CHECK_FALSE(b.requires_grad());
}

TEST_CASE("gradients through a three-step chain match finite differences") {
    Rng rng(6);
    const std::vector<Tensor> in{random_tensor({2, 3}, rng), random_tensor({2, 3}, rng), random_tensor({3, 3}, rng)};
    const auto sched = sampling::schedule_from_weights({0.5, 0.3, 0.2});
    const test::ScalarFn f = [&](const std::vector<ad::Var>& v) {
        sampling::VelocityField field = [&](const ad::Var& x, const ad::Var& c, double t) {
            return ad::add(ad::tanh(ad::linear(x, v[2], ad::Var{})), ad::scale(c, 1.0 - t));
        };
        const auto out = sampling::integrate(field, v[1], v[0], sched, GuidanceSpec{1.5, 0.0, 0.6}, true);
        return ad::mean(ad::square(out));
    };
    CHECK(test::max_grad_error(f, in) <= 1e-4);
}

TEST_CASE("integration reports the failing step") {
    sampling::VelocityField field = [](const ad::Var& x, const ad::Var&, double t) {
        return t < 0.6 ? ad::constant(Tensor(x.shape(), NAN)) : ad::scale(x, 0.0);
    };
    try {
        sampling::integrate(field, ad::Var{}, ad::constant(Tensor({2}, 1.0)), sampling::shifted_schedule(4, 1.0),
                            GuidanceSpec{}, false);
        FAIL("expected IntegrationError");
    } catch (const sampling::IntegrationError& e) {
        CHECK(e.step() == 2);
    }
    sampling::VelocityField bad_shape = [](const ad::Var&, const ad::Var&, double) {
        return ad::constant(Tensor({3}, 0.0));
    };
    CHECK_THROWS_AS(sampling::integrate(bad_shape, ad::Var{}, ad::constant(Tensor({2}, 1.0)),
                                        sampling::shifted_schedule(2, 1.0), GuidanceSpec{}, false),
                    sampling::IntegrationError);
}

TEST_CASE("initial noise scaling") {
    Rng rng(7);
    const auto z = random_tensor({2, 8}, rng);
    CHECK(sampling::scaled_initial_noise(ad::constant(z), 1.0).value().vec() == z.vec());
    const auto half = sampling::scaled_initial_noise(ad::constant(z), 0.5).value();
    for (std::size_t b = 0; b < 2; ++b) {
        double n0 = 0, n1 = 0;
        for (std::size_t i = 0; i < 8; ++i) {
            n0 += z[b * 8 + i] * z[b * 8 + i];
            n1 += half[b * 8 + i] * half[b * 8 + i];
        }
        CHECK(std::sqrt(n1) == doctest::Approx(0.5 * std::sqrt(n0)).epsilon(1e-14));
    }
    CHECK_THROWS_AS(sampling::scaled_initial_noise(ad::constant(z), 0.0), std::invalid_argument);
}
