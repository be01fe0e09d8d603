#include <doctest.h>

#include <cmath>

#include "flowmo/optim.hpp"
#include "support.hpp"

using namespace flowmo;

namespace {

// Scalar Adam written out longhand.
struct ScalarAdam {
    double m = 0, v = 0, b1, b2, eps, lr;
    int t = 0;
    double step(double x, double g) {
        ++t;
        m = b1 * m + (1 - b1) * g;
        v = b2 * v + (1 - b2) * g * g;
        const double mh = m / (1 - std::pow(b1, t)), vh = v / (1 - std::pow(b2, t));
        return x - lr * mh / (std::sqrt(vh) + eps);
    }
};

void set_grad(ad::Var& var, const Tensor& g) {
    var.zero_grad();
    auto& buf = var.node()->grad_buffer();
    buf = g;
}

}  // namespace

TEST_CASE("first Adam step moves by lr times the gradient sign") {
    std::vector<double> p{1.0, -2.0, 0.5}, g{0.3, -7.0, 1e-3}, m(3, 0.0), v(3, 0.0);
    optim::adam_update(p, g, m, v, 1, 0.01, 0.9, 0.95, 1e-12);
    CHECK(p[0] == doctest::Approx(0.99).epsilon(1e-9));
    CHECK(p[1] == doctest::Approx(-1.99).epsilon(1e-9));
    CHECK(p[2] == doctest::Approx(0.49).epsilon(1e-6));
    CHECK_THROWS_AS(optim::adam_update(p, g, m, v, 0, 0.01, 0.9, 0.95, 1e-8), std::invalid_argument);
}

TEST_CASE("Adam trajectory matches the scalar oracle") {
    Rng rng(1);
    std::vector<double> p{0.7}, m{0.0}, v{0.0};
    ScalarAdam ref{0, 0, 0.9, 0.95, 1e-8, 3e-3};
    double x = 0.7;
    for (std::size_t t = 1; t <= 200; ++t) {
        const double g = std::sin(0.1 * t) + 0.5 * (uniform01(rng) - 0.5);
        std::vector<double> gv{g};
        optim::adam_update(p, gv, m, v, t, 3e-3, 0.9, 0.95, 1e-8);
        x = ref.step(x, g);
        CHECK(p[0] == doctest::Approx(x).epsilon(1e-13));
    }
}

TEST_CASE("Adam step over a store honours multipliers and scale") {
    ParameterStore store;
    auto a = store.add("a", Tensor({2}, {1.0, 1.0}), ParamKind::Hidden, 0.5);
    auto b = store.add("frozen.b", Tensor({2}, {1.0, 1.0}), ParamKind::Hidden, 1.0);
    auto c = store.add("c", Tensor({1}, {1.0}), ParamKind::Bias, 1.0);
    auto state = optim::AdamState::zeros_like(store);
    set_grad(a, Tensor({2}, {1.0, -1.0}));
    set_grad(b, Tensor({2}, {1.0, 1.0}));
    set_grad(c, Tensor({1}, {2.0}));
    optim::adam_step(store, state, {0.1, 0.9, 0.95, 1e-12},
                     [](const Param& p) { return p.name.rfind("frozen.", 0) == 0 ? 0.0 : 1.0; });
    CHECK(state.step == 1);
    CHECK(a.value()[0] == doctest::Approx(0.95));
    CHECK(a.value()[1] == doctest::Approx(1.05));
    CHECK(b.value().vec() == std::vector<double>{1.0, 1.0});
    CHECK(c.value()[0] == doctest::Approx(0.9));
}

TEST_CASE("non-finite gradients abort before any update") {
    ParameterStore store;
    auto a = store.add("a", Tensor({2}, {1.0, 2.0}), ParamKind::Hidden);
    auto b = store.add("b", Tensor({1}, {3.0}), ParamKind::Hidden);
    auto state = optim::AdamState::zeros_like(store);
    set_grad(a, Tensor({2}, {0.1, 0.2}));
    set_grad(b, Tensor({1}, {NAN}));
    try {
        optim::adam_step(store, state, {});
        FAIL("expected NonFiniteGradientError");
    } catch (const optim::NonFiniteGradientError& e) {
        CHECK(e.param() == "b");
    }
    CHECK(a.value().vec() == std::vector<double>{1.0, 2.0});
    CHECK(state.step == 0);
    for (double v : state.m[0].vec()) CHECK(v == 0.0);
}

TEST_CASE("Adam minimises a quadratic") {
    Rng rng(2);
    ParameterStore store;
    const auto target = test::random_tensor({5}, rng);
    auto w = store.add("w", Tensor({5}, 0.0), ParamKind::Hidden);
    auto state = optim::AdamState::zeros_like(store);
    for (int it = 0; it < 2000; ++it) {
        store.zero_grad();
        ad::backward(ad::sum(ad::square(ad::sub(w, ad::constant(target)))));
        optim::adam_step(store, state, {0.01, 0.9, 0.95, 1e-8});
    }
    for (std::size_t i = 0; i < 5; ++i) CHECK(std::abs(w.value()[i] - target[i]) < 1e-3);
}

TEST_CASE("EMA update") {
    std::vector<Tensor> ema{Tensor({2}, {0.0, 10.0})};
    const std::vector<Tensor> params{Tensor({2}, {1.0, 0.0})};
    optim::ema_update(ema, params, 0.9);
    CHECK(ema[0][0] == doctest::Approx(0.1));
    CHECK(ema[0][1] == doctest::Approx(9.0));
    for (int i = 0; i < 500; ++i) optim::ema_update(ema, params, 0.9);
    CHECK(ema[0][0] == doctest::Approx(1.0).epsilon(1e-12));
    optim::ema_update(ema, params, 0.0);
    CHECK(ema[0].vec() == params[0].vec());
    std::vector<Tensor> wrong{Tensor({3}, 0.0)};
    CHECK_THROWS(optim::ema_update(wrong, params, 0.5));
}
