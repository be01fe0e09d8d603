#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "flowmo/flow.hpp"
#include "support.hpp"

using namespace flowmo;
using flowmo::test::random_tensor;

TEST_CASE("interpolate endpoints and midpoint") {
    Rng rng(1);
    const auto x = random_tensor({2, 3, 4, 4}, rng);
    const auto z = random_tensor({2, 3, 4, 4}, rng);
    const auto cx = ad::constant(x), cz = ad::constant(z);
    CHECK(flow::interpolate(cx, cz, {0.0, 0.0}).value().vec() == x.vec());
    CHECK(flow::interpolate(cx, cz, {1.0, 1.0}).value().vec() == z.vec());
    const auto mid = flow::interpolate(ad::constant(Tensor({1, 1}, 0.0)), ad::constant(Tensor({1, 1}, 2.0)), {0.5});
    CHECK(mid.value()[0] == 1.0);

    // per-sample t: sample 0 stays clean, sample 1 is pure noise
    const auto mixed = flow::interpolate(cx, cz, {0.0, 1.0});
    const std::size_t half = x.numel() / 2;
    for (std::size_t i = 0; i < half; ++i) CHECK(mixed.value()[i] == x[i]);
    for (std::size_t i = half; i < x.numel(); ++i) CHECK(mixed.value()[i] == z[i]);

    CHECK_THROWS_AS(flow::interpolate(cx, cz, {0.5, 1.5}), std::invalid_argument);
    CHECK_THROWS_AS(flow::interpolate(cx, cz, {-0.1, 0.5}), std::invalid_argument);
    CHECK_THROWS_AS(flow::interpolate(cx, cz, {0.5}), std::invalid_argument);
}

TEST_CASE("interpolant stays on the segment") {
    Rng rng(2);
    for (int trial = 0; trial < 200; ++trial) {
        const auto x = random_tensor({1, 8}, rng);
        const auto z = random_tensor({1, 8}, rng, -3, 3);
        const double t = uniform01(rng);
        const auto xt = flow::interpolate(ad::constant(x), ad::constant(z), {t}).value();
        for (std::size_t i = 0; i < 8; ++i) {
            const double lo = std::min(x[i], z[i]), hi = std::max(x[i], z[i]);
            CHECK(xt[i] >= lo - 1e-15);
            CHECK(xt[i] <= hi + 1e-15);
        }
    }
}

TEST_CASE("flow loss values") {
    Rng rng(3);
    const auto x = random_tensor({2, 3, 4, 4}, rng);
    const auto z = random_tensor({2, 3, 4, 4}, rng);
    Tensor target(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) target[i] = x[i] - z[i];
    CHECK(flow::flow_loss(ad::constant(target), ad::constant(x), ad::constant(z)).value().item() == 0.0);

    Tensor off = target;
    for (auto& v : off.vec()) v += 0.3;
    CHECK(flow::flow_loss(ad::constant(off), ad::constant(x), ad::constant(z)).value().item() ==
          doctest::Approx(0.09).epsilon(1e-12));
}

TEST_CASE("flow loss is permutation invariant over the batch") {
    Rng rng(4);
    const auto v = random_tensor({4, 6}, rng), x = random_tensor({4, 6}, rng), z = random_tensor({4, 6}, rng);
    auto permute = [](const Tensor& t) {
        Tensor out(t.shape());
        const std::size_t order[] = {2, 0, 3, 1};
        for (std::size_t b = 0; b < 4; ++b)
            for (std::size_t i = 0; i < 6; ++i) out[b * 6 + i] = t[order[b] * 6 + i];
        return out;
    };
    const double a = flow::flow_loss(ad::constant(v), ad::constant(x), ad::constant(z)).value().item();
    const double b =
        flow::flow_loss(ad::constant(permute(v)), ad::constant(permute(x)), ad::constant(permute(z))).value().item();
    CHECK(a == doctest::Approx(b).epsilon(1e-14));
}

TEST_CASE("flow loss gradient matches finite differences") {
    Rng rng(5);
    const std::vector<Tensor> in{random_tensor({2, 3, 4, 4}, rng), random_tensor({2, 3, 4, 4}, rng),
                                 random_tensor({2, 3, 4, 4}, rng)};
    CHECK(test::max_grad_error([](const auto& v) { return flow::flow_loss(v[0], v[1], v[2]); }, in) <= 1e-4);
}

TEST_CASE("one-step denoise") {
    const auto xt = ad::constant(Tensor({1, 1}, 0.5));
    CHECK(flow::denoise_one_step(xt, ad::constant(Tensor({1, 1}, 1.0)), {0.5}).value()[0] == 1.0);
    CHECK(flow::denoise_one_step(xt, ad::constant(Tensor({1, 1}, 7.0)), {0.0}).value()[0] == 0.5);

    Rng rng(6);
    for (int trial = 0; trial < 100; ++trial) {
        const auto x = random_tensor({2, 5}, rng), z = random_tensor({2, 5}, rng);
        const std::vector<double> t{uniform01(rng), uniform01(rng)};
        Tensor v(x.shape());
        for (std::size_t i = 0; i < x.numel(); ++i) v[i] = x[i] - z[i];
        const auto xt = flow::interpolate(ad::constant(x), ad::constant(z), t);
        const auto back = flow::denoise_one_step(xt, ad::constant(v), t).value();
        for (std::size_t i = 0; i < x.numel(); ++i) CHECK(std::abs(back[i] - x[i]) <= 1e-6);
    }
}

TEST_CASE("noise level sampler: pure uniform branch passes KS") {
    Rng rng(7);
    const std::size_t n = 100000;
    std::vector<double> t(n);
    for (auto& v : t) {
        const auto s = flow::sample_noise_level(rng, 1.0);
        CHECK_FALSE(!s.from_uniform);
        v = s.t;
    }
    std::sort(t.begin(), t.end());
    double d = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double hi = static_cast<double>(i + 1) / n - t[i];
        const double lo = t[i] - static_cast<double>(i) / n;
        d = std::max({d, hi, lo});
    }
    CHECK(d < 1.628 / std::sqrt(static_cast<double>(n)));
}

TEST_CASE("noise level sampler: logit-normal median and mix fraction") {
    Rng rng(8);
    const std::size_t n = 100000;
    std::vector<double> t(n);
    for (auto& v : t) {
        const auto s = flow::sample_noise_level(rng, 0.0);
        CHECK_FALSE(s.from_uniform);
        v = s.t;
    }
    std::nth_element(t.begin(), t.begin() + n / 2, t.end());
    CHECK(std::abs(t[n / 2] - 0.5) <= 0.01);

    std::size_t flagged = 0;
    for (std::size_t i = 0; i < n; ++i) flagged += flow::sample_noise_level(rng, 0.1).from_uniform;
    CHECK(std::abs(static_cast<double>(flagged) / n - 0.1) <= 0.005);

    Rng a(9), b(9);
    for (int i = 0; i < 100; ++i) CHECK(flow::sample_noise_level(a, 0.3).t == flow::sample_noise_level(b, 0.3).t);
    CHECK_THROWS_AS(flow::sample_noise_level(a, 1.5), std::invalid_argument);
}

TEST_CASE("stage 1A loss assembly") {
    const auto f = ad::constant(Tensor::scalar(0.7));
    const auto p = ad::constant(Tensor::scalar(2.0));
    const auto c = ad::constant(Tensor::scalar(3.0));
    const auto e = ad::constant(Tensor::scalar(-1.5));

    auto zero = flow::stage1a_loss(f, p, c, e, {0.0, 0.0, 0.0});
    CHECK(zero.values.total == 0.7);

    const flow::LossWeights defaults;
    CHECK(defaults.perc == 0.1);
    CHECK(defaults.commit == 0.000625);
    CHECK(defaults.ent == 0.0025);
    auto full = flow::stage1a_loss(f, p, c, e, defaults);
    CHECK(full.values.total == doctest::Approx(0.7 + 0.1 * 2.0 + 0.000625 * 3.0 - 0.0025 * 1.5).epsilon(1e-15));
    CHECK(full.total.value().item() == full.values.total);

    Rng rng(10);
    for (int trial = 0; trial < 100; ++trial) {
        const flow::LossWeights w{uniform01(rng), uniform01(rng), uniform01(rng)};
        const double vals[] = {uniform01(rng), uniform01(rng), uniform01(rng), uniform01(rng) - 0.5};
        auto r = flow::stage1a_loss(ad::constant(Tensor::scalar(vals[0])), ad::constant(Tensor::scalar(vals[1])),
                                    ad::constant(Tensor::scalar(vals[2])), ad::constant(Tensor::scalar(vals[3])), w);
        const auto& b = r.values;
        CHECK(b.total == b.flow + b.weights.perc * b.perc + b.weights.commit * b.commit + b.weights.ent * b.ent);
    }

    // FSQ: undefined commitment and entropy terms count as zero
    auto fsq = flow::stage1a_loss(f, p, ad::Var{}, ad::Var{}, defaults);
    CHECK(fsq.values.total == doctest::Approx(0.7 + 0.2).epsilon(1e-15));
    CHECK_THROWS_AS(flow::stage1a_loss(f, p, c, e, {-0.1, 0.0, 0.0}), std::invalid_argument);
}

TEST_CASE("stage 1A loss gradients flow to every component") {
    std::vector<Tensor> in{Tensor::scalar(0.4), Tensor::scalar(0.9), Tensor::scalar(1.1), Tensor::scalar(-0.2)};
    const auto g = test::ad_gradients(
        [](const auto& v) { return flow::stage1a_loss(v[0], v[1], v[2], v[3], {0.1, 0.000625, 0.0025}).total; }, in);
    CHECK(g[0].item() == 1.0);
    CHECK(g[1].item() == doctest::Approx(0.1));
    CHECK(g[2].item() == doctest::Approx(0.000625));
    CHECK(g[3].item() == doctest::Approx(0.0025));
}
