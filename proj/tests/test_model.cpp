#include <doctest.h>

#include <cmath>

#include "flowmo/flow.hpp"
#include "flowmo/model.hpp"
#include "flowmo/quantizer.hpp"
#include "support.hpp"

using namespace flowmo;
using flowmo::test::random_tensor;

namespace {

ModelConfig small_model() {
    ModelConfig m;
    m.image_resolution = 8;
    m.channels = 3;
    m.patch_size = 4;
    m.width = 16;
    m.encoder_depth = 1;
    m.decoder_depth = 1;
    m.num_heads = 2;
    m.mlp_ratio = 2;
    m.latent_seq_len = 4;
    m.token_bits = 4;
    m.entropy_group_bits = 2;
    return m;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    double d = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
    return d;
}

// Flow loss through encoder, straight-through quantizer and decoder.
ad::Var end_to_end_flow(const model::Tokenizer& tok, const Tensor& x, const Tensor& z, const std::vector<double>& t) {
    const auto cx = ad::constant(x), cz = ad::constant(z);
    const auto code = tok.quantize(tok.encode(cx));
    const auto v = tok.decode(flow::interpolate(cx, cz, t), code, t);
    return flow::flow_loss(v, cx, cz);
}

}  // namespace

TEST_CASE("patchify shapes and inverse") {
    Rng rng(1);
    const auto x = random_tensor({2, 3, 32, 32}, rng);
    const auto s4 = model::patchify(ad::constant(x), 4);
    CHECK(s4.shape() == Shape{2, 64, 48});
    const auto s8 = model::patchify(ad::constant(x), 8);
    CHECK(s8.shape() == Shape{2, 16, 192});
    CHECK(model::unpatchify(s4, 4, 3, 32, 32).value().vec() == x.vec());
    CHECK(model::unpatchify(s8, 8, 3, 32, 32).value().vec() == x.vec());
    CHECK_THROWS_AS(model::patchify(ad::constant(x), 7), std::invalid_argument);
    CHECK_THROWS_AS(model::unpatchify(s4, 8, 3, 32, 32), std::invalid_argument);
}

TEST_CASE("patchify layout: raster patches, channels innermost") {
    Tensor x({1, 2, 4, 4});
    for (std::size_t i = 0; i < x.numel(); ++i) x[i] = static_cast<double>(i);
    const auto s = model::patchify(ad::constant(x), 2).value();
    // patch (0, 1), pixel (1, 0), channel 1 -> x[0, 1, 1, 2]
    const std::size_t token = 1, within = (1 * 2 + 0) * 2 + 1;
    CHECK(s[token * 8 + within] == x[(1 * 4 + 1) * 4 + 2]);
}

TEST_CASE("patchify gradient is a permutation") {
    Rng rng(2);
    const std::vector<Tensor> in{random_tensor({1, 3, 8, 8}, rng)};
    const auto w = random_tensor({1, 4, 48}, rng);
    CHECK(test::max_grad_error(
              [&](const auto& v) { return ad::sum(ad::mul(model::patchify(v[0], 4), ad::constant(w))); }, in) <= 1e-6);
}

TEST_CASE("timestep embedding") {
    const auto e = model::timestep_embedding({0.0, 0.5}, 8);
    CHECK(e.shape() == Shape{2, 8});
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(e[i] == 1.0);
        CHECK(e[4 + i] == 0.0);
    }
    CHECK(e[8] == doctest::Approx(std::cos(500.0)));
    CHECK(e[12] == doctest::Approx(std::sin(500.0)));
}

TEST_CASE("latent dropout") {
    Rng rng(3);
    const auto c = ad::constant(random_tensor({6, 4, 4}, rng));
    CHECK(model::apply_latent_dropout(c, 0.0, rng).value().vec() == c.value().vec());
    const auto all_dropped = model::apply_latent_dropout(c, 1.0, rng).value();
    for (double v : all_dropped.vec()) CHECK(v == 0.0);
    CHECK_THROWS_AS(model::apply_latent_dropout(c, 1.2, rng), std::invalid_argument);

    // dropped samples are zeroed as a whole, kept ones untouched
    std::vector<bool> dropped;
    const auto out = model::apply_latent_dropout(c, 0.5, rng, &dropped).value();
    for (std::size_t b = 0; b < 6; ++b)
        for (std::size_t i = 0; i < 16; ++i) CHECK(out[b * 16 + i] == (dropped[b] ? 0.0 : c.value()[b * 16 + i]));

    const auto ones = ad::constant(Tensor({1000, 1, 1}, 1.0));
    std::size_t zeros = 0;
    for (int rep = 0; rep < 100; ++rep) {
        std::vector<bool> d;
        model::apply_latent_dropout(ones, 0.1, rng, &d);
        for (bool b : d) zeros += b;
    }
    CHECK(std::abs(static_cast<double>(zeros) / 1e5 - 0.1) <= 0.01);
}

TEST_CASE("renormalization of MLP rows") {
    ParameterStore store;
    store.add("mlp", Tensor({3, 2}, {3, 4, 0, 0, 0.6, 0.8}), ParamKind::MlpWeight);
    store.add("attn", Tensor({1, 2}, {3, 4}), ParamKind::Hidden);
    store.add("frozen.mlp", Tensor({1, 2}, {3, 4}), ParamKind::MlpWeight);
    model::renormalize_weights(store, [](const Param& p) { return p.name.rfind("frozen.", 0) == 0; });
    const auto& w = store.at("mlp").var.value();
    CHECK(w[0] == doctest::Approx(0.6).epsilon(1e-15));
    CHECK(w[1] == doctest::Approx(0.8).epsilon(1e-15));
    CHECK(w[2] == 0.0);
    CHECK(w[3] == 0.0);
    CHECK(w[4] == 0.6);
    CHECK(w[5] == 0.8);
    CHECK(store.at("attn").var.value().vec() == std::vector<double>{3, 4});
    CHECK(store.at("frozen.mlp").var.value().vec() == std::vector<double>{3, 4});
}

TEST_CASE("renormalization is idempotent and direction preserving on a model") {
    Rng rng(4);
    model::Tokenizer tok(small_model(), rng);
    const auto before = tok.params().values();
    model::renormalize_weights(tok.params());
    const auto once = tok.params().values();
    model::renormalize_weights(tok.params());
    const auto twice = tok.params().values();
    for (std::size_t i = 0; i < once.size(); ++i) CHECK(max_abs_diff(once[i], twice[i]) <= 1e-15);

    for (std::size_t i = 0; i < before.size(); ++i) {
        const auto& p = tok.params().all()[i];
        if (p.kind != ParamKind::MlpWeight) {
            CHECK(before[i].vec() == once[i].vec());
            continue;
        }
        const std::size_t rows = before[i].dim(0), cols = before[i].dim(1);
        for (std::size_t r = 0; r < rows; ++r) {
            const double ratio = before[i][r * cols] / once[i][r * cols];
            CHECK(ratio > 0.0);
            for (std::size_t c = 0; c < cols; ++c)
                CHECK(once[i][r * cols + c] * ratio == doctest::Approx(before[i][r * cols + c]).epsilon(1e-12));
        }
    }
}

TEST_CASE("encoder contract") {
    Rng rng(5);
    const auto cfg = small_model();
    model::Tokenizer tok(cfg, rng);
    const auto x = random_tensor({3, 3, 8, 8}, rng);
    const auto c = tok.encode(ad::constant(x)).value();
    CHECK(c.shape() == Shape{3, 4, 4});
    CHECK(tok.encode(ad::constant(x)).value().vec() == c.vec());

    // batch permutation permutes outputs
    Tensor perm(x.shape());
    const std::size_t img = 3 * 8 * 8;
    const std::size_t order[] = {2, 0, 1};
    for (std::size_t b = 0; b < 3; ++b)
        for (std::size_t i = 0; i < img; ++i) perm[b * img + i] = x[order[b] * img + i];
    const auto cp = tok.encode(ad::constant(perm)).value();
    for (std::size_t b = 0; b < 3; ++b)
        for (std::size_t i = 0; i < 16; ++i)
            CHECK(cp[b * 16 + i] == doctest::Approx(c[order[b] * 16 + i]).epsilon(1e-12));

    CHECK_THROWS_AS(tok.encode(ad::constant(Tensor({1, 3, 16, 16}, 0.0))), std::invalid_argument);
}

TEST_CASE("decoder contract") {
    Rng rng(6);
    model::Tokenizer tok(small_model(), rng);
    const auto xt = ad::constant(random_tensor({2, 3, 8, 8}, rng));
    const auto c = ad::constant(quant::binarize_values(random_tensor({2, 4, 4}, rng)));
    const auto v1 = tok.decode(xt, c, {0.3, 0.3}).value();
    CHECK(v1.shape() == xt.shape());
    CHECK(tok.decode(xt, c, {0.3, 0.3}).value().vec() == v1.vec());
    CHECK(max_abs_diff(tok.decode(xt, c, {0.8, 0.8}).value(), v1) > 0.0);
    const auto null = ad::constant(Tensor({2, 4, 4}, 0.0));
    CHECK(max_abs_diff(tok.decode(xt, null, {0.3, 0.3}).value(), v1) > 0.0);
    CHECK_THROWS_AS(tok.decode(xt, ad::constant(Tensor({2, 5, 4}, 0.0)), {0.3, 0.3}), std::invalid_argument);
    CHECK_THROWS_AS(tok.decode(xt, c, {0.3}), std::invalid_argument);
}

TEST_CASE("every encoder weight receives gradient from the flow loss") {
    Rng rng(7);
    model::Tokenizer tok(small_model(), rng);
    const auto x = random_tensor({4, 3, 8, 8}, rng);
    const auto z = normal_tensor({4, 3, 8, 8}, rng);
    ad::backward(end_to_end_flow(tok, x, z, {0.2, 0.4, 0.6, 0.8}));
    std::size_t checked = 0;
    for (const auto& p : tok.params().all()) {
        if (!model::Tokenizer::is_encoder_param(p.name) || p.kind == ParamKind::Bias) continue;
        double mx = 0.0;
        const auto grad = p.var.grad();
        for (double g : grad.vec()) mx = std::max(mx, std::abs(g));
        CHECK_MESSAGE(mx > 0.0, p.name);
        ++checked;
    }
    CHECK(checked > 5);
}

TEST_CASE("model parameter gradients match finite differences") {
    Rng rng(8);
    model::Tokenizer tok(small_model(), rng);
    const auto x = random_tensor({2, 3, 8, 8}, rng);
    const auto z = normal_tensor({2, 3, 8, 8}, rng);
    const std::vector<double> t{0.35, 0.7};
    ad::backward(end_to_end_flow(tok, x, z, t));
    for (auto& p : tok.params().all()) {
        if (model::Tokenizer::is_encoder_param(p.name)) continue;  // piecewise constant through the quantizer
        auto& w = p.var.mutable_value();
        const auto analytic = p.var.grad();
        std::vector<double> fd, ad_sub;
        for (std::size_t i = 0; i < w.numel(); i += std::max<std::size_t>(1, w.numel() / 5)) {
            const double orig = w[i], h = 1e-6;
            ad::NoGradGuard guard;
            w[i] = orig + h;
            const double lp = end_to_end_flow(tok, x, z, t).value().item();
            w[i] = orig - h;
            const double lm = end_to_end_flow(tok, x, z, t).value().item();
            w[i] = orig;
            fd.push_back((lp - lm) / (2 * h));
            ad_sub.push_back(analytic[i]);
        }
        CHECK_MESSAGE(test::rel_error(ad_sub, fd, 1e-8) <= 1e-4, p.name);
    }
}

TEST_CASE("muP initialisation") {
    for (std::size_t f : {1u, 2u, 4u}) {
        ParameterStore store;
        Rng rng(9);
        model::InitContext ctx{store, rng, static_cast<double>(f)};
        const std::size_t width = 32 * f;
        const auto hidden = model::make_linear(ctx, "h", width, width, ParamKind::Hidden);
        const auto out = model::make_linear(ctx, "o", width, 8, ParamKind::Output);
        CHECK(store.at("h.weight").lr_mult == doctest::Approx(1.0 / f));
        CHECK(store.at("o.weight").lr_mult == 1.0);

        Rng data(10);
        const auto x = ad::constant(normal_tensor({64, width}, data));
        const auto y = hidden(x).value();
        double ss = 0.0;
        for (double v : y.vec()) ss += v * v;
        const double rms = std::sqrt(ss / y.numel());
        CHECK(rms > 0.5);
        CHECK(rms < 2.0);

        double ws = 0.0;
        const auto& ow = store.at("o.weight").var.value();
        for (double v : ow.vec()) ws += v * v;
        const double expected_var = 1.0 / (width * f * f);
        CHECK(ws / ow.numel() == doctest::Approx(expected_var).epsilon(0.25));
    }

    auto cfg = small_model();
    Rng a(11), b(11);
    model::Tokenizer base(cfg, a);
    cfg.width_factor = 2;
    model::Tokenizer wide(cfg, b);
    CHECK(wide.params().at("encoder.patch_in.weight").var.dim(0) == 2 * base.params().at("encoder.patch_in.weight").var.dim(0));
    CHECK(wide.params().at("decoder.patch_in.weight").var.dim(0) == 2 * base.params().at("decoder.patch_in.weight").var.dim(0));
}
