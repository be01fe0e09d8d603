#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "flowmo/config.hpp"

using namespace flowmo;

namespace {

bool mentions(const ConfigError& e, const std::string& needle) {
    for (const auto& p : e.problems())
        if (p.find(needle) != std::string::npos) return true;
    return false;
}

template <typename Fn>
ConfigError capture_error(Fn&& fn) {
    try {
        fn();
    } catch (const ConfigError& e) {
        return e;
    }
    FAIL("expected ConfigError");
    return ConfigError({});
}

}  // namespace

TEST_CASE("bpp matches published rate table") {
    struct Row {
        std::uint64_t s, v;
        double shown;
    };
    const Row rows[] = {{256, 1u << 18, 0.070}, {1024, 1u << 14, 0.219}, {32, 1u << 12, 0.006},
                        {64, 1u << 12, 0.012},  {128, 1u << 12, 0.023},  {256, 1u << 14, 0.055}};
    for (const auto& r : rows) CHECK(std::abs(compute_bpp(r.s, r.v, 256) - r.shown) <= 5e-4);

    CHECK(compute_bpp(256, 1u << 18, 256) == 0.0703125);
    CHECK(compute_bpp(1024, 1u << 14, 256) == 0.21875);
    CHECK(compute_bpp(32, 1u << 12, 256) == 0.005859375);
}

TEST_CASE("bpp rejects bad arguments") {
    CHECK_THROWS_AS(compute_bpp(0, 16, 32), std::invalid_argument);
    CHECK_THROWS_AS(compute_bpp(4, 16, 0), std::invalid_argument);
    CHECK_THROWS_AS(compute_bpp(4, 0, 32), std::invalid_argument);
    try {
        compute_bpp(4, 1000, 32);
        FAIL("non power of two accepted");
    } catch (const std::invalid_argument& e) {
        CHECK(std::string(e.what()).find("1000") != std::string::npos);
    }
}

TEST_CASE("bpp is monotone in sequence length and bits") {
    std::mt19937_64 rng(7);
    std::uniform_int_distribution<std::uint64_t> s_dist(1, 4096);
    std::uniform_int_distribution<int> b_dist(1, 40);
    for (int trial = 0; trial < 500; ++trial) {
        const auto s = s_dist(rng);
        const int b = b_dist(rng);
        const std::uint64_t v = std::uint64_t{1} << b;
        CHECK(compute_bpp(s + 1, v, 256) > compute_bpp(s, v, 256));
        CHECK(compute_bpp(s, v << 1, 256) > compute_bpp(s, v, 256));
    }
}

TEST_CASE("validation accepts the published bit layouts") {
    auto b = default_config();
    b.model.token_bits = 18;
    b.model.entropy_group_bits = 9;
    CHECK(validate_config(b).bundle.model.groups_per_token() == 2);
    b.model.token_bits = 56;
    b.model.entropy_group_bits = 14;
    CHECK(validate_config(b).bundle.model.groups_per_token() == 4);
}

TEST_CASE("validation names every violated field") {
    auto b = default_config();
    b.model.patch_size = 7;
    b.model.image_resolution = 32;
    auto e = capture_error([&] { validate_config(b); });
    CHECK(mentions(e, "model.patch_size"));

    b = default_config();
    b.model.token_bits = 10;
    b.model.entropy_group_bits = 4;
    b.model.latent_dropout_prob = 1.5;
    b.train.ema_rate = 1.0;
    b.train.lambda_ent = -1.0;
    b.sampler.rho = 0.5;
    b.sampler.guidance_lo = 0.6;
    b.sampler.guidance_hi = 0.5;
    b.sampler.num_steps = 0;
    e = capture_error([&] { validate_config(b); });
    for (const char* key : {"model.token_bits", "model.latent_dropout_prob", "train.ema_rate", "train.lambda_ent",
                            "sampler.rho", "sampler.guidance_interval", "sampler.num_steps"})
        CHECK_MESSAGE(mentions(e, key), key);
}

TEST_CASE("validated bundle is unchanged") {
    const auto b = tiny_config();
    const auto v = validate_config(b);
    CHECK(to_config_text(v.bundle) == to_config_text(b));
}

TEST_CASE("fingerprints are deterministic and discriminating") {
    const auto a = validate_config(default_config());
    const auto b = validate_config(default_config());
    CHECK(a.fingerprint == b.fingerprint);
    CHECK(a.model_fingerprint == b.model_fingerprint);

    // Perturb each key in turn; every change must move the full fingerprint.
    std::set<std::uint64_t> seen{a.fingerprint};
    const auto text = to_config_text(default_config());
    for (const auto& key : config_keys()) {
        auto bundle = default_config();
        if (key == "model.quantizer_kind") {
            apply_override(bundle, key + "=FSQ");
        } else if (key == "sampler.guidance_interval") {
            apply_override(bundle, key + "=0.1,0.6");
        } else {
            const auto pos = text.find(key + " = ");
            REQUIRE(pos != std::string::npos);
            const auto eol = text.find('\n', pos);
            const auto value = text.substr(pos + key.size() + 3, eol - pos - key.size() - 3);
            const bool integral = value.find_first_not_of("0123456789") == std::string::npos;
            if (integral) {
                apply_override(bundle, key + "=" + std::to_string(std::stoull(value) + 1));
            } else {
                apply_override(bundle, key + "=" + std::to_string(std::stod(value) * 0.5 + 0.001));
            }
        }
        try {
            const auto v = validate_config(bundle);
            CHECK_MESSAGE(seen.insert(v.fingerprint).second, key);
        } catch (const ConfigError&) {
            // some perturbations break divisibility; those are covered elsewhere
        }
    }
}

TEST_CASE("model fingerprint ignores training fields") {
    auto a = tiny_config();
    auto b = tiny_config();
    b.train.learning_rate = 1e-5;
    b.sampler.num_steps = 3;
    CHECK(validate_config(a).model_fingerprint == validate_config(b).model_fingerprint);
    b.model.width = 32;
    CHECK(validate_config(a).model_fingerprint != validate_config(b).model_fingerprint);
}

TEST_CASE("config text round trips") {
    auto b = tiny_config();
    b.sampler.guidance_lo = 0.2;
    b.model.quantizer_kind = QuantizerKind::FSQ;
    b.model.fsq_levels = 5;
    const auto text = to_config_text(b);
    CHECK(to_config_text(parse_config_text(text)) == text);

    const auto path = std::filesystem::temp_directory_path() / "flowmo_test_config.txt";
    {
        std::ofstream f(path);
        f << "# comment\n\n" << text;
    }
    CHECK(to_config_text(load_config_file(path)) == text);
    std::filesystem::remove(path);
}

TEST_CASE("parse errors carry line numbers and keys") {
    auto e = capture_error([] { parse_config_text("model.width = 64\nbogus.key = 1\nmodel.width = abc\nnoequals\n"); });
    CHECK(mentions(e, "line 2"));
    CHECK(mentions(e, "bogus.key"));
    CHECK(mentions(e, "line 3"));
    CHECK(mentions(e, "line 4"));
    CHECK(e.problems().size() == 3);

    auto b = default_config();
    CHECK_THROWS_AS(apply_override(b, "model.width"), ConfigError);
    CHECK_THROWS_AS(apply_override(b, "model.width=-3"), ConfigError);
    CHECK_THROWS_AS(apply_override(b, "train.learning_rate=nan"), ConfigError);
    CHECK_THROWS_AS(apply_override(b, "model.quantizer_kind=VQ"), ConfigError);
    apply_override(b, " model.quantizer_kind = fsq ");
    CHECK(b.model.quantizer_kind == QuantizerKind::FSQ);
    CHECK_THROWS_AS(load_config_file("/nonexistent/flowmo.cfg"), ConfigError);
}

TEST_CASE("presets validate") {
    CHECK_NOTHROW(validate_config(default_config()));
    CHECK_NOTHROW(validate_config(tiny_config()));
}
