#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>

#include "flowmo/pipeline.hpp"
#include "flowmo/trainer.hpp"

using namespace flowmo;
namespace fs = std::filesystem;

namespace {

ConfigBundle micro_bundle() {
    auto b = tiny_config();
    b.model.image_resolution = 8;
    b.model.patch_size = 4;
    b.model.width = 16;
    b.model.encoder_depth = 1;
    b.model.decoder_depth = 1;
    b.model.latent_seq_len = 4;
    b.model.token_bits = 4;
    b.model.entropy_group_bits = 2;
    b.train.batch_size = 4;
    b.train.max_steps = 6;
    b.train.stage1b_max_steps = 3;
    b.train.stage1b_num_steps = 2;
    b.train.eval_interval = 2;
    b.train.eval_sampler_steps = 2;
    b.train.encoder_freeze_step = 1000;
    return b;
}

const data::Dataset& micro_data() {
    static const auto ds = data::synthetic_dataset(3, 16, 8);
    return ds;
}

bool same_report(const train::TrainReport& a, const train::TrainReport& b) {
    if (a.steps.size() != b.steps.size() || a.evals.size() != b.evals.size()) return false;
    for (std::size_t i = 0; i < a.steps.size(); ++i) {
        const auto &x = a.steps[i], &y = b.steps[i];
        if (x.step != y.step || x.flow != y.flow || x.perc != y.perc || x.commit != y.commit || x.ent != y.ent ||
            x.sample != y.sample || x.total != y.total)
            return false;
    }
    for (std::size_t i = 0; i < a.evals.size(); ++i)
        if (a.evals[i].psnr != b.evals[i].psnr || a.evals[i].perceptual != b.evals[i].perceptual) return false;
    return true;
}

bool same_tensors(const std::vector<Tensor>& a, const std::vector<Tensor>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (a[i].shape() != b[i].shape() || a[i].vec() != b[i].vec()) return false;
    return true;
}

std::vector<Tensor> encoder_tensors(const ckpt::CheckpointState& s, const std::vector<Tensor>& which) {
    std::vector<Tensor> out;
    for (std::size_t i = 0; i < s.names.size(); ++i)
        if (model::Tokenizer::is_encoder_param(s.names[i])) out.push_back(which[i]);
    return out;
}

const train::TrainResult& micro_stage1a() {
    static const auto r = [] {
        const auto cfg = validate_config(micro_bundle());
        return train::train_stage1a(cfg, micro_data(), {});
    }();
    return r;
}

}  // namespace

TEST_CASE("moving average over a window") {
    train::MovingAverage m(3);
    CHECK(m.value() == 0.0);
    CHECK_FALSE(m.full());
    m.push(1.0);
    m.push(2.0);
    CHECK(m.value() == 1.5);
    m.push(3.0);
    CHECK(m.full());
    CHECK(m.value() == 2.0);
    m.push(10.0);  // evicts 1
    CHECK(m.value() == doctest::Approx(5.0).epsilon(1e-15));
    m.push(10.0);
    m.push(10.0);
    CHECK(m.value() == doctest::Approx(10.0).epsilon(1e-15));
}

TEST_CASE("divergence error reports its step") {
    const train::DivergenceError e(17, 1e9, 2.5);
    CHECK(e.step() == 17);
    CHECK(std::string(e.what()).find("17") != std::string::npos);
}

TEST_CASE("stage 1A is deterministic for a fixed seed") {
    const auto cfg = validate_config(micro_bundle());
    train::TrainOptions opts;
    opts.seed = 5;
    const auto a = train::train_stage1a(cfg, micro_data(), opts);
    const auto b = train::train_stage1a(cfg, micro_data(), opts);
    CHECK(same_report(a.report, b.report));
    CHECK(same_tensors(a.checkpoint.params, b.checkpoint.params));
    CHECK(same_tensors(a.checkpoint.ema, b.checkpoint.ema));
    CHECK(a.checkpoint.stage == ckpt::StageTag::Stage1A);
    CHECK(a.checkpoint.step == 6);
    CHECK(a.checkpoint.fingerprint == cfg.model_fingerprint);
    CHECK(a.report.steps.size() == 6);
    for (const auto& s : a.report.steps) {
        CHECK(std::isfinite(s.total));
        CHECK(s.sample == 0.0);
        const auto& t = cfg.bundle.train;
        CHECK(s.total ==
              doctest::Approx(s.flow + t.lambda_perc * s.perc + t.lambda_commit * s.commit + t.lambda_ent * s.ent)
                  .epsilon(1e-9));
    }

    opts.seed = 6;
    const auto c = train::train_stage1a(cfg, micro_data(), opts);
    CHECK_FALSE(same_tensors(a.checkpoint.params, c.checkpoint.params));
}

TEST_CASE("stage 1A step callback and validation evaluations") {
    const auto cfg = validate_config(micro_bundle());
    const auto val = data::synthetic_dataset(4, 3, 8);
    train::TrainOptions opts;
    opts.validation = &val;
    std::size_t calls = 0;
    opts.on_step = [&](const train::StepRecord& r) { CHECK(r.step == ++calls); };
    const auto r = train::train_stage1a(cfg, micro_data(), opts);
    CHECK(calls == 6);
    REQUIRE(r.report.evals.size() == 3);
    CHECK(r.report.evals[0].step == 2);
    CHECK(r.report.evals[2].step == 6);
    for (const auto& e : r.report.evals) {
        CHECK(std::isfinite(e.psnr));
        CHECK(e.perceptual >= 0.0);
    }

    // The evaluation at the last step equals a fresh evaluation of the EMA tokenizer.
    const auto tok = train::load_tokenizer(cfg.bundle.model, r.checkpoint, true);
    const auto snap = train::evaluate(tok, cfg.bundle.train, data::stack_all(val), opts.eval_noise_seed, 6);
    CHECK(snap.psnr == doctest::Approx(r.report.evals.back().psnr).epsilon(1e-12));
    CHECK(snap.perceptual == doctest::Approx(r.report.evals.back().perceptual).epsilon(1e-12));
}

TEST_CASE("encoder stops moving after the freeze step") {
    auto b = micro_bundle();
    b.train.encoder_freeze_step = 3;
    b.train.max_steps = 3;
    const auto at3 = train::train_stage1a(validate_config(b), micro_data(), {});
    b.train.max_steps = 6;
    const auto at6 = train::train_stage1a(validate_config(b), micro_data(), {});
    CHECK(same_tensors(encoder_tensors(at3.checkpoint, at3.checkpoint.params),
                       encoder_tensors(at6.checkpoint, at6.checkpoint.params)));
    // the decoder kept training
    CHECK_FALSE(same_tensors(at3.checkpoint.params, at6.checkpoint.params));

    // without the freeze the encoder keeps changing
    b.train.encoder_freeze_step = 1000;
    const auto free6 = train::train_stage1a(validate_config(b), micro_data(), {});
    CHECK_FALSE(same_tensors(encoder_tensors(at3.checkpoint, at3.checkpoint.params),
                             encoder_tensors(free6.checkpoint, free6.checkpoint.params)));
}

TEST_CASE("stage 1B keeps the encoder and the tokens fixed") {
    const auto cfg = validate_config(micro_bundle());
    const auto& init = micro_stage1a().checkpoint;
    const auto r = train::train_stage1b(cfg, init, micro_data(), {});
    CHECK(r.checkpoint.stage == ckpt::StageTag::Stage1B);
    CHECK(r.checkpoint.step == 3);
    CHECK(r.report.steps.size() == 3);
    for (const auto& s : r.report.steps) {
        CHECK(s.sample > 0.0);
        CHECK(s.total == doctest::Approx(s.flow + cfg.bundle.train.lambda_sample * s.sample).epsilon(1e-12));
    }

    // the raw encoder after 1B is the EMA encoder of 1A, and stays the EMA encoder
    const auto before = encoder_tensors(init, init.ema);
    CHECK(same_tensors(encoder_tensors(r.checkpoint, r.checkpoint.params), before));
    CHECK(same_tensors(encoder_tensors(r.checkpoint, r.checkpoint.ema), before));
    CHECK_FALSE(same_tensors(r.checkpoint.params, init.params));

    const auto images = data::stack_all(data::synthetic_dataset(8, 5, 8));
    const auto pre = pipeline::encode_tokens(train::load_tokenizer(cfg.bundle.model, init, true), images);
    const auto post = pipeline::encode_tokens(train::load_tokenizer(cfg.bundle.model, r.checkpoint, true), images);
    CHECK(pre.ids == post.ids);
}

TEST_CASE("stage 1B with zero sample weight matches the flow-only ablation") {
    auto b = micro_bundle();
    b.train.lambda_sample = 0.0;
    const auto cfg = validate_config(b);
    const auto& init = micro_stage1a().checkpoint;
    train::TrainOptions chain, flow_only;
    flow_only.stage1b_mode = train::Stage1BMode::FlowOnly;
    const auto a = train::train_stage1b(cfg, init, micro_data(), chain);
    const auto c = train::train_stage1b(cfg, init, micro_data(), flow_only);
    CHECK(same_report(a.report, c.report));
    CHECK(same_tensors(a.checkpoint.params, c.checkpoint.params));
    for (const auto& s : a.report.steps) CHECK(s.total == s.flow);

    // the one-step ablation trains a different decoder when the weight is live
    const auto live = validate_config(micro_bundle());
    train::TrainOptions one;
    one.stage1b_mode = train::Stage1BMode::OneStep;
    const auto x = train::train_stage1b(live, init, micro_data(), one);
    const auto y = train::train_stage1b(live, init, micro_data(), chain);
    CHECK_FALSE(same_tensors(x.checkpoint.params, y.checkpoint.params));
}

TEST_CASE("stage 1B resumes from a 1B checkpoint and rejects foreign ones") {
    const auto cfg = validate_config(micro_bundle());
    const auto& init = micro_stage1a().checkpoint;
    const auto first = train::train_stage1b(cfg, init, micro_data(), {});
    const auto second = train::train_stage1b(cfg, first.checkpoint, micro_data(), {});
    CHECK(second.checkpoint.step == 6);
    CHECK(second.checkpoint.stage == ckpt::StageTag::Stage1B);

    auto other = micro_bundle();
    other.model.width = 8;
    CHECK_THROWS_AS(train::train_stage1b(validate_config(other), init, micro_data(), {}),
                    ckpt::FingerprintMismatchError);

    auto stage2 = init;
    stage2.stage = ckpt::StageTag::Stage2;
    CHECK_THROWS_AS(train::train_stage1b(cfg, stage2, micro_data(), {}), ckpt::StageError);
}

TEST_CASE("stage 1B early stopping keeps the best snapshot") {
    auto b = micro_bundle();
    b.train.stage1b_max_steps = 40;
    b.train.eval_interval = 1;
    b.train.learning_rate = 0.05;  // noisy enough that validation stalls quickly
    const auto cfg = validate_config(b);
    const auto val = data::synthetic_dataset(4, 3, 8);
    train::TrainOptions opts;
    opts.validation = &val;
    const auto r = train::train_stage1b(cfg, micro_stage1a().checkpoint, micro_data(), opts);
    REQUIRE_FALSE(r.report.evals.empty());
    double best = r.report.evals.front().perceptual;
    std::size_t best_step = r.report.evals.front().step;
    for (const auto& e : r.report.evals)
        if (e.perceptual < best) {
            best = e.perceptual;
            best_step = e.step;
        }
    CHECK(r.report.best_step == best_step);
    CHECK(r.checkpoint.step == best_step);
    if (r.report.early_stopped) {
        CHECK(r.report.steps.size() < 40);
        CHECK(r.report.steps.size() == best_step + 3);
    }
}

TEST_CASE("dataset shape mismatch is rejected") {
    const auto cfg = validate_config(micro_bundle());
    const auto wrong = data::synthetic_dataset(1, 4, 16);
    CHECK_THROWS_AS(train::train_stage1a(cfg, wrong, {}), std::invalid_argument);
    CHECK_THROWS_AS(train::train_stage1a(cfg, data::Dataset{}, {}), std::invalid_argument);
}

TEST_CASE("report CSV") {
    train::TrainReport rep;
    rep.steps.push_back({1, 0.5, 0.25, 1.0, -0.5, 0.0, 0.6});
    rep.steps.push_back({2, 0.4, 0.2, 1.0, -0.4, 0.0, 0.5});
    rep.evals.push_back({2, 21.5, 0.125});
    rep.best_step = 2;
    const auto path = fs::temp_directory_path() / "flowmo_report.csv";
    rep.write_csv(path);
    std::ifstream f(path);
    std::string header, l1, l2, tail;
    std::getline(f, header);
    std::getline(f, l1);
    std::getline(f, l2);
    std::getline(f, tail);
    CHECK(header == "step,flow,perc,commit,ent,sample,total,eval_psnr,eval_perceptual");
    CHECK(l1 == "1,0.5,0.25,1,-0.5,0,0.6,,");
    CHECK(l2 == "2,0.4,0.2,1,-0.4,0,0.5,21.5,0.125");
    CHECK(tail == "# early_stopped=0 best_step=2");
    fs::remove(path);
}
