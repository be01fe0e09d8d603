#include "flowmo/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>

#include "flowmo/flow.hpp"
#include "flowmo/metrics.hpp"
#include "flowmo/optim.hpp"
#include "flowmo/pipeline.hpp"
#include "flowmo/quantizer.hpp"

namespace flowmo::train {

namespace {

constexpr std::size_t kDivergenceWindow = 100;
constexpr double kDivergenceFactor = 10.0;
constexpr std::size_t kEarlyStopPatience = 3;

void check_dataset(const data::Dataset& ds, const ModelConfig& m, const char* what) {
    if (ds.empty()) throw std::invalid_argument(std::string(what) + ": dataset is empty");
    const Shape expected{m.channels, m.image_resolution, m.image_resolution};
    for (const auto& r : ds)
        if (r.pixels.shape() != expected)
            throw std::invalid_argument(std::string(what) + ": image " + r.source + " has shape " +
                                        shape_to_string(r.pixels.shape()) + ", config expects " +
                                        shape_to_string(expected));
}

std::vector<double> draw_noise_levels(Rng& rng, std::size_t batch, double mix) {
    std::vector<double> t(batch);
    for (auto& v : t) v = flow::sample_noise_level(rng, mix).t;
    return t;
}

SamplerConfig eval_sampler(const ValidatedConfig& config) {
    SamplerConfig s = config.bundle.sampler;
    s.num_steps = config.bundle.train.eval_sampler_steps;
    return s;
}

/// Evaluation tokenizer kept apart from the live parameters.
class Evaluator {
public:
    Evaluator(const ValidatedConfig& config, const TrainOptions& options)
        : config_(config), options_(options), extractor_(config.bundle.train.perceptual_seed_stage1a) {
        if (options.validation) {
            check_dataset(*options.validation, config.bundle.model, "validation set");
            images_ = data::stack_all(*options.validation);
            Rng rng(0);
            tokenizer_.emplace(config.bundle.model, rng);
        }
    }

    bool enabled() const { return tokenizer_.has_value(); }

    EvalSnapshot run(const std::vector<Tensor>& ema, std::size_t step) {
        tokenizer_->params().set_values(ema);
        return evaluate_with(*tokenizer_, eval_sampler(config_), extractor_, images_, options_.eval_noise_seed, step);
    }

    static EvalSnapshot evaluate_with(const model::Tokenizer& tok, const SamplerConfig& sampler,
                                      const metrics::PerceptualExtractor& extractor, const Tensor& images,
                                      std::uint64_t noise_seed, std::size_t step) {
        const Tensor recon = pipeline::reconstruct(tok, images, sampler, noise_seed);
        const auto perc = extractor.distance_per_image(images, recon);
        EvalSnapshot snap;
        snap.step = step;
        const std::size_t N = images.dim(0), per = images.numel() / N;
        for (std::size_t i = 0; i < N; ++i) {
            Tensor a(Shape{per}, std::vector<double>(images.data() + i * per, images.data() + (i + 1) * per));
            Tensor b(Shape{per}, std::vector<double>(recon.data() + i * per, recon.data() + (i + 1) * per));
            snap.psnr += std::min(metrics::psnr(a, b), 100.0) / static_cast<double>(N);
            snap.perceptual += perc[i] / static_cast<double>(N);
        }
        return snap;
    }

private:
    const ValidatedConfig& config_;
    const TrainOptions& options_;
    metrics::PerceptualExtractor extractor_;
    Tensor images_;
    std::optional<model::Tokenizer> tokenizer_;
};

struct DivergenceGuard {
    MovingAverage average{kDivergenceWindow};

    void check(std::size_t step, double total) {
        if (!std::isfinite(total)) throw DivergenceError(step, total, average.full() ? average.value() : 0.0);
        if (average.full() && total > kDivergenceFactor * average.value())
            throw DivergenceError(step, total, average.value());
        average.push(total);
    }
};

void scale_grads(ParameterStore& store, double factor) {
    if (factor == 1.0) return;
    for (auto& p : store.all()) {
        auto& node = *p.var.node();
        if (node.grad.empty()) continue;
        for (auto& g : node.grad.vec()) g *= factor;
    }
}

}  // namespace

// ------------------------------------------------------------------ report

DivergenceError::DivergenceError(std::size_t step, double loss, double average)
    : std::runtime_error([&] {
          char buf[160];
          std::snprintf(buf, sizeof buf, "training diverged at step %zu: loss %.6g exceeds %.0fx its moving average %.6g",
                        step, loss, kDivergenceFactor, average);
          return std::string(buf);
      }()),
      step_(step) {}

void MovingAverage::push(double v) {
    if (values_.size() < window_) {
        values_.push_back(v);
    } else {
        sum_ -= values_[head_];
        values_[head_] = v;
        head_ = (head_ + 1) % window_;
    }
    sum_ += v;
}

double MovingAverage::value() const { return values_.empty() ? 0.0 : sum_ / static_cast<double>(values_.size()); }

void TrainReport::write_csv(const std::filesystem::path& path) const {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write report " + path.string());
    std::map<std::size_t, const EvalSnapshot*> by_step;
    for (const auto& e : evals) by_step[e.step] = &e;
    os << "step,flow,perc,commit,ent,sample,total,eval_psnr,eval_perceptual\n";
    char buf[256];
    for (const auto& s : steps) {
        std::snprintf(buf, sizeof buf, "%zu,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g", s.step, s.flow, s.perc, s.commit,
                      s.ent, s.sample, s.total);
        os << buf;
        if (auto it = by_step.find(s.step); it != by_step.end()) {
            std::snprintf(buf, sizeof buf, ",%.10g,%.10g", it->second->psnr, it->second->perceptual);
            os << buf << '\n';
        } else {
            os << ",,\n";
        }
    }
    os << "# early_stopped=" << (early_stopped ? 1 : 0) << " best_step=" << best_step << '\n';
}

// ------------------------------------------------------------------ helpers

model::Tokenizer load_tokenizer(const ModelConfig& config, const ckpt::CheckpointState& state, bool use_ema) {
    Rng rng(0);
    model::Tokenizer tok(config, rng);
    ckpt::restore(tok.params(), state, use_ema ? state.ema : state.params);
    return tok;
}

EvalSnapshot evaluate(const model::Tokenizer& tokenizer, const TrainConfig& train, const Tensor& images,
                      std::uint64_t noise_seed, std::size_t step) {
    SamplerConfig s;
    s.num_steps = train.eval_sampler_steps;
    const metrics::PerceptualExtractor extractor(train.perceptual_seed_stage1a);
    return Evaluator::evaluate_with(tokenizer, s, extractor, images, noise_seed, step);
}

// ------------------------------------------------------------------ stage 1A

TrainResult train_stage1a(const ValidatedConfig& config, const data::Dataset& train, const TrainOptions& options) {
    const auto& mc = config.bundle.model;
    const auto& tc = config.bundle.train;
    check_dataset(train, mc, "train_stage1a");

    Rng init_rng = derive_rng(options.seed, 0x696e6974);  // "init"
    Rng rng = derive_rng(options.seed, 0x31611a);
    model::Tokenizer tok(mc, init_rng);
    auto& store = tok.params();
    std::vector<Tensor> ema = store.values();
    auto adam = optim::AdamState::zeros_like(store);
    const optim::AdamOptions adam_opts{tc.learning_rate, tc.adam_beta1, tc.adam_beta2};
    data::BatchSampler batches(train.size(), tc.batch_size, options.seed);
    const metrics::PerceptualExtractor perc_net(tc.perceptual_seed_stage1a);
    const flow::LossWeights weights = flow::LossWeights::from(tc);
    const bool lfq = mc.quantizer_kind == QuantizerKind::LFQ;
    Evaluator evaluator(config, options);
    DivergenceGuard guard;

    TrainResult result;
    for (std::size_t step = 1; step <= tc.max_steps; ++step) {
        const bool frozen = step > tc.encoder_freeze_step;
        store.zero_grad();
        StepRecord rec;
        rec.step = step;
        const double inv_accum = 1.0 / static_cast<double>(tc.grad_accumulation);
        for (std::size_t a = 0; a < tc.grad_accumulation; ++a) {
            const ad::Var x = ad::constant(data::stack(train, batches.next()));
            const std::size_t B = x.dim(0);
            const ad::Var c_hat = tok.encode(x);
            const ad::Var c = model::apply_latent_dropout(tok.quantize(c_hat), mc.latent_dropout_prob, rng);
            const auto t = draw_noise_levels(rng, B, tc.uniform_mix_prob);
            const ad::Var z = ad::constant(normal_tensor(x.shape(), rng));
            const ad::Var x_t = flow::interpolate(x, z, t);
            const ad::Var v = tok.decode(x_t, c, t);

            const ad::Var l_flow = flow::flow_loss(v, x, z);
            const ad::Var l_perc = perc_net.distance(flow::denoise_one_step(x_t, v, t), x);
            ad::Var l_commit, l_ent;
            if (lfq) {
                l_commit = quant::commitment_loss(c_hat);
                l_ent = quant::entropy_loss(c_hat, mc.entropy_group_bits);
            }
            const auto loss = flow::stage1a_loss(l_flow, l_perc, l_commit, l_ent, weights);
            ad::backward(loss.total);
            rec.flow += loss.values.flow * inv_accum;
            rec.perc += loss.values.perc * inv_accum;
            rec.commit += loss.values.commit * inv_accum;
            rec.ent += loss.values.ent * inv_accum;
            rec.total += loss.values.total * inv_accum;
        }
        scale_grads(store, inv_accum);
        guard.check(step, rec.total);

        optim::adam_step(store, adam, adam_opts, [frozen](const Param& p) {
            return frozen && model::Tokenizer::is_encoder_param(p.name) ? 0.0 : 1.0;
        });
        model::renormalize_weights(store, [frozen](const Param& p) {
            return frozen && model::Tokenizer::is_encoder_param(p.name);
        });
        optim::ema_update(ema, store.values(), tc.ema_rate);

        result.report.steps.push_back(rec);
        if (options.on_step) options.on_step(rec);
        if (evaluator.enabled() && (step % tc.eval_interval == 0 || step == tc.max_steps))
            result.report.evals.push_back(evaluator.run(ema, step));
    }
    result.report.best_step = tc.max_steps;
    result.checkpoint = ckpt::capture(store, ema, adam, ckpt::StageTag::Stage1A, tc.max_steps, config.model_fingerprint,
                                      to_config_text(config.bundle));
    return result;
}

// ------------------------------------------------------------------ stage 1B

TrainResult train_stage1b(const ValidatedConfig& config, const ckpt::CheckpointState& init, const data::Dataset& train,
                          const TrainOptions& options) {
    const auto& mc = config.bundle.model;
    const auto& tc = config.bundle.train;
    check_dataset(train, mc, "train_stage1b");
    ckpt::require_fingerprint(init, config.model_fingerprint);
    if (init.stage != ckpt::StageTag::Stage1A && init.stage != ckpt::StageTag::Stage1B)
        throw ckpt::StageError("train_stage1b needs a Stage 1A or 1B checkpoint, got stage " + ckpt::stage_name(init.stage));
    const bool resume = init.stage == ckpt::StageTag::Stage1B;

    Rng rng = derive_rng(options.seed, 0x31621b);
    Rng unused(0);
    model::Tokenizer tok(mc, unused);
    auto& store = tok.params();
    ckpt::restore(store, init, init.params);
    std::vector<Tensor> ema = init.ema;

    // The frozen encoder is the one used at inference: the EMA encoder.
    const auto& all = store.all();
    std::vector<bool> is_encoder(all.size());
    {
        auto values = store.values();
        for (std::size_t i = 0; i < all.size(); ++i) {
            is_encoder[i] = model::Tokenizer::is_encoder_param(all[i].name);
            if (is_encoder[i]) values[i] = ema[i];
        }
        store.set_values(values);
    }

    auto adam = resume ? init.adam : optim::AdamState::zeros_like(store);
    const optim::AdamOptions adam_opts{0.5 * tc.learning_rate, tc.adam_beta1, tc.adam_beta2};
    const std::size_t batch = std::max<std::size_t>(1, tc.batch_size / 2);
    data::BatchSampler batches(train.size(), batch, options.seed);
    const metrics::PerceptualExtractor sample_net(tc.perceptual_seed_stage1b);
    const auto field = tok.velocity_field();
    Evaluator evaluator(config, options);
    DivergenceGuard guard;

    TrainResult result;
    std::optional<ckpt::CheckpointState> best;
    double best_perc = std::numeric_limits<double>::infinity();
    std::size_t since_best = 0;
    const std::uint64_t base_step = resume ? init.step : 0;
    std::size_t step = 0;

    for (step = 1; step <= tc.stage1b_max_steps; ++step) {
        store.zero_grad();
        StepRecord rec;
        rec.step = step;
        const double inv_accum = 1.0 / static_cast<double>(tc.grad_accumulation);
        for (std::size_t a = 0; a < tc.grad_accumulation; ++a) {
            const ad::Var x = ad::constant(data::stack(train, batches.next()));
            const std::size_t B = x.dim(0);
            ad::Var c;
            {
                ad::NoGradGuard no_grad;
                c = ad::constant(tok.quantize(tok.encode(x)).value());
            }
            const ad::Var c_drop = model::apply_latent_dropout(c, mc.latent_dropout_prob, rng);
            const auto t = draw_noise_levels(rng, B, tc.uniform_mix_prob);
            const ad::Var z = ad::constant(normal_tensor(x.shape(), rng));
            const auto schedule = sampling::random_schedule(tc.stage1b_num_steps, rng);
            const ad::Var z_chain = ad::constant(normal_tensor(x.shape(), rng));

            const ad::Var x_t = flow::interpolate(x, z, t);
            const ad::Var v = tok.decode(x_t, c_drop, t);
            const ad::Var l_flow = flow::flow_loss(v, x, z);
            ad::Var total = l_flow;
            rec.flow += l_flow.value().item() * inv_accum;

            ad::Var l_sample;
            if (tc.lambda_sample != 0.0) {
                switch (options.stage1b_mode) {
                    case Stage1BMode::Chain: {
                        const ad::Var x_hat = sampling::integrate(field, c, z_chain, schedule, {}, true);
                        l_sample = sample_net.distance(x_hat, x);
                        break;
                    }
                    case Stage1BMode::OneStep:
                        l_sample = sample_net.distance(flow::denoise_one_step(x_t, v, t), x);
                        break;
                    case Stage1BMode::FlowOnly:
                        break;
                }
            }
            if (l_sample.defined()) {
                total = ad::add(total, ad::scale(l_sample, tc.lambda_sample));
                rec.sample += l_sample.value().item() * inv_accum;
            }
            ad::backward(total);
            rec.total += total.value().item() * inv_accum;
        }
        scale_grads(store, inv_accum);
        guard.check(step, rec.total);

        optim::adam_step(store, adam, adam_opts,
                         [](const Param& p) { return model::Tokenizer::is_encoder_param(p.name) ? 0.0 : 1.0; });
        model::renormalize_weights(store, [](const Param& p) { return model::Tokenizer::is_encoder_param(p.name); });
        {
            const auto values = store.values();
            for (std::size_t i = 0; i < ema.size(); ++i) {
                if (is_encoder[i]) continue;
                std::vector<Tensor> one{ema[i]};
                optim::ema_update(one, {values[i]}, tc.ema_rate);
                ema[i] = std::move(one[0]);
            }
        }

        result.report.steps.push_back(rec);
        if (options.on_step) options.on_step(rec);

        if (evaluator.enabled() && (step % tc.eval_interval == 0 || step == tc.stage1b_max_steps)) {
            const auto snap = evaluator.run(ema, step);
            result.report.evals.push_back(snap);
            if (snap.perceptual < best_perc) {
                best_perc = snap.perceptual;
                since_best = 0;
                best = ckpt::capture(store, ema, adam, ckpt::StageTag::Stage1B, base_step + step,
                                     config.model_fingerprint, to_config_text(config.bundle));
                result.report.best_step = step;
            } else if (++since_best >= kEarlyStopPatience) {
                result.report.early_stopped = true;
                break;
            }
        }
    }
    if (best) {
        result.checkpoint = std::move(*best);
    } else {
        const std::size_t done = std::min(step, tc.stage1b_max_steps);
        result.report.best_step = done;
        result.checkpoint = ckpt::capture(store, ema, adam, ckpt::StageTag::Stage1B, base_step + done,
                                          config.model_fingerprint, to_config_text(config.bundle));
    }
    return result;
}

}  // namespace flowmo::train
