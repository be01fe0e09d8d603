#pragma once

// Rectified-flow pieces: interpolation between data and noise, the velocity
// regression loss, one-step denoising, noise-level sampling, and assembly of
// the pre-training objective.

#include <vector>

#include "flowmo/autodiff.hpp"
#include "flowmo/config.hpp"
#include "flowmo/rng.hpp"

namespace flowmo::flow {

/// x_t = t z + (1 - t) x with one t per sample; t must lie in [0, 1].
ad::Var interpolate(const ad::Var& x, const ad::Var& z, const std::vector<double>& t);

/// mean((x - z - v_pred)^2). The regression target is v* = x - z.
ad::Var flow_loss(const ad::Var& v_pred, const ad::Var& x, const ad::Var& z);

/// x_hat = x_t + t v_pred.
ad::Var denoise_one_step(const ad::Var& x_t, const ad::Var& v_pred, const std::vector<double>& t);

struct NoiseLevel {
    double t = 0.0;
    bool from_uniform = false;
};

/// Thick-tailed logit-normal: Uniform(0,1) with probability
/// `uniform_mix_prob`, otherwise sigmoid(N(0,1)).
NoiseLevel sample_noise_level(Rng& rng, double uniform_mix_prob);

struct LossWeights {
    double perc = 0.1;
    double commit = 0.000625;
    double ent = 0.0025;

    static LossWeights from(const TrainConfig& train) { return {train.lambda_perc, train.lambda_commit, train.lambda_ent}; }
};

struct LossBundle {
    double flow = 0.0;
    double perc = 0.0;
    double commit = 0.0;
    double ent = 0.0;
    double total = 0.0;
    LossWeights weights;
};

struct Stage1ALoss {
    ad::Var total;
    LossBundle values;
};

/// total = flow + w.perc * perc + w.commit * commit + w.ent * ent.
/// Undefined `commit` / `ent` (FSQ) count as zero.
Stage1ALoss stage1a_loss(const ad::Var& flow, const ad::Var& perc, const ad::Var& commit, const ad::Var& ent,
                         const LossWeights& weights);

}  // namespace flowmo::flow
