#include "flowmo/flow.hpp"

#include <cmath>
#include <stdexcept>

namespace flowmo::flow {

namespace {

void check_levels(const std::vector<double>& t, std::size_t batch, const char* what) {
    if (t.size() != batch) {
        throw std::invalid_argument(std::string(what) + ": got " + std::to_string(t.size()) +
                                    " noise levels for batch " + std::to_string(batch));
    }
    for (double v : t)
        if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument(std::string(what) + ": t outside [0, 1]");
}

}  // namespace

ad::Var interpolate(const ad::Var& x, const ad::Var& z, const std::vector<double>& t) {
    require_same_shape(x.value(), z.value(), "interpolate");
    check_levels(t, x.dim(0), "interpolate");
    std::vector<double> keep(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) keep[i] = 1.0 - t[i];
    return ad::add(ad::scale_samples(z, t), ad::scale_samples(x, keep));
}

ad::Var flow_loss(const ad::Var& v_pred, const ad::Var& x, const ad::Var& z) {
    require_same_shape(v_pred.value(), x.value(), "flow_loss");
    require_same_shape(x.value(), z.value(), "flow_loss");
    return ad::mse(v_pred, ad::sub(x, z));
}

ad::Var denoise_one_step(const ad::Var& x_t, const ad::Var& v_pred, const std::vector<double>& t) {
    require_same_shape(x_t.value(), v_pred.value(), "denoise_one_step");
    check_levels(t, x_t.dim(0), "denoise_one_step");
    return ad::add(x_t, ad::scale_samples(v_pred, t));
}

NoiseLevel sample_noise_level(Rng& rng, double uniform_mix_prob) {
    if (!(uniform_mix_prob >= 0.0 && uniform_mix_prob <= 1.0))
        throw std::invalid_argument("sample_noise_level: uniform_mix_prob outside [0, 1]");
    const double branch = uniform01(rng);
    if (branch < uniform_mix_prob) return {uniform01(rng), true};
    const double n = std::normal_distribution<double>(0.0, 1.0)(rng);
    return {1.0 / (1.0 + std::exp(-n)), false};
}

Stage1ALoss stage1a_loss(const ad::Var& flow, const ad::Var& perc, const ad::Var& commit, const ad::Var& ent,
                         const LossWeights& w) {
    if (w.perc < 0.0 || w.commit < 0.0 || w.ent < 0.0) throw std::invalid_argument("stage1a_loss: negative weight");
    Stage1ALoss out;
    out.values.weights = w;
    out.values.flow = flow.value().item();
    ad::Var total = flow;
    if (perc.defined()) {
        out.values.perc = perc.value().item();
        total = ad::add(total, ad::scale(perc, w.perc));
    }
    if (commit.defined()) {
        out.values.commit = commit.value().item();
        total = ad::add(total, ad::scale(commit, w.commit));
    }
    if (ent.defined()) {
        out.values.ent = ent.value().item();
        total = ad::add(total, ad::scale(ent, w.ent));
    }
    out.total = total;
    out.values.total = total.value().item();
    return out;
}

}  // namespace flowmo::flow
