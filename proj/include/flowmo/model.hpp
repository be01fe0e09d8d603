#pragma once

// Desk-scale MMDiT-style tokenizer: a dual-stream (latent + image) transformer
// encoder producing continuous latent codes and a time-conditioned (AdaLN)
// dual-stream decoder predicting rectified-flow velocities.

#include <functional>
#include <string>
#include <vector>

#include "flowmo/autodiff.hpp"
#include "flowmo/config.hpp"
#include "flowmo/params.hpp"
#include "flowmo/rng.hpp"
#include "flowmo/sampler.hpp"

namespace flowmo::model {

struct Linear {
    ad::Var w;  // [out, in]
    ad::Var b;  // [out] or undefined
    ad::Var operator()(const ad::Var& x) const { return ad::linear(x, w, b); }
};

/// Shared state for parameter creation with muP scaling rules:
/// hidden weights ~ N(0, 1/fan_in) with lr multiplier 1/width_factor, output
/// projections with an extra 1/width_factor on the init scale.
struct InitContext {
    ParameterStore& store;
    Rng& rng;
    double width_factor = 1.0;
};

Linear make_linear(InitContext& ctx, const std::string& name, std::size_t in, std::size_t out, ParamKind kind,
                   bool bias = true);
ad::Var make_embedding(InitContext& ctx, const std::string& name, Shape shape, double stddev);

/// [B, C, H, W] -> [B, (H/p)(W/p), p*p*C]; patches in raster order, pixels
/// within a patch row-major with channels innermost.
ad::Var patchify(const ad::Var& x, std::size_t patch);
ad::Var unpatchify(const ad::Var& seq, std::size_t patch, std::size_t channels, std::size_t height, std::size_t width);

/// Sinusoidal embedding of 1000 t; returns [t.size(), dim] with cos then sin halves.
Tensor timestep_embedding(const std::vector<double>& t, std::size_t dim);

/// Zeroes the whole [S, D] code of each sample with probability `prob`.
ad::Var apply_latent_dropout(const ad::Var& c, double prob, Rng& rng, std::vector<bool>* dropped = nullptr);

/// Rescales every row of every MLP weight matrix to unit L2 norm; rows with
/// norm below 1e-8 are left alone. Parameters for which `skip` returns true
/// are not touched.
void renormalize_weights(ParameterStore& store, const std::function<bool(const Param&)>& skip = {});

/// Per-stream weights of one dual-stream block. A "pre-only" stream only
/// contributes keys and values (its outputs would be unused).
struct StreamWeights {
    bool pre_only = false;
    Linear q, k, v, proj, fc1, fc2;
    Linear modulation;  // decoder only: silu(temb) -> shift/scale/gate
};

struct DualStreamBlock {
    StreamWeights image;
    StreamWeights latent;
};

/// Result of a block: updated image and latent streams (undefined if pre-only).
struct StreamPair {
    ad::Var image;
    ad::Var latent;
};

class Tokenizer {
public:
    /// Builds and initialises all parameters from `rng`.
    Tokenizer(const ModelConfig& config, Rng& rng);

    const ModelConfig& config() const noexcept { return config_; }
    ParameterStore& params() noexcept { return store_; }
    const ParameterStore& params() const noexcept { return store_; }

    /// x [B, C, H, W] in [-1, 1] -> continuous latent c_hat [B, S, D].
    ad::Var encode(const ad::Var& x) const;
    /// LFQ binarization or FSQ rounding, both straight-through.
    ad::Var quantize(const ad::Var& c_hat) const;
    /// Velocity d(x_t, c, t) with one t per sample; c = 0 is the unconditional path.
    ad::Var decode(const ad::Var& x_t, const ad::Var& c, const std::vector<double>& t) const;

    sampling::VelocityField velocity_field() const;

    static bool is_encoder_param(const std::string& name) { return name.rfind("encoder.", 0) == 0; }

private:
    StreamPair run_block(const DualStreamBlock& block, const ad::Var& image, const ad::Var& latent,
                         const ad::Var& temb) const;
    void check_image(const ad::Var& x, const char* what) const;

    ModelConfig config_;
    ParameterStore store_;

    // encoder
    Linear enc_patch_in_;
    ad::Var enc_image_pos_, enc_latent_pos_;
    std::vector<DualStreamBlock> enc_blocks_;
    Linear enc_out_;

    // decoder
    Linear dec_patch_in_, dec_latent_in_;
    ad::Var dec_image_pos_, dec_latent_pos_;
    Linear time_in_, time_hidden_;
    std::vector<DualStreamBlock> dec_blocks_;
    Linear dec_final_mod_, dec_out_;
};

constexpr std::size_t kTimeEmbeddingDim = 64;

}  // namespace flowmo::model
