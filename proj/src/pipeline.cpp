#include "flowmo/pipeline.hpp"

#include <stdexcept>

namespace flowmo::pipeline {

sampling::GuidanceSpec guidance_from(const SamplerConfig& sampler) {
    return {sampler.guidance_weight, sampler.guidance_lo, sampler.guidance_hi};
}

Tensor quantized_code(const model::Tokenizer& tokenizer, const Tensor& images) {
    ad::NoGradGuard guard;
    return tokenizer.quantize(tokenizer.encode(ad::constant(images))).value();
}

quant::TokenIds encode_tokens(const model::Tokenizer& tokenizer, const Tensor& images) {
    if (tokenizer.config().quantizer_kind != QuantizerKind::LFQ)
        throw std::invalid_argument("encode_tokens: token ids exist only for LFQ tokenizers");
    return quant::pack_tokens(quantized_code(tokenizer, images), tokenizer.config().entropy_group_bits);
}

Tensor initial_noise(const ModelConfig& config, std::size_t count, std::uint64_t seed, std::size_t first_index) {
    const std::size_t R = config.image_resolution, per = config.channels * R * R;
    Tensor z(Shape{count, config.channels, R, R});
    for (std::size_t i = 0; i < count; ++i) {
        Rng rng = derive_rng(seed, first_index + i);
        const Tensor zi = normal_tensor(Shape{per}, rng);
        std::copy(zi.vec().begin(), zi.vec().end(), z.vec().begin() + static_cast<std::ptrdiff_t>(i * per));
    }
    return z;
}

Tensor decode_code(const model::Tokenizer& tokenizer, const Tensor& code, const SamplerConfig& sampler,
                   std::uint64_t noise_seed) {
    const auto& cfg = tokenizer.config();
    if (code.rank() != 3 || code.dim(1) != cfg.latent_seq_len || code.dim(2) != cfg.token_bits)
        throw std::invalid_argument("decode_code: code shape " + shape_to_string(code.shape()) + " does not match [B, " +
                                    std::to_string(cfg.latent_seq_len) + ", " + std::to_string(cfg.token_bits) + "]");
    ad::NoGradGuard guard;
    const ad::Var z = sampling::scaled_initial_noise(ad::constant(initial_noise(cfg, code.dim(0), noise_seed)),
                                                     sampler.noise_scale);
    const auto schedule = sampling::shifted_schedule(sampler.num_steps, sampler.rho);
    return sampling::integrate(tokenizer.velocity_field(), ad::constant(code), z, schedule, guidance_from(sampler), false)
        .value();
}

Tensor reconstruct(const model::Tokenizer& tokenizer, const Tensor& images, const SamplerConfig& sampler,
                   std::uint64_t noise_seed) {
    return decode_code(tokenizer, quantized_code(tokenizer, images), sampler, noise_seed);
}

}  // namespace flowmo::pipeline
