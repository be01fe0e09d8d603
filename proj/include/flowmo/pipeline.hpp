#pragma once

// End-to-end tokenizer use: images -> discrete code -> reconstructions.

#include <cstdint>

#include "flowmo/config.hpp"
#include "flowmo/model.hpp"
#include "flowmo/quantizer.hpp"
#include "flowmo/sampler.hpp"

namespace flowmo::pipeline {

sampling::GuidanceSpec guidance_from(const SamplerConfig& sampler);

/// Quantized code [B, S, D] of images [B, C, H, W], computed without a graph.
Tensor quantized_code(const model::Tokenizer& tokenizer, const Tensor& images);

/// LFQ token ids of images. Throws for FSQ tokenizers.
quant::TokenIds encode_tokens(const model::Tokenizer& tokenizer, const Tensor& images);

/// Initial noise for `count` images. Image i always gets the stream
/// derive_rng(seed, i), so results do not depend on batch composition.
Tensor initial_noise(const ModelConfig& config, std::size_t count, std::uint64_t seed, std::size_t first_index = 0);

/// Integrates the decoder from scaled noise to images for a given code.
Tensor decode_code(const model::Tokenizer& tokenizer, const Tensor& code, const SamplerConfig& sampler,
                   std::uint64_t noise_seed);

Tensor reconstruct(const model::Tokenizer& tokenizer, const Tensor& images, const SamplerConfig& sampler,
                   std::uint64_t noise_seed);

}  // namespace flowmo::pipeline
