#pragma once

// Lookup-free binary quantization (LFQ), its entropy and commitment losses,
// the FSQ alternative, and packing of binary codes into factorised token ids.

#include <cstdint>
#include <filesystem>
#include <vector>

#include "flowmo/autodiff.hpp"

namespace flowmo::quant {

/// c = 2 * [c_hat >= 0] - 1 elementwise. Rejects non-finite input.
Tensor binarize_values(const Tensor& c_hat);
/// Binarization with a straight-through (identity) gradient.
ad::Var binarize(const ad::Var& c_hat);

/// mean((c_hat - q(c_hat))^2) with q(c_hat) held constant.
ad::Var commitment_loss(const ad::Var& c_hat);

/// LFQ entropy loss in nats. The last axis (D) is split into D/g groups of
/// g bits; each group is scored against all 2^g sign vectors by inner
/// product, softmaxed, and contributes mean per-sample entropy minus the
/// entropy of the mean distribution. Groups are averaged.
ad::Var entropy_loss(const ad::Var& c_hat, std::size_t group_bits);

/// Forward value of the entropy loss without building a graph.
double entropy_loss_value(const Tensor& c_hat, std::size_t group_bits);

/// round(tanh(x) * (L-1)/2) * 2/(L-1); L must be odd and >= 3.
Tensor fsq_values(const Tensor& c_hat, std::size_t levels);
/// FSQ with a straight-through estimator around the rounding (gradient of tanh).
ad::Var fsq_quantize(const ad::Var& c_hat, std::size_t levels);

struct TokenIds {
    std::size_t batch = 0;
    std::size_t length = 0;  // S * D / g ids per image
    std::size_t group_bits = 0;
    std::vector<std::uint16_t> ids;  // row-major [batch, length]

    std::uint16_t at(std::size_t b, std::size_t i) const { return ids[b * length + i]; }
};

/// Packs a ±1 code [B, S, D] into [B, S*D/g] ids. Bit j of an id is
/// (c_j + 1) / 2 where j = 0 is the first element of the group.
TokenIds pack_tokens(const Tensor& code, std::size_t group_bits);
/// Exact inverse of pack_tokens; returns [B, S, D].
Tensor unpack_tokens(const TokenIds& tokens, std::size_t latent_seq_len, std::size_t token_bits);

struct TokenFileHeader {
    std::uint16_t version = 1;
    std::uint16_t latent_seq_len = 0;
    std::uint16_t token_bits = 0;
    std::uint16_t group_bits = 0;
    std::uint32_t count = 0;
};

/// Little-endian: "FMTK", u16 version, u16 S, u16 D, u16 g, u32 count, then u16 ids.
void write_token_file(const std::filesystem::path& path, const TokenIds& tokens, std::size_t latent_seq_len,
                      std::size_t token_bits);
TokenIds read_token_file(const std::filesystem::path& path, TokenFileHeader* header = nullptr);

}  // namespace flowmo::quant
