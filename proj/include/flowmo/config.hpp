#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace flowmo {

enum class QuantizerKind { LFQ, FSQ };

struct ModelConfig {
    std::size_t image_resolution = 32;
    std::size_t channels = 3;
    std::size_t patch_size = 4;
    std::size_t width = 128;  // base (muP) width; hidden size is width * width_factor
    std::size_t width_factor = 1;
    std::size_t encoder_depth = 2;
    std::size_t decoder_depth = 4;
    std::size_t num_heads = 4;
    std::size_t mlp_ratio = 4;
    std::size_t latent_seq_len = 16;    // S
    std::size_t token_bits = 8;         // D
    std::size_t entropy_group_bits = 4;  // g
    QuantizerKind quantizer_kind = QuantizerKind::LFQ;
    std::size_t fsq_levels = 3;
    double latent_dropout_prob = 0.1;

    std::size_t hidden_size() const { return width * width_factor; }
    std::size_t image_tokens() const { return (image_resolution / patch_size) * (image_resolution / patch_size); }
    std::size_t patch_dim() const { return patch_size * patch_size * channels; }
    std::size_t groups_per_token() const { return token_bits / entropy_group_bits; }
};

struct TrainConfig {
    double learning_rate = 5e-4;
    std::size_t batch_size = 8;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.95;
    double ema_rate = 0.99;
    std::size_t encoder_freeze_step = 5000;
    double lambda_perc = 0.1;
    double lambda_commit = 0.000625;
    double lambda_ent = 0.0025;
    double lambda_sample = 0.01;
    double uniform_mix_prob = 0.1;
    std::size_t stage1b_num_steps = 8;
    std::size_t max_steps = 10000;
    std::size_t stage1b_max_steps = 1000;
    std::size_t eval_interval = 250;
    std::size_t eval_sampler_steps = 8;
    std::size_t grad_accumulation = 1;
    std::uint64_t perceptual_seed_stage1a = 1;
    std::uint64_t perceptual_seed_stage1b = 2;
};

struct SamplerConfig {
    std::size_t num_steps = 25;
    double rho = 4.0;
    double guidance_weight = 1.5;
    double guidance_lo = 0.145;
    double guidance_hi = 0.505;
    double noise_scale = 1.0;
};

struct Stage2Config {
    std::size_t width = 128;
    std::size_t depth = 4;
    std::size_t num_heads = 4;
    std::size_t mlp_ratio = 4;
    double learning_rate = 3e-4;
    std::size_t batch_size = 16;
    std::size_t max_steps = 2000;
    std::size_t sample_steps = 64;
    double temperature = 1.0;
    double guidance_weight = 1.5;
    double class_dropout_prob = 0.1;
};

struct ConfigBundle {
    ModelConfig model;
    TrainConfig train;
    SamplerConfig sampler;
    Stage2Config stage2;
};

/// A bundle whose invariants have been checked, plus content fingerprints.
struct ValidatedConfig {
    ConfigBundle bundle;
    std::uint64_t fingerprint = 0;        // all fields
    std::uint64_t model_fingerprint = 0;  // architecture fields only; keys checkpoints
};

/// Thrown with every violated invariant, one per line, each naming its field.
class ConfigError : public std::invalid_argument {
public:
    explicit ConfigError(std::vector<std::string> problems);
    const std::vector<std::string>& problems() const noexcept { return problems_; }

private:
    std::vector<std::string> problems_;
};

/// Bits per pixel of a tokenizer with `latent_seq_len` tokens from a
/// vocabulary of `vocab_size` (a power of two) at `resolution`^2 pixels.
double compute_bpp(std::uint64_t latent_seq_len, std::uint64_t vocab_size, std::uint64_t resolution);

ValidatedConfig validate_config(const ConfigBundle& bundle);

/// Parses the flat `section.field = value` format. Unknown keys are errors.
ConfigBundle parse_config_text(const std::string& text);
ConfigBundle load_config_file(const std::filesystem::path& path);
/// Applies one `section.field=value` override in place.
void apply_override(ConfigBundle& bundle, const std::string& assignment);
/// Canonical text form (sorted keys, round-trippable numbers).
std::string to_config_text(const ConfigBundle& bundle);
std::string model_config_text(const ModelConfig& model);
std::vector<std::string> config_keys();

std::uint64_t fnv1a64(const void* data, std::size_t size, std::uint64_t seed = 0xcbf29ce484222325ULL);

/// Desk-scale defaults (32x32, patch 4, width 128, depths 2/4, S=16, D=8, g=4).
ConfigBundle default_config();
/// Smallest practical config for fast tests and acceptance runs.
ConfigBundle tiny_config();

}  // namespace flowmo
