#pragma once

// Toy masked-token generator over factorised tokenizer ids: a bidirectional
// transformer trained to recover masked ids, sampled by iterative
// confidence-ordered unmasking.

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "flowmo/checkpoint.hpp"
#include "flowmo/config.hpp"
#include "flowmo/data.hpp"
#include "flowmo/model.hpp"
#include "flowmo/quantizer.hpp"

namespace flowmo::stage2 {

struct TokenDataset {
    quant::TokenIds tokens;
    std::vector<int> labels;  // empty for unconditional data
    std::size_t latent_seq_len = 0;
    std::size_t token_bits = 0;

    std::size_t size() const noexcept { return tokens.batch; }
    bool conditional() const noexcept { return !labels.empty(); }
};

/// ids = pack_tokens(binarize(encode(x)), g) for every image, in dataset order.
/// Labels are kept only if every record has one.
TokenDataset tokenize_dataset(const model::Tokenizer& tokenizer, const data::Dataset& images);
/// Same from a tokenizer checkpoint (EMA weights), checked against `config`.
TokenDataset tokenize_dataset(const ValidatedConfig& config, const ckpt::CheckpointState& tokenizer_checkpoint,
                              const data::Dataset& images);

/// Label sidecar: one integer per line.
void write_labels(const std::filesystem::path& path, const std::vector<int>& labels);
std::vector<int> read_labels(const std::filesystem::path& path);

/// cos(pi s / 2) for s in [0, 1].
double mask_fraction(double s);

/// Mean over positions with mask[i] of -log softmax(logits[i])[targets[i]].
/// logits [N, V] or [B, L, V]; N = targets.size().
ad::Var masked_cross_entropy(const ad::Var& logits, const std::vector<std::uint16_t>& targets,
                             const std::vector<bool>& mask);

class MaskGit {
public:
    /// `num_classes` = 0 builds an unconditional model.
    MaskGit(const Stage2Config& config, std::size_t seq_len, std::size_t group_bits, std::size_t num_classes, Rng& rng);

    std::size_t vocab() const noexcept { return vocab_; }
    std::uint16_t mask_id() const noexcept { return static_cast<std::uint16_t>(vocab_); }
    std::size_t seq_len() const noexcept { return seq_len_; }
    std::size_t num_classes() const noexcept { return num_classes_; }
    /// Class index meaning "no class" (the guidance null branch).
    int null_class() const noexcept { return static_cast<int>(num_classes_); }

    ParameterStore& params() noexcept { return store_; }
    const ParameterStore& params() const noexcept { return store_; }

    /// ids [B * L] (MASK allowed), classes [B] or empty -> logits [B, L, V].
    ad::Var logits(const std::vector<std::uint16_t>& ids, std::size_t batch, const std::vector<int>& classes) const;

    /// Architecture fingerprint; keys Stage 2 checkpoints.
    std::uint64_t fingerprint() const;

private:
    Stage2Config config_;
    std::size_t seq_len_, vocab_, num_classes_;
    ParameterStore store_;
    ad::Var token_embed_, class_embed_, pos_embed_;
    struct Block {
        model::Linear q, k, v, proj, fc1, fc2;
    };
    std::vector<Block> blocks_;
    model::Linear head_;
};

struct Stage2StepRecord {
    std::size_t step = 0;
    double loss = 0.0;
};

struct Stage2Result {
    ckpt::CheckpointState checkpoint;
    std::vector<Stage2StepRecord> steps;
};

/// Rejects ids >= 2^g. Class tokens are used when the dataset has labels.
Stage2Result train_maskgit(const Stage2Config& config, const TokenDataset& dataset, std::uint64_t seed,
                           const std::function<void(const Stage2StepRecord&)>& on_step = {});

/// Rebuilds a model from a Stage 2 checkpoint; the class count and geometry
/// are read from the stored tensors and checked against the fingerprint.
MaskGit load_maskgit(const Stage2Config& config, const ckpt::CheckpointState& state);

struct SampleOptions {
    std::size_t steps = 64;
    double temperature = 1.0;  // initial; annealed linearly to 0
    double guidance_weight = 1.0;
    std::optional<int> class_label;
    std::uint64_t seed = 0;
};

/// Guided logits: uncond + w (cond - uncond); w == 1 returns cond.
Tensor guide_logits(const Tensor& cond, const Tensor& uncond, double weight);

/// Starts all-MASK and commits tokens over `steps` rounds; committed tokens
/// are never re-masked. `trace`, if given, receives the ids after each round.
quant::TokenIds sample_maskgit(const MaskGit& model, std::size_t count, const SampleOptions& options,
                               std::vector<std::vector<std::uint16_t>>* trace = nullptr);

}  // namespace flowmo::stage2
