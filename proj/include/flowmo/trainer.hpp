#pragma once

// Stage 1A (end-to-end flow matching) and Stage 1B (decoder post-training
// through the sampling chain) loops.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <vector>

#include "flowmo/checkpoint.hpp"
#include "flowmo/config.hpp"
#include "flowmo/data.hpp"
#include "flowmo/model.hpp"

namespace flowmo::train {

struct StepRecord {
    std::size_t step = 0;  // 1-based
    double flow = 0.0;
    double perc = 0.0;
    double commit = 0.0;
    double ent = 0.0;
    double sample = 0.0;
    double total = 0.0;
};

struct EvalSnapshot {
    std::size_t step = 0;
    double psnr = 0.0;        // mean over the evaluation set
    double perceptual = 0.0;  // mean, stage-1A extractor
};

struct TrainReport {
    std::vector<StepRecord> steps;
    std::vector<EvalSnapshot> evals;
    bool early_stopped = false;
    std::size_t best_step = 0;  // step of the returned checkpoint

    void write_csv(const std::filesystem::path& path) const;
};

class DivergenceError : public std::runtime_error {
public:
    DivergenceError(std::size_t step, double loss, double average);
    std::size_t step() const noexcept { return step_; }

private:
    std::size_t step_;
};

/// How the Stage 1B sample loss is formed. FlowOnly keeps every random draw
/// of Chain but never adds the sample term.
enum class Stage1BMode { Chain, OneStep, FlowOnly };

struct TrainOptions {
    std::uint64_t seed = 0;
    /// Evaluation set for snapshots and (Stage 1B) early stopping. When
    /// absent, no snapshots are taken.
    const data::Dataset* validation = nullptr;
    std::uint64_t eval_noise_seed = 1234;
    Stage1BMode stage1b_mode = Stage1BMode::Chain;
    /// Called after every optimizer step.
    std::function<void(const StepRecord&)> on_step;
};

struct TrainResult {
    ckpt::CheckpointState checkpoint;
    TrainReport report;
};

TrainResult train_stage1a(const ValidatedConfig& config, const data::Dataset& train, const TrainOptions& options);

/// `init` must be a Stage 1A checkpoint (fresh post-training) or a Stage 1B
/// checkpoint (resume) written for the same model architecture.
TrainResult train_stage1b(const ValidatedConfig& config, const ckpt::CheckpointState& init, const data::Dataset& train,
                          const TrainOptions& options);

/// Builds a tokenizer and loads raw or EMA parameters from `state`.
model::Tokenizer load_tokenizer(const ModelConfig& config, const ckpt::CheckpointState& state, bool use_ema = true);

/// Mean PSNR / perceptual distance of reconstructions of `images`.
EvalSnapshot evaluate(const model::Tokenizer& tokenizer, const TrainConfig& train, const Tensor& images,
                      std::uint64_t noise_seed, std::size_t step = 0);

/// Trailing `window`-step moving average used by the divergence guard.
class MovingAverage {
public:
    explicit MovingAverage(std::size_t window) : window_(window) {}
    void push(double v);
    double value() const;
    bool full() const noexcept { return values_.size() == window_; }

private:
    std::size_t window_;
    std::vector<double> values_;
    std::size_t head_ = 0;
    double sum_ = 0.0;
};

}  // namespace flowmo::train
