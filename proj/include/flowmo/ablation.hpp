#pragma once

// Scripted ablation sweeps: each variant changes one axis relative to the
// default configuration and is scored by toy-FID, PSNR and perceptual
// distance on an evaluation set.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "flowmo/config.hpp"
#include "flowmo/data.hpp"

namespace flowmo::ablation {

enum class Axis {
    Default,
    LinearSchedule,   // rho = 1 at inference
    NoGuidance,       // w = 1 at inference
    Fsq,              // FSQ quantizer instead of LFQ (retrained)
    NoUniformMix,     // uniform tail of the noise-level distribution disabled (retrained)
    ChainPostTrain,   // Stage 1B with the chain sample loss
    OneStepPostTrain  // Stage 1B with a one-step perceptual loss
};

std::string axis_name(Axis axis);
Axis parse_axis(const std::string& name);

struct Row {
    Axis axis = Axis::Default;
    std::uint64_t seed = 0;
    double toy_fid = 0.0;
    double psnr = 0.0;        // median over images
    double perceptual = 0.0;  // median over images
};

struct Options {
    std::vector<std::uint64_t> seeds{1, 2, 3};
    std::vector<Axis> axes{Axis::Default, Axis::LinearSchedule, Axis::NoGuidance, Axis::Fsq, Axis::NoUniformMix};
    std::uint64_t eval_noise_seed = 99;
    std::function<void(const std::string&)> log;
};

/// Trains the variants that need training (once per seed and training
/// configuration) and scores all of them on `eval`.
std::vector<Row> run(const ValidatedConfig& base, const data::Dataset& train, const data::Dataset& validation,
                     const data::Dataset& eval, const Options& options);

/// One row per (axis, seed) plus per-axis means, and a column counting the
/// seeds in which the variant did not beat the default on toy-FID.
void write_table_csv(const std::vector<Row>& rows, const std::filesystem::path& path);
std::string format_table(const std::vector<Row>& rows);

/// Number of seeds in which `axis` has toy-FID >= the default's.
std::size_t seeds_not_beating_default(const std::vector<Row>& rows, Axis axis);

}  // namespace flowmo::ablation
