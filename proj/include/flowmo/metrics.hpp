#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "flowmo/autodiff.hpp"

namespace flowmo::metrics {

/// Fixed random convolutional feature pyramid used as a perceptual
/// pseudo-metric and as the feature extractor for toy-FID. Each level is a
/// 3x3 conv + tanh; levels after the first start with 2x2 average pooling.
class PerceptualExtractor {
public:
    explicit PerceptualExtractor(std::uint64_t seed, std::size_t in_channels = 3,
                                 std::vector<std::size_t> level_widths = {8, 16, 32});

    /// Activations per level for x [B, C, H, W].
    std::vector<ad::Var> features(const ad::Var& x) const;

    /// Sum over levels of the mean squared difference of channel-normalised
    /// features. Differentiable in both arguments.
    ad::Var distance(const ad::Var& x, const ad::Var& y) const;
    std::vector<double> distance_per_image(const Tensor& x, const Tensor& y) const;

    /// Global-average-pooled activations of every level, [B, sum(widths)].
    Tensor pooled_features(const Tensor& x) const;

    std::uint64_t seed() const noexcept { return seed_; }
    std::uint64_t fingerprint() const noexcept { return fingerprint_; }
    std::size_t feature_dim() const;

private:
    std::uint64_t seed_;
    std::uint64_t fingerprint_ = 0;
    std::vector<std::size_t> widths_;
    std::vector<ad::Var> weights_, biases_;
};

constexpr double kInfinitePsnr = std::numeric_limits<double>::infinity();

/// 10 log10(1 / MSE) on [0, 1]-rescaled inputs; +inf when identical.
double psnr(const Tensor& x, const Tensor& y);

/// Mean SSIM with an 11x11 Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03,
/// dynamic range 1 on [0, 1]-rescaled inputs. x and y are [C, H, W] or
/// [B, C, H, W]; channels and images are averaged.
double ssim(const Tensor& x, const Tensor& y);

struct FeatureStats {
    std::vector<double> mean;
    std::vector<double> cov;  // row-major d x d, unbiased
    std::size_t count = 0;

    std::size_t dim() const noexcept { return mean.size(); }
};

/// Rows of `features` [N, d] are samples; N >= 2.
FeatureStats compute_stats(const Tensor& features);
/// Exact combination of two disjoint shards.
FeatureStats merge_stats(const FeatureStats& a, const FeatureStats& b);

/// ||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2}).
double frechet_distance(const FeatureStats& a, const FeatureStats& b);

struct PrecisionRecall {
    double precision = 0.0;
    double recall = 0.0;
};

/// k-NN manifold precision/recall; both sets need at least k + 1 points.
PrecisionRecall precision_recall(const Tensor& real, const Tensor& fake, std::size_t k = 3);

struct ImageMetrics {
    double psnr = 0.0;
    double ssim = 0.0;
    double perceptual = 0.0;
};

struct MetricReport {
    std::vector<ImageMetrics> per_image;
    ImageMetrics mean;
    double toy_fid = 0.0;
    std::uint64_t extractor_fingerprint = 0;

    double median_psnr() const;
    double median_perceptual() const;
};

/// Per-image PSNR/SSIM/perceptual plus toy-FID between two image batches.
MetricReport evaluate_reconstructions(const Tensor& originals, const Tensor& reconstructions,
                                      const PerceptualExtractor& extractor);

/// One row per image, then an aggregate row. PSNR +inf is written as "inf".
void write_metric_report_csv(const MetricReport& report, const std::filesystem::path& path);

std::uint64_t tensor_hash(const Tensor& t);
void save_stats(const FeatureStats& stats, std::uint64_t extractor_fingerprint, std::uint64_t dataset_hash,
                const std::filesystem::path& path);
/// nullopt when the file is missing or keyed to another extractor/dataset.
std::optional<FeatureStats> load_stats(const std::filesystem::path& path, std::uint64_t extractor_fingerprint,
                                       std::uint64_t dataset_hash);

}  // namespace flowmo::metrics
