#include "flowmo/metrics.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include "flowmo/config.hpp"
#include "flowmo/rng.hpp"

namespace flowmo::metrics {

// ------------------------------------------------------------- perceptual

PerceptualExtractor::PerceptualExtractor(std::uint64_t seed, std::size_t in_channels,
                                         std::vector<std::size_t> level_widths)
    : seed_(seed), widths_(std::move(level_widths)) {
    Rng rng = derive_rng(seed, 0x70657263);  // "perc"
    std::size_t cin = in_channels;
    fingerprint_ = fnv1a64(&seed, sizeof seed);
    for (std::size_t w : widths_) {
        const double stddev = std::sqrt(2.0 / (9.0 * static_cast<double>(cin)));
        weights_.push_back(ad::constant(normal_tensor(Shape{w, cin, 3, 3}, rng, stddev)));
        biases_.push_back(ad::constant(normal_tensor(Shape{w}, rng, 0.1)));
        fingerprint_ = fnv1a64(weights_.back().value().data(), weights_.back().numel() * sizeof(double), fingerprint_);
        cin = w;
    }
}

std::size_t PerceptualExtractor::feature_dim() const {
    std::size_t d = 0;
    for (auto w : widths_) d += w;
    return d;
}

std::vector<ad::Var> PerceptualExtractor::features(const ad::Var& x) const {
    if (x.shape().size() != 4 || x.dim(1) != weights_.front().dim(1))
        throw std::invalid_argument("perceptual features: expected [B, C, H, W] input, got " + shape_to_string(x.shape()));
    std::vector<ad::Var> out;
    ad::Var h = x;
    for (std::size_t l = 0; l < weights_.size(); ++l) {
        if (l > 0) h = ad::avg_pool2(h);
        h = ad::tanh(ad::conv3x3(h, weights_[l], biases_[l]));
        out.push_back(h);
    }
    return out;
}

ad::Var PerceptualExtractor::distance(const ad::Var& x, const ad::Var& y) const {
    require_same_shape(x.value(), y.value(), "perceptual_distance");
    const auto fx = features(x);
    const auto fy = features(y);
    ad::Var total;
    for (std::size_t l = 0; l < fx.size(); ++l) {
        ad::Var term = ad::mse(ad::channel_normalize(fx[l]), ad::channel_normalize(fy[l]));
        total = total.defined() ? ad::add(total, term) : term;
    }
    return total;
}

std::vector<double> PerceptualExtractor::distance_per_image(const Tensor& x, const Tensor& y) const {
    require_same_shape(x, y, "perceptual_distance");
    ad::NoGradGuard guard;
    const std::size_t B = x.dim(0), per = x.numel() / B;
    std::vector<double> out(B);
    Shape one = x.shape();
    one[0] = 1;
    for (std::size_t b = 0; b < B; ++b) {
        Tensor xb(one, std::vector<double>(x.data() + b * per, x.data() + (b + 1) * per));
        Tensor yb(one, std::vector<double>(y.data() + b * per, y.data() + (b + 1) * per));
        out[b] = distance(ad::constant(std::move(xb)), ad::constant(std::move(yb))).value().item();
    }
    return out;
}

Tensor PerceptualExtractor::pooled_features(const Tensor& x) const {
    ad::NoGradGuard guard;
    const auto levels = features(ad::constant(x));
    const std::size_t B = x.dim(0), D = feature_dim();
    Tensor out(Shape{B, D});
    std::size_t offset = 0;
    for (const auto& f : levels) {
        const std::size_t C = f.dim(1), P = f.dim(2) * f.dim(3);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t c = 0; c < C; ++c) {
                double s = 0.0;
                for (std::size_t p = 0; p < P; ++p) s += f.value()[(b * C + c) * P + p];
                out[b * D + offset + c] = s / static_cast<double>(P);
            }
        offset += C;
    }
    return out;
}

// ------------------------------------------------------------ PSNR / SSIM

double psnr(const Tensor& x, const Tensor& y) {
    require_same_shape(x, y, "psnr");
    if (x.empty()) throw std::invalid_argument("psnr: empty input");
    double s = 0.0;
    for (std::size_t i = 0; i < x.numel(); ++i) {
        const double d = 0.5 * (x[i] - y[i]);  // difference on the [0, 1] scale
        s += d * d;
    }
    const double mse = s / static_cast<double>(x.numel());
    if (mse == 0.0) return kInfinitePsnr;
    return 10.0 * std::log10(1.0 / mse);
}

namespace {

constexpr std::size_t kSsimWindow = 11;

std::vector<double> gaussian_window() {
    std::vector<double> g(kSsimWindow);
    double s = 0.0;
    for (std::size_t i = 0; i < kSsimWindow; ++i) {
        const double d = static_cast<double>(i) - 5.0;
        g[i] = std::exp(-d * d / (2.0 * 1.5 * 1.5));
        s += g[i];
    }
    for (auto& v : g) v /= s;
    return g;
}

double ssim_plane(const double* a, const double* b, std::size_t H, std::size_t W, const std::vector<double>& g) {
    constexpr double C1 = 0.01 * 0.01, C2 = 0.03 * 0.03;
    const std::size_t oh = H - kSsimWindow + 1, ow = W - kSsimWindow + 1;
    double total = 0.0;
    for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t x = 0; x < ow; ++x) {
            double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
            for (std::size_t i = 0; i < kSsimWindow; ++i)
                for (std::size_t j = 0; j < kSsimWindow; ++j) {
                    const double w = g[i] * g[j];
                    const double u = 0.5 * (a[(y + i) * W + x + j] + 1.0);
                    const double v = 0.5 * (b[(y + i) * W + x + j] + 1.0);
                    mx += w * u;
                    my += w * v;
                    sxx += w * u * u;
                    syy += w * v * v;
                    sxy += w * u * v;
                }
            const double vx = sxx - mx * mx, vy = syy - my * my, cxy = sxy - mx * my;
            total += ((2 * mx * my + C1) * (2 * cxy + C2)) / ((mx * mx + my * my + C1) * (vx + vy + C2));
        }
    return total / static_cast<double>(oh * ow);
}

}  // namespace

double ssim(const Tensor& x, const Tensor& y) {
    require_same_shape(x, y, "ssim");
    if (x.rank() != 3 && x.rank() != 4) throw std::invalid_argument("ssim: expected [C, H, W] or [B, C, H, W]");
    const std::size_t H = x.dim(x.rank() - 2), W = x.dim(x.rank() - 1);
    if (H < kSsimWindow || W < kSsimWindow)
        throw std::invalid_argument("ssim: image " + std::to_string(H) + "x" + std::to_string(W) +
                                    " is smaller than the 11x11 window");
    const auto g = gaussian_window();
    const std::size_t planes = x.numel() / (H * W);
    double s = 0.0;
    for (std::size_t p = 0; p < planes; ++p) s += ssim_plane(x.data() + p * H * W, y.data() + p * H * W, H, W, g);
    return s / static_cast<double>(planes);
}

// ------------------------------------------------------------ Fréchet

FeatureStats compute_stats(const Tensor& features) {
    if (features.rank() != 2 || features.dim(0) < 2) throw std::invalid_argument("compute_stats: need [N >= 2, d]");
    const std::size_t N = features.dim(0), d = features.dim(1);
    FeatureStats s;
    s.count = N;
    s.mean.assign(d, 0.0);
    s.cov.assign(d * d, 0.0);
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = 0; i < d; ++i) s.mean[i] += features[n * d + i];
    for (auto& m : s.mean) m /= static_cast<double>(N);
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = 0; i < d; ++i) {
            const double di = features[n * d + i] - s.mean[i];
            for (std::size_t j = 0; j < d; ++j) s.cov[i * d + j] += di * (features[n * d + j] - s.mean[j]);
        }
    for (auto& c : s.cov) c /= static_cast<double>(N - 1);
    return s;
}

FeatureStats merge_stats(const FeatureStats& a, const FeatureStats& b) {
    if (a.dim() != b.dim()) throw std::invalid_argument("merge_stats: dimension mismatch");
    const std::size_t d = a.dim();
    const double na = static_cast<double>(a.count), nb = static_cast<double>(b.count), n = na + nb;
    FeatureStats out;
    out.count = a.count + b.count;
    out.mean.resize(d);
    out.cov.resize(d * d);
    std::vector<double> delta(d);
    for (std::size_t i = 0; i < d; ++i) {
        delta[i] = b.mean[i] - a.mean[i];
        out.mean[i] = a.mean[i] + delta[i] * nb / n;
    }
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < d; ++j) {
            const double m2 = a.cov[i * d + j] * (na - 1) + b.cov[i * d + j] * (nb - 1) + delta[i] * delta[j] * na * nb / n;
            out.cov[i * d + j] = m2 / (n - 1);
        }
    return out;
}

double frechet_distance(const FeatureStats& a, const FeatureStats& b) {
    if (a.dim() != b.dim() || a.dim() == 0) throw std::invalid_argument("frechet_distance: dimension mismatch");
    const auto d = static_cast<Eigen::Index>(a.dim());
    using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    const Mat sa = Eigen::Map<const Mat>(a.cov.data(), d, d);
    const Mat sb = Eigen::Map<const Mat>(b.cov.data(), d, d);
    constexpr double kPsdTolerance = -1e-8;

    Eigen::SelfAdjointEigenSolver<Mat> ea(0.5 * (sa + sa.transpose()));
    Eigen::SelfAdjointEigenSolver<Mat> eb(0.5 * (sb + sb.transpose()));
    if (ea.eigenvalues().minCoeff() < kPsdTolerance || eb.eigenvalues().minCoeff() < kPsdTolerance)
        throw std::invalid_argument("frechet_distance: covariance is not positive semi-definite");

    const Eigen::VectorXd root_a = ea.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    const Mat sqrt_a = ea.eigenvectors() * root_a.asDiagonal() * ea.eigenvectors().transpose();
    const Mat inner = sqrt_a * sb * sqrt_a;
    Eigen::SelfAdjointEigenSolver<Mat> ei(0.5 * (inner + inner.transpose()), Eigen::EigenvaluesOnly);
    const double tr_sqrt = ei.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();

    double mean_term = 0.0;
    for (std::size_t i = 0; i < a.dim(); ++i) mean_term += (a.mean[i] - b.mean[i]) * (a.mean[i] - b.mean[i]);
    const double value = mean_term + sa.trace() + sb.trace() - 2.0 * tr_sqrt;
    return std::max(value, 0.0);
}

// ---------------------------------------------------- precision / recall

namespace {

double sq_dist(const Tensor& a, std::size_t i, const Tensor& b, std::size_t j, std::size_t d) {
    double s = 0.0;
    for (std::size_t k = 0; k < d; ++k) {
        const double t = a[i * d + k] - b[j * d + k];
        s += t * t;
    }
    return s;
}

std::vector<double> knn_radii(const Tensor& x, std::size_t k) {
    const std::size_t N = x.dim(0), d = x.dim(1);
    std::vector<double> radii(N), dists;
    for (std::size_t i = 0; i < N; ++i) {
        dists.clear();
        for (std::size_t j = 0; j < N; ++j)
            if (j != i) dists.push_back(sq_dist(x, i, x, j, d));
        std::nth_element(dists.begin(), dists.begin() + static_cast<std::ptrdiff_t>(k - 1), dists.end());
        radii[i] = dists[k - 1];
    }
    return radii;
}

double coverage(const Tensor& manifold, const std::vector<double>& radii, const Tensor& probes) {
    const std::size_t d = manifold.dim(1);
    std::size_t inside = 0;
    for (std::size_t p = 0; p < probes.dim(0); ++p) {
        for (std::size_t m = 0; m < manifold.dim(0); ++m) {
            if (sq_dist(probes, p, manifold, m, d) <= radii[m]) {
                ++inside;
                break;
            }
        }
    }
    return static_cast<double>(inside) / static_cast<double>(probes.dim(0));
}

}  // namespace

PrecisionRecall precision_recall(const Tensor& real, const Tensor& fake, std::size_t k) {
    if (real.rank() != 2 || fake.rank() != 2 || real.dim(1) != fake.dim(1))
        throw std::invalid_argument("precision_recall: expected [N, d] point sets of equal dimension");
    if (k < 1 || real.dim(0) < k + 1 || fake.dim(0) < k + 1)
        throw std::invalid_argument("precision_recall: each set needs at least k + 1 points");
    return {coverage(real, knn_radii(real, k), fake), coverage(fake, knn_radii(fake, k), real)};
}

// ---------------------------------------------------------------- reports

namespace {

double median(std::vector<double> v) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

Tensor slice_batch(const Tensor& t, std::size_t b) {
    const std::size_t per = t.numel() / t.dim(0);
    Shape s(t.shape().begin() + 1, t.shape().end());
    return Tensor(s, std::vector<double>(t.data() + b * per, t.data() + (b + 1) * per));
}

std::string fmt(double v) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

}  // namespace

double MetricReport::median_psnr() const {
    std::vector<double> v;
    for (const auto& m : per_image) v.push_back(m.psnr);
    return median(v);
}

double MetricReport::median_perceptual() const {
    std::vector<double> v;
    for (const auto& m : per_image) v.push_back(m.perceptual);
    return median(v);
}

MetricReport evaluate_reconstructions(const Tensor& originals, const Tensor& reconstructions,
                                      const PerceptualExtractor& extractor) {
    require_same_shape(originals, reconstructions, "evaluate_reconstructions");
    if (originals.rank() != 4) throw std::invalid_argument("evaluate_reconstructions: expected [N, C, H, W]");
    const std::size_t N = originals.dim(0);
    MetricReport report;
    report.extractor_fingerprint = extractor.fingerprint();
    const auto perc = extractor.distance_per_image(originals, reconstructions);
    const bool can_ssim = originals.dim(2) >= kSsimWindow && originals.dim(3) >= kSsimWindow;
    for (std::size_t b = 0; b < N; ++b) {
        const Tensor x = slice_batch(originals, b), y = slice_batch(reconstructions, b);
        ImageMetrics m{psnr(x, y), can_ssim ? ssim(x, y) : std::nan(""), perc[b]};
        report.per_image.push_back(m);
        report.mean.psnr += m.psnr / static_cast<double>(N);
        report.mean.ssim += m.ssim / static_cast<double>(N);
        report.mean.perceptual += m.perceptual / static_cast<double>(N);
    }
    if (N >= 2) {
        report.toy_fid = frechet_distance(compute_stats(extractor.pooled_features(originals)),
                                          compute_stats(extractor.pooled_features(reconstructions)));
    }
    return report;
}

void write_metric_report_csv(const MetricReport& report, const std::filesystem::path& path) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write metric report " + path.string());
    os << "image,psnr,ssim,perceptual,toy_fid\n";
    for (std::size_t i = 0; i < report.per_image.size(); ++i) {
        const auto& m = report.per_image[i];
        os << i << ',' << fmt(m.psnr) << ',' << fmt(m.ssim) << ',' << fmt(m.perceptual) << ",\n";
    }
    os << "mean," << fmt(report.mean.psnr) << ',' << fmt(report.mean.ssim) << ',' << fmt(report.mean.perceptual) << ','
       << fmt(report.toy_fid) << '\n';
    os << "# extractor_fingerprint=" << std::hex << report.extractor_fingerprint << std::dec
       << " images=" << report.per_image.size() << '\n';
}

std::uint64_t tensor_hash(const Tensor& t) {
    std::uint64_t h = fnv1a64(t.shape().data(), t.shape().size() * sizeof(std::size_t));
    return fnv1a64(t.data(), t.numel() * sizeof(double), h);
}

void save_stats(const FeatureStats& stats, std::uint64_t extractor_fingerprint, std::uint64_t dataset_hash,
                const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write stats " + path.string());
    const std::uint64_t header[4] = {extractor_fingerprint, dataset_hash, stats.dim(), stats.count};
    os.write("FMFS", 4);
    os.write(reinterpret_cast<const char*>(header), sizeof header);
    os.write(reinterpret_cast<const char*>(stats.mean.data()), static_cast<std::streamsize>(stats.mean.size() * 8));
    os.write(reinterpret_cast<const char*>(stats.cov.data()), static_cast<std::streamsize>(stats.cov.size() * 8));
}

std::optional<FeatureStats> load_stats(const std::filesystem::path& path, std::uint64_t extractor_fingerprint,
                                       std::uint64_t dataset_hash) {
    std::ifstream is(path, std::ios::binary);
    if (!is) return std::nullopt;
    char magic[4];
    std::uint64_t header[4];
    is.read(magic, 4);
    is.read(reinterpret_cast<char*>(header), sizeof header);
    if (!is || std::string(magic, 4) != "FMFS") return std::nullopt;
    if (header[0] != extractor_fingerprint || header[1] != dataset_hash) return std::nullopt;
    FeatureStats s;
    s.count = header[3];
    s.mean.resize(header[2]);
    s.cov.resize(header[2] * header[2]);
    is.read(reinterpret_cast<char*>(s.mean.data()), static_cast<std::streamsize>(s.mean.size() * 8));
    is.read(reinterpret_cast<char*>(s.cov.data()), static_cast<std::streamsize>(s.cov.size() * 8));
    if (!is) return std::nullopt;
    return s;
}

}  // namespace flowmo::metrics
