#include "flowmo/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace flowmo::kernels {

namespace {

// Four independent accumulators let the compiler vectorise the reduction
// without -ffast-math.
inline double dot(const double* a, const double* b, std::size_t n) {
    double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    for (; i < n; ++i) s0 += a[i] * b[i];
    return (s0 + s1) + (s2 + s3);
}

inline void axpy(double alpha, const double* x, double* y, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

constexpr std::ptrdiff_t kParallelThreshold = 4096;

}  // namespace

void linear_forward(const double* x, const double* w, const double* b, double* y, LinearDims d) {
    const auto rows = static_cast<std::ptrdiff_t>(d.rows);
    const bool big = static_cast<std::ptrdiff_t>(d.rows * d.in * d.out) > kParallelThreshold;
#pragma omp parallel for schedule(static) if (big)
    for (std::ptrdiff_t i = 0; i < rows; ++i) {
        const double* xi = x + i * d.in;
        double* yi = y + i * d.out;
        for (std::size_t n = 0; n < d.out; ++n) {
            yi[n] = dot(xi, w + n * d.in, d.in) + (b ? b[n] : 0.0);
        }
    }
}

void linear_backward_input(const double* dy, const double* w, double* dx, LinearDims d) {
    const auto rows = static_cast<std::ptrdiff_t>(d.rows);
    const bool big = static_cast<std::ptrdiff_t>(d.rows * d.in * d.out) > kParallelThreshold;
#pragma omp parallel for schedule(static) if (big)
    for (std::ptrdiff_t i = 0; i < rows; ++i) {
        const double* dyi = dy + i * d.out;
        double* dxi = dx + i * d.in;
        for (std::size_t n = 0; n < d.out; ++n) {
            if (dyi[n] != 0.0) axpy(dyi[n], w + n * d.in, dxi, d.in);
        }
    }
}

void linear_backward_weight(const double* dy, const double* x, double* dw, double* db, LinearDims d) {
    const auto outs = static_cast<std::ptrdiff_t>(d.out);
    const bool big = static_cast<std::ptrdiff_t>(d.rows * d.in * d.out) > kParallelThreshold;
#pragma omp parallel for schedule(static) if (big)
    for (std::ptrdiff_t n = 0; n < outs; ++n) {
        double* dwn = dw + n * d.in;
        double bias_acc = 0.0;
        for (std::size_t i = 0; i < d.rows; ++i) {
            const double g = dy[i * d.out + n];
            bias_acc += g;
            if (g != 0.0) axpy(g, x + i * d.in, dwn, d.in);
        }
        if (db) db[n] += bias_acc;
    }
}

void attention_forward(const double* q, const double* k, const double* v, double* out, double* probs,
                       AttentionDims d) {
    const std::size_t hd = d.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    const auto pairs = static_cast<std::ptrdiff_t>(d.batch * d.heads);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t bh = 0; bh < pairs; ++bh) {
        const std::size_t b = static_cast<std::size_t>(bh) / d.heads;
        const std::size_t h = static_cast<std::size_t>(bh) % d.heads;
        const double* qb = q + b * d.q_len * d.width + h * hd;
        const double* kb = k + b * d.kv_len * d.width + h * hd;
        const double* vb = v + b * d.kv_len * d.width + h * hd;
        double* ob = out + b * d.q_len * d.width + h * hd;
        double* pb = probs + static_cast<std::size_t>(bh) * d.q_len * d.kv_len;
        for (std::size_t i = 0; i < d.q_len; ++i) {
            double* p = pb + i * d.kv_len;
            double mx = -INFINITY;
            for (std::size_t j = 0; j < d.kv_len; ++j) {
                p[j] = scale * dot(qb + i * d.width, kb + j * d.width, hd);
                mx = std::max(mx, p[j]);
            }
            double sum = 0.0;
            for (std::size_t j = 0; j < d.kv_len; ++j) {
                p[j] = std::exp(p[j] - mx);
                sum += p[j];
            }
            const double inv = 1.0 / sum;
            double* oi = ob + i * d.width;
            std::fill(oi, oi + hd, 0.0);
            for (std::size_t j = 0; j < d.kv_len; ++j) {
                p[j] *= inv;
                axpy(p[j], vb + j * d.width, oi, hd);
            }
        }
    }
}

void attention_backward(const double* q, const double* k, const double* v, const double* probs, const double* dout,
                        double* dq, double* dk, double* dv, AttentionDims d) {
    const std::size_t hd = d.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    const auto pairs = static_cast<std::ptrdiff_t>(d.batch * d.heads);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t bh = 0; bh < pairs; ++bh) {
        const std::size_t b = static_cast<std::size_t>(bh) / d.heads;
        const std::size_t h = static_cast<std::size_t>(bh) % d.heads;
        const std::size_t qoff = b * d.q_len * d.width + h * hd;
        const std::size_t koff = b * d.kv_len * d.width + h * hd;
        const double* pb = probs + static_cast<std::size_t>(bh) * d.q_len * d.kv_len;
        std::vector<double> ds(d.kv_len);
        for (std::size_t i = 0; i < d.q_len; ++i) {
            const double* p = pb + i * d.kv_len;
            const double* doi = dout + qoff + i * d.width;
            double weighted = 0.0;
            for (std::size_t j = 0; j < d.kv_len; ++j) {
                ds[j] = dot(doi, v + koff + j * d.width, hd);
                weighted += p[j] * ds[j];
                axpy(p[j], doi, dv + koff + j * d.width, hd);
            }
            double* dqi = dq + qoff + i * d.width;
            const double* qi = q + qoff + i * d.width;
            for (std::size_t j = 0; j < d.kv_len; ++j) {
                const double g = scale * p[j] * (ds[j] - weighted);
                if (g == 0.0) continue;
                axpy(g, k + koff + j * d.width, dqi, hd);
                axpy(g, qi, dk + koff + j * d.width, hd);
            }
        }
    }
}

namespace {

// Adds the 3x3 zero-padded correlation of `in` with `kernel` into `out`.
void correlate3x3_add(const double* in, const double* kernel, double* out, std::size_t H, std::size_t W) {
    for (int ky = 0; ky < 3; ++ky) {
        for (int kx = 0; kx < 3; ++kx) {
            const double wv = kernel[ky * 3 + kx];
            const int dy = ky - 1, dx = kx - 1;
            const std::size_t y0 = dy < 0 ? 1 : 0, y1 = dy > 0 ? H - 1 : H;
            const std::size_t x0 = dx < 0 ? 1 : 0, x1 = dx > 0 ? W - 1 : W;
            for (std::size_t y = y0; y < y1; ++y) {
                const double* src = in + (y + dy) * W + dx;
                double* dst = out + y * W;
                for (std::size_t x = x0; x < x1; ++x) dst[x] += wv * src[x];
            }
        }
    }
}

// Adds the transpose of correlate3x3 (scatter) of `g` into `out`.
void correlate3x3_transpose_add(const double* g, const double* kernel, double* out, std::size_t H, std::size_t W) {
    for (int ky = 0; ky < 3; ++ky) {
        for (int kx = 0; kx < 3; ++kx) {
            const double wv = kernel[ky * 3 + kx];
            const int dy = ky - 1, dx = kx - 1;
            const std::size_t y0 = dy < 0 ? 1 : 0, y1 = dy > 0 ? H - 1 : H;
            const std::size_t x0 = dx < 0 ? 1 : 0, x1 = dx > 0 ? W - 1 : W;
            for (std::size_t y = y0; y < y1; ++y) {
                const double* src = g + y * W;
                double* dst = out + (y + dy) * W + dx;
                for (std::size_t x = x0; x < x1; ++x) dst[x] += wv * src[x];
            }
        }
    }
}

}  // namespace

void conv3x3_forward(const double* x, const double* w, const double* b, double* y, ConvDims d) {
    const std::size_t plane = d.height * d.width;
    const auto jobs = static_cast<std::ptrdiff_t>(d.batch * d.out_channels);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t job = 0; job < jobs; ++job) {
        const std::size_t bi = static_cast<std::size_t>(job) / d.out_channels;
        const std::size_t co = static_cast<std::size_t>(job) % d.out_channels;
        double* out = y + (bi * d.out_channels + co) * plane;
        std::fill(out, out + plane, b ? b[co] : 0.0);
        for (std::size_t ci = 0; ci < d.in_channels; ++ci) {
            correlate3x3_add(x + (bi * d.in_channels + ci) * plane, w + (co * d.in_channels + ci) * 9, out, d.height,
                             d.width);
        }
    }
}

void conv3x3_backward(const double* x, const double* w, const double* dy, double* dx, double* dw, double* db,
                      ConvDims d) {
    const std::size_t plane = d.height * d.width;
    if (dx) {
        const auto jobs = static_cast<std::ptrdiff_t>(d.batch * d.in_channels);
#pragma omp parallel for schedule(static)
        for (std::ptrdiff_t job = 0; job < jobs; ++job) {
            const std::size_t bi = static_cast<std::size_t>(job) / d.in_channels;
            const std::size_t ci = static_cast<std::size_t>(job) % d.in_channels;
            double* out = dx + (bi * d.in_channels + ci) * plane;
            for (std::size_t co = 0; co < d.out_channels; ++co) {
                correlate3x3_transpose_add(dy + (bi * d.out_channels + co) * plane, w + (co * d.in_channels + ci) * 9,
                                           out, d.height, d.width);
            }
        }
    }
    if (dw || db) {
        const auto outs = static_cast<std::ptrdiff_t>(d.out_channels);
#pragma omp parallel for schedule(static)
        for (std::ptrdiff_t co = 0; co < outs; ++co) {
            for (std::size_t bi = 0; bi < d.batch; ++bi) {
                const double* g = dy + (bi * d.out_channels + static_cast<std::size_t>(co)) * plane;
                if (db) {
                    double s = 0.0;
                    for (std::size_t p = 0; p < plane; ++p) s += g[p];
                    db[co] += s;
                }
                if (!dw) continue;
                for (std::size_t ci = 0; ci < d.in_channels; ++ci) {
                    const double* in = x + (bi * d.in_channels + ci) * plane;
                    double* kern = dw + (static_cast<std::size_t>(co) * d.in_channels + ci) * 9;
                    for (int ky = 0; ky < 3; ++ky) {
                        for (int kx = 0; kx < 3; ++kx) {
                            const int oy = ky - 1, ox = kx - 1;
                            const std::size_t y0 = oy < 0 ? 1 : 0, y1 = oy > 0 ? d.height - 1 : d.height;
                            const std::size_t x0 = ox < 0 ? 1 : 0, x1 = ox > 0 ? d.width - 1 : d.width;
                            double s = 0.0;
                            for (std::size_t yy = y0; yy < y1; ++yy) {
                                const double* src = in + (yy + oy) * d.width + ox;
                                const double* gg = g + yy * d.width;
                                for (std::size_t xx = x0; xx < x1; ++xx) s += gg[xx] * src[xx];
                            }
                            kern[ky * 3 + kx] += s;
                        }
                    }
                }
            }
        }
    }
}

}  // namespace flowmo::kernels
