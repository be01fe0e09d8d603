#include <algorithm>
#include <cmath>
#include <vector>

#include "flowmo/kernels.hpp"

namespace flowmo::kernels::serial {

void linear_forward(const double* x, const double* w, const double* b, double* y, LinearDims d) {
    for (std::size_t i = 0; i < d.rows; ++i) {
        for (std::size_t n = 0; n < d.out; ++n) {
            double s = b ? b[n] : 0.0;
            for (std::size_t k = 0; k < d.in; ++k) s += x[i * d.in + k] * w[n * d.in + k];
            y[i * d.out + n] = s;
        }
    }
}

void linear_backward_input(const double* dy, const double* w, double* dx, LinearDims d) {
    for (std::size_t i = 0; i < d.rows; ++i)
        for (std::size_t k = 0; k < d.in; ++k)
            for (std::size_t n = 0; n < d.out; ++n) dx[i * d.in + k] += dy[i * d.out + n] * w[n * d.in + k];
}

void linear_backward_weight(const double* dy, const double* x, double* dw, double* db, LinearDims d) {
    for (std::size_t n = 0; n < d.out; ++n) {
        for (std::size_t i = 0; i < d.rows; ++i) {
            if (db) db[n] += dy[i * d.out + n];
            for (std::size_t k = 0; k < d.in; ++k) dw[n * d.in + k] += dy[i * d.out + n] * x[i * d.in + k];
        }
    }
}

void attention_forward(const double* q, const double* k, const double* v, double* out, double* probs,
                       AttentionDims d) {
    const std::size_t hd = d.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    for (std::size_t b = 0; b < d.batch; ++b) {
        for (std::size_t h = 0; h < d.heads; ++h) {
            for (std::size_t i = 0; i < d.q_len; ++i) {
                double* p = probs + ((b * d.heads + h) * d.q_len + i) * d.kv_len;
                for (std::size_t j = 0; j < d.kv_len; ++j) {
                    double s = 0.0;
                    for (std::size_t e = 0; e < hd; ++e)
                        s += q[(b * d.q_len + i) * d.width + h * hd + e] * k[(b * d.kv_len + j) * d.width + h * hd + e];
                    p[j] = scale * s;
                }
                const double mx = *std::max_element(p, p + d.kv_len);
                double sum = 0.0;
                for (std::size_t j = 0; j < d.kv_len; ++j) sum += (p[j] = std::exp(p[j] - mx));
                for (std::size_t j = 0; j < d.kv_len; ++j) p[j] /= sum;
                for (std::size_t e = 0; e < hd; ++e) {
                    double s = 0.0;
                    for (std::size_t j = 0; j < d.kv_len; ++j) s += p[j] * v[(b * d.kv_len + j) * d.width + h * hd + e];
                    out[(b * d.q_len + i) * d.width + h * hd + e] = s;
                }
            }
        }
    }
}

void attention_backward(const double* q, const double* k, const double* v, const double* probs, const double* dout,
                        double* dq, double* dk, double* dv, AttentionDims d) {
    const std::size_t hd = d.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    std::vector<double> dp(d.kv_len);
    for (std::size_t b = 0; b < d.batch; ++b) {
        for (std::size_t h = 0; h < d.heads; ++h) {
            for (std::size_t i = 0; i < d.q_len; ++i) {
                const double* p = probs + ((b * d.heads + h) * d.q_len + i) * d.kv_len;
                const std::size_t qi = (b * d.q_len + i) * d.width + h * hd;
                for (std::size_t j = 0; j < d.kv_len; ++j) {
                    const std::size_t kj = (b * d.kv_len + j) * d.width + h * hd;
                    double s = 0.0;
                    for (std::size_t e = 0; e < hd; ++e) {
                        s += dout[qi + e] * v[kj + e];
                        dv[kj + e] += p[j] * dout[qi + e];
                    }
                    dp[j] = s;
                }
                double weighted = 0.0;
                for (std::size_t j = 0; j < d.kv_len; ++j) weighted += p[j] * dp[j];
                for (std::size_t j = 0; j < d.kv_len; ++j) {
                    const std::size_t kj = (b * d.kv_len + j) * d.width + h * hd;
                    const double g = scale * p[j] * (dp[j] - weighted);
                    for (std::size_t e = 0; e < hd; ++e) {
                        dq[qi + e] += g * k[kj + e];
                        dk[kj + e] += g * q[qi + e];
                    }
                }
            }
        }
    }
}

void conv3x3_forward(const double* x, const double* w, const double* b, double* y, ConvDims d) {
    const auto H = static_cast<long>(d.height), W = static_cast<long>(d.width);
    for (std::size_t bi = 0; bi < d.batch; ++bi)
        for (std::size_t co = 0; co < d.out_channels; ++co)
            for (long yy = 0; yy < H; ++yy)
                for (long xx = 0; xx < W; ++xx) {
                    double s = b ? b[co] : 0.0;
                    for (std::size_t ci = 0; ci < d.in_channels; ++ci)
                        for (long ky = 0; ky < 3; ++ky)
                            for (long kx = 0; kx < 3; ++kx) {
                                const long sy = yy + ky - 1, sx = xx + kx - 1;
                                if (sy < 0 || sy >= H || sx < 0 || sx >= W) continue;
                                s += w[((co * d.in_channels + ci) * 3 + ky) * 3 + kx] *
                                     x[((bi * d.in_channels + ci) * H + sy) * W + sx];
                            }
                    y[((bi * d.out_channels + co) * H + yy) * W + xx] = s;
                }
}

void conv3x3_backward(const double* x, const double* w, const double* dy, double* dx, double* dw, double* db,
                      ConvDims d) {
    const auto H = static_cast<long>(d.height), W = static_cast<long>(d.width);
    for (std::size_t bi = 0; bi < d.batch; ++bi)
        for (std::size_t co = 0; co < d.out_channels; ++co)
            for (long yy = 0; yy < H; ++yy)
                for (long xx = 0; xx < W; ++xx) {
                    const double g = dy[((bi * d.out_channels + co) * H + yy) * W + xx];
                    if (db) db[co] += g;
                    for (std::size_t ci = 0; ci < d.in_channels; ++ci)
                        for (long ky = 0; ky < 3; ++ky)
                            for (long kx = 0; kx < 3; ++kx) {
                                const long sy = yy + ky - 1, sx = xx + kx - 1;
                                if (sy < 0 || sy >= H || sx < 0 || sx >= W) continue;
                                const std::size_t wi = ((co * d.in_channels + ci) * 3 + ky) * 3 + kx;
                                const std::size_t xi = ((bi * d.in_channels + ci) * H + sy) * W + sx;
                                if (dw) dw[wi] += g * x[xi];
                                if (dx) dx[xi] += g * w[wi];
                            }
                }
}

}  // namespace flowmo::kernels::serial
