#pragma once

// Dense compute kernels behind the autodiff ops. Every kernel has an
// OpenMP-parallel version (namespace flowmo::kernels) and a plain serial
// reference (flowmo::kernels::serial) with identical signatures; the
// reference is kept for tests and the benchmark target.
//
// Parallel loops only split over independent output rows, so results do not
// depend on the thread count.

#include <cstddef>

namespace flowmo::kernels {

struct LinearDims {
    std::size_t rows;  // M
    std::size_t in;    // K
    std::size_t out;   // N
};

struct AttentionDims {
    std::size_t batch;
    std::size_t q_len;
    std::size_t kv_len;
    std::size_t width;
    std::size_t heads;
    std::size_t head_dim() const { return width / heads; }
};

struct ConvDims {
    std::size_t batch;
    std::size_t in_channels;
    std::size_t out_channels;
    std::size_t height;
    std::size_t width;
};

// y[M,N] = x[M,K] w[N,K]^T + b[N]; b may be null.
void linear_forward(const double* x, const double* w, const double* b, double* y, LinearDims d);
// dx[M,K] += dy[M,N] w[N,K]
void linear_backward_input(const double* dy, const double* w, double* dx, LinearDims d);
// dw[N,K] += dy^T x, db[N] += column sums of dy; db may be null.
void linear_backward_weight(const double* dy, const double* x, double* dw, double* db, LinearDims d);

// Multi-head softmax attention. q:[B,Lq,W], k,v:[B,Lk,W], out:[B,Lq,W],
// probs:[B,H,Lq,Lk] (saved for the backward pass).
void attention_forward(const double* q, const double* k, const double* v, double* out, double* probs,
                       AttentionDims d);
// Accumulates into dq, dk, dv.
void attention_backward(const double* q, const double* k, const double* v, const double* probs, const double* dout,
                        double* dq, double* dk, double* dv, AttentionDims d);

// 3x3 convolution, stride 1, zero padding 1. x:[B,Ci,H,W], w:[Co,Ci,3,3], b:[Co].
void conv3x3_forward(const double* x, const double* w, const double* b, double* y, ConvDims d);
void conv3x3_backward(const double* x, const double* w, const double* dy, double* dx, double* dw, double* db,
                      ConvDims d);

namespace serial {

void linear_forward(const double* x, const double* w, const double* b, double* y, LinearDims d);
void linear_backward_input(const double* dy, const double* w, double* dx, LinearDims d);
void linear_backward_weight(const double* dy, const double* x, double* dw, double* db, LinearDims d);
void attention_forward(const double* q, const double* k, const double* v, double* out, double* probs,
                       AttentionDims d);
void attention_backward(const double* q, const double* k, const double* v, const double* probs, const double* dout,
                        double* dq, double* dk, double* dv, AttentionDims d);
void conv3x3_forward(const double* x, const double* w, const double* b, double* y, ConvDims d);
void conv3x3_backward(const double* x, const double* w, const double* dy, double* dx, double* dw, double* db,
                      ConvDims d);

}  // namespace serial

}  // namespace flowmo::kernels
