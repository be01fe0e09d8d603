// OpenMP kernels against their serial references at model-like sizes.
// Arg order: linear (M, K, N); attention (B, L, W, H); conv (B, C, HW).

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "flowmo/kernels.hpp"

namespace k = flowmo::kernels;

namespace {

std::vector<double> filled(std::size_t n, unsigned seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> d(0.0, 1.0);
    std::vector<double> v(n);
    for (auto& x : v) x = d(rng);
    return v;
}

template <bool Parallel>
void BM_LinearForward(benchmark::State& state) {
    const k::LinearDims d{static_cast<std::size_t>(state.range(0)), static_cast<std::size_t>(state.range(1)),
                          static_cast<std::size_t>(state.range(2))};
    const auto x = filled(d.rows * d.in, 1), w = filled(d.out * d.in, 2), b = filled(d.out, 3);
    std::vector<double> y(d.rows * d.out);
    for (auto _ : state) {
        if constexpr (Parallel)
            k::linear_forward(x.data(), w.data(), b.data(), y.data(), d);
        else
            k::serial::linear_forward(x.data(), w.data(), b.data(), y.data(), d);
        benchmark::DoNotOptimize(y.data());
    }
    state.SetItemsProcessed(state.iterations() * static_cast<long>(d.rows * d.in * d.out));
}

template <bool Parallel>
void BM_LinearBackward(benchmark::State& state) {
    const k::LinearDims d{static_cast<std::size_t>(state.range(0)), static_cast<std::size_t>(state.range(1)),
                          static_cast<std::size_t>(state.range(2))};
    const auto x = filled(d.rows * d.in, 1), w = filled(d.out * d.in, 2), dy = filled(d.rows * d.out, 3);
    std::vector<double> dx(d.rows * d.in), dw(d.out * d.in), db(d.out);
    for (auto _ : state) {
        if constexpr (Parallel) {
            k::linear_backward_input(dy.data(), w.data(), dx.data(), d);
            k::linear_backward_weight(dy.data(), x.data(), dw.data(), db.data(), d);
        } else {
            k::serial::linear_backward_input(dy.data(), w.data(), dx.data(), d);
            k::serial::linear_backward_weight(dy.data(), x.data(), dw.data(), db.data(), d);
        }
        benchmark::DoNotOptimize(dx.data());
        benchmark::DoNotOptimize(dw.data());
    }
}

k::AttentionDims attention_dims(const benchmark::State& state) {
    const auto L = static_cast<std::size_t>(state.range(1));
    return {static_cast<std::size_t>(state.range(0)), L, L, static_cast<std::size_t>(state.range(2)),
            static_cast<std::size_t>(state.range(3))};
}

template <bool Parallel>
void BM_AttentionForward(benchmark::State& state) {
    const auto d = attention_dims(state);
    const std::size_t n = d.batch * d.q_len * d.width;
    const auto q = filled(n, 1), kk = filled(n, 2), v = filled(n, 3);
    std::vector<double> out(n), probs(d.batch * d.heads * d.q_len * d.kv_len);
    for (auto _ : state) {
        if constexpr (Parallel)
            k::attention_forward(q.data(), kk.data(), v.data(), out.data(), probs.data(), d);
        else
            k::serial::attention_forward(q.data(), kk.data(), v.data(), out.data(), probs.data(), d);
        benchmark::DoNotOptimize(out.data());
    }
}

template <bool Parallel>
void BM_AttentionBackward(benchmark::State& state) {
    const auto d = attention_dims(state);
    const std::size_t n = d.batch * d.q_len * d.width;
    const auto q = filled(n, 1), kk = filled(n, 2), v = filled(n, 3), dout = filled(n, 4);
    std::vector<double> out(n), probs(d.batch * d.heads * d.q_len * d.kv_len), dq(n), dk(n), dv(n);
    k::serial::attention_forward(q.data(), kk.data(), v.data(), out.data(), probs.data(), d);
    for (auto _ : state) {
        if constexpr (Parallel)
            k::attention_backward(q.data(), kk.data(), v.data(), probs.data(), dout.data(), dq.data(), dk.data(),
                                  dv.data(), d);
        else
            k::serial::attention_backward(q.data(), kk.data(), v.data(), probs.data(), dout.data(), dq.data(),
                                          dk.data(), dv.data(), d);
        benchmark::DoNotOptimize(dq.data());
    }
}

template <bool Parallel>
void BM_Conv3x3(benchmark::State& state) {
    const auto C = static_cast<std::size_t>(state.range(1)), HW = static_cast<std::size_t>(state.range(2));
    const k::ConvDims d{static_cast<std::size_t>(state.range(0)), C, C, HW, HW};
    const auto x = filled(d.batch * C * HW * HW, 1), w = filled(C * C * 9, 2), b = filled(C, 3);
    std::vector<double> y(d.batch * C * HW * HW);
    for (auto _ : state) {
        if constexpr (Parallel)
            k::conv3x3_forward(x.data(), w.data(), b.data(), y.data(), d);
        else
            k::serial::conv3x3_forward(x.data(), w.data(), b.data(), y.data(), d);
        benchmark::DoNotOptimize(y.data());
    }
}

}  // namespace

BENCHMARK(BM_LinearForward<false>)->Name("linear_forward/serial")->Args({128, 64, 64})->Args({512, 256, 256});
BENCHMARK(BM_LinearForward<true>)->Name("linear_forward/omp")->Args({128, 64, 64})->Args({512, 256, 256});
BENCHMARK(BM_LinearBackward<false>)->Name("linear_backward/serial")->Args({128, 64, 64})->Args({512, 256, 256});
BENCHMARK(BM_LinearBackward<true>)->Name("linear_backward/omp")->Args({128, 64, 64})->Args({512, 256, 256});
BENCHMARK(BM_AttentionForward<false>)->Name("attention_forward/serial")->Args({8, 24, 64, 2})->Args({8, 80, 128, 4});
BENCHMARK(BM_AttentionForward<true>)->Name("attention_forward/omp")->Args({8, 24, 64, 2})->Args({8, 80, 128, 4});
BENCHMARK(BM_AttentionBackward<false>)->Name("attention_backward/serial")->Args({8, 24, 64, 2})->Args({8, 80, 128, 4});
BENCHMARK(BM_AttentionBackward<true>)->Name("attention_backward/omp")->Args({8, 24, 64, 2})->Args({8, 80, 128, 4});
BENCHMARK(BM_Conv3x3<false>)->Name("conv3x3/serial")->Args({8, 16, 16})->Args({8, 32, 32});
BENCHMARK(BM_Conv3x3<true>)->Name("conv3x3/omp")->Args({8, 16, 16})->Args({8, 32, 32});

BENCHMARK_MAIN();
