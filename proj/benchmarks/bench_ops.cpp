// Microbenchmarks for the hot numeric kernels: 3D convolution (reference vs
// cache-blocked), separable Gaussian smoothing, masked average pooling, and
// one full classifier forward pass at training resolution.

#include <benchmark/benchmark.h>

#include <cstdint>
#include <vector>

#include "vb/diagnoser.hpp"
#include "vb/localizer.hpp"
#include "vb/nn/kernels.hpp"
#include "vb/nn/tensor.hpp"
#include "vb/rng.hpp"
#include "vb/volume.hpp"

namespace {

std::vector<double> random_vec(std::size_t n, std::uint64_t seed) {
    vb::Rng rng(seed);
    std::vector<double> v(n);
    for (double& x : v) x = rng.uniform(-1.0, 1.0);
    return v;
}

vb::Volume random_volume(vb::Dims dims, std::uint64_t seed) {
    vb::Rng rng(seed);
    std::vector<float> v(static_cast<std::size_t>(dims.numel()));
    for (float& x : v) x = static_cast<float>(rng.uniform());
    return vb::Volume(dims, vb::Spacing{}, std::move(v));
}

std::size_t conv_in_elems(const vb::nn::detail::Conv3dShape& s) {
    return static_cast<std::size_t>(s.n) * s.ci * s.d * s.h * s.w;
}
std::size_t conv_kernel_elems(const vb::nn::detail::Conv3dShape& s) {
    return static_cast<std::size_t>(s.co) * s.ci * s.kd * s.kh * s.kw;
}
std::size_t conv_out_elems(const vb::nn::detail::Conv3dShape& s) {
    return static_cast<std::size_t>(s.n) * s.co * s.od * s.oh * s.ow;
}

void bench_conv3d_reference(benchmark::State& state) {
    const int side = static_cast<int>(state.range(0));
    const auto shape = vb::nn::detail::Conv3dShape::make(1, 4, side, side, side, 8, 3, 3, 3, 2, 1);
    const auto x = random_vec(conv_in_elems(shape), 1);
    const auto k = random_vec(conv_kernel_elems(shape), 2);
    std::vector<double> y(conv_out_elems(shape));
    for (auto _ : state) {
        vb::nn::detail::conv3d_forward_ref(x.data(), k.data(), y.data(), shape);
        benchmark::DoNotOptimize(y.data());
    }
}
BENCHMARK(bench_conv3d_reference)->Arg(16)->Arg(32);

void bench_conv3d_blocked(benchmark::State& state) {
    const int side = static_cast<int>(state.range(0));
    const auto shape = vb::nn::detail::Conv3dShape::make(1, 4, side, side, side, 8, 3, 3, 3, 2, 1);
    const auto x = random_vec(conv_in_elems(shape), 1);
    const auto k = random_vec(conv_kernel_elems(shape), 2);
    std::vector<double> y(conv_out_elems(shape));
    for (auto _ : state) {
        vb::nn::detail::conv3d_forward_blocked(x.data(), k.data(), y.data(), shape);
        benchmark::DoNotOptimize(y.data());
    }
}
BENCHMARK(bench_conv3d_blocked)->Arg(16)->Arg(32);

void bench_gaussian_smooth(benchmark::State& state) {
    const int side = static_cast<int>(state.range(0));
    const vb::Volume v = random_volume({side, side, side}, 3);
    for (auto _ : state) {
        vb::Volume out = vb::detail::gaussian_smooth_separable(v, 2.0);
        benchmark::DoNotOptimize(out.voxels().data());
    }
}
BENCHMARK(bench_gaussian_smooth)->Arg(32)->Arg(64);

void bench_masked_avg_pool(benchmark::State& state) {
    const int c = 16, spatial = 8 * 8 * 8;
    const auto f = random_vec(static_cast<std::size_t>(c) * spatial, 4);
    auto m = random_vec(spatial, 5);
    for (double& x : m) x = x > 0.0 ? 1.0 : 0.0;
    std::vector<double> z(c);
    for (auto _ : state) {
        vb::nn::detail::masked_avg_pool_forward(f.data(), m.data(), z.data(), c, spatial, 1e-6);
        benchmark::DoNotOptimize(z.data());
    }
}
BENCHMARK(bench_masked_avg_pool);

void bench_classifier_forward(benchmark::State& state) {
    vb::DiagnoserConfig cfg;
    cfg.k_classes = 4;
    const vb::Volume v = random_volume({32, 32, 32}, 6);
    vb::Mask mask = vb::Mask::filled({32, 32, 32}, 0);
    for (int d = 12; d < 20; ++d)
        for (int i = 12; i < 20; ++i)
            for (int j = 12; j < 20; ++j) mask(d, i, j) = 1;
    vb::nn::ParamStore params;
    vb::init_diagnoser_params(params, cfg);
    for (auto _ : state) {
        const vb::Prediction p = vb::predict_case(params, cfg, v, mask);
        benchmark::DoNotOptimize(p.probs.data());
    }
}
BENCHMARK(bench_classifier_forward);

} // namespace

BENCHMARK_MAIN();
