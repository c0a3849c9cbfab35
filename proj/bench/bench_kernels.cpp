// Parallel kernels against their serial references at the toy backbone's
// layer shapes. Arguments: batch, in channels, out channels, spatial size, stride.

#include <benchmark/benchmark.h>

#include <vector>

#include "mtlnas/kernels.hpp"
#include "mtlnas/rng.hpp"

namespace {

using mtlnas::kernels::ConvGeometry;

std::vector<double> random_vector(std::size_t n, std::uint64_t seed) {
  mtlnas::Rng rng(seed);
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(-1.0, 1.0);
  return v;
}

ConvGeometry geometry(const benchmark::State& state) {
  ConvGeometry g;
  g.batch = static_cast<std::size_t>(state.range(0));
  g.in_channels = static_cast<std::size_t>(state.range(1));
  g.out_channels = static_cast<std::size_t>(state.range(2));
  g.in_height = g.in_width = static_cast<std::size_t>(state.range(3));
  g.stride = static_cast<std::size_t>(state.range(4));
  return g;
}

struct ConvBuffers {
  explicit ConvBuffers(const ConvGeometry& g)
      : x(random_vector(g.batch * g.in_channels * g.in_height * g.in_width, 1)),
        w(random_vector(g.out_channels * g.patch_size(), 2)),
        b(random_vector(g.out_channels, 3)),
        y(g.batch * g.out_channels * g.out_height() * g.out_width()),
        dy(random_vector(y.size(), 4)),
        dx(x.size()),
        dw(w.size()),
        db(b.size()) {}
  std::vector<double> x, w, b, y, dy, dx, dw, db, cols;
};

void set_flops(benchmark::State& state, const ConvGeometry& g, double passes) {
  const double flops = 2.0 * static_cast<double>(g.out_channels * g.patch_size() * g.columns()) * passes;
  state.counters["flops"] = benchmark::Counter(flops, benchmark::Counter::kIsIterationInvariantRate);
}

void BM_ConvForward(benchmark::State& state) {
  const ConvGeometry g = geometry(state);
  ConvBuffers buf(g);
  for (auto _ : state) {
    mtlnas::kernels::conv2d_forward(g, buf.x, buf.w, buf.b, buf.y, buf.cols);
    benchmark::DoNotOptimize(buf.y.data());
  }
  set_flops(state, g, 1.0);
}

void BM_ConvForwardReference(benchmark::State& state) {
  const ConvGeometry g = geometry(state);
  ConvBuffers buf(g);
  for (auto _ : state) {
    mtlnas::kernels::reference::conv2d_forward(g, buf.x, buf.w, buf.b, buf.y);
    benchmark::DoNotOptimize(buf.y.data());
  }
  set_flops(state, g, 1.0);
}

void BM_ConvBackward(benchmark::State& state) {
  const ConvGeometry g = geometry(state);
  ConvBuffers buf(g);
  mtlnas::kernels::conv2d_forward(g, buf.x, buf.w, buf.b, buf.y, buf.cols);
  for (auto _ : state) {
    mtlnas::kernels::conv2d_backward(g, buf.cols, buf.w, buf.dy, buf.dx, buf.dw, buf.db);
    benchmark::DoNotOptimize(buf.dw.data());
  }
  set_flops(state, g, 2.0);
}

void BM_ConvBackwardReference(benchmark::State& state) {
  const ConvGeometry g = geometry(state);
  ConvBuffers buf(g);
  for (auto _ : state) {
    mtlnas::kernels::reference::conv2d_backward(g, buf.x, buf.w, buf.dy, buf.dx, buf.dw, buf.db);
    benchmark::DoNotOptimize(buf.dw.data());
  }
  set_flops(state, g, 2.0);
}

// Fusion channel mix: batch, input channels (TI plus sources), output channels, pixels.
template <bool Reference>
void BM_ChannelMix(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0)), ci = static_cast<std::size_t>(state.range(1)),
             co = static_cast<std::size_t>(state.range(2)), p = static_cast<std::size_t>(state.range(3));
  const std::vector<double> x = random_vector(n * ci * p, 1), w = random_vector(co * ci, 2),
                            dy = random_vector(n * co * p, 3);
  std::vector<double> y(n * co * p), dx(x.size()), dw(w.size());
  for (auto _ : state) {
    if constexpr (Reference) {
      mtlnas::kernels::reference::channel_mix_forward(n, ci, co, p, x, w, y);
      mtlnas::kernels::reference::channel_mix_backward(n, ci, co, p, x, w, dy, dx, dw);
    } else {
      mtlnas::kernels::channel_mix_forward(n, ci, co, p, x, w, y);
      mtlnas::kernels::channel_mix_backward(n, ci, co, p, x, w, dy, dx, dw);
    }
    benchmark::DoNotOptimize(dw.data());
  }
  state.counters["flops"] =
      benchmark::Counter(6.0 * static_cast<double>(n * ci * co * p), benchmark::Counter::kIsIterationInvariantRate);
}

template <bool Transposed>
void BM_Gemm(benchmark::State& state) {
  const auto m = static_cast<std::size_t>(state.range(0)), n = static_cast<std::size_t>(state.range(1)),
             k = static_cast<std::size_t>(state.range(2));
  const std::vector<double> a = random_vector(m * k, 1), b = random_vector(k * n, 2);
  std::vector<double> c(m * n);
  for (auto _ : state) {
    if constexpr (Transposed) {
      mtlnas::kernels::gemm_tn(m, n, k, a.data(), b.data(), c.data(), false);
    } else {
      mtlnas::kernels::gemm_nn(m, n, k, a.data(), b.data(), c.data(), false);
    }
    benchmark::DoNotOptimize(c.data());
  }
  state.counters["flops"] =
      benchmark::Counter(2.0 * static_cast<double>(m * n * k), benchmark::Counter::kIsIterationInvariantRate);
}

void ToyLayers(benchmark::internal::Benchmark* b) {
  b->ArgNames({"N", "Ci", "Co", "HW", "s"});
  b->Args({8, 3, 8, 16, 1});
  b->Args({8, 8, 8, 16, 1});
  b->Args({8, 8, 16, 16, 2});
  b->Args({8, 16, 32, 8, 2});
  b->Args({8, 32, 32, 4, 1});
  b->Args({64, 16, 16, 8, 1});
}

}  // namespace

BENCHMARK(BM_ConvForward)->Apply(ToyLayers);
BENCHMARK(BM_ConvForwardReference)->Apply(ToyLayers);
BENCHMARK(BM_ConvBackward)->Apply(ToyLayers);
BENCHMARK(BM_ConvBackwardReference)->Apply(ToyLayers);
BENCHMARK(BM_ChannelMix<false>)->ArgNames({"N", "Ci", "Co", "P"})->Args({8, 24, 8, 256})->Args({8, 96, 32, 16});
BENCHMARK(BM_ChannelMix<true>)->ArgNames({"N", "Ci", "Co", "P"})->Args({8, 24, 8, 256})->Args({8, 96, 32, 16});
BENCHMARK(BM_Gemm<false>)->Args({32, 512, 144})->Args({64, 2048, 288});
BENCHMARK(BM_Gemm<true>)->Args({32, 512, 144})->Args({64, 2048, 288});

BENCHMARK_MAIN();
