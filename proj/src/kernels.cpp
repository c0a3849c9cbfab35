#include "mtlnas/kernels.hpp"

#include <algorithm>
#include <cstring>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace mtlnas::kernels {
namespace {

// Below this many multiply-adds a parallel region costs more than it saves.
constexpr std::size_t kParallelThreshold = 1 << 15;

void transpose(std::size_t rows, std::size_t cols, const double* src, double* dst) {
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
  }
}

}  // namespace

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

// Rows of C are processed four at a time so each loaded row of B feeds four
// accumulators. Every C element still sums its k terms in ascending order.
constexpr std::size_t kRowBlock = 4;

void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c,
             bool accumulate) {
  const bool parallel = m > kRowBlock && m * n * k >= kParallelThreshold;
  (void)parallel;
  const auto blocks = static_cast<std::ptrdiff_t>((m + kRowBlock - 1) / kRowBlock);
#pragma omp parallel for schedule(static) if (parallel)
  for (std::ptrdiff_t blk = 0; blk < blocks; ++blk) {
    const std::size_t i0 = static_cast<std::size_t>(blk) * kRowBlock;
    const std::size_t rows = std::min(kRowBlock, m - i0);
    if (!accumulate) std::fill(c + i0 * n, c + (i0 + rows) * n, 0.0);
    if (rows == kRowBlock) {
      double* __restrict c0 = c + i0 * n;
      double* __restrict c1 = c0 + n;
      double* __restrict c2 = c1 + n;
      double* __restrict c3 = c2 + n;
      const double* a0 = a + i0 * k;
      for (std::size_t kk = 0; kk < k; ++kk) {
        const double x0 = a0[kk], x1 = a0[k + kk], x2 = a0[2 * k + kk], x3 = a0[3 * k + kk];
        const double* __restrict brow = b + kk * n;
        for (std::size_t j = 0; j < n; ++j) {
          const double bj = brow[j];
          c0[j] += x0 * bj;
          c1[j] += x1 * bj;
          c2[j] += x2 * bj;
          c3[j] += x3 * bj;
        }
      }
      continue;
    }
    for (std::size_t i = i0; i < i0 + rows; ++i) {
      double* __restrict crow = c + i * n;
      const double* arow = a + i * k;
      for (std::size_t kk = 0; kk < k; ++kk) {
        const double aik = arow[kk];
        const double* __restrict brow = b + kk * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
      }
    }
  }
}

void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c,
             bool accumulate) {
  const bool parallel = m > kRowBlock && m * n * k >= kParallelThreshold;
  (void)parallel;
  const auto blocks = static_cast<std::ptrdiff_t>((m + kRowBlock - 1) / kRowBlock);
#pragma omp parallel for schedule(static) if (parallel)
  for (std::ptrdiff_t blk = 0; blk < blocks; ++blk) {
    const std::size_t i0 = static_cast<std::size_t>(blk) * kRowBlock;
    const std::size_t rows = std::min(kRowBlock, m - i0);
    if (!accumulate) std::fill(c + i0 * n, c + (i0 + rows) * n, 0.0);
    if (rows == kRowBlock) {
      double* __restrict c0 = c + i0 * n;
      double* __restrict c1 = c0 + n;
      double* __restrict c2 = c1 + n;
      double* __restrict c3 = c2 + n;
      for (std::size_t kk = 0; kk < k; ++kk) {
        const double* acol = a + kk * m + i0;
        const double x0 = acol[0], x1 = acol[1], x2 = acol[2], x3 = acol[3];
        const double* __restrict brow = b + kk * n;
        for (std::size_t j = 0; j < n; ++j) {
          const double bj = brow[j];
          c0[j] += x0 * bj;
          c1[j] += x1 * bj;
          c2[j] += x2 * bj;
          c3[j] += x3 * bj;
        }
      }
      continue;
    }
    for (std::size_t i = i0; i < i0 + rows; ++i) {
      double* __restrict crow = c + i * n;
      for (std::size_t kk = 0; kk < k; ++kk) {
        const double aki = a[kk * m + i];
        const double* __restrict brow = b + kk * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += aki * brow[j];
      }
    }
  }
}

void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c,
             bool accumulate) {
  std::vector<double> bt(n * k);
  transpose(n, k, b, bt.data());
  gemm_nn(m, n, k, a, bt.data(), c, accumulate);
}

void im2col(const ConvGeometry& g, std::span<const double> x, std::span<double> cols) {
  const std::size_t ho = g.out_height(), wo = g.out_width();
  const std::size_t plane = ho * wo;
  const std::size_t ncols = g.columns();
  const auto pad = static_cast<std::ptrdiff_t>(g.pad);
  for (std::size_t ci = 0; ci < g.in_channels; ++ci) {
    for (std::size_t ky = 0; ky < g.kernel; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        double* row = cols.data() + ((ci * g.kernel + ky) * g.kernel + kx) * ncols;
        for (std::size_t n = 0; n < g.batch; ++n) {
          const double* src = x.data() + (n * g.in_channels + ci) * g.in_height * g.in_width;
          double* dst = row + n * plane;
          for (std::size_t oy = 0; oy < ho; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - pad;
            double* drow = dst + oy * wo;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.in_height)) {
              std::fill(drow, drow + wo, 0.0);
              continue;
            }
            const double* srow = src + static_cast<std::size_t>(iy) * g.in_width;
            for (std::size_t ox = 0; ox < wo; ++ox) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - pad;
              drow[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.in_width))
                             ? 0.0
                             : srow[static_cast<std::size_t>(ix)];
            }
          }
        }
      }
    }
  }
}

void col2im(const ConvGeometry& g, std::span<const double> cols, std::span<double> dx) {
  const std::size_t ho = g.out_height(), wo = g.out_width();
  const std::size_t plane = ho * wo;
  const std::size_t ncols = g.columns();
  const auto pad = static_cast<std::ptrdiff_t>(g.pad);
  for (std::size_t ci = 0; ci < g.in_channels; ++ci) {
    for (std::size_t ky = 0; ky < g.kernel; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        const double* row = cols.data() + ((ci * g.kernel + ky) * g.kernel + kx) * ncols;
        for (std::size_t n = 0; n < g.batch; ++n) {
          double* dst = dx.data() + (n * g.in_channels + ci) * g.in_height * g.in_width;
          const double* src = row + n * plane;
          for (std::size_t oy = 0; oy < ho; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - pad;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.in_height)) continue;
            double* drow = dst + static_cast<std::size_t>(iy) * g.in_width;
            const double* srow = src + oy * wo;
            for (std::size_t ox = 0; ox < wo; ++ox) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - pad;
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.in_width)) continue;
              drow[static_cast<std::size_t>(ix)] += srow[ox];
            }
          }
        }
      }
    }
  }
}

void conv2d_forward(const ConvGeometry& g, std::span<const double> x, std::span<const double> w,
                    std::span<const double> b, std::span<double> y, std::vector<double>& cols) {
  const std::size_t plane = g.out_height() * g.out_width();
  const std::size_t ncols = g.columns();
  cols.resize(g.patch_size() * ncols);
  im2col(g, x, cols);
  std::vector<double> tmp(g.out_channels * ncols);
  gemm_nn(g.out_channels, ncols, g.patch_size(), w.data(), cols.data(), tmp.data(), false);
  for (std::size_t n = 0; n < g.batch; ++n) {
    for (std::size_t co = 0; co < g.out_channels; ++co) {
      const double bias = b.empty() ? 0.0 : b[co];
      const double* src = tmp.data() + co * ncols + n * plane;
      double* dst = y.data() + (n * g.out_channels + co) * plane;
      for (std::size_t p = 0; p < plane; ++p) dst[p] = src[p] + bias;
    }
  }
}

void conv2d_backward(const ConvGeometry& g, std::span<const double> cols, std::span<const double> w,
                     std::span<const double> dy, std::span<double> dx, std::span<double> dw,
                     std::span<double> db) {
  const std::size_t plane = g.out_height() * g.out_width();
  const std::size_t ncols = g.columns();
  std::vector<double> dyt(g.out_channels * ncols);
  for (std::size_t n = 0; n < g.batch; ++n) {
    for (std::size_t co = 0; co < g.out_channels; ++co) {
      const double* src = dy.data() + (n * g.out_channels + co) * plane;
      std::copy(src, src + plane, dyt.data() + co * ncols + n * plane);
    }
  }
  if (!db.empty()) {
    for (std::size_t co = 0; co < g.out_channels; ++co) {
      double acc = 0.0;
      const double* row = dyt.data() + co * ncols;
      for (std::size_t j = 0; j < ncols; ++j) acc += row[j];
      db[co] += acc;
    }
  }
  if (!dw.empty()) {
    gemm_nt(g.out_channels, g.patch_size(), ncols, dyt.data(), cols.data(), dw.data(), true);
  }
  if (!dx.empty()) {
    std::vector<double> dcols(g.patch_size() * ncols);
    gemm_tn(g.patch_size(), ncols, g.out_channels, w.data(), dyt.data(), dcols.data(), false);
    col2im(g, dcols, dx);
  }
}

void channel_mix_forward(std::size_t batch, std::size_t in_channels, std::size_t out_channels,
                         std::size_t pixels, std::span<const double> x, std::span<const double> w,
                         std::span<double> y) {
  for (std::size_t n = 0; n < batch; ++n) {
    gemm_nn(out_channels, pixels, in_channels, w.data(), x.data() + n * in_channels * pixels,
            y.data() + n * out_channels * pixels, false);
  }
}

void channel_mix_backward(std::size_t batch, std::size_t in_channels, std::size_t out_channels,
                          std::size_t pixels, std::span<const double> x, std::span<const double> w,
                          std::span<const double> dy, std::span<double> dx, std::span<double> dw) {
  for (std::size_t n = 0; n < batch; ++n) {
    const double* dyn = dy.data() + n * out_channels * pixels;
    if (!dx.empty()) {
      gemm_tn(in_channels, pixels, out_channels, w.data(), dyn, dx.data() + n * in_channels * pixels, true);
    }
    if (!dw.empty()) {
      gemm_nt(out_channels, in_channels, pixels, dyn, x.data() + n * in_channels * pixels, dw.data(), true);
    }
  }
}

namespace reference {

void conv2d_forward(const ConvGeometry& g, std::span<const double> x, std::span<const double> w,
                    std::span<const double> b, std::span<double> y) {
  const std::size_t ho = g.out_height(), wo = g.out_width();
  for (std::size_t n = 0; n < g.batch; ++n) {
    for (std::size_t co = 0; co < g.out_channels; ++co) {
      for (std::size_t oy = 0; oy < ho; ++oy) {
        for (std::size_t ox = 0; ox < wo; ++ox) {
          double acc = b.empty() ? 0.0 : b[co];
          for (std::size_t ci = 0; ci < g.in_channels; ++ci) {
            for (std::size_t ky = 0; ky < g.kernel; ++ky) {
              for (std::size_t kx = 0; kx < g.kernel; ++kx) {
                const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
                const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
                if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(g.in_height) ||
                    ix >= static_cast<std::ptrdiff_t>(g.in_width)) {
                  continue;
                }
                acc += w[((co * g.in_channels + ci) * g.kernel + ky) * g.kernel + kx] *
                       x[((n * g.in_channels + ci) * g.in_height + static_cast<std::size_t>(iy)) * g.in_width +
                         static_cast<std::size_t>(ix)];
              }
            }
          }
          y[((n * g.out_channels + co) * ho + oy) * wo + ox] = acc;
        }
      }
    }
  }
}

void conv2d_backward(const ConvGeometry& g, std::span<const double> x, std::span<const double> w,
                     std::span<const double> dy, std::span<double> dx, std::span<double> dw,
                     std::span<double> db) {
  const std::size_t ho = g.out_height(), wo = g.out_width();
  for (std::size_t n = 0; n < g.batch; ++n) {
    for (std::size_t co = 0; co < g.out_channels; ++co) {
      for (std::size_t oy = 0; oy < ho; ++oy) {
        for (std::size_t ox = 0; ox < wo; ++ox) {
          const double grad = dy[((n * g.out_channels + co) * ho + oy) * wo + ox];
          if (!db.empty()) db[co] += grad;
          for (std::size_t ci = 0; ci < g.in_channels; ++ci) {
            for (std::size_t ky = 0; ky < g.kernel; ++ky) {
              for (std::size_t kx = 0; kx < g.kernel; ++kx) {
                const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
                const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
                if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(g.in_height) ||
                    ix >= static_cast<std::ptrdiff_t>(g.in_width)) {
                  continue;
                }
                const std::size_t xi = ((n * g.in_channels + ci) * g.in_height + static_cast<std::size_t>(iy)) *
                                           g.in_width +
                                       static_cast<std::size_t>(ix);
                const std::size_t wi = ((co * g.in_channels + ci) * g.kernel + ky) * g.kernel + kx;
                if (!dw.empty()) dw[wi] += grad * x[xi];
                if (!dx.empty()) dx[xi] += grad * w[wi];
              }
            }
          }
        }
      }
    }
  }
}

void channel_mix_forward(std::size_t batch, std::size_t in_channels, std::size_t out_channels,
                         std::size_t pixels, std::span<const double> x, std::span<const double> w,
                         std::span<double> y) {
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t co = 0; co < out_channels; ++co) {
      for (std::size_t p = 0; p < pixels; ++p) {
        double acc = 0.0;
        for (std::size_t ci = 0; ci < in_channels; ++ci) {
          acc += w[co * in_channels + ci] * x[(n * in_channels + ci) * pixels + p];
        }
        y[(n * out_channels + co) * pixels + p] = acc;
      }
    }
  }
}

void channel_mix_backward(std::size_t batch, std::size_t in_channels, std::size_t out_channels,
                          std::size_t pixels, std::span<const double> x, std::span<const double> w,
                          std::span<const double> dy, std::span<double> dx, std::span<double> dw) {
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t co = 0; co < out_channels; ++co) {
      for (std::size_t p = 0; p < pixels; ++p) {
        const double grad = dy[(n * out_channels + co) * pixels + p];
        for (std::size_t ci = 0; ci < in_channels; ++ci) {
          if (!dw.empty()) dw[co * in_channels + ci] += grad * x[(n * in_channels + ci) * pixels + p];
          if (!dx.empty()) dx[(n * in_channels + ci) * pixels + p] += grad * w[co * in_channels + ci];
        }
      }
    }
  }
}

}  // namespace reference
}  // namespace mtlnas::kernels
