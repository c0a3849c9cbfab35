#pragma once

// Dense compute kernels behind the convolution and channel-mix primitives.
//
// The default entry points lower convolution to im2col + GEMM and split the
// output rows across OpenMP threads; every output element is produced by one
// thread with a fixed summation order, so results do not depend on the thread
// count. `kernels::reference` keeps straightforward serial loops that the
// tests and the benchmark compare against.

#include <cstddef>
#include <span>
#include <vector>

namespace mtlnas::kernels {

struct ConvGeometry {
  std::size_t batch = 0;
  std::size_t in_channels = 0;
  std::size_t in_height = 0;
  std::size_t in_width = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t pad = 1;

  std::size_t out_height() const { return (in_height + 2 * pad - kernel) / stride + 1; }
  std::size_t out_width() const { return (in_width + 2 * pad - kernel) / stride + 1; }
  std::size_t patch_size() const { return in_channels * kernel * kernel; }
  std::size_t columns() const { return batch * out_height() * out_width(); }
};

/// C[M,N] (+)= A[M,K] * B[K,N]
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c,
             bool accumulate);
/// C[M,N] (+)= A[K,M]^T * B[K,N]
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c,
             bool accumulate);
/// C[M,N] (+)= A[M,K] * B[N,K]^T
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c,
             bool accumulate);

/// Lays out input patches as a [patch_size, columns] matrix.
void im2col(const ConvGeometry& g, std::span<const double> x, std::span<double> cols);
/// Adjoint of im2col; accumulates into dx.
void col2im(const ConvGeometry& g, std::span<const double> cols, std::span<double> dx);

/// y[N,Co,Ho,Wo] = conv(x[N,Ci,H,W], w[Co,Ci,k,k]) + b[Co]. `cols` receives the
/// im2col buffer, which the backward pass reuses.
void conv2d_forward(const ConvGeometry& g, std::span<const double> x, std::span<const double> w,
                    std::span<const double> b, std::span<double> y, std::vector<double>& cols);

/// Accumulates gradients. Any of dx, dw, db may be empty to skip that output.
void conv2d_backward(const ConvGeometry& g, std::span<const double> cols, std::span<const double> w,
                     std::span<const double> dy, std::span<double> dx, std::span<double> dw,
                     std::span<double> db);

/// 1x1 convolution without offset: y[n] = W[Co,Ci] * x[n], x viewed as [N,Ci,P].
void channel_mix_forward(std::size_t batch, std::size_t in_channels, std::size_t out_channels,
                         std::size_t pixels, std::span<const double> x, std::span<const double> w,
                         std::span<double> y);
void channel_mix_backward(std::size_t batch, std::size_t in_channels, std::size_t out_channels,
                          std::size_t pixels, std::span<const double> x, std::span<const double> w,
                          std::span<const double> dy, std::span<double> dx, std::span<double> dw);

namespace reference {

void conv2d_forward(const ConvGeometry& g, std::span<const double> x, std::span<const double> w,
                    std::span<const double> b, std::span<double> y);
void conv2d_backward(const ConvGeometry& g, std::span<const double> x, std::span<const double> w,
                     std::span<const double> dy, std::span<double> dx, std::span<double> dw,
                     std::span<double> db);
void channel_mix_forward(std::size_t batch, std::size_t in_channels, std::size_t out_channels,
                         std::size_t pixels, std::span<const double> x, std::span<const double> w,
                         std::span<double> y);
void channel_mix_backward(std::size_t batch, std::size_t in_channels, std::size_t out_channels,
                          std::size_t pixels, std::span<const double> x, std::span<const double> w,
                          std::span<const double> dy, std::span<double> dx, std::span<double> dw);

}  // namespace reference

/// Number of OpenMP threads the parallel kernels will use (1 without OpenMP).
int max_threads();

}  // namespace mtlnas::kernels
