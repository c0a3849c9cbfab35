#pragma once

// Differentiable primitives recorded on a Tape. Feature maps are rank-4
// [batch, channels, height, width]. Every op validates its operand shapes and
// throws ShapeError naming the op and the offending dimensions.

#include <cstddef>
#include <span>

#include "mtlnas/tape.hpp"
#include "mtlnas/tensor.hpp"

namespace mtlnas {

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
Var add_constant(Var a, const Tensor& offset);
Var sum(Var a);
Var mean(Var a);
Var relu(Var a);
Var sigmoid(Var a);

/// Zero-padded square convolution (padding kernel/2) with per-channel offset.
Var conv2d(Var x, Var weight, Var bias, std::size_t stride);

/// 1x1 convolution without offset; weight is [out_channels, in_channels].
Var channel_mix(Var x, Var weight);

/// Per-channel y = scale[c] * x + shift[c].
Var channel_affine(Var x, Var scale, Var shift);

struct BatchNormState {
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  static BatchNormState identity(std::size_t channels);
};

/// Batch-statistics normalization. In training mode the batch moments are used
/// and the running averages in `state` are updated; otherwise the running
/// averages are used.
Var batch_norm(Var x, Var gamma, Var beta, BatchNormState& state, bool training);

Var concat_channels(std::span<const Var> parts);

/// Bilinear resampling with half-pixel centres:
/// source = (dest + 0.5) * (src_size / dst_size) - 0.5, clamped to the valid range.
Var bilinear_resize(Var x, std::size_t height, std::size_t width);

/// multipliers[index] * x, differentiable in both operands.
Var scale_by_element(Var x, Var multipliers, std::size_t index);

/// Mean over pixels of the softmax cross-entropy; labels are [batch*height*width].
Var softmax_cross_entropy(Var logits, std::span<const int> labels);

/// Mean over pixels of 1 - cos(pred, target), channels as vector components.
Var cosine_loss(Var pred, Var target);

/// Mean of squared differences.
Var squared_error(Var pred, Var target);

/// Sum over elements of the binary entropy of sigmoid(logit).
Var entropy_of_logits(Var logits);

// Scalar helpers shared with the search code.
double stable_sigmoid(double x);
double softplus(double x);

}  // namespace mtlnas
