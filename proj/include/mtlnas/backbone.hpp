#pragma once

// Fixed-topology single-task convolutional backbones. Every conv layer is
// conv3x3 -> norm -> ReLU; its post-activation output is one node of the
// fusion search space. The first stage keeps the input resolution and every
// later stage starts with a stride-2 convolution.

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "mtlnas/ops.hpp"
#include "mtlnas/optim.hpp"
#include "mtlnas/taskdata.hpp"

namespace mtlnas {

enum class TaskId { kA = 0, kB = 1 };
enum class HeadKind { kClassifier, kVectorRegressor };
enum class NormMode { kAffine, kBatchStats };

const char* task_name(TaskId task);
TaskId other_task(TaskId task);

struct StageSpec {
  std::size_t layers = 2;
  std::size_t channels = 8;
  friend bool operator==(const StageSpec&, const StageSpec&) = default;
};

struct BackboneSpec {
  std::vector<StageSpec> stages{{2, 8}, {2, 16}, {2, 32}};
  std::size_t in_channels = 3;
  HeadKind head = HeadKind::kClassifier;
  std::size_t classes = 4;
  NormMode norm = NormMode::kAffine;

  std::size_t num_layers() const;
  std::size_t stage_of(std::size_t layer) const;
  std::size_t index_in_stage(std::size_t layer) const;
  std::size_t channels_of(std::size_t layer) const;
  std::size_t input_channels_of(std::size_t layer) const;
  std::size_t stride_of(std::size_t layer) const;
  /// Spatial size of a layer's output for the given input size.
  std::size_t spatial_of(std::size_t layer, std::size_t input_size) const;
  std::size_t head_channels() const { return head == HeadKind::kClassifier ? classes : 2; }

  /// Throws if the spec is malformed or the input size is not divisible by
  /// 2^(stages-1).
  void validate(std::size_t height, std::size_t width) const;

  friend bool operator==(const BackboneSpec&, const BackboneSpec&) = default;
};

/// Toy topology (3 stages x 2 layers, channels 8/16/32) for the given head.
BackboneSpec toy_backbone(HeadKind head, std::size_t classes);

struct ConvLayer {
  Tensor weight;  // [Co, Ci, 3, 3]
  Tensor bias;    // [Co]
  Tensor norm_scale;
  Tensor norm_shift;
  BatchNormState stats;
};

struct BackboneParams {
  std::vector<ConvLayer> layers;
  Tensor head_weight;  // [out, C_last, 1, 1]
  Tensor head_bias;    // [out]

  /// Trainable tensors in a fixed order (layer-major, then head).
  std::vector<Tensor*> parameters();
  std::vector<std::string> parameter_names(const std::string& prefix) const;
};

BackboneParams init_backbone(const BackboneSpec& spec, std::uint64_t seed);

/// Tape leaves mirroring BackboneParams.
struct BackboneVars {
  std::vector<std::array<Var, 4>> layers;  // weight, bias, norm_scale, norm_shift
  Var head_weight;
  Var head_bias;

  /// Same order as BackboneParams::parameters().
  std::vector<Var> all() const;
};

BackboneVars bind_backbone(Tape& tape, BackboneParams& params, bool requires_grad);

/// One conv -> norm -> ReLU layer.
Var layer_forward(const BackboneSpec& spec, const BackboneVars& vars, BackboneParams& params, std::size_t layer,
                  Var input, bool training);

/// 1x1 head on the final feature, bilinearly upsampled to (height, width).
Var head_forward(const BackboneSpec& spec, const BackboneVars& vars, Var feature, std::size_t height,
                 std::size_t width);

/// Per-task loss: softmax cross-entropy for classifiers, cosine loss for vector regressors.
Var task_loss(const BackboneSpec& spec, Var output, const Batch& batch);

struct NodeFeatures {
  std::vector<Tensor> features;  // one post-activation map per layer
  Tensor output;                 // head output
};

NodeFeatures forward_collect(const BackboneSpec& spec, BackboneParams& params, const Tensor& input);

struct PretrainOptions {
  std::size_t steps = 2000;
  double lr = 0.05;
  std::size_t batch_size = 8;
  SgdOptions sgd{};
  std::uint64_t seed = 1;
};

/// Trains a single backbone on its own task from `init` with SGD and poly decay.
BackboneParams pretrain_single_task(const BackboneSpec& spec, BackboneParams init, const Dataset& train,
                                    const PretrainOptions& options);

/// Mean task loss over the whole dataset.
double single_task_loss(const BackboneSpec& spec, BackboneParams& params, const Dataset& data);

}  // namespace mtlnas
