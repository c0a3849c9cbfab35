#pragma once

// Inter-task fusion: O_j = ReLU(Norm(W * concat[F_TI, m_0 R(F_0), ..., m_k R(F_k)]))
// with R a bilinear resize to the target resolution and m_k the edge
// multipliers (distribution means, Concrete samples or discrete 0/1). The
// two-task model threads the fused output of every target into the next layer.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mtlnas/backbone.hpp"
#include "mtlnas/searchspace.hpp"

namespace mtlnas {

/// [out, in] with ones on the leading diagonal.
Tensor rectangular_identity(std::size_t out, std::size_t in);

struct FusionNode {
  TaskId task = TaskId::kA;
  std::size_t layer = 0;
  std::size_t channels = 0;
  std::vector<std::size_t> edges;            // concatenation order
  std::vector<std::size_t> source_channels;  // per edge
  Tensor weight;                             // [C, C + sum(source_channels)]
  Tensor norm_scale;
  Tensor norm_shift;
  BatchNormState stats;
  double w_ti = 1.0;
  double w_to = 0.0;

  /// First column of source block k.
  std::size_t column_offset(std::size_t k) const;
};

/// Block layout [w_TI I, w_TO I', ..., w_TO I'] with w_TO = (1 - w_TI) / j and
/// I' a rectangular identity when the channel counts differ.
FusionNode init_fusion(const SearchSpace& space, TaskId task, std::size_t layer, double w_ti);

struct FusionParams {
  std::vector<FusionNode> nodes;
  std::vector<std::ptrdiff_t> lookup;  // [task * layers + layer] -> node index or -1

  const FusionNode* find(TaskId task, std::size_t layer) const;
  FusionNode* find(TaskId task, std::size_t layer);
  std::vector<Tensor*> parameters();
  std::vector<std::string> parameter_names() const;
};

/// One node per target with at least one candidate source.
FusionParams init_fusion_params(const SearchSpace& space, double w_ti);

/// Same layout with W drawn from N(0, 1/fan_in) instead of the block form.
FusionParams init_fusion_params_random(const SearchSpace& space, std::uint64_t seed);

struct FusionVars {
  Var weight;
  Var norm_scale;
  Var norm_shift;
};

FusionVars bind_fusion(Tape& tape, FusionNode& node, bool requires_grad);

/// Relaxed forward; `multipliers` holds one value per edge of the whole space.
Var forward_fuse(Var f_ti, std::span<const Var> sources, Var multipliers, FusionNode& node, const FusionVars& vars,
                 NormMode norm, bool training);

/// Forward of the child network: sources with a zero bit and their W columns
/// are dropped before the channel mix. Values only.
Tensor forward_fuse_pruned(const Tensor& f_ti, std::span<const Tensor> sources, const DiscreteArchitecture& arch,
                           FusionNode& node, NormMode norm);

struct MultiTaskModel {
  SearchSpace space;
  BackboneParams backbone_a;
  BackboneParams backbone_b;
  FusionParams fusion;
  NormMode fusion_norm = NormMode::kAffine;

  const BackboneSpec& spec(TaskId t) const { return space.spec(t); }
  BackboneParams& backbone(TaskId t) { return t == TaskId::kA ? backbone_a : backbone_b; }

  /// theta in a fixed order: backbone A, backbone B, fusion nodes.
  std::vector<Tensor*> theta();
  std::vector<std::string> theta_names() const;
  /// Number of leading theta entries that belong to the backbones.
  std::size_t backbone_param_count() const;
};

MultiTaskModel make_model(SearchSpace space, BackboneParams a, BackboneParams b, double w_ti,
                          NormMode fusion_norm = NormMode::kAffine);

struct ModelVars {
  BackboneVars a;
  BackboneVars b;
  std::vector<FusionVars> fusion;

  /// Same order as MultiTaskModel::theta().
  std::vector<Var> theta() const;
};

ModelVars bind_model(Tape& tape, MultiTaskModel& model, bool requires_grad);

struct TaskOutputs {
  Var a;
  Var b;
};

/// Relaxed supernet forward on a shared input.
TaskOutputs forward_model(Tape& tape, MultiTaskModel& model, const ModelVars& vars, Var multipliers,
                          const Tensor& input, bool training);

struct OutputValues {
  Tensor a;
  Tensor b;
};

/// Relaxed forward with the architecture bits as constant multipliers.
OutputValues forward_discrete(MultiTaskModel& model, const DiscreteArchitecture& arch, const Tensor& input);

/// Forward of the physically pruned child network.
OutputValues forward_pruned(MultiTaskModel& model, const DiscreteArchitecture& arch, const Tensor& input);

struct LossParts {
  Var total;  // loss_a + lambda * loss_b
  Var a;
  Var b;
};

LossParts task_losses(const MultiTaskModel& model, const TaskOutputs& out, const Batch& batch, double lambda);

}  // namespace mtlnas
