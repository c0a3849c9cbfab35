#include "mtlnas/fusion.hpp"

#include <cmath>

#include "mtlnas/rng.hpp"

namespace mtlnas {

Tensor rectangular_identity(std::size_t out, std::size_t in) {
  if (out == 0 || in == 0) throw Error("rectangular_identity: dimensions must be positive");
  Tensor t(Shape{out, in}, 0.0);
  for (std::size_t i = 0; i < std::min(out, in); ++i) t[i * in + i] = 1.0;
  return t;
}

std::size_t FusionNode::column_offset(std::size_t k) const {
  std::size_t offset = channels;
  for (std::size_t i = 0; i < k; ++i) offset += source_channels[i];
  return offset;
}

namespace {

FusionNode empty_node(const SearchSpace& space, TaskId task, std::size_t layer) {
  FusionNode node;
  node.task = task;
  node.layer = layer;
  node.channels = space.spec(task).channels_of(layer);
  node.edges = space.sources_of(task, layer);
  for (std::size_t e : node.edges) {
    const CandidateEdge& edge = space.edges()[e];
    node.source_channels.push_back(space.spec(edge.source.task).channels_of(edge.source.layer));
  }
  node.weight = Tensor(Shape{node.channels, node.column_offset(node.edges.size())}, 0.0);
  node.norm_scale = Tensor(Shape{node.channels}, 1.0);
  node.norm_shift = Tensor(Shape{node.channels}, 0.0);
  node.stats = BatchNormState::identity(node.channels);
  return node;
}

void place_block(Tensor& w, std::size_t col, const Tensor& block, double factor) {
  const std::size_t cols = w.dim(1), rows = block.dim(0), inner = block.dim(1);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < inner; ++c) w[r * cols + col + c] = factor * block[r * inner + c];
}

}  // namespace

FusionNode init_fusion(const SearchSpace& space, TaskId task, std::size_t layer, double w_ti) {
  if (!(w_ti >= 0.0 && w_ti <= 1.0)) throw Error("init_fusion: w_TI must lie in [0, 1]");
  FusionNode node = empty_node(space, task, layer);
  const std::size_t j = node.edges.size();
  node.w_ti = w_ti;
  node.w_to = j == 0 ? 0.0 : (1.0 - w_ti) / static_cast<double>(j);
  place_block(node.weight, 0, rectangular_identity(node.channels, node.channels), node.w_ti);
  for (std::size_t k = 0; k < j; ++k) {
    place_block(node.weight, node.column_offset(k), rectangular_identity(node.channels, node.source_channels[k]),
                node.w_to);
  }
  return node;
}

const FusionNode* FusionParams::find(TaskId task, std::size_t layer) const {
  const std::size_t layers = lookup.size() / 2;
  const std::ptrdiff_t idx = lookup.at(static_cast<std::size_t>(task) * layers + layer);
  return idx < 0 ? nullptr : &nodes[static_cast<std::size_t>(idx)];
}

FusionNode* FusionParams::find(TaskId task, std::size_t layer) {
  return const_cast<FusionNode*>(static_cast<const FusionParams*>(this)->find(task, layer));
}

std::vector<Tensor*> FusionParams::parameters() {
  std::vector<Tensor*> out;
  for (FusionNode& n : nodes) {
    out.push_back(&n.weight);
    out.push_back(&n.norm_scale);
    out.push_back(&n.norm_shift);
  }
  return out;
}

std::vector<std::string> FusionParams::parameter_names() const {
  std::vector<std::string> out;
  for (const FusionNode& n : nodes) {
    const std::string base = std::string("fusion.T") + task_name(n.task) + "_l" + std::to_string(n.layer);
    out.push_back(base + ".weight");
    out.push_back(base + ".norm_scale");
    out.push_back(base + ".norm_shift");
  }
  return out;
}

namespace {

template <typename MakeNode>
FusionParams build_params(const SearchSpace& space, MakeNode make) {
  FusionParams params;
  const std::size_t n = space.num_layers();
  params.lookup.assign(2 * n, -1);
  for (TaskId task : {TaskId::kA, TaskId::kB}) {
    for (std::size_t l = 0; l < n; ++l) {
      if (space.sources_of(task, l).empty()) continue;
      params.lookup[static_cast<std::size_t>(task) * n + l] = static_cast<std::ptrdiff_t>(params.nodes.size());
      params.nodes.push_back(make(task, l));
    }
  }
  return params;
}

}  // namespace

FusionParams init_fusion_params(const SearchSpace& space, double w_ti) {
  return build_params(space, [&](TaskId task, std::size_t l) { return init_fusion(space, task, l, w_ti); });
}

FusionParams init_fusion_params_random(const SearchSpace& space, std::uint64_t seed) {
  Rng rng(derive_seed(seed, {tag(Stream::kInit), 0xf0}));
  return build_params(space, [&](TaskId task, std::size_t l) {
    FusionNode node = empty_node(space, task, l);
    node.w_ti = std::nan("");
    node.w_to = std::nan("");
    const double std_dev = 1.0 / std::sqrt(static_cast<double>(node.weight.dim(1)));
    for (double& v : node.weight.data()) v = std_dev * rng.normal();
    return node;
  });
}

FusionVars bind_fusion(Tape& tape, FusionNode& node, bool requires_grad) {
  return FusionVars{tape.leaf(node.weight, requires_grad), tape.leaf(node.norm_scale, requires_grad),
                    tape.leaf(node.norm_shift, requires_grad)};
}

namespace {

void check_sources(const char* op, const Tensor& f_ti, std::size_t count, const FusionNode& node) {
  if (count != node.edges.size()) {
    throw ShapeError(std::string(op) + ": " + std::to_string(count) + " sources for a node with " +
                     std::to_string(node.edges.size()) + " edges");
  }
  if (f_ti.rank() != 4 || f_ti.dim(1) != node.channels) {
    throw ShapeError(std::string(op) + ": task-identical feature " + to_string(f_ti.shape()) + " does not have " +
                     std::to_string(node.channels) + " channels");
  }
}

Var normalize(Var x, const FusionVars& vars, FusionNode& node, NormMode norm, bool training) {
  return norm == NormMode::kAffine ? channel_affine(x, vars.norm_scale, vars.norm_shift)
                                   : batch_norm(x, vars.norm_scale, vars.norm_shift, node.stats, training);
}

}  // namespace

Var forward_fuse(Var f_ti, std::span<const Var> sources, Var multipliers, FusionNode& node, const FusionVars& vars,
                 NormMode norm, bool training) {
  check_sources("forward_fuse", f_ti.value(), sources.size(), node);
  const std::size_t h = f_ti.shape()[2], w = f_ti.shape()[3];
  std::vector<Var> parts{f_ti};
  for (std::size_t k = 0; k < sources.size(); ++k) {
    if (sources[k].shape()[1] != node.source_channels[k]) {
      throw ShapeError("forward_fuse: source " + std::to_string(k) + " has " + std::to_string(sources[k].shape()[1]) +
                       " channels, W block expects " + std::to_string(node.source_channels[k]));
    }
    Var s = sources[k];
    if (s.shape()[2] != h || s.shape()[3] != w) s = bilinear_resize(s, h, w);
    parts.push_back(scale_by_element(s, multipliers, node.edges[k]));
  }
  Var mixed = channel_mix(concat_channels(parts), vars.weight);
  return relu(normalize(mixed, vars, node, norm, training));
}

Tensor forward_fuse_pruned(const Tensor& f_ti, std::span<const Tensor> sources, const DiscreteArchitecture& arch,
                           FusionNode& node, NormMode norm) {
  check_sources("forward_fuse_pruned", f_ti, sources.size(), node);
  Tape tape;
  const std::size_t h = f_ti.dim(2), w = f_ti.dim(3);
  std::vector<Var> parts{tape.constant(f_ti)};
  std::vector<std::size_t> columns;
  for (std::size_t c = 0; c < node.channels; ++c) columns.push_back(c);
  for (std::size_t k = 0; k < sources.size(); ++k) {
    if (!arch.bits.at(node.edges[k])) continue;
    Var s = tape.constant(sources[k]);
    if (sources[k].dim(2) != h || sources[k].dim(3) != w) s = bilinear_resize(s, h, w);
    parts.push_back(s);
    for (std::size_t c = 0; c < node.source_channels[k]; ++c) columns.push_back(node.column_offset(k) + c);
  }
  Tensor kept(Shape{node.channels, columns.size()});
  const std::size_t full = node.weight.dim(1);
  for (std::size_t r = 0; r < node.channels; ++r)
    for (std::size_t c = 0; c < columns.size(); ++c) kept[r * columns.size() + c] = node.weight[r * full + columns[c]];
  FusionVars vars{tape.constant(kept), tape.constant(node.norm_scale), tape.constant(node.norm_shift)};
  Var mixed = channel_mix(concat_channels(parts), vars.weight);
  return relu(normalize(mixed, vars, node, norm, false)).value();
}

std::vector<Tensor*> MultiTaskModel::theta() {
  std::vector<Tensor*> out = backbone_a.parameters();
  for (Tensor* t : backbone_b.parameters()) out.push_back(t);
  for (Tensor* t : fusion.parameters()) out.push_back(t);
  return out;
}

std::vector<std::string> MultiTaskModel::theta_names() const {
  std::vector<std::string> out = backbone_a.parameter_names("A");
  for (auto& s : backbone_b.parameter_names("B")) out.push_back(std::move(s));
  for (auto& s : fusion.parameter_names()) out.push_back(std::move(s));
  return out;
}

std::size_t MultiTaskModel::backbone_param_count() const {
  return 2 * (4 * space.num_layers() + 2);
}

MultiTaskModel make_model(SearchSpace space, BackboneParams a, BackboneParams b, double w_ti, NormMode fusion_norm) {
  MultiTaskModel model;
  model.fusion = init_fusion_params(space, w_ti);
  model.space = std::move(space);
  model.backbone_a = std::move(a);
  model.backbone_b = std::move(b);
  model.fusion_norm = fusion_norm;
  return model;
}

std::vector<Var> ModelVars::theta() const {
  std::vector<Var> out = a.all();
  for (const Var& v : b.all()) out.push_back(v);
  for (const FusionVars& f : fusion) {
    out.push_back(f.weight);
    out.push_back(f.norm_scale);
    out.push_back(f.norm_shift);
  }
  return out;
}

ModelVars bind_model(Tape& tape, MultiTaskModel& model, bool requires_grad) {
  ModelVars vars;
  vars.a = bind_backbone(tape, model.backbone_a, requires_grad);
  vars.b = bind_backbone(tape, model.backbone_b, requires_grad);
  for (FusionNode& node : model.fusion.nodes) vars.fusion.push_back(bind_fusion(tape, node, requires_grad));
  return vars;
}

TaskOutputs forward_model(Tape& tape, MultiTaskModel& model, const ModelVars& vars, Var multipliers,
                          const Tensor& input, bool training) {
  if (multipliers.value().size() != model.space.size()) {
    throw ShapeError("forward_model: " + std::to_string(multipliers.value().size()) + " multipliers for " +
                     std::to_string(model.space.size()) + " edges");
  }
  const std::size_t n = model.space.num_layers();
  Var x_in = tape.constant(input);
  // pre[t][l]: pre-fusion feature F; the fused output feeds layer l + 1.
  std::vector<Var> pre[2];
  Var flow[2] = {x_in, x_in};
  const BackboneVars* bvars[2] = {&vars.a, &vars.b};
  for (std::size_t l = 0; l < n; ++l) {
    for (TaskId t : {TaskId::kA, TaskId::kB}) {
      const auto ti = static_cast<std::size_t>(t);
      pre[ti].push_back(layer_forward(model.spec(t), *bvars[ti], model.backbone(t), l, flow[ti], training));
    }
    for (TaskId t : {TaskId::kA, TaskId::kB}) {
      const auto ti = static_cast<std::size_t>(t);
      const std::ptrdiff_t idx = model.fusion.lookup[ti * n + l];
      if (idx < 0) {
        flow[ti] = pre[ti][l];
        continue;
      }
      FusionNode& node = model.fusion.nodes[static_cast<std::size_t>(idx)];
      std::vector<Var> sources;
      for (std::size_t e : node.edges) {
        const CandidateEdge& edge = model.space.edges()[e];
        sources.push_back(pre[static_cast<std::size_t>(edge.source.task)][edge.source.layer]);
      }
      flow[ti] = forward_fuse(pre[ti][l], sources, multipliers, node, vars.fusion[static_cast<std::size_t>(idx)],
                              model.fusion_norm, training);
    }
  }
  const std::size_t h = input.dim(2), w = input.dim(3);
  return TaskOutputs{head_forward(model.spec(TaskId::kA), vars.a, flow[0], h, w),
                     head_forward(model.spec(TaskId::kB), vars.b, flow[1], h, w)};
}

namespace {

Tensor bits_as_multipliers(const DiscreteArchitecture& arch, std::size_t edges) {
  if (arch.size() != edges) {
    throw ShapeError("architecture has " + std::to_string(arch.size()) + " bits for " + std::to_string(edges) +
                     " edges");
  }
  Tensor m(Shape{edges}, 0.0);
  for (std::size_t e = 0; e < edges; ++e) m[e] = arch.bits[e] ? 1.0 : 0.0;
  return m;
}

}  // namespace

OutputValues forward_discrete(MultiTaskModel& model, const DiscreteArchitecture& arch, const Tensor& input) {
  Tape tape;
  ModelVars vars = bind_model(tape, model, false);
  Var m = tape.constant(bits_as_multipliers(arch, model.space.size()));
  TaskOutputs out = forward_model(tape, model, vars, m, input, false);
  return OutputValues{out.a.value(), out.b.value()};
}

OutputValues forward_pruned(MultiTaskModel& model, const DiscreteArchitecture& arch, const Tensor& input) {
  if (arch.size() != model.space.size()) throw ShapeError("forward_pruned: architecture size mismatch");
  const std::size_t n = model.space.num_layers();
  Tape tape;
  ModelVars vars = bind_model(tape, model, false);
  std::vector<Tensor> pre[2];
  Tensor flow[2] = {input, input};
  const BackboneVars* bvars[2] = {&vars.a, &vars.b};
  for (std::size_t l = 0; l < n; ++l) {
    for (TaskId t : {TaskId::kA, TaskId::kB}) {
      const auto ti = static_cast<std::size_t>(t);
      Var x = tape.constant(flow[ti]);
      pre[ti].push_back(layer_forward(model.spec(t), *bvars[ti], model.backbone(t), l, x, false).value());
    }
    for (TaskId t : {TaskId::kA, TaskId::kB}) {
      const auto ti = static_cast<std::size_t>(t);
      FusionNode* node = model.fusion.find(t, l);
      if (node == nullptr) {
        flow[ti] = pre[ti][l];
        continue;
      }
      std::vector<Tensor> sources;
      for (std::size_t e : node->edges) {
        const CandidateEdge& edge = model.space.edges()[e];
        sources.push_back(pre[static_cast<std::size_t>(edge.source.task)][edge.source.layer]);
      }
      flow[ti] = forward_fuse_pruned(pre[ti][l], sources, arch, *node, model.fusion_norm);
    }
  }
  const std::size_t h = input.dim(2), w = input.dim(3);
  return OutputValues{head_forward(model.spec(TaskId::kA), vars.a, tape.constant(flow[0]), h, w).value(),
                      head_forward(model.spec(TaskId::kB), vars.b, tape.constant(flow[1]), h, w).value()};
}

LossParts task_losses(const MultiTaskModel& model, const TaskOutputs& out, const Batch& batch, double lambda) {
  Var la = task_loss(model.spec(TaskId::kA), out.a, batch);
  Var lb = task_loss(model.spec(TaskId::kB), out.b, batch);
  return LossParts{add(la, scale(lb, lambda)), la, lb};
}

}  // namespace mtlnas
