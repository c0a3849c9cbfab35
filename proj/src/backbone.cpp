#include "mtlnas/backbone.hpp"

#include <cmath>

#include "mtlnas/rng.hpp"

namespace mtlnas {

const char* task_name(TaskId task) { return task == TaskId::kA ? "A" : "B"; }
TaskId other_task(TaskId task) { return task == TaskId::kA ? TaskId::kB : TaskId::kA; }

std::size_t BackboneSpec::num_layers() const {
  std::size_t n = 0;
  for (const StageSpec& s : stages) n += s.layers;
  return n;
}

std::size_t BackboneSpec::stage_of(std::size_t layer) const {
  for (std::size_t s = 0; s < stages.size(); ++s) {
    if (layer < stages[s].layers) return s;
    layer -= stages[s].layers;
  }
  throw Error("backbone: layer index out of range");
}

std::size_t BackboneSpec::index_in_stage(std::size_t layer) const {
  for (const StageSpec& s : stages) {
    if (layer < s.layers) return layer;
    layer -= s.layers;
  }
  throw Error("backbone: layer index out of range");
}

std::size_t BackboneSpec::channels_of(std::size_t layer) const { return stages[stage_of(layer)].channels; }

std::size_t BackboneSpec::input_channels_of(std::size_t layer) const {
  return layer == 0 ? in_channels : channels_of(layer - 1);
}

std::size_t BackboneSpec::stride_of(std::size_t layer) const {
  return (stage_of(layer) > 0 && index_in_stage(layer) == 0) ? 2 : 1;
}

std::size_t BackboneSpec::spatial_of(std::size_t layer, std::size_t input_size) const {
  return input_size >> stage_of(layer);
}

void BackboneSpec::validate(std::size_t height, std::size_t width) const {
  if (stages.empty()) throw Error("backbone: at least one stage is required");
  for (const StageSpec& s : stages) {
    if (s.layers == 0 || s.channels == 0) throw Error("backbone: stage layers and channels must be positive");
  }
  if (in_channels == 0) throw Error("backbone: in_channels must be positive");
  if (head == HeadKind::kClassifier && classes < 2) throw Error("backbone: classifier head needs >= 2 classes");
  const std::size_t factor = std::size_t{1} << (stages.size() - 1);
  if (height % factor != 0 || width % factor != 0 || height < factor || width < factor) {
    throw Error("backbone: input " + std::to_string(height) + "x" + std::to_string(width) +
                " not divisible by 2^(stages-1) = " + std::to_string(factor));
  }
}

BackboneSpec toy_backbone(HeadKind head, std::size_t classes) {
  BackboneSpec spec;
  spec.head = head;
  spec.classes = classes;
  return spec;
}

std::vector<Tensor*> BackboneParams::parameters() {
  std::vector<Tensor*> out;
  for (ConvLayer& l : layers) {
    out.push_back(&l.weight);
    out.push_back(&l.bias);
    out.push_back(&l.norm_scale);
    out.push_back(&l.norm_shift);
  }
  out.push_back(&head_weight);
  out.push_back(&head_bias);
  return out;
}

std::vector<std::string> BackboneParams::parameter_names(const std::string& prefix) const {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string base = prefix + ".layer" + std::to_string(i);
    out.push_back(base + ".weight");
    out.push_back(base + ".bias");
    out.push_back(base + ".norm_scale");
    out.push_back(base + ".norm_shift");
  }
  out.push_back(prefix + ".head.weight");
  out.push_back(prefix + ".head.bias");
  return out;
}

BackboneParams init_backbone(const BackboneSpec& spec, std::uint64_t seed) {
  Rng rng(derive_seed(seed, {tag(Stream::kInit)}));
  BackboneParams params;
  for (std::size_t l = 0; l < spec.num_layers(); ++l) {
    const std::size_t ci = spec.input_channels_of(l), co = spec.channels_of(l);
    ConvLayer layer;
    layer.weight = Tensor(Shape{co, ci, 3, 3});
    const double std_dev = std::sqrt(2.0 / static_cast<double>(ci * 9));
    for (double& v : layer.weight.data()) v = std_dev * rng.normal();
    layer.bias = Tensor(Shape{co}, 0.0);
    layer.norm_scale = Tensor(Shape{co}, 1.0);
    layer.norm_shift = Tensor(Shape{co}, 0.0);
    layer.stats = BatchNormState::identity(co);
    params.layers.push_back(std::move(layer));
  }
  const std::size_t last = spec.channels_of(spec.num_layers() - 1);
  params.head_weight = Tensor(Shape{spec.head_channels(), last, 1, 1});
  const double head_std = std::sqrt(1.0 / static_cast<double>(last));
  for (double& v : params.head_weight.data()) v = head_std * rng.normal();
  params.head_bias = Tensor(Shape{spec.head_channels()}, 0.0);
  return params;
}

std::vector<Var> BackboneVars::all() const {
  std::vector<Var> out;
  for (const auto& l : layers) out.insert(out.end(), l.begin(), l.end());
  out.push_back(head_weight);
  out.push_back(head_bias);
  return out;
}

BackboneVars bind_backbone(Tape& tape, BackboneParams& params, bool requires_grad) {
  BackboneVars vars;
  for (ConvLayer& l : params.layers) {
    vars.layers.push_back({tape.leaf(l.weight, requires_grad), tape.leaf(l.bias, requires_grad),
                           tape.leaf(l.norm_scale, requires_grad), tape.leaf(l.norm_shift, requires_grad)});
  }
  vars.head_weight = tape.leaf(params.head_weight, requires_grad);
  vars.head_bias = tape.leaf(params.head_bias, requires_grad);
  return vars;
}

Var layer_forward(const BackboneSpec& spec, const BackboneVars& vars, BackboneParams& params, std::size_t layer,
                  Var input, bool training) {
  const auto& v = vars.layers.at(layer);
  Var x = conv2d(input, v[0], v[1], spec.stride_of(layer));
  x = spec.norm == NormMode::kAffine ? channel_affine(x, v[2], v[3])
                                     : batch_norm(x, v[2], v[3], params.layers[layer].stats, training);
  return relu(x);
}

Var head_forward(const BackboneSpec& spec, const BackboneVars& vars, Var feature, std::size_t height,
                 std::size_t width) {
  (void)spec;
  Var logits = conv2d(feature, vars.head_weight, vars.head_bias, 1);
  if (logits.shape()[2] == height && logits.shape()[3] == width) return logits;
  return bilinear_resize(logits, height, width);
}

Var task_loss(const BackboneSpec& spec, Var output, const Batch& batch) {
  if (spec.head == HeadKind::kClassifier) return softmax_cross_entropy(output, batch.labels);
  Var target = output.tape->constant(batch.vec_field);
  return cosine_loss(output, target);
}

NodeFeatures forward_collect(const BackboneSpec& spec, BackboneParams& params, const Tensor& input) {
  if (input.rank() != 4 || input.dim(1) != spec.in_channels) {
    throw ShapeError("forward_collect: input " + to_string(input.shape()) + " incompatible with backbone expecting " +
                     std::to_string(spec.in_channels) + " channels");
  }
  spec.validate(input.dim(2), input.dim(3));
  Tape tape;
  BackboneVars vars = bind_backbone(tape, params, false);
  Var x = tape.constant(input);
  NodeFeatures out;
  for (std::size_t l = 0; l < spec.num_layers(); ++l) {
    x = layer_forward(spec, vars, params, l, x, false);
    out.features.push_back(x.value());
  }
  out.output = head_forward(spec, vars, x, input.dim(2), input.dim(3)).value();
  return out;
}

namespace {

Var single_task_forward_loss(Tape& tape, const BackboneSpec& spec, const BackboneVars& vars, BackboneParams& params,
                             const Batch& batch, bool training) {
  Var x = tape.constant(batch.input);
  for (std::size_t l = 0; l < spec.num_layers(); ++l) x = layer_forward(spec, vars, params, l, x, training);
  Var out = head_forward(spec, vars, x, batch.input.dim(2), batch.input.dim(3));
  return task_loss(spec, out, batch);
}

}  // namespace

BackboneParams pretrain_single_task(const BackboneSpec& spec, BackboneParams params, const Dataset& train,
                                    const PretrainOptions& options) {
  spec.validate(train.spec.height, train.spec.width);
  Sgd sgd(options.sgd);
  for (std::size_t step = 0; step < options.steps; ++step) {
    auto [indices, unused] = disjoint_batch_indices(train.size(), options.batch_size, step, options.seed);
    (void)unused;
    const Batch batch = make_batch(train, indices);
    Tape tape;
    BackboneVars vars = bind_backbone(tape, params, true);
    Var loss = single_task_forward_loss(tape, spec, vars, params, batch, true);
    if (!std::isfinite(loss.value().item())) {
      throw DivergenceError("pretrain: non-finite loss at step " + std::to_string(step));
    }
    tape.backward(loss);
    std::vector<Tensor> grads;
    for (const Var& v : vars.all()) grads.push_back(tape.grad(v));
    auto ptrs = params.parameters();
    sgd.step(ptrs, grads, poly_lr(options.lr, step, options.steps));
  }
  return params;
}

double single_task_loss(const BackboneSpec& spec, BackboneParams& params, const Dataset& data) {
  const Batch batch = full_batch(data);
  Tape tape;
  BackboneVars vars = bind_backbone(tape, params, false);
  return single_task_forward_loss(tape, spec, vars, params, batch, false).value().item();
}

}  // namespace mtlnas
