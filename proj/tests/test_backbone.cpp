#include <doctest.h>

#include <algorithm>

#include "gradcheck.hpp"
#include "mtlnas/backbone.hpp"
#include "mtlnas/evalharness.hpp"

using namespace mtlnas;

namespace {

Tensor random_input(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t(Shape{n, 3, 16, 16});
  for (double& v : t.data()) v = rng.uniform();
  return t;
}

bool params_equal(BackboneParams& a, BackboneParams& b) {
  auto pa = a.parameters(), pb = b.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i)
    if (!(*pa[i] == *pb[i])) return false;
  return true;
}

}  // namespace

TEST_CASE("toy backbone feature sizes follow the stage layout") {
  const BackboneSpec spec = toy_backbone(HeadKind::kClassifier, 4);
  BackboneParams p = init_backbone(spec, 1);
  const NodeFeatures f = forward_collect(spec, p, random_input(2, 1));
  REQUIRE(f.features.size() == 6);
  const std::size_t sizes[] = {16, 16, 8, 8, 4, 4};
  const std::size_t channels[] = {8, 8, 16, 16, 32, 32};
  for (std::size_t l = 0; l < 6; ++l) {
    CHECK(f.features[l].shape() == Shape{2, channels[l], sizes[l], sizes[l]});
    CHECK(spec.spatial_of(l, 16) == sizes[l]);
  }
  CHECK(f.output.shape() == Shape{2, 4, 16, 16});
}

TEST_CASE("vector head emits two channels") {
  const BackboneSpec spec = toy_backbone(HeadKind::kVectorRegressor, 4);
  BackboneParams p = init_backbone(spec, 1);
  CHECK(forward_collect(spec, p, random_input(1, 2)).output.shape() == Shape{1, 2, 16, 16});
}

TEST_CASE("features are nonnegative and deterministic") {
  const BackboneSpec spec = toy_backbone(HeadKind::kClassifier, 4);
  BackboneParams p = init_backbone(spec, 5);
  const Tensor x = random_input(2, 3);
  const NodeFeatures a = forward_collect(spec, p, x);
  const NodeFeatures b = forward_collect(spec, p, x);
  for (std::size_t l = 0; l < a.features.size(); ++l) {
    CHECK(a.features[l] == b.features[l]);
    for (double v : a.features[l].data()) CHECK(v >= 0.0);
  }
  CHECK(a.output == b.output);
}

TEST_CASE("zero input with zero offsets gives zero features") {
  const BackboneSpec spec = toy_backbone(HeadKind::kClassifier, 4);
  BackboneParams p = init_backbone(spec, 1);
  for (ConvLayer& l : p.layers) {
    l.bias = Tensor(l.bias.shape(), 0.0);
    l.norm_shift = Tensor(l.norm_shift.shape(), 0.0);
  }
  const NodeFeatures f = forward_collect(spec, p, Tensor(Shape{1, 3, 16, 16}, 0.0));
  for (const Tensor& t : f.features)
    for (double v : t.data()) CHECK(v == 0.0);
}

TEST_CASE("spec validation") {
  BackboneSpec spec = toy_backbone(HeadKind::kClassifier, 4);
  CHECK_NOTHROW(spec.validate(16, 16));
  CHECK_THROWS_AS(spec.validate(18, 16), Error);
  spec.stages.clear();
  CHECK_THROWS_AS(spec.validate(16, 16), Error);
  spec = toy_backbone(HeadKind::kClassifier, 4);
  spec.stages[1].channels = 0;
  CHECK_THROWS_AS(spec.validate(16, 16), Error);
}

TEST_CASE("stride and layer bookkeeping") {
  const BackboneSpec spec = toy_backbone(HeadKind::kClassifier, 4);
  CHECK(spec.num_layers() == 6);
  CHECK(spec.stride_of(0) == 1);
  CHECK(spec.stride_of(2) == 2);
  CHECK(spec.stride_of(3) == 1);
  CHECK(spec.stage_of(3) == 1);
  CHECK(spec.index_in_stage(3) == 1);
  CHECK(spec.input_channels_of(0) == 3);
  CHECK(spec.input_channels_of(2) == 8);
}

TEST_CASE("layer forward gradients match finite differences") {
  BackboneSpec spec;
  spec.stages = {{1, 2}, {1, 3}};
  spec.classes = 2;
  BackboneParams p = init_backbone(spec, 4);
  const Tensor x = random_input(1, 9);
  Tensor xs(Shape{1, 3, 4, 4});
  for (std::size_t i = 0; i < xs.size(); ++i) xs[i] = x[i];
  std::vector<Tensor> inputs;
  for (Tensor* t : p.parameters()) inputs.push_back(*t);
  const auto build = [&](Tape& tape, const std::vector<Var>& v) {
    BackboneVars vars;
    for (std::size_t l = 0; l < 2; ++l) vars.layers.push_back({v[4 * l], v[4 * l + 1], v[4 * l + 2], v[4 * l + 3]});
    vars.head_weight = v[8];
    vars.head_bias = v[9];
    Var h = tape.constant(xs);
    for (std::size_t l = 0; l < 2; ++l) h = layer_forward(spec, vars, p, l, h, true);
    Var out = head_forward(spec, vars, h, 4, 4);
    return sum(mul(out, out));
  };
  CHECK(testing::grad_check(build, inputs).max_rel_error <= 1e-4);
}

TEST_CASE("zero pretraining steps return the initialization") {
  const DatasetSplit split = generate(DatasetSpec{});
  const BackboneSpec spec = toy_backbone(HeadKind::kClassifier, 4);
  BackboneParams init = init_backbone(spec, 3);
  PretrainOptions opt;
  opt.steps = 0;
  BackboneParams out = pretrain_single_task(spec, init, split.train, opt);
  CHECK(params_equal(out, init));
}

TEST_CASE("pretraining is deterministic") {
  DatasetSpec ds;
  ds.num_train = 32;
  ds.num_val = 8;
  const DatasetSplit split = generate(ds);
  const BackboneSpec spec = toy_backbone(HeadKind::kVectorRegressor, 4);
  PretrainOptions opt;
  opt.steps = 5;
  BackboneParams a = pretrain_single_task(spec, init_backbone(spec, 3), split.train, opt);
  BackboneParams b = pretrain_single_task(spec, init_backbone(spec, 3), split.train, opt);
  CHECK(params_equal(a, b));
}

TEST_CASE("divergence is reported with the step index") {
  DatasetSpec ds;
  ds.num_train = 32;
  ds.num_val = 8;
  const DatasetSplit split = generate(ds);
  const BackboneSpec spec = toy_backbone(HeadKind::kClassifier, 4);
  PretrainOptions opt;
  opt.steps = 200;
  opt.lr = 1e12;
  CHECK_THROWS_WITH_AS(pretrain_single_task(spec, init_backbone(spec, 3), split.train, opt),
                       doctest::Contains("step"), DivergenceError);
}

TEST_CASE("pretrained segmentation beats the majority-class bar") {
  const DatasetSplit split = generate(DatasetSpec{});
  const BackboneSpec spec = toy_backbone(HeadKind::kClassifier, 4);
  BackboneParams init = init_backbone(spec, 1);
  const double init_loss = single_task_loss(spec, init, split.val);
  BackboneParams p = pretrain_single_task(spec, init, split.train, PretrainOptions{});
  CHECK(single_task_loss(spec, p, split.val) < init_loss);

  // Oracle bar: always predicting the most frequent validation class.
  const std::vector<double> freq = class_frequencies(split.val);
  const double majority = *std::max_element(freq.begin(), freq.end());
  const Batch val = full_batch(split.val);
  const NodeFeatures f = forward_collect(spec, p, val.input);
  const auto conf = confusion_matrix(argmax_labels(f.output), val.labels, 4);
  CHECK(pixel_accuracy(conf, 4) > majority);
}
