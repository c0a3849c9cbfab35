#include <doctest.h>

#include <algorithm>
#include <map>
#include <set>
#include <sstream>

#include "mtlnas/evalharness.hpp"

using namespace mtlnas;

namespace {

BackboneSpec spec_with(std::vector<StageSpec> stages, HeadKind head) {
  BackboneSpec s;
  s.stages = std::move(stages);
  s.head = head;
  return s;
}

DatasetSplit small_data() {
  DatasetSpec d;
  d.num_train = 16;
  d.num_val = 4;
  return generate(d);
}

// Four tiny-preset edges: stage-final targets of the second stage.
MultiTaskModel four_edge_model() {
  const BackboneSpec a = spec_with({{2, 2}, {2, 3}}, HeadKind::kClassifier);
  const BackboneSpec b = spec_with({{2, 2}, {2, 3}}, HeadKind::kVectorRegressor);
  return make_model(SearchSpace::build(a, b, ConstraintConfig::from_preset("tiny")), init_backbone(a, 1),
                    init_backbone(b, 2), 0.9);
}

TrainBudget quick_budget() {
  TrainBudget b;
  b.steps = 2;
  b.batch_size = 4;
  return b;
}

}  // namespace

TEST_CASE("confusion-matrix metrics") {
  const std::vector<int> truth{0, 0, 0, 0, 1, 1, 1, 1};
  const std::vector<int> pred{0, 0, 0, 1, 1, 1, 1, 0};
  const auto conf = confusion_matrix(pred, truth, 2);
  CHECK(conf == std::vector<std::size_t>{3, 1, 1, 3});
  CHECK(pixel_accuracy(conf, 2) == doctest::Approx(0.75));
  CHECK(mean_iou(conf, 2) == doctest::Approx(0.6));
  // A class absent from both prediction and truth does not count.
  CHECK(mean_iou(confusion_matrix(pred, truth, 3), 3) == doctest::Approx(0.6));
  CHECK_THROWS_AS(confusion_matrix(std::vector<int>{0}, truth, 2), Error);
}

TEST_CASE("perfect predictions") {
  const std::vector<int> labels{0, 2, 1, 1};
  Tensor logits(Shape{1, 3, 2, 2}, 0.0);
  for (std::size_t p = 0; p < 4; ++p) logits[static_cast<std::size_t>(labels[p]) * 4 + p] = 5.0;
  CHECK(argmax_labels(logits) == labels);
  MetricsReport m;
  fill_segmentation_metrics(m, logits, labels, 3);
  CHECK(m.pixel_accuracy == 1.0);
  CHECK(m.mean_iou == 1.0);

  Tensor field(Shape{1, 2, 2, 2}, 0.0);
  for (std::size_t p = 0; p < 4; ++p) field[p] = 1.0;
  fill_angle_metrics(m, angular_errors(field, field));
  CHECK(m.mean_angle == 0.0);
  CHECK(m.median_angle == 0.0);
  CHECK(m.within_11_25 == 1.0);
  CHECK(m.within_22_5 == 1.0);
  CHECK(m.within_30 == 1.0);
}

TEST_CASE("orthogonal vector predictions") {
  Tensor pred(Shape{2, 2, 2, 2}, 0.0), target(Shape{2, 2, 2, 2}, 0.0);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t p = 0; p < 4; ++p) {
      pred[n * 8 + p] = 1.0;        // (1, 0)
      target[n * 8 + 4 + p] = 1.0;  // (0, 1)
    }
  MetricsReport m;
  fill_angle_metrics(m, angular_errors(pred, target));
  CHECK(m.mean_angle == doctest::Approx(90.0));
  CHECK(m.median_angle == doctest::Approx(90.0));
  CHECK(m.within_11_25 == 0.0);
  CHECK(m.within_22_5 == 0.0);
  CHECK(m.within_30 == 0.0);
}

TEST_CASE("angle thresholds and even-count median") {
  MetricsReport m;
  fill_angle_metrics(m, {5.0, 11.25, 20.0, 40.0});
  CHECK(m.median_angle == doctest::Approx(15.625));
  CHECK(m.mean_angle == doctest::Approx(19.0625));
  CHECK(m.within_11_25 == 0.5);
  CHECK(m.within_22_5 == 0.75);
  CHECK(m.within_30 == 0.75);
}

TEST_CASE("alpha histogram bins") {
  const auto mid = alpha_histogram(Tensor(Shape{5}, 0.5));
  CHECK(mid[12] == 5);
  const auto ends = alpha_histogram(Tensor(Shape{4}, std::vector<double>{0.0, 1.0, 1.0, 0.0}));
  CHECK(ends[0] == 2);
  CHECK(ends[24] == 2);
  const auto three = alpha_histogram(Tensor(Shape{3}, std::vector<double>{0.02, 0.5, 0.98}));
  for (std::size_t k = 0; k < kHistogramBins; ++k) CHECK(three[k] == (k == 0 || k == 12 || k == 24 ? 1u : 0u));
  const auto edge = alpha_histogram(Tensor(Shape{2}, std::vector<double>{0.04, 0.96}));
  CHECK(edge[1] == 1);
  CHECK(edge[24] == 1);
  CHECK_THROWS_AS(alpha_histogram(Tensor(Shape{1}, 1.5)), Error);
}

TEST_CASE("uniform architecture sampling") {
  Rng rng(17);
  std::map<std::string, std::size_t> counts;
  const std::size_t draws = 10000;
  for (std::size_t i = 0; i < draws; ++i) ++counts[sample_uniform_architecture(4, rng).to_string()];
  CHECK(counts.size() == 16);
  for (const auto& [arch, c] : counts) CHECK(std::abs(static_cast<double>(c) / draws - 1.0 / 16.0) <= 0.01);
}

TEST_CASE("random search keeps the first minimum") {
  const auto score = [](const DiscreteArchitecture& a) { return static_cast<double>(a.count()); };
  const RandomSearchResult r = random_search(6, 8, 3, score);
  CHECK(r.sampled.size() == 8);
  const double best = *std::min_element(r.losses.begin(), r.losses.end());
  CHECK(r.best_loss == best);
  const auto first = std::find(r.losses.begin(), r.losses.end(), best) - r.losses.begin();
  CHECK(r.best == r.sampled[static_cast<std::size_t>(first)]);
  CHECK(random_search(6, 1, 3, score).best == r.sampled[0]);
  CHECK(random_search(6, 8, 3, score).sampled == r.sampled);
  CHECK_THROWS_AS(random_search(6, 0, 3, score), Error);

  const RandomSearchResult none = random_search(0, 1, 3, score);
  CHECK(none.best.size() == 0);
}

TEST_CASE("oracle on a zero-edge space has one entry") {
  const BackboneSpec a = spec_with({{1, 2}, {1, 3}}, HeadKind::kClassifier);
  const BackboneSpec b = spec_with({{1, 2}, {1, 3}}, HeadKind::kVectorRegressor);
  const MultiTaskModel model =
      make_model(SearchSpace::from_pairs(a, b, {}), init_backbone(a, 1), init_backbone(b, 2), 1.0);
  const DatasetSplit data = small_data();
  const OracleRanking r = oracle_enumerate(model, data.train, data.val, quick_budget());
  REQUIRE(r.size() == 1);
  CHECK(r[0].arch.size() == 0);
  CHECK(r[0].rank == 1);
  const TrainedRandomSearch rs = random_search_trained(model, 1, data.train, data.val, quick_budget());
  CHECK(rs.search.best.size() == 0);
  CHECK(rs.metrics.combined_loss == r[0].val_loss);
}

TEST_CASE("oracle ranking is a reproducible permutation") {
  const MultiTaskModel model = four_edge_model();
  REQUIRE(model.space.size() == 4);
  const DatasetSplit data = small_data();
  const OracleRanking r = oracle_enumerate(model, data.train, data.val, quick_budget());
  REQUIRE(r.size() == 16);
  std::set<std::string> seen;
  for (std::size_t i = 0; i < r.size(); ++i) {
    CHECK(r[i].rank == i + 1);
    CHECK(seen.insert(r[i].arch.to_string()).second);
    if (i > 0) CHECK(r[i - 1].val_loss <= r[i].val_loss);
  }
  const OracleRanking again = oracle_enumerate(model, data.train, data.val, quick_budget());
  for (std::size_t i = 0; i < r.size(); ++i) {
    CHECK(again[i].arch == r[i].arch);
    CHECK(again[i].val_loss == r[i].val_loss);
  }
  CHECK(oracle_rank(r, r[3].arch) == 4);
  CHECK(oracle_loss(r, r[3].arch) == r[3].val_loss);
  CHECK_THROWS_AS(oracle_rank(r, DiscreteArchitecture::all(5, true)), Error);

  std::ostringstream csv;
  write_oracle_csv(csv, r);
  CHECK(csv.str().rfind("architecture,val_loss,rank\n", 0) == 0);

  // Best-of-8 over the oracle can never lose to its own first sample.
  const auto lookup = [&](const DiscreteArchitecture& a) { return oracle_loss(r, a); };
  CHECK(random_search(4, 8, 1, lookup).best_loss <= random_search(4, 1, 1, lookup).best_loss);
}

TEST_CASE("oracle refuses large spaces") {
  const BackboneSpec a = toy_backbone(HeadKind::kClassifier, 4), b = toy_backbone(HeadKind::kVectorRegressor, 4);
  const MultiTaskModel model = make_model(SearchSpace::build(a, b, ConstraintConfig::from_preset("constrained")),
                                          init_backbone(a, 1), init_backbone(b, 2), 1.0);
  const DatasetSplit data = small_data();
  CHECK_THROWS_AS(oracle_enumerate(model, data.train, data.val, quick_budget()), Error);
}

TEST_CASE("supernet baselines switch on the expected edges") {
  const BackboneSpec a = toy_backbone(HeadKind::kClassifier, 4), b = toy_backbone(HeadKind::kVectorRegressor, 4);
  const SearchSpace space = SearchSpace::build(a, b, ConstraintConfig::from_preset("constrained"));
  const BackboneParams pa = init_backbone(a, 1), pb = init_backbone(b, 2);
  const DatasetSplit data = small_data();
  TrainBudget budget = quick_budget();
  budget.steps = 1;
  const BaselineResult all = supernet_baseline("all-edges", space, pa, pb, 1.0, data.train, data.val, budget);
  CHECK(all.arch.size() == 18);
  CHECK(all.arch.count() == 18);
  const BaselineResult level = supernet_baseline("same-level", space, pa, pb, 1.0, data.train, data.val, budget);
  CHECK(level.arch.size() == 12);
  CHECK(level.arch.count() == 12);
  const BaselineResult none = supernet_baseline("none", space, pa, pb, 1.0, data.train, data.val, budget);
  CHECK(none.arch.count() == 0);
  CHECK(std::isfinite(none.metrics.combined_loss));
  CHECK_THROWS_AS(supernet_baseline("half", space, pa, pb, 1.0, data.train, data.val, budget), Error);
}

TEST_CASE("evaluation is deterministic and fixed-architecture training reduces loss") {
  MultiTaskModel model = four_edge_model();
  const DatasetSplit data = small_data();
  const DiscreteArchitecture arch = DiscreteArchitecture::from_string("1010");
  const MetricsReport before = evaluate(model, arch, data.train, 1.0);
  CHECK(evaluate(model, arch, data.train, 1.0).combined_loss == before.combined_loss);
  TrainBudget budget = quick_budget();
  budget.steps = 40;
  budget.lr = 0.05;
  MultiTaskModel trained = train_fixed(model, arch, data.train, budget);
  CHECK(evaluate(trained, arch, data.train, 1.0).combined_loss < before.combined_loss);
  CHECK(before.combined_loss == doctest::Approx(before.loss_a + before.loss_b).epsilon(1e-14));
}

TEST_CASE("better_than orders by loss then mIoU") {
  MetricsReport x, y;
  x.combined_loss = 1.0;
  y.combined_loss = 2.0;
  CHECK(better_than(x, y));
  y.combined_loss = 1.0;
  x.mean_iou = 0.4;
  y.mean_iou = 0.3;
  CHECK(better_than(x, y));
  CHECK_FALSE(better_than(y, x));
}

TEST_CASE("ablation grid layout and determinism") {
  const MultiTaskModel base = four_edge_model();
  const DatasetSplit data = small_data();
  AblationSpec spec;
  spec.axes = {"w_ti", "relaxation", "lr_scale"};
  spec.seeds = {1, 2};
  spec.search.steps = 2;
  spec.search.batch_size = 4;
  spec.search.gap_every = 0;
  spec.random_budget = quick_budget();
  spec.random_k = 2;
  std::size_t calls = 0;
  const FixtureProvider provider = [&](std::uint64_t) {
    ++calls;
    return Fixture{data, base.backbone_a, base.backbone_b};
  };
  const auto cells = run_ablation(spec, base.space, provider);
  CHECK(calls == 2);
  REQUIRE(cells.size() == 2 * (8 + 9 + 4));
  std::map<std::string, std::size_t> per_axis;
  for (const AblationCell& c : cells) {
    CHECK(c.status == "ok");
    CHECK(c.architecture.size() == 4);
    if (c.seed == 1) ++per_axis[c.axis];
  }
  CHECK(per_axis["w_ti"] == 8);
  CHECK(per_axis["relaxation"] == 9);
  CHECK(per_axis["lr_scale"] == 4);
  CHECK(cells[0].key == "w_ti=0");
  CHECK(cells[5].key == "w_ti=0.9");
  CHECK(cells[7].key == "w_ti=random");
  CHECK(cells[8].key == "relax=deterministic;disc=deterministic;entropy=off");
  CHECK(cells[16].key == "random_search");

  std::ostringstream first, second;
  write_ablation_csv(first, cells);
  write_ablation_csv(second, run_ablation(spec, base.space, provider));
  CHECK(first.str() == second.str());
  CHECK(first.str().rfind("axis,cell,seed,status,architecture,pixel_accuracy,", 0) == 0);

  spec.axes = {"depth"};
  CHECK_THROWS_AS(run_ablation(spec, base.space, provider), Error);
}

TEST_CASE("ablation records failing cells instead of aborting") {
  const MultiTaskModel base = four_edge_model();
  const DatasetSplit data = small_data();
  AblationSpec spec;
  spec.axes = {"lr_scale"};
  spec.search.steps = 2;
  spec.search.batch_size = 4;
  spec.search.lr_theta = 1e200;
  spec.search.gap_every = 0;
  const auto cells =
      run_ablation(spec, base.space, [&](std::uint64_t) { return Fixture{data, base.backbone_a, base.backbone_b}; });
  REQUIRE(cells.size() == 4);
  for (const AblationCell& c : cells) CHECK(c.status.rfind("failed: ", 0) == 0);
}
