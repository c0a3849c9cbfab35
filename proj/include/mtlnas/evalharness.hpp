#pragma once

// Metrics, fixed-architecture training, baselines, the exhaustive oracle over
// tiny spaces, random search, alpha histograms and ablation grids.

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "mtlnas/searchalgo.hpp"

namespace mtlnas {

struct MetricsReport {
  double pixel_accuracy = 0.0;
  double mean_iou = 0.0;
  double mean_angle = 0.0;    // degrees
  double median_angle = 0.0;  // degrees
  double within_11_25 = 0.0;
  double within_22_5 = 0.0;
  double within_30 = 0.0;
  double loss_a = 0.0;
  double loss_b = 0.0;
  double combined_loss = 0.0;  // loss_a + lambda * loss_b
};

/// Row-major [K, K] counts, rows = ground truth, columns = prediction.
std::vector<std::size_t> confusion_matrix(std::span<const int> predicted, std::span<const int> truth,
                                          std::size_t classes);
double pixel_accuracy(std::span<const std::size_t> confusion, std::size_t classes);
/// Mean over classes present in the prediction or the ground truth.
double mean_iou(std::span<const std::size_t> confusion, std::size_t classes);

/// Per-class argmax of [N, K, H, W] logits, flattened like Batch::labels.
std::vector<int> argmax_labels(const Tensor& logits);

/// Angle in degrees between predicted and target 2-vectors at every pixel.
std::vector<double> angular_errors(const Tensor& predicted, const Tensor& target);

void fill_angle_metrics(MetricsReport& report, std::vector<double> angles);
void fill_segmentation_metrics(MetricsReport& report, const Tensor& logits, std::span<const int> labels,
                               std::size_t classes);

/// Direct evaluation of `arch` (no retraining) on the whole dataset.
MetricsReport evaluate(MultiTaskModel& model, const DiscreteArchitecture& arch, const Dataset& data, double lambda);

/// Combined loss first, segmentation mIoU as the tie-breaker.
bool better_than(const MetricsReport& x, const MetricsReport& y);

struct TrainBudget {
  std::size_t steps = 300;
  std::size_t batch_size = 8;
  double lr = 0.01;
  SgdOptions sgd{};
  double fusion_lr_scale = 1.0;
  double lambda = 1.0;
  bool freeze_backbone = false;
  std::uint64_t seed = 1;
};

/// Trains theta for a fixed architecture (constant 0/1 multipliers) with SGD and poly decay.
MultiTaskModel train_fixed(MultiTaskModel model, const DiscreteArchitecture& arch, const Dataset& train,
                           const TrainBudget& budget);

struct OracleEntry {
  DiscreteArchitecture arch;
  double val_loss = 0.0;
  std::size_t rank = 0;  // 1-based
};

using OracleRanking = std::vector<OracleEntry>;

constexpr std::size_t kOracleMaxEdges = 12;

/// Trains every architecture of the (tiny) space from the same snapshot with
/// the same budget and seed and ranks them by combined validation loss.
OracleRanking oracle_enumerate(const MultiTaskModel& snapshot, const Dataset& train, const Dataset& val,
                               const TrainBudget& budget);

/// 1-based rank of `arch`; throws if absent.
std::size_t oracle_rank(const OracleRanking& ranking, const DiscreteArchitecture& arch);
double oracle_loss(const OracleRanking& ranking, const DiscreteArchitecture& arch);

void write_oracle_csv(std::ostream& out, const OracleRanking& ranking);

DiscreteArchitecture sample_uniform_architecture(std::size_t edges, Rng& rng);

using ArchitectureEvaluator = std::function<double(const DiscreteArchitecture&)>;

struct RandomSearchResult {
  std::vector<DiscreteArchitecture> sampled;
  std::vector<double> losses;
  DiscreteArchitecture best;
  double best_loss = 0.0;
};

/// K uniform samples scored by `score` (lower is better); the first minimum wins.
RandomSearchResult random_search(std::size_t edges, std::size_t k, std::uint64_t seed, const ArchitectureEvaluator& score);

/// Trains each of K uniformly sampled architectures under `budget` and returns
/// the best by validation loss together with its metrics.
struct TrainedRandomSearch {
  RandomSearchResult search;
  MetricsReport metrics;
};
TrainedRandomSearch random_search_trained(const MultiTaskModel& snapshot, std::size_t k, const Dataset& train,
                                          const Dataset& val, const TrainBudget& budget);

struct BaselineResult {
  DiscreteArchitecture arch;
  MultiTaskModel model;
  MetricsReport metrics;
};

/// all-edges: every candidate of `space` switched on. same-level: every edge
/// of the same-level preset. none: the no-fusion multi-task baseline.
BaselineResult supernet_baseline(const std::string& preset, const SearchSpace& space, const BackboneParams& a,
                                 const BackboneParams& b, double w_ti, const Dataset& train, const Dataset& val,
                                 const TrainBudget& budget);

constexpr std::size_t kHistogramBins = 25;

/// Bin k covers [0.04k, 0.04(k+1)); the last bin is closed.
std::array<std::size_t, kHistogramBins> alpha_histogram(const Tensor& alpha);

struct AblationCell {
  std::string axis;
  std::string key;  // e.g. "relax=stochastic;disc=deterministic;entropy=on"
  std::uint64_t seed = 0;
  std::string status = "ok";
  MetricsReport metrics;
  std::string architecture;
};

struct AblationSpec {
  /// "relaxation" (relax x disc x entropy, plus random search), "w_ti" (plus
  /// random init) or "lr_scale".
  std::vector<std::string> axes;
  std::vector<std::uint64_t> seeds{1};
  SearchConfig search{};
  /// Budget for the random-search row.
  TrainBudget random_budget{};
  std::size_t random_k = 8;
  double w_ti = 1.0;
};

/// Data and pretrained single-task backbones for one fixture seed.
struct Fixture {
  DatasetSplit data;
  BackboneParams a;
  BackboneParams b;
};

using FixtureProvider = std::function<Fixture(std::uint64_t seed)>;

/// Runs every cell of every axis for every seed; failures are recorded per
/// cell. The provider is called once per seed.
std::vector<AblationCell> run_ablation(const AblationSpec& spec, const SearchSpace& space,
                                       const FixtureProvider& fixtures);

void write_metrics_csv_header(std::ostream& out);
void write_metrics_csv_row(std::ostream& out, const MetricsReport& m);
void write_ablation_csv(std::ostream& out, std::vector<AblationCell> cells);

}  // namespace mtlnas
