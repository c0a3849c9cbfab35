#pragma once

// Synthetic two-task dense prediction data. Each scene is rendered from one
// latent layout (a smooth relief plus labelled plateau and dome regions):
// the segmentation labels are the region classes and the vector field is the
// normalized gradient of the smoothed height map, so the two tasks share
// structure through the common latent.

#include <cstddef>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "mtlnas/tensor.hpp"

namespace mtlnas {

struct DatasetSpec {
  std::uint64_t seed = 1;
  std::size_t num_train = 256;
  std::size_t num_val = 64;
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t classes = 4;
  double noise = 0.05;
  /// Upper bound on labelled regions per scene; 0 yields background-only scenes.
  std::size_t max_regions = 4;
  /// Amplitude of the smooth background relief; 0 yields a flat latent.
  double relief = 1.0;

  void validate() const;
  friend bool operator==(const DatasetSpec&, const DatasetSpec&) = default;
};

struct SceneSample {
  Tensor input;             // [3, H, W], values in [0, 1]
  std::vector<int> labels;  // [H * W], values in [0, K)
  Tensor vec_field;         // [2, H, W], unit vectors
};

struct Dataset {
  DatasetSpec spec;
  /// Global index of samples[0]; train and val occupy disjoint index ranges.
  std::size_t first_index = 0;
  std::vector<SceneSample> samples;

  std::size_t size() const { return samples.size(); }
};

struct DatasetSplit {
  Dataset train;
  Dataset val;
};

/// Renders the scene with the given global index; a pure function of (spec, index).
SceneSample generate_sample(const DatasetSpec& spec, std::size_t global_index);

/// Train samples use global indices [0, num_train), val the next num_val.
DatasetSplit generate(const DatasetSpec& spec);

struct Batch {
  Tensor input;             // [N, 3, H, W]
  std::vector<int> labels;  // [N * H * W]
  Tensor vec_field;         // [N, 2, H, W]
  std::vector<std::size_t> indices;

  std::size_t size() const { return indices.size(); }
};

Batch make_batch(const Dataset& data, std::span<const std::size_t> indices);

/// Entire dataset as one batch (evaluation).
Batch full_batch(const Dataset& data);

/// Two disjoint index sets of `batch_size` each, reproducible from (seed, step).
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> disjoint_batch_indices(
    std::size_t dataset_size, std::size_t batch_size, std::uint64_t step, std::uint64_t seed);

struct BatchPair {
  Batch first;
  Batch second;
};

BatchPair sample_batches(const Dataset& data, std::size_t batch_size, std::uint64_t step, std::uint64_t seed);

/// Fraction of pixels per class across the dataset.
std::vector<double> class_frequencies(const Dataset& data);

}  // namespace mtlnas
