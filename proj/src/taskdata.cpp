#include "mtlnas/taskdata.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "mtlnas/rng.hpp"

namespace mtlnas {
namespace {

constexpr double kSmoothSigma = 1.0;
constexpr double kDegenerateGradient = 1e-9;

std::vector<double> gaussian_taps(double sigma) {
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> taps(static_cast<std::size_t>(2 * radius + 1));
  double total = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    const double v = std::exp(-0.5 * i * i / (sigma * sigma));
    taps[static_cast<std::size_t>(i + radius)] = v;
    total += v;
  }
  for (double& v : taps) v /= total;
  return taps;
}

// Separable blur with clamped borders.
std::vector<double> smooth(const std::vector<double>& field, std::size_t h, std::size_t w) {
  const auto taps = gaussian_taps(kSmoothSigma);
  const int radius = static_cast<int>(taps.size() / 2);
  auto clampi = [](int v, std::size_t n) { return static_cast<std::size_t>(std::clamp(v, 0, static_cast<int>(n) - 1)); };
  std::vector<double> tmp(field.size()), out(field.size());
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int k = -radius; k <= radius; ++k)
        acc += taps[static_cast<std::size_t>(k + radius)] * field[y * w + clampi(static_cast<int>(x) + k, w)];
      tmp[y * w + x] = acc;
    }
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int k = -radius; k <= radius; ++k)
        acc += taps[static_cast<std::size_t>(k + radius)] * tmp[clampi(static_cast<int>(y) + k, h) * w + x];
      out[y * w + x] = acc;
    }
  return out;
}

struct ClassColor {
  double r, g, b;
};

ClassColor class_color(std::size_t cls, std::size_t classes) {
  const double phase = 2.0 * M_PI * static_cast<double>(cls) / static_cast<double>(classes);
  return {0.5 + 0.4 * std::cos(phase), 0.5 + 0.4 * std::cos(phase + 2.0944), 0.5 + 0.4 * std::cos(phase + 4.1888)};
}

}  // namespace

void DatasetSpec::validate() const {
  if (height < 8 || width < 8) {
    throw Error("dataset: height and width must be at least 8, got " + std::to_string(height) + "x" +
                std::to_string(width));
  }
  if (num_train < 1 || num_val < 1) throw Error("dataset: num_train and num_val must be at least 1");
  if (classes < 2) throw Error("dataset: need at least 2 classes");
  if (noise < 0.0 || relief < 0.0) throw Error("dataset: noise and relief must be nonnegative");
}

SceneSample generate_sample(const DatasetSpec& spec, std::size_t global_index) {
  const std::size_t h = spec.height, w = spec.width, k = spec.classes;
  Rng rng(derive_seed(spec.seed, {tag(Stream::kSample), global_index}));

  std::vector<double> height(h * w, 0.0);
  std::vector<int> labels(h * w, 0);

  // Smooth relief: two random plane waves.
  for (int wave = 0; wave < 2; ++wave) {
    const double amp = 0.5 * spec.relief * rng.uniform(0.5, 1.0);
    const double angle = rng.uniform(0.0, 2.0 * M_PI);
    const double freq = rng.uniform(0.3, 1.2) * 2.0 * M_PI / static_cast<double>(w);
    const double phase = rng.uniform(0.0, 2.0 * M_PI);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const double t = freq * (std::cos(angle) * static_cast<double>(x) + std::sin(angle) * static_cast<double>(y));
        height[y * w + x] += amp * std::sin(t + phase);
      }
  }

  // Labelled regions, painted in order: rectangles are plateaus, circles domes.
  const std::size_t regions = spec.max_regions == 0 ? 0 : 1 + rng.below(spec.max_regions);
  const double max_extent = static_cast<double>(std::min(h, w)) / 3.0;
  for (std::size_t r = 0; r < regions; ++r) {
    const int cls = static_cast<int>(1 + rng.below(k - 1));
    const double elevation = 1.5 * static_cast<double>(cls) / static_cast<double>(k - 1) + rng.uniform(-0.2, 0.2);
    const double cy = rng.uniform(0.0, static_cast<double>(h));
    const double cx = rng.uniform(0.0, static_cast<double>(w));
    const bool circle = rng.below(2) == 1;
    const double ry = rng.uniform(2.0, max_extent);
    const double rx = circle ? ry : rng.uniform(2.0, max_extent);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const double dy = static_cast<double>(y) + 0.5 - cy;
        const double dx = static_cast<double>(x) + 0.5 - cx;
        if (circle) {
          const double d2 = (dx * dx + dy * dy) / (ry * ry);
          if (d2 >= 1.0) continue;
          labels[y * w + x] = cls;
          height[y * w + x] += elevation * std::sqrt(1.0 - d2);
        } else {
          if (std::abs(dx) >= rx || std::abs(dy) >= ry) continue;
          labels[y * w + x] = cls;
          height[y * w + x] += elevation;
        }
      }
  }

  const auto smoothed = smooth(height, h, w);
  SceneSample sample;
  sample.labels = std::move(labels);
  sample.vec_field = Tensor(Shape{2, h, w});
  sample.input = Tensor(Shape{3, h, w});
  auto at = [&](std::size_t y, std::size_t x) { return smoothed[y * w + x]; };
  double hmin = *std::min_element(smoothed.begin(), smoothed.end());
  double hmax = *std::max_element(smoothed.begin(), smoothed.end());
  const double hspan = hmax - hmin > 1e-12 ? hmax - hmin : 1.0;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t xl = x == 0 ? 0 : x - 1, xr = std::min(x + 1, w - 1);
      const std::size_t yu = y == 0 ? 0 : y - 1, yd = std::min(y + 1, h - 1);
      const double gx = (at(y, xr) - at(y, xl)) / static_cast<double>(xr - xl);
      const double gy = (at(yd, x) - at(yu, x)) / static_cast<double>(yd - yu);
      const double norm = std::hypot(gx, gy);
      double vx = 1.0, vy = 0.0;
      if (norm > kDegenerateGradient) {
        vx = gx / norm;
        vy = gy / norm;
      }
      sample.vec_field[0 * h * w + y * w + x] = vx;
      sample.vec_field[1 * h * w + y * w + x] = vy;

      // Lambertian shading of the surface z = height under a fixed light.
      const double nz = 1.0 / std::sqrt(1.0 + gx * gx + gy * gy);
      const double shade = std::clamp(0.5 + 0.5 * nz * (-0.6 * gx - 0.4 * gy + 0.7), 0.0, 1.0);
      const double level = (at(y, x) - hmin) / hspan;
      const ClassColor col = class_color(static_cast<std::size_t>(sample.labels[y * w + x]), k);
      const double channels[3] = {0.55 * col.r + 0.45 * shade, 0.55 * col.g + 0.45 * level,
                                  0.55 * col.b + 0.45 * (1.0 - shade)};
      for (std::size_t c = 0; c < 3; ++c) {
        const double noisy = channels[c] + (spec.noise > 0.0 ? spec.noise * rng.normal() : 0.0);
        sample.input[c * h * w + y * w + x] = std::clamp(noisy, 0.0, 1.0);
      }
    }
  return sample;
}

DatasetSplit generate(const DatasetSpec& spec) {
  spec.validate();
  DatasetSplit split;
  split.train.spec = spec;
  split.val.spec = spec;
  split.train.first_index = 0;
  split.val.first_index = spec.num_train;
  split.train.samples.resize(spec.num_train);
  split.val.samples.resize(spec.num_val);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(spec.num_train); ++i) {
    split.train.samples[static_cast<std::size_t>(i)] = generate_sample(spec, static_cast<std::size_t>(i));
  }
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(spec.num_val); ++i) {
    split.val.samples[static_cast<std::size_t>(i)] =
        generate_sample(spec, spec.num_train + static_cast<std::size_t>(i));
  }
  return split;
}

Batch make_batch(const Dataset& data, std::span<const std::size_t> indices) {
  if (indices.empty()) throw Error("make_batch: empty index set");
  const std::size_t h = data.spec.height, w = data.spec.width, n = indices.size();
  Batch batch;
  batch.input = Tensor(Shape{n, 3, h, w});
  batch.vec_field = Tensor(Shape{n, 2, h, w});
  batch.labels.reserve(n * h * w);
  for (std::size_t i = 0; i < n; ++i) {
    if (indices[i] >= data.size()) throw Error("make_batch: index " + std::to_string(indices[i]) + " out of range");
    const SceneSample& s = data.samples[indices[i]];
    std::copy(s.input.data().begin(), s.input.data().end(), batch.input.data().begin() + static_cast<std::ptrdiff_t>(i * 3 * h * w));
    std::copy(s.vec_field.data().begin(), s.vec_field.data().end(),
              batch.vec_field.data().begin() + static_cast<std::ptrdiff_t>(i * 2 * h * w));
    batch.labels.insert(batch.labels.end(), s.labels.begin(), s.labels.end());
  }
  batch.indices.assign(indices.begin(), indices.end());
  return batch;
}

Batch full_batch(const Dataset& data) {
  std::vector<std::size_t> all(data.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  return make_batch(data, all);
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> disjoint_batch_indices(std::size_t dataset_size,
                                                                                     std::size_t batch_size,
                                                                                     std::uint64_t step,
                                                                                     std::uint64_t seed) {
  if (batch_size == 0 || 2 * batch_size > dataset_size) {
    throw Error("batch: two disjoint batches of " + std::to_string(batch_size) + " need at least " +
                std::to_string(2 * batch_size) + " samples, dataset has " + std::to_string(dataset_size));
  }
  Rng rng(derive_seed(seed, {tag(Stream::kBatch), step}));
  std::vector<std::size_t> perm(dataset_size);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  // Partial Fisher-Yates: only the first 2B positions are needed.
  for (std::size_t i = 0; i < 2 * batch_size; ++i) {
    const std::size_t j = i + rng.below(dataset_size - i);
    std::swap(perm[i], perm[j]);
  }
  std::vector<std::size_t> first(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(batch_size));
  std::vector<std::size_t> second(perm.begin() + static_cast<std::ptrdiff_t>(batch_size),
                                  perm.begin() + static_cast<std::ptrdiff_t>(2 * batch_size));
  return {std::move(first), std::move(second)};
}

BatchPair sample_batches(const Dataset& data, std::size_t batch_size, std::uint64_t step, std::uint64_t seed) {
  auto [a, b] = disjoint_batch_indices(data.size(), batch_size, step, seed);
  return {make_batch(data, a), make_batch(data, b)};
}

std::vector<double> class_frequencies(const Dataset& data) {
  std::vector<double> counts(data.spec.classes, 0.0);
  double total = 0.0;
  for (const SceneSample& s : data.samples)
    for (int label : s.labels) {
      counts[static_cast<std::size_t>(label)] += 1.0;
      total += 1.0;
    }
  for (double& c : counts) c /= total;
  return counts;
}

}  // namespace mtlnas
