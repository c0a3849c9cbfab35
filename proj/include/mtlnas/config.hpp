#pragma once

// Run configuration: a JSON file (comments allowed) with one optional section
// per pipeline stage. Unknown keys are rejected and every value is validated
// before any computation starts.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mtlnas/evalharness.hpp"

namespace mtlnas {

class ConfigError : public Error {
 public:
  using Error::Error;
};

struct PretrainConfig {
  std::size_t steps = 2000;
  double lr = 0.05;
  std::size_t batch_size = 8;
  SgdOptions sgd{};
};

struct SearchRunConfig {
  SearchConfig search{};
  /// Block-form fusion init with this w_TI; ignored when random_init.
  double w_ti = 1.0;
  bool random_init = false;
  /// Write checkpoints/search_latest.json every this many steps; 0 disables.
  std::size_t checkpoint_every = 0;
  /// Continue from this search checkpoint instead of starting fresh (relative to output_dir).
  std::string resume_from;
};

struct OracleConfig {
  TrainBudget budget{};
  /// Random-search baseline: K samples per run, scored by oracle lookup.
  std::size_t random_k = 8;
  std::size_t random_repeats = 11;
};

struct EvalConfig {
  /// Also train the all-edges supernet and the no-fusion baseline under `budget`.
  bool baselines = false;
  TrainBudget budget{};
};

struct AblateConfig {
  std::vector<std::string> axes{"relaxation", "w_ti", "lr_scale"};
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::size_t search_steps = 2000;
  TrainBudget random_budget{};
  std::size_t random_k = 8;
};

struct RunConfig {
  std::uint64_t seed = 1;
  std::filesystem::path output_dir = "out";
  DatasetSpec dataset{};
  /// Shared stage layout; task A gets a classifier head and task B a vector head.
  std::vector<StageSpec> stages{{2, 8}, {2, 16}, {2, 32}};
  NormMode norm = NormMode::kAffine;
  std::string preset = "constrained";
  PretrainConfig pretrain{};
  SearchRunConfig search{};
  EvalConfig eval{};
  OracleConfig oracle{};
  AblateConfig ablate{};

  BackboneSpec backbone(TaskId task) const;
  SearchSpace space() const;
  /// Throws ConfigError on the first invalid field.
  void validate() const;
};

/// Parses and validates. `text` is the raw file contents; `source` names it in messages.
RunConfig parse_run_config(const std::string& text, const std::string& source = "config");
RunConfig load_run_config(const std::filesystem::path& path);

/// The annotated default configuration shipped with the README.
std::string default_config_text();

}  // namespace mtlnas
