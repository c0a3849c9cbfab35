#pragma once

// Command-line pipeline: gen-data, pretrain, search, eval, oracle, ablate and
// export-arch, each reading a RunConfig and writing under its output_dir.

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "mtlnas/config.hpp"

namespace mtlnas {

/// A required artifact from an earlier pipeline stage is missing.
class DependencyError : public Error {
 public:
  using Error::Error;
};

enum ExitCode : int {
  kExitOk = 0,
  kExitOther = 1,
  kExitConfig = 2,
  kExitDependency = 3,
  kExitDivergence = 4,
  kExitIo = 5,
};

/// Artifact locations relative to output_dir.
namespace paths {
inline constexpr const char* kDataset = "data/dataset.json";
inline constexpr const char* kBackboneA = "checkpoints/backbone_A.json";
inline constexpr const char* kBackboneB = "checkpoints/backbone_B.json";
inline constexpr const char* kPretrainCsv = "pretrain/pretrain.csv";
inline constexpr const char* kSearchLatest = "checkpoints/search_latest.json";
inline constexpr const char* kSearchFinal = "checkpoints/search_final.json";
inline constexpr const char* kHistoryCsv = "search/history.csv";
inline constexpr const char* kAlphaTable = "search/alpha.txt";
inline constexpr const char* kArchitecture = "search/architecture.txt";
inline constexpr const char* kSearchDot = "search/search_space.dot";
inline constexpr const char* kMetricsCsv = "eval/metrics.csv";
inline constexpr const char* kOracleCsv = "oracle/oracle.csv";
inline constexpr const char* kRandomSearchCsv = "oracle/random_search.csv";
inline constexpr const char* kSearchedRankCsv = "oracle/searched.csv";
inline constexpr const char* kAblationCsv = "ablate/ablation.csv";
inline constexpr const char* kCandidatesDot = "arch/candidates.dot";
inline constexpr const char* kSelectedDot = "arch/selected.dot";
}  // namespace paths

/// Pretrains both single-task backbones on `train` with seeds derived from `seed`.
Fixture pretrain_fixture(const RunConfig& config, DatasetSplit data, std::uint64_t seed);

/// Generates data and pretrains for a fixture seed (data and init both follow the seed).
Fixture make_fixture(const RunConfig& config, std::uint64_t seed);

/// Runs one command. Errors are reported on `err` as a single JSON line and
/// mapped to an ExitCode.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace mtlnas
