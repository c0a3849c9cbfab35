#pragma once

// Versioned JSON checkpoints for backbones, datasets and search state. Floats
// are written with 17 significant digits so that load(save(x)) is bitwise.

#include <cstddef>
#include <filesystem>
#include <string>

#include "json.hpp"
#include "mtlnas/searchalgo.hpp"

namespace mtlnas {

constexpr int kCheckpointVersion = 1;
constexpr const char* kCheckpointFormat = "mtlnas-checkpoint";

/// Malformed or truncated input. `offset` is the byte position reported by the parser.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

/// Well-formed input with the wrong version, kind or layout.
class FormatError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

using Json = nlohmann::json;

/// Serializes with %.17g floats, objects indented, primitive arrays on one line.
/// Non-finite floats are rejected; encode them as null before calling.
std::string dump_json(const Json& value);

/// Parses text; errors carry the byte offset. Comments are accepted when `allow_comments`.
Json parse_json(const std::string& text, bool allow_comments = false);

std::string read_file(const std::filesystem::path& path);
/// Writes through a temporary file and renames, so readers never see a partial file.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);

Json tensor_to_json(const Tensor& t);
Tensor tensor_from_json(const Json& j, const char* what);

Json dataset_spec_to_json(const DatasetSpec& spec);
DatasetSpec dataset_spec_from_json(const Json& j);
Json backbone_spec_to_json(const BackboneSpec& spec);
BackboneSpec backbone_spec_from_json(const Json& j);

Json backbone_params_to_json(const BackboneParams& p);
/// Checks every shape against `spec`.
BackboneParams backbone_params_from_json(const Json& j, const BackboneSpec& spec);

Json model_to_json(const MultiTaskModel& model);
MultiTaskModel model_from_json(const Json& j);

Json search_state_to_json(const SearchState& state);
/// The optimizer hyperparameters come from `config`; the checkpoint holds only their state.
SearchState search_state_from_json(const Json& j, const SearchConfig& config);

Json dataset_to_json(const Dataset& data);
Dataset dataset_from_json(const Json& j);

/// Wraps a payload with format, version, kind and rng label.
Json make_checkpoint(const std::string& kind, Json payload, const std::string& rng_label);
/// Validates the envelope and returns the payload.
const Json& open_checkpoint(const Json& j, const std::string& kind);

void save_backbone_checkpoint(const std::filesystem::path& path, TaskId task, const BackboneSpec& spec,
                              const BackboneParams& params, const std::string& rng_label);
struct BackboneCheckpoint {
  TaskId task = TaskId::kA;
  BackboneSpec spec;
  BackboneParams params;
};
BackboneCheckpoint load_backbone_checkpoint(const std::filesystem::path& path);

void save_search_checkpoint(const std::filesystem::path& path, const SearchState& state, const std::string& rng_label);
SearchState load_search_checkpoint(const std::filesystem::path& path, const SearchConfig& config);

void save_dataset(const std::filesystem::path& path, const DatasetSplit& split);
DatasetSplit load_dataset(const std::filesystem::path& path);

}  // namespace mtlnas
