#pragma once

// Candidate inter-task fusion edges between two backbones, their constraint
// presets, architecture counting, acyclicity checking and DOT export.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <boost/multiprecision/cpp_int.hpp>

#include "mtlnas/backbone.hpp"

namespace mtlnas {

struct NodeRef {
  TaskId task = TaskId::kA;
  std::size_t stage = 0;
  std::size_t layer_in_stage = 0;
  std::size_t layer = 0;  // global index within the backbone

  std::string name() const;  // T{A|B}_s{stage}_l{layer}
  friend bool operator==(const NodeRef&, const NodeRef&) = default;
};

NodeRef node_ref(const BackboneSpec& spec, TaskId task, std::size_t layer);

struct CandidateEdge {
  std::size_t id = 0;
  NodeRef source;  // task-opposite node, pre-fusion feature
  NodeRef target;
  friend bool operator==(const CandidateEdge&, const CandidateEdge&) = default;
};

struct ConstraintConfig {
  std::string preset = "constrained";
  bool same_stage_only = true;
  /// Always true: sources come from the same or an earlier layer.
  bool same_or_earlier = true;
  /// Largest allowed target.layer - source.layer.
  std::size_t max_distance = 3;
  /// Restrict targets to the last layer of each stage.
  bool stage_last_layer_targets_only = false;
  /// Stages below this index receive no fusion edges.
  std::size_t min_stage = 0;

  /// constrained: same stage, distance <= 3.
  /// same-level: source layer == target layer.
  /// full: every source at or before the target (n(n+1) edges for n layers).
  /// tiny: same stage, distance <= 1, stage-final targets, first stage excluded.
  static ConstraintConfig from_preset(const std::string& name);
  void validate() const;
  bool admits(const NodeRef& source, const NodeRef& target) const;

  friend bool operator==(const ConstraintConfig&, const ConstraintConfig&) = default;
};

/// One bit per edge id.
struct DiscreteArchitecture {
  std::vector<std::uint8_t> bits;

  std::size_t size() const { return bits.size(); }
  std::size_t count() const;
  /// Edge bits in id order, e.g. "01100010".
  std::string to_string() const;
  static DiscreteArchitecture from_string(const std::string& bits);
  static DiscreteArchitecture all(std::size_t edges, bool value);
  /// Bits of `index` with edge 0 as the least significant bit.
  static DiscreteArchitecture from_index(std::uint64_t index, std::size_t edges);

  friend bool operator==(const DiscreteArchitecture&, const DiscreteArchitecture&) = default;
  friend auto operator<=>(const DiscreteArchitecture&, const DiscreteArchitecture&) = default;
};

class SearchSpace {
 public:
  SearchSpace() = default;

  /// Enumerates edges target-major (task A targets first, layers ascending),
  /// then source layer ascending.
  static SearchSpace build(const BackboneSpec& a, const BackboneSpec& b, const ConstraintConfig& constraints);

  /// Explicit edge list given as (source, target) pairs; rejects same-task
  /// pairs, later-to-earlier pairs, duplicates and out-of-range nodes. Edges
  /// are renumbered into the canonical order.
  static SearchSpace from_pairs(const BackboneSpec& a, const BackboneSpec& b,
                                std::span<const std::pair<NodeRef, NodeRef>> pairs);

  const std::vector<CandidateEdge>& edges() const { return edges_; }
  std::size_t size() const { return edges_.size(); }
  bool empty() const { return edges_.empty(); }
  const BackboneSpec& spec(TaskId task) const { return task == TaskId::kA ? spec_a_ : spec_b_; }
  std::size_t num_layers() const { return spec_a_.num_layers(); }

  /// Edge ids whose target is (task, layer), in concatenation order.
  const std::vector<std::size_t>& sources_of(TaskId task, std::size_t layer) const;

 private:
  void index_targets();

  BackboneSpec spec_a_, spec_b_;
  std::vector<CandidateEdge> edges_;
  std::vector<std::vector<std::size_t>> by_target_;  // [task * layers + layer]
};

boost::multiprecision::cpp_int count_architectures(const SearchSpace& space);

struct AcyclicityReport {
  bool acyclic = true;
  /// Vertex names along one cycle when !acyclic.
  std::vector<std::string> cycle;
};

/// Kahn's algorithm over a directed graph; returns a witnessing cycle if no
/// topological order exists.
AcyclicityReport find_cycle(std::size_t vertices, std::span<const std::pair<std::size_t, std::size_t>> arcs,
                            const std::vector<std::string>& names);

/// Checks the graph of backbone chains plus every candidate edge (or only the
/// edges selected by `arch`). Each layer contributes a pre-fusion vertex F and
/// a fused vertex O: F_l -> O_l -> F_{l+1} within a task and F_i -> O_j per edge.
AcyclicityReport assert_acyclic(const SearchSpace& space, const DiscreteArchitecture* arch = nullptr);

/// Graphviz rendering. Backbone arcs are solid black and candidate edges dashed
/// gray; when `arch` is given the selected edges are drawn solid, and `alpha`
/// (one value per edge) is attached as an attribute.
std::string export_dot(const SearchSpace& space, const DiscreteArchitecture* arch = nullptr,
                       std::span<const double> alpha = {});

}  // namespace mtlnas
