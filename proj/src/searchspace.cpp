#include "mtlnas/searchspace.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

namespace mtlnas {

std::string NodeRef::name() const {
  return std::string("T") + task_name(task) + "_s" + std::to_string(stage) + "_l" + std::to_string(layer);
}

NodeRef node_ref(const BackboneSpec& spec, TaskId task, std::size_t layer) {
  return NodeRef{task, spec.stage_of(layer), spec.index_in_stage(layer), layer};
}

ConstraintConfig ConstraintConfig::from_preset(const std::string& name) {
  ConstraintConfig c;
  c.preset = name;
  if (name == "constrained") return c;
  if (name == "same-level") {
    c.max_distance = 0;
    return c;
  }
  if (name == "full") {
    c.same_stage_only = false;
    c.max_distance = static_cast<std::size_t>(-1);
    return c;
  }
  if (name == "tiny") {
    c.max_distance = 1;
    c.stage_last_layer_targets_only = true;
    c.min_stage = 1;
    return c;
  }
  throw Error("constraints: unknown preset '" + name + "' (expected constrained, same-level, full or tiny)");
}

void ConstraintConfig::validate() const {
  if (!same_or_earlier) throw Error("constraints: same_or_earlier must be true (later sources would create cycles)");
}

bool ConstraintConfig::admits(const NodeRef& source, const NodeRef& target) const {
  if (source.task == target.task) return false;
  if (source.layer > target.layer) return false;
  if (target.layer - source.layer > max_distance) return false;
  if (same_stage_only && source.stage != target.stage) return false;
  if (target.stage < min_stage) return false;
  return true;
}

std::size_t DiscreteArchitecture::count() const {
  return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t{1}));
}

std::string DiscreteArchitecture::to_string() const {
  std::string s;
  for (std::uint8_t b : bits) s.push_back(b ? '1' : '0');
  return s;
}

DiscreteArchitecture DiscreteArchitecture::from_string(const std::string& text) {
  DiscreteArchitecture a;
  for (char ch : text) {
    if (ch != '0' && ch != '1') throw Error("architecture: expected a bitstring of 0/1, got '" + text + "'");
    a.bits.push_back(ch == '1' ? 1 : 0);
  }
  return a;
}

DiscreteArchitecture DiscreteArchitecture::all(std::size_t edges, bool value) {
  return DiscreteArchitecture{std::vector<std::uint8_t>(edges, value ? 1 : 0)};
}

DiscreteArchitecture DiscreteArchitecture::from_index(std::uint64_t index, std::size_t edges) {
  DiscreteArchitecture a;
  for (std::size_t e = 0; e < edges; ++e) a.bits.push_back(static_cast<std::uint8_t>((index >> e) & 1U));
  return a;
}

namespace {

void check_compatible(const BackboneSpec& a, const BackboneSpec& b) {
  if (a.num_layers() != b.num_layers() || a.stages.size() != b.stages.size()) {
    throw Error("search space: backbones must have the same stage layout");
  }
  for (std::size_t s = 0; s < a.stages.size(); ++s) {
    if (a.stages[s].layers != b.stages[s].layers) throw Error("search space: backbones must have the same stage layout");
  }
}

bool canonical_less(const CandidateEdge& x, const CandidateEdge& y) {
  if (x.target.task != y.target.task) return x.target.task < y.target.task;
  if (x.target.layer != y.target.layer) return x.target.layer < y.target.layer;
  return x.source.layer < y.source.layer;
}

bool in_stage_last(const BackboneSpec& spec, const NodeRef& n) {
  return n.layer_in_stage + 1 == spec.stages[n.stage].layers;
}

}  // namespace

SearchSpace SearchSpace::build(const BackboneSpec& a, const BackboneSpec& b, const ConstraintConfig& constraints) {
  constraints.validate();
  check_compatible(a, b);
  SearchSpace space;
  space.spec_a_ = a;
  space.spec_b_ = b;
  const std::size_t n = a.num_layers();
  for (TaskId target_task : {TaskId::kA, TaskId::kB}) {
    const TaskId source_task = other_task(target_task);
    const BackboneSpec& ts = space.spec(target_task);
    const BackboneSpec& ss = space.spec(source_task);
    for (std::size_t j = 0; j < n; ++j) {
      const NodeRef target = node_ref(ts, target_task, j);
      if (constraints.stage_last_layer_targets_only && !in_stage_last(ts, target)) continue;
      for (std::size_t i = 0; i <= j; ++i) {
        const NodeRef source = node_ref(ss, source_task, i);
        if (!constraints.admits(source, target)) continue;
        space.edges_.push_back(CandidateEdge{space.edges_.size(), source, target});
      }
    }
  }
  space.index_targets();
  return space;
}

SearchSpace SearchSpace::from_pairs(const BackboneSpec& a, const BackboneSpec& b,
                                    std::span<const std::pair<NodeRef, NodeRef>> pairs) {
  check_compatible(a, b);
  SearchSpace space;
  space.spec_a_ = a;
  space.spec_b_ = b;
  const std::size_t n = a.num_layers();
  for (const auto& [source, target] : pairs) {
    if (source.layer >= n || target.layer >= n) throw Error("search space: node index out of range");
    const NodeRef s = node_ref(space.spec(source.task), source.task, source.layer);
    const NodeRef t = node_ref(space.spec(target.task), target.task, target.layer);
    if (s.task == t.task) throw Error("search space: edge " + s.name() + " -> " + t.name() + " joins a task to itself");
    if (s.layer > t.layer) {
      throw Error("search space: edge " + s.name() + " -> " + t.name() + " goes from a later to an earlier layer");
    }
    space.edges_.push_back(CandidateEdge{0, s, t});
  }
  std::sort(space.edges_.begin(), space.edges_.end(), canonical_less);
  for (std::size_t e = 0; e < space.edges_.size(); ++e) {
    if (e > 0 && space.edges_[e].source == space.edges_[e - 1].source &&
        space.edges_[e].target == space.edges_[e - 1].target) {
      throw Error("search space: duplicate edge " + space.edges_[e].source.name() + " -> " +
                  space.edges_[e].target.name());
    }
    space.edges_[e].id = e;
  }
  space.index_targets();
  return space;
}

void SearchSpace::index_targets() {
  const std::size_t n = num_layers();
  by_target_.assign(2 * n, {});
  for (const CandidateEdge& e : edges_) {
    by_target_[static_cast<std::size_t>(e.target.task) * n + e.target.layer].push_back(e.id);
  }
}

const std::vector<std::size_t>& SearchSpace::sources_of(TaskId task, std::size_t layer) const {
  return by_target_.at(static_cast<std::size_t>(task) * num_layers() + layer);
}

boost::multiprecision::cpp_int count_architectures(const SearchSpace& space) {
  boost::multiprecision::cpp_int count = 1;
  count <<= space.size();
  return count;
}

AcyclicityReport find_cycle(std::size_t vertices, std::span<const std::pair<std::size_t, std::size_t>> arcs,
                            const std::vector<std::string>& names) {
  std::vector<std::vector<std::size_t>> out(vertices);
  std::vector<std::size_t> indegree(vertices, 0);
  for (const auto& [u, v] : arcs) {
    out.at(u).push_back(v);
    ++indegree.at(v);
  }
  std::vector<std::size_t> ready;
  for (std::size_t v = 0; v < vertices; ++v)
    if (indegree[v] == 0) ready.push_back(v);
  std::size_t visited = 0;
  while (!ready.empty()) {
    const std::size_t u = ready.back();
    ready.pop_back();
    ++visited;
    for (std::size_t v : out[u])
      if (--indegree[v] == 0) ready.push_back(v);
  }
  AcyclicityReport report;
  if (visited == vertices) return report;
  report.acyclic = false;
  // Every vertex left with indegree > 0 has a predecessor that is also left,
  // so walking predecessors must revisit a vertex.
  std::vector<std::vector<std::size_t>> in(vertices);
  for (const auto& [u, v] : arcs)
    if (indegree[u] > 0 && indegree[v] > 0) in[v].push_back(u);
  std::size_t v = 0;
  while (indegree[v] == 0) ++v;
  std::vector<std::size_t> seen(vertices, static_cast<std::size_t>(-1));
  std::vector<std::size_t> path;
  while (seen[v] == static_cast<std::size_t>(-1)) {
    seen[v] = path.size();
    path.push_back(v);
    v = in[v].front();
  }
  std::vector<std::size_t> cycle(path.begin() + static_cast<std::ptrdiff_t>(seen[v]), path.end());
  std::reverse(cycle.begin(), cycle.end());
  for (std::size_t c : cycle) report.cycle.push_back(c < names.size() ? names[c] : std::to_string(c));
  return report;
}

AcyclicityReport assert_acyclic(const SearchSpace& space, const DiscreteArchitecture* arch) {
  const std::size_t n = space.num_layers();
  if (arch != nullptr && arch->size() != space.size()) throw Error("acyclicity: architecture size mismatch");
  // Vertex layout: task * 2n + 2 * layer + {0: F, 1: O}.
  auto vertex = [n](TaskId task, std::size_t layer, bool fused) {
    return static_cast<std::size_t>(task) * 2 * n + 2 * layer + (fused ? 1 : 0);
  };
  std::vector<std::string> names(4 * n);
  std::vector<std::pair<std::size_t, std::size_t>> arcs;
  for (TaskId task : {TaskId::kA, TaskId::kB}) {
    for (std::size_t l = 0; l < n; ++l) {
      const std::string base = node_ref(space.spec(task), task, l).name();
      names[vertex(task, l, false)] = base + ".F";
      names[vertex(task, l, true)] = base + ".O";
      arcs.emplace_back(vertex(task, l, false), vertex(task, l, true));
      if (l + 1 < n) arcs.emplace_back(vertex(task, l, true), vertex(task, l + 1, false));
    }
  }
  for (const CandidateEdge& e : space.edges()) {
    if (arch != nullptr && !arch->bits[e.id]) continue;
    arcs.emplace_back(vertex(e.source.task, e.source.layer, false), vertex(e.target.task, e.target.layer, true));
  }
  return find_cycle(4 * n, arcs, names);
}

std::string export_dot(const SearchSpace& space, const DiscreteArchitecture* arch, std::span<const double> alpha) {
  if (arch != nullptr && arch->size() != space.size()) throw Error("export_dot: architecture size mismatch");
  if (!alpha.empty() && alpha.size() != space.size()) throw Error("export_dot: alpha size mismatch");
  std::ostringstream out;
  out << "digraph fusion {\n  rankdir=TB;\n  node [shape=box];\n";
  const std::size_t n = space.num_layers();
  for (TaskId task : {TaskId::kA, TaskId::kB}) {
    out << "  subgraph cluster_" << task_name(task) << " {\n    label=\"task " << task_name(task) << "\";\n";
    for (std::size_t l = 0; l < n; ++l) out << "    " << node_ref(space.spec(task), task, l).name() << ";\n";
    for (std::size_t l = 0; l + 1 < n; ++l) {
      out << "    " << node_ref(space.spec(task), task, l).name() << " -> "
          << node_ref(space.spec(task), task, l + 1).name() << " [style=solid, color=black];\n";
    }
    out << "  }\n";
  }
  char buf[64];
  for (const CandidateEdge& e : space.edges()) {
    const bool selected = arch != nullptr && arch->bits[e.id];
    out << "  " << e.source.name() << " -> " << e.target.name() << " [";
    if (selected) {
      out << "style=solid, color=blue";
    } else {
      out << "style=dashed, color=gray";
    }
    out << ", label=\"e" << e.id << "\"";
    if (!alpha.empty()) {
      std::snprintf(buf, sizeof buf, "%.6f", alpha[e.id]);
      out << ", alpha=\"" << buf << "\"";
    }
    out << "];\n";
  }
  out << "}\n";
  return out.str();
}

}  // namespace mtlnas
