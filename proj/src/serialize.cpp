#include "mtlnas/serialize.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace mtlnas {

namespace {

bool is_primitive(const Json& j) { return !j.is_array() && !j.is_object(); }

void dump_to(std::string& out, const Json& j, int depth) {
  const std::string pad(static_cast<std::size_t>(depth + 1) * 2, ' ');
  const std::string close_pad(static_cast<std::size_t>(depth) * 2, ' ');
  switch (j.type()) {
    case Json::value_t::number_float: {
      const double v = j.get<double>();
      if (!std::isfinite(v)) throw FormatError("dump_json: non-finite value");
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.17g", v);
      out += buf;
      // "-0" would read back as the integer 0.
      if (v == 0.0 && std::signbit(v)) out += ".0";
      return;
    }
    case Json::value_t::array: {
      if (j.empty()) {
        out += "[]";
        return;
      }
      const bool inline_items = std::all_of(j.begin(), j.end(), is_primitive);
      out += inline_items ? "[" : "[\n";
      bool first = true;
      for (const Json& item : j) {
        if (!first) out += inline_items ? "," : ",\n";
        first = false;
        if (!inline_items) out += pad;
        dump_to(out, item, depth + 1);
      }
      if (!inline_items) out += "\n" + close_pad;
      out += "]";
      return;
    }
    case Json::value_t::object: {
      if (j.empty()) {
        out += "{}";
        return;
      }
      out += "{\n";
      bool first = true;
      for (auto it = j.begin(); it != j.end(); ++it) {
        if (!first) out += ",\n";
        first = false;
        out += pad + Json(it.key()).dump() + ": ";
        dump_to(out, it.value(), depth + 1);
      }
      out += "\n" + close_pad + "}";
      return;
    }
    default:
      out += j.dump();
  }
}

const Json& field(const Json& j, const char* key) {
  if (!j.is_object()) throw FormatError(std::string("expected an object holding '") + key + "'");
  auto it = j.find(key);
  if (it == j.end()) throw FormatError(std::string("missing key '") + key + "'");
  return *it;
}

template <class T>
T get(const Json& j, const char* key) {
  const Json& v = field(j, key);
  try {
    return v.get<T>();
  } catch (const nlohmann::json::exception&) {
    throw FormatError(std::string("key '") + key + "' has the wrong type");
  }
}

Json nullable(double v) { return std::isnan(v) ? Json(nullptr) : Json(v); }

double get_nullable(const Json& j, const char* key) {
  const Json& v = field(j, key);
  if (v.is_null()) return std::nan("");
  if (!v.is_number()) throw FormatError(std::string("key '") + key + "' must be a number or null");
  return v.get<double>();
}

void expect_shape(const Tensor& t, const Shape& expected, const std::string& what) {
  if (t.shape() != expected) {
    throw FormatError(what + ": shape " + to_string(t.shape()) + " does not match expected " + to_string(expected));
  }
}

Json bn_to_json(const BatchNormState& s) {
  return Json{{"running_mean", tensor_to_json(s.running_mean)},
              {"running_var", tensor_to_json(s.running_var)},
              {"momentum", s.momentum},
              {"eps", s.eps}};
}

BatchNormState bn_from_json(const Json& j, std::size_t channels, const std::string& what) {
  BatchNormState s;
  s.running_mean = tensor_from_json(field(j, "running_mean"), "running_mean");
  s.running_var = tensor_from_json(field(j, "running_var"), "running_var");
  expect_shape(s.running_mean, Shape{channels}, what + ".running_mean");
  expect_shape(s.running_var, Shape{channels}, what + ".running_var");
  s.momentum = get<double>(j, "momentum");
  s.eps = get<double>(j, "eps");
  return s;
}

Json tensors_to_json(const std::vector<Tensor>& ts) {
  Json arr = Json::array();
  for (const Tensor& t : ts) arr.push_back(tensor_to_json(t));
  return arr;
}

std::vector<Tensor> tensors_from_json(const Json& j, const char* what) {
  if (!j.is_array()) throw FormatError(std::string(what) + " must be an array");
  std::vector<Tensor> out;
  for (const Json& t : j) out.push_back(tensor_from_json(t, what));
  return out;
}

/// Optimizer buffers are either empty (no step yet) or parallel to the parameters.
void check_buffers(const std::vector<Tensor>& buffers, const std::vector<Tensor*>& params, const char* what) {
  if (buffers.empty()) return;
  if (buffers.size() != params.size()) throw FormatError(std::string(what) + ": wrong number of buffers");
  for (std::size_t i = 0; i < params.size(); ++i) expect_shape(buffers[i], params[i]->shape(), what);
}

const char* head_name(HeadKind h) { return h == HeadKind::kClassifier ? "classifier" : "vector"; }
const char* norm_name(NormMode n) { return n == NormMode::kAffine ? "affine" : "batch"; }

HeadKind parse_head(const std::string& s) {
  if (s == "classifier") return HeadKind::kClassifier;
  if (s == "vector") return HeadKind::kVectorRegressor;
  throw FormatError("unknown head '" + s + "' (expected classifier or vector)");
}

NormMode parse_norm(const std::string& s) {
  if (s == "affine") return NormMode::kAffine;
  if (s == "batch") return NormMode::kBatchStats;
  throw FormatError("unknown norm '" + s + "' (expected affine or batch)");
}

TaskId parse_task(const std::string& s) {
  if (s == "A") return TaskId::kA;
  if (s == "B") return TaskId::kB;
  throw FormatError("unknown task '" + s + "'");
}

}  // namespace

std::string dump_json(const Json& value) {
  std::string out;
  dump_to(out, value, 0);
  out += "\n";
  return out;
}

Json parse_json(const std::string& text, bool allow_comments) {
  try {
    return Json::parse(text, nullptr, true, allow_comments);
  } catch (const nlohmann::json::parse_error& e) {
    std::string msg = e.what();
    // Drop nlohmann's "[json.exception.parse_error.101] " prefix.
    if (auto pos = msg.find("] "); pos != std::string::npos) msg = msg.substr(pos + 2);
    throw ParseError(msg, e.byte);
  }
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
  std::error_code ec;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
  if (ec) throw IoError("cannot create directory '" + path.parent_path().string() + "': " + ec.message());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + tmp.string() + "' for writing");
    out << contents;
    if (!out.flush()) throw IoError("write to '" + tmp.string() + "' failed");
  }
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename '" + tmp.string() + "': " + ec.message());
}

Json tensor_to_json(const Tensor& t) {
  Json data = Json::array();
  for (double v : t.data()) data.push_back(v);
  return Json{{"shape", t.shape()}, {"data", std::move(data)}};
}

Tensor tensor_from_json(const Json& j, const char* what) {
  try {
    Shape shape = get<Shape>(j, "shape");
    const Json& data = field(j, "data");
    if (!data.is_array() || data.size() != numel(shape)) {
      throw FormatError("data length does not match shape " + to_string(shape));
    }
    std::vector<double> values;
    values.reserve(data.size());
    for (const Json& v : data) {
      if (!v.is_number()) throw FormatError("non-numeric entry");
      values.push_back(v.get<double>());
    }
    return Tensor(std::move(shape), std::move(values));
  } catch (const FormatError& e) {
    throw FormatError(std::string(what) + ": " + e.what());
  }
}

Json dataset_spec_to_json(const DatasetSpec& s) {
  return Json{{"seed", s.seed},   {"num_train", s.num_train}, {"num_val", s.num_val},
              {"height", s.height}, {"width", s.width},       {"classes", s.classes},
              {"noise", s.noise}, {"max_regions", s.max_regions}, {"relief", s.relief}};
}

DatasetSpec dataset_spec_from_json(const Json& j) {
  DatasetSpec s;
  s.seed = get<std::uint64_t>(j, "seed");
  s.num_train = get<std::size_t>(j, "num_train");
  s.num_val = get<std::size_t>(j, "num_val");
  s.height = get<std::size_t>(j, "height");
  s.width = get<std::size_t>(j, "width");
  s.classes = get<std::size_t>(j, "classes");
  s.noise = get<double>(j, "noise");
  s.max_regions = get<std::size_t>(j, "max_regions");
  s.relief = get<double>(j, "relief");
  return s;
}

Json backbone_spec_to_json(const BackboneSpec& spec) {
  Json stages = Json::array();
  for (const StageSpec& st : spec.stages) stages.push_back(Json{{"layers", st.layers}, {"channels", st.channels}});
  return Json{{"stages", std::move(stages)}, {"in_channels", spec.in_channels}, {"head", head_name(spec.head)},
              {"classes", spec.classes}, {"norm", norm_name(spec.norm)}};
}

BackboneSpec backbone_spec_from_json(const Json& j) {
  BackboneSpec spec;
  spec.stages.clear();
  const Json& stages = field(j, "stages");
  if (!stages.is_array()) throw FormatError("stages must be an array");
  for (const Json& st : stages) spec.stages.push_back({get<std::size_t>(st, "layers"), get<std::size_t>(st, "channels")});
  spec.in_channels = get<std::size_t>(j, "in_channels");
  spec.head = parse_head(get<std::string>(j, "head"));
  spec.classes = get<std::size_t>(j, "classes");
  spec.norm = parse_norm(get<std::string>(j, "norm"));
  return spec;
}

Json backbone_params_to_json(const BackboneParams& p) {
  Json layers = Json::array();
  for (const ConvLayer& l : p.layers) {
    layers.push_back(Json{{"weight", tensor_to_json(l.weight)},
                          {"bias", tensor_to_json(l.bias)},
                          {"norm_scale", tensor_to_json(l.norm_scale)},
                          {"norm_shift", tensor_to_json(l.norm_shift)},
                          {"stats", bn_to_json(l.stats)}});
  }
  return Json{{"layers", std::move(layers)},
              {"head_weight", tensor_to_json(p.head_weight)},
              {"head_bias", tensor_to_json(p.head_bias)}};
}

BackboneParams backbone_params_from_json(const Json& j, const BackboneSpec& spec) {
  BackboneParams p = init_backbone(spec, 0);  // shape template
  const Json& layers = field(j, "layers");
  if (!layers.is_array() || layers.size() != p.layers.size()) {
    throw FormatError("backbone: expected " + std::to_string(p.layers.size()) + " layers");
  }
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    ConvLayer& l = p.layers[i];
    const Json& lj = layers[i];
    const std::string where = "layer " + std::to_string(i);
    auto load = [&](Tensor& dst, const char* key) {
      Tensor t = tensor_from_json(field(lj, key), key);
      expect_shape(t, dst.shape(), where + "." + key);
      dst = std::move(t);
    };
    load(l.weight, "weight");
    load(l.bias, "bias");
    load(l.norm_scale, "norm_scale");
    load(l.norm_shift, "norm_shift");
    l.stats = bn_from_json(field(lj, "stats"), spec.channels_of(i), where);
  }
  Tensor hw = tensor_from_json(field(j, "head_weight"), "head_weight");
  Tensor hb = tensor_from_json(field(j, "head_bias"), "head_bias");
  expect_shape(hw, p.head_weight.shape(), "head_weight");
  expect_shape(hb, p.head_bias.shape(), "head_bias");
  p.head_weight = std::move(hw);
  p.head_bias = std::move(hb);
  return p;
}

Json model_to_json(const MultiTaskModel& model) {
  Json edges = Json::array();
  for (const CandidateEdge& e : model.space.edges()) {
    edges.push_back(Json{task_name(e.source.task), e.source.layer, task_name(e.target.task), e.target.layer});
  }
  Json nodes = Json::array();
  for (const FusionNode& n : model.fusion.nodes) {
    nodes.push_back(Json{{"task", task_name(n.task)},
                         {"layer", n.layer},
                         {"channels", n.channels},
                         {"edges", n.edges},
                         {"source_channels", n.source_channels},
                         {"w_ti", nullable(n.w_ti)},
                         {"w_to", nullable(n.w_to)},
                         {"weight", tensor_to_json(n.weight)},
                         {"norm_scale", tensor_to_json(n.norm_scale)},
                         {"norm_shift", tensor_to_json(n.norm_shift)},
                         {"stats", bn_to_json(n.stats)}});
  }
  return Json{{"spec_a", backbone_spec_to_json(model.spec(TaskId::kA))},
              {"spec_b", backbone_spec_to_json(model.spec(TaskId::kB))},
              {"edges", std::move(edges)},
              {"fusion_norm", norm_name(model.fusion_norm)},
              {"backbone_a", backbone_params_to_json(model.backbone_a)},
              {"backbone_b", backbone_params_to_json(model.backbone_b)},
              {"fusion", std::move(nodes)}};
}

MultiTaskModel model_from_json(const Json& j) {
  const BackboneSpec a = backbone_spec_from_json(field(j, "spec_a"));
  const BackboneSpec b = backbone_spec_from_json(field(j, "spec_b"));
  const Json& edges = field(j, "edges");
  if (!edges.is_array()) throw FormatError("edges must be an array");
  std::vector<std::pair<NodeRef, NodeRef>> pairs;
  for (const Json& e : edges) {
    if (!e.is_array() || e.size() != 4) throw FormatError("each edge is [source task, source layer, target task, target layer]");
    const TaskId st = parse_task(e[0].get<std::string>()), tt = parse_task(e[2].get<std::string>());
    const auto sl = e[1].get<std::size_t>(), tl = e[3].get<std::size_t>();
    const BackboneSpec& sspec = st == TaskId::kA ? a : b;
    const BackboneSpec& tspec = tt == TaskId::kA ? a : b;
    if (sl >= sspec.num_layers() || tl >= tspec.num_layers()) throw FormatError("edge layer out of range");
    pairs.emplace_back(node_ref(sspec, st, sl), node_ref(tspec, tt, tl));
  }
  SearchSpace space = SearchSpace::from_pairs(a, b, pairs);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (space.edges()[i].source != pairs[i].first || space.edges()[i].target != pairs[i].second) {
      throw FormatError("edges are not in canonical order");
    }
  }
  MultiTaskModel model = make_model(std::move(space), backbone_params_from_json(field(j, "backbone_a"), a),
                                    backbone_params_from_json(field(j, "backbone_b"), b), 1.0,
                                    parse_norm(get<std::string>(j, "fusion_norm")));
  const Json& nodes = field(j, "fusion");
  if (!nodes.is_array() || nodes.size() != model.fusion.nodes.size()) {
    throw FormatError("fusion: expected " + std::to_string(model.fusion.nodes.size()) + " nodes");
  }
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    FusionNode& n = model.fusion.nodes[i];
    const Json& nj = nodes[i];
    const std::string where = "fusion node " + std::to_string(i);
    if (parse_task(get<std::string>(nj, "task")) != n.task || get<std::size_t>(nj, "layer") != n.layer ||
        get<std::size_t>(nj, "channels") != n.channels ||
        get<std::vector<std::size_t>>(nj, "edges") != n.edges ||
        get<std::vector<std::size_t>>(nj, "source_channels") != n.source_channels) {
      throw FormatError(where + ": block layout does not match the edge list");
    }
    auto load = [&](Tensor& dst, const char* key) {
      Tensor t = tensor_from_json(field(nj, key), key);
      expect_shape(t, dst.shape(), where + "." + key);
      dst = std::move(t);
    };
    load(n.weight, "weight");
    load(n.norm_scale, "norm_scale");
    load(n.norm_shift, "norm_shift");
    n.stats = bn_from_json(field(nj, "stats"), n.channels, where);
    n.w_ti = get_nullable(nj, "w_ti");
    n.w_to = get_nullable(nj, "w_to");
  }
  return model;
}

Json search_state_to_json(const SearchState& s) {
  Json history = Json::array();
  for (const HistoryRecord& r : s.history) {
    history.push_back(Json{r.step, r.loss_total, r.loss_a, r.loss_b, r.entropy_mean, r.tau, r.lr_theta, r.lr_alpha,
                           nullable(r.gap)});
  }
  return Json{{"model", model_to_json(s.model)},
              {"logits", tensor_to_json(s.logits)},
              {"step", s.step},
              {"sgd_backbone", tensors_to_json(s.sgd_backbone.velocity())},
              {"sgd_fusion", tensors_to_json(s.sgd_fusion.velocity())},
              {"adam", Json{{"steps", s.adam.steps()},
                            {"m", tensors_to_json(s.adam.first_moment())},
                            {"v", tensors_to_json(s.adam.second_moment())}}},
              {"history_columns", "step,loss_total,loss_A,loss_B,entropy_mean,tau,lr_theta,lr_alpha,gap"},
              {"history", std::move(history)}};
}

SearchState search_state_from_json(const Json& j, const SearchConfig& config) {
  SearchState s = init_search(config, model_from_json(field(j, "model")));
  Tensor logits = tensor_from_json(field(j, "logits"), "logits");
  expect_shape(logits, s.logits.shape(), "logits");
  s.logits = std::move(logits);
  s.step = get<std::size_t>(j, "step");

  std::vector<Tensor*> theta = s.model.theta();
  const std::size_t split = s.model.backbone_param_count();
  const std::vector<Tensor*> backbone(theta.begin(), theta.begin() + static_cast<std::ptrdiff_t>(split));
  const std::vector<Tensor*> fusion(theta.begin() + static_cast<std::ptrdiff_t>(split), theta.end());
  s.sgd_backbone.velocity() = tensors_from_json(field(j, "sgd_backbone"), "sgd_backbone");
  s.sgd_fusion.velocity() = tensors_from_json(field(j, "sgd_fusion"), "sgd_fusion");
  check_buffers(s.sgd_backbone.velocity(), backbone, "sgd_backbone");
  check_buffers(s.sgd_fusion.velocity(), fusion, "sgd_fusion");

  const Json& adam = field(j, "adam");
  std::vector<Tensor> m = tensors_from_json(field(adam, "m"), "adam.m");
  std::vector<Tensor> v = tensors_from_json(field(adam, "v"), "adam.v");
  const std::vector<Tensor*> logit_params{&s.logits};
  check_buffers(m, logit_params, "adam.m");
  check_buffers(v, logit_params, "adam.v");
  s.adam.restore(get<std::uint64_t>(adam, "steps"), std::move(m), std::move(v));

  for (const Json& r : field(j, "history")) {
    if (!r.is_array() || r.size() != 9) throw FormatError("history rows must have 9 columns");
    HistoryRecord rec;
    rec.step = r[0].get<std::size_t>();
    double* cols[] = {&rec.loss_total, &rec.loss_a, &rec.loss_b, &rec.entropy_mean, &rec.tau, &rec.lr_theta,
                      &rec.lr_alpha, &rec.gap};
    for (std::size_t c = 0; c < 8; ++c) *cols[c] = r[c + 1].is_null() ? std::nan("") : r[c + 1].get<double>();
    s.history.push_back(rec);
  }
  if (s.history.size() != s.step) throw FormatError("history length does not match the step counter");
  return s;
}

namespace {

Json split_part_to_json(const Dataset& d) {
  Json samples = Json::array();
  for (const SceneSample& s : d.samples) {
    samples.push_back(
        Json{{"input", tensor_to_json(s.input)}, {"labels", s.labels}, {"vec_field", tensor_to_json(s.vec_field)}});
  }
  return Json{{"first_index", d.first_index}, {"samples", std::move(samples)}};
}

Dataset split_part_from_json(const Json& j, const DatasetSpec& spec, std::size_t expected) {
  Dataset d;
  d.spec = spec;
  d.first_index = get<std::size_t>(j, "first_index");
  const Json& samples = field(j, "samples");
  if (!samples.is_array() || samples.size() != expected) {
    throw FormatError("dataset: expected " + std::to_string(expected) + " samples");
  }
  for (const Json& sj : samples) {
    SceneSample s;
    s.input = tensor_from_json(field(sj, "input"), "input");
    s.vec_field = tensor_from_json(field(sj, "vec_field"), "vec_field");
    s.labels = get<std::vector<int>>(sj, "labels");
    expect_shape(s.input, Shape{3, spec.height, spec.width}, "input");
    expect_shape(s.vec_field, Shape{2, spec.height, spec.width}, "vec_field");
    if (s.labels.size() != spec.height * spec.width) throw FormatError("labels: wrong length");
    for (int l : s.labels)
      if (l < 0 || static_cast<std::size_t>(l) >= spec.classes) throw FormatError("labels: value out of range");
    d.samples.push_back(std::move(s));
  }
  return d;
}

}  // namespace

Json dataset_to_json(const Dataset& d) {
  Json j = split_part_to_json(d);
  j["spec"] = dataset_spec_to_json(d.spec);
  return j;
}

Dataset dataset_from_json(const Json& j) {
  const DatasetSpec spec = dataset_spec_from_json(field(j, "spec"));
  return split_part_from_json(j, spec, field(j, "samples").size());
}

Json make_checkpoint(const std::string& kind, Json payload, const std::string& rng_label) {
  return Json{{"format", kCheckpointFormat},
              {"version", kCheckpointVersion},
              {"kind", kind},
              {"rng", rng_label},
              {"payload", std::move(payload)}};
}

const Json& open_checkpoint(const Json& j, const std::string& kind) {
  if (!j.is_object() || j.value("format", std::string()) != kCheckpointFormat) {
    throw FormatError("not an mtlnas checkpoint");
  }
  const int version = get<int>(j, "version");
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  }
  const std::string found = get<std::string>(j, "kind");
  if (found != kind) throw FormatError("checkpoint holds '" + found + "', expected '" + kind + "'");
  return field(j, "payload");
}

void save_backbone_checkpoint(const std::filesystem::path& path, TaskId task, const BackboneSpec& spec,
                              const BackboneParams& params, const std::string& rng_label) {
  Json payload{{"task", task_name(task)}, {"spec", backbone_spec_to_json(spec)},
               {"params", backbone_params_to_json(params)}};
  write_file_atomic(path, dump_json(make_checkpoint("backbone", std::move(payload), rng_label)));
}

BackboneCheckpoint load_backbone_checkpoint(const std::filesystem::path& path) {
  const Json j = parse_json(read_file(path));
  const Json& p = open_checkpoint(j, "backbone");
  BackboneCheckpoint c;
  c.task = parse_task(get<std::string>(p, "task"));
  c.spec = backbone_spec_from_json(field(p, "spec"));
  c.params = backbone_params_from_json(field(p, "params"), c.spec);
  return c;
}

void save_search_checkpoint(const std::filesystem::path& path, const SearchState& state,
                            const std::string& rng_label) {
  write_file_atomic(path, dump_json(make_checkpoint("search", search_state_to_json(state), rng_label)));
}

SearchState load_search_checkpoint(const std::filesystem::path& path, const SearchConfig& config) {
  const Json j = parse_json(read_file(path));
  return search_state_from_json(open_checkpoint(j, "search"), config);
}

void save_dataset(const std::filesystem::path& path, const DatasetSplit& split) {
  Json payload{{"spec", dataset_spec_to_json(split.train.spec)},
               {"train", split_part_to_json(split.train)},
               {"val", split_part_to_json(split.val)}};
  write_file_atomic(path, dump_json(make_checkpoint("dataset", std::move(payload), "data")));
}

DatasetSplit load_dataset(const std::filesystem::path& path) {
  const Json j = parse_json(read_file(path));
  const Json& p = open_checkpoint(j, "dataset");
  const DatasetSpec spec = dataset_spec_from_json(field(p, "spec"));
  spec.validate();
  return DatasetSplit{split_part_from_json(field(p, "train"), spec, spec.num_train),
                      split_part_from_json(field(p, "val"), spec, spec.num_val)};
}

}  // namespace mtlnas
