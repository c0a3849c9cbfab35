#include "mtlnas/config.hpp"

#include <set>

#include "mtlnas/serialize.hpp"

namespace mtlnas {

namespace {

/// Reads the keys of one JSON object and rejects any that were not consumed.
class Section {
 public:
  Section(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + "expected an object");
  }

  bool has(const char* key) const { return j_.contains(key); }

  void read(const char* key, double& out) {
    if (const Json* v = take(key)) {
      if (!v->is_number()) fail(key, "expected a number");
      out = v->get<double>();
    }
  }

  void read(const char* key, std::size_t& out) {
    if (const Json* v = take(key)) {
      if (!v->is_number_unsigned()) fail(key, "expected a nonnegative integer");
      out = v->get<std::size_t>();
    }
  }

  void read_u64(const char* key, std::uint64_t& out) {
    if (const Json* v = take(key)) {
      if (!v->is_number_unsigned()) fail(key, "expected a nonnegative integer");
      out = v->get<std::uint64_t>();
    }
  }

  void read(const char* key, bool& out) {
    if (const Json* v = take(key)) {
      if (!v->is_boolean()) fail(key, "expected true or false");
      out = v->get<bool>();
    }
  }

  void read(const char* key, std::string& out) {
    if (const Json* v = take(key)) {
      if (!v->is_string()) fail(key, "expected a string");
      out = v->get<std::string>();
    }
  }

  const Json* take(const char* key) {
    auto it = j_.find(key);
    if (it == j_.end()) return nullptr;
    used_.insert(key);
    return &*it;
  }

  Section child(const char* key) {
    const Json* v = take(key);
    return Section(*v, path_.empty() ? key : path_ + "." + key);
  }

  [[noreturn]] void fail(const std::string& key, const std::string& msg) const {
    throw ConfigError(where() + key + ": " + msg);
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!used_.count(it.key())) throw ConfigError(where() + "unknown key '" + it.key() + "'");
    }
  }

  const std::string& path() const { return path_; }

 private:
  std::string where() const { return path_.empty() ? std::string() : path_ + "."; }

  const Json& j_;
  std::string path_;
  std::set<std::string> used_;
};

void read_sgd(Section& s, SgdOptions& sgd) {
  s.read("momentum", sgd.momentum);
  s.read("weight_decay", sgd.weight_decay);
}

void read_budget(Section& s, TrainBudget& b) {
  s.read("steps", b.steps);
  s.read("batch_size", b.batch_size);
  s.read("lr", b.lr);
  read_sgd(s, b.sgd);
  s.read("fusion_lr_scale", b.fusion_lr_scale);
  s.read("lambda", b.lambda);
  s.read("freeze_backbone", b.freeze_backbone);
}

void check_budget(const TrainBudget& b, const std::string& where) {
  if (b.steps == 0) throw ConfigError(where + ".steps must be positive");
  if (b.batch_size == 0) throw ConfigError(where + ".batch_size must be positive");
  if (!(b.lr >= 0.0) || !(b.fusion_lr_scale >= 0.0)) throw ConfigError(where + ": learning rates must be >= 0");
  if (!(b.lambda > 0.0)) throw ConfigError(where + ".lambda must be > 0");
}

void parse_search(Section& s, SearchRunConfig& r) {
  SearchConfig& c = r.search;
  if (s.has("relax")) {
    std::string v;
    s.read("relax", v);
    try {
      c.relax = parse_relax_mode(v);
    } catch (const Error& e) {
      s.fail("relax", e.what());
    }
  }
  if (s.has("discretize")) {
    std::string v;
    s.read("discretize", v);
    try {
      c.discretize = parse_discretize_mode(v);
    } catch (const Error& e) {
      s.fail("discretize", e.what());
    }
  }
  s.read("gamma", c.gamma);
  s.read("lambda", c.lambda);
  s.read("tau_initial", c.tau_initial);
  s.read("tau_final", c.tau_final);
  s.read("steps", c.steps);
  s.read("batch_size", c.batch_size);
  s.read("lr_theta", c.lr_theta);
  read_sgd(s, c.sgd);
  s.read("adam_lr", c.adam.lr);
  s.read("adam_beta1", c.adam.beta1);
  s.read("adam_beta2", c.adam.beta2);
  s.read("adam_eps", c.adam.eps);
  s.read("adam_weight_decay", c.adam.weight_decay);
  s.read("fusion_lr_scale", c.fusion_lr_scale);
  s.read("freeze_backbone", c.freeze_backbone);
  s.read("gap_every", c.gap_every);
  s.read("gap_samples", c.gap_samples);
  s.read("zero_task_loss", c.zero_task_loss);
  s.read("w_ti", r.w_ti);
  if (s.has("init")) {
    std::string v;
    s.read("init", v);
    if (v != "block" && v != "random") s.fail("init", "expected block or random");
    r.random_init = v == "random";
  }
  s.read("checkpoint_every", r.checkpoint_every);
  s.read("resume_from", r.resume_from);
}

}  // namespace

BackboneSpec RunConfig::backbone(TaskId task) const {
  BackboneSpec spec;
  spec.stages = stages;
  spec.head = task == TaskId::kA ? HeadKind::kClassifier : HeadKind::kVectorRegressor;
  spec.classes = dataset.classes;
  spec.norm = norm;
  return spec;
}

SearchSpace RunConfig::space() const {
  return SearchSpace::build(backbone(TaskId::kA), backbone(TaskId::kB), ConstraintConfig::from_preset(preset));
}

void RunConfig::validate() const {
  try {
    dataset.validate();
  } catch (const Error& e) {
    throw ConfigError(std::string("dataset: ") + e.what());
  }
  if (stages.empty()) throw ConfigError("backbone.stages must not be empty");
  for (const StageSpec& st : stages) {
    if (st.layers == 0 || st.channels == 0) throw ConfigError("backbone.stages: layers and channels must be positive");
  }
  try {
    backbone(TaskId::kA).validate(dataset.height, dataset.width);
    ConstraintConfig::from_preset(preset);
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
  if (pretrain.steps == 0 || pretrain.batch_size == 0) throw ConfigError("pretrain: steps and batch_size must be positive");
  if (!(pretrain.lr >= 0.0)) throw ConfigError("pretrain.lr must be >= 0");
  if (pretrain.batch_size > dataset.num_train) throw ConfigError("pretrain.batch_size exceeds dataset.num_train");
  try {
    search.search.validate();
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  if (search.search.steps == 0) throw ConfigError("search.steps must be positive");
  if (2 * search.search.batch_size > dataset.num_train) {
    throw ConfigError("search.batch_size: two disjoint batches do not fit in dataset.num_train");
  }
  if (!(search.w_ti >= 0.0 && search.w_ti <= 1.0)) throw ConfigError("search.w_ti must lie in [0, 1]");
  check_budget(eval.budget, "eval");
  check_budget(oracle.budget, "oracle");
  check_budget(ablate.random_budget, "ablate.random");
  if (oracle.random_k == 0 || oracle.random_repeats == 0) throw ConfigError("oracle: random_k and random_repeats must be positive");
  if (ablate.random_k == 0) throw ConfigError("ablate.random_k must be positive");
  if (ablate.search_steps == 0) throw ConfigError("ablate.search_steps must be positive");
  if (ablate.seeds.empty()) throw ConfigError("ablate.seeds must not be empty");
  for (const std::string& axis : ablate.axes) {
    if (axis != "relaxation" && axis != "w_ti" && axis != "lr_scale") {
      throw ConfigError("ablate.axes: unknown axis '" + axis + "' (expected relaxation, w_ti or lr_scale)");
    }
  }
}

RunConfig parse_run_config(const std::string& text, const std::string& source) {
  Json j;
  try {
    j = parse_json(text, true);
  } catch (const ParseError& e) {
    throw ConfigError(source + ": " + e.what());
  }
  RunConfig c;
  Section top(j, "");
  top.read_u64("seed", c.seed);
  std::string out = c.output_dir.string();
  top.read("output_dir", out);
  c.output_dir = out;

  if (top.has("dataset")) {
    Section s = top.child("dataset");
    s.read("num_train", c.dataset.num_train);
    s.read("num_val", c.dataset.num_val);
    s.read("height", c.dataset.height);
    s.read("width", c.dataset.width);
    s.read("classes", c.dataset.classes);
    s.read("noise", c.dataset.noise);
    s.read("max_regions", c.dataset.max_regions);
    s.read("relief", c.dataset.relief);
    s.finish();
  }
  c.dataset.seed = c.seed;

  if (top.has("backbone")) {
    Section s = top.child("backbone");
    if (const Json* st = s.take("stages")) {
      if (!st->is_array()) s.fail("stages", "expected an array");
      c.stages.clear();
      for (std::size_t i = 0; i < st->size(); ++i) {
        Section stage((*st)[i], s.path() + ".stages[" + std::to_string(i) + "]");
        StageSpec spec;
        stage.read("layers", spec.layers);
        stage.read("channels", spec.channels);
        stage.finish();
        c.stages.push_back(spec);
      }
    }
    if (s.has("norm")) {
      std::string v;
      s.read("norm", v);
      if (v != "affine" && v != "batch") s.fail("norm", "expected affine or batch");
      c.norm = v == "affine" ? NormMode::kAffine : NormMode::kBatchStats;
    }
    s.finish();
  }

  if (top.has("space")) {
    Section s = top.child("space");
    s.read("preset", c.preset);
    s.finish();
  }

  if (top.has("pretrain")) {
    Section s = top.child("pretrain");
    s.read("steps", c.pretrain.steps);
    s.read("lr", c.pretrain.lr);
    s.read("batch_size", c.pretrain.batch_size);
    read_sgd(s, c.pretrain.sgd);
    s.finish();
  }

  if (top.has("search")) {
    Section s = top.child("search");
    parse_search(s, c.search);
    s.finish();
  }
  c.search.search.seed = c.seed;

  if (top.has("eval")) {
    Section s = top.child("eval");
    s.read("baselines", c.eval.baselines);
    read_budget(s, c.eval.budget);
    s.finish();
  }
  c.eval.budget.seed = c.seed;

  if (top.has("oracle")) {
    Section s = top.child("oracle");
    read_budget(s, c.oracle.budget);
    s.read("random_k", c.oracle.random_k);
    s.read("random_repeats", c.oracle.random_repeats);
    s.finish();
  }
  c.oracle.budget.seed = c.seed;

  if (top.has("ablate")) {
    Section s = top.child("ablate");
    if (const Json* axes = s.take("axes")) {
      if (!axes->is_array()) s.fail("axes", "expected an array of strings");
      c.ablate.axes.clear();
      for (const Json& a : *axes) {
        if (!a.is_string()) s.fail("axes", "expected an array of strings");
        c.ablate.axes.push_back(a.get<std::string>());
      }
    }
    if (const Json* seeds = s.take("seeds")) {
      if (!seeds->is_array()) s.fail("seeds", "expected an array of integers");
      c.ablate.seeds.clear();
      for (const Json& v : *seeds) {
        if (!v.is_number_unsigned()) s.fail("seeds", "expected an array of integers");
        c.ablate.seeds.push_back(v.get<std::uint64_t>());
      }
    }
    s.read("search_steps", c.ablate.search_steps);
    s.read("random_k", c.ablate.random_k);
    if (s.has("random")) {
      Section r = s.child("random");
      read_budget(r, c.ablate.random_budget);
      r.finish();
    }
    s.finish();
  }
  top.finish();
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const IoError& e) {
    throw ConfigError(e.what());
  }
  return parse_run_config(text, path.string());
}

std::string default_config_text() {
  return R"(// mtlnas run configuration. Every key is optional; omitted keys keep the
// defaults shown here. Comments are allowed, unknown keys are errors.
{
  // Sole source of randomness: data, initialization, batches, noise.
  "seed": 1,
  // Every artifact is written below this directory.
  "output_dir": "out",

  "dataset": {
    "num_train": 256,
    "num_val": 64,
    "height": 16,
    "width": 16,
    "classes": 4,        // segmentation classes of task A
    "noise": 0.05,       // pixel noise on the rendered input
    "max_regions": 4,
    "relief": 1.0        // amplitude of the smooth background surface
  },

  // Both tasks share this layout. Task A ends in a classifier head, task B in a
  // 2-channel vector head. Every stage after the first halves the resolution.
  "backbone": {
    "stages": [
      {"layers": 2, "channels": 8},
      {"layers": 2, "channels": 16},
      {"layers": 2, "channels": 32}
    ],
    "norm": "affine"     // affine | batch
  },

  // constrained | same-level | full | tiny
  "space": {"preset": "constrained"},

  "pretrain": {
    "steps": 2000,
    "lr": 0.05,
    "batch_size": 8,
    "momentum": 0.9,
    "weight_decay": 0.00025
  },

  "search": {
    "relax": "stochastic",       // deterministic | stochastic
    "discretize": "deterministic",
    "gamma": 10.0,               // entropy weight, 0 disables
    "lambda": 1.0,               // weight of task B's loss
    "tau_initial": 1.0,
    "tau_final": 0.1,
    "steps": 5000,
    "batch_size": 8,
    "lr_theta": 0.01,
    "momentum": 0.9,
    "weight_decay": 0.00025,
    "adam_lr": 0.003,
    "adam_beta1": 0.9,
    "adam_beta2": 0.999,
    "adam_eps": 1e-8,
    "adam_weight_decay": 0.001,
    "fusion_lr_scale": 1.0,
    "freeze_backbone": false,
    "gap_every": 500,            // 0 disables the gap column
    "gap_samples": 32,
    "zero_task_loss": false,
    "w_ti": 1.0,
    "init": "block",             // block | random
    "checkpoint_every": 0,
    "resume_from": ""            // e.g. "checkpoints/search_latest.json"
  },

  // Direct evaluation of the searched child; with baselines the all-edges
  // supernet and the no-fusion model are trained under this budget.
  "eval": {
    "baselines": false,
    "steps": 300,
    "batch_size": 8,
    "lr": 0.01,
    "momentum": 0.9,
    "weight_decay": 0.00025,
    "fusion_lr_scale": 1.0,
    "lambda": 1.0,
    "freeze_backbone": false
  },

  // Exhaustive ranking; the space preset must have at most 12 edges.
  "oracle": {
    "steps": 300,
    "batch_size": 8,
    "lr": 0.01,
    "random_k": 8,
    "random_repeats": 11
  },

  "ablate": {
    "axes": ["relaxation", "w_ti", "lr_scale"],
    "seeds": [1, 2, 3],
    "search_steps": 2000,
    "random_k": 8,
    "random": {"steps": 300, "lr": 0.01}
  }
}
)";
}

}  // namespace mtlnas
