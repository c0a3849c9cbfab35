#include "mtlnas/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "mtlnas/serialize.hpp"

namespace mtlnas {

namespace fs = std::filesystem;

Fixture pretrain_fixture(const RunConfig& config, DatasetSplit data, std::uint64_t seed) {
  Fixture fx{std::move(data), {}, {}};
  auto train = [&](TaskId task, Stream stream) {
    const BackboneSpec spec = config.backbone(task);
    PretrainOptions opt;
    opt.steps = config.pretrain.steps;
    opt.lr = config.pretrain.lr;
    opt.batch_size = config.pretrain.batch_size;
    opt.sgd = config.pretrain.sgd;
    opt.seed = derive_seed(seed, {tag(stream), 1});
    return pretrain_single_task(spec, init_backbone(spec, derive_seed(seed, {tag(stream), 0})), fx.data.train, opt);
  };
  fx.a = train(TaskId::kA, Stream::kPretrainA);
  fx.b = train(TaskId::kB, Stream::kPretrainB);
  return fx;
}

Fixture make_fixture(const RunConfig& config, std::uint64_t seed) {
  DatasetSpec spec = config.dataset;
  spec.seed = seed;
  return pretrain_fixture(config, generate(spec), seed);
}

namespace {

struct Context {
  RunConfig config;
  std::string config_text;
  fs::path root;
  std::ostream& out;

  fs::path at(const char* rel) const { return root / rel; }
};

void require(const Context& ctx, const char* rel, const char* producer) {
  if (!fs::exists(ctx.at(rel))) {
    throw DependencyError("missing '" + ctx.at(rel).string() + "'; run '" + producer + "' first");
  }
}

void copy_config(const Context& ctx, const std::string& command) {
  write_file_atomic(ctx.root / "config" / (command + ".json"), ctx.config_text);
}

void write_text(const Context& ctx, const char* rel, const std::string& text) {
  write_file_atomic(ctx.at(rel), text);
  ctx.out << "wrote " << ctx.at(rel).string() << "\n";
}

std::string rng_label(std::uint64_t seed, std::size_t step) {
  return "derive_seed(seed=" + std::to_string(seed) + ", stream, step) at step " + std::to_string(step);
}

DatasetSplit load_checked_dataset(const Context& ctx) {
  DatasetSplit split = load_dataset(ctx.at(paths::kDataset));
  if (!(split.train.spec == ctx.config.dataset)) {
    throw ConfigError("'" + ctx.at(paths::kDataset).string() +
                      "' was generated from a different dataset section or seed; rerun gen-data");
  }
  return split;
}

Fixture load_fixture(const Context& ctx) {
  Fixture fx{load_checked_dataset(ctx), {}, {}};
  auto load = [&](const char* rel, TaskId task) {
    BackboneCheckpoint c = load_backbone_checkpoint(ctx.at(rel));
    if (c.task != task || !(c.spec == ctx.config.backbone(task))) {
      throw ConfigError("'" + ctx.at(rel).string() + "' does not match the backbone section; rerun pretrain");
    }
    return std::move(c.params);
  };
  fx.a = load(paths::kBackboneA, TaskId::kA);
  fx.b = load(paths::kBackboneB, TaskId::kB);
  return fx;
}

void require_fixture(const Context& ctx) {
  require(ctx, paths::kDataset, "gen-data");
  require(ctx, paths::kBackboneA, "pretrain");
  require(ctx, paths::kBackboneB, "pretrain");
}

MultiTaskModel fresh_model(const RunConfig& cfg, const SearchSpace& space, const Fixture& fx) {
  MultiTaskModel model = make_model(space, fx.a, fx.b, cfg.search.w_ti, cfg.norm);
  if (cfg.search.random_init) model.fusion = init_fusion_params_random(space, cfg.seed);
  return model;
}

std::string metrics_csv_line(const std::string& prefix, const MetricsReport& m) {
  std::ostringstream ss;
  ss << prefix;
  write_metrics_csv_row(ss, m);
  ss << "\n";
  return ss.str();
}

std::string format_loss(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void cmd_gen_data(Context& ctx) {
  copy_config(ctx, "gen-data");
  const DatasetSplit split = generate(ctx.config.dataset);
  save_dataset(ctx.at(paths::kDataset), split);
  ctx.out << "wrote " << ctx.at(paths::kDataset).string() << " (" << split.train.size() << " train, "
          << split.val.size() << " val)\n";
}

void cmd_pretrain(Context& ctx) {
  require(ctx, paths::kDataset, "gen-data");
  DatasetSplit split = load_checked_dataset(ctx);
  copy_config(ctx, "pretrain");
  Fixture fx = pretrain_fixture(ctx.config, std::move(split), ctx.config.seed);
  const std::string label = "derive_seed(seed=" + std::to_string(ctx.config.seed) + ", pretrain)";
  save_backbone_checkpoint(ctx.at(paths::kBackboneA), TaskId::kA, ctx.config.backbone(TaskId::kA), fx.a, label);
  save_backbone_checkpoint(ctx.at(paths::kBackboneB), TaskId::kB, ctx.config.backbone(TaskId::kB), fx.b, label);
  std::ostringstream csv;
  csv << "task,train_loss,val_loss\n";
  for (TaskId t : {TaskId::kA, TaskId::kB}) {
    const BackboneSpec spec = ctx.config.backbone(t);
    BackboneParams& p = t == TaskId::kA ? fx.a : fx.b;
    csv << task_name(t) << "," << format_loss(single_task_loss(spec, p, fx.data.train)) << ","
        << format_loss(single_task_loss(spec, p, fx.data.val)) << "\n";
  }
  write_text(ctx, paths::kPretrainCsv, csv.str());
}

void check_same_space(const SearchSpace& stored, const SearchSpace& expected, const std::string& what) {
  if (stored.edges() != expected.edges() || !(stored.spec(TaskId::kA) == expected.spec(TaskId::kA)) ||
      !(stored.spec(TaskId::kB) == expected.spec(TaskId::kB))) {
    throw ConfigError("'" + what + "' was produced for a different search space or backbone");
  }
}

void cmd_search(Context& ctx) {
  const RunConfig& cfg = ctx.config;
  require_fixture(ctx);
  fs::path resume;
  if (!cfg.search.resume_from.empty()) {
    resume = ctx.root / cfg.search.resume_from;
    if (!fs::exists(resume)) throw DependencyError("missing resume checkpoint '" + resume.string() + "'");
  }
  Fixture fx = load_fixture(ctx);
  const SearchSpace space = cfg.space();
  const SearchConfig& sc = cfg.search.search;
  SearchState state = resume.empty() ? init_search(sc, fresh_model(cfg, space, fx))
                                     : load_search_checkpoint(resume, sc);
  if (!resume.empty()) check_same_space(state.model.space, space, resume.string());
  copy_config(ctx, "search");

  StepCallback checkpoint;
  if (cfg.search.checkpoint_every > 0) {
    checkpoint = [&](const SearchState& s) {
      if (s.step % cfg.search.checkpoint_every == 0 && s.step < sc.steps) {
        save_search_checkpoint(ctx.at(paths::kSearchLatest), s, rng_label(cfg.seed, s.step));
      }
    };
  }
  SearchResult r = run_search(sc, std::move(state), fx.data.train, fx.data.val, checkpoint);

  std::ostringstream history, alpha, hist;
  write_history_csv(history, r.state.history);
  write_alpha_table(alpha, r.alpha);
  write_text(ctx, paths::kHistoryCsv, history.str());
  write_text(ctx, paths::kAlphaTable, alpha.str());
  write_text(ctx, paths::kArchitecture, r.architecture.to_string() + "\n");
  const auto bins = alpha_histogram(r.alpha);
  hist << "bin_lo,bin_hi,count\n";
  for (std::size_t k = 0; k < bins.size(); ++k) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.2f,%.2f,%zu\n", 0.04 * static_cast<double>(k), 0.04 * static_cast<double>(k + 1),
                  bins[k]);
    hist << buf;
  }
  write_text(ctx, "search/alpha_histogram.csv", hist.str());
  write_text(ctx, paths::kSearchDot, export_dot(space, &r.architecture, r.alpha.data()));
  save_search_checkpoint(ctx.at(paths::kSearchFinal), r.state, rng_label(cfg.seed, r.state.step));
  ctx.out << "wrote " << ctx.at(paths::kSearchFinal).string() << "\narchitecture " << r.architecture.to_string()
          << " (" << r.architecture.count() << " of " << r.architecture.size() << " edges)\n";
}

void cmd_eval(Context& ctx) {
  const RunConfig& cfg = ctx.config;
  require(ctx, paths::kDataset, "gen-data");
  require(ctx, paths::kSearchFinal, "search");
  if (cfg.eval.baselines) require_fixture(ctx);
  SearchState state = load_search_checkpoint(ctx.at(paths::kSearchFinal), cfg.search.search);
  check_same_space(state.model.space, cfg.space(), ctx.at(paths::kSearchFinal).string());
  const DatasetSplit data = load_checked_dataset(ctx);
  copy_config(ctx, "eval");
  const DiscreteArchitecture arch = discretize(cfg.search.search, alpha_of(state.logits));
  std::ostringstream csv;
  csv << "model,architecture,";
  write_metrics_csv_header(csv);
  csv << "\n";
  csv << metrics_csv_line("searched," + arch.to_string() + ",",
                          evaluate(state.model, arch, data.val, cfg.search.search.lambda));
  if (cfg.eval.baselines) {
    const Fixture fx = load_fixture(ctx);
    for (const char* preset : {"all-edges", "none"}) {
      BaselineResult b = supernet_baseline(preset, state.model.space, fx.a, fx.b, cfg.search.w_ti, data.train,
                                           data.val, cfg.eval.budget);
      csv << metrics_csv_line(std::string(preset) + "," + b.arch.to_string() + ",", b.metrics);
    }
  }
  write_text(ctx, paths::kMetricsCsv, csv.str());
}

void cmd_oracle(Context& ctx) {
  const RunConfig& cfg = ctx.config;
  const SearchSpace space = cfg.space();
  if (space.size() > kOracleMaxEdges) {
    throw ConfigError("oracle: preset '" + cfg.preset + "' has " + std::to_string(space.size()) +
                      " edges; exhaustive ranking needs at most " + std::to_string(kOracleMaxEdges));
  }
  require_fixture(ctx);
  const Fixture fx = load_fixture(ctx);
  copy_config(ctx, "oracle");
  const OracleRanking ranking = oracle_enumerate(make_model(space, fx.a, fx.b, cfg.search.w_ti, cfg.norm),
                                                 fx.data.train, fx.data.val, cfg.oracle.budget);
  std::ostringstream csv;
  write_oracle_csv(csv, ranking);
  write_text(ctx, paths::kOracleCsv, csv.str());

  std::ostringstream rs;
  rs << "repeat,best_architecture,best_loss,rank\n";
  for (std::size_t r = 0; r < cfg.oracle.random_repeats; ++r) {
    const RandomSearchResult res =
        random_search(space.size(), cfg.oracle.random_k, derive_seed(cfg.seed, {tag(Stream::kRandomSearch), r}),
                      [&](const DiscreteArchitecture& a) { return oracle_loss(ranking, a); });
    rs << r << "," << res.best.to_string() << "," << format_loss(res.best_loss) << ","
       << oracle_rank(ranking, res.best) << "\n";
  }
  write_text(ctx, paths::kRandomSearchCsv, rs.str());

  if (fs::exists(ctx.at(paths::kSearchFinal))) {
    SearchState state = load_search_checkpoint(ctx.at(paths::kSearchFinal), cfg.search.search);
    check_same_space(state.model.space, space, ctx.at(paths::kSearchFinal).string());
    const DiscreteArchitecture arch = discretize(cfg.search.search, alpha_of(state.logits));
    std::ostringstream s;
    s << "architecture,val_loss,rank,of\n"
      << arch.to_string() << "," << format_loss(oracle_loss(ranking, arch)) << "," << oracle_rank(ranking, arch) << ","
      << ranking.size() << "\n";
    write_text(ctx, paths::kSearchedRankCsv, s.str());
  }
}

void cmd_ablate(Context& ctx) {
  const RunConfig& cfg = ctx.config;
  require_fixture(ctx);
  const Fixture own = load_fixture(ctx);
  copy_config(ctx, "ablate");
  AblationSpec spec;
  spec.axes = cfg.ablate.axes;
  spec.seeds = cfg.ablate.seeds;
  spec.search = cfg.search.search;
  spec.search.steps = cfg.ablate.search_steps;
  spec.random_budget = cfg.ablate.random_budget;
  spec.random_k = cfg.ablate.random_k;
  spec.w_ti = cfg.search.w_ti;
  const auto cells = run_ablation(spec, cfg.space(), [&](std::uint64_t seed) {
    return seed == cfg.seed ? own : make_fixture(cfg, seed);
  });
  std::ostringstream csv;
  write_ablation_csv(csv, cells);
  write_text(ctx, paths::kAblationCsv, csv.str());
}

void cmd_export_arch(Context& ctx) {
  const RunConfig& cfg = ctx.config;
  const SearchSpace space = cfg.space();
  const AcyclicityReport report = assert_acyclic(space);
  if (!report.acyclic) throw Error("search space contains a cycle");
  copy_config(ctx, "export-arch");
  write_text(ctx, paths::kCandidatesDot, export_dot(space));
  if (fs::exists(ctx.at(paths::kSearchFinal))) {
    SearchState state = load_search_checkpoint(ctx.at(paths::kSearchFinal), cfg.search.search);
    check_same_space(state.model.space, space, ctx.at(paths::kSearchFinal).string());
    const Tensor alpha = alpha_of(state.logits);
    const DiscreteArchitecture arch = discretize(cfg.search.search, alpha);
    write_text(ctx, paths::kSelectedDot, export_dot(space, &arch, alpha.data()));
  }
}

const char* error_kind(int code) {
  switch (code) {
    case kExitConfig: return "config";
    case kExitDependency: return "dependency";
    case kExitDivergence: return "divergence";
    case kExitIo: return "io";
    default: return "error";
  }
}

int report(std::ostream& err, int code, const std::string& message) {
  err << Json{{"error", error_kind(code)}, {"exit_code", code}, {"message", message}}.dump() << "\n";
  return code;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Two-task fusion architecture search on a toy fixture", "mtlnas"};
  app.require_subcommand(1, 1);
  std::string config_path;
  using Handler = void (*)(Context&);
  const std::vector<std::tuple<const char*, const char*, Handler>> commands{
      {"gen-data", "Render the train/val scenes", cmd_gen_data},
      {"pretrain", "Train both single-task backbones", cmd_pretrain},
      {"search", "Run the fusion search", cmd_search},
      {"eval", "Evaluate the searched architecture (and optional baselines)", cmd_eval},
      {"oracle", "Rank every architecture of a small space", cmd_oracle},
      {"ablate", "Run the ablation grids", cmd_ablate},
      {"export-arch", "Write DOT graphs of the space and the selected edges", cmd_export_arch},
  };
  for (const auto& [name, help, handler] : commands) {
    app.add_subcommand(name, help)->add_option("--config", config_path, "Run configuration (JSON)")->required();
  }
  app.add_subcommand("print-config", "Print the annotated default configuration");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    std::ostringstream ignored;
    const int code = app.exit(e, out, ignored);
    return code == 0 ? kExitOk : report(err, kExitConfig, e.what());
  }

  const CLI::App* chosen = app.get_subcommands().front();
  if (chosen->get_name() == "print-config") {
    out << default_config_text();
    return kExitOk;
  }
  try {
    RunConfig config = load_run_config(config_path);
    std::string text = read_file(config_path);
    Context ctx{std::move(config), std::move(text), {}, out};
    ctx.root = ctx.config.output_dir;
    for (const auto& [name, help, handler] : commands) {
      if (chosen->get_name() == name) handler(ctx);
    }
    return kExitOk;
  } catch (const ConfigError& e) {
    return report(err, kExitConfig, e.what());
  } catch (const DependencyError& e) {
    return report(err, kExitDependency, e.what());
  } catch (const DivergenceError& e) {
    return report(err, kExitDivergence, e.what());
  } catch (const IoError& e) {
    return report(err, kExitIo, e.what());
  } catch (const ParseError& e) {
    return report(err, kExitIo, e.what());
  } catch (const FormatError& e) {
    return report(err, kExitIo, e.what());
  } catch (const std::exception& e) {
    return report(err, kExitOther, e.what());
  }
}

}  // namespace mtlnas
