// Acceptance run: one PASS/FAIL line per criterion on the default toy setup.
// Usage: acceptance [criterion ...]   (no arguments runs all eleven)

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "grad_cases.hpp"
#include "mtlnas/cli.hpp"
#include "mtlnas/serialize.hpp"

using namespace mtlnas;
namespace fs = std::filesystem;

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* pattern, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, pattern, args...);
  return buf;
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

/// Lazily built fixtures and searches shared between criteria.
class Runs {
 public:
  const RunConfig& config() const { return config_; }

  Fixture& fixture(std::uint64_t seed) {
    auto it = fixtures_.find(seed);
    if (it == fixtures_.end()) {
      const auto t0 = std::chrono::steady_clock::now();
      it = fixtures_.emplace(seed, make_fixture(config_, seed)).first;
      std::printf("  [fixture %llu pretrained in %.1fs]\n", static_cast<unsigned long long>(seed), seconds_since(t0));
      std::fflush(stdout);
    }
    return it->second;
  }

  struct Timed {
    SearchResult result;
    double seconds = 0.0;
  };

  /// Default toy search on the constrained space with the given overrides.
  Timed& search(std::uint64_t seed, RelaxMode relax, double gamma, double w_ti) {
    const Key key{seed, relax == RelaxMode::kStochastic, gamma, w_ti};
    auto it = searches_.find(key);
    if (it != searches_.end()) return it->second;
    Fixture& fx = fixture(seed);
    SearchConfig c = config_.search.search;
    c.seed = seed;
    c.relax = relax;
    c.gamma = gamma;
    MultiTaskModel model = make_model(config_.space(), fx.a, fx.b, w_ti, config_.norm);
    const auto t0 = std::chrono::steady_clock::now();
    SearchResult r = run_search(c, init_search(c, std::move(model)), fx.data.train, fx.data.val);
    const double s = seconds_since(t0);
    std::printf("  [search seed=%llu relax=%s gamma=%g w_ti=%g: %s in %.1fs]\n",
                static_cast<unsigned long long>(seed), to_string(relax), gamma, w_ti,
                r.architecture.to_string().c_str(), s);
    std::fflush(stdout);
    return searches_.emplace(key, Timed{std::move(r), s}).first->second;
  }

  Timed& default_search(std::uint64_t seed) { return search(seed, RelaxMode::kStochastic, 10.0, 1.0); }

 private:
  using Key = std::tuple<std::uint64_t, bool, double, double>;
  RunConfig config_{};
  std::map<std::uint64_t, Fixture> fixtures_;
  std::map<Key, Timed> searches_;
};

std::size_t count_concentrated(const Tensor& alpha) {
  return static_cast<std::size_t>(
      std::count_if(alpha.data().begin(), alpha.data().end(), [](double a) { return std::min(a, 1.0 - a) <= 0.05; }));
}

std::size_t count_uncertain(const Tensor& alpha) {
  return static_cast<std::size_t>(
      std::count_if(alpha.data().begin(), alpha.data().end(), [](double a) { return a > 0.05 && a < 0.95; }));
}

Outcome alpha_concentration(Runs& runs) {
  const auto& on = runs.default_search(1);
  const auto& off = runs.search(1, RelaxMode::kStochastic, 0.0, 1.0);
  const std::size_t n = on.result.alpha.size();
  const std::size_t conc = count_concentrated(on.result.alpha);
  const std::size_t mid_on = count_uncertain(on.result.alpha);
  const std::size_t mid_off = count_uncertain(off.result.alpha);
  const bool pass = conc >= 0.95 * static_cast<double>(n) && mid_off >= 3 * mid_on && mid_off > mid_on &&
                    on.seconds <= 600.0;
  return {pass, fmt("%zu/%zu edges within 0.05 of {0,1}; uncertain edges gamma=10: %zu, gamma=0: %zu; "
                    "search runtime %.1fs (limit 600s)",
                    conc, n, mid_on, mid_off, on.seconds)};
}

Outcome objective_gap_shrinks(Runs& runs) {
  const Batch val = full_batch(runs.fixture(1).data.val);
  auto gap_of = [&](double gamma) {
    SearchResult& r = runs.search(1, RelaxMode::kDeterministic, gamma, 1.0).result;
    return objective_gap(r.state.model, r.state.logits, val, 1.0).relative();
  };
  const double on = gap_of(10.0);
  const double off = gap_of(0.0);
  const bool pass = on <= 0.02 && on <= off / 5.0;
  return {pass, fmt("relative gap gamma=10: %.5f (limit 0.02), gamma=0: %.5f, ratio %.3f (limit 0.2)", on, off,
                    off == 0.0 ? INFINITY : on / off)};
}

Outcome stochastic_discretization(Runs& runs) {
  SearchConfig c = runs.config().search.search;
  c.discretize = DiscretizeMode::kStochastic;
  auto draws = [&](const Tensor& alpha) {
    std::map<std::string, std::size_t> counts;
    for (std::uint64_t d = 0; d < 10; ++d) ++counts[discretize(c, alpha, d).to_string()];
    return counts;
  };
  const auto on = draws(runs.default_search(1).result.alpha);
  const auto off = draws(runs.search(1, RelaxMode::kStochastic, 0.0, 1.0).result.alpha);
  std::size_t mode = 0;
  for (const auto& [arch, n] : on) mode = std::max(mode, n);
  const bool pass = mode >= 9 && off.size() >= 2;
  return {pass, fmt("gamma=10 modal architecture in %zu/10 draws; gamma=0 gives %zu distinct", mode, off.size())};
}

Outcome direct_evaluation(Runs& runs) {
  Fixture& fx = runs.fixture(1);
  const SearchResult& r = runs.default_search(1).result;
  MultiTaskModel model = r.state.model;
  const MetricsReport before = evaluate(model, r.architecture, fx.data.val, 1.0);
  TrainBudget budget;
  budget.steps = 500;
  budget.lr = runs.config().search.search.lr_theta;
  budget.seed = 1;
  MultiTaskModel tuned = train_fixed(model, r.architecture, fx.data.train, budget);
  const MetricsReport after = evaluate(tuned, r.architecture, fx.data.val, 1.0);
  const double dpacc = 100.0 * std::abs(after.pixel_accuracy - before.pixel_accuracy);
  const double dangle = std::abs(after.mean_angle - before.mean_angle);
  return {dpacc <= 1.0 && dangle <= 1.0,
          fmt("PAcc %.4f -> %.4f (diff %.3f pp), mean angle %.3f -> %.3f deg (diff %.3f)", before.pixel_accuracy,
              after.pixel_accuracy, dpacc, before.mean_angle, after.mean_angle, dangle)};
}

Outcome oracle_rank_criterion(Runs& runs) {
  Fixture& fx = runs.fixture(1);
  const RunConfig& cfg = runs.config();
  const BackboneSpec a = cfg.backbone(TaskId::kA), b = cfg.backbone(TaskId::kB);
  const SearchSpace space = SearchSpace::build(a, b, ConstraintConfig::from_preset("tiny"));
  const MultiTaskModel snapshot = make_model(space, fx.a, fx.b, 1.0, cfg.norm);
  const auto t0 = std::chrono::steady_clock::now();
  const OracleRanking ranking = oracle_enumerate(snapshot, fx.data.train, fx.data.val, cfg.oracle.budget);
  SearchConfig c = cfg.search.search;
  c.seed = 1;
  const SearchResult r = run_search(c, init_search(c, snapshot), fx.data.train, fx.data.val);
  std::vector<double> best;
  for (std::size_t rep = 0; rep < cfg.oracle.random_repeats; ++rep) {
    best.push_back(random_search(space.size(), cfg.oracle.random_k, derive_seed(1, {tag(Stream::kRandomSearch), rep}),
                                 [&](const DiscreteArchitecture& x) { return oracle_loss(ranking, x); })
                       .best_loss);
  }
  const double seconds = seconds_since(t0);
  std::sort(best.begin(), best.end());
  const double median = best[best.size() / 2];
  const std::size_t rank = oracle_rank(ranking, r.architecture);
  const double loss = oracle_loss(ranking, r.architecture);
  const std::size_t top = ranking.size() / 10;
  const bool pass = rank <= top && loss < median && seconds <= 1800.0;
  return {pass, fmt("searched %s rank %zu/%zu (limit %zu), oracle loss %.5f vs random-search median %.5f; "
                    "runtime %.1fs (limit 1800s)",
                    r.architecture.to_string().c_str(), rank, ranking.size(), top, loss, median, seconds)};
}

Outcome baseline_ordering(Runs& runs) {
  std::size_t ok = 0;
  std::string detail;
  for (std::uint64_t seed : {1, 2, 3}) {
    Fixture& fx = runs.fixture(seed);
    auto& r = runs.default_search(seed).result;
    const MetricsReport searched = evaluate(r.state.model, r.architecture, fx.data.val, 1.0);
    TrainBudget budget;
    budget.steps = runs.config().search.search.steps;
    budget.lr = runs.config().search.search.lr_theta;
    budget.seed = seed;
    const SearchSpace& space = r.state.model.space;
    const MetricsReport all =
        supernet_baseline("all-edges", space, fx.a, fx.b, 1.0, fx.data.train, fx.data.val, budget).metrics;
    const MetricsReport none =
        supernet_baseline("none", space, fx.a, fx.b, 1.0, fx.data.train, fx.data.val, budget).metrics;
    const bool holds = !better_than(all, searched) && !better_than(none, all);
    ok += holds ? 1 : 0;
    detail += fmt("%sseed %llu: searched %.5f, all-edges %.5f, none %.5f%s", detail.empty() ? "" : "; ",
                  static_cast<unsigned long long>(seed), searched.combined_loss, all.combined_loss,
                  none.combined_loss, holds ? "" : " (violated)");
  }
  return {ok == 3, fmt("%zu/3 seeds ordered; ", ok) + detail};
}

Outcome w_ti_ordering(Runs& runs) {
  std::size_t ok = 0;
  std::string detail;
  for (std::uint64_t seed : {1, 2, 3}) {
    Fixture& fx = runs.fixture(seed);
    std::map<double, double> loss;
    for (double w : {0.0, 0.1, 0.9, 1.0}) {
      auto& r = runs.search(seed, RelaxMode::kStochastic, 10.0, w).result;
      loss[w] = evaluate(r.state.model, r.architecture, fx.data.val, 1.0).combined_loss;
    }
    const bool holds = std::max(loss[0.9], loss[1.0]) < std::min(loss[0.0], loss[0.1]);
    ok += holds ? 1 : 0;
    detail += fmt("%sseed %llu: w0 %.5f, w0.1 %.5f, w0.9 %.5f, w1 %.5f%s", detail.empty() ? "" : "; ",
                  static_cast<unsigned long long>(seed), loss[0.0], loss[0.1], loss[0.9], loss[1.0],
                  holds ? "" : " (violated)");
  }
  return {ok == 3, fmt("%zu/3 seeds ordered; ", ok) + detail};
}

Outcome identity_init(Runs& runs) {
  Fixture& fx = runs.fixture(1);
  const RunConfig& cfg = runs.config();
  MultiTaskModel model = make_model(cfg.space(), fx.a, fx.b, 1.0, cfg.norm);
  const Tensor x = full_batch(fx.data.val).input;
  const NodeFeatures a = forward_collect(model.spec(TaskId::kA), model.backbone_a, x);
  const NodeFeatures b = forward_collect(model.spec(TaskId::kB), model.backbone_b, x);
  double worst = 0.0;
  Rng rng(5);
  for (int trial = 0; trial < 3; ++trial) {
    Tensor m(Shape{model.space.size()});
    for (double& v : m.data()) v = trial == 0 ? 1.0 : rng.uniform();
    Tape tape;
    const ModelVars vars = bind_model(tape, model, false);
    const TaskOutputs out = forward_model(tape, model, vars, tape.constant(m), x, false);
    worst = std::max({worst, max_abs_diff(out.a.value(), a.output), max_abs_diff(out.b.value(), b.output)});
  }
  return {worst <= 1e-9, fmt("max |supernet - single task| = %.3g (limit 1e-9)", worst)};
}

Outcome gradient_fidelity(Runs&) {
  std::vector<testing::GradCase> cases = testing::primitive_grad_cases();
  for (auto& c : testing::fusion_grad_cases()) cases.push_back(std::move(c));
  for (auto& c : testing::concrete_grad_cases()) cases.push_back(std::move(c));
  double worst = 0.0;
  std::string worst_name;
  std::size_t failed = 0;
  for (const auto& c : cases) {
    const double err = testing::grad_check(c.build, c.inputs).max_rel_error;
    if (err > 1e-4) ++failed;
    if (err >= worst) {
      worst = err;
      worst_name = c.name;
    }
  }
  return {failed == 0, fmt("%zu/%zu checks within 1e-4; worst %.3g (%s)", cases.size() - failed, cases.size(), worst,
                           worst_name.c_str())};
}

Outcome edge_counts(Runs&) {
  bool pass = true;
  std::string detail = "full preset sizes";
  for (std::size_t n = 1; n <= 4; ++n) {
    BackboneSpec s;
    s.stages = {{n, 4}};
    const std::size_t size = SearchSpace::build(s, s, ConstraintConfig::from_preset("full")).size();
    pass = pass && size == n * (n + 1);
    detail += fmt(" %zu", size);
  }
  std::vector<std::pair<std::string, SearchSpace>> spaces;
  for (std::size_t n = 1; n <= 3; ++n) {
    BackboneSpec s;
    s.stages = {{n, 4}};
    spaces.emplace_back(fmt("full n=%zu", n), SearchSpace::build(s, s, ConstraintConfig::from_preset("full")));
  }
  const BackboneSpec a = toy_backbone(HeadKind::kClassifier, 4), b = toy_backbone(HeadKind::kVectorRegressor, 4);
  for (const char* preset : {"tiny", "same-level"})
    spaces.emplace_back(preset, SearchSpace::build(a, b, ConstraintConfig::from_preset(preset)));
  detail += "; count == enumeration for";
  for (const auto& [name, space] : spaces) {
    std::uint64_t feasible = 0;
    for (std::uint64_t i = 0; i < (1ULL << space.size()); ++i) {
      const DiscreteArchitecture arch = DiscreteArchitecture::from_index(i, space.size());
      if (assert_acyclic(space, &arch).acyclic) ++feasible;
    }
    const bool same = count_architectures(space) == feasible;
    pass = pass && same;
    detail += fmt(" %s (%llu)%s", name.c_str(), static_cast<unsigned long long>(feasible), same ? "" : " MISMATCH");
  }
  return {pass, detail};
}

std::map<std::string, std::string> csv_files(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file() && e.path().extension() == ".csv")
      out[fs::relative(e.path(), root).string()] = read_file(e.path());
  return out;
}

Outcome cli_determinism(Runs&) {
  const fs::path base = fs::temp_directory_path() / "mtlnas_acceptance_cli";
  fs::remove_all(base);
  std::vector<std::map<std::string, std::string>> trees;
  for (const char* name : {"first", "second"}) {
    const fs::path dir = base / name;
    fs::create_directories(dir);
    const std::string text =
        "{\n  \"seed\": 4,\n  \"output_dir\": \"" + (dir / "run").string() +
        "\",\n  \"dataset\": {\"num_train\": 32, \"num_val\": 8},\n  \"space\": {\"preset\": \"tiny\"},\n"
        "  \"pretrain\": {\"steps\": 30},\n  \"search\": {\"steps\": 40, \"gap_every\": 10},\n"
        "  \"eval\": {\"baselines\": true, \"steps\": 10},\n  \"oracle\": {\"steps\": 2},\n"
        "  \"ablate\": {\"seeds\": [4], \"search_steps\": 5}\n}\n";
    write_file_atomic(dir / "config.json", text);
    for (const char* cmd : {"gen-data", "pretrain", "search", "eval", "oracle", "ablate"}) {
      std::ostringstream out, err;
      const int code = run_cli({cmd, "--config", (dir / "config.json").string()}, out, err);
      if (code != kExitOk) return {false, std::string(cmd) + " failed: " + err.str()};
    }
    trees.push_back(csv_files(dir / "run"));
  }
  const bool pass = trees[0] == trees[1] && trees[0].size() >= 6;
  std::string names;
  for (const auto& [name, text] : trees[0]) names += (names.empty() ? "" : ", ") + name;
  return {pass, fmt("%zu CSV files compared (%s): %s", trees[0].size(), names.c_str(),
                    trees[0] == trees[1] ? "byte-identical" : "differ")};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<Outcome(Runs&)>>> criteria{
      {"alpha concentration", alpha_concentration},
      {"objective gap", objective_gap_shrinks},
      {"stochastic discretization", stochastic_discretization},
      {"direct evaluation", direct_evaluation},
      {"oracle rank", oracle_rank_criterion},
      {"baseline ordering", baseline_ordering},
      {"w_TI ordering", w_ti_ordering},
      {"identity at w_TI = 1", identity_init},
      {"gradient fidelity", gradient_fidelity},
      {"edge counts", edge_counts},
      {"CLI determinism", cli_determinism},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));
  Runs runs;
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!selected.empty() && !selected.count(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second(runs);
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    failures += o.pass ? 0 : 1;
    std::printf("criterion %d %s (%s): %s\n", id, o.pass ? "PASS" : "FAIL", criteria[i].first, o.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
