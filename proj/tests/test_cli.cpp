#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <sstream>

#include "mtlnas/cli.hpp"
#include "mtlnas/serialize.hpp"

using namespace mtlnas;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::string small_config(const fs::path& out_dir, const std::string& extra_search = "") {
  return "// test run\n{\n  \"seed\": 3,\n  \"output_dir\": \"" + out_dir.string() +
         "\",\n"
         "  \"dataset\": {\"num_train\": 32, \"num_val\": 8},\n"
         "  \"space\": {\"preset\": \"tiny\"},\n"
         "  \"pretrain\": {\"steps\": 20},\n"
         "  \"search\": {\"steps\": 12, \"gap_every\": 5" +
         extra_search +
         "},\n"
         "  \"eval\": {\"baselines\": true, \"steps\": 3},\n"
         "  \"oracle\": {\"steps\": 1, \"random_repeats\": 3},\n"
         "  \"ablate\": {\"axes\": [\"lr_scale\"], \"seeds\": [3], \"search_steps\": 2}\n}\n";
}

fs::path write_config(const fs::path& dir, const std::string& name, const std::string& text) {
  fs::create_directories(dir);
  write_file_atomic(dir / name, text);
  return dir / name;
}

fs::path fresh(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("mtlnas_cli_" + name);
  fs::remove_all(dir);
  return dir;
}

Json error_line(const Run& r) { return parse_json(r.err); }

}  // namespace

TEST_CASE("usage errors exit with the config code") {
  CHECK(run({}).code == kExitConfig);
  CHECK(run({"search"}).code == kExitConfig);
  CHECK(run({"frobnicate"}).code == kExitConfig);
  const Run help = run({"--help"});
  CHECK(help.code == kExitOk);
  CHECK(help.out.find("search") != std::string::npos);
  const Run printed = run({"print-config"});
  CHECK(printed.code == kExitOk);
  CHECK(printed.out == default_config_text());
}

TEST_CASE("config problems are reported as one JSON line") {
  const fs::path dir = fresh("badcfg");
  const Run missing = run({"gen-data", "--config", (dir / "none.json").string()});
  CHECK(missing.code == kExitConfig);
  const Json e = error_line(missing);
  CHECK(e["error"] == "config");
  CHECK(e["exit_code"] == kExitConfig);
  CHECK(missing.err.find('\n') == missing.err.size() - 1);

  const fs::path bad = write_config(dir, "bad.json", "{\"serach\": {}}");
  const Run unknown = run({"gen-data", "--config", bad.string()});
  CHECK(unknown.code == kExitConfig);
  CHECK(error_line(unknown)["message"].get<std::string>().find("serach") != std::string::npos);
}

TEST_CASE("stages fail fast when their inputs are missing") {
  const fs::path dir = fresh("deps");
  const fs::path cfg = write_config(dir, "c.json", small_config(dir / "run"));
  for (const char* cmd : {"pretrain", "search", "eval", "oracle", "ablate"}) {
    const Run r = run({cmd, "--config", cfg.string()});
    CHECK(r.code == kExitDependency);
    CHECK(error_line(r)["error"] == "dependency");
  }
  CHECK_FALSE(fs::exists(dir / "run"));

  // The candidate graph needs only the config; the selection needs a search.
  REQUIRE(run({"export-arch", "--config", cfg.string()}).code == kExitOk);
  CHECK(fs::exists(dir / "run" / paths::kCandidatesDot));
  CHECK_FALSE(fs::exists(dir / "run" / paths::kSelectedDot));

  REQUIRE(run({"gen-data", "--config", cfg.string()}).code == kExitOk);
  const Run r = run({"search", "--config", cfg.string()});
  CHECK(r.code == kExitDependency);
  CHECK_FALSE(fs::exists(dir / "run" / "search"));
  CHECK_FALSE(fs::exists(dir / "run" / "checkpoints"));
}

TEST_CASE("corrupt checkpoints exit with the io code") {
  const fs::path dir = fresh("corrupt");
  const fs::path cfg = write_config(dir, "c.json", small_config(dir / "run"));
  REQUIRE(run({"gen-data", "--config", cfg.string()}).code == kExitOk);
  const std::string text = read_file(dir / "run" / paths::kDataset);
  write_file_atomic(dir / "run" / paths::kDataset, text.substr(0, text.size() / 2));
  const Run r = run({"pretrain", "--config", cfg.string()});
  CHECK(r.code == kExitIo);
  CHECK(error_line(r)["message"].get<std::string>().find("at byte") != std::string::npos);
}

TEST_CASE("full pipeline writes every artifact and is repeatable") {
  const fs::path dir = fresh("pipeline");
  const fs::path cfg = write_config(dir, "c.json", small_config(dir / "run", ", \"checkpoint_every\": 5"));
  for (const char* cmd : {"gen-data", "pretrain", "search", "eval", "export-arch", "oracle", "ablate"}) {
    const Run r = run({cmd, "--config", cfg.string()});
    CHECK_MESSAGE(r.code == kExitOk, cmd, ": ", r.err);
  }
  const fs::path root = dir / "run";
  for (const char* p : {paths::kDataset, paths::kBackboneA, paths::kBackboneB, paths::kPretrainCsv,
                        paths::kSearchLatest, paths::kSearchFinal, paths::kHistoryCsv, paths::kAlphaTable,
                        paths::kArchitecture, paths::kSearchDot, paths::kMetricsCsv, paths::kOracleCsv,
                        paths::kRandomSearchCsv, paths::kSearchedRankCsv, paths::kAblationCsv,
                        paths::kCandidatesDot, paths::kSelectedDot}) {
    CHECK_MESSAGE(fs::exists(root / p), p);
  }
  CHECK(fs::exists(root / "config" / "search.json"));
  CHECK(read_file(root / "config" / "search.json") == read_file(cfg));

  const std::string history = read_file(root / paths::kHistoryCsv);
  CHECK(history.rfind("step,loss_total,loss_A,loss_B,entropy_mean,tau,lr_theta,lr_alpha,gap\n", 0) == 0);
  CHECK(std::count(history.begin(), history.end(), '\n') == 13);

  const std::string metrics = read_file(root / paths::kMetricsCsv);
  CHECK(metrics.rfind("model,architecture,pixel_accuracy,", 0) == 0);
  CHECK(metrics.find("\nsearched,") != std::string::npos);
  CHECK(metrics.find("\nall-edges,11111111,") != std::string::npos);
  CHECK(metrics.find("\nnone,00000000,") != std::string::npos);
  REQUIRE(run({"eval", "--config", cfg.string()}).code == kExitOk);
  CHECK(read_file(root / paths::kMetricsCsv) == metrics);

  const std::string oracle = read_file(root / paths::kOracleCsv);
  CHECK(std::count(oracle.begin(), oracle.end(), '\n') == 257);

  // Resuming from the step-10 checkpoint reproduces the uninterrupted run.
  const std::string alpha = read_file(root / paths::kAlphaTable);
  const fs::path resume =
      write_config(dir, "r.json", small_config(root, ", \"checkpoint_every\": 5, \"resume_from\": \"" +
                                                         std::string(paths::kSearchLatest) + "\""));
  REQUIRE(run({"search", "--config", resume.string()}).code == kExitOk);
  CHECK(read_file(root / paths::kAlphaTable) == alpha);
  CHECK(read_file(root / paths::kHistoryCsv) == history);
}

TEST_CASE("oracle refuses spaces beyond the exhaustive limit") {
  const fs::path dir = fresh("oracle_limit");
  std::string text = small_config(dir / "run");
  text.replace(text.find("\"tiny\""), 6, "\"constrained\"");
  const fs::path cfg = write_config(dir, "c.json", text);
  REQUIRE(run({"gen-data", "--config", cfg.string()}).code == kExitOk);
  REQUIRE(run({"pretrain", "--config", cfg.string()}).code == kExitOk);
  CHECK(run({"oracle", "--config", cfg.string()}).code == kExitConfig);
}
