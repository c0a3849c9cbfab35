#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <limits>

#include "mtlnas/config.hpp"
#include "mtlnas/serialize.hpp"

using namespace mtlnas;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("mtlnas_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

MultiTaskModel small_model(NormMode norm) {
  BackboneSpec a;
  a.stages = {{1, 2}, {2, 3}};
  a.norm = norm;
  BackboneSpec b = a;
  b.head = HeadKind::kVectorRegressor;
  MultiTaskModel m = make_model(SearchSpace::build(a, b, ConstraintConfig::from_preset("constrained")),
                                init_backbone(a, 4), init_backbone(b, 5), 0.8, norm);
  Rng rng(6);
  for (Tensor* t : m.theta())
    for (double& v : t->data()) v += 1e-3 * rng.normal();
  return m;
}

DatasetSplit small_data() {
  DatasetSpec d;
  d.num_train = 16;
  d.num_val = 4;
  return generate(d);
}

}  // namespace

TEST_CASE("floats survive a dump and parse bit for bit") {
  Rng rng(1);
  Tensor t(Shape{3, 5});
  for (double& v : t.data()) v = rng.normal() * std::pow(10.0, rng.uniform(-300, 300));
  t[0] = 0.1;
  t[1] = -0.0;
  t[2] = std::numeric_limits<double>::denorm_min();
  const Tensor back = tensor_from_json(parse_json(dump_json(tensor_to_json(t))), "t");
  CHECK(back == t);
  CHECK(std::signbit(back[1]));
  Json bad = tensor_to_json(t);
  CHECK_THROWS_AS(dump_json(Json(std::nan(""))), FormatError);
  bad["shape"] = Json::array({4, 5});
  CHECK_THROWS_AS(tensor_from_json(bad, "t"), FormatError);
}

TEST_CASE("json layout") {
  Json j = Json::object();
  j["a"] = Json::array({1, 2.5});
  j["b"] = Json::object({{"c", "x"}});
  CHECK(dump_json(j) == "{\n  \"a\": [1,2.5],\n  \"b\": {\n    \"c\": \"x\"\n  }\n}\n");
}

TEST_CASE("truncated input reports the byte offset") {
  const std::string text = "{\"a\": [1, 2, 3";
  try {
    parse_json(text);
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.offset() == text.size() + 1);
    CHECK(std::string(e.what()).find("at byte " + std::to_string(text.size() + 1)) != std::string::npos);
  }
  CHECK_THROWS_AS(parse_json("// c\n{}"), ParseError);
  CHECK(parse_json("// c\n{}", true).empty());
}

TEST_CASE("backbone checkpoint round trip gives identical forward outputs") {
  const fs::path dir = scratch_dir("backbone");
  for (NormMode norm : {NormMode::kAffine, NormMode::kBatchStats}) {
    BackboneSpec spec = toy_backbone(HeadKind::kVectorRegressor, 4);
    spec.norm = norm;
    BackboneParams p = init_backbone(spec, 3);
    p.layers[2].stats.running_mean[1] = 0.25;
    save_backbone_checkpoint(dir / "b.json", TaskId::kB, spec, p, "seed=3");
    BackboneCheckpoint c = load_backbone_checkpoint(dir / "b.json");
    CHECK(c.task == TaskId::kB);
    CHECK(c.spec == spec);
    const Tensor x = full_batch(small_data().val).input;
    CHECK(forward_collect(spec, p, x).output == forward_collect(c.spec, c.params, x).output);
  }
}

TEST_CASE("model and search state round trip") {
  const DatasetSplit data = small_data();
  SearchConfig config;
  config.steps = 4;
  config.batch_size = 4;
  config.gap_every = 2;
  config.gap_samples = 2;
  SearchState s = init_search(config, small_model(NormMode::kBatchStats));
  for (int i = 0; i < 3; ++i) alternating_step(s, config, data.train, nullptr);
  const fs::path dir = scratch_dir("search");
  save_search_checkpoint(dir / "s.json", s, "seed=1");
  SearchState back = load_search_checkpoint(dir / "s.json", config);
  CHECK(back.step == 3);
  CHECK(back.logits == s.logits);
  CHECK(back.adam.steps() == s.adam.steps());
  CHECK(back.history.size() == 3);
  CHECK(std::isnan(back.history[0].gap));
  auto ta = s.model.theta(), tb = back.model.theta();
  REQUIRE(ta.size() == tb.size());
  for (std::size_t i = 0; i < ta.size(); ++i) CHECK(*ta[i] == *tb[i]);
  CHECK(dump_json(search_state_to_json(back)) == dump_json(search_state_to_json(s)));

  // Both copies continue identically.
  alternating_step(s, config, data.train, nullptr);
  alternating_step(back, config, data.train, nullptr);
  CHECK(back.logits == s.logits);
}

TEST_CASE("dataset round trip") {
  const fs::path dir = scratch_dir("data");
  const DatasetSplit data = small_data();
  save_dataset(dir / "d.json", data);
  const DatasetSplit back = load_dataset(dir / "d.json");
  CHECK(back.train.spec == data.train.spec);
  REQUIRE(back.val.size() == data.val.size());
  CHECK(back.val.first_index == data.val.first_index);
  CHECK(back.val.samples[3].input == data.val.samples[3].input);
  CHECK(back.train.samples[7].labels == data.train.samples[7].labels);
  CHECK(back.train.samples[7].vec_field == data.train.samples[7].vec_field);
}

TEST_CASE("checkpoint envelopes are checked") {
  Json ck = make_checkpoint("backbone", Json::object(), "x");
  CHECK(ck["format"] == kCheckpointFormat);
  CHECK_NOTHROW(open_checkpoint(ck, "backbone"));
  CHECK_THROWS_AS(open_checkpoint(ck, "search"), FormatError);
  ck["version"] = kCheckpointVersion + 1;
  CHECK_THROWS_WITH_AS(open_checkpoint(ck, "backbone"), doctest::Contains("version"), FormatError);
  ck["version"] = kCheckpointVersion;
  ck["format"] = "other";
  CHECK_THROWS_AS(open_checkpoint(ck, "backbone"), FormatError);

  const fs::path dir = scratch_dir("envelope");
  CHECK_THROWS_AS(load_backbone_checkpoint(dir / "missing.json"), IoError);
  write_file_atomic(dir / "cut.json", "{\"format\": \"mtlnas-check");
  CHECK_THROWS_AS(load_backbone_checkpoint(dir / "cut.json"), ParseError);
}

TEST_CASE("annotated default config parses to the defaults") {
  const RunConfig parsed = parse_run_config(default_config_text());
  const RunConfig defaults;
  CHECK(parsed.seed == defaults.seed);
  CHECK(parsed.dataset == defaults.dataset);
  CHECK(parsed.stages == defaults.stages);
  CHECK(parsed.preset == defaults.preset);
  CHECK(parsed.search.search.steps == 5000);
  CHECK(parsed.search.search.gamma == 10.0);
  CHECK(parsed.search.search.adam.lr == 0.003);
  CHECK(parsed.oracle.random_repeats == 11);
  CHECK(parsed.ablate.seeds == defaults.ablate.seeds);
  CHECK(parsed.backbone(TaskId::kB).head == HeadKind::kVectorRegressor);
  CHECK(parsed.space().size() == 18);
}

TEST_CASE("config errors") {
  CHECK_THROWS_WITH_AS(parse_run_config("{\"serach\": {}}"), doctest::Contains("serach"), ConfigError);
  CHECK_THROWS_WITH_AS(parse_run_config("{\"search\": {\"gama\": 1}}"), doctest::Contains("gama"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("{\"search\": {\"gamma\": \"high\"}}"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("{\"search\": {\"relax\": \"gumbel\"}}"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("{\"space\": {\"preset\": \"dense\"}}"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("{\"search\": {\"w_ti\": 2}}"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("{\"seed\": 1"), Error);
  CHECK_THROWS_AS(load_run_config("/nonexistent/config.json"), ConfigError);
}

TEST_CASE("the top-level seed drives every stream") {
  const RunConfig c = parse_run_config("{\"seed\": 7}");
  CHECK(c.dataset.seed == 7);
  CHECK(c.search.search.seed == 7);
  CHECK(c.oracle.budget.seed == 7);
  CHECK(c.eval.budget.seed == 7);
}
