#include <doctest.h>

#include <filesystem>
#include <set>
#include <sstream>

#include "support.hpp"
#include "tabscope/core/binary_io.hpp"
#include "tabscope/report/report.hpp"
#include "tabscope/run/pipeline.hpp"

using namespace tabscope;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

json tiny_run_json(std::uint64_t seed = 3) {
  return json{{"model", testing::tiny_config(2).to_json()},
              {"train", {{"steps", 2}, {"batch_size", 2}, {"micro_batch", 2}, {"warmup_steps", 1}}},
              {"lens", {{"epochs", 1}, {"batch_size", 2}, {"steps_per_epoch", 2}}},
              {"prior", {{"max_seq_len", 48}, {"max_features", 4}}},
              {"seed", seed}};
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("numbers print in shortest round-trip form") {
  for (const double v : {0.1, 1.0 / 3.0, 1e-300, -2.5, 123456789.125, 0.0}) {
    CHECK(std::stod(report::format_number(v)) == v);
  }
  CHECK(report::format_number(0.5) == "0.5");
  CHECK(report::format_number(3.0) == "3");
}

TEST_CASE("csv tables carry the manifest line") {
  report::Table t{{"a", "b"}, {}};
  t.add({"1", "x"});
  t.add({"2", ""});
  CHECK(t.to_csv("abc") == "# manifest abc\na,b\n1,x\n2,\n");
}

TEST_CASE("report writer records hashes of what it wrote") {
  TempDir dir("tabscope_report_test");
  const json inputs{{"command", "test"}, {"n", 1}};
  report::ReportWriter w(dir.path, inputs);
  CHECK(w.hash() == report::manifest_hash(inputs));
  CHECK(w.hash() == sha1_hex(inputs.dump()));
  CHECK(report::manifest_hash(json{{"n", 2}, {"command", "test"}}) != w.hash());
  w.raw("a.bin", "hello\n");
  w.json_file("b.json", json{{"x", 1}});
  w.finish();
  const auto manifest = json::parse(read_file(dir.path / "manifest.json"));
  CHECK(manifest["manifest"] == w.hash());
  CHECK(manifest["inputs"] == inputs);
  CHECK(manifest["outputs"]["a.bin"] == "ce013625030ba8dba906f756967f9e9ca394464a");
  CHECK(manifest["outputs"]["b.json"] == git_blob_sha1(read_file(dir.path / "b.json")));
  CHECK(json::parse(read_file(dir.path / "b.json"))["manifest"] == w.hash());
}

TEST_CASE("ablation table leaves unused plan indices blank") {
  std::vector<analysis::AblationRow> rows(3);
  rows[1].plan = model::InterventionPlan::skip(2);
  rows[2].plan = model::InterventionPlan::swap(0, 1);
  rows[2].auc = 0.75;
  const auto t = report::ablation_table(rows);
  CHECK(t.rows[0][0] == "none");
  CHECK(t.rows[0][1] == "");
  CHECK(t.rows[1][1] == "2");
  CHECK(t.rows[1][2] == "");
  CHECK(t.rows[2][2] == "1");
  CHECK(t.rows[2][3] == "0.75");
}

TEST_CASE("run config parsing") {
  const auto c = run::RunConfig::from_json(json{{"preset", "nano1l"}, {"seed", 4}});
  CHECK(c.model.to_json() == model::ModelConfig::preset("nano1l").to_json());
  CHECK(c.model_id() == "nano1l-s4");
  const auto paper = run::RunConfig::from_json(
      json{{"train_preset", "paper"}, {"train", {{"peak_lr", 0.01}}}, {"prior_preset", "paper"}});
  CHECK(paper.train.steps == train::TrainConfig::paper().steps);
  CHECK(paper.train.peak_lr == 0.01);
  CHECK(paper.prior.max_seq_len == prior::PriorConfig::paper().max_seq_len);
  CHECK(run::RunConfig::from_json(json{{"model", {{"embed_dim", 16}}}}).preset == "custom");

  CHECK_THROWS_AS(run::RunConfig::from_json(json{{"sed", 1}}), run::RunConfigError);
  CHECK_THROWS_AS(run::RunConfig::from_json(json{{"preset", "huge"}}), run::RunConfigError);
  CHECK_THROWS_AS(run::RunConfig::from_json(json{{"train_preset", "fast"}}), run::RunConfigError);
  CHECK_THROWS_AS(run::RunConfig::from_json(json{{"train", {{"steps", -1}}}}), run::RunConfigError);
  CHECK_THROWS_AS(run::RunConfig::from_json(json{{"prior", {{"max_classes", 1}}}}), run::RunConfigError);
  CHECK_THROWS_AS(run::RunConfig::from_json(json{{"seed", "one"}}), run::RunConfigError);
  CHECK_THROWS_AS(run::RunConfig::from_json(json::array()), run::RunConfigError);

  // round trip through JSON
  const auto back = run::RunConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
}

TEST_CASE("sub-seeds derive from the root seed") {
  run::RunConfig a, b;
  a.seed = 1;
  b.seed = 2;
  CHECK(a.model_seed() != b.model_seed());
  const std::set<std::uint64_t> seeds{a.model_seed(), a.train_seed(), a.lens_seed(), a.eval_seed()};
  CHECK(seeds.size() == 4);
  run::RunConfig a2;
  a2.seed = 1;
  CHECK(a2.train_seed() == a.train_seed());
}

TEST_CASE("shipped configs load") {
  for (const char* p : {"nano6l", "nano1l", "nanolooped"}) {
    const auto cfg = run::load_run_config(fs::path(TABSCOPE_SOURCE_DIR) / "configs" /
                                          (std::string("desk_") + p + ".json"));
    CHECK(cfg.preset == p);
    CHECK(cfg.train.steps == 3000);
  }
  CHECK_THROWS_AS(run::load_run_config("/nonexistent.json"), IoError);
}

TEST_CASE("cached runs are reused only for identical inputs") {
  TempDir dir("tabscope_run_test");
  const auto cfg = run::RunConfig::from_json(tiny_run_json());
  std::ostringstream log;
  const auto first = run::train_run(cfg, dir.path / "a", false, &log);
  const auto ckpt = read_file(dir.path / "a" / "checkpoint.tfmc");
  const auto loss = read_file(dir.path / "a" / "loss.csv");
  CHECK(loss.rfind("# manifest " + first.manifest + "\n", 0) == 0);

  std::ostringstream quiet;
  const auto cached = run::load_or_train(cfg, dir.path / "a", &quiet);
  CHECK(quiet.str().empty());
  CHECK(io::encode_checkpoint(cached) == ckpt);

  // same seed in a fresh directory gives the same bytes
  run::train_run(cfg, dir.path / "b", false, nullptr);
  CHECK(read_file(dir.path / "b" / "checkpoint.tfmc") == ckpt);
  CHECK(read_file(dir.path / "b" / "loss.csv") == loss);

  const auto other = run::RunConfig::from_json(tiny_run_json(4));
  run::load_or_train(other, dir.path / "a", &quiet);
  CHECK(quiet.str().find("no cached checkpoint") != std::string::npos);
  CHECK(read_file(dir.path / "a" / "checkpoint.tfmc") != ckpt);

  const auto dry = run::train_run(cfg, dir.path / "dry", true, nullptr);
  CHECK(dry.curve.ce.empty());
  CHECK(json::parse(read_file(dir.path / "dry" / "manifest.json"))["inputs"]["dry_run"] == true);
}

TEST_CASE("lens runs are cached by checkpoint hash") {
  TempDir dir("tabscope_lens_test");
  const auto cfg = run::RunConfig::from_json(tiny_run_json());
  run::train_run(cfg, dir.path, false, nullptr);
  const auto ckpt = dir.path / "checkpoint.tfmc";
  const auto lens = run::train_lens_run(cfg, ckpt, dir.path / "lens", nullptr);
  CHECK(lens.bundle.decoders.size() == 3);
  const auto bytes = read_file(dir.path / "lens" / "decoders.tfmd");
  CHECK(io::encode_decoder_bundle(run::load_or_train_lens(cfg, ckpt, dir.path / "lens", nullptr)) == bytes);
  const auto again = run::train_lens_run(cfg, ckpt, dir.path / "lens2", nullptr);
  CHECK(read_file(dir.path / "lens2" / "decoders.tfmd") == bytes);
  CHECK(again.manifest == lens.manifest);
}
