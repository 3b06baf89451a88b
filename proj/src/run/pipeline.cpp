#include "tabscope/run/pipeline.hpp"

#include <chrono>
#include <ostream>
#include <sstream>

#include "tabscope/core/binary_io.hpp"
#include "tabscope/core/random.hpp"
#include "tabscope/report/report.hpp"

namespace tabscope::run {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

void reject_unknown(const json& j, const char* what, std::initializer_list<const char*> keys) {
  if (!j.is_object()) throw RunConfigError(std::string(what) + ": expected a JSON object");
  for (const auto& [key, _] : j.items()) {
    bool known = false;
    for (const char* k : keys) known = known || key == k;
    if (!known) throw RunConfigError(std::string(what) + ": unknown key '" + key + "'");
  }
}

// Overlays the fields present in `patch` on `base`.
json merged(json base, const json& patch) {
  for (const auto& [key, value] : patch.items()) base[key] = value;
  return base;
}

template <typename T>
T get_field(const json& j, const char* key, const char* what) {
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw RunConfigError(std::string(what) + ": field '" + key + "' has the wrong type");
  }
}

std::uint64_t derived(std::uint64_t seed, const char* label) {
  return RandomStream(seed).derive(label).seed();
}

}  // namespace

json prior_to_json(const prior::PriorConfig& c) {
  return json{{"min_features", c.min_features},       {"max_features", c.max_features},
              {"max_classes", c.max_classes},         {"max_seq_len", c.max_seq_len},
              {"train_ratio_min", c.train_ratio_min}, {"train_ratio_max", c.train_ratio_max},
              {"seed", c.seed}};
}

prior::PriorConfig prior_from_json(const json& j) {
  reject_unknown(j, "prior config",
                 {"min_features", "max_features", "max_classes", "max_seq_len", "train_ratio_min",
                  "train_ratio_max", "seed"});
  prior::PriorConfig c;
  const char* what = "prior config";
  if (j.contains("min_features")) c.min_features = get_field<int>(j, "min_features", what);
  if (j.contains("max_features")) c.max_features = get_field<int>(j, "max_features", what);
  if (j.contains("max_classes")) c.max_classes = get_field<int>(j, "max_classes", what);
  if (j.contains("max_seq_len")) c.max_seq_len = get_field<int>(j, "max_seq_len", what);
  if (j.contains("train_ratio_min")) c.train_ratio_min = get_field<double>(j, "train_ratio_min", what);
  if (j.contains("train_ratio_max")) c.train_ratio_max = get_field<double>(j, "train_ratio_max", what);
  if (j.contains("seed")) c.seed = get_field<std::uint64_t>(j, "seed", what);
  try {
    c.validate();
  } catch (const prior::ConfigError& e) {
    throw RunConfigError(e.what());
  }
  return c;
}

RunConfig RunConfig::from_json(const json& j) {
  reject_unknown(j, "run config",
                 {"preset", "model", "train", "train_preset", "lens", "lens_preset", "prior",
                  "prior_preset", "seed"});
  RunConfig c;
  try {
    if (j.contains("preset")) {
      c.preset = get_field<std::string>(j, "preset", "run config");
      c.model = model::ModelConfig::preset(c.preset);
    }
    if (j.contains("model")) {
      c.model = model::ModelConfig::from_json(merged(c.model.to_json(), j.at("model")));
      if (!j.contains("preset")) c.preset = "custom";
    }
    const auto pick = [&](const char* key) {
      const auto name = get_field<std::string>(j, key, "run config");
      if (name != "desk" && name != "paper") {
        throw RunConfigError(std::string("run config: ") + key + " must be 'desk' or 'paper'");
      }
      return name == "desk";
    };
    if (j.contains("train_preset")) {
      c.train = pick("train_preset") ? train::TrainConfig::desk() : train::TrainConfig::paper();
    }
    if (j.contains("train")) {
      c.train = train::TrainConfig::from_json(merged(c.train.to_json(), j.at("train")));
    }
    if (j.contains("lens_preset")) {
      c.lens = pick("lens_preset") ? train::DecoderTrainConfig::desk()
                                   : train::DecoderTrainConfig::paper();
    }
    if (j.contains("lens")) {
      c.lens = train::DecoderTrainConfig::from_json(merged(c.lens.to_json(), j.at("lens")));
    }
    if (j.contains("prior_preset")) {
      c.prior = pick("prior_preset") ? prior::PriorConfig::desk() : prior::PriorConfig::paper();
    }
    if (j.contains("prior")) c.prior = prior_from_json(merged(prior_to_json(c.prior), j.at("prior")));
    if (j.contains("seed")) c.seed = get_field<std::uint64_t>(j, "seed", "run config");
  } catch (const model::ModelConfigError& e) {
    throw RunConfigError(e.what());
  } catch (const train::TrainConfigError& e) {
    throw RunConfigError(e.what());
  }
  return c;
}

json RunConfig::to_json() const {
  auto tj = train.to_json();
  tj.erase("seed");
  auto lj = lens.to_json();
  lj.erase("seed");
  auto pj = prior_to_json(prior);
  pj.erase("seed");
  return json{{"preset", preset}, {"model", model.to_json()}, {"train", tj},
              {"lens", lj},       {"prior", pj},              {"seed", seed}};
}

std::uint64_t RunConfig::model_seed() const { return derived(seed, "model"); }
std::uint64_t RunConfig::train_seed() const { return derived(seed, "train"); }
std::uint64_t RunConfig::lens_seed() const { return derived(seed, "lens"); }
std::uint64_t RunConfig::eval_seed() const { return derived(seed, "eval"); }
std::string RunConfig::model_id() const { return preset + "-s" + std::to_string(seed); }

RunConfig load_run_config(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw RunConfigError(path.string() + ": " + e.what());
  }
  return RunConfig::from_json(j);
}

json train_inputs(const RunConfig& cfg) {
  return json{{"command", "train"},
              {"config", cfg.to_json()},
              {"seeds", {{"root", cfg.seed}, {"model", cfg.model_seed()}, {"train", cfg.train_seed()}}}};
}

json lens_inputs(const RunConfig& cfg, const fs::path& checkpoint) {
  auto lc = cfg.lens;
  lc.seed = cfg.lens_seed();
  return json{{"command", "train-lens"},
              {"checkpoint", sha1_hex(read_file(checkpoint))},
              {"lens", lc.to_json()},
              {"prior", prior_to_json(cfg.prior)},
              {"seeds", {{"root", cfg.seed}, {"lens", lc.seed}}}};
}

TrainOutcome train_run(const RunConfig& cfg, const fs::path& out_dir, bool dry_run,
                       std::ostream* log) {
  auto tc = cfg.train;
  tc.seed = cfg.train_seed();
  if (dry_run) tc.steps = 0;
  tc.validate();
  cfg.prior.validate();
  auto m = model::TfmModel<float>::initialize(cfg.model, cfg.model_seed());
  m.model_id = cfg.model_id();
  auto inputs = train_inputs(cfg);
  if (dry_run) inputs["dry_run"] = true;
  report::ReportWriter writer(out_dir, inputs);

  const auto start = std::chrono::steady_clock::now();
  const auto on_step = [&](int step, const train::LossCurve& curve) {
    if (!log || (step + 1) % 50 != 0) return;
    double mean = 0.0;
    for (int s = step - 49; s <= step; ++s) mean += curve.ce[s] / 50.0;
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    *log << "step " << step + 1 << "/" << tc.steps << " ce " << mean << " lr " << curve.lr[step]
         << " elapsed " << static_cast<int>(secs) << "s" << std::endl;
  };
  auto curve = train::pretrain(m, cfg.prior, tc, on_step);
  curve.validate();
  writer.raw("checkpoint.tfmc", io::encode_checkpoint(m));
  writer.raw("loss.csv", "# manifest " + writer.hash() + "\n" + curve.to_csv());
  writer.finish();
  return {std::move(m), std::move(curve), writer.hash()};
}

LensOutcome train_lens_run(const RunConfig& cfg, const fs::path& checkpoint, const fs::path& out_dir,
                           std::ostream* log) {
  const auto m = io::load_checkpoint(checkpoint);
  auto lc = cfg.lens;
  lc.seed = cfg.lens_seed();
  const auto backbone_before = io::parameter_hash(m.backbone_parameters());
  report::ReportWriter writer(out_dir, lens_inputs(cfg, checkpoint));
  std::vector<train::DecoderTrainLog> logs;
  if (log) *log << "training " << m.slot_count() + 1 << " slot decoders" << std::endl;
  io::DecoderBundle bundle{m.model_id, train::train_layer_decoders(m, cfg.prior, lc, &logs)};
  if (io::parameter_hash(m.backbone_parameters()) != backbone_before) {
    throw std::logic_error("train-lens: backbone parameters changed");
  }
  report::Table table{{"slot", "epoch", "ce"}, {}};
  for (std::size_t k = 0; k < logs.size(); ++k) {
    for (std::size_t e = 0; e < logs[k].epoch_ce.size(); ++e) {
      table.add({std::to_string(k), std::to_string(e), report::format_number(logs[k].epoch_ce[e])});
    }
  }
  writer.raw("decoders.tfmd", io::encode_decoder_bundle(bundle));
  writer.csv("lens_train.csv", table);
  writer.finish();
  return {std::move(bundle), writer.hash()};
}

namespace {

bool manifest_matches(const fs::path& dir, const std::string& expected) {
  try {
    const auto j = json::parse(read_file(dir / "manifest.json"));
    return j.value("manifest", std::string()) == expected;
  } catch (const std::exception&) {
    return false;
  }
}

}  // namespace

model::TfmModel<float> load_or_train(const RunConfig& cfg, const fs::path& out_dir,
                                     std::ostream* log) {
  const auto expected = report::manifest_hash(train_inputs(cfg));
  if (manifest_matches(out_dir, expected) && fs::exists(out_dir / "checkpoint.tfmc")) {
    return io::load_checkpoint(out_dir / "checkpoint.tfmc");
  }
  if (log) *log << "no cached checkpoint in " << out_dir << ", training " << cfg.preset << std::endl;
  return train_run(cfg, out_dir, false, log).model;
}

io::DecoderBundle load_or_train_lens(const RunConfig& cfg, const fs::path& checkpoint,
                                     const fs::path& out_dir, std::ostream* log) {
  if (manifest_matches(out_dir, report::manifest_hash(lens_inputs(cfg, checkpoint))) &&
      fs::exists(out_dir / "decoders.tfmd")) {
    return io::load_decoder_bundle(out_dir / "decoders.tfmd");
  }
  return train_lens_run(cfg, checkpoint, out_dir, log).bundle;
}

}  // namespace tabscope::run
