#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <json.hpp>
#include <optional>
#include <string>

#include "tabscope/io/checkpoint.hpp"
#include "tabscope/model/config.hpp"
#include "tabscope/prior/prior.hpp"
#include "tabscope/train/trainer.hpp"

namespace tabscope::run {

struct RunConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

nlohmann::json prior_to_json(const prior::PriorConfig& cfg);
prior::PriorConfig prior_from_json(const nlohmann::json& j);

/// Everything one training or analysis command depends on. Sub-seeds are not
/// configurable: they derive from `seed` by stable labels.
struct RunConfig {
  std::string preset = "nano6l";
  model::ModelConfig model = model::ModelConfig::nano6l();
  train::TrainConfig train = train::TrainConfig::desk();
  train::DecoderTrainConfig lens = train::DecoderTrainConfig::desk();
  prior::PriorConfig prior = prior::PriorConfig::desk();
  std::uint64_t seed = 0;

  /// Keys: preset, model, train, train_preset, lens, lens_preset, prior,
  /// prior_preset, seed. Presets apply first, explicit objects override them
  /// field by field.
  static RunConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;

  // Seeds derived from `seed`.
  std::uint64_t model_seed() const;
  std::uint64_t train_seed() const;
  std::uint64_t lens_seed() const;
  std::uint64_t eval_seed() const;
  std::string model_id() const;
};

RunConfig load_run_config(const std::filesystem::path& path);

struct TrainOutcome {
  model::TfmModel<float> model;
  train::LossCurve curve;
  std::string manifest;
};

/// Trains (or, with dry_run, validates and trains zero steps) and writes
/// checkpoint.tfmc, loss.csv and manifest.json into out_dir.
TrainOutcome train_run(const RunConfig& cfg, const std::filesystem::path& out_dir, bool dry_run,
                       std::ostream* log);

struct LensOutcome {
  io::DecoderBundle bundle;
  std::string manifest;
};

/// Trains per-slot decoders for a checkpoint; writes decoders.tfmd,
/// lens_train.csv and manifest.json into out_dir.
LensOutcome train_lens_run(const RunConfig& cfg, const std::filesystem::path& checkpoint,
                           const std::filesystem::path& out_dir, std::ostream* log);

/// Loads out_dir/checkpoint.tfmc when its manifest records the same inputs,
/// otherwise trains.
model::TfmModel<float> load_or_train(const RunConfig& cfg, const std::filesystem::path& out_dir,
                                     std::ostream* log);
io::DecoderBundle load_or_train_lens(const RunConfig& cfg, const std::filesystem::path& checkpoint,
                                     const std::filesystem::path& out_dir, std::ostream* log);

nlohmann::json train_inputs(const RunConfig& cfg);
nlohmann::json lens_inputs(const RunConfig& cfg, const std::filesystem::path& checkpoint);

}  // namespace tabscope::run
