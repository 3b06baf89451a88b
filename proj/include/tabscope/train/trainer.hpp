#pragma once

#include <cstdint>
#include <functional>
#include <json.hpp>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "tabscope/model/model.hpp"
#include "tabscope/prior/prior.hpp"

namespace tabscope::train {

struct TrainConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Non-finite loss or gradient during training.
struct TrainingDiverged : std::runtime_error {
  TrainingDiverged(int step, const std::string& what)
      : std::runtime_error("training diverged at step " + std::to_string(step) + ": " + what),
        step(step) {}
  int step;
};

struct TrainConfig {
  int steps = 10000;
  int batch_size = 512;
  int micro_batch = 4;
  double peak_lr = 1e-4;
  int warmup_steps = 2000;
  double grad_clip = 1.0;
  double weight_decay = 0.0;
  double final_lr = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
  static TrainConfig paper();
  static TrainConfig desk();
};

struct DecoderTrainConfig {
  int epochs = 200;
  int batch_size = 8;
  int steps_per_epoch = 512;
  double lr = 3e-5;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static DecoderTrainConfig from_json(const nlohmann::json& j);
  static DecoderTrainConfig paper();
  static DecoderTrainConfig desk();
};

/// Linear ramp to peak_lr over warmup_steps, then one cosine half-period down
/// to final_lr at `steps`.
double cosine_warmup_lr(int step, const TrainConfig& cfg);

/// Rescales all gradients in place so their global L2 norm is at most
/// max_norm. Returns the norm before clipping.
double clip_gradients(std::span<const std::span<float>> grads, double max_norm);
double global_norm(std::span<const std::span<float>> grads);

/// Adam with decoupled weight decay; state is kept in double.
class Adam {
 public:
  explicit Adam(const std::vector<nd::Tensor<float>>& params, double beta1 = 0.9,
                double beta2 = 0.999, double eps = 1e-8);
  // Applies one update from the parameters' current grads.
  void step(std::vector<nd::Tensor<float>>& params, double lr, double weight_decay = 0.0);
  long long steps_taken() const { return t_; }

 private:
  double beta1_, beta2_, eps_;
  long long t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

struct LossCurve {
  std::vector<double> ce;
  std::vector<double> lr;
  std::vector<double> grad_norm_pre;
  std::vector<double> grad_norm_post;

  std::size_t size() const { return ce.size(); }
  void validate() const;
  std::string to_csv() const;
};

using StepCallback = std::function<void(int step, const LossCurve& curve)>;

/// Mean over the episode's query rows of the cross-entropy; records on the
/// active tape when there is one.
nd::Tensor<float> episode_loss(const model::TfmModel<float>& m, const prior::Episode& ep);

/// Trains all parameters. Episode b of step s is position s*batch_size + b of
/// the stream labelled "pretrain" over `prior` (whose seed is replaced by the
/// config seed).
LossCurve pretrain(model::TfmModel<float>& m, const prior::PriorConfig& prior,
                   const TrainConfig& cfg, const StepCallback& on_step = {});

struct DecoderTrainLog {
  std::vector<double> epoch_ce;  // mean cross-entropy per epoch
};

/// One decoder per trace slot, copy-initialized from the original decoder and
/// fit on that slot's query states with the backbone frozen.
std::vector<model::DecoderParams<float>> train_layer_decoders(
    const model::TfmModel<float>& m, const prior::PriorConfig& prior, const DecoderTrainConfig& cfg,
    std::vector<DecoderTrainLog>* logs = nullptr);

}  // namespace tabscope::train
