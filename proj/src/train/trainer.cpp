#include "tabscope/train/trainer.hpp"

#include <cmath>
#include <iomanip>
#include <numbers>
#include <sstream>

#include "tabscope/nd/ops.hpp"

namespace tabscope::train {

using nlohmann::json;

namespace {

template <typename Cfg, typename Fields>
Cfg parse_config(const json& j, const char* name, Fields&& fields) {
  if (!j.is_object()) throw TrainConfigError(std::string(name) + ": expected a JSON object");
  Cfg cfg;
  const auto table = fields(cfg);
  for (const auto& [key, _] : j.items()) {
    bool known = false;
    for (const auto& [k, __] : table) known = known || k == key;
    if (!known) throw TrainConfigError(std::string(name) + ": unknown key '" + key + "'");
  }
  for (const auto& [key, read] : table) {
    if (!j.contains(key)) continue;
    try {
      read(j.at(key));
    } catch (const json::exception&) {
      throw TrainConfigError(std::string(name) + ": field '" + key + "' has the wrong type");
    }
  }
  cfg.validate();
  return cfg;
}

template <typename F>
std::function<void(const json&)> field(F& target) {
  return [&target](const json& v) { v.get_to(target); };
}

std::vector<std::span<float>> grad_spans(std::vector<nd::Tensor<float>>& params) {
  std::vector<std::span<float>> out;
  out.reserve(params.size());
  for (auto& p : params) out.push_back(p.mutable_grad());
  return out;
}

}  // namespace

void TrainConfig::validate() const {
  const auto fail = [](const std::string& what) { throw TrainConfigError("train config: " + what); };
  if (steps < 0) fail("steps must be >= 0");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (micro_batch < 1 || batch_size % micro_batch != 0) fail("micro_batch must divide batch_size");
  if (warmup_steps < 0 || (steps > 0 && warmup_steps >= steps)) fail("warmup_steps must be < steps");
  if (!(grad_clip > 0.0)) fail("grad_clip must be > 0");
  if (!(peak_lr >= 0.0) || !(final_lr >= 0.0)) fail("learning rates must be >= 0");
  if (!(weight_decay >= 0.0)) fail("weight_decay must be >= 0");
}

json TrainConfig::to_json() const {
  return json{{"steps", steps},           {"batch_size", batch_size}, {"micro_batch", micro_batch},
              {"peak_lr", peak_lr},       {"warmup_steps", warmup_steps},
              {"grad_clip", grad_clip},   {"weight_decay", weight_decay},
              {"final_lr", final_lr},     {"seed", seed}};
}

TrainConfig TrainConfig::from_json(const json& j) {
  return parse_config<TrainConfig>(j, "train config", [](TrainConfig& c) {
    return std::vector<std::pair<std::string, std::function<void(const json&)>>>{
        {"steps", field(c.steps)},         {"batch_size", field(c.batch_size)},
        {"micro_batch", field(c.micro_batch)}, {"peak_lr", field(c.peak_lr)},
        {"warmup_steps", field(c.warmup_steps)}, {"grad_clip", field(c.grad_clip)},
        {"weight_decay", field(c.weight_decay)}, {"final_lr", field(c.final_lr)},
        {"seed", field(c.seed)}};
  });
}

TrainConfig TrainConfig::paper() { return TrainConfig{}; }

TrainConfig TrainConfig::desk() {
  TrainConfig cfg;
  cfg.steps = 3000;
  cfg.batch_size = 64;
  cfg.micro_batch = 4;
  cfg.warmup_steps = 600;
  return cfg;
}

void DecoderTrainConfig::validate() const {
  const auto fail = [](const std::string& what) {
    throw TrainConfigError("decoder train config: " + what);
  };
  if (epochs < 1) fail("epochs must be >= 1");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (steps_per_epoch < 1) fail("steps_per_epoch must be >= 1");
  if (!(lr > 0.0)) fail("lr must be > 0");
}

json DecoderTrainConfig::to_json() const {
  return json{{"epochs", epochs}, {"batch_size", batch_size}, {"steps_per_epoch", steps_per_epoch},
              {"lr", lr},         {"seed", seed}};
}

DecoderTrainConfig DecoderTrainConfig::from_json(const json& j) {
  return parse_config<DecoderTrainConfig>(j, "decoder train config", [](DecoderTrainConfig& c) {
    return std::vector<std::pair<std::string, std::function<void(const json&)>>>{
        {"epochs", field(c.epochs)}, {"batch_size", field(c.batch_size)},
        {"steps_per_epoch", field(c.steps_per_epoch)}, {"lr", field(c.lr)},
        {"seed", field(c.seed)}};
  });
}

DecoderTrainConfig DecoderTrainConfig::paper() { return DecoderTrainConfig{}; }

DecoderTrainConfig DecoderTrainConfig::desk() {
  DecoderTrainConfig cfg;
  cfg.epochs = 8;
  cfg.batch_size = 8;
  cfg.steps_per_epoch = 64;
  cfg.lr = 1e-3;
  return cfg;
}

double cosine_warmup_lr(int step, const TrainConfig& cfg) {
  if (step < 0 || step > cfg.steps) {
    throw TrainConfigError("cosine_warmup_lr: step " + std::to_string(step) + " outside [0, " +
                           std::to_string(cfg.steps) + "]");
  }
  if (step < cfg.warmup_steps) return cfg.peak_lr * step / cfg.warmup_steps;
  const int span = cfg.steps - cfg.warmup_steps;
  if (span <= 0) return cfg.peak_lr;
  const double progress = static_cast<double>(step - cfg.warmup_steps) / span;
  return cfg.final_lr +
         0.5 * (cfg.peak_lr - cfg.final_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

double global_norm(std::span<const std::span<float>> grads) {
  double total = 0.0;
  for (const auto g : grads) {
    for (const float v : g) total += static_cast<double>(v) * v;
  }
  if (!std::isfinite(total)) throw nd::NumericError("clip_gradients: non-finite gradient");
  return std::sqrt(total);
}

double clip_gradients(std::span<const std::span<float>> grads, double max_norm) {
  if (!(max_norm > 0.0)) throw TrainConfigError("clip_gradients: max_norm must be > 0");
  const double norm = global_norm(grads);
  if (norm > max_norm) {
    const double factor = max_norm / norm;
    for (const auto g : grads) {
      for (float& v : g) v = static_cast<float>(v * factor);
    }
  }
  return norm;
}

Adam::Adam(const std::vector<nd::Tensor<float>>& params, double beta1, double beta2, double eps)
    : beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& p : params) {
    m_.emplace_back(p.size(), 0.0);
    v_.emplace_back(p.size(), 0.0);
  }
}

void Adam::step(std::vector<nd::Tensor<float>>& params, double lr, double weight_decay) {
  if (params.size() != m_.size()) throw nd::ContractError("Adam: parameter list changed");
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto data = params[i].mutable_data();
    const auto grad = params[i].mutable_grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t k = 0; k < data.size(); ++k) {
      const double g = grad[k];
      m[k] = beta1_ * m[k] + (1.0 - beta1_) * g;
      v[k] = beta2_ * v[k] + (1.0 - beta2_) * g * g;
      if (!std::isfinite(m[k]) || !std::isfinite(v[k])) {
        throw nd::NumericError("Adam: non-finite optimizer state");
      }
      const double update = (m[k] / c1) / (std::sqrt(v[k] / c2) + eps_) + weight_decay * data[k];
      data[k] = static_cast<float>(data[k] - lr * update);
    }
  }
}

void LossCurve::validate() const {
  const auto n = ce.size();
  if (lr.size() != n || grad_norm_pre.size() != n || grad_norm_post.size() != n) {
    throw nd::ContractError("loss curve: columns have different lengths");
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(ce[i]) || !std::isfinite(lr[i]) || !std::isfinite(grad_norm_pre[i]) ||
        !std::isfinite(grad_norm_post[i])) {
      throw nd::NumericError("loss curve: non-finite entry at step " + std::to_string(i));
    }
  }
}

std::string LossCurve::to_csv() const {
  std::ostringstream out;
  out << "step,lr,ce,grad_norm_pre,grad_norm_post\n" << std::setprecision(9);
  for (std::size_t i = 0; i < ce.size(); ++i) {
    out << i << ',' << lr[i] << ',' << ce[i] << ',' << grad_norm_pre[i] << ',' << grad_norm_post[i]
        << '\n';
  }
  return out.str();
}

nd::Tensor<float> episode_loss(const model::TfmModel<float>& m, const prior::Episode& ep) {
  const auto result = m.forward(ep);
  return nd::cross_entropy(result.logits, std::span<const int>(ep.y_query));
}

LossCurve pretrain(model::TfmModel<float>& m, const prior::PriorConfig& prior,
                   const TrainConfig& cfg, const StepCallback& on_step) {
  cfg.validate();
  prior.validate();
  prior::PriorConfig stream_cfg = prior;
  stream_cfg.seed = cfg.seed;
  const prior::EpisodeStream stream(stream_cfg, "pretrain");
  auto params = m.parameters();
  Adam adam(params);
  LossCurve curve;
  const float inv_batch = 1.0f / static_cast<float>(cfg.batch_size);
  for (int step = 0; step < cfg.steps; ++step) {
    for (auto& p : params) p.zero_grad();
    double ce_total = 0.0;
    try {
      const int micro_count = cfg.batch_size / cfg.micro_batch;
      for (int mb = 0; mb < micro_count; ++mb) {
        nd::GradTape<float> tape;
        nd::TapeScope<float> scope(tape);
        // Episodes of one micro-batch share a tape; the loss is their scaled sum.
        nd::Tensor<float> loss;
        for (int e = 0; e < cfg.micro_batch; ++e) {
          const auto position =
              static_cast<std::uint64_t>(step) * cfg.batch_size + mb * cfg.micro_batch + e;
          const auto ce = episode_loss(m, stream.episode(position));
          ce_total += ce.item();
          const auto term = nd::scale(ce, inv_batch);
          loss = loss.defined() ? nd::add(loss, term) : term;
        }
        tape.backward(loss);
      }
      auto grads = grad_spans(params);
      const double pre = clip_gradients(grads, cfg.grad_clip);
      const double post = global_norm(grads);
      const double lr = cosine_warmup_lr(step, cfg);
      adam.step(params, lr, cfg.weight_decay);
      curve.ce.push_back(ce_total / cfg.batch_size);
      curve.lr.push_back(lr);
      curve.grad_norm_pre.push_back(pre);
      curve.grad_norm_post.push_back(post);
    } catch (const nd::NumericError& e) {
      throw TrainingDiverged(step, e.what());
    }
    if (on_step) on_step(step, curve);
  }
  for (auto& p : params) p.zero_grad();
  return curve;
}

std::vector<model::DecoderParams<float>> train_layer_decoders(
    const model::TfmModel<float>& m, const prior::PriorConfig& prior, const DecoderTrainConfig& cfg,
    std::vector<DecoderTrainLog>* logs) {
  cfg.validate();
  prior.validate();
  prior::PriorConfig stream_cfg = prior;
  stream_cfg.seed = cfg.seed;
  const prior::EpisodeStream stream(stream_cfg, "decoders");
  const int pool = cfg.batch_size * cfg.steps_per_epoch;
  const int slots = m.slot_count() + 1;

  // The backbone is frozen, so each episode's slot states are computed once.
  struct Sample {
    std::vector<Eigen::MatrixXf> states;
    std::vector<int> labels;
    int n_classes;
  };
  std::vector<Sample> samples;
  samples.reserve(static_cast<std::size_t>(pool));
  for (int i = 0; i < pool; ++i) {
    const auto ep = stream.episode(static_cast<std::uint64_t>(i));
    auto trace = m.forward(ep).trace;
    samples.push_back({std::move(trace.layer_states), ep.y_query, ep.n_classes});
  }

  std::vector<model::DecoderParams<float>> decoders;
  if (logs) logs->assign(static_cast<std::size_t>(slots), {});
  RandomStream order_rng = RandomStream(cfg.seed).derive("decoder-order");
  std::vector<std::vector<std::size_t>> orders;
  for (int e = 0; e < cfg.epochs; ++e) orders.push_back(order_rng.permutation(samples.size()));
  const float inv_batch = 1.0f / static_cast<float>(cfg.batch_size);

  for (int slot = 0; slot < slots; ++slot) {
    auto decoder = m.decoder.clone();
    auto params = decoder.parameters();
    Adam adam(params);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
      double ce_total = 0.0;
      for (int step = 0; step < cfg.steps_per_epoch; ++step) {
        for (auto& p : params) p.zero_grad();
        nd::GradTape<float> tape;
        nd::TapeScope<float> scope(tape);
        nd::Tensor<float> loss;
        for (int b = 0; b < cfg.batch_size; ++b) {
          const auto& s = samples[orders[epoch][step * cfg.batch_size + b]];
          const auto logits = model::decode(decoder, model::from_matrix(s.states[slot]), s.n_classes);
          const auto ce = nd::cross_entropy(logits, std::span<const int>(s.labels));
          ce_total += ce.item();
          const auto term = nd::scale(ce, inv_batch);
          loss = loss.defined() ? nd::add(loss, term) : term;
        }
        tape.backward(loss);
        adam.step(params, cfg.lr);
      }
      if (logs) (*logs)[slot].epoch_ce.push_back(ce_total / pool);
    }
    for (auto& p : params) p.zero_grad();
    decoders.push_back(std::move(decoder));
  }
  return decoders;
}

}  // namespace tabscope::train
