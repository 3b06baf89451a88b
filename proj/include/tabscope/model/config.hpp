#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <json.hpp>
#include <stdexcept>
#include <string>
#include <vector>

namespace tabscope::model {

struct ModelConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct PlanError : std::out_of_range {
  using std::out_of_range::out_of_range;
};

// Episode wider than the encoder was built for.
struct CapacityError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ModelConfig {
  int embed_dim = 64;
  int n_heads = 4;
  int ff_dim = 256;
  int n_blocks = 6;
  bool looped = false;
  int n_loops = 6;
  int max_classes = 4;
  double ln_eps = 1e-5;
  int max_features = 64;

  void validate() const;
  // Execution slots: distinct blocks for deep models, loop iterations otherwise.
  int slot_count() const { return looped ? n_loops : n_blocks; }
  int stored_blocks() const { return looped ? 1 : n_blocks; }

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);

  static ModelConfig nano6l();
  static ModelConfig nano1l();
  static ModelConfig nanolooped();
  // d=192, 4 heads, ff=768, 10 classes.
  static ModelConfig paperdims();
  static ModelConfig preset(const std::string& name);
};

/// Exact parameter count of the canonical architecture.
std::int64_t param_count(const ModelConfig& cfg);

enum class PlanKind { kNone, kSkip, kRepeat, kSwap };

/// Structural intervention on execution slots 0..slot_count-1.
struct InterventionPlan {
  PlanKind kind = PlanKind::kNone;
  int i = 0;
  int j = 0;

  static InterventionPlan none() { return {}; }
  static InterventionPlan skip(int slot) { return {PlanKind::kSkip, slot, 0}; }
  static InterventionPlan repeat(int slot) { return {PlanKind::kRepeat, slot, 0}; }
  static InterventionPlan swap(int a, int b) { return {PlanKind::kSwap, a, b}; }

  /// Slot order actually executed for a model with `slots` slots.
  std::vector<int> schedule(int slots) const;
  std::string kind_name() const;
  std::string label() const;  // e.g. "skip(2)"
  nlohmann::json to_json() const;
  static InterventionPlan from_json(const nlohmann::json& j);
  static InterventionPlan parse(const std::string& text);

  bool operator==(const InterventionPlan&) const = default;
};

/// Query-row label-channel states: entry 0 is the encoder output, entry k the
/// state after the k-th executed slot.
struct ActivationTrace {
  std::vector<Eigen::MatrixXf> layer_states;
  std::string model_id;
  std::uint64_t episode_id = 0;
  InterventionPlan plan;

  int slots() const { return static_cast<int>(layer_states.size()); }
  int n_query() const { return layer_states.empty() ? 0 : static_cast<int>(layer_states[0].rows()); }
  int dim() const { return layer_states.empty() ? 0 : static_cast<int>(layer_states[0].cols()); }
  // Throws std::invalid_argument on ragged or non-finite states.
  void validate() const;
};

}  // namespace tabscope::model
