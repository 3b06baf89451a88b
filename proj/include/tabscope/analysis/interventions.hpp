#pragma once

#include <optional>
#include <vector>

#include "tabscope/analysis/lens.hpp"
#include "tabscope/model/config.hpp"
#include "tabscope/model/model.hpp"

namespace tabscope::analysis {

struct AblationRow {
  model::InterventionPlan plan;
  double auc = 0.0;
  double balanced_acc = 0.0;
  double entropy = 0.0;
  double delta_vs_baseline = 0.0;  // baseline AUC - plan AUC
};

/// All single skips, all single repeats, all adjacent swaps.
std::vector<model::InterventionPlan> default_plans(int slots);
// Every swap(i, j) with i < j.
std::vector<model::InterventionPlan> swap_matrix_plans(int slots);

/// First row is the "none" baseline; requested "none" plans are not repeated.
std::vector<AblationRow> ablation_sweep(const model::TfmModel<float>& m,
                                        const std::vector<prior::Episode>& episodes,
                                        const std::vector<model::InterventionPlan>& plans);

enum class RepairAlignment {
  kRemainingDepth,  // post-skip state k reads with the decoder of baseline slot k+1
  kAbsoluteIndex,   // post-skip state k reads with the decoder of baseline slot k
};

struct Interval {
  double low = 0.0;
  double high = 0.0;
};

struct SelfRepairResult {
  int skip_slot = 0;
  // Mean AUC per baseline position 0..L. The ablated curve holds no value at
  // the skipped position skip_slot+1.
  std::vector<double> baseline;
  std::vector<std::optional<double>> ablated;
  bool defined = false;  // false when no state follows the skipped slot
  int repair_position = -1;  // first baseline position after the skip
  double immediate_drop = 0.0;
  double final_drop = 0.0;
  double recovery = 0.0;
  Interval recovery_ci;
  Interval final_drop_ci;
  std::vector<double> episode_immediate;
  std::vector<double> episode_final;
};

inline constexpr int kBootstrapResamples = 2000;

/// Lens curves with the individual decoders, before and after skip(skip_slot).
/// The position of ablated state k (k > skip_slot) is k+1; the immediate drop
/// is measured at the first post-skip position, the final drop at slot L, and
/// 95% percentile-bootstrap intervals resample episodes.
SelfRepairResult self_repair(const model::TfmModel<float>& m,
                             const std::vector<model::DecoderParams<float>>& decoders,
                             const std::vector<prior::Episode>& episodes, int skip_slot,
                             RepairAlignment alignment = RepairAlignment::kRemainingDepth,
                             std::uint64_t bootstrap_seed = 0);

/// Percentile bootstrap of the mean.
Interval bootstrap_mean_ci(const std::vector<double>& values, int resamples, double level,
                           std::uint64_t seed);

}  // namespace tabscope::analysis
