#include "tabscope/analysis/interventions.hpp"

#include <algorithm>
#include <cmath>

#include "tabscope/nd/ops.hpp"

namespace tabscope::analysis {

using model::InterventionPlan;

std::vector<InterventionPlan> default_plans(int slots) {
  std::vector<InterventionPlan> plans;
  for (int i = 0; i < slots; ++i) plans.push_back(InterventionPlan::skip(i));
  for (int i = 0; i < slots; ++i) plans.push_back(InterventionPlan::repeat(i));
  for (int i = 0; i + 1 < slots; ++i) plans.push_back(InterventionPlan::swap(i, i + 1));
  return plans;
}

std::vector<InterventionPlan> swap_matrix_plans(int slots) {
  std::vector<InterventionPlan> plans;
  for (int i = 0; i < slots; ++i) {
    for (int j = i + 1; j < slots; ++j) plans.push_back(InterventionPlan::swap(i, j));
  }
  return plans;
}

std::vector<AblationRow> ablation_sweep(const model::TfmModel<float>& m,
                                        const std::vector<prior::Episode>& episodes,
                                        const std::vector<InterventionPlan>& plans) {
  if (episodes.empty()) throw nd::ContractError("ablation_sweep: no episodes");
  for (const auto& p : plans) p.schedule(m.slot_count());  // validate before any work
  std::vector<InterventionPlan> all{InterventionPlan::none()};
  for (const auto& p : plans) {
    if (p.kind != model::PlanKind::kNone) all.push_back(p);
  }
  std::vector<AblationRow> rows;
  for (const auto& plan : all) {
    AblationRow row;
    row.plan = plan;
    for (const auto& ep : episodes) {
      const auto trace = m.forward(ep, plan).trace;
      const auto s = score_readout(
          readout_probabilities(m.decoder, trace.layer_states.back(), ep.n_classes), ep.y_query);
      row.auc += s.auc;
      row.balanced_acc += s.balanced_acc;
      row.entropy += s.entropy;
    }
    const double n = static_cast<double>(episodes.size());
    row.auc /= n;
    row.balanced_acc /= n;
    row.entropy /= n;
    row.delta_vs_baseline = rows.empty() ? 0.0 : rows.front().auc - row.auc;
    rows.push_back(row);
  }
  return rows;
}

Interval bootstrap_mean_ci(const std::vector<double>& values, int resamples, double level,
                           std::uint64_t seed) {
  if (values.empty()) return {};
  RandomStream rng = RandomStream(seed).derive("bootstrap");
  const auto n = static_cast<long>(values.size());
  std::vector<double> means(static_cast<std::size_t>(resamples));
  for (auto& mean : means) {
    double total = 0.0;
    for (long i = 0; i < n; ++i) total += values[static_cast<std::size_t>(rng.uniform_int(0, n - 1))];
    mean = total / static_cast<double>(n);
  }
  std::sort(means.begin(), means.end());
  const double tail = (1.0 - level) / 2.0;
  const auto at = [&](double q) {
    const auto idx = static_cast<std::size_t>(
        std::clamp(std::floor(q * (resamples - 1) + 0.5), 0.0, static_cast<double>(resamples - 1)));
    return means[idx];
  };
  return {at(tail), at(1.0 - tail)};
}

SelfRepairResult self_repair(const model::TfmModel<float>& m,
                             const std::vector<model::DecoderParams<float>>& decoders,
                             const std::vector<prior::Episode>& episodes, int skip_slot,
                             RepairAlignment alignment, std::uint64_t bootstrap_seed) {
  const int slots = m.slot_count();
  if (static_cast<int>(decoders.size()) != slots + 1) {
    throw nd::ContractError("self_repair: " + std::to_string(decoders.size()) +
                            " decoders for " + std::to_string(slots + 1) + " slots");
  }
  if (episodes.empty()) throw nd::ContractError("self_repair: no episodes");
  const auto plan = InterventionPlan::skip(skip_slot);
  plan.schedule(slots);

  SelfRepairResult r;
  r.skip_slot = skip_slot;
  r.baseline.assign(static_cast<std::size_t>(slots + 1), 0.0);
  std::vector<double> ablated_sum(static_cast<std::size_t>(slots + 1), 0.0);
  r.defined = skip_slot + 2 <= slots;
  r.repair_position = r.defined ? skip_slot + 2 : -1;

  for (const auto& ep : episodes) {
    const auto base = m.forward(ep).trace;
    const auto abl = m.forward(ep, plan).trace;
    std::vector<double> base_auc(static_cast<std::size_t>(slots + 1));
    for (int k = 0; k <= slots; ++k) {
      base_auc[k] = score_readout(readout_probabilities(decoders[k], base.layer_states[k],
                                                        ep.n_classes), ep.y_query).auc;
      r.baseline[k] += base_auc[k];
    }
    std::vector<double> abl_at(static_cast<std::size_t>(slots + 1), 0.0);
    for (int k = 0; k < abl.slots(); ++k) {
      const int position = k <= skip_slot ? k : k + 1;
      const int decoder = alignment == RepairAlignment::kRemainingDepth ? position : k;
      abl_at[position] = score_readout(readout_probabilities(decoders[decoder], abl.layer_states[k],
                                                             ep.n_classes), ep.y_query).auc;
      ablated_sum[position] += abl_at[position];
    }
    if (r.defined) {
      r.episode_immediate.push_back(base_auc[r.repair_position] - abl_at[r.repair_position]);
      r.episode_final.push_back(base_auc[slots] - abl_at[slots]);
    }
  }
  const double n = static_cast<double>(episodes.size());
  r.ablated.assign(static_cast<std::size_t>(slots + 1), std::nullopt);
  for (int k = 0; k <= slots; ++k) {
    r.baseline[k] /= n;
    if (k != skip_slot + 1) r.ablated[k] = ablated_sum[k] / n;
  }
  if (r.defined) {
    std::vector<double> recovery;
    for (std::size_t e = 0; e < r.episode_immediate.size(); ++e) {
      recovery.push_back(r.episode_immediate[e] - r.episode_final[e]);
      r.immediate_drop += r.episode_immediate[e] / n;
      r.final_drop += r.episode_final[e] / n;
    }
    r.recovery = r.immediate_drop - r.final_drop;
    r.recovery_ci = bootstrap_mean_ci(recovery, kBootstrapResamples, 0.95, bootstrap_seed);
    r.final_drop_ci = bootstrap_mean_ci(r.episode_final, kBootstrapResamples, 0.95, bootstrap_seed);
  }
  return r;
}

}  // namespace tabscope::analysis
