#pragma once

#include <optional>
#include <vector>

#include "tabscope/analysis/metrics.hpp"
#include "tabscope/analysis/probes.hpp"
#include "tabscope/model/model.hpp"

namespace tabscope::analysis {

inline constexpr double kPcaRetained = 0.95;
inline constexpr int kPcaSampleCap = 5000;

struct GapOptions {
  GapMetric metric = GapMetric::kCosine;
  int n_pairs = 100;  // <= 0: exhaustive
  bool use_pca = true;
};

/// Per-slot separation gap of one trace. PCA is fit once on the states of all
/// slots pooled, and the same index pairs are used at every slot. Slots whose
/// gap is degenerate hold no value.
std::vector<std::optional<GapResult>> gap_curve(const model::ActivationTrace& trace,
                                                const std::vector<int>& labels,
                                                const GapOptions& options, RandomStream& rng);

struct MeanGapCurve {
  std::vector<std::optional<GapResult>> slots;  // means over episodes with a value
  std::vector<int> episodes_used;
};

MeanGapCurve mean_gap_curve(const model::TfmModel<float>& m,
                            const std::vector<prior::Episode>& episodes, const GapOptions& options,
                            std::uint64_t seed);

struct MeanSimilarity {
  SimilarityGrid grid;  // entrywise mean
  int episodes = 0;
};

MeanSimilarity mean_similarity(const model::TfmModel<float>& m,
                               const std::vector<prior::Episode>& episodes);

struct MeanProbeGrid {
  Eigen::MatrixXd auc_raw;
  Eigen::MatrixXd auc_normalized;
  double l2 = 0.0;
  int episodes = 0;
  int skipped = 0;  // episodes whose support could not be split
  int unconverged = 0;
  double n_train = 0.0;  // mean
  double n_eval = 0.0;
};

/// Uses episodes in order until `wanted` of them admit a probe split.
MeanProbeGrid mean_probe_grid(const model::TfmModel<float>& m,
                              const std::vector<prior::Episode>& episodes, int wanted, double l2,
                              std::uint64_t seed);

/// Probe split for a bare trace: query rows divided per class into train and
/// evaluation halves.
ProbeSplit trace_probe_split(const model::ActivationTrace& trace, const std::vector<int>& labels,
                             RandomStream& rng);

}  // namespace tabscope::analysis
