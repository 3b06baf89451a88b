#pragma once

#include <Eigen/Core>
#include <optional>
#include <string>
#include <vector>

#include "tabscope/model/model.hpp"
#include "tabscope/prior/prior.hpp"

namespace tabscope::analysis {

/// `count` episodes from positions 0, 1, ... of the labelled stream, skipping
/// those whose query rows hold fewer than two classes (AUC undefined).
std::vector<prior::Episode> evaluation_episodes(const prior::PriorConfig& prior,
                                                const std::string& label, int count);

/// Per-episode readout quality of one probability matrix.
struct ReadoutScores {
  double auc = 0.0;
  double balanced_acc = 0.0;
  double entropy = 0.0;
};

ReadoutScores score_readout(const Eigen::MatrixXd& probs, const std::vector<int>& labels);
Eigen::MatrixXd readout_probabilities(const model::DecoderParams<float>& decoder,
                                      const Eigen::MatrixXf& states, int n_classes);

enum class DecoderFamily { kOriginal, kIndividual };
std::string family_name(DecoderFamily family);

struct LensRow {
  int slot = 0;
  DecoderFamily family = DecoderFamily::kOriginal;
  double auc = 0.0;
  double balanced_acc = 0.0;
  double entropy = 0.0;
};

struct LensReport {
  std::vector<LensRow> rows;
  int episodes = 0;

  // AUC per slot for one family; empty when the family is absent.
  std::vector<double> auc(DecoderFamily family) const;
  std::vector<double> entropy(DecoderFamily family) const;
};

/// Slot metrics averaged over episodes. Individual decoders are included when
/// given and must number slot_count() + 1.
LensReport lens_curve(const model::TfmModel<float>& m,
                      const std::vector<model::DecoderParams<float>>* decoders,
                      const std::vector<prior::Episode>& episodes);

struct LensSummary {
  std::vector<double> delta;  // individual - original AUC per slot
  int saturation_original = -1;
  int saturation_individual = -1;
  double entropy_slope_original = 0.0;
  double entropy_slope_individual = 0.0;
};

/// First slot reaching `fraction` of the curve's final value.
int saturation_slot(const std::vector<double>& curve, double fraction = 0.95);
// Least-squares slope of values against slot index.
double slope(const std::vector<double>& values);
LensSummary lens_compare(const LensReport& report);

}  // namespace tabscope::analysis
