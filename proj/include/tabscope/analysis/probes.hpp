#pragma once

#include <Eigen/Core>
#include <span>
#include <stdexcept>
#include <vector>

#include "tabscope/core/random.hpp"
#include "tabscope/model/model.hpp"
#include "tabscope/prior/prior.hpp"

namespace tabscope::analysis {

struct ProbeSplitError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

inline constexpr int kMinSupportPerClass = 4;

struct ProbeSplit {
  std::vector<Eigen::MatrixXd> train;  // per slot, diverted support rows
  std::vector<Eigen::MatrixXd> eval;   // per slot, original query rows
  std::vector<int> y_train;
  std::vector<int> y_eval;
  std::vector<int> diverted;  // support row indices moved to the query side
  int n_classes = 2;

  int slots() const { return static_cast<int>(train.size()); }
};

/// Moves half of each class's support rows (rounded down) to the front of the
/// query set and captures one trace. The moved rows carry the unknown-label
/// vector like any query row.
ProbeSplit make_probe_split(const model::TfmModel<float>& m, const prior::Episode& episode,
                            RandomStream& rng);

/// The episode make_probe_split runs, for inspection.
prior::Episode probe_episode(const prior::Episode& episode, const std::vector<int>& diverted);
std::vector<int> choose_diverted(const prior::Episode& episode, RandomStream& rng);

struct Probe {
  Eigen::MatrixXd weight;  // [d, C-1]; class 0 is the reference
  Eigen::VectorXd bias;    // [C-1]
  int n_classes = 2;
  int iterations = 0;
  double grad_norm = 0.0;
  bool converged = false;

  Eigen::MatrixXd probabilities(const Eigen::MatrixXd& z) const;
};

inline constexpr double kProbeTolerance = 1e-6;
inline constexpr int kProbeMaxIterations = 500;

/// Multinomial logistic regression, Newton's method with backtracking on
/// mean cross-entropy + l2/2 * |W|^2 (bias unpenalised). Rows are put in a
/// canonical order first, so the fit does not depend on input order.
Probe fit_linear_probe(const Eigen::MatrixXd& z, std::span<const int> y, double l2,
                       int n_classes = 0);

struct ProbeGrid {
  Eigen::MatrixXd auc_raw;         // [train slot, eval slot]
  Eigen::MatrixXd auc_normalized;  // clamp((auc - 0.5) / (best diagonal - 0.5), 0, 1)
  double l2 = 0.0;
  int n_train = 0;
  int n_eval = 0;
  int unconverged = 0;
};

ProbeGrid probe_grid(const ProbeSplit& split, double l2);
Eigen::MatrixXd normalize_probe_grid(const Eigen::MatrixXd& raw);

/// Mean over i < j of grid(i, j) - grid(j, i).
double grid_asymmetry(const Eigen::MatrixXd& grid);

/// Fraction of each class among the k nearest training rows (Euclidean,
/// ties broken by training index). Returns [n_eval, n_classes].
Eigen::MatrixXd knn_probe(const Eigen::MatrixXd& z_train, std::span<const int> y_train,
                          const Eigen::MatrixXd& z_eval, int k, int n_classes = 0);

}  // namespace tabscope::analysis
