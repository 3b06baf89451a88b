#pragma once

#include <Eigen/Core>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "tabscope/core/random.hpp"
#include "tabscope/model/config.hpp"

namespace tabscope::analysis {

// Input for which the metric has no meaningful value (zero variance, no pairs).
struct DegenerateMetric : std::domain_error {
  using std::domain_error::domain_error;
};
// A metric undefined for the given labels, e.g. AUC with one class.
struct UndefinedMetric : std::domain_error {
  using std::domain_error::domain_error;
};
struct MetricContractError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

inline constexpr double kCkaEps = 1e-12;

struct CkaResult {
  double value = 0.0;
  bool degenerate = false;  // X or Y had zero variance; value is 0
};

/// Linear CKA on column-centred copies of X and Y (same row count).
CkaResult linear_cka(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y);

struct CosineResult {
  double value = 0.0;
  int excluded = 0;  // rows where either side has zero norm
};

/// Mean over paired rows of |cos(x_i, y_i)|.
CosineResult mean_abs_cosine(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y);

struct SimilarityGrid {
  Eigen::MatrixXd cka;
  Eigen::MatrixXd cosine;
  std::vector<bool> degenerate;  // per slot: zero-variance states
};

/// All slot pairs of one trace. Diagonal CKA cells are 1 by definition, also
/// for zero-variance slots.
SimilarityGrid similarity_grid(const model::ActivationTrace& trace);

struct PcaModel {
  Eigen::RowVectorXd mean;
  Eigen::MatrixXd components;  // [d, k], unit columns
  Eigen::VectorXd explained;   // variance ratio per kept component
  int k() const { return static_cast<int>(components.cols()); }
  Eigen::MatrixXd project(const Eigen::MatrixXd& x) const;
};

/// Fits on at most fit_sample_cap rows of x (drawn without replacement when
/// there are more) and keeps the fewest leading components whose cumulative
/// variance ratio reaches retained_variance.
PcaModel fit_pca(const Eigen::MatrixXd& x, double retained_variance, int fit_sample_cap,
                 RandomStream& rng);
Eigen::MatrixXd pca_project(const Eigen::MatrixXd& x, double retained_variance = 0.95,
                            int fit_sample_cap = 5000, std::uint64_t seed = 0);

enum class GapMetric { kCosine, kEuclidean };
GapMetric parse_gap_metric(const std::string& name);
std::string gap_metric_name(GapMetric metric);

struct GapPairs {
  std::vector<std::pair<int, int>> within;
  std::vector<std::pair<int, int>> between;
};

/// n_pairs <= 0 enumerates every valid pair. Otherwise n_pairs pairs of each
/// kind, without replacement when the population allows it.
GapPairs sample_gap_pairs(std::span<const int> labels, int n_pairs, RandomStream& rng);

struct GapResult {
  double delta = 0.0;
  double d_within = 0.0;
  double d_between = 0.0;
  int n_within = 0;
  int n_between = 0;
};

double pair_distance(const Eigen::MatrixXd& z, int a, int b, GapMetric metric);
GapResult separation_gap(const Eigen::MatrixXd& z, const GapPairs& pairs, GapMetric metric);
GapResult separation_gap(const Eigen::MatrixXd& z, std::span<const int> labels, GapMetric metric,
                         int n_pairs, RandomStream& rng);

/// P(score of a random positive > score of a random negative), ties 1/2.
double roc_auc(std::span<const double> scores, std::span<const int> labels);

/// Binary: AUC of column 1. Multiclass: one-vs-rest macro over classes that
/// occur in `labels` (at least two must occur).
double roc_auc_ovr(const Eigen::MatrixXd& probs, std::span<const int> labels);

double balanced_accuracy(std::span<const int> predicted, std::span<const int> labels);

/// Mean row entropy in nats.
double prediction_entropy(const Eigen::MatrixXd& probs);

std::vector<int> argmax_rows(const Eigen::MatrixXd& probs);

}  // namespace tabscope::analysis
