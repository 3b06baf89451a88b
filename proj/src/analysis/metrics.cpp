#include "tabscope/analysis/metrics.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <numeric>

namespace tabscope::analysis {

namespace {

Eigen::MatrixXd centered(const Eigen::MatrixXd& x) {
  return x.rowwise() - x.colwise().mean();
}

// Zero variance relative to the data's own scale.
bool flat(const Eigen::MatrixXd& centred, const Eigen::MatrixXd& raw) {
  const double scale = std::max(1.0, raw.cwiseAbs().maxCoeff());
  return centred.cwiseAbs().maxCoeff() <= 1e-12 * scale;
}

}  // namespace

CkaResult linear_cka(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y) {
  if (x.rows() != y.rows()) {
    throw MetricContractError("linear_cka: row counts differ (" + std::to_string(x.rows()) +
                              " vs " + std::to_string(y.rows()) + ")");
  }
  if (x.rows() < 2) throw MetricContractError("linear_cka: needs at least 2 rows");
  const Eigen::MatrixXd xc = centered(x), yc = centered(y);
  if (flat(xc, x) || flat(yc, y)) return {0.0, true};
  const double cross = (xc.transpose() * yc).squaredNorm();
  const double norm_x = (xc.transpose() * xc).norm();
  const double norm_y = (yc.transpose() * yc).norm();
  return {cross / (norm_x * norm_y + kCkaEps), false};
}

CosineResult mean_abs_cosine(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y) {
  if (x.rows() != y.rows() || x.cols() != y.cols()) {
    throw MetricContractError("mean_abs_cosine: shapes differ");
  }
  double total = 0.0;
  int used = 0, excluded = 0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double nx = x.row(i).norm(), ny = y.row(i).norm();
    if (nx == 0.0 || ny == 0.0) {
      ++excluded;
      continue;
    }
    total += std::abs(x.row(i).dot(y.row(i))) / (nx * ny);
    ++used;
  }
  if (used == 0) throw DegenerateMetric("mean_abs_cosine: every row has zero norm");
  return {std::min(1.0, total / used), excluded};
}

SimilarityGrid similarity_grid(const model::ActivationTrace& trace) {
  trace.validate();
  const int n = trace.slots();
  SimilarityGrid grid;
  grid.cka = Eigen::MatrixXd::Identity(n, n);
  grid.cosine = Eigen::MatrixXd::Identity(n, n);
  grid.degenerate.assign(static_cast<std::size_t>(n), false);
  std::vector<Eigen::MatrixXd> states;
  for (const auto& s : trace.layer_states) states.push_back(s.cast<double>());
  for (int i = 0; i < n; ++i) {
    if (states[i].rows() >= 2) grid.degenerate[i] = flat(centered(states[i]), states[i]);
    for (int j = i + 1; j < n; ++j) {
      const double cka = states[i].rows() >= 2 ? linear_cka(states[i], states[j]).value : 0.0;
      const double cos = mean_abs_cosine(states[i], states[j]).value;
      grid.cka(i, j) = grid.cka(j, i) = std::clamp(cka, 0.0, 1.0);
      grid.cosine(i, j) = grid.cosine(j, i) = cos;
    }
  }
  return grid;
}

Eigen::MatrixXd PcaModel::project(const Eigen::MatrixXd& x) const {
  if (x.cols() != mean.size()) throw MetricContractError("pca: column count differs from fit");
  return (x.rowwise() - mean) * components;
}

PcaModel fit_pca(const Eigen::MatrixXd& x, double retained_variance, int fit_sample_cap,
                 RandomStream& rng) {
  if (!(retained_variance > 0.0 && retained_variance <= 1.0)) {
    throw MetricContractError("pca: retained_variance must lie in (0, 1]");
  }
  if (x.rows() < 2) throw DegenerateMetric("pca: needs at least 2 rows");
  if (fit_sample_cap < 2) throw MetricContractError("pca: fit_sample_cap must be >= 2");
  Eigen::MatrixXd fit = x;
  if (x.rows() > fit_sample_cap) {
    auto order = rng.permutation(static_cast<std::size_t>(x.rows()));
    order.resize(static_cast<std::size_t>(fit_sample_cap));
    std::sort(order.begin(), order.end());
    fit.resize(fit_sample_cap, x.cols());
    for (int r = 0; r < fit_sample_cap; ++r) fit.row(r) = x.row(static_cast<Eigen::Index>(order[r]));
  }
  PcaModel model;
  model.mean = fit.colwise().mean();
  const Eigen::MatrixXd c = fit.rowwise() - model.mean;
  const Eigen::MatrixXd cov = (c.transpose() * c) / static_cast<double>(fit.rows() - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  // Eigen sorts ascending; walk from the largest.
  const Eigen::VectorXd values = eig.eigenvalues().reverse().cwiseMax(0.0);
  const Eigen::MatrixXd vectors = eig.eigenvectors().rowwise().reverse();
  const double total = values.sum();
  if (!(total > 0.0)) throw DegenerateMetric("pca: data has zero variance");
  int rank = 0;
  for (Eigen::Index i = 0; i < values.size(); ++i) rank += values[i] > 1e-12 * values[0] ? 1 : 0;
  int k = 0;
  double cumulative = 0.0;
  while (k < rank) {
    cumulative += values[k];
    ++k;
    if (cumulative >= retained_variance * total * (1.0 - 1e-12)) break;
  }
  model.components = vectors.leftCols(k);
  // Sign convention: the largest-magnitude loading of each component is positive.
  for (int j = 0; j < k; ++j) {
    Eigen::Index at = 0;
    model.components.col(j).cwiseAbs().maxCoeff(&at);
    if (model.components(at, j) < 0) model.components.col(j) *= -1.0;
  }
  model.explained = values.head(k) / total;
  return model;
}

Eigen::MatrixXd pca_project(const Eigen::MatrixXd& x, double retained_variance, int fit_sample_cap,
                            std::uint64_t seed) {
  RandomStream rng = RandomStream(seed).derive("pca");
  return fit_pca(x, retained_variance, fit_sample_cap, rng).project(x);
}

GapMetric parse_gap_metric(const std::string& name) {
  if (name == "cosine") return GapMetric::kCosine;
  if (name == "euclidean") return GapMetric::kEuclidean;
  throw MetricContractError("unknown gap metric '" + name + "' (expected cosine or euclidean)");
}

std::string gap_metric_name(GapMetric metric) {
  return metric == GapMetric::kCosine ? "cosine" : "euclidean";
}

namespace {

std::vector<std::pair<int, int>> draw(std::vector<std::pair<int, int>> population, int n,
                                      RandomStream& rng) {
  if (n <= 0 || population.empty()) return population;
  std::vector<std::pair<int, int>> out;
  const auto size = population.size();
  if (size >= static_cast<std::size_t>(n)) {
    // Partial Fisher-Yates: the first n slots become a uniform sample.
    for (std::size_t i = 0; i < static_cast<std::size_t>(n); ++i) {
      const auto j = static_cast<std::size_t>(rng.uniform_int(static_cast<long>(i),
                                                              static_cast<long>(size) - 1));
      std::swap(population[i], population[j]);
      out.push_back(population[i]);
    }
  } else {
    for (int i = 0; i < n; ++i) {
      out.push_back(population[static_cast<std::size_t>(rng.uniform_int(0, static_cast<long>(size) - 1))]);
    }
  }
  return out;
}

}  // namespace

GapPairs sample_gap_pairs(std::span<const int> labels, int n_pairs, RandomStream& rng) {
  std::vector<std::pair<int, int>> within, between;
  const int n = static_cast<int>(labels.size());
  for (int a = 0; a < n; ++a) {
    for (int b = a + 1; b < n; ++b) (labels[a] == labels[b] ? within : between).emplace_back(a, b);
  }
  if (between.empty()) throw DegenerateMetric("separation_gap: fewer than 2 classes present");
  if (within.empty()) throw DegenerateMetric("separation_gap: no class has 2 members");
  GapPairs pairs;
  pairs.within = draw(std::move(within), n_pairs, rng);
  pairs.between = draw(std::move(between), n_pairs, rng);
  return pairs;
}

double pair_distance(const Eigen::MatrixXd& z, int a, int b, GapMetric metric) {
  if (metric == GapMetric::kEuclidean) return (z.row(a) - z.row(b)).norm();
  const double na = z.row(a).norm(), nb = z.row(b).norm();
  // A zero vector has no direction; treat it as orthogonal to everything.
  const double cos = (na == 0.0 || nb == 0.0) ? 0.0 : z.row(a).dot(z.row(b)) / (na * nb);
  return 1.0 - std::clamp(cos, -1.0, 1.0);
}

GapResult separation_gap(const Eigen::MatrixXd& z, const GapPairs& pairs, GapMetric metric) {
  if (pairs.within.empty() || pairs.between.empty()) {
    throw DegenerateMetric("separation_gap: no within-class or between-class pairs");
  }
  const auto mean_distance = [&](const std::vector<std::pair<int, int>>& list) {
    double total = 0.0;
    for (const auto& [a, b] : list) {
      if (a >= z.rows() || b >= z.rows()) throw MetricContractError("separation_gap: pair out of range");
      total += pair_distance(z, a, b, metric);
    }
    return total / static_cast<double>(list.size());
  };
  GapResult r;
  r.d_within = mean_distance(pairs.within);
  r.d_between = mean_distance(pairs.between);
  r.delta = r.d_between - r.d_within;
  r.n_within = static_cast<int>(pairs.within.size());
  r.n_between = static_cast<int>(pairs.between.size());
  return r;
}

GapResult separation_gap(const Eigen::MatrixXd& z, std::span<const int> labels, GapMetric metric,
                         int n_pairs, RandomStream& rng) {
  if (static_cast<Eigen::Index>(labels.size()) != z.rows()) {
    throw MetricContractError("separation_gap: label count differs from row count");
  }
  return separation_gap(z, sample_gap_pairs(labels, n_pairs, rng), metric);
}

double roc_auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw MetricContractError("roc_auc: length mismatch");
  const auto n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] < scores[b]; });
  // Mann-Whitney U with midranks for ties.
  double rank_sum = 0.0;
  long positives = 0, negatives = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double midrank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k) {
      const int y = labels[order[k]];
      if (y != 0 && y != 1) throw MetricContractError("roc_auc: labels must be 0 or 1");
      if (y == 1) rank_sum += midrank;
    }
    i = j;
  }
  for (const int y : labels) (y == 1 ? positives : negatives) += 1;
  if (positives == 0 || negatives == 0) {
    throw UndefinedMetric("roc_auc: both classes must be present");
  }
  const double p = static_cast<double>(positives), q = static_cast<double>(negatives);
  return (rank_sum - p * (p + 1.0) / 2.0) / (p * q);
}

double roc_auc_ovr(const Eigen::MatrixXd& probs, std::span<const int> labels) {
  if (static_cast<Eigen::Index>(labels.size()) != probs.rows()) {
    throw MetricContractError("roc_auc_ovr: label count differs from row count");
  }
  const auto classes = probs.cols();
  for (const int y : labels) {
    if (y < 0 || y >= classes) throw MetricContractError("roc_auc_ovr: label outside the class range");
  }
  std::vector<double> scores(labels.size());
  std::vector<int> binary(labels.size());
  const auto column_auc = [&](Eigen::Index c) {
    for (std::size_t i = 0; i < labels.size(); ++i) {
      scores[i] = probs(static_cast<Eigen::Index>(i), c);
      binary[i] = labels[i] == c ? 1 : 0;
    }
    return roc_auc(scores, binary);
  };
  if (classes == 2) return column_auc(1);
  double total = 0.0;
  int used = 0;
  for (Eigen::Index c = 0; c < classes; ++c) {
    const auto count = std::count(labels.begin(), labels.end(), static_cast<int>(c));
    if (count == 0 || count == static_cast<long>(labels.size())) continue;
    total += column_auc(c);
    ++used;
  }
  if (used == 0) throw UndefinedMetric("roc_auc_ovr: fewer than 2 classes present");
  return total / used;
}

double balanced_accuracy(std::span<const int> predicted, std::span<const int> labels) {
  if (labels.empty()) throw MetricContractError("balanced_accuracy: empty input");
  if (predicted.size() != labels.size()) throw MetricContractError("balanced_accuracy: length mismatch");
  const int classes = *std::max_element(labels.begin(), labels.end()) + 1;
  std::vector<long> hits(static_cast<std::size_t>(classes), 0), counts(static_cast<std::size_t>(classes), 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0) throw MetricContractError("balanced_accuracy: negative label");
    ++counts[labels[i]];
    if (predicted[i] == labels[i]) ++hits[labels[i]];
  }
  double total = 0.0;
  int present = 0;
  for (int c = 0; c < classes; ++c) {
    if (counts[c] == 0) continue;
    total += static_cast<double>(hits[c]) / static_cast<double>(counts[c]);
    ++present;
  }
  return total / present;
}

double prediction_entropy(const Eigen::MatrixXd& probs) {
  if (probs.rows() == 0) throw MetricContractError("prediction_entropy: no rows");
  double total = 0.0;
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    double row_sum = 0.0, h = 0.0;
    for (Eigen::Index c = 0; c < probs.cols(); ++c) {
      const double p = probs(i, c);
      if (!(p >= 0.0) || !std::isfinite(p)) {
        throw MetricContractError("prediction_entropy: row " + std::to_string(i) +
                                  " has a negative or non-finite entry");
      }
      row_sum += p;
      if (p > 0.0) h -= p * std::log(p);
    }
    if (std::abs(row_sum - 1.0) > 1e-6) {
      throw MetricContractError("prediction_entropy: row " + std::to_string(i) + " sums to " +
                                std::to_string(row_sum));
    }
    total += h;
  }
  return total / static_cast<double>(probs.rows());
}

std::vector<int> argmax_rows(const Eigen::MatrixXd& probs) {
  std::vector<int> out(static_cast<std::size_t>(probs.rows()));
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    Eigen::Index at = 0;
    probs.row(i).maxCoeff(&at);
    out[i] = static_cast<int>(at);
  }
  return out;
}

}  // namespace tabscope::analysis
