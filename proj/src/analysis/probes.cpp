#include "tabscope/analysis/probes.hpp"

#include <Eigen/Cholesky>
#include <algorithm>
#include <cmath>
#include <numeric>

#include "tabscope/analysis/metrics.hpp"

namespace tabscope::analysis {

std::vector<int> choose_diverted(const prior::Episode& episode, RandomStream& rng) {
  std::vector<std::vector<int>> by_class(static_cast<std::size_t>(episode.n_classes));
  for (int r = 0; r < episode.n_support(); ++r) by_class[episode.y_support[r]].push_back(r);
  std::vector<int> diverted;
  for (int c = 0; c < episode.n_classes; ++c) {
    auto& rows = by_class[c];
    if (static_cast<int>(rows.size()) < kMinSupportPerClass) {
      throw ProbeSplitError("probe split: class " + std::to_string(c) + " has " +
                            std::to_string(rows.size()) + " support rows, need " +
                            std::to_string(kMinSupportPerClass));
    }
    rng.shuffle(rows);
    diverted.insert(diverted.end(), rows.begin(), rows.begin() + rows.size() / 2);
  }
  std::sort(diverted.begin(), diverted.end());
  return diverted;
}

prior::Episode probe_episode(const prior::Episode& episode, const std::vector<int>& diverted) {
  std::vector<bool> moved(static_cast<std::size_t>(episode.n_support()), false);
  for (const int r : diverted) moved[r] = true;
  const int kept = episode.n_support() - static_cast<int>(diverted.size());
  const int nq = static_cast<int>(diverted.size()) + episode.n_query();
  prior::Episode out;
  out.n_classes = episode.n_classes;
  out.id = episode.id;
  out.x_support.resize(kept, episode.n_features());
  out.x_query.resize(nq, episode.n_features());
  int s = 0;
  for (int r = 0; r < episode.n_support(); ++r) {
    if (moved[r]) continue;
    out.x_support.row(s++) = episode.x_support.row(r);
    out.y_support.push_back(episode.y_support[r]);
  }
  int q = 0;
  for (const int r : diverted) {
    out.x_query.row(q++) = episode.x_support.row(r);
    out.y_query.push_back(episode.y_support[r]);
  }
  for (int r = 0; r < episode.n_query(); ++r) {
    out.x_query.row(q++) = episode.x_query.row(r);
    out.y_query.push_back(episode.y_query[r]);
  }
  return out;
}

ProbeSplit make_probe_split(const model::TfmModel<float>& m, const prior::Episode& episode,
                            RandomStream& rng) {
  ProbeSplit split;
  split.diverted = choose_diverted(episode, rng);
  split.n_classes = episode.n_classes;
  const auto probe_ep = probe_episode(episode, split.diverted);
  const auto trace = m.forward(probe_ep).trace;
  const auto n_div = static_cast<Eigen::Index>(split.diverted.size());
  const auto n_eval = static_cast<Eigen::Index>(episode.n_query());
  for (const auto& s : trace.layer_states) {
    const Eigen::MatrixXd states = s.cast<double>();
    split.train.push_back(states.topRows(n_div));
    split.eval.push_back(states.bottomRows(n_eval));
  }
  split.y_train.assign(probe_ep.y_query.begin(), probe_ep.y_query.begin() + n_div);
  split.y_eval = episode.y_query;
  return split;
}

Eigen::MatrixXd Probe::probabilities(const Eigen::MatrixXd& z) const {
  Eigen::MatrixXd logits(z.rows(), n_classes);
  logits.col(0).setZero();
  logits.rightCols(n_classes - 1) = (z * weight).rowwise() + bias.transpose();
  const Eigen::VectorXd max = logits.rowwise().maxCoeff();
  Eigen::MatrixXd p = (logits.colwise() - max).array().exp().matrix();
  const Eigen::VectorXd total = p.rowwise().sum();
  for (Eigen::Index i = 0; i < p.rows(); ++i) p.row(i) /= total[i];
  return p;
}

namespace {

// Rows sorted by label, then lexicographically by features.
std::vector<Eigen::Index> canonical_order(const Eigen::MatrixXd& z, std::span<const int> y) {
  std::vector<Eigen::Index> order(static_cast<std::size_t>(z.rows()));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
    if (y[a] != y[b]) return y[a] < y[b];
    for (Eigen::Index c = 0; c < z.cols(); ++c) {
      if (z(a, c) != z(b, c)) return z(a, c) < z(b, c);
    }
    return false;
  });
  return order;
}

struct Objective {
  const Eigen::MatrixXd& x;  // [n, d+1], last column ones
  const std::vector<int>& y;
  int classes;
  double l2;

  int free() const { return classes - 1; }
  Eigen::Index dims() const { return x.cols(); }

  // theta laid out class-major: block k holds [w_k; b_k].
  Eigen::MatrixXd probs(const Eigen::VectorXd& theta) const {
    const Eigen::Map<const Eigen::MatrixXd> w(theta.data(), dims(), free());
    Eigen::MatrixXd logits(x.rows(), classes);
    logits.col(0).setZero();
    logits.rightCols(free()) = x * w;
    const Eigen::VectorXd max = logits.rowwise().maxCoeff();
    Eigen::MatrixXd p = (logits.colwise() - max).array().exp().matrix();
    const Eigen::VectorXd total = p.rowwise().sum();
    for (Eigen::Index i = 0; i < p.rows(); ++i) p.row(i) /= total[i];
    return p;
  }

  double value(const Eigen::VectorXd& theta) const {
    const Eigen::Map<const Eigen::MatrixXd> w(theta.data(), dims(), free());
    Eigen::MatrixXd logits(x.rows(), classes);
    logits.col(0).setZero();
    logits.rightCols(free()) = x * w;
    double ce = 0.0;
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      const double max = logits.row(i).maxCoeff();
      ce += max + std::log((logits.row(i).array() - max).exp().sum()) - logits(i, y[i]);
    }
    return ce / static_cast<double>(x.rows()) + 0.5 * l2 * w.topRows(dims() - 1).squaredNorm();
  }

  Eigen::VectorXd penalty_mask() const {
    Eigen::MatrixXd mask = Eigen::MatrixXd::Ones(dims(), free());
    mask.row(dims() - 1).setZero();
    return Eigen::Map<const Eigen::VectorXd>(mask.data(), mask.size());
  }

  void gradient_hessian(const Eigen::VectorXd& theta, Eigen::VectorXd& grad,
                        Eigen::MatrixXd& hess) const {
    const auto n = static_cast<double>(x.rows());
    const Eigen::MatrixXd p = probs(theta);
    Eigen::MatrixXd resid = p.rightCols(free());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      if (y[i] > 0) resid(i, y[i] - 1) -= 1.0;
    }
    const Eigen::MatrixXd g = x.transpose() * resid / n;
    const Eigen::VectorXd mask = penalty_mask();
    grad = Eigen::Map<const Eigen::VectorXd>(g.data(), g.size()) + l2 * mask.cwiseProduct(theta);
    const auto d = dims();
    hess.setZero(d * free(), d * free());
    for (int a = 0; a < free(); ++a) {
      for (int b = a; b < free(); ++b) {
        Eigen::VectorXd weight(x.rows());
        for (Eigen::Index i = 0; i < x.rows(); ++i) {
          const double pa = p(i, a + 1), pb = p(i, b + 1);
          weight[i] = (a == b ? pa * (1.0 - pa) : -pa * pb) / n;
        }
        const Eigen::MatrixXd block = x.transpose() * weight.asDiagonal() * x;
        hess.block(a * d, b * d, d, d) = block;
        if (a != b) hess.block(b * d, a * d, d, d) = block.transpose();
      }
    }
    hess.diagonal() += l2 * mask;
  }
};

}  // namespace

Probe fit_linear_probe(const Eigen::MatrixXd& z, std::span<const int> y, double l2, int n_classes) {
  if (static_cast<Eigen::Index>(y.size()) != z.rows()) {
    throw MetricContractError("fit_linear_probe: label count differs from row count");
  }
  if (z.rows() == 0) throw MetricContractError("fit_linear_probe: no rows");
  if (!(l2 >= 0.0)) throw MetricContractError("fit_linear_probe: l2 must be >= 0");
  const int max_label = *std::max_element(y.begin(), y.end());
  const int classes = std::max(n_classes, max_label + 1);
  std::vector<bool> seen(static_cast<std::size_t>(classes), false);
  for (const int v : y) {
    if (v < 0) throw MetricContractError("fit_linear_probe: negative label");
    seen[v] = true;
  }
  if (std::count(seen.begin(), seen.end(), true) < 2) {
    throw MetricContractError("fit_linear_probe: needs at least 2 classes");
  }

  const auto order = canonical_order(z, y);
  Eigen::MatrixXd x(z.rows(), z.cols() + 1);
  std::vector<int> labels(y.size());
  for (std::size_t i = 0; i < order.size(); ++i) {
    x.row(static_cast<Eigen::Index>(i)) << z.row(order[i]), 1.0;
    labels[i] = y[order[i]];
  }
  const Objective obj{x, labels, classes, l2};
  Eigen::VectorXd theta = Eigen::VectorXd::Zero(x.cols() * obj.free());
  Eigen::VectorXd grad;
  Eigen::MatrixXd hess;
  Probe probe;
  probe.n_classes = classes;
  double value = obj.value(theta);
  for (int it = 0; it < kProbeMaxIterations; ++it) {
    obj.gradient_hessian(theta, grad, hess);
    probe.grad_norm = grad.norm();
    probe.iterations = it;
    if (probe.grad_norm < kProbeTolerance) {
      probe.converged = true;
      break;
    }
    // A small ridge keeps the solve defined when the bias direction is flat.
    hess.diagonal().array() += 1e-10;
    Eigen::LDLT<Eigen::MatrixXd> solver(hess);
    Eigen::VectorXd step = solver.solve(-grad);
    if (!step.allFinite() || grad.dot(step) >= 0.0) step = -grad;
    double t = 1.0;
    double next = obj.value(theta + step);
    while (next > value + 1e-4 * t * grad.dot(step) && t > 1e-12) {
      t *= 0.5;
      next = obj.value(theta + t * step);
    }
    if (!(next <= value)) break;  // no further progress possible in double precision
    theta += t * step;
    value = next;
    probe.iterations = it + 1;
  }
  if (!probe.converged) {
    obj.gradient_hessian(theta, grad, hess);
    probe.grad_norm = grad.norm();
    probe.converged = probe.grad_norm < kProbeTolerance;
  }
  const Eigen::Map<const Eigen::MatrixXd> w(theta.data(), x.cols(), obj.free());
  probe.weight = w.topRows(z.cols());
  probe.bias = w.row(z.cols()).transpose();
  return probe;
}

Eigen::MatrixXd normalize_probe_grid(const Eigen::MatrixXd& raw) {
  const double best = raw.diagonal().maxCoeff();
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(raw.rows(), raw.cols());
  if (!(best > 0.5)) return out;
  for (Eigen::Index i = 0; i < raw.rows(); ++i) {
    for (Eigen::Index j = 0; j < raw.cols(); ++j) {
      out(i, j) = std::clamp((raw(i, j) - 0.5) / (best - 0.5), 0.0, 1.0);
    }
  }
  return out;
}

ProbeGrid probe_grid(const ProbeSplit& split, double l2) {
  const int n = split.slots();
  if (n == 0 || static_cast<int>(split.eval.size()) != n) {
    throw MetricContractError("probe_grid: split has no slots or ragged slots");
  }
  ProbeGrid grid;
  grid.l2 = l2;
  grid.n_train = static_cast<int>(split.y_train.size());
  grid.n_eval = static_cast<int>(split.y_eval.size());
  grid.auc_raw.resize(n, n);
  for (int i = 0; i < n; ++i) {
    const auto probe = fit_linear_probe(split.train[i], split.y_train, l2, split.n_classes);
    if (!probe.converged) ++grid.unconverged;
    for (int j = 0; j < n; ++j) {
      grid.auc_raw(i, j) = roc_auc_ovr(probe.probabilities(split.eval[j]), split.y_eval);
    }
  }
  grid.auc_normalized = normalize_probe_grid(grid.auc_raw);
  return grid;
}

double grid_asymmetry(const Eigen::MatrixXd& grid) {
  double total = 0.0;
  int count = 0;
  for (Eigen::Index i = 0; i < grid.rows(); ++i) {
    for (Eigen::Index j = i + 1; j < grid.cols(); ++j) {
      total += grid(i, j) - grid(j, i);
      ++count;
    }
  }
  return count == 0 ? 0.0 : total / count;
}

Eigen::MatrixXd knn_probe(const Eigen::MatrixXd& z_train, std::span<const int> y_train,
                          const Eigen::MatrixXd& z_eval, int k, int n_classes) {
  if (k <= 0) throw MetricContractError("knn_probe: k must be positive");
  if (static_cast<Eigen::Index>(y_train.size()) != z_train.rows()) {
    throw MetricContractError("knn_probe: label count differs from row count");
  }
  if (k > z_train.rows()) throw MetricContractError("knn_probe: k exceeds the training rows");
  const int classes =
      std::max(n_classes, *std::max_element(y_train.begin(), y_train.end()) + 1);
  Eigen::MatrixXd scores = Eigen::MatrixXd::Zero(z_eval.rows(), classes);
  std::vector<std::pair<double, Eigen::Index>> dist(static_cast<std::size_t>(z_train.rows()));
  for (Eigen::Index i = 0; i < z_eval.rows(); ++i) {
    for (Eigen::Index t = 0; t < z_train.rows(); ++t) {
      dist[t] = {(z_train.row(t) - z_eval.row(i)).squaredNorm(), t};
    }
    std::partial_sort(dist.begin(), dist.begin() + k, dist.end());
    for (int n = 0; n < k; ++n) scores(i, y_train[dist[n].second]) += 1.0 / k;
  }
  return scores;
}

}  // namespace tabscope::analysis
