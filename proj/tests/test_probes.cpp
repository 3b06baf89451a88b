#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "support.hpp"
#include "tabscope/analysis/metrics.hpp"
#include "tabscope/analysis/probes.hpp"

using namespace tabscope;
using namespace tabscope::analysis;
using Eigen::MatrixXd;
using testing::random_matrix;

namespace {

// Gradient of mean CE + l2/2 |W|^2 with class 0 pinned at logit 0, computed
// from the probabilities directly.
double objective_gradient_norm(const Probe& p, const MatrixXd& z, const std::vector<int>& y, double l2) {
  const MatrixXd prob = p.probabilities(z);
  const int n = static_cast<int>(z.rows());
  MatrixXd gw = l2 * p.weight;
  Eigen::VectorXd gb = Eigen::VectorXd::Zero(p.n_classes - 1);
  for (int i = 0; i < n; ++i) {
    for (int c = 1; c < p.n_classes; ++c) {
      const double r = (prob(i, c) - (y[i] == c ? 1.0 : 0.0)) / n;
      gw.col(c - 1) += r * z.row(i).transpose();
      gb(c - 1) += r;
    }
  }
  return std::sqrt(gw.squaredNorm() + gb.squaredNorm());
}

struct Blobs {
  MatrixXd z;
  std::vector<int> y;
};

Blobs blobs(int n, int d, int classes, double spread, RandomStream& rng) {
  Blobs b{random_matrix(n, d, rng), std::vector<int>(n)};
  for (int i = 0; i < n; ++i) {
    b.y[i] = i % classes;
    b.z(i, b.y[i] % d) += spread;
  }
  return b;
}

}  // namespace

TEST_CASE("probe solution satisfies the optimality condition") {
  RandomStream rng(1);
  for (int t = 0; t < 25; ++t) {
    const int classes = static_cast<int>(rng.uniform_int(2, 4));
    const auto b = blobs(static_cast<int>(rng.uniform_int(12, 60)), 5, classes, 1.5, rng);
    const double l2 = t % 2 ? 1e-2 : 1.0;
    const auto p = fit_linear_probe(b.z, b.y, l2, classes);
    CHECK(p.converged);
    CHECK(p.weight.rows() == 5);
    CHECK(p.weight.cols() == classes - 1);
    CHECK(objective_gradient_norm(p, b.z, b.y, l2) < 1e-5);
  }
}

TEST_CASE("probe fit does not depend on row order") {
  RandomStream rng(2);
  auto b = blobs(30, 4, 3, 1.0, rng);
  const auto p1 = fit_linear_probe(b.z, b.y, 0.1, 3);
  const auto perm = rng.permutation(30);
  MatrixXd z2(30, 4);
  std::vector<int> y2(30);
  for (int i = 0; i < 30; ++i) {
    z2.row(i) = b.z.row(perm[i]);
    y2[i] = b.y[perm[i]];
  }
  const auto p2 = fit_linear_probe(z2, y2, 0.1, 3);
  CHECK(p1.weight == p2.weight);
  CHECK(p1.bias == p2.bias);
}

TEST_CASE("separable data gives a high probe AUC") {
  RandomStream rng(3);
  const auto train = blobs(60, 3, 3, 4.0, rng), eval = blobs(60, 3, 3, 4.0, rng);
  const auto p = fit_linear_probe(train.z, train.y, 1e-2, 3);
  CHECK(roc_auc_ovr(p.probabilities(eval.z), eval.y) > 0.95);
  const MatrixXd probs = p.probabilities(eval.z);
  CHECK((probs.rowwise().sum().array() - 1.0).abs().maxCoeff() < 1e-12);
}

TEST_CASE("diverted rows halve each class's support") {
  const auto ep = testing::toy_episode(21, 5, 2, 3, 1);  // 7 support rows per class
  RandomStream rng(4);
  const auto diverted = choose_diverted(ep, rng);
  CHECK(diverted.size() == 9);
  std::vector<int> per_class(3, 0);
  for (const int r : diverted) ++per_class[ep.y_support[r]];
  CHECK(per_class == std::vector<int>{3, 3, 3});
  CHECK(std::is_sorted(diverted.begin(), diverted.end()));
  const auto moved = probe_episode(ep, diverted);
  CHECK(moved.n_support() == 12);
  CHECK(moved.n_query() == 14);
  CHECK(moved.x_query.row(0) == ep.x_support.row(diverted[0]));
  CHECK(moved.y_query[0] == ep.y_support[diverted[0]]);
  CHECK(moved.x_query.row(9) == ep.x_query.row(0));
  const auto thin = testing::toy_episode(9, 5, 2, 3, 1);  // 3 per class
  CHECK_THROWS_AS(choose_diverted(thin, rng), ProbeSplitError);
}

TEST_CASE("probe split captures one trace of the modified episode") {
  const auto m = model::TfmModel<float>::initialize(testing::tiny_config(2), 5);
  const auto ep = testing::toy_episode(16, 6, 2, 2, 2);
  RandomStream rng(5);
  const auto split = make_probe_split(m, ep, rng);
  CHECK(split.slots() == 3);
  CHECK(split.train[0].rows() == 8);
  CHECK(split.eval[2].rows() == 6);
  CHECK(split.y_eval == ep.y_query);
  const auto grid = probe_grid(split, 1e-2);
  CHECK(grid.auc_raw.rows() == 3);
  CHECK(grid.n_train == 8);
}

TEST_CASE("normalized grid and asymmetry follow their formulas") {
  MatrixXd raw(3, 3);
  raw << 0.9, 0.7, 0.4, 0.6, 0.8, 0.75, 0.55, 0.65, 0.95;
  const auto norm = normalize_probe_grid(raw);
  CHECK(norm(0, 1) == doctest::Approx(0.2 / 0.45));
  CHECK(norm(0, 2) == 0.0);
  CHECK(norm(2, 2) == doctest::Approx(1.0));
  CHECK(grid_asymmetry(raw) == doctest::Approx(((0.7 - 0.6) + (0.4 - 0.55) + (0.75 - 0.65)) / 3));
}

TEST_CASE("kNN probe matches brute force") {
  RandomStream rng(6);
  const auto train = blobs(20, 3, 2, 2.0, rng);
  const auto eval = random_matrix(5, 3, rng);
  const auto p = knn_probe(train.z, train.y, eval, 3, 2);
  for (int i = 0; i < 5; ++i) {
    std::vector<std::pair<double, int>> d;
    for (int j = 0; j < 20; ++j) d.push_back({(train.z.row(j) - eval.row(i)).norm(), j});
    std::sort(d.begin(), d.end());
    double ones = 0;
    for (int k = 0; k < 3; ++k) ones += train.y[d[k].second];
    CHECK(p(i, 1) == doctest::Approx(ones / 3));
  }
}
