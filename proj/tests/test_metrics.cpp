#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <set>

#include "support.hpp"
#include "tabscope/analysis/metrics.hpp"

using namespace tabscope;
using namespace tabscope::analysis;
using Eigen::MatrixXd;
using testing::random_matrix;

namespace {

// CKA via Gram matrices and the centering matrix H.
double gram_cka(const MatrixXd& x, const MatrixXd& y) {
  const auto n = x.rows();
  const MatrixXd h = MatrixXd::Identity(n, n) - MatrixXd::Constant(n, n, 1.0 / n);
  const MatrixXd k = h * (x * x.transpose()) * h;
  const MatrixXd l = h * (y * y.transpose()) * h;
  const auto hsic = [](const MatrixXd& a, const MatrixXd& b) { return (a.array() * b.array()).sum(); };
  return hsic(k, l) / std::sqrt(hsic(k, k) * hsic(l, l));
}

MatrixXd random_rotation(int d, RandomStream& rng) {
  Eigen::HouseholderQR<MatrixXd> qr(random_matrix(d, d, rng));
  return qr.householderQ();
}

double pair_auc(const std::vector<double>& s, const std::vector<int>& y) {
  double wins = 0;
  int pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[i] != 1 || y[j] != 0) continue;
      ++pairs;
      wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
    }
  }
  return wins / pairs;
}

}  // namespace

TEST_CASE("linear CKA matches the Gram-matrix form") {
  RandomStream rng(1);
  for (int t = 0; t < 30; ++t) {
    const int n = static_cast<int>(rng.uniform_int(3, 40));
    const auto x = random_matrix(n, static_cast<int>(rng.uniform_int(1, 12)), rng);
    auto y = random_matrix(n, static_cast<int>(rng.uniform_int(1, 12)), rng);
    if (t % 3 == 0) y.leftCols(1) += 2.0 * x.leftCols(1);
    const auto r = linear_cka(x, y);
    CHECK_FALSE(r.degenerate);
    CHECK(r.value == doctest::Approx(gram_cka(x, y)).epsilon(1e-8));
    CHECK(linear_cka(y, x).value == doctest::Approx(r.value).epsilon(1e-12));
  }
}

TEST_CASE("linear CKA is invariant to rotation, isotropic scale and shift") {
  RandomStream rng(2);
  for (int t = 0; t < 20; ++t) {
    const int n = static_cast<int>(rng.uniform_int(5, 60)), d = static_cast<int>(rng.uniform_int(2, 16));
    const auto x = random_matrix(n, d, rng);
    const double c = rng.uniform(0.01, 100.0);
    MatrixXd y = c * x * random_rotation(d, rng);
    y.rowwise() += random_matrix(1, d, rng).row(0);
    CHECK(std::abs(linear_cka(x, y).value - 1.0) < 1e-9);
  }
}

TEST_CASE("CKA flags zero-variance input") {
  RandomStream rng(3);
  MatrixXd flat = MatrixXd::Constant(6, 3, 0.7);
  const auto r = linear_cka(flat, random_matrix(6, 3, rng));
  CHECK(r.degenerate);
  CHECK(r.value == 0.0);
  CHECK_THROWS_AS(linear_cka(flat, random_matrix(5, 3, rng)), MetricContractError);
}

TEST_CASE("mean absolute cosine matches row loops") {
  RandomStream rng(4);
  for (int t = 0; t < 25; ++t) {
    const int n = static_cast<int>(rng.uniform_int(1, 30)), d = static_cast<int>(rng.uniform_int(1, 9));
    const auto x = random_matrix(n, d, rng), y = random_matrix(n, d, rng);
    double want = 0;
    for (int i = 0; i < n; ++i) {
      double dot = 0, nx = 0, ny = 0;
      for (int j = 0; j < d; ++j) {
        dot += x(i, j) * y(i, j);
        nx += x(i, j) * x(i, j);
        ny += y(i, j) * y(i, j);
      }
      want += std::abs(dot) / std::sqrt(nx * ny) / n;
    }
    CHECK(mean_abs_cosine(x, y).value == doctest::Approx(want).epsilon(1e-8));
  }
  MatrixXd x = MatrixXd::Ones(3, 2), y = MatrixXd::Ones(3, 2);
  y.row(1).setZero();
  const auto r = mean_abs_cosine(x, y);
  CHECK(r.excluded == 1);
  CHECK(r.value == doctest::Approx(1.0));
}

TEST_CASE("similarity grid is symmetric with a unit diagonal") {
  RandomStream rng(5);
  model::ActivationTrace trace;
  trace.layer_states.push_back(Eigen::MatrixXf::Constant(7, 4, 0.3f));
  for (int k = 0; k < 3; ++k) trace.layer_states.push_back(random_matrix(7, 4, rng).cast<float>());
  const auto g = similarity_grid(trace);
  CHECK(g.degenerate[0]);
  CHECK_FALSE(g.degenerate[1]);
  for (int i = 0; i < 4; ++i) {
    CHECK(g.cka(i, i) == 1.0);
    CHECK(g.cosine(i, i) == doctest::Approx(1.0));
    for (int j = 0; j < 4; ++j) CHECK(g.cka(i, j) == g.cka(j, i));
  }
  CHECK(g.cka(0, 2) == 0.0);
  const MatrixXd a = trace.layer_states[1].cast<double>(), b = trace.layer_states[3].cast<double>();
  CHECK(g.cka(1, 3) == doctest::Approx(gram_cka(a, b)).epsilon(1e-8));
}

TEST_CASE("PCA matches the SVD of the centred data") {
  RandomStream rng(6);
  for (int t = 0; t < 25; ++t) {
    const int n = static_cast<int>(rng.uniform_int(10, 80)), d = static_cast<int>(rng.uniform_int(2, 10));
    MatrixXd x = random_matrix(n, d, rng) * random_matrix(d, d, rng);
    const MatrixXd centred = x.rowwise() - x.colwise().mean();
    Eigen::JacobiSVD<MatrixXd> svd(centred, Eigen::ComputeThinV);
    const Eigen::VectorXd var = svd.singularValues().array().square();
    const Eigen::VectorXd ratio = var / var.sum();
    RandomStream fit_rng(t);
    const auto pca = fit_pca(x, 0.95, 5000, fit_rng);
    int k = 0;
    for (double cum = 0; cum < 0.95 - 1e-12; ++k) cum += ratio(k);
    REQUIRE(pca.k() == k);
    for (int c = 0; c < k; ++c) {
      CHECK(pca.explained(c) == doctest::Approx(ratio(c)).epsilon(1e-6));
      CHECK(std::abs(pca.components.col(c).dot(svd.matrixV().col(c))) == doctest::Approx(1.0).epsilon(1e-6));
    }
    // keeping everything preserves pairwise distances
    RandomStream all_rng(t);
    const MatrixXd z = fit_pca(x, 1.0, 5000, all_rng).project(x);
    CHECK((z.row(0) - z.row(1)).norm() == doctest::Approx((x.row(0) - x.row(1)).norm()).epsilon(1e-6));
  }
}

TEST_CASE("PCA subsamples above the cap and is seed-stable") {
  RandomStream rng(7);
  const auto x = random_matrix(300, 5, rng);
  CHECK(pca_project(x, 0.95, 50, 3) == pca_project(x, 0.95, 50, 3));
  CHECK_THROWS_AS(pca_project(MatrixXd::Constant(10, 3, 1.0)), DegenerateMetric);
}

TEST_CASE("separation gap matches brute force over all pairs") {
  RandomStream rng(8);
  for (int t = 0; t < 25; ++t) {
    const int n = static_cast<int>(rng.uniform_int(4, 25));
    const auto z = random_matrix(n, 3, rng);
    std::vector<int> y(n);
    for (int i = 0; i < n; ++i) y[i] = i % 3;
    for (const auto metric : {GapMetric::kCosine, GapMetric::kEuclidean}) {
      double within = 0, between = 0;
      int nw = 0, nb = 0;
      for (int i = 0; i < n; ++i) {
        for (int j = i + 1; j < n; ++j) {
          const Eigen::VectorXd a = z.row(i), b = z.row(j);
          const double dist = metric == GapMetric::kEuclidean ? (a - b).norm()
                                                               : 1.0 - a.dot(b) / (a.norm() * b.norm());
          (y[i] == y[j] ? within : between) += dist;
          ++(y[i] == y[j] ? nw : nb);
        }
      }
      const auto r = separation_gap(z, std::span<const int>(y), metric, 0, rng);
      CHECK(r.n_within == nw);
      CHECK(r.n_between == nb);
      CHECK(r.delta == doctest::Approx(between / nb - within / nw).epsilon(1e-8));
    }
  }
}

TEST_CASE("sampled gap pairs have the right kinds and no repeats") {
  RandomStream rng(9);
  std::vector<int> y(40);
  for (int i = 0; i < 40; ++i) y[i] = i % 4;
  const auto pairs = sample_gap_pairs(y, 50, rng);
  CHECK(pairs.within.size() == 50);
  CHECK(pairs.between.size() == 50);
  std::set<std::pair<int, int>> seen;
  for (const auto& [a, b] : pairs.within) {
    CHECK(y[a] == y[b]);
    CHECK(a != b);
    seen.insert({std::min(a, b), std::max(a, b)});
  }
  CHECK(seen.size() == 50);
  for (const auto& [a, b] : pairs.between) CHECK(y[a] != y[b]);
  const std::vector<int> one{1, 1, 1};
  CHECK_THROWS_AS(separation_gap(random_matrix(3, 2, rng), std::span<const int>(one), GapMetric::kCosine, 0, rng),
                  DegenerateMetric);
}

TEST_CASE("ROC-AUC equals the pair-counting definition") {
  RandomStream rng(10);
  for (int t = 0; t < 30; ++t) {
    const int n = static_cast<int>(rng.uniform_int(2, 50));
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (int i = 0; i < n; ++i) {
      s[i] = std::round(rng.normal() * 3) / 3;  // coarse grid produces ties
      y[i] = i < 1 ? 0 : (i < 2 ? 1 : static_cast<int>(rng.uniform_int(0, 1)));
    }
    CHECK(roc_auc(s, y) == doctest::Approx(pair_auc(s, y)).epsilon(1e-12));
  }
  const std::vector<int> same{1, 1};
  CHECK_THROWS_AS(roc_auc(std::vector<double>{0.1, 0.2}, same), UndefinedMetric);
}

TEST_CASE("one-vs-rest AUC averages over present classes") {
  RandomStream rng(11);
  for (int t = 0; t < 25; ++t) {
    const int n = 30, c = 4;
    MatrixXd p = random_matrix(n, c, rng).array().exp();
    std::vector<int> y(n);
    for (int i = 0; i < n; ++i) y[i] = i % 3;  // class 3 absent
    double want = 0;
    for (int k = 0; k < 3; ++k) {
      std::vector<double> s(n);
      std::vector<int> b(n);
      for (int i = 0; i < n; ++i) {
        s[i] = p(i, k);
        b[i] = y[i] == k;
      }
      want += pair_auc(s, b) / 3;
    }
    CHECK(roc_auc_ovr(p, y) == doctest::Approx(want).epsilon(1e-10));
  }
  MatrixXd p2(4, 2);
  p2 << 0.9, 0.1, 0.2, 0.8, 0.6, 0.4, 0.3, 0.7;
  CHECK(roc_auc_ovr(p2, std::vector<int>{0, 1, 0, 1}) == 1.0);
}

TEST_CASE("balanced accuracy, entropy and argmax") {
  const std::vector<int> pred{0, 0, 1, 1, 2, 0}, truth{0, 0, 0, 1, 2, 2};
  // recalls: 2/3, 1, 1/2
  CHECK(balanced_accuracy(pred, truth) == doctest::Approx((2.0 / 3 + 1 + 0.5) / 3).epsilon(1e-12));
  MatrixXd p(2, 3);
  p << 1.0 / 3, 1.0 / 3, 1.0 / 3, 1.0, 0.0, 0.0;
  CHECK(prediction_entropy(p) == doctest::Approx(std::log(3.0) / 2).epsilon(1e-12));
  CHECK(argmax_rows(p) == std::vector<int>{0, 0});
}
