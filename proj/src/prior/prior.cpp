#include "tabscope/prior/prior.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace tabscope::prior {
namespace {

enum class Activation { kTanh, kRelu, kSin };

double activate(Activation a, double x) {
  switch (a) {
    case Activation::kTanh:
      return std::tanh(x);
    case Activation::kRelu:
      return x > 0.0 ? x : 0.0;
    case Activation::kSin:
      return std::sin(x);
  }
  return x;
}

// Sparse random mixing: each unit keeps every input with probability
// `density` (at least one), Gaussian weights scaled by the kept fan-in.
Eigen::MatrixXd sparse_weights(int fan_in, int fan_out, RandomStream& rng) {
  const double density = rng.uniform(0.3, 1.0);
  Eigen::MatrixXd w = Eigen::MatrixXd::Zero(fan_in, fan_out);
  for (int j = 0; j < fan_out; ++j) {
    int kept = 0;
    for (int i = 0; i < fan_in; ++i) {
      if (rng.bernoulli(density)) {
        w(i, j) = 1.0;
        ++kept;
      }
    }
    if (kept == 0) {
      w(rng.uniform_int(0, fan_in - 1), j) = 1.0;
      kept = 1;
    }
    const double scale = 1.0 / std::sqrt(static_cast<double>(kept));
    for (int i = 0; i < fan_in; ++i) {
      if (w(i, j) != 0.0) w(i, j) = rng.normal(0.0, 1.5 * scale);
    }
  }
  return w;
}

Eigen::MatrixXd hidden_layer(const Eigen::MatrixXd& input, int width, RandomStream& rng) {
  const auto act = static_cast<Activation>(rng.uniform_int(0, 2));
  const Eigen::MatrixXd w = sparse_weights(static_cast<int>(input.cols()), width, rng);
  Eigen::RowVectorXd bias(width);
  for (int j = 0; j < width; ++j) bias(j) = rng.normal(0.0, 0.5);
  const double noise = rng.uniform(0.0, 0.1);
  Eigen::MatrixXd pre = input * w;
  pre.rowwise() += bias;
  for (Eigen::Index r = 0; r < pre.rows(); ++r) {
    for (Eigen::Index c = 0; c < pre.cols(); ++c) {
      pre(r, c) = activate(act, pre(r, c)) + rng.normal(0.0, noise);
    }
  }
  return pre;
}

double column_std(const Eigen::MatrixXd& m, Eigen::Index col) {
  const double mean = m.col(col).mean();
  return std::sqrt((m.col(col).array() - mean).square().mean());
}

struct Shape {
  int features;
  int classes;
  int rows;
  int support;
};

Shape draw_shape(const PriorConfig& cfg, RandomStream& rng) {
  Shape s{};
  s.features = static_cast<int>(rng.uniform_int(cfg.min_features, cfg.max_features));
  const int min_rows = std::min(16, cfg.max_seq_len);
  for (int attempt = 0;; ++attempt) {
    s.rows = static_cast<int>(rng.uniform_int(min_rows, cfg.max_seq_len));
    const double ratio = rng.uniform(cfg.train_ratio_min, cfg.train_ratio_max);
    const int lo = static_cast<int>(std::ceil(cfg.train_ratio_min * s.rows - 1e-9));
    const int hi = static_cast<int>(std::floor(cfg.train_ratio_max * s.rows + 1e-9));
    s.support = std::clamp(static_cast<int>(std::lround(ratio * s.rows)), std::max(lo, 1),
                           std::min(hi, s.rows - 1));
    if (lo <= hi && s.support >= std::max(lo, 1) && s.support <= std::min(hi, s.rows - 1)) break;
    if (attempt > 64) {
      throw ConfigError("prior: train ratio bounds admit no split for the configured row range");
    }
  }
  // Class count is capped by the support size so that every class can be
  // represented several times in the support split.
  const int class_cap = std::max(2, std::min(cfg.max_classes, s.support / 3));
  s.classes = static_cast<int>(rng.uniform_int(2, class_cap));
  return s;
}

// Equal-frequency binning of a target column into n_classes, with class ids
// randomly permuted.
std::vector<int> bin_labels(const Eigen::VectorXd& target, int n_classes, RandomStream& rng) {
  const auto n = static_cast<std::size_t>(target.size());
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return target(a) < target(b); });
  std::vector<int> names(n_classes);
  std::iota(names.begin(), names.end(), 0);
  rng.shuffle(names);
  std::vector<int> labels(n);
  for (std::size_t rank = 0; rank < n; ++rank) {
    labels[order[rank]] = names[rank * n_classes / n];
  }
  return labels;
}

}  // namespace

void PriorConfig::validate() const {
  if (min_features < 1 || min_features > max_features) {
    throw ConfigError("prior: require 1 <= min_features <= max_features");
  }
  if (max_classes < 2) throw ConfigError("prior: max_classes must be >= 2");
  if (!(train_ratio_min > 0.0 && train_ratio_min < train_ratio_max && train_ratio_max < 1.0)) {
    throw ConfigError("prior: require 0 < train_ratio_min < train_ratio_max < 1");
  }
  if (max_seq_len < 8) throw ConfigError("prior: max_seq_len must be >= 8");
}

PriorConfig PriorConfig::paper() { return PriorConfig{}; }

PriorConfig PriorConfig::desk() {
  PriorConfig cfg;
  cfg.min_features = 2;
  cfg.max_features = 8;
  cfg.max_classes = 4;
  cfg.max_seq_len = 256;
  return cfg;
}

void Episode::validate() const {
  const auto fail = [](const std::string& what) { throw ConfigError("episode: " + what); };
  if (n_classes < 2) fail("n_classes < 2");
  if (x_support.cols() != x_query.cols()) fail("support/query feature counts differ");
  if (static_cast<int>(y_support.size()) != n_support()) fail("y_support length");
  if (static_cast<int>(y_query.size()) != n_query()) fail("y_query length");
  std::vector<int> seen(n_classes, 0);
  for (const int y : y_support) {
    if (y < 0 || y >= n_classes) fail("support label out of range");
    seen[y] = 1;
  }
  for (const int y : y_query) {
    if (y < 0 || y >= n_classes) fail("query label out of range");
  }
  if (std::find(seen.begin(), seen.end(), 0) != seen.end()) fail("class absent from support");
  if (!x_support.allFinite() || !x_query.allFinite()) fail("non-finite features");
}

std::vector<std::size_t> split_rows(const std::vector<int>& labels, int n_classes, int n_support,
                                    RandomStream& rng) {
  for (int attempt = 0; attempt < kSplitAttempts; ++attempt) {
    auto order = rng.permutation(labels.size());
    std::vector<int> seen(n_classes, 0);
    int distinct = 0;
    for (int i = 0; i < n_support && i < static_cast<int>(order.size()); ++i) {
      if (seen[labels[order[i]]]++ == 0) ++distinct;
    }
    if (distinct == n_classes) return order;
  }
  throw ResampleExhausted("prior: a class stayed absent from the support set after " +
                          std::to_string(kSplitAttempts) + " split resamples");
}

Episode sample_episode(const PriorConfig& cfg, RandomStream& rng) {
  cfg.validate();
  RandomStream local = rng.split();
  const std::uint64_t id = local.seed();

  for (int attempt = 0;; ++attempt) {
    const Shape shape = draw_shape(cfg, local);
    const int n = shape.rows;
    const int n_inputs = static_cast<int>(local.uniform_int(1, shape.features));

    Eigen::MatrixXd inputs(n, n_inputs);
    for (int r = 0; r < n; ++r) {
      for (int c = 0; c < n_inputs; ++c) inputs(r, c) = local.normal();
    }
    const Eigen::MatrixXd h1 = hidden_layer(inputs, static_cast<int>(local.uniform_int(4, 32)), local);
    const Eigen::MatrixXd h2 = hidden_layer(h1, static_cast<int>(local.uniform_int(4, 32)), local);

    Eigen::VectorXd readout(h2.cols());
    for (Eigen::Index j = 0; j < readout.size(); ++j) {
      readout(j) = local.normal(0.0, 1.0 / std::sqrt(static_cast<double>(h2.cols())));
    }
    Eigen::VectorXd target = h2 * readout;
    const double target_std = std::max(column_std(target, 0), 1e-12);
    const double label_noise = local.uniform(0.01, 0.3) * target_std;
    for (int r = 0; r < n; ++r) target(r) += local.normal(0.0, label_noise);

    // Features: all root inputs plus randomly chosen non-constant hidden units.
    std::vector<std::pair<int, int>> pool;  // (layer, column)
    for (Eigen::Index c = 0; c < h1.cols(); ++c) {
      if (column_std(h1, c) > 1e-6) pool.emplace_back(1, static_cast<int>(c));
    }
    for (Eigen::Index c = 0; c < h2.cols(); ++c) {
      if (column_std(h2, c) > 1e-6) pool.emplace_back(2, static_cast<int>(c));
    }
    const int n_hidden = shape.features - n_inputs;
    if (static_cast<int>(pool.size()) < n_hidden) {
      if (attempt > 16) throw ConfigError("prior: generator keeps producing constant units");
      continue;
    }
    local.shuffle(pool);
    Eigen::MatrixXd x(n, shape.features);
    x.leftCols(n_inputs) = inputs;
    for (int k = 0; k < n_hidden; ++k) {
      const auto [layer, col] = pool[k];
      x.col(n_inputs + k) = layer == 1 ? h1.col(col) : h2.col(col);
    }
    const double feature_noise = local.uniform(0.0, 0.1);
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      for (Eigen::Index c = 0; c < x.cols(); ++c) x(r, c) += local.normal(0.0, feature_noise);
    }
    // Standardize with statistics over all rows (support and query).
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      const double mean = x.col(c).mean();
      x.col(c).array() -= mean;
      const double sd = column_std(x, c);
      x.col(c) /= sd;
    }

    const std::vector<int> labels = bin_labels(target, shape.classes, local);
    const auto order = split_rows(labels, shape.classes, shape.support, local);

    Episode ep;
    ep.n_classes = shape.classes;
    ep.id = id;
    const int n_query = n - shape.support;
    ep.x_support.resize(shape.support, shape.features);
    ep.x_query.resize(n_query, shape.features);
    ep.y_support.resize(shape.support);
    ep.y_query.resize(n_query);
    for (int i = 0; i < n; ++i) {
      const auto row = static_cast<Eigen::Index>(order[i]);
      if (i < shape.support) {
        ep.x_support.row(i) = x.row(row);
        ep.y_support[i] = labels[order[i]];
      } else {
        ep.x_query.row(i - shape.support) = x.row(row);
        ep.y_query[i - shape.support] = labels[order[i]];
      }
    }
    return ep;
  }
}

std::vector<Episode> sample_batch(const PriorConfig& cfg, RandomStream& rng, int n) {
  if (n < 1) throw ConfigError("sample_batch: n must be >= 1");
  std::vector<Episode> batch;
  batch.reserve(n);
  for (int i = 0; i < n; ++i) batch.push_back(sample_episode(cfg, rng));
  return batch;
}

EpisodeStream::EpisodeStream(PriorConfig cfg, std::string_view label)
    : cfg_(cfg), root_(RandomStream(cfg.seed).derive(label)) {
  cfg_.validate();
}

Episode EpisodeStream::episode(std::uint64_t position) const {
  RandomStream rng = root_.at(position);
  return sample_episode(cfg_, rng);
}

}  // namespace tabscope::prior
