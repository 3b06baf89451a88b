#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "tabscope/core/random.hpp"

namespace tabscope::prior {

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Every class must appear in the support split; raised when repeated
// resampling of the split cannot achieve that.
struct ResampleExhausted : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct PriorConfig {
  int min_features = 2;
  int max_features = 30;
  int max_classes = 10;
  int max_seq_len = 1024;
  double train_ratio_min = 0.1;
  double train_ratio_max = 0.9;
  std::uint64_t seed = 0;

  void validate() const;

  static PriorConfig paper();
  // Features <= 8, rows <= 256, classes <= 4.
  static PriorConfig desk();
};

/// One classification task: support rows come first in every model input.
struct Episode {
  Eigen::MatrixXd x_support;  // [n_s, f]
  std::vector<int> y_support;
  Eigen::MatrixXd x_query;  // [n_q, f]
  std::vector<int> y_query;
  int n_classes = 2;
  std::uint64_t id = 0;

  int n_support() const { return static_cast<int>(x_support.rows()); }
  int n_query() const { return static_cast<int>(x_query.rows()); }
  int n_features() const { return static_cast<int>(x_support.cols()); }

  // Throws ConfigError describing the first violated invariant.
  void validate() const;
};

inline constexpr int kSplitAttempts = 32;

/// Chooses which rows form the support set: a random subset of n_support
/// rows containing every class. Returns row indices, support first.
std::vector<std::size_t> split_rows(const std::vector<int>& labels, int n_classes, int n_support,
                                    RandomStream& rng);

/// Consumes one draw from `rng`; the episode is a pure function of that draw.
Episode sample_episode(const PriorConfig& cfg, RandomStream& rng);

std::vector<Episode> sample_batch(const PriorConfig& cfg, RandomStream& rng, int n);

/// Stream of episodes addressed by position: episode(i) depends only on
/// (cfg.seed, label, i).
class EpisodeStream {
 public:
  EpisodeStream(PriorConfig cfg, std::string_view label);
  Episode episode(std::uint64_t position) const;
  const PriorConfig& config() const { return cfg_; }

 private:
  PriorConfig cfg_;
  RandomStream root_;
};

}  // namespace tabscope::prior
