#pragma once

#include <Eigen/Core>
#include <vector>

#include "tabscope/core/random.hpp"
#include "tabscope/model/model.hpp"
#include "tabscope/prior/prior.hpp"

namespace testing {

// Gaussian features, labels cycling through the classes.
inline tabscope::prior::Episode toy_episode(int n_support, int n_query, int features, int classes,
                                            std::uint64_t seed) {
  tabscope::RandomStream rng(seed);
  tabscope::prior::Episode ep;
  ep.n_classes = classes;
  ep.id = seed;
  ep.x_support.resize(n_support, features);
  ep.x_query.resize(n_query, features);
  for (int r = 0; r < n_support; ++r) {
    ep.y_support.push_back(r % classes);
    for (int j = 0; j < features; ++j) ep.x_support(r, j) = rng.normal() + ep.y_support.back();
  }
  for (int r = 0; r < n_query; ++r) {
    ep.y_query.push_back((r + 1) % classes);
    for (int j = 0; j < features; ++j) ep.x_query(r, j) = rng.normal() + ep.y_query.back();
  }
  return ep;
}

inline tabscope::model::ModelConfig tiny_config(int blocks = 2, bool looped = false) {
  tabscope::model::ModelConfig cfg;
  cfg.embed_dim = 8;
  cfg.n_heads = 2;
  cfg.ff_dim = 16;
  cfg.n_blocks = looped ? 1 : blocks;
  cfg.looped = looped;
  cfg.n_loops = blocks;
  cfg.max_classes = 4;
  cfg.max_features = 8;
  return cfg;
}

inline tabscope::prior::PriorConfig small_prior(std::uint64_t seed = 0) {
  auto p = tabscope::prior::PriorConfig::desk();
  p.max_seq_len = 48;
  p.max_features = 4;
  p.seed = seed;
  return p;
}

inline Eigen::MatrixXd random_matrix(int rows, int cols, tabscope::RandomStream& rng) {
  Eigen::MatrixXd m(rows, cols);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) m(r, c) = rng.normal();
  }
  return m;
}

}  // namespace testing
