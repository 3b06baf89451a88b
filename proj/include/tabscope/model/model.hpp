#pragma once

#include <cstdint>
#include <vector>

#include "tabscope/model/config.hpp"
#include "tabscope/nd/tensor.hpp"
#include "tabscope/prior/prior.hpp"

namespace tabscope::model {

template <typename T>
using Tensor = nd::Tensor<T>;

template <typename T>
struct LinearParams {
  Tensor<T> weight;  // [in, out]
  Tensor<T> bias;    // [out]
};

template <typename T>
struct NormParams {
  Tensor<T> gamma;
  Tensor<T> beta;
};

template <typename T>
struct AttentionParams {
  LinearParams<T> qkv;  // d -> 3d, packed Q|K|V
  LinearParams<T> out;  // d -> d
};

template <typename T>
struct BlockParams {
  AttentionParams<T> features;
  NormParams<T> norm_features;
  AttentionParams<T> items;
  NormParams<T> norm_items;
  LinearParams<T> mlp_in;
  LinearParams<T> mlp_out;
  NormParams<T> norm_mlp;
};

template <typename T>
struct EncoderParams {
  LinearParams<T> feature;  // scalar -> d
  LinearParams<T> label;    // scalar -> d
  Tensor<T> unknown_label;  // [d], stands in for every query row's label
};

template <typename T>
struct DecoderParams {
  LinearParams<T> hidden;  // d -> ff
  LinearParams<T> output;  // ff -> max_classes

  std::vector<Tensor<T>> parameters() const;
  DecoderParams clone() const;
};

template <typename T>
struct ForwardResult {
  Tensor<T> logits;  // [n_query, n_classes]
  ActivationTrace trace;
};

/// Per-feature tabular in-context transformer. Cell (r, j) of an episode is
/// embedded independently; channel f (the last) carries the label.
template <typename T>
class TfmModel {
 public:
  TfmModel() = default;
  static TfmModel initialize(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  int slot_count() const { return config_.slot_count(); }

  /// All parameters in declaration order: encoder, blocks, decoder.
  std::vector<Tensor<T>> parameters() const;
  std::vector<Tensor<T>> backbone_parameters() const;

  /// Cell states [rows * (f+1), d], support rows first.
  Tensor<T> encode(const prior::Episode& episode) const;

  Tensor<T> block_forward(const Tensor<T>& cells, const BlockParams<T>& block, int rows,
                          int channels, int support_count) const;

  ForwardResult<T> forward(const prior::Episode& episode,
                           const InterventionPlan& plan = InterventionPlan::none()) const;

  /// Deep copy.
  TfmModel clone() const;

  template <typename U>
  TfmModel<U> cast() const;

  EncoderParams<T> encoder;
  std::vector<BlockParams<T>> blocks;  // one entry when looped
  DecoderParams<T> decoder;
  std::string model_id;

 private:
  template <typename U>
  friend class TfmModel;
  ModelConfig config_;
};

/// Decoder readout: logits restricted to the episode's first n_classes
/// (equivalent to -inf logits for absent classes).
template <typename T>
Tensor<T> decode(const DecoderParams<T>& decoder, const Tensor<T>& states, int n_classes);

/// Decoder applied to a stored trace state, outside any tape.
std::vector<float> decode_probabilities(const DecoderParams<float>& decoder,
                                        const Eigen::MatrixXf& states, int n_classes);

Eigen::MatrixXf to_matrix(const Tensor<float>& t);
Eigen::MatrixXf to_matrix(const Tensor<double>& t);
Tensor<float> from_matrix(const Eigen::MatrixXf& m);

}  // namespace tabscope::model
