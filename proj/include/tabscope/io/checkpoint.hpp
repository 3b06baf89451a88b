#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "tabscope/core/binary_io.hpp"
#include "tabscope/model/model.hpp"

namespace tabscope::io {

struct CheckpointError : IoError {
  using IoError::IoError;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::uint32_t kDecoderBundleVersion = 1;

/// "TFMC" | version | u32 json length | json {config, model_id} | tensors.
/// Each tensor: u32 rank, u32 dims, float32 data, all little-endian.
std::string encode_checkpoint(const model::TfmModel<float>& m);
model::TfmModel<float> decode_checkpoint(std::string_view bytes);
void save_checkpoint(const model::TfmModel<float>& m, const std::filesystem::path& path);
model::TfmModel<float> load_checkpoint(const std::filesystem::path& path);

/// Hash over parameter bytes only (config excluded).
std::string parameter_hash(const std::vector<nd::Tensor<float>>& params);

struct DecoderBundle {
  std::string model_id;
  std::vector<model::DecoderParams<float>> decoders;  // one per trace slot
};

/// "TFMD" | version | u32 json length | json {model_id, slots} | 4 tensors per slot.
std::string encode_decoder_bundle(const DecoderBundle& bundle);
DecoderBundle decode_decoder_bundle(std::string_view bytes);
void save_decoder_bundle(const DecoderBundle& bundle, const std::filesystem::path& path);
DecoderBundle load_decoder_bundle(const std::filesystem::path& path);

}  // namespace tabscope::io
