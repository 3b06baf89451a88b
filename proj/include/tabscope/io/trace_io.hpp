#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "tabscope/core/binary_io.hpp"
#include "tabscope/model/config.hpp"

namespace tabscope::io {

inline constexpr std::uint32_t kTraceVersion = 1;

struct TraceError : IoError {
  using IoError::IoError;
};
struct BadMagic : TraceError {
  using TraceError::TraceError;
};
struct VersionMismatch : TraceError {
  using TraceError::TraceError;
};
struct DimMismatch : TraceError {
  using TraceError::TraceError;
};
struct TruncatedPayload : TraceError {
  using TraceError::TraceError;
};
// Metadata that is not valid JSON or lacks / mistypes a required field.
struct MetadataError : TraceError {
  using TraceError::TraceError;
};

struct TraceFile {
  model::ActivationTrace trace;
  std::vector<int> y_query;
  // Optional per-slot prediction probabilities, each [n_q, C] row-major.
  std::vector<std::vector<std::vector<double>>> probabilities;
};

/// TFMT layout: "TFMT" | u32 version | u32 metadata length | metadata JSON |
/// (L+1) x { u32 rows | u32 cols | rows*cols float32 row-major }, little-endian.
std::string encode_trace(const TraceFile& file);
TraceFile decode_trace(std::string_view bytes);

void write_trace(const model::ActivationTrace& trace, const std::vector<int>& y_query,
                 const std::filesystem::path& path);
void write_trace(const TraceFile& file, const std::filesystem::path& path);
TraceFile read_trace(const std::filesystem::path& path);

}  // namespace tabscope::io
