#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace tabscope {

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Little-endian byte sink independent of host byte order.
class ByteWriter {
 public:
  void bytes(std::string_view raw) { buffer_.insert(buffer_.end(), raw.begin(), raw.end()); }
  void u32(std::uint32_t v);
  void f32(float v);
  void f32s(std::span<const float> values);
  const std::string& buffer() const { return buffer_; }
  std::string take() { return std::move(buffer_); }

 private:
  std::string buffer_;
};

/// Little-endian reader; `on_short` names the error raised when input runs out.
class ByteReader {
 public:
  explicit ByteReader(std::string_view data) : data_(data) {}
  std::string_view bytes(std::size_t n, const char* what);
  std::uint32_t u32(const char* what);
  float f32(const char* what);
  void f32s(std::span<float> out, const char* what);
  std::size_t remaining() const { return data_.size() - pos_; }
  std::size_t position() const { return pos_; }

 private:
  std::string_view data_;
  std::size_t pos_ = 0;
};

// Raised by ByteReader when fewer bytes remain than requested.
struct TruncatedInput : IoError {
  using IoError::IoError;
};

std::string read_file(const std::filesystem::path& path);
// Writes to a sibling temp file and renames it into place.
void write_file_atomic(const std::filesystem::path& path, std::string_view content);

std::string sha1_hex(std::string_view content);
// Hash git assigns to a blob with this content.
std::string git_blob_sha1(std::string_view content);

}  // namespace tabscope
