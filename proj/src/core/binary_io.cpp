#include "tabscope/core/binary_io.hpp"

#include <openssl/evp.h>

#include <array>
#include <bit>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace tabscope {

void ByteWriter::u32(std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buffer_.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

void ByteWriter::f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }

void ByteWriter::f32s(std::span<const float> values) {
  buffer_.reserve(buffer_.size() + 4 * values.size());
  for (const float v : values) f32(v);
}

std::string_view ByteReader::bytes(std::size_t n, const char* what) {
  if (remaining() < n) {
    throw TruncatedInput(std::string("truncated input while reading ") + what);
  }
  auto view = data_.substr(pos_, n);
  pos_ += n;
  return view;
}

std::uint32_t ByteReader::u32(const char* what) {
  const auto raw = bytes(4, what);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) {
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(raw[i])) << (8 * i);
  }
  return v;
}

float ByteReader::f32(const char* what) { return std::bit_cast<float>(u32(what)); }

void ByteReader::f32s(std::span<float> out, const char* what) {
  if (remaining() < 4 * out.size()) {
    throw TruncatedInput(std::string("truncated input while reading ") + what);
  }
  for (auto& v : out) v = f32(what);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  if (in.bad()) throw IoError("failed reading " + path.string());
  return os.str();
}

void write_file_atomic(const std::filesystem::path& path, std::string_view content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw IoError("failed writing " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

std::string sha1_hex(std::string_view content) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
  unsigned int len = 0;
  if (EVP_Digest(content.data(), content.size(), digest.data(), &len, EVP_sha1(), nullptr) != 1) {
    throw IoError("sha1 computation failed");
  }
  std::string hex;
  hex.reserve(2 * len);
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", digest[i]);
    hex += buf;
  }
  return hex;
}

std::string git_blob_sha1(std::string_view content) {
  std::string framed = "blob " + std::to_string(content.size());
  framed.push_back('\0');
  framed.append(content);
  return sha1_hex(framed);
}

}  // namespace tabscope
