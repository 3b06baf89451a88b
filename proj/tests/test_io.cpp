#include <doctest.h>

#include <cstring>
#include <filesystem>

#include "support.hpp"
#include "tabscope/core/binary_io.hpp"
#include "tabscope/io/checkpoint.hpp"
#include "tabscope/io/trace_io.hpp"
#include "tabscope/train/trainer.hpp"

using namespace tabscope;
using namespace tabscope::io;
namespace fs = std::filesystem;

namespace {

const fs::path kGolden = fs::path(TABSCOPE_TEST_DATA) / "golden.tfmt";

TraceFile random_trace(int slots, int n_q, int d, std::uint64_t seed) {
  RandomStream rng(seed);
  TraceFile f;
  f.trace.model_id = "m-" + std::to_string(seed);
  f.trace.episode_id = seed * 3;
  f.trace.plan = model::InterventionPlan::repeat(1);
  for (int k = 0; k < slots; ++k) {
    f.trace.layer_states.push_back(testing::random_matrix(n_q, d, rng).cast<float>());
  }
  for (int i = 0; i < n_q; ++i) f.y_query.push_back(i % 3);
  return f;
}

std::uint32_t le32(const std::string& b, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(b[at + i]);
  return v;
}

// Byte offsets of the fixed header fields and every matrix dim word.
std::vector<std::size_t> header_offsets(const std::string& bytes, int slots, std::size_t matrix_bytes) {
  std::vector<std::size_t> at;
  for (std::size_t i = 0; i < 12; ++i) at.push_back(i);
  std::size_t pos = 12 + le32(bytes, 8);
  for (int k = 0; k < slots; ++k) {
    for (std::size_t i = 0; i < 8; ++i) at.push_back(pos + i);
    pos += 8 + matrix_bytes;
  }
  return at;
}

}  // namespace

TEST_CASE("golden trace written by an independent encoder") {
  const auto bytes = read_file(kGolden);
  const auto f = decode_trace(bytes);
  CHECK(f.trace.model_id == "golden");
  CHECK(f.trace.episode_id == 7);
  CHECK(f.trace.plan == model::InterventionPlan::skip(1));
  CHECK(f.y_query == std::vector<int>{0, 1, 1, 2});
  REQUIRE(f.trace.slots() == 3);
  for (int k = 0; k < 3; ++k) {
    for (int r = 0; r < 4; ++r) {
      for (int c = 0; c < 3; ++c) {
        CHECK(f.trace.layer_states[k](r, c) == static_cast<float>((k + 1) * 0.25 - r * 0.5 + c / 8.0));
      }
    }
  }
  CHECK(encode_trace(f) == bytes);
}

TEST_CASE("trace round trip is bit exact") {
  const auto dir = fs::temp_directory_path() / "tabscope_io_test";
  fs::create_directories(dir);
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    auto f = random_trace(4, 6, 5, seed);
    if (seed % 2) f.probabilities.assign(4, std::vector<std::vector<double>>(6, {0.25, 0.75}));
    write_trace(f, dir / "t.tfmt");
    const auto back = read_trace(dir / "t.tfmt");
    CHECK(back.y_query == f.y_query);
    CHECK(back.probabilities == f.probabilities);
    for (int k = 0; k < 4; ++k) {
      CHECK(std::memcmp(back.trace.layer_states[k].data(), f.trace.layer_states[k].data(), 30 * sizeof(float)) == 0);
    }
    CHECK(encode_trace(back) == encode_trace(f));
  }
  fs::remove_all(dir);
}

TEST_CASE("empty query set gives zero-row matrices") {
  TraceFile f;
  f.trace.model_id = "empty";
  f.trace.layer_states.assign(3, Eigen::MatrixXf(0, 4));
  const auto back = decode_trace(encode_trace(f));
  CHECK(back.trace.slots() == 3);
  CHECK(back.trace.n_query() == 0);
  CHECK(back.trace.layer_states[2].cols() == 4);
}

TEST_CASE("each failure mode has its own error") {
  const auto bytes = encode_trace(random_trace(3, 4, 2, 9));
  auto bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_WITH_AS(decode_trace(bad), doctest::Contains("bad magic"), BadMagic);
  bad = bytes;
  bad[4] = 2;
  CHECK_THROWS_WITH_AS(decode_trace(bad), doctest::Contains("version mismatch"), VersionMismatch);
  CHECK_THROWS_WITH_AS(decode_trace(bytes.substr(0, bytes.size() - 3)), doctest::Contains("truncated payload"),
                       TruncatedPayload);
  CHECK_THROWS_AS(decode_trace(bytes + "x"), DimMismatch);
  const auto rows_at = 12 + le32(bytes, 8);
  bad = bytes;
  bad[rows_at] = 5;
  CHECK_THROWS_WITH_AS(decode_trace(bad), doctest::Contains("dim mismatch"), DimMismatch);
  const auto len_at = 12 + le32(bytes, 8) - 1;  // closing brace of the metadata
  bad = bytes;
  bad[len_at] = ' ';
  CHECK_THROWS_AS(decode_trace(bad), MetadataError);
  bad = bytes;
  std::memset(bad.data() + rows_at + 8, 0xff, 4);  // NaN payload
  CHECK_THROWS_AS(decode_trace(bad), TraceError);
}

TEST_CASE("any single-byte header corruption is rejected") {
  const int slots = 3, n_q = 4, d = 2;
  for (const auto& bytes : {read_file(kGolden), encode_trace(random_trace(slots, n_q, d, 4))}) {
    const auto f = decode_trace(bytes);
    const auto offsets = header_offsets(bytes, f.trace.slots(),
                                        static_cast<std::size_t>(f.trace.n_query() * f.trace.dim()) * 4);
    for (const auto at : offsets) {
      for (const unsigned char flip : {0x01, 0x80, 0xff}) {
        auto bad = bytes;
        bad[at] = static_cast<char>(static_cast<unsigned char>(bad[at]) ^ flip);
        CHECK_THROWS_AS(decode_trace(bad), TraceError);
      }
    }
  }
}

TEST_CASE("metadata must agree with the payload") {
  auto f = random_trace(2, 3, 2, 5);
  f.y_query.pop_back();
  CHECK_THROWS_AS(encode_trace(f), DimMismatch);
}

TEST_CASE("read errors name the file") {
  CHECK_THROWS_WITH_AS(read_trace("/nonexistent/x.tfmt"), doctest::Contains("/nonexistent/x.tfmt"), IoError);
  const auto path = fs::temp_directory_path() / "tabscope_bad.tfmt";
  write_file_atomic(path, "TFMX");
  CHECK_THROWS_WITH_AS(read_trace(path), doctest::Contains(path.string().c_str()), BadMagic);
  fs::remove(path);
}

TEST_CASE("checkpoint round trip") {
  auto m = model::TfmModel<float>::initialize(testing::tiny_config(2, true), 3);
  m.model_id = "tiny-looped";
  const auto bytes = encode_checkpoint(m);
  const auto back = decode_checkpoint(bytes);
  CHECK(back.model_id == "tiny-looped");
  CHECK(back.config().to_json() == m.config().to_json());
  CHECK(encode_checkpoint(back) == bytes);
  const auto ep = testing::toy_episode(8, 3, 2, 2, 1);
  CHECK(model::to_matrix(back.forward(ep).logits) == model::to_matrix(m.forward(ep).logits));
  CHECK(parameter_hash(back.parameters()) == parameter_hash(m.parameters()));

  auto bad = bytes;
  bad[1] = 'X';
  CHECK_THROWS_AS(decode_checkpoint(bad), CheckpointError);
  bad = bytes;
  bad[4] = 9;
  CHECK_THROWS_AS(decode_checkpoint(bad), CheckpointError);
  CHECK_THROWS_AS(decode_checkpoint(bytes + std::string(1, '\0')), CheckpointError);
  CHECK_THROWS_AS(decode_checkpoint(bytes.substr(0, bytes.size() - 1)), IoError);
  // a checkpoint for another architecture does not load into this shape
  auto deep = model::TfmModel<float>::initialize(testing::tiny_config(2), 3);
  const auto deep_bytes = encode_checkpoint(deep);
  const auto meta_len = le32(deep_bytes, 8);
  const auto swapped = bytes.substr(0, 12 + le32(bytes, 8)) + deep_bytes.substr(12 + meta_len);
  CHECK_THROWS_AS(decode_checkpoint(swapped), IoError);
}

TEST_CASE("decoder bundle round trip") {
  const auto m = model::TfmModel<float>::initialize(testing::tiny_config(2), 4);
  DecoderBundle bundle{"tiny", {m.decoder.clone(), m.decoder.clone(), m.decoder.clone()}};
  bundle.decoders[1].output.bias.mutable_data()[0] = 0.5f;
  const auto bytes = encode_decoder_bundle(bundle);
  const auto back = decode_decoder_bundle(bytes);
  CHECK(back.model_id == "tiny");
  REQUIRE(back.decoders.size() == 3);
  CHECK(back.decoders[1].output.bias.data()[0] == 0.5f);
  CHECK(encode_decoder_bundle(back) == bytes);
  auto bad = bytes;
  bad[3] = 'C';
  CHECK_THROWS_AS(decode_decoder_bundle(bad), CheckpointError);
}

TEST_CASE("little-endian primitives") {
  ByteWriter w;
  w.u32(0x01020304u);
  w.f32(1.0f);
  const auto b = w.take();
  CHECK(b == std::string("\x04\x03\x02\x01\x00\x00\x80\x3f", 8));
  ByteReader r(b);
  CHECK(r.u32("a") == 0x01020304u);
  CHECK(r.f32("b") == 1.0f);
  CHECK_THROWS_AS(r.u32("c"), TruncatedInput);
  CHECK(sha1_hex("abc") == "a9993e364706816aba3e25717850c26c9cd0d89d");
  CHECK(git_blob_sha1("hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a");
}
