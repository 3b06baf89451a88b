#include "tabscope/io/checkpoint.hpp"

#include <json.hpp>

namespace tabscope::io {

using nlohmann::json;

namespace {

void write_tensor(ByteWriter& w, const nd::Tensor<float>& t) {
  w.u32(static_cast<std::uint32_t>(t.rank()));
  for (const auto d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
  w.f32s(t.data());
}

// Reads one tensor into `target`, which fixes the expected shape.
void read_tensor(ByteReader& r, nd::Tensor<float>& target, std::size_t index) {
  const std::string where = "tensor " + std::to_string(index);
  const auto rank = r.u32((where + " rank").c_str());
  nd::Shape shape(rank);
  for (auto& d : shape) d = r.u32((where + " dims").c_str());
  if (shape != target.shape()) {
    throw CheckpointError(where + ": shape " + nd::shape_string(shape) + ", model expects " +
                          nd::shape_string(target.shape()));
  }
  r.f32s(target.mutable_data(), (where + " data").c_str());
}

void write_header(ByteWriter& w, const char* magic, std::uint32_t version, const json& meta) {
  w.bytes(magic);
  w.u32(version);
  const auto text = meta.dump();
  w.u32(static_cast<std::uint32_t>(text.size()));
  w.bytes(text);
}

json read_header(ByteReader& r, const char* magic, std::uint32_t version) {
  if (r.bytes(4, "magic") != std::string_view(magic, 4)) {
    throw CheckpointError(std::string("bad magic: expected ") + magic);
  }
  const auto found = r.u32("version");
  if (found != version) {
    throw CheckpointError("version mismatch: file " + std::to_string(found) + ", reader " +
                          std::to_string(version));
  }
  const auto len = r.u32("metadata length");
  const auto text = r.bytes(len, "metadata");
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("metadata: ") + e.what());
  }
}

void expect_end(const ByteReader& r) {
  if (r.remaining() != 0) {
    throw CheckpointError(std::to_string(r.remaining()) + " trailing bytes after last tensor");
  }
}

}  // namespace

std::string encode_checkpoint(const model::TfmModel<float>& m) {
  ByteWriter w;
  write_header(w, "TFMC", kCheckpointVersion,
               json{{"config", m.config().to_json()}, {"model_id", m.model_id}});
  for (const auto& p : m.parameters()) write_tensor(w, p);
  return w.take();
}

model::TfmModel<float> decode_checkpoint(std::string_view bytes) {
  ByteReader r(bytes);
  const json meta = read_header(r, "TFMC", kCheckpointVersion);
  if (!meta.is_object() || !meta.contains("config")) {
    throw CheckpointError("metadata: missing 'config'");
  }
  auto m = model::TfmModel<float>::initialize(model::ModelConfig::from_json(meta.at("config")), 0);
  m.model_id = meta.value("model_id", std::string());
  auto params = m.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) read_tensor(r, params[i], i);
  expect_end(r);
  return m;
}

void save_checkpoint(const model::TfmModel<float>& m, const std::filesystem::path& path) {
  write_file_atomic(path, encode_checkpoint(m));
}

model::TfmModel<float> load_checkpoint(const std::filesystem::path& path) {
  try {
    return decode_checkpoint(read_file(path));
  } catch (const IoError& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  }
}

std::string parameter_hash(const std::vector<nd::Tensor<float>>& params) {
  ByteWriter w;
  for (const auto& p : params) write_tensor(w, p);
  return sha1_hex(w.buffer());
}

std::string encode_decoder_bundle(const DecoderBundle& bundle) {
  ByteWriter w;
  write_header(w, "TFMD", kDecoderBundleVersion,
               json{{"model_id", bundle.model_id}, {"slots", bundle.decoders.size()}});
  for (const auto& d : bundle.decoders) {
    for (const auto& p : d.parameters()) write_tensor(w, p);
  }
  return w.take();
}

DecoderBundle decode_decoder_bundle(std::string_view bytes) {
  ByteReader r(bytes);
  const json meta = read_header(r, "TFMD", kDecoderBundleVersion);
  DecoderBundle bundle;
  bundle.model_id = meta.value("model_id", std::string());
  const auto slots = meta.value("slots", std::size_t{0});
  std::size_t index = 0;
  for (std::size_t s = 0; s < slots; ++s) {
    // Shapes come from the file; the first tensor's header fixes the widths.
    model::DecoderParams<float> d;
    nd::Tensor<float>* fields[] = {&d.hidden.weight, &d.hidden.bias, &d.output.weight,
                                   &d.output.bias};
    for (auto* f : fields) {
      const std::string where = "decoder " + std::to_string(s) + " tensor " + std::to_string(index);
      const auto rank = r.u32((where + " rank").c_str());
      if (rank == 0 || rank > 2) throw CheckpointError(where + ": bad rank " + std::to_string(rank));
      nd::Shape shape(rank);
      for (auto& dim : shape) dim = r.u32((where + " dims").c_str());
      *f = nd::Tensor<float>::zeros(shape);
      r.f32s(f->mutable_data(), (where + " data").c_str());
      ++index;
    }
    bundle.decoders.push_back(std::move(d));
  }
  expect_end(r);
  return bundle;
}

void save_decoder_bundle(const DecoderBundle& bundle, const std::filesystem::path& path) {
  write_file_atomic(path, encode_decoder_bundle(bundle));
}

DecoderBundle load_decoder_bundle(const std::filesystem::path& path) {
  try {
    return decode_decoder_bundle(read_file(path));
  } catch (const IoError& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  }
}

}  // namespace tabscope::io
