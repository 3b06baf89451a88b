#include "tabscope/io/trace_io.hpp"

#include <json.hpp>

namespace tabscope::io {

using nlohmann::json;

namespace {

json metadata(const TraceFile& file) {
  const auto& t = file.trace;
  json meta{{"model_id", t.model_id},
            {"episode_id", t.episode_id},
            {"plan", t.plan.to_json()},
            {"L", t.slots() - 1},
            {"d", t.dim()},
            {"n_q", t.n_query()},
            {"y_query", file.y_query}};
  if (!file.probabilities.empty()) meta["probabilities"] = file.probabilities;
  return meta;
}

template <typename V>
V required(const json& meta, const char* key) {
  if (!meta.contains(key)) throw MetadataError(std::string("metadata: missing field '") + key + "'");
  try {
    return meta.at(key).get<V>();
  } catch (const json::exception&) {
    throw MetadataError(std::string("metadata: field '") + key + "' has the wrong type");
  }
}

void check_trace(const TraceFile& file) {
  try {
    file.trace.validate();
  } catch (const std::invalid_argument& e) {
    throw DimMismatch(e.what());
  }
  if (file.y_query.size() != static_cast<std::size_t>(file.trace.n_query())) {
    throw DimMismatch("y_query has " + std::to_string(file.y_query.size()) + " labels for n_q = " +
                      std::to_string(file.trace.n_query()));
  }
}

}  // namespace

std::string encode_trace(const TraceFile& file) {
  check_trace(file);
  ByteWriter w;
  w.bytes("TFMT");
  w.u32(kTraceVersion);
  const auto text = metadata(file).dump();
  w.u32(static_cast<std::uint32_t>(text.size()));
  w.bytes(text);
  std::vector<float> row_major;
  for (const auto& s : file.trace.layer_states) {
    w.u32(static_cast<std::uint32_t>(s.rows()));
    w.u32(static_cast<std::uint32_t>(s.cols()));
    row_major.resize(static_cast<std::size_t>(s.size()));
    Eigen::Map<Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        row_major.data(), s.rows(), s.cols()) = s;
    w.f32s(row_major);
  }
  return w.take();
}

TraceFile decode_trace(std::string_view bytes) {
  ByteReader r(bytes);
  try {
    if (r.bytes(4, "magic") != "TFMT") throw BadMagic("bad magic: not a TFMT trace");
    const auto version = r.u32("version");
    if (version != kTraceVersion) {
      throw VersionMismatch("version mismatch: file has " + std::to_string(version) +
                            ", reader supports " + std::to_string(kTraceVersion));
    }
    const auto len = r.u32("metadata length");
    if (len > r.remaining()) {
      throw TruncatedPayload("truncated payload: metadata length " + std::to_string(len) +
                             " exceeds the " + std::to_string(r.remaining()) + " bytes left");
    }
    json meta;
    try {
      meta = json::parse(r.bytes(len, "metadata"));
    } catch (const json::exception& e) {
      throw MetadataError(std::string("metadata: ") + e.what());
    }
    if (!meta.is_object()) throw MetadataError("metadata: expected a JSON object");

    TraceFile file;
    const int layers = required<int>(meta, "L");
    const int d = required<int>(meta, "d");
    const int n_q = required<int>(meta, "n_q");
    if (layers < 0 || d < 0 || n_q < 0) throw MetadataError("metadata: negative L, d or n_q");
    file.y_query = required<std::vector<int>>(meta, "y_query");
    file.trace.model_id = required<std::string>(meta, "model_id");
    file.trace.episode_id = required<std::uint64_t>(meta, "episode_id");
    if (meta.contains("plan")) {
      try {
        file.trace.plan = model::InterventionPlan::from_json(meta.at("plan"));
      } catch (const std::exception& e) {
        throw MetadataError(std::string("metadata: field 'plan': ") + e.what());
      }
    }
    if (meta.contains("probabilities")) {
      file.probabilities =
          required<std::vector<std::vector<std::vector<double>>>>(meta, "probabilities");
    }
    if (file.y_query.size() != static_cast<std::size_t>(n_q)) {
      throw DimMismatch("dim mismatch: y_query has " + std::to_string(file.y_query.size()) +
                        " labels, n_q = " + std::to_string(n_q));
    }

    std::vector<float> row_major;
    for (int k = 0; k <= layers; ++k) {
      const std::string where = "slot " + std::to_string(k);
      const auto rows = r.u32((where + " rows").c_str());
      const auto cols = r.u32((where + " cols").c_str());
      if (rows != static_cast<std::uint32_t>(n_q) || cols != static_cast<std::uint32_t>(d)) {
        throw DimMismatch("dim mismatch: " + where + " is " + std::to_string(rows) + "x" +
                          std::to_string(cols) + ", metadata says " + std::to_string(n_q) + "x" +
                          std::to_string(d));
      }
      row_major.resize(static_cast<std::size_t>(rows) * cols);
      r.f32s(row_major, (where + " data").c_str());
      file.trace.layer_states.push_back(
          Eigen::Map<Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
              row_major.data(), rows, cols));
    }
    if (r.remaining() != 0) {
      throw DimMismatch("dim mismatch: " + std::to_string(r.remaining()) +
                        " bytes after the last declared matrix");
    }
    for (std::size_t k = 0; k < file.trace.layer_states.size(); ++k) {
      if (!file.trace.layer_states[k].allFinite()) {
        throw TraceError("slot " + std::to_string(k) + " holds non-finite values");
      }
    }
    return file;
  } catch (const TruncatedInput& e) {
    throw TruncatedPayload(std::string("truncated payload: ") + e.what());
  }
}

void write_trace(const TraceFile& file, const std::filesystem::path& path) {
  const auto bytes = encode_trace(file);
  try {
    write_file_atomic(path, bytes);
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

void write_trace(const model::ActivationTrace& trace, const std::vector<int>& y_query,
                 const std::filesystem::path& path) {
  write_trace(TraceFile{trace, y_query, {}}, path);
}

TraceFile read_trace(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  try {
    return decode_trace(bytes);
  } catch (const BadMagic& e) {
    throw BadMagic(path.string() + ": " + e.what());
  } catch (const VersionMismatch& e) {
    throw VersionMismatch(path.string() + ": " + e.what());
  } catch (const DimMismatch& e) {
    throw DimMismatch(path.string() + ": " + e.what());
  } catch (const TruncatedPayload& e) {
    throw TruncatedPayload(path.string() + ": " + e.what());
  } catch (const MetadataError& e) {
    throw MetadataError(path.string() + ": " + e.what());
  }
}

}  // namespace tabscope::io
