#include "tabscope/report/report.hpp"

#include <charconv>
#include <sstream>

#include "tabscope/core/binary_io.hpp"

namespace tabscope::report {

using nlohmann::json;
using analysis::DecoderFamily;

std::string format_number(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string Table::to_csv(const std::string& manifest) const {
  std::ostringstream out;
  out << "# manifest " << manifest << '\n';
  for (std::size_t i = 0; i < header.size(); ++i) out << (i ? "," : "") << header[i];
  out << '\n';
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) out << (i ? "," : "") << row[i];
    out << '\n';
  }
  return out.str();
}

Table similarity_table(const analysis::SimilarityGrid& grid) {
  Table t{{"slot_i", "slot_j", "cka", "cosine"}, {}};
  for (Eigen::Index i = 0; i < grid.cka.rows(); ++i) {
    for (Eigen::Index j = 0; j < grid.cka.cols(); ++j) {
      t.add({std::to_string(i), std::to_string(j), format_number(grid.cka(i, j)),
             format_number(grid.cosine(i, j))});
    }
  }
  return t;
}

Table gap_table(const std::vector<std::optional<analysis::GapResult>>& slots,
                const std::string& channel, analysis::GapMetric metric) {
  Table t{{"slot", "channel", "metric", "delta", "n_within", "n_between"}, {}};
  for (std::size_t k = 0; k < slots.size(); ++k) {
    const auto& g = slots[k];
    t.add({std::to_string(k), channel, analysis::gap_metric_name(metric),
           g ? format_number(g->delta) : "", g ? std::to_string(g->n_within) : "0",
           g ? std::to_string(g->n_between) : "0"});
  }
  return t;
}

Table lens_table(const analysis::LensReport& report) {
  Table t{{"slot", "auc", "balanced_acc", "entropy", "decoder"}, {}};
  for (const auto& r : report.rows) {
    t.add({std::to_string(r.slot), format_number(r.auc), format_number(r.balanced_acc),
           format_number(r.entropy), analysis::family_name(r.family)});
  }
  return t;
}

Table probe_table(const Eigen::MatrixXd& raw, const Eigen::MatrixXd& normalized, double l2,
                  double n_train, double n_eval) {
  Table t{{"train_slot", "eval_slot", "auc_raw", "auc_normalized", "l2", "n_train", "n_eval"}, {}};
  for (Eigen::Index i = 0; i < raw.rows(); ++i) {
    for (Eigen::Index j = 0; j < raw.cols(); ++j) {
      t.add({std::to_string(i), std::to_string(j), format_number(raw(i, j)),
             format_number(normalized(i, j)), format_number(l2), format_number(n_train),
             format_number(n_eval)});
    }
  }
  return t;
}

Table ablation_table(const std::vector<analysis::AblationRow>& rows) {
  Table t{{"plan_kind", "i", "j", "auc", "balanced_acc", "entropy", "delta_vs_baseline"}, {}};
  for (const auto& r : rows) {
    const bool has_i = r.plan.kind != model::PlanKind::kNone;
    const bool has_j = r.plan.kind == model::PlanKind::kSwap;
    t.add({r.plan.kind_name(), has_i ? std::to_string(r.plan.i) : "",
           has_j ? std::to_string(r.plan.j) : "", format_number(r.auc),
           format_number(r.balanced_acc), format_number(r.entropy),
           format_number(r.delta_vs_baseline)});
  }
  return t;
}

Table self_repair_table(const std::vector<analysis::SelfRepairResult>& results) {
  Table t{{"skip_slot", "slot", "decoder_family", "auc", "baseline_auc"}, {}};
  for (const auto& r : results) {
    for (std::size_t k = 0; k < r.baseline.size(); ++k) {
      t.add({std::to_string(r.skip_slot), std::to_string(k),
             analysis::family_name(DecoderFamily::kIndividual),
             r.ablated[k] ? format_number(*r.ablated[k]) : "", format_number(r.baseline[k])});
    }
  }
  return t;
}

std::string manifest_hash(const json& inputs) { return sha1_hex(inputs.dump()); }

ReportWriter::ReportWriter(std::filesystem::path out_dir, nlohmann::json inputs)
    : dir_(std::move(out_dir)), inputs_(std::move(inputs)), hash_(manifest_hash(inputs_)) {
  std::filesystem::create_directories(dir_);
}

void ReportWriter::raw(const std::string& name, const std::string& bytes) {
  write_file_atomic(dir_ / name, bytes);
  outputs_[name] = git_blob_sha1(bytes);
}

void ReportWriter::csv(const std::string& name, const Table& table) {
  raw(name, table.to_csv(hash_));
}

void ReportWriter::json_file(const std::string& name, nlohmann::json body) {
  body["manifest"] = hash_;
  raw(name, body.dump(2) + "\n");
}

void ReportWriter::finish() {
  nlohmann::json manifest{{"manifest", hash_}, {"inputs", inputs_}, {"outputs", outputs_}};
  write_file_atomic(dir_ / "manifest.json", manifest.dump(2) + "\n");
}

}  // namespace tabscope::report
