#pragma once

#include <filesystem>
#include <json.hpp>
#include <map>
#include <string>
#include <vector>

#include "tabscope/analysis/experiments.hpp"
#include "tabscope/analysis/interventions.hpp"
#include "tabscope/analysis/lens.hpp"

namespace tabscope::report {

// Shortest round-trip decimal form; "" for a missing value.
std::string format_number(double v);

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  void add(std::vector<std::string> row) { rows.push_back(std::move(row)); }
  std::string to_csv(const std::string& manifest) const;
};

Table similarity_table(const analysis::SimilarityGrid& grid);
Table gap_table(const std::vector<std::optional<analysis::GapResult>>& slots,
                const std::string& channel, analysis::GapMetric metric);
Table lens_table(const analysis::LensReport& report);
Table probe_table(const Eigen::MatrixXd& raw, const Eigen::MatrixXd& normalized, double l2,
                  double n_train, double n_eval);
Table ablation_table(const std::vector<analysis::AblationRow>& rows);
Table self_repair_table(const std::vector<analysis::SelfRepairResult>& results);

/// Hash identifying a run by its inputs (command, configs, seeds, input hashes).
std::string manifest_hash(const nlohmann::json& inputs);

/// Writes report files atomically into one directory and records each
/// file's content hash for the run manifest.
class ReportWriter {
 public:
  ReportWriter(std::filesystem::path out_dir, nlohmann::json inputs);

  const std::string& hash() const { return hash_; }
  const std::filesystem::path& dir() const { return dir_; }

  void csv(const std::string& name, const Table& table);
  void json_file(const std::string& name, nlohmann::json body);
  void raw(const std::string& name, const std::string& bytes);
  // Writes manifest.json listing inputs and every file written so far.
  void finish();

 private:
  std::filesystem::path dir_;
  nlohmann::json inputs_;
  std::string hash_;
  std::map<std::string, std::string> outputs_;
};

}  // namespace tabscope::report
