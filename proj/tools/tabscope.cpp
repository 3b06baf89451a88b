#include <CLI11.hpp>
#include <cstdlib>
#include <iostream>
#include <json.hpp>
#include <sstream>

#include "tabscope/analysis/experiments.hpp"
#include "tabscope/analysis/interventions.hpp"
#include "tabscope/analysis/lens.hpp"
#include "tabscope/core/runtime.hpp"
#include "tabscope/io/checkpoint.hpp"
#include "tabscope/io/trace_io.hpp"
#include "tabscope/report/report.hpp"
#include "tabscope/run/pipeline.hpp"

using namespace tabscope;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config;
  std::string preset;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  int workers = 1;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "JSON run config");
  cmd->add_option("--preset", c.preset, "Model preset")
      ->check(CLI::IsMember({"nano6l", "nano1l", "nanolooped", "paperdims"}));
  cmd->add_option("--seed", c.seed, "Root seed");
  cmd->add_option("--out-dir", c.out_dir, "Output directory (TABSCOPE_OUT overrides)");
  cmd->add_option("--workers", c.workers, "Worker count")->check(CLI::PositiveNumber);
}

run::RunConfig resolve(const Common& c) {
  run::RunConfig cfg = c.config.empty() ? run::RunConfig{} : run::load_run_config(c.config);
  if (!c.preset.empty()) {
    cfg.preset = c.preset;
    cfg.model = model::ModelConfig::preset(c.preset);
  }
  if (c.seed) cfg.seed = *c.seed;
  return cfg;
}

fs::path out_dir(const Common& c, const fs::path& fallback) {
  if (const char* env = std::getenv("TABSCOPE_OUT"); env && *env) return env;
  return c.out_dir.empty() ? fallback : fs::path(c.out_dir);
}

struct AnalyzeOptions {
  std::string kind;
  std::string checkpoint;
  std::string decoders;
  std::string trace_file;
  int episodes = 100;
  std::string metric = "cosine";
  int pairs = 100;
  std::string plans;
  bool swap_matrix = false;
  std::optional<int> skip_slot;
  std::string alignment = "remaining-depth";
  double l2 = 1e-2;
};

std::vector<model::InterventionPlan> parse_plans(const std::string& text) {
  std::vector<model::InterventionPlan> plans;
  std::string token;
  int depth = 0;
  for (const char ch : text + ";") {
    if (ch == '(') ++depth;
    if (ch == ')') --depth;
    if ((ch == ';' || (ch == ',' && depth == 0))) {
      if (!token.empty()) plans.push_back(model::InterventionPlan::parse(token));
      token.clear();
    } else {
      token += ch;
    }
  }
  return plans;
}

io::DecoderBundle require_decoders(const AnalyzeOptions& o, const model::TfmModel<float>& m) {
  fs::path path = o.decoders;
  if (path.empty()) path = fs::path(o.checkpoint).parent_path() / "lens" / "decoders.tfmd";
  if (!fs::exists(path)) {
    throw UsageError("no decoder bundle at " + path.string() +
                     "; run 'tabscope train-lens --checkpoint " + o.checkpoint +
                     "' first or pass --decoders");
  }
  auto bundle = io::load_decoder_bundle(path);
  if (static_cast<int>(bundle.decoders.size()) != m.slot_count() + 1) {
    throw UsageError("decoder bundle has " + std::to_string(bundle.decoders.size()) +
                     " decoders, model has " + std::to_string(m.slot_count() + 1) + " slots");
  }
  return bundle;
}

json similarity_summary(const analysis::SimilarityGrid& g) {
  json deg = json::array();
  for (const bool d : g.degenerate) deg.push_back(d);
  return json{{"slots", g.cka.rows()}, {"degenerate_slots", deg}};
}

int analyze_trace_file(const AnalyzeOptions& o, const run::RunConfig& cfg, report::ReportWriter& w) {
  const auto file = io::read_trace(o.trace_file);
  const auto& trace = file.trace;
  if (o.kind == "similarity") {
    const auto grid = analysis::similarity_grid(trace);
    w.csv("similarity.csv", report::similarity_table(grid));
    w.json_file("similarity.json", similarity_summary(grid));
  } else if (o.kind == "gap") {
    const analysis::GapOptions go{analysis::parse_gap_metric(o.metric), o.pairs, true};
    RandomStream rng = RandomStream(cfg.seed).derive("gap");
    const auto curve = analysis::gap_curve(trace, file.y_query, go, rng);
    w.csv("gap.csv", report::gap_table(curve, "query_label", go.metric));
    w.json_file("gap.json", json{{"pairs", o.pairs}, {"pair_sampling", "shared across slots"},
                                 {"pca_retained", analysis::kPcaRetained}});
  } else if (o.kind == "probe") {
    RandomStream rng = RandomStream(cfg.seed).derive("probe");
    const auto split = analysis::trace_probe_split(trace, file.y_query, rng);
    const auto grid = analysis::probe_grid(split, o.l2);
    w.csv("probe.csv", report::probe_table(grid.auc_raw, grid.auc_normalized, o.l2, grid.n_train,
                                           grid.n_eval));
    w.json_file("probe.json", json{{"asymmetry", analysis::grid_asymmetry(grid.auc_normalized)},
                                   {"unconverged", grid.unconverged}});
  } else {
    throw UsageError("analyze " + o.kind + " needs a checkpoint; --trace-file supports similarity, "
                     "gap and probe");
  }
  return 0;
}

int analyze(const AnalyzeOptions& o, const Common& c) {
  const auto cfg = resolve(c);
  json inputs{{"command", "analyze"}, {"kind", o.kind}, {"seed", cfg.seed},
              {"episodes", o.episodes}, {"prior", run::prior_to_json(cfg.prior)}};
  if (o.kind == "gap") inputs["gap"] = {{"metric", o.metric}, {"pairs", o.pairs}};
  if (o.kind == "probe") inputs["l2"] = o.l2;
  if (o.kind == "ablate") inputs["plans"] = {{"list", o.plans}, {"swap_matrix", o.swap_matrix}};
  if (o.kind == "self-repair") {
    inputs["skip_slot"] = o.skip_slot ? json(*o.skip_slot) : json("all");
    inputs["alignment"] = o.alignment;
  }
  if (!o.trace_file.empty()) {
    inputs["trace"] = sha1_hex(read_file(o.trace_file));
    report::ReportWriter w(out_dir(c, fs::path("reports") / o.kind), inputs);
    const int rc = analyze_trace_file(o, cfg, w);
    w.finish();
    return rc;
  }
  if (o.checkpoint.empty()) throw UsageError("analyze needs --checkpoint or --trace-file");
  const auto m = io::load_checkpoint(o.checkpoint);
  inputs["checkpoint"] = sha1_hex(read_file(o.checkpoint));
  prior::PriorConfig eval_prior = cfg.prior;
  eval_prior.seed = cfg.eval_seed();
  const auto episodes = analysis::evaluation_episodes(eval_prior, "heldout", o.episodes);

  std::optional<io::DecoderBundle> bundle;
  if (o.kind == "lens" || o.kind == "self-repair") {
    bundle = require_decoders(o, m);
    inputs["decoders"] = bundle->model_id;
  }
  report::ReportWriter w(out_dir(c, fs::path("reports") / o.kind), inputs);
  if (o.kind == "similarity") {
    const auto mean = analysis::mean_similarity(m, episodes);
    w.csv("similarity.csv", report::similarity_table(mean.grid));
    auto summary = similarity_summary(mean.grid);
    summary["episodes"] = mean.episodes;
    w.json_file("similarity.json", summary);
  } else if (o.kind == "gap") {
    const analysis::GapOptions go{analysis::parse_gap_metric(o.metric), o.pairs, true};
    const auto mean = analysis::mean_gap_curve(m, episodes, go, cfg.seed);
    w.csv("gap.csv", report::gap_table(mean.slots, "query_label", go.metric));
    w.json_file("gap.json", json{{"episodes_used", mean.episodes_used},
                                 {"pairs", o.pairs},
                                 {"pair_sampling", "shared across slots"},
                                 {"pca_retained", analysis::kPcaRetained}});
  } else if (o.kind == "probe") {
    const auto mean = analysis::mean_probe_grid(m, episodes, o.episodes, o.l2, cfg.seed);
    w.csv("probe.csv", report::probe_table(mean.auc_raw, mean.auc_normalized, o.l2, mean.n_train,
                                           mean.n_eval));
    w.json_file("probe.json",
                json{{"episodes", mean.episodes},
                     {"skipped_episodes", mean.skipped},
                     {"unconverged", mean.unconverged},
                     {"asymmetry", analysis::grid_asymmetry(mean.auc_normalized)},
                     {"normalization", "clamp((auc - 0.5) / (best diagonal - 0.5), 0, 1)"}});
  } else if (o.kind == "lens") {
    const auto report = analysis::lens_curve(m, &bundle->decoders, episodes);
    const auto s = analysis::lens_compare(report);
    w.csv("lens.csv", report::lens_table(report));
    w.json_file("lens.json", json{{"episodes", report.episodes},
                                  {"delta", s.delta},
                                  {"saturation_original", s.saturation_original},
                                  {"saturation_individual", s.saturation_individual},
                                  {"entropy_slope_original", s.entropy_slope_original},
                                  {"entropy_slope_individual", s.entropy_slope_individual}});
  } else if (o.kind == "ablate") {
    auto plans = o.plans.empty() ? analysis::default_plans(m.slot_count()) : parse_plans(o.plans);
    if (o.swap_matrix) {
      for (const auto& p : analysis::swap_matrix_plans(m.slot_count())) plans.push_back(p);
    }
    const auto rows = analysis::ablation_sweep(m, episodes, plans);
    w.csv("ablation.csv", report::ablation_table(rows));
    w.json_file("ablation.json", json{{"episodes", episodes.size()}, {"plans", rows.size()}});
  } else if (o.kind == "self-repair") {
    const auto alignment = o.alignment == "absolute" ? analysis::RepairAlignment::kAbsoluteIndex
                                                     : analysis::RepairAlignment::kRemainingDepth;
    std::vector<int> slots;
    if (o.skip_slot) {
      slots.push_back(*o.skip_slot);
    } else {
      for (int s = 0; s < m.slot_count(); ++s) slots.push_back(s);
    }
    std::vector<analysis::SelfRepairResult> results;
    json summary = json::array();
    for (const int s : slots) {
      results.push_back(analysis::self_repair(m, bundle->decoders, episodes, s, alignment, cfg.seed));
      const auto& r = results.back();
      summary.push_back(json{{"skip_slot", s},
                             {"defined", r.defined},
                             {"repair_position", r.repair_position},
                             {"immediate_drop", r.immediate_drop},
                             {"final_drop", r.final_drop},
                             {"recovery", r.recovery},
                             {"recovery_ci95", {r.recovery_ci.low, r.recovery_ci.high}}});
    }
    w.csv("self_repair.csv", report::self_repair_table(results));
    w.json_file("self_repair.json", json{{"episodes", episodes.size()}, {"slots", summary}});
  }
  w.finish();
  return 0;
}

int dump_prior(const Common& c, int count) {
  const auto cfg = resolve(c);
  prior::PriorConfig p = cfg.prior;
  p.seed = cfg.seed;
  const prior::EpisodeStream stream(p, "dump");
  report::ReportWriter w(out_dir(c, "episodes"),
                         json{{"command", "prior"}, {"prior", run::prior_to_json(p)}, {"count", count}});
  const auto matrix = [](const Eigen::MatrixXd& x) {
    json rows = json::array();
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      json row = json::array();
      for (Eigen::Index j = 0; j < x.cols(); ++j) row.push_back(x(r, j));
      rows.push_back(row);
    }
    return rows;
  };
  for (int i = 0; i < count; ++i) {
    const auto ep = stream.episode(static_cast<std::uint64_t>(i));
    w.json_file("episode_" + std::to_string(i) + ".json",
                json{{"id", ep.id}, {"n_classes", ep.n_classes},
                     {"x_support", matrix(ep.x_support)}, {"y_support", ep.y_support},
                     {"x_query", matrix(ep.x_query)}, {"y_query", ep.y_query}});
  }
  w.finish();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Layerwise analysis of tabular in-context transformers"};
  app.require_subcommand(1);

  Common train_c;
  bool dry_run = false;
  auto* train_cmd = app.add_subcommand("train", "Pretrain a model on the synthetic prior");
  add_common(train_cmd, train_c);
  train_cmd->add_flag("--dry-run", dry_run, "Validate the config and train zero steps");

  Common lens_c;
  std::string lens_checkpoint;
  auto* lens_cmd = app.add_subcommand("train-lens", "Train per-slot decoders on a frozen model");
  add_common(lens_cmd, lens_c);
  lens_cmd->add_option("--checkpoint", lens_checkpoint, "Model checkpoint")->required();

  Common an_c;
  AnalyzeOptions ao;
  auto* an_cmd = app.add_subcommand("analyze", "Run one layerwise experiment");
  add_common(an_cmd, an_c);
  an_cmd->add_option("kind", ao.kind, "Experiment")
      ->required()
      ->check(CLI::IsMember({"similarity", "gap", "probe", "lens", "ablate", "self-repair"}));
  an_cmd->add_option("--checkpoint", ao.checkpoint, "Model checkpoint");
  an_cmd->add_option("--decoders", ao.decoders, "Decoder bundle (default <checkpoint dir>/lens)");
  an_cmd->add_option("--trace-file", ao.trace_file, "Analyze a TFMT trace instead of a model");
  an_cmd->add_option("--episodes", ao.episodes, "Held-out episodes")->check(CLI::PositiveNumber);
  an_cmd->add_option("--metric", ao.metric, "Gap distance")
      ->check(CLI::IsMember({"cosine", "euclidean"}));
  an_cmd->add_option("--pairs", ao.pairs, "Gap pairs per kind (0: exhaustive)");
  an_cmd->add_option("--plans", ao.plans, "Plans, e.g. 'skip(0),swap(1,2)'");
  an_cmd->add_flag("--swap-matrix", ao.swap_matrix, "Add every swap(i,j)");
  an_cmd->add_option("--skip-slot", ao.skip_slot, "Self-repair slot (default: all)");
  an_cmd->add_option("--alignment", ao.alignment, "Self-repair decoder alignment")
      ->check(CLI::IsMember({"remaining-depth", "absolute"}));
  an_cmd->add_option("--l2", ao.l2, "Probe L2 strength");

  Common prior_c;
  int count = 4;
  auto* prior_cmd = app.add_subcommand("prior", "Dump sampled prior episodes as JSON");
  add_common(prior_cmd, prior_c);
  prior_cmd->add_option("--count", count, "Episodes")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  try {
    if (*train_cmd) {
      const auto cfg = resolve(train_c);
      const auto dir = out_dir(train_c, fs::path("runs") / cfg.preset);
      const auto outcome = run::train_run(cfg, dir, dry_run, &std::cerr);
      std::cout << "wrote " << (dir / "checkpoint.tfmc").string() << " (manifest "
                << outcome.manifest << ")\n";
    } else if (*lens_cmd) {
      const auto cfg = resolve(lens_c);
      const auto dir = out_dir(lens_c, fs::path(lens_checkpoint).parent_path() / "lens");
      const auto outcome = run::train_lens_run(cfg, lens_checkpoint, dir, &std::cerr);
      std::cout << "wrote " << (dir / "decoders.tfmd").string() << " ("
                << outcome.bundle.decoders.size() << " decoders)\n";
    } else if (*an_cmd) {
      return analyze(ao, an_c);
    } else if (*prior_cmd) {
      return dump_prior(prior_c, count);
    }
  } catch (const run::RunConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const model::PlanError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const train::TrainingDiverged& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
