// Acceptance suite: one PASS/FAIL line per criterion.
#include <CLI11.hpp>
#include <Eigen/Dense>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <unistd.h>

#include "tabscope/analysis/experiments.hpp"
#include "tabscope/analysis/interventions.hpp"
#include "tabscope/analysis/lens.hpp"
#include "tabscope/core/binary_io.hpp"
#include "tabscope/core/runtime.hpp"
#include "tabscope/io/checkpoint.hpp"
#include "tabscope/io/trace_io.hpp"
#include "tabscope/nd/grad_check.hpp"
#include "tabscope/nd/ops.hpp"
#include "tabscope/report/report.hpp"
#include "tabscope/run/pipeline.hpp"

using namespace tabscope;
using namespace tabscope::analysis;
using Eigen::MatrixXd;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int precision = 4) {
  std::ostringstream out;
  out.precision(precision);
  out << v;
  return out.str();
}

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

MatrixXd random_matrix(int rows, int cols, RandomStream& rng) {
  MatrixXd m(rows, cols);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) m(r, c) = rng.normal();
  }
  return m;
}

int draw(RandomStream& rng, int lo, int hi) { return static_cast<int>(rng.uniform_int(lo, hi)); }

double rel_err(double got, double want) { return std::abs(got - want) / std::max(1.0, std::abs(want)); }

// Brute-force references.

double oracle_cka(const MatrixXd& x, const MatrixXd& y) {
  const auto n = x.rows();
  const MatrixXd h = MatrixXd::Identity(n, n) - MatrixXd::Constant(n, n, 1.0 / n);
  const MatrixXd k = h * x * x.transpose() * h, l = h * y * y.transpose() * h;
  const auto dot = [](const MatrixXd& a, const MatrixXd& b) { return (a.array() * b.array()).sum(); };
  return dot(k, l) / std::sqrt(dot(k, k) * dot(l, l));
}

double oracle_cosine(const MatrixXd& x, const MatrixXd& y) {
  double total = 0.0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    double dot = 0, nx = 0, ny = 0;
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      dot += x(i, j) * y(i, j);
      nx += x(i, j) * x(i, j);
      ny += y(i, j) * y(i, j);
    }
    total += std::abs(dot) / std::sqrt(nx * ny);
  }
  return total / static_cast<double>(x.rows());
}

double oracle_gap(const MatrixXd& z, const std::vector<int>& y, GapMetric metric) {
  double within = 0, between = 0;
  int nw = 0, nb = 0;
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    for (Eigen::Index j = i + 1; j < z.rows(); ++j) {
      const Eigen::VectorXd a = z.row(i), b = z.row(j);
      const double d = metric == GapMetric::kEuclidean ? (a - b).norm()
                                                        : 1.0 - a.dot(b) / (a.norm() * b.norm());
      if (y[i] == y[j]) {
        within += d;
        ++nw;
      } else {
        between += d;
        ++nb;
      }
    }
  }
  return between / nb - within / nw;
}

// Projection onto the leading principal axes covering `retained` of the variance.
MatrixXd oracle_pca(const MatrixXd& x, double retained) {
  const MatrixXd c = x.rowwise() - x.colwise().mean();
  Eigen::JacobiSVD<MatrixXd> svd(c, Eigen::ComputeThinV);
  const Eigen::VectorXd var = svd.singularValues().array().square();
  int k = 0;
  for (double cum = 0; cum < retained * var.sum() - 1e-12 * var.sum(); ++k) cum += var(k);
  return c * svd.matrixV().leftCols(k);
}

double oracle_auc(const std::vector<double>& s, const std::vector<int>& positive) {
  double wins = 0;
  long pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (!positive[i] || positive[j]) continue;
      ++pairs;
      wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
    }
  }
  return wins / static_cast<double>(pairs);
}

double oracle_ovr_auc(const MatrixXd& p, const std::vector<int>& y) {
  const std::set<int> present(y.begin(), y.end());
  if (p.cols() == 2) {
    std::vector<double> s(y.size());
    std::vector<int> pos(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) {
      s[i] = p(i, 1);
      pos[i] = y[i] == 1;
    }
    return oracle_auc(s, pos);
  }
  double total = 0;
  for (const int k : present) {
    std::vector<double> s(y.size());
    std::vector<int> pos(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) {
      s[i] = p(i, k);
      pos[i] = y[i] == k;
    }
    total += oracle_auc(s, pos);
  }
  return total / static_cast<double>(present.size());
}

double oracle_balanced(const std::vector<int>& pred, const std::vector<int>& truth) {
  const std::set<int> classes(truth.begin(), truth.end());
  double total = 0;
  for (const int c : classes) {
    int hit = 0, n = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
      if (truth[i] != c) continue;
      ++n;
      hit += pred[i] == c;
    }
    total += static_cast<double>(hit) / n;
  }
  return total / static_cast<double>(classes.size());
}

double oracle_entropy(const MatrixXd& p) {
  double total = 0;
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    for (Eigen::Index c = 0; c < p.cols(); ++c) {
      if (p(i, c) > 0) total -= p(i, c) * std::log(p(i, c));
    }
  }
  return total / static_cast<double>(p.rows());
}

MatrixXd random_probs(int n, int c, RandomStream& rng) {
  MatrixXd p = random_matrix(n, c, rng).array().exp();
  for (Eigen::Index i = 0; i < n; ++i) p.row(i) /= p.row(i).sum();
  return p;
}

// Labels 0..classes-1 with every class present.
std::vector<int> random_labels(int n, int classes, RandomStream& rng) {
  std::vector<int> y(n);
  for (int i = 0; i < n; ++i) y[i] = i < classes ? i : draw(rng, 0, classes - 1);
  return y;
}

prior::Episode small_episode(int n_support, int n_query, int features, int classes,
                             std::uint64_t seed) {
  RandomStream rng(seed);
  prior::Episode ep;
  ep.id = seed;
  ep.n_classes = classes;
  ep.x_support = random_matrix(n_support, features, rng);
  ep.x_query = random_matrix(n_query, features, rng);
  for (int r = 0; r < n_support; ++r) ep.y_support.push_back(r % classes);
  for (int r = 0; r < n_query; ++r) ep.y_query.push_back((r + 1) % classes);
  return ep;
}

model::ModelConfig grad_check_config() {
  model::ModelConfig cfg;
  cfg.embed_dim = 8;
  cfg.n_heads = 2;
  cfg.ff_dim = 16;
  cfg.n_blocks = 2;
  cfg.max_classes = 2;
  cfg.max_features = 1;
  return cfg;
}

Outcome gradient_check() {
  const auto start = std::chrono::steady_clock::now();
  const auto md = model::TfmModel<float>::initialize(grad_check_config(), 1).cast<double>();
  const auto ep = small_episode(4, 2, 1, 2, 2);
  const auto loss = [&] {
    return nd::cross_entropy(md.forward(ep).logits, std::span<const int>(ep.y_query));
  };
  const double err = nd::grad_check(loss, md.parameters());
  const double secs = seconds_since(start);
  return {err < 1e-4 && secs < 60.0,
          "max relative error " + fmt(err, 3) + " over all coordinates, " + fmt(secs, 3) + " s"};
}

Outcome metric_oracles() {
  const auto start = std::chrono::steady_clock::now();
  RandomStream rng(2024);
  double worst = 0.0, worst_pca = 0.0;
  const auto note = [](double& acc, double e) { acc = std::max(acc, e); };
  for (int t = 0; t < 25; ++t) {
    const int n = draw(rng, 6, 40), d = draw(rng, 2, 10);
    const auto x = random_matrix(n, d, rng), y = random_matrix(n, draw(rng, 1, 10), rng);
    note(worst, rel_err(linear_cka(x, y).value, oracle_cka(x, y)));
    const auto y2 = random_matrix(n, d, rng);
    note(worst, rel_err(mean_abs_cosine(x, y2).value, oracle_cosine(x, y2)));

    const auto labels = random_labels(n, draw(rng, 2, 4), rng);
    for (const auto metric : {GapMetric::kCosine, GapMetric::kEuclidean}) {
      note(worst, rel_err(separation_gap(x, std::span<const int>(labels), metric, 0, rng).delta,
                          oracle_gap(x, labels, metric)));
      RandomStream fit(t);
      const MatrixXd low_rank = x * random_matrix(d, d, rng);
      const auto z = fit_pca(low_rank, kPcaRetained, kPcaSampleCap, fit).project(low_rank);
      note(worst_pca, rel_err(separation_gap(z, std::span<const int>(labels), GapMetric::kEuclidean, 0, rng).delta,
                              oracle_gap(oracle_pca(low_rank, kPcaRetained), labels, GapMetric::kEuclidean)));
    }

    std::vector<double> s(n);
    std::vector<int> bin(n);
    for (int i = 0; i < n; ++i) {
      s[i] = std::round(rng.normal() * 2) / 2;  // ties
      bin[i] = i < 2 ? i : draw(rng, 0, 1);
    }
    note(worst, rel_err(roc_auc(s, bin), oracle_auc(s, bin)));
    const int classes = draw(rng, 2, 5);
    const auto p = random_probs(n, classes, rng);
    const auto yc = random_labels(n, classes, rng);
    note(worst, rel_err(roc_auc_ovr(p, yc), oracle_ovr_auc(p, yc)));
    std::vector<int> pred(n);
    for (int i = 0; i < n; ++i) pred[i] = draw(rng, 0, classes - 1);
    note(worst, rel_err(balanced_accuracy(pred, yc), oracle_balanced(pred, yc)));
    note(worst, rel_err(prediction_entropy(p), oracle_entropy(p)));
  }
  const double secs = seconds_since(start);
  return {worst < 1e-8 && worst_pca < 1e-6 && secs < 60.0,
          "25 instances per metric, max error " + fmt(worst, 3) + " (PCA path " + fmt(worst_pca, 3) +
              "), " + fmt(secs, 3) + " s"};
}

Outcome cka_invariance() {
  RandomStream rng(77);
  double worst = 0.0;
  for (int t = 0; t < 20; ++t) {
    const int n = draw(rng, 8, 60), d = draw(rng, 2, 16);
    const auto x = random_matrix(n, d, rng);
    Eigen::HouseholderQR<MatrixXd> qr(random_matrix(d, d, rng));
    const MatrixXd r = qr.householderQ();
    const double c = std::exp(rng.uniform(-4.0, 4.0));
    worst = std::max(worst, std::abs(linear_cka(x, c * x * r).value - 1.0));
  }
  return {worst <= 1e-9, "20 draws, max |CKA - 1| " + fmt(worst, 3)};
}

struct Models {
  fs::path runs;
  std::map<std::string, run::RunConfig> configs;
  std::map<std::string, model::TfmModel<float>> models;
  std::vector<prior::Episode> episodes;  // held out
  std::optional<io::DecoderBundle> lens;

  const model::TfmModel<float>& get(const std::string& preset) {
    auto it = models.find(preset);
    if (it == models.end()) {
      std::cerr << "loading " << preset << std::endl;
      it = models.emplace(preset, run::load_or_train(configs.at(preset), runs / preset, &std::cerr)).first;
    }
    return it->second;
  }

  const std::vector<model::DecoderParams<float>>& decoders() {
    if (!lens) {
      get("nano6l");
      lens = run::load_or_train_lens(configs.at("nano6l"), runs / "nano6l" / "checkpoint.tfmc",
                                     runs / "nano6l" / "lens", &std::cerr);
    }
    return lens->decoders;
  }

  std::vector<prior::Episode> held_out(int count) const {
    return {episodes.begin(), episodes.begin() + count};
  }
};

std::int64_t counted_params(const model::TfmModel<float>& m) {
  std::int64_t n = 0;
  for (const auto& p : m.parameters()) n += static_cast<std::int64_t>(p.size());
  return n;
}

double mean_auc(const model::TfmModel<float>& m, const std::vector<prior::Episode>& eps) {
  return ablation_sweep(m, eps, {}).front().auc;
}

Outcome looped_vs_deep(Models& ms) {
  const auto eps = ms.held_out(200);
  const double deep = mean_auc(ms.get("nano6l"), eps);
  const double looped = mean_auc(ms.get("nanolooped"), eps);
  const double shallow = mean_auc(ms.get("nano1l"), eps);
  const double ratio = static_cast<double>(counted_params(ms.get("nanolooped"))) /
                       static_cast<double>(counted_params(ms.get("nano6l")));
  const bool pass = looped >= deep - 0.02 && shallow <= looped - 0.02 && ratio < 0.35;
  return {pass, "AUC 6l " + fmt(deep) + ", looped " + fmt(looped) + ", 1l " + fmt(shallow) +
                    " over 200 episodes; param ratio " + fmt(ratio, 3)};
}

Outcome lens_shape(Models& ms) {
  const auto& m = ms.get("nano6l");
  const auto report = lens_curve(m, &ms.decoders(), ms.held_out(100));
  const auto indiv = report.auc(DecoderFamily::kIndividual);
  const auto orig = report.auc(DecoderFamily::kOriginal);
  const double first = indiv[1], last = indiv.back();
  const int sat_i = saturation_slot(indiv), sat_o = saturation_slot(orig);
  const bool pass = first - 0.5 >= 0.9 * (last - 0.5) && sat_i <= sat_o;
  return {pass, "individual AUC slot 1 " + fmt(first) + " vs final " + fmt(last) +
                    "; 95% slot individual " + std::to_string(sat_i) + ", original " +
                    std::to_string(sat_o)};
}

Outcome ablation_order(Models& ms) {
  const auto& m = ms.get("nano6l");
  const int slots = m.slot_count();
  std::vector<model::InterventionPlan> plans;
  for (int i = 0; i < slots; ++i) plans.push_back(model::InterventionPlan::skip(i));
  const auto rows = ablation_sweep(m, ms.held_out(100), plans);
  const double first = rows[1].delta_vs_baseline;
  double later = 0.0;
  for (int i = 2; i < slots; ++i) later += rows[1 + i].delta_vs_baseline / (slots - 2);
  return {first > later, "drop skip(0) " + fmt(first) + ", mean drop skip(2.." +
                             std::to_string(slots - 1) + ") " + fmt(later)};
}

Outcome self_repair_direction(Models& ms) {
  const auto& m = ms.get("nano6l");
  const auto eps = ms.held_out(100);
  const auto seed = ms.configs.at("nano6l").eval_seed();
  std::string best;
  bool repaired = false;
  for (int s = 1; s + 2 <= m.slot_count(); ++s) {
    const auto r = self_repair(m, ms.decoders(), eps, s, RepairAlignment::kRemainingDepth, seed);
    best += " skip(" + std::to_string(s) + ") " + fmt(r.recovery, 3) + " [" + fmt(r.recovery_ci.low, 3) +
            ", " + fmt(r.recovery_ci.high, 3) + "]";
    repaired = repaired || r.recovery_ci.low > 0.0;
  }
  const auto r0 = self_repair(m, ms.decoders(), eps, 0, RepairAlignment::kRemainingDepth, seed);
  const bool early = r0.final_drop >= 0.5 * r0.immediate_drop;
  return {repaired && early, "recovery with 95% CI:" + best + "; skip(0) immediate " +
                                 fmt(r0.immediate_drop, 3) + ", final " + fmt(r0.final_drop, 3)};
}

Outcome probe_asymmetry(Models& ms) {
  const auto& m = ms.get("nano6l");
  const auto grid = mean_probe_grid(m, ms.held_out(200), 20, 1e-2, ms.configs.at("nano6l").eval_seed());
  const double a = grid_asymmetry(grid.auc_raw);
  return {grid.episodes == 20 && a >= 0.0,
          "mean asymmetry " + fmt(a, 3) + " (normalized " + fmt(grid_asymmetry(grid.auc_normalized), 3) +
              ") over " + std::to_string(grid.episodes) + " episodes"};
}

Outcome gap_trend(Models& ms) {
  const auto& m = ms.get("nano6l");
  const GapOptions opt{GapMetric::kCosine, 100, true};
  const auto curve = mean_gap_curve(m, ms.held_out(100), opt, ms.configs.at("nano6l").eval_seed());
  if (!curve.slots.front() || !curve.slots.back()) return {false, "gap undefined at an end slot"};
  const double first = curve.slots.front()->delta, last = curve.slots.back()->delta;
  return {last > first, "cosine gap slot 0 " + fmt(first) + ", final slot " + fmt(last)};
}

Outcome determinism_and_format(Models& ms) {
  const auto tmp = fs::temp_directory_path() / ("tabscope_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(tmp);
  std::vector<std::string> problems;

  // Short runs of the real nano6l setup, trained twice from one seed.
  auto cfg = ms.configs.at("nano6l");
  cfg.train.steps = 2;
  cfg.train.batch_size = 4;
  cfg.train.warmup_steps = 1;
  const auto a = run::train_run(cfg, tmp / "a", false, nullptr);
  const auto b = run::train_run(cfg, tmp / "b", false, nullptr);
  for (const char* f : {"checkpoint.tfmc", "loss.csv", "manifest.json"}) {
    if (read_file(tmp / "a" / f) != read_file(tmp / "b" / f)) problems.push_back(std::string(f) + " differs");
  }
  const auto eps = ms.held_out(4);
  for (const char* dir : {"ra", "rb"}) {
    report::ReportWriter w(tmp / dir, {{"check", "determinism"}});
    w.csv("ablation.csv", report::ablation_table(ablation_sweep(a.model, eps, default_plans(a.model.slot_count()))));
    w.csv("gap.csv", report::gap_table(mean_gap_curve(a.model, eps, {}, 5).slots, "query_label", GapMetric::kCosine));
    w.finish();
  }
  for (const char* f : {"ablation.csv", "gap.csv"}) {
    if (read_file(tmp / "ra" / f) != read_file(tmp / "rb" / f)) problems.push_back(std::string(f) + " differs");
  }

  // Round trip of a real trace, then every byte of the fixed header and matrix dims flipped.
  const auto& ep = ms.episodes.front();
  io::TraceFile trace{a.model.forward(ep).trace, ep.y_query, {}};
  trace.trace.episode_id = ep.id;
  io::write_trace(trace, tmp / "trace.tfmt");
  const auto back = io::read_trace(tmp / "trace.tfmt");
  bool exact = back.y_query == trace.y_query && back.trace.slots() == trace.trace.slots();
  for (int k = 0; exact && k < trace.trace.slots(); ++k) {
    const auto& x = trace.trace.layer_states[k];
    const auto& y = back.trace.layer_states[k];
    exact = x.rows() == y.rows() && x.cols() == y.cols() &&
            std::memcmp(x.data(), y.data(), sizeof(float) * x.size()) == 0;
  }
  if (!exact) problems.push_back("trace round trip not bit exact");
  const auto bytes = read_file(tmp / "trace.tfmt");
  std::vector<std::size_t> header;
  for (std::size_t i = 0; i < 12; ++i) header.push_back(i);
  ByteReader r(bytes);
  r.bytes(8, "head");
  std::size_t pos = 12 + r.u32("len");
  const std::size_t matrix = static_cast<std::size_t>(trace.trace.n_query() * trace.trace.dim()) * 4;
  for (int k = 0; k < trace.trace.slots(); ++k, pos += 8 + matrix) {
    for (std::size_t i = 0; i < 8; ++i) header.push_back(pos + i);
  }
  int accepted = 0, tried = 0;
  for (const auto at : header) {
    for (int flip = 1; flip < 256; ++flip) {
      auto bad = bytes;
      bad[at] = static_cast<char>(static_cast<unsigned char>(bad[at]) ^ flip);
      ++tried;
      try {
        io::decode_trace(bad);
        ++accepted;
      } catch (const io::TraceError&) {
      }
    }
  }
  if (accepted) problems.push_back(std::to_string(accepted) + " corrupted headers accepted");
  fs::remove_all(tmp);

  std::string detail = "checkpoint, loss and report CSVs identical; trace round trip exact; " +
                       std::to_string(tried) + " header corruptions rejected";
  if (!problems.empty()) {
    detail.clear();
    for (const auto& p : problems) detail += (detail.empty() ? "" : "; ") + p;
  }
  return {problems.empty(), detail};
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Acceptance suite"};
  std::string runs = "runs/acceptance";
  std::string configs = "configs";
  std::vector<int> only;
  app.add_option("--runs", runs, "Directory of cached training runs");
  app.add_option("--configs", configs, "Directory holding desk_<preset>.json");
  app.add_option("--only", only, "Criteria to run");
  CLI11_PARSE(app, argc, argv);

  Models ms;
  ms.runs = runs;
  for (const char* p : {"nano6l", "nano1l", "nanolooped"}) {
    ms.configs.emplace(p, run::load_run_config(fs::path(configs) / (std::string("desk_") + p + ".json")));
  }
  auto eval_prior = ms.configs.at("nano6l").prior;
  eval_prior.seed = ms.configs.at("nano6l").eval_seed();
  ms.episodes = evaluation_episodes(eval_prior, "heldout", 200);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient check", gradient_check},
      {"metric oracles", metric_oracles},
      {"CKA invariance", cka_invariance},
      {"looped vs deep", [&] { return looped_vs_deep(ms); }},
      {"lens shape", [&] { return lens_shape(ms); }},
      {"ablation ordering", [&] { return ablation_order(ms); }},
      {"self-repair direction", [&] { return self_repair_direction(ms); }},
      {"probe asymmetry", [&] { return probe_asymmetry(ms); }},
      {"separation gap trend", [&] { return gap_trend(ms); }},
      {"determinism and format", [&] { return determinism_and_format(ms); }},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS " : "FAIL ") << id << " " << criteria[i].first << ": " << o.detail
              << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
