#include "tabscope/analysis/experiments.hpp"

#include <algorithm>

namespace tabscope::analysis {

std::vector<std::optional<GapResult>> gap_curve(const model::ActivationTrace& trace,
                                                const std::vector<int>& labels,
                                                const GapOptions& options, RandomStream& rng) {
  trace.validate();
  const int slots = trace.slots();
  const auto n = static_cast<Eigen::Index>(trace.n_query());
  std::vector<std::optional<GapResult>> out(static_cast<std::size_t>(slots));
  GapPairs pairs;
  try {
    pairs = sample_gap_pairs(labels, options.n_pairs, rng);
  } catch (const DegenerateMetric&) {
    return out;
  }
  std::vector<Eigen::MatrixXd> states;
  for (const auto& s : trace.layer_states) states.push_back(s.cast<double>());
  if (options.use_pca) {
    Eigen::MatrixXd pooled(n * slots, trace.dim());
    for (int k = 0; k < slots; ++k) pooled.middleRows(k * n, n) = states[k];
    try {
      const auto pca = fit_pca(pooled, kPcaRetained, kPcaSampleCap, rng);
      for (auto& s : states) s = pca.project(s);
    } catch (const DegenerateMetric&) {
      return out;
    }
  }
  for (int k = 0; k < slots; ++k) out[k] = separation_gap(states[k], pairs, options.metric);
  return out;
}

MeanGapCurve mean_gap_curve(const model::TfmModel<float>& m,
                            const std::vector<prior::Episode>& episodes, const GapOptions& options,
                            std::uint64_t seed) {
  const int slots = m.slot_count() + 1;
  MeanGapCurve mean;
  std::vector<GapResult> sums(static_cast<std::size_t>(slots));
  mean.episodes_used.assign(static_cast<std::size_t>(slots), 0);
  const RandomStream root = RandomStream(seed).derive("gap");
  for (std::size_t e = 0; e < episodes.size(); ++e) {
    RandomStream rng = root.at(e);
    const auto curve = gap_curve(m.forward(episodes[e]).trace, episodes[e].y_query, options, rng);
    for (int k = 0; k < slots; ++k) {
      if (!curve[k]) continue;
      sums[k].delta += curve[k]->delta;
      sums[k].d_within += curve[k]->d_within;
      sums[k].d_between += curve[k]->d_between;
      sums[k].n_within += curve[k]->n_within;
      sums[k].n_between += curve[k]->n_between;
      ++mean.episodes_used[k];
    }
  }
  for (int k = 0; k < slots; ++k) {
    const int used = mean.episodes_used[k];
    if (used == 0) {
      mean.slots.emplace_back();
      continue;
    }
    GapResult r = sums[k];
    r.delta /= used;
    r.d_within /= used;
    r.d_between /= used;
    r.n_within /= used;
    r.n_between /= used;
    mean.slots.emplace_back(r);
  }
  return mean;
}

MeanSimilarity mean_similarity(const model::TfmModel<float>& m,
                               const std::vector<prior::Episode>& episodes) {
  MeanSimilarity out;
  for (const auto& ep : episodes) {
    if (ep.n_query() < 2) continue;
    const auto grid = similarity_grid(m.forward(ep).trace);
    if (out.episodes == 0) {
      out.grid = grid;
    } else {
      out.grid.cka += grid.cka;
      out.grid.cosine += grid.cosine;
      for (std::size_t k = 0; k < grid.degenerate.size(); ++k) {
        out.grid.degenerate[k] = out.grid.degenerate[k] || grid.degenerate[k];
      }
    }
    ++out.episodes;
  }
  if (out.episodes == 0) throw DegenerateMetric("mean_similarity: no episode has 2 query rows");
  out.grid.cka /= out.episodes;
  out.grid.cosine /= out.episodes;
  return out;
}

MeanProbeGrid mean_probe_grid(const model::TfmModel<float>& m,
                              const std::vector<prior::Episode>& episodes, int wanted, double l2,
                              std::uint64_t seed) {
  MeanProbeGrid out;
  out.l2 = l2;
  const RandomStream root = RandomStream(seed).derive("probe");
  for (std::size_t e = 0; e < episodes.size() && out.episodes < wanted; ++e) {
    RandomStream rng = root.at(e);
    ProbeSplit split;
    try {
      split = make_probe_split(m, episodes[e], rng);
    } catch (const ProbeSplitError&) {
      ++out.skipped;
      continue;
    }
    const auto grid = probe_grid(split, l2);
    if (out.episodes == 0) {
      out.auc_raw = grid.auc_raw;
      out.auc_normalized = grid.auc_normalized;
    } else {
      out.auc_raw += grid.auc_raw;
      out.auc_normalized += grid.auc_normalized;
    }
    out.unconverged += grid.unconverged;
    out.n_train += grid.n_train;
    out.n_eval += grid.n_eval;
    ++out.episodes;
  }
  if (out.episodes == 0) throw ProbeSplitError("mean_probe_grid: no episode admits a probe split");
  out.auc_raw /= out.episodes;
  out.auc_normalized /= out.episodes;
  out.n_train /= out.episodes;
  out.n_eval /= out.episodes;
  return out;
}

ProbeSplit trace_probe_split(const model::ActivationTrace& trace, const std::vector<int>& labels,
                             RandomStream& rng) {
  trace.validate();
  if (static_cast<int>(labels.size()) != trace.n_query()) {
    throw ProbeSplitError("trace probe split: label count differs from n_q");
  }
  const int classes = labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end()) + 1;
  std::vector<std::vector<int>> by_class(static_cast<std::size_t>(classes));
  for (int i = 0; i < static_cast<int>(labels.size()); ++i) by_class[labels[i]].push_back(i);
  std::vector<int> train_rows, eval_rows;
  for (auto& rows : by_class) {
    if (rows.empty()) continue;
    if (rows.size() < 2) throw ProbeSplitError("trace probe split: a class has fewer than 2 rows");
    rng.shuffle(rows);
    const auto half = rows.size() / 2;
    train_rows.insert(train_rows.end(), rows.begin(), rows.begin() + half);
    eval_rows.insert(eval_rows.end(), rows.begin() + half, rows.end());
  }
  std::sort(train_rows.begin(), train_rows.end());
  std::sort(eval_rows.begin(), eval_rows.end());
  ProbeSplit split;
  split.n_classes = classes;
  split.diverted = train_rows;
  for (const int r : train_rows) split.y_train.push_back(labels[r]);
  for (const int r : eval_rows) split.y_eval.push_back(labels[r]);
  for (const auto& s : trace.layer_states) {
    const Eigen::MatrixXd states = s.cast<double>();
    Eigen::MatrixXd tr(static_cast<Eigen::Index>(train_rows.size()), states.cols());
    Eigen::MatrixXd ev(static_cast<Eigen::Index>(eval_rows.size()), states.cols());
    for (std::size_t i = 0; i < train_rows.size(); ++i) tr.row(i) = states.row(train_rows[i]);
    for (std::size_t i = 0; i < eval_rows.size(); ++i) ev.row(i) = states.row(eval_rows[i]);
    split.train.push_back(std::move(tr));
    split.eval.push_back(std::move(ev));
  }
  return split;
}

}  // namespace tabscope::analysis
