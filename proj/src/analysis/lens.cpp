#include "tabscope/analysis/lens.hpp"

#include <algorithm>
#include <set>

#include "tabscope/analysis/metrics.hpp"
#include "tabscope/nd/ops.hpp"

namespace tabscope::analysis {

std::vector<prior::Episode> evaluation_episodes(const prior::PriorConfig& prior,
                                                const std::string& label, int count) {
  const prior::EpisodeStream stream(prior, label);
  std::vector<prior::Episode> out;
  for (std::uint64_t pos = 0; static_cast<int>(out.size()) < count; ++pos) {
    auto ep = stream.episode(pos);
    const std::set<int> present(ep.y_query.begin(), ep.y_query.end());
    if (present.size() >= 2) out.push_back(std::move(ep));
  }
  return out;
}

Eigen::MatrixXd readout_probabilities(const model::DecoderParams<float>& decoder,
                                      const Eigen::MatrixXf& states, int n_classes) {
  const auto flat = model::decode_probabilities(decoder, states, n_classes);
  Eigen::MatrixXd probs(states.rows(), n_classes);
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    for (int c = 0; c < n_classes; ++c) probs(i, c) = flat[i * n_classes + c];
  }
  // float softmax rows sum to 1 only to float precision
  for (Eigen::Index i = 0; i < probs.rows(); ++i) probs.row(i) /= probs.row(i).sum();
  return probs;
}

ReadoutScores score_readout(const Eigen::MatrixXd& probs, const std::vector<int>& labels) {
  return {roc_auc_ovr(probs, labels), balanced_accuracy(argmax_rows(probs), labels),
          prediction_entropy(probs)};
}

std::string family_name(DecoderFamily family) {
  return family == DecoderFamily::kOriginal ? "original" : "individual";
}

std::vector<double> LensReport::auc(DecoderFamily family) const {
  std::vector<double> out;
  for (const auto& r : rows) {
    if (r.family == family) out.push_back(r.auc);
  }
  return out;
}

std::vector<double> LensReport::entropy(DecoderFamily family) const {
  std::vector<double> out;
  for (const auto& r : rows) {
    if (r.family == family) out.push_back(r.entropy);
  }
  return out;
}

LensReport lens_curve(const model::TfmModel<float>& m,
                      const std::vector<model::DecoderParams<float>>* decoders,
                      const std::vector<prior::Episode>& episodes) {
  const int slots = m.slot_count() + 1;
  if (decoders && static_cast<int>(decoders->size()) != slots) {
    throw nd::ContractError("lens_curve: " + std::to_string(decoders->size()) +
                            " decoders for " + std::to_string(slots) + " slots");
  }
  if (episodes.empty()) throw nd::ContractError("lens_curve: no episodes");
  const int families = decoders ? 2 : 1;
  std::vector<ReadoutScores> sums(static_cast<std::size_t>(slots * families));
  for (const auto& ep : episodes) {
    const auto trace = m.forward(ep).trace;
    for (int k = 0; k < slots; ++k) {
      for (int f = 0; f < families; ++f) {
        const auto& dec = f == 0 ? m.decoder : (*decoders)[k];
        const auto s = score_readout(readout_probabilities(dec, trace.layer_states[k], ep.n_classes),
                                     ep.y_query);
        auto& acc = sums[f * slots + k];
        acc.auc += s.auc;
        acc.balanced_acc += s.balanced_acc;
        acc.entropy += s.entropy;
      }
    }
  }
  LensReport report;
  report.episodes = static_cast<int>(episodes.size());
  const double n = static_cast<double>(episodes.size());
  for (int f = 0; f < families; ++f) {
    for (int k = 0; k < slots; ++k) {
      const auto& acc = sums[f * slots + k];
      report.rows.push_back({k, f == 0 ? DecoderFamily::kOriginal : DecoderFamily::kIndividual,
                             acc.auc / n, acc.balanced_acc / n, acc.entropy / n});
    }
  }
  return report;
}

int saturation_slot(const std::vector<double>& curve, double fraction) {
  if (curve.empty()) return -1;
  const double target = fraction * curve.back();
  for (std::size_t k = 0; k < curve.size(); ++k) {
    if (curve[k] >= target) return static_cast<int>(k);
  }
  return static_cast<int>(curve.size()) - 1;
}

double slope(const std::vector<double>& values) {
  const auto n = static_cast<double>(values.size());
  if (values.size() < 2) return 0.0;
  double mx = (n - 1) / 2.0, my = 0.0;
  for (const double v : values) my += v / n;
  double num = 0.0, den = 0.0;
  for (std::size_t k = 0; k < values.size(); ++k) {
    num += (k - mx) * (values[k] - my);
    den += (k - mx) * (k - mx);
  }
  return num / den;
}

LensSummary lens_compare(const LensReport& report) {
  LensSummary s;
  const auto orig = report.auc(DecoderFamily::kOriginal);
  const auto indiv = report.auc(DecoderFamily::kIndividual);
  s.saturation_original = saturation_slot(orig);
  s.entropy_slope_original = slope(report.entropy(DecoderFamily::kOriginal));
  if (!indiv.empty()) {
    for (std::size_t k = 0; k < std::min(orig.size(), indiv.size()); ++k) {
      s.delta.push_back(indiv[k] - orig[k]);
    }
    s.saturation_individual = saturation_slot(indiv);
    s.entropy_slope_individual = slope(report.entropy(DecoderFamily::kIndividual));
  }
  return s;
}

}  // namespace tabscope::analysis
