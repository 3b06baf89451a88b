#include <doctest.h>

#include <cmath>
#include <set>

#include "support.hpp"
#include "tabscope/analysis/experiments.hpp"
#include "tabscope/analysis/interventions.hpp"
#include "tabscope/analysis/lens.hpp"

using namespace tabscope;
using namespace tabscope::analysis;
using model::InterventionPlan;

namespace {

using Model = model::TfmModel<float>;

std::vector<prior::Episode> toy_episodes(int count, int classes = 3) {
  std::vector<prior::Episode> out;
  for (int e = 0; e < count; ++e) out.push_back(testing::toy_episode(12, 9, 3, classes, 40 + e));
  return out;
}

// Decoders from independently initialized models, so every slot reads differently.
std::vector<model::DecoderParams<float>> distinct_decoders(int count) {
  std::vector<model::DecoderParams<float>> out;
  for (int k = 0; k < count; ++k) {
    out.push_back(Model::initialize(testing::tiny_config(2), 100 + k).decoder.clone());
  }
  return out;
}

double auc_of(const model::DecoderParams<float>& dec, const Eigen::MatrixXf& states,
              const prior::Episode& ep) {
  return roc_auc_ovr(readout_probabilities(dec, states, ep.n_classes), ep.y_query);
}

}  // namespace

TEST_CASE("evaluation episodes skip single-class query sets") {
  const auto prior = testing::small_prior(5);
  const auto eps = evaluation_episodes(prior, "heldout", 30);
  REQUIRE(eps.size() == 30);
  const prior::EpisodeStream stream(prior, "heldout");
  std::size_t next = 0;
  for (std::uint64_t pos = 0; next < eps.size(); ++pos) {
    const auto ep = stream.episode(pos);
    if (std::set<int>(ep.y_query.begin(), ep.y_query.end()).size() < 2) continue;
    CHECK(ep.x_query == eps[next].x_query);
    CHECK(ep.y_query == eps[next].y_query);
    ++next;
  }
}

TEST_CASE("readout probabilities are normalized rows") {
  const auto m = Model::initialize(testing::tiny_config(2), 1);
  const auto ep = testing::toy_episode(10, 6, 2, 3, 2);
  const auto trace = m.forward(ep).trace;
  const auto p = readout_probabilities(m.decoder, trace.layer_states.back(), 3);
  CHECK(p.rows() == 6);
  CHECK(p.cols() == 3);
  for (Eigen::Index i = 0; i < p.rows(); ++i) CHECK(p.row(i).sum() == doctest::Approx(1.0).epsilon(1e-12));
  // the final slot read with the model's decoder is the model's own prediction
  const auto logits = model::to_matrix(m.forward(ep).logits).cast<double>();
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    Eigen::VectorXd e = (logits.row(i).array() - logits.row(i).maxCoeff()).exp();
    e /= e.sum();
    for (int c = 0; c < 3; ++c) CHECK(p(i, c) == doctest::Approx(e(c)).epsilon(1e-5));
  }
}

TEST_CASE("lens curve averages per-episode scores") {
  const auto m = Model::initialize(testing::tiny_config(3), 2);
  const auto eps = toy_episodes(4);
  const auto decs = distinct_decoders(4);
  const auto report = lens_curve(m, &decs, eps);
  REQUIRE(report.rows.size() == 8);
  CHECK(report.episodes == 4);
  for (int k = 0; k < 4; ++k) {
    double orig = 0.0, indiv = 0.0;
    for (const auto& ep : eps) {
      const auto trace = m.forward(ep).trace;
      orig += auc_of(m.decoder, trace.layer_states[k], ep) / 4.0;
      indiv += auc_of(decs[k], trace.layer_states[k], ep) / 4.0;
    }
    CHECK(report.auc(DecoderFamily::kOriginal)[k] == doctest::Approx(orig).epsilon(1e-12));
    CHECK(report.auc(DecoderFamily::kIndividual)[k] == doctest::Approx(indiv).epsilon(1e-12));
  }
  CHECK(lens_curve(m, nullptr, eps).rows.size() == 4);
  const std::vector<model::DecoderParams<float>> short_list(decs.begin(), decs.begin() + 2);
  CHECK_THROWS_AS(lens_curve(m, &short_list, eps), nd::ContractError);
}

TEST_CASE("saturation and slope") {
  CHECK(saturation_slot({0.5, 0.7, 0.96, 1.0}) == 2);
  CHECK(saturation_slot({0.5, 0.95, 0.9, 1.0}) == 1);
  CHECK(saturation_slot({0.2}) == 0);
  CHECK(saturation_slot({}) == -1);
  CHECK(slope({1.0, 3.0, 5.0, 7.0}) == doctest::Approx(2.0));
  CHECK(slope({4.0}) == 0.0);
  // least squares through (0,0) (1,2) (2,1): slope 0.5
  CHECK(slope({0.0, 2.0, 1.0}) == doctest::Approx(0.5));

  LensReport r;
  for (int k = 0; k < 3; ++k) r.rows.push_back({k, DecoderFamily::kOriginal, 0.5 + 0.2 * k, 0, 1.0 - 0.1 * k});
  for (int k = 0; k < 3; ++k) r.rows.push_back({k, DecoderFamily::kIndividual, 0.85 + 0.02 * k, 0, 0.5});
  const auto s = lens_compare(r);
  CHECK(s.delta.size() == 3);
  CHECK(s.delta[0] == doctest::Approx(0.35));
  CHECK(s.saturation_original == 2);
  CHECK(s.saturation_individual == 0);
  CHECK(s.entropy_slope_original == doctest::Approx(-0.1));
  CHECK(s.entropy_slope_individual == doctest::Approx(0.0));
}

TEST_CASE("ablation sweep starts from the unmodified baseline") {
  const auto m = Model::initialize(testing::tiny_config(3), 3);
  const auto eps = toy_episodes(3);
  const auto plans = default_plans(m.slot_count());
  CHECK(plans.size() == 3 + 3 + 2);
  CHECK(swap_matrix_plans(4).size() == 6);

  std::vector<InterventionPlan> asked{InterventionPlan::none(), InterventionPlan::skip(1),
                                      InterventionPlan::swap(0, 2)};
  const auto rows = ablation_sweep(m, eps, asked);
  REQUIRE(rows.size() == 3);
  CHECK(rows[0].plan == InterventionPlan::none());
  CHECK(rows[0].delta_vs_baseline == 0.0);
  for (const auto& row : rows) {
    double auc = 0.0;
    for (const auto& ep : eps) auc += auc_of(m.decoder, m.forward(ep, row.plan).trace.layer_states.back(), ep) / 3.0;
    CHECK(row.auc == doctest::Approx(auc).epsilon(1e-12));
    CHECK(row.delta_vs_baseline == doctest::Approx(rows[0].auc - row.auc).epsilon(1e-12));
  }
  CHECK_THROWS(ablation_sweep(m, eps, {InterventionPlan::skip(7)}));
}

TEST_CASE("self repair maps ablated states to baseline positions") {
  const auto m = Model::initialize(testing::tiny_config(4), 4);
  const int slots = m.slot_count();
  const auto eps = toy_episodes(5);
  const auto decs = distinct_decoders(slots + 1);
  for (const auto alignment : {RepairAlignment::kRemainingDepth, RepairAlignment::kAbsoluteIndex}) {
    for (int skip = 0; skip < slots; ++skip) {
      const auto r = self_repair(m, decs, eps, skip, alignment, 11);
      CHECK(r.defined == (skip + 2 <= slots));
      CHECK(r.ablated.size() == static_cast<std::size_t>(slots + 1));
      CHECK_FALSE(r.ablated[skip + 1].has_value());
      std::vector<double> base(slots + 1, 0.0), abl(slots + 1, 0.0), imm, fin;
      for (const auto& ep : eps) {
        const auto bt = m.forward(ep).trace;
        const auto at = m.forward(ep, InterventionPlan::skip(skip)).trace;
        REQUIRE(at.slots() == slots);
        std::vector<double> b(slots + 1), a(slots + 1, 0.0);
        for (int k = 0; k <= slots; ++k) b[k] = auc_of(decs[k], bt.layer_states[k], ep);
        for (int k = 0; k < slots; ++k) {
          const int pos = k <= skip ? k : k + 1;
          const int dec = alignment == RepairAlignment::kRemainingDepth ? pos : k;
          a[pos] = auc_of(decs[dec], at.layer_states[k], ep);
        }
        for (int k = 0; k <= slots; ++k) {
          base[k] += b[k] / 5.0;
          abl[k] += a[k] / 5.0;
        }
        if (skip + 2 <= slots) {
          imm.push_back(b[skip + 2] - a[skip + 2]);
          fin.push_back(b[slots] - a[slots]);
        }
      }
      for (int k = 0; k <= slots; ++k) {
        CHECK(r.baseline[k] == doctest::Approx(base[k]).epsilon(1e-12));
        if (k != skip + 1) CHECK(*r.ablated[k] == doctest::Approx(abl[k]).epsilon(1e-12));
      }
      if (!r.defined) continue;
      CHECK(r.repair_position == skip + 2);
      double mi = 0.0, mf = 0.0;
      for (std::size_t e = 0; e < imm.size(); ++e) {
        mi += imm[e] / 5.0;
        mf += fin[e] / 5.0;
      }
      CHECK(r.immediate_drop == doctest::Approx(mi).epsilon(1e-12));
      CHECK(r.final_drop == doctest::Approx(mf).epsilon(1e-12));
      CHECK(r.recovery == doctest::Approx(mi - mf).epsilon(1e-12));
      CHECK(r.recovery_ci.low <= r.recovery + 1e-12);
      CHECK(r.recovery_ci.high >= r.recovery - 1e-12);
    }
  }
  CHECK_THROWS_AS(self_repair(m, distinct_decoders(2), eps, 0), nd::ContractError);
}

TEST_CASE("bootstrap interval") {
  CHECK(bootstrap_mean_ci({}, 100, 0.95, 0).low == 0.0);
  const auto flat = bootstrap_mean_ci({0.3, 0.3, 0.3}, 500, 0.95, 1);
  CHECK(flat.low == 0.3);
  CHECK(flat.high == 0.3);

  RandomStream rng(7);
  std::vector<double> v;
  for (int i = 0; i < 400; ++i) v.push_back(2.0 + rng.normal());
  double mean = 0.0, var = 0.0;
  for (const double x : v) mean += x / 400.0;
  for (const double x : v) var += (x - mean) * (x - mean) / 399.0;
  const double half = 1.959964 * std::sqrt(var / 400.0);
  const auto ci = bootstrap_mean_ci(v, 4000, 0.95, 3);
  CHECK(ci.low == doctest::Approx(mean - half).epsilon(0.01));
  CHECK(ci.high == doctest::Approx(mean + half).epsilon(0.01));
  const auto again = bootstrap_mean_ci(v, 4000, 0.95, 3);
  CHECK(again.low == ci.low);
  CHECK(again.high == ci.high);
}

TEST_CASE("gap curve uses one pair set for every slot") {
  const auto m = Model::initialize(testing::tiny_config(3), 6);
  const auto ep = testing::toy_episode(12, 20, 3, 3, 9);
  const auto trace = m.forward(ep).trace;
  for (const auto metric : {GapMetric::kCosine, GapMetric::kEuclidean}) {
    GapOptions opt{metric, 15, false};
    RandomStream a(21), b(21);
    const auto curve = gap_curve(trace, ep.y_query, opt, a);
    const auto pairs = sample_gap_pairs(ep.y_query, 15, b);
    REQUIRE(curve.size() == 4);
    for (int k = 0; k < 4; ++k) {
      const auto want = separation_gap(trace.layer_states[k].cast<double>(), pairs, metric);
      REQUIRE(curve[k].has_value());
      CHECK(curve[k]->delta == doctest::Approx(want.delta).epsilon(1e-12));
      CHECK(curve[k]->n_within == 15);
    }
  }
  // a single class has no between pairs
  RandomStream rng(1);
  const std::vector<int> one(20, 0);
  const auto none = gap_curve(trace, one, GapOptions{}, rng);
  for (const auto& g : none) CHECK_FALSE(g.has_value());
}

TEST_CASE("mean gap and similarity over episodes") {
  const auto m = Model::initialize(testing::tiny_config(2), 8);
  const auto eps = toy_episodes(3);
  const GapOptions opt{GapMetric::kEuclidean, 0, true};
  const auto g = mean_gap_curve(m, eps, opt, 4);
  REQUIRE(g.slots.size() == 3);
  const RandomStream root = RandomStream(4).derive("gap");
  for (int k = 0; k < 3; ++k) {
    double delta = 0.0;
    for (std::size_t e = 0; e < eps.size(); ++e) {
      RandomStream rng = root.at(e);
      delta += gap_curve(m.forward(eps[e]).trace, eps[e].y_query, opt, rng)[k]->delta / 3.0;
    }
    CHECK(g.episodes_used[k] == 3);
    CHECK(g.slots[k]->delta == doctest::Approx(delta).epsilon(1e-12));
  }

  const auto s = mean_similarity(m, eps);
  CHECK(s.episodes == 3);
  Eigen::MatrixXd cka = Eigen::MatrixXd::Zero(3, 3);
  for (const auto& ep : eps) cka += similarity_grid(m.forward(ep).trace).cka / 3.0;
  CHECK((s.grid.cka - cka).cwiseAbs().maxCoeff() < 1e-12);
  for (int k = 0; k < 3; ++k) CHECK(s.grid.cka(k, k) == doctest::Approx(1.0));
}
