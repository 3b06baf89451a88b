#include <doctest.h>

#include <numeric>

#include "support.hpp"
#include "tabscope/nd/grad_check.hpp"
#include "tabscope/nd/ops.hpp"

using namespace tabscope;
using model::InterventionPlan;
using model::ModelConfig;
using model::TfmModel;

namespace {

std::int64_t counted(const TfmModel<float>& m) {
  std::int64_t n = 0;
  for (const auto& p : m.parameters()) n += static_cast<std::int64_t>(p.size());
  return n;
}

Eigen::MatrixXf logits(const TfmModel<float>& m, const prior::Episode& ep,
                       const InterventionPlan& plan = InterventionPlan::none()) {
  return model::to_matrix(m.forward(ep, plan).logits);
}

}  // namespace

TEST_CASE("parameter counts at full dimensions") {
  const auto deep = ModelConfig::paperdims();
  auto looped = deep;
  looped.looped = true;
  looped.n_blocks = 1;
  // Reference totals omit the learned unknown-label vector (d entries).
  CHECK(model::param_count(deep) == 3717514 + 192);
  CHECK(model::param_count(looped) == 750154 + 192);
  const double ratio = static_cast<double>(model::param_count(looped)) / model::param_count(deep);
  CHECK(ratio == doctest::Approx(750154.0 / 3717514.0).epsilon(1e-3));
  for (const auto* name : {"nano6l", "nano1l", "nanolooped"}) {
    const auto cfg = ModelConfig::preset(name);
    CHECK(counted(TfmModel<float>::initialize(cfg, 1)) == model::param_count(cfg));
  }
  CHECK(model::param_count(ModelConfig::nanolooped()) == model::param_count(ModelConfig::nano1l()));
  CHECK(static_cast<double>(model::param_count(ModelConfig::nanolooped())) /
            model::param_count(ModelConfig::nano6l()) < 0.35);
}

TEST_CASE("empty body leaves encoder and decoder") {
  const auto cfg = ModelConfig::nano6l();
  auto body = cfg;
  body.n_blocks = 2;
  const auto per_block = (model::param_count(cfg) - model::param_count(body)) / 4;
  const std::int64_t d = cfg.embed_dim, ff = cfg.ff_dim, c = cfg.max_classes;
  CHECK(model::param_count(body) - 2 * per_block == 5 * d + d * ff + ff + ff * c + c);
}

TEST_CASE("config validation") {
  auto cfg = ModelConfig::nano6l();
  cfg.n_heads = 3;
  CHECK_THROWS_AS(cfg.validate(), model::ModelConfigError);
  CHECK_THROWS_AS(ModelConfig::preset("huge"), model::ModelConfigError);
  CHECK_THROWS_AS(ModelConfig::from_json({{"embed_dim", 64}, {"depth", 3}}), model::ModelConfigError);
  const auto back = ModelConfig::from_json(ModelConfig::nanolooped().to_json());
  CHECK(back.to_json() == ModelConfig::nanolooped().to_json());
}

TEST_CASE("intervention schedules") {
  CHECK(InterventionPlan::none().schedule(4) == std::vector<int>{0, 1, 2, 3});
  CHECK(InterventionPlan::skip(1).schedule(4) == std::vector<int>{0, 2, 3});
  CHECK(InterventionPlan::repeat(2).schedule(4) == std::vector<int>{0, 1, 2, 2, 3});
  CHECK(InterventionPlan::swap(0, 3).schedule(4) == std::vector<int>{3, 1, 2, 0});
  CHECK_THROWS_AS(InterventionPlan::skip(4).schedule(4), model::PlanError);
  CHECK(InterventionPlan::parse("swap(1, 2)") == InterventionPlan::swap(1, 2));
  CHECK(InterventionPlan::parse("skip(0)").label() == "skip(0)");
  CHECK_THROWS_AS(InterventionPlan::parse("skip"), model::PlanError);
  CHECK_THROWS_AS(InterventionPlan::parse("swap(1)"), model::PlanError);
  CHECK_THROWS_AS(InterventionPlan::parse("drop(1)"), model::PlanError);
}

TEST_CASE("trace holds one state per executed slot plus the encoder") {
  const auto m = TfmModel<float>::initialize(testing::tiny_config(3), 2);
  const auto ep = testing::toy_episode(10, 4, 3, 3, 1);
  const auto r = m.forward(ep);
  CHECK(r.trace.slots() == 4);
  CHECK(r.trace.n_query() == 4);
  CHECK(r.trace.dim() == 8);
  CHECK(r.logits.shape() == nd::Shape{4, 3});
  // every query row enters with the same unknown-label vector
  for (int q = 1; q < 4; ++q) CHECK(r.trace.layer_states[0].row(q) == r.trace.layer_states[0].row(0));
  CHECK(m.forward(ep, InterventionPlan::skip(1)).trace.slots() == 3);
  CHECK(m.forward(ep, InterventionPlan::repeat(1)).trace.slots() == 5);
}

TEST_CASE("skip and swap execute the scheduled blocks") {
  const auto m = TfmModel<float>::initialize(testing::tiny_config(3), 3);
  const auto ep = testing::toy_episode(10, 4, 2, 2, 2);
  // skip(1) equals a model whose block list is blocks 0 and 2
  auto pruned = TfmModel<float>::initialize(testing::tiny_config(2), 3);
  pruned.encoder = m.encoder;
  pruned.blocks = {m.blocks[0], m.blocks[2]};
  pruned.decoder = m.decoder;
  CHECK(logits(m, ep, InterventionPlan::skip(1)) == logits(pruned, ep));
  auto swapped = m.clone();
  std::swap(swapped.blocks[0], swapped.blocks[2]);
  CHECK(logits(m, ep, InterventionPlan::swap(0, 2)) == logits(swapped, ep));
}

TEST_CASE("looped models share one block") {
  auto m = TfmModel<float>::initialize(testing::tiny_config(4, true), 4);
  CHECK(m.blocks.size() == 1);
  CHECK(m.slot_count() == 4);
  const auto ep = testing::toy_episode(8, 3, 2, 2, 3);
  const auto before = m.forward(ep).trace;
  m.blocks[0].mlp_out.bias.mutable_data()[0] += 0.5f;
  const auto after = m.forward(ep).trace;
  CHECK(before.layer_states[0] == after.layer_states[0]);
  for (int k = 1; k < 5; ++k) CHECK(before.layer_states[k] != after.layer_states[k]);
}

TEST_CASE("predictions are invariant to support order and feature order") {
  const auto m = TfmModel<float>::initialize(testing::tiny_config(2), 5);
  const auto ep = testing::toy_episode(12, 5, 3, 3, 4);
  const auto base = logits(m, ep);
  auto rows = ep;
  for (int r = 0; r < ep.n_support(); ++r) {
    const int src = (r * 5) % ep.n_support();
    rows.x_support.row(r) = ep.x_support.row(src);
    rows.y_support[r] = ep.y_support[src];
  }
  CHECK(logits(m, rows).isApprox(base, 1e-5f));
  auto cols = ep;
  cols.x_support = ep.x_support(Eigen::all, std::vector<int>{2, 0, 1});
  cols.x_query = ep.x_query(Eigen::all, std::vector<int>{2, 0, 1});
  CHECK(logits(m, cols).isApprox(base, 1e-5f));
}

TEST_CASE("query rows do not see each other") {
  const auto m = TfmModel<float>::initialize(testing::tiny_config(2), 6);
  const auto ep = testing::toy_episode(12, 5, 3, 3, 5);
  const auto full = logits(m, ep);
  auto single = ep;
  single.x_query = ep.x_query.row(3);
  single.y_query = {ep.y_query[3]};
  CHECK(logits(m, single).row(0).isApprox(full.row(3), 1e-5f));
}

TEST_CASE("capacity errors") {
  auto cfg = testing::tiny_config(1);
  cfg.max_classes = 2;
  const auto m = TfmModel<float>::initialize(cfg, 7);
  CHECK_THROWS_AS(m.forward(testing::toy_episode(9, 3, 2, 3, 1)), model::CapacityError);
  CHECK_THROWS_AS(m.forward(testing::toy_episode(9, 3, 9, 2, 1)), model::CapacityError);
}

TEST_CASE("double model agrees with float and passes the gradient check") {
  const auto cfg = testing::tiny_config(2);
  const auto mf = TfmModel<float>::initialize(cfg, 8);
  const auto md = mf.cast<double>();
  const auto ep = testing::toy_episode(4, 2, 1, 2, 6);
  const auto lf = logits(mf, ep);
  const Eigen::MatrixXf ld = model::to_matrix(md.forward(ep).logits);
  CHECK(ld.isApprox(lf, 1e-4f));
  const auto loss = [&] {
    return nd::cross_entropy(md.forward(ep).logits, std::span<const int>(ep.y_query));
  };
  CHECK(nd::grad_check(loss, md.parameters()) < 1e-4);
}
