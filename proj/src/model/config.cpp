#include "tabscope/model/config.hpp"

#include <algorithm>
#include <regex>

namespace tabscope::model {

using nlohmann::json;

void ModelConfig::validate() const {
  const auto fail = [](const std::string& what) { throw ModelConfigError("model config: " + what); };
  if (embed_dim < 1) fail("embed_dim must be >= 1");
  if (n_heads < 1 || embed_dim % n_heads != 0) fail("embed_dim must be divisible by n_heads");
  if (ff_dim < 1) fail("ff_dim must be >= 1");
  if (n_blocks < 1) fail("n_blocks must be >= 1");
  if (n_loops < 1) fail("n_loops must be >= 1");
  if (max_classes < 2) fail("max_classes must be >= 2");
  if (!(ln_eps > 0.0)) fail("ln_eps must be positive");
  if (max_features < 1) fail("max_features must be >= 1");
}

json ModelConfig::to_json() const {
  return json{{"embed_dim", embed_dim}, {"n_heads", n_heads},         {"ff_dim", ff_dim},
              {"n_blocks", n_blocks},   {"looped", looped},           {"n_loops", n_loops},
              {"max_classes", max_classes}, {"ln_eps", ln_eps},       {"max_features", max_features}};
}

ModelConfig ModelConfig::from_json(const json& j) {
  if (!j.is_object()) throw ModelConfigError("model config: expected a JSON object");
  static const std::vector<std::string> kKeys = {"embed_dim", "n_heads",     "ff_dim",
                                                 "n_blocks",  "looped",      "n_loops",
                                                 "max_classes", "ln_eps",    "max_features"};
  for (const auto& [key, _] : j.items()) {
    if (std::find(kKeys.begin(), kKeys.end(), key) == kKeys.end()) {
      throw ModelConfigError("model config: unknown key '" + key + "'");
    }
  }
  ModelConfig cfg;
  const auto read = [&](const char* key, auto& field) {
    if (!j.contains(key)) return;
    try {
      j.at(key).get_to(field);
    } catch (const json::exception&) {
      throw ModelConfigError(std::string("model config: field '") + key + "' has the wrong type");
    }
  };
  read("embed_dim", cfg.embed_dim);
  read("n_heads", cfg.n_heads);
  read("ff_dim", cfg.ff_dim);
  read("n_blocks", cfg.n_blocks);
  read("looped", cfg.looped);
  read("n_loops", cfg.n_loops);
  read("max_classes", cfg.max_classes);
  read("ln_eps", cfg.ln_eps);
  read("max_features", cfg.max_features);
  cfg.validate();
  return cfg;
}

ModelConfig ModelConfig::nano6l() { return ModelConfig{}; }

ModelConfig ModelConfig::nano1l() {
  ModelConfig cfg;
  cfg.n_blocks = 1;
  return cfg;
}

ModelConfig ModelConfig::nanolooped() {
  ModelConfig cfg;
  cfg.looped = true;
  cfg.n_blocks = 1;
  cfg.n_loops = 6;
  return cfg;
}

ModelConfig ModelConfig::paperdims() {
  ModelConfig cfg;
  cfg.embed_dim = 192;
  cfg.ff_dim = 768;
  cfg.max_classes = 10;
  cfg.max_features = 100;
  return cfg;
}

ModelConfig ModelConfig::preset(const std::string& name) {
  if (name == "nano6l") return nano6l();
  if (name == "nano1l") return nano1l();
  if (name == "nanolooped") return nanolooped();
  if (name == "paperdims") return paperdims();
  throw ModelConfigError("unknown preset '" + name +
                         "' (expected nano6l, nano1l, nanolooped or paperdims)");
}

std::int64_t param_count(const ModelConfig& cfg) {
  const std::int64_t d = cfg.embed_dim, ff = cfg.ff_dim, c = cfg.max_classes;
  const std::int64_t encoder = 2 * (d + d) + d;  // feature and label linears, unknown-label vector
  const std::int64_t attention = 3 * d * d + 3 * d + d * d + d;
  const std::int64_t norm = 2 * d;
  const std::int64_t mlp = d * ff + ff + ff * d + d;
  const std::int64_t block = 2 * attention + 3 * norm + mlp;
  const std::int64_t decoder = d * ff + ff + ff * c + c;
  return encoder + cfg.stored_blocks() * block + decoder;
}

std::vector<int> InterventionPlan::schedule(int slots) const {
  std::vector<int> order(slots);
  for (int s = 0; s < slots; ++s) order[s] = s;
  const auto check = [&](int idx) {
    if (idx < 0 || idx >= slots) {
      throw PlanError("plan " + label() + ": slot " + std::to_string(idx) + " outside [0, " +
                      std::to_string(slots) + ")");
    }
  };
  switch (kind) {
    case PlanKind::kNone:
      break;
    case PlanKind::kSkip:
      check(i);
      order.erase(order.begin() + i);
      break;
    case PlanKind::kRepeat:
      check(i);
      order.insert(order.begin() + i, i);
      break;
    case PlanKind::kSwap:
      check(i);
      check(j);
      std::swap(order[i], order[j]);
      break;
  }
  return order;
}

std::string InterventionPlan::kind_name() const {
  switch (kind) {
    case PlanKind::kNone:
      return "none";
    case PlanKind::kSkip:
      return "skip";
    case PlanKind::kRepeat:
      return "repeat";
    case PlanKind::kSwap:
      return "swap";
  }
  return "none";
}

std::string InterventionPlan::label() const {
  switch (kind) {
    case PlanKind::kNone:
      return "none";
    case PlanKind::kSwap:
      return "swap(" + std::to_string(i) + "," + std::to_string(j) + ")";
    default:
      return kind_name() + "(" + std::to_string(i) + ")";
  }
}

json InterventionPlan::to_json() const { return json{{"kind", kind_name()}, {"i", i}, {"j", j}}; }

InterventionPlan InterventionPlan::from_json(const json& j) {
  InterventionPlan plan;
  const std::string kind = j.at("kind").get<std::string>();
  plan.i = j.value("i", 0);
  plan.j = j.value("j", 0);
  if (kind == "none") {
    plan.kind = PlanKind::kNone;
  } else if (kind == "skip") {
    plan.kind = PlanKind::kSkip;
  } else if (kind == "repeat") {
    plan.kind = PlanKind::kRepeat;
  } else if (kind == "swap") {
    plan.kind = PlanKind::kSwap;
  } else {
    throw PlanError("unknown plan kind '" + kind + "'");
  }
  return plan;
}

InterventionPlan InterventionPlan::parse(const std::string& text) {
  static const std::regex kPattern(R"(\s*(none|skip|repeat|swap)\s*(?:\(\s*(\d+)\s*(?:,\s*(\d+)\s*)?\))?\s*)");
  std::smatch m;
  if (!std::regex_match(text, m, kPattern)) throw PlanError("cannot parse plan '" + text + "'");
  InterventionPlan plan = from_json(json{{"kind", m[1].str()}});
  const bool has_i = m[2].matched, has_j = m[3].matched;
  if (plan.kind == PlanKind::kNone) {
    if (has_i) throw PlanError("plan 'none' takes no slots");
    return plan;
  }
  if (!has_i) throw PlanError("plan '" + text + "' needs a slot index");
  plan.i = std::stoi(m[2].str());
  if (plan.kind == PlanKind::kSwap) {
    if (!has_j) throw PlanError("swap needs two slots");
    plan.j = std::stoi(m[3].str());
  } else if (has_j) {
    throw PlanError("plan '" + text + "' takes one slot");
  }
  return plan;
}

void ActivationTrace::validate() const {
  if (layer_states.empty()) throw std::invalid_argument("trace: no layer states");
  const auto rows = layer_states[0].rows(), cols = layer_states[0].cols();
  for (std::size_t k = 0; k < layer_states.size(); ++k) {
    const auto& s = layer_states[k];
    if (s.rows() != rows || s.cols() != cols) {
      throw std::invalid_argument("trace: slot " + std::to_string(k) + " has shape " +
                                  std::to_string(s.rows()) + "x" + std::to_string(s.cols()));
    }
    if (!s.allFinite()) throw std::invalid_argument("trace: slot " + std::to_string(k) + " not finite");
  }
}

}  // namespace tabscope::model
