#include "polarlab/optim.hpp"

#include <algorithm>
#include <numbers>

#include <json.hpp>

namespace polarlab {

std::string_view to_string(OptimizerKind kind) {
  switch (kind) {
    case OptimizerKind::AdamW: return "adamw";
    case OptimizerKind::Muon: return "muon";
    case OptimizerKind::PolarAdamW: return "polaradamw";
  }
  return "unknown";
}

OptimizerKind parse_optimizer_kind(std::string_view name) {
  std::string lower(name);
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (lower == "adamw") return OptimizerKind::AdamW;
  if (lower == "muon") return OptimizerKind::Muon;
  if (lower == "polaradamw" || lower == "polar_adamw" || lower == "polar-adamw")
    return OptimizerKind::PolarAdamW;
  throw BadFlag("unknown optimizer '" + std::string(name) + "'");
}

double lr_at(const LrSchedule& schedule, int epoch) {
  if (epoch < 0 || epoch >= schedule.total_epochs)
    throw EpochOutOfRange("lr_at: epoch " + std::to_string(epoch) + " outside [0, " +
                          std::to_string(schedule.total_epochs) + ")");
  const int warmup = std::clamp(schedule.warmup_epochs, 0, schedule.total_epochs);
  if (epoch < warmup) {
    const double frac = static_cast<double>(epoch) / warmup;
    return schedule.base_lr * (schedule.floor_factor + (1.0 - schedule.floor_factor) * frac);
  }
  const double span = schedule.total_epochs - warmup;
  const double progress = (epoch - warmup) / span;
  return schedule.base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

ParamSplit split_by_rank(const std::vector<ParamRef>& params) {
  ParamSplit split;
  for (const auto& p : params) {
    if (p.ndim == 2)
      split.matrix_group.push_back(p.id);
    else
      split.aux_group.push_back(p.id);
  }
  return split;
}

GroupOptimizer::GroupOptimizer(OptimizerConfig config, ParamSplit split)
    : config_(config), split_(std::move(split)) {
  for (const auto& id : split_.matrix_group) {
    if (!in_matrix_group_.emplace(id, true).second)
      throw SpecMismatch("parameter '" + id + "' listed twice in the split");
  }
  for (const auto& id : split_.aux_group) {
    if (!in_matrix_group_.emplace(id, false).second)
      throw SpecMismatch("parameter '" + id + "' is in both groups");
  }
}

GroupOptimizer::Rule GroupOptimizer::rule_for(const std::string& id) const {
  const auto it = in_matrix_group_.find(id);
  if (it == in_matrix_group_.end()) throw SpecMismatch("parameter '" + id + "' is not in the split");
  if (!it->second) return Rule::AdamW;
  switch (config_.kind) {
    case OptimizerKind::AdamW: return Rule::AdamW;
    case OptimizerKind::Muon: return Rule::Muon;
    case OptimizerKind::PolarAdamW: return Rule::PolarAdamW;
  }
  return Rule::AdamW;
}

void GroupOptimizer::step(const std::vector<ParamRef>& params, const std::vector<Matrix>& grads,
                          double lr_scale) {
  if (params.size() != grads.size()) throw ShapeMismatch("step: one gradient per parameter expected");
  for (std::size_t k = 0; k < params.size(); ++k) {
    const auto& p = params[k];
    Matrix& w = *p.value;
    const Matrix& g = grads[k];
    const bool matrix = in_matrix_group_.at(p.id);
    const double eta = (matrix ? config_.matrix_lr : config_.aux_lr) * lr_scale;

    switch (rule_for(p.id)) {
      case Rule::AdamW: {
        auto [it, fresh] = adamw_.try_emplace(p.id);
        if (fresh) {
          it->second = AdamWState<double>::zeros(w.rows(), w.cols());
          it->second.beta1 = config_.beta1;
          it->second.beta2 = config_.beta2;
          it->second.eps = config_.eps;
          it->second.lr = matrix ? config_.matrix_lr : config_.aux_lr;
          it->second.weight_decay = matrix ? config_.weight_decay : config_.aux_weight_decay;
        }
        adamw_step(it->second, w, g, eta);
        break;
      }
      case Rule::Muon: {
        auto [it, fresh] = muon_.try_emplace(p.id);
        if (fresh) {
          it->second = MuonState<double>::zeros(w.rows(), w.cols());
          it->second.mu = config_.muon_mu;
          it->second.lr = config_.matrix_lr;
          it->second.ns = config_.ns;
        }
        muon_matrix_step(it->second, w, g, eta);
        break;
      }
      case Rule::PolarAdamW: {
        auto [it, fresh] = polar_.try_emplace(p.id);
        if (fresh) {
          it->second = PolarAdamWState<double>::zeros(w.rows(), w.cols());
          auto& a = it->second.adamw;
          a.beta1 = config_.beta1;
          a.beta2 = config_.beta2;
          a.eps = config_.eps;
          a.lr = config_.matrix_lr;
          a.weight_decay = config_.weight_decay;
          it->second.ns = config_.ns;
        }
        polaradamw_matrix_step(it->second, w, g, eta);
        break;
      }
    }
  }
}

namespace {

nlohmann::json matrix_to_json(const Matrix& m) {
  return nlohmann::json::array_t(m.data(), m.data() + m.size());
}

Matrix matrix_from_json(const nlohmann::json& j, Eigen::Index rows, Eigen::Index cols) {
  if (static_cast<Eigen::Index>(j.size()) != rows * cols)
    throw ShapeMismatch("checkpoint buffer length does not match its shape");
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows * cols; ++i) m.data()[i] = j[static_cast<std::size_t>(i)].get<double>();
  return m;
}

nlohmann::json adam_to_json(const AdamWState<double>& s) {
  return {{"t", s.t},           {"beta1", s.beta1}, {"beta2", s.beta2},
          {"eps", s.eps},       {"lr", s.lr},       {"weight_decay", s.weight_decay},
          {"m", matrix_to_json(s.m)}, {"v", matrix_to_json(s.v)}};
}

AdamWState<double> adam_from_json(const nlohmann::json& j, Eigen::Index rows, Eigen::Index cols) {
  AdamWState<double> s;
  s.t = j.at("t").get<std::int64_t>();
  s.beta1 = j.at("beta1").get<double>();
  s.beta2 = j.at("beta2").get<double>();
  s.eps = j.at("eps").get<double>();
  s.lr = j.at("lr").get<double>();
  s.weight_decay = j.at("weight_decay").get<double>();
  s.m = matrix_from_json(j.at("m"), rows, cols);
  s.v = matrix_from_json(j.at("v"), rows, cols);
  return s;
}

nlohmann::json ns_to_json(const NsConfig& ns) {
  return {{"a", ns.coeff_a},
          {"b", ns.coeff_b},
          {"c", ns.coeff_c},
          {"iterations", ns.iterations},
          {"precision", ns.precision == Precision::Full ? "full" : "bf16"}};
}

NsConfig ns_from_json(const nlohmann::json& j) {
  NsConfig ns;
  ns.coeff_a = j.at("a").get<double>();
  ns.coeff_b = j.at("b").get<double>();
  ns.coeff_c = j.at("c").get<double>();
  ns.iterations = j.at("iterations").get<int>();
  ns.precision = j.at("precision").get<std::string>() == "full" ? Precision::Full : Precision::Bf16Emulated;
  return ns;
}

}  // namespace

std::string GroupOptimizer::checkpoint() const {
  nlohmann::json params = nlohmann::json::object();
  for (const auto& [id, s] : adamw_) {
    params[id] = {{"rule", "adamw"}, {"shape", {s.m.rows(), s.m.cols()}}, {"state", adam_to_json(s)}};
  }
  for (const auto& [id, s] : muon_) {
    params[id] = {{"rule", "muon"},
                  {"shape", {s.momentum.rows(), s.momentum.cols()}},
                  {"state",
                   {{"mu", s.mu}, {"lr", s.lr}, {"ns", ns_to_json(s.ns)}, {"momentum", matrix_to_json(s.momentum)}}}};
  }
  for (const auto& [id, s] : polar_) {
    params[id] = {{"rule", "polaradamw"},
                  {"shape", {s.adamw.m.rows(), s.adamw.m.cols()}},
                  {"state", {{"adamw", adam_to_json(s.adamw)}, {"ns", ns_to_json(s.ns)}}}};
  }
  nlohmann::json root = {{"format", "polarlab-optimizer-checkpoint/1"},
                         {"kind", std::string(to_string(config_.kind))},
                         {"params", params}};
  return root.dump();
}

void GroupOptimizer::restore(const std::string& json_text) {
  const auto root = nlohmann::json::parse(json_text);
  if (root.at("kind").get<std::string>() != to_string(config_.kind))
    throw SpecMismatch("checkpoint was written by a different optimizer kind");
  adamw_.clear();
  muon_.clear();
  polar_.clear();
  for (const auto& [id, entry] : root.at("params").items()) {
    const auto rows = entry.at("shape")[0].get<Eigen::Index>();
    const auto cols = entry.at("shape")[1].get<Eigen::Index>();
    const auto rule = entry.at("rule").get<std::string>();
    const auto& st = entry.at("state");
    if (rule == "adamw") {
      adamw_[id] = adam_from_json(st, rows, cols);
    } else if (rule == "muon") {
      MuonState<double> s;
      s.mu = st.at("mu").get<double>();
      s.lr = st.at("lr").get<double>();
      s.ns = ns_from_json(st.at("ns"));
      s.momentum = matrix_from_json(st.at("momentum"), rows, cols);
      muon_[id] = std::move(s);
    } else if (rule == "polaradamw") {
      polar_[id] = {adam_from_json(st.at("adamw"), rows, cols), ns_from_json(st.at("ns"))};
    } else {
      throw SpecMismatch("checkpoint has unknown rule '" + rule + "'");
    }
  }
}

}  // namespace polarlab
