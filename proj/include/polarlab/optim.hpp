#ifndef POLARLAB_OPTIM_HPP
#define POLARLAB_OPTIM_HPP

// AdamW, Muon and PolarAdamW matrix steps with decoupled weight decay,
// the matrix/auxiliary parameter split and the warmup + cosine schedule.

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "polarlab/matcore.hpp"
#include "polarlab/polar.hpp"

namespace polarlab {

enum class OptimizerKind { AdamW, Muon, PolarAdamW };

std::string_view to_string(OptimizerKind kind);
OptimizerKind parse_optimizer_kind(std::string_view name);

/// Whether a step moved the weights along a direction. A zero direction
/// leaves only the decoupled decay (if any) in effect.
enum class StepStatus { Applied, ZeroDirection };

template <typename Scalar>
struct AdamWState {
  DenseMatrix<Scalar> m;
  DenseMatrix<Scalar> v;
  std::int64_t t = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double lr = 1e-3;
  double weight_decay = 0.0;

  static AdamWState zeros(Eigen::Index rows, Eigen::Index cols) {
    AdamWState s;
    s.m = DenseMatrix<Scalar>::Zero(rows, cols);
    s.v = DenseMatrix<Scalar>::Zero(rows, cols);
    return s;
  }
};

template <typename Scalar>
struct MuonState {
  DenseMatrix<Scalar> momentum;
  double mu = 0.95;
  double lr = 0.02;
  NsConfig ns{};

  static MuonState zeros(Eigen::Index rows, Eigen::Index cols) {
    MuonState s;
    s.momentum = DenseMatrix<Scalar>::Zero(rows, cols);
    return s;
  }
};

template <typename Scalar>
struct PolarAdamWState {
  AdamWState<Scalar> adamw;
  NsConfig ns{};

  static PolarAdamWState zeros(Eigen::Index rows, Eigen::Index cols) {
    return {AdamWState<Scalar>::zeros(rows, cols), NsConfig{}};
  }
};

namespace detail {

template <typename Scalar>
void check_same_shape(const DenseMatrix<Scalar>& a, const DenseMatrix<Scalar>& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeMismatch(what);
}

// Moment update and the bias-corrected direction m_hat / (sqrt(v_hat) + eps).
template <typename Scalar>
DenseMatrix<Scalar> adam_direction(AdamWState<Scalar>& st, const DenseMatrix<Scalar>& g) {
  const auto b1 = static_cast<Scalar>(st.beta1);
  const auto b2 = static_cast<Scalar>(st.beta2);
  st.t += 1;
  st.m = b1 * st.m + (Scalar(1) - b1) * g;
  st.v = b2 * st.v + (Scalar(1) - b2) * g.cwiseProduct(g);
  const auto bc1 = static_cast<Scalar>(1.0 - std::pow(st.beta1, static_cast<double>(st.t)));
  const auto bc2 = static_cast<Scalar>(1.0 - std::pow(st.beta2, static_cast<double>(st.t)));
  const auto eps = static_cast<Scalar>(st.eps);
  return ((st.m.array() / bc1) / ((st.v.array() / bc2).sqrt() + eps)).matrix();
}

}  // namespace detail

/// Elementwise AdamW: w <- (1 - eta*lambda) w - eta * m_hat / (sqrt(v_hat) + eps).
template <typename Scalar>
StepStatus adamw_step(AdamWState<Scalar>& st, DenseMatrix<Scalar>& w, const DenseMatrix<Scalar>& g,
                      double eta) {
  detail::check_same_shape(w, g, "adamw_step: weight and gradient shapes differ");
  detail::check_same_shape(st.m, g, "adamw_step: state and gradient shapes differ");
  const DenseMatrix<Scalar> d = detail::adam_direction(st, g);
  const auto decay = static_cast<Scalar>(1.0 - eta * st.weight_decay);
  w = decay * w - static_cast<Scalar>(eta) * d;
  return d.isZero(0) ? StepStatus::ZeroDirection : StepStatus::Applied;
}

/// Muon matrix step with Nesterov momentum: m <- mu m + g, then
/// w <- w - eta * s * NS(g + mu m). No weight decay on this step.
template <typename Scalar>
StepStatus muon_matrix_step(MuonState<Scalar>& st, DenseMatrix<Scalar>& w, const DenseMatrix<Scalar>& g,
                            double eta) {
  detail::check_same_shape(w, g, "muon_matrix_step: weight and gradient shapes differ");
  detail::check_same_shape(st.momentum, g, "muon_matrix_step: state and gradient shapes differ");
  const auto mu = static_cast<Scalar>(st.mu);
  st.momentum = mu * st.momentum + g;
  const DenseMatrix<Scalar> nesterov = g + mu * st.momentum;
  if (nesterov.isZero(0)) return StepStatus::ZeroDirection;
  const DenseMatrix<Scalar> d = newton_schulz(nesterov, st.ns);
  w -= static_cast<Scalar>(eta * shape_scale(w.rows(), w.cols())) * d;
  return StepStatus::Applied;
}

/// PolarAdamW matrix step: NS applied to the AdamW direction, scaled by s,
/// with decoupled weight decay.
template <typename Scalar>
StepStatus polaradamw_matrix_step(PolarAdamWState<Scalar>& st, DenseMatrix<Scalar>& w,
                                  const DenseMatrix<Scalar>& g, double eta) {
  detail::check_same_shape(w, g, "polaradamw_matrix_step: weight and gradient shapes differ");
  detail::check_same_shape(st.adamw.m, g, "polaradamw_matrix_step: state and gradient shapes differ");
  const DenseMatrix<Scalar> precond = detail::adam_direction(st.adamw, g);
  const auto decay = static_cast<Scalar>(1.0 - eta * st.adamw.weight_decay);
  if (precond.isZero(0)) {
    w *= decay;
    return StepStatus::ZeroDirection;
  }
  const DenseMatrix<Scalar> d = newton_schulz(precond, st.ns);
  w = decay * w - static_cast<Scalar>(eta * shape_scale(w.rows(), w.cols())) * d;
  return StepStatus::Applied;
}

// ---------------------------------------------------------------------------
// Schedule

struct LrSchedule {
  double base_lr = 1e-3;
  int warmup_epochs = 0;
  int total_epochs = 1;
  double floor_factor = 1e-3;
};

/// Linear warmup from floor_factor*base_lr to base_lr over warmup_epochs,
/// then cosine decay towards zero over the remaining epochs.
double lr_at(const LrSchedule& schedule, int epoch);

// ---------------------------------------------------------------------------
// Parameter groups

/// Non-owning view of one trainable array. Vectors and scalars are stored as
/// single-column matrices and carry ndim < 2.
struct ParamRef {
  std::string id;
  Matrix* value = nullptr;
  int ndim = 2;
};

struct ParamSplit {
  std::vector<std::string> matrix_group;
  std::vector<std::string> aux_group;
};

/// Every ndim == 2 array goes to the matrix group, the rest to aux.
ParamSplit split_by_rank(const std::vector<ParamRef>& params);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::AdamW;
  double matrix_lr = 1e-3;  // lr of the matrix-group step
  double aux_lr = 1e-3;     // lr of the auxiliary AdamW step
  double weight_decay = 0.0;  // AdamW / PolarAdamW matrix weights
  double aux_weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double muon_mu = 0.95;
  NsConfig ns{};
};

/// Applies the arm's matrix rule to the matrix group and AdamW to the
/// auxiliary group. State is keyed by parameter id.
class GroupOptimizer {
 public:
  GroupOptimizer(OptimizerConfig config, ParamSplit split);

  /// grads[k] is the gradient of params[k]. lr_scale multiplies both group
  /// learning rates (the schedule factor for the current epoch).
  void step(const std::vector<ParamRef>& params, const std::vector<Matrix>& grads, double lr_scale);

  [[nodiscard]] const OptimizerConfig& config() const { return config_; }
  [[nodiscard]] const ParamSplit& split() const { return split_; }

  /// JSON text {param_id -> {rule, shape, t, buffers}}; doubles are written
  /// in shortest round-trip form so restore is bit-exact.
  [[nodiscard]] std::string checkpoint() const;
  void restore(const std::string& json_text);

  [[nodiscard]] const std::map<std::string, AdamWState<double>>& adamw_states() const { return adamw_; }
  [[nodiscard]] const std::map<std::string, MuonState<double>>& muon_states() const { return muon_; }
  [[nodiscard]] const std::map<std::string, PolarAdamWState<double>>& polar_states() const {
    return polar_;
  }

 private:
  enum class Rule { AdamW, Muon, PolarAdamW };
  [[nodiscard]] Rule rule_for(const std::string& id) const;

  OptimizerConfig config_;
  ParamSplit split_;
  std::map<std::string, bool> in_matrix_group_;
  std::map<std::string, AdamWState<double>> adamw_;
  std::map<std::string, MuonState<double>> muon_;
  std::map<std::string, PolarAdamWState<double>> polar_;
};

}  // namespace polarlab

#endif  // POLARLAB_OPTIM_HPP
