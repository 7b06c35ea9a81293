#ifndef POLARLAB_SO3_TESTBED_HPP
#define POLARLAB_SO3_TESTBED_HPP

// SO(3)-equivariant point-cloud regression: type-0 and type-1 channels,
// Schur-structured mixers, a Clebsch-Gordan dot-product merge, a distance
// message MLP and norm-gated vector nonlinearities. Forward and backward
// passes are written by hand.

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "polarlab/matcore.hpp"
#include "polarlab/optim.hpp"

namespace polarlab {

/// Number of Gaussian radial basis functions on pairwise distances.
inline constexpr int kRadialBasis = 8;
/// Radial basis centres are uniform on [0, kRadialMax].
inline constexpr double kRadialMax = 4.0;
inline constexpr double kRadialWidth = 0.5;

struct PointCloud {
  Matrix points;  // N x 3
  double target = 0.0;
};

/// Largest eigenvalue of X^T X / N.
double compute_target(const Matrix& points);

/// Gaussian clouds (per-coordinate variance 1/3) scaled by a per-cloud
/// radius drawn uniformly from [0.5, 2].
std::vector<PointCloud> generate_dataset(int n_clouds, int n_points, Rng& rng);

/// Row-wise rotation of a cloud: x_i -> R x_i.
Matrix rotate_points(const Matrix& points, const Matrix& rotation);

/// Haar rotation in SO(3): a Haar O(3) sample with its first column negated
/// when the determinant is -1.
Matrix random_rotation(Rng& rng);

/// One equivariant layer. The vector mixer w11 is the m x m_in multiplicity
/// matrix B; its action on the vector block is B (x) I_3.
struct So3LayerParams {
  Eigen::Index m_in = 1;
  Eigen::Index m = 1;

  Matrix w00;     // m x m_in          scalar mixer
  Matrix w11;     // m x m_in          vector mixer
  Matrix cg_w;    // m x (m + m(m+1)/2) Clebsch-Gordan merge
  Matrix cg_b;    // m x 1
  Matrix msg_w1;  // m x (m_in + kRadialBasis)
  Matrix msg_b1;  // m x 1
  Matrix msg_w2;  // 2m x m: m scalar messages, then m vector-message weights
  Matrix msg_b2;  // 2m x 1
  Matrix gate;    // m x 1             gamma of the norm gate

  /// Negative control only: replaces B (x) I_3 by an unconstrained
  /// 3m x 3m_in matrix acting on channel-major [c*3 + axis] vectors. Breaks
  /// equivariance; backward refuses models carrying it.
  std::optional<Matrix> debug_full_w11;
};

struct So3Model {
  int hidden_channels = 1;
  std::vector<So3LayerParams> layers;
  Matrix readout_w;  // 1 x m_last
  Matrix readout_b;  // 1 x 1

  /// Gaussian(0, 1/fan_in) weights, zero biases and unit gates. The first
  /// layer reads m_in = 1 scalar (|x|^2) and one vector (x).
  static So3Model create(int hidden_channels, int n_layers, Rng& rng);

  /// Same structure, every array zero.
  [[nodiscard]] So3Model zeros_like() const;

  /// Mutable views of every trainable array in a fixed order. Any caches
  /// produced before this call become stale.
  std::vector<ParamRef> parameters();

  [[nodiscard]] std::uint64_t version() const { return version_; }
  [[nodiscard]] std::size_t parameter_count() const;

 private:
  std::uint64_t version_ = 0;
};

/// Matrix group = every 2-D array (w00, w11, cg_w, msg_w1, msg_w2 per layer
/// and readout_w); biases, gates and readout_b go to the auxiliary group.
ParamSplit split_parameters(So3Model& model);

struct LayerCache {
  Matrix s_in;                  // N x m_in
  std::array<Matrix, 3> v_in;   // per axis, N x m_in
  Matrix hidden;                // pairs x m, message MLP activations
  Matrix u;                     // N x m, mixed scalars plus messages
  std::array<Matrix, 3> vm;     // per axis, N x m, mixed vectors plus messages
  Matrix dots;                  // N x m(m+1)/2
  Matrix s_act;                 // N x m, tanh(z)
  Matrix norms;                 // N x m
  Matrix gates;                 // N x m, sigmoid(gamma * norm)
  Matrix s_out;                 // N x m
  std::array<Matrix, 3> v_out;  // per axis, N x m
};

struct ForwardCache {
  std::uint64_t model_version = 0;
  const So3Model* model = nullptr;
  Eigen::Index n_points = 0;
  Matrix radial;                // pairs x kRadialBasis
  std::array<Vector, 3> delta;  // pairs: x_j - x_i per axis
  std::vector<LayerCache> layers;
  Matrix pooled;                // 1 x m_last
  double prediction = 0.0;
};

/// Runs the model on one cloud and keeps every intermediate for backward.
double forward(const So3Model& model, const Matrix& points, ForwardCache& cache);
double predict(const So3Model& model, const Matrix& points);

/// Adds d_loss * d(prediction)/d(theta) into grads (shaped like the model).
void backward_accumulate(const So3Model& model, const ForwardCache& cache, double d_loss,
                         So3Model& grads);
So3Model backward(const So3Model& model, const ForwardCache& cache, double d_loss);

struct LossValue {
  double loss = 0.0;
  double d_pred = 0.0;
};
LossValue mse_loss(double pred, double target);

/// max over rotations of |f(RX) - f(X)| / (|f(X)| + 1e-9).
double invariance_check(const So3Model& model, const Matrix& points, int n_rotations, Rng& rng);

/// Mean squared error of the model over a dataset.
double evaluate_mse(const So3Model& model, const std::vector<PointCloud>& data);

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  int hc = 16;
  int n_layers = 3;
  int epochs = 100;
  int warmup_epochs = 10;
  int patience = 30;
  /// Matrix-group learning rate; <= 0 selects the default for the optimizer.
  double base_lr = 0.0;
  /// Auxiliary AdamW learning rate; <= 0 selects the default.
  double aux_lr = 0.0;
  OptimizerKind optimizer = OptimizerKind::AdamW;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
  int n_train = 2048;
  int n_test = 512;
  int n_points = 32;
  int batch_size = 64;
  Precision ns_precision = Precision::Bf16Emulated;
};

/// Default learning rates of each arm (matrix group, auxiliary group).
double default_matrix_lr(OptimizerKind kind);
double default_aux_lr(OptimizerKind kind);

struct EpochRecord {
  int epoch = 0;
  double lr_scale = 0.0;
  double train_mse = 0.0;
  double test_mse = 0.0;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  double final_test_mse = 0.0;  // best test MSE over the run
  int best_epoch = -1;          // -1 when no epoch ran
  int stopped_epoch = 0;        // number of epochs actually run
};

/// Dataset and initial parameters depend on config.seed only, so arms that
/// share a seed see identical data and initialisation.
struct TrainSetup {
  std::vector<PointCloud> train;
  std::vector<PointCloud> test;
  So3Model model;
};
TrainSetup make_train_setup(const TrainConfig& config);

/// Full training run. Throws DivergenceDetected when the training loss
/// becomes non-finite.
TrainResult train(const TrainConfig& config);

}  // namespace polarlab

#endif  // POLARLAB_SO3_TESTBED_HPP
